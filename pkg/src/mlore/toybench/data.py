"""Synthetic multi-task scenes: shapes with segmentation, edge, distance and normal targets."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..config import stream

MAGIC = b"MLOREDS1"
SHAPES = ("rectangle", "circle", "triangle")
NUM_CLASSES = len(SHAPES) + 1  # background is class 0
_BASE_COLORS = np.array([[0.85, 0.25, 0.2], [0.2, 0.75, 0.3], [0.25, 0.35, 0.9]])
_PLANES = (
    ("images", "<f4"),
    ("seg", "u1"),
    ("boundary", "u1"),
    ("depth", "<f4"),
    ("normals", "<f4"),
    ("normal_mask", "u1"),
)


@dataclass
class ToySample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    seg: np.ndarray  # (H, W) class ids
    boundary: np.ndarray  # (H, W) {0, 1}
    depth: np.ndarray  # (1, H, W) signed distance scaled to [-1, 1]
    normals: np.ndarray  # (2, H, W) unit gradient of depth where defined
    normal_mask: np.ndarray  # (H, W) {0, 1}


@dataclass
class ToyDataset:
    images: np.ndarray
    seg: np.ndarray
    boundary: np.ndarray
    depth: np.ndarray
    normals: np.ndarray
    normal_mask: np.ndarray
    seed: int = 0

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def __getitem__(self, i: int) -> ToySample:
        return ToySample(*(getattr(self, name)[i] for name, _ in _PLANES))

    def batch(self, idx) -> dict[str, np.ndarray]:
        idx = np.asarray(idx)
        return {name: getattr(self, name)[idx] for name, _ in _PLANES}

    def subset(self, idx) -> "ToyDataset":
        idx = np.asarray(idx)
        return ToyDataset(*(getattr(self, name)[idx] for name, _ in _PLANES), seed=self.seed)

    # -- binary form -----------------------------------------------------------

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name, dtype in _PLANES:
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype)
            entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        header = json.dumps({"seed": self.seed, "planes": entries}, sort_keys=True).encode()
        return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ToyDataset":
        if raw[:8] != MAGIC:
            raise ValueError("not a toy dataset file (bad magic)")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + hlen])
        base = 16 + hlen
        planes = {}
        for e in header["planes"]:
            count = int(np.prod(e["shape"]))
            arr = np.frombuffer(raw, dtype=e["dtype"], count=count, offset=base + e["offset"])
            planes[e["name"]] = arr.reshape(e["shape"]).copy()
        return cls(**planes, seed=header["seed"])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ToyDataset":
        return cls.from_bytes(Path(path).read_bytes())


def seg_edges(seg: np.ndarray) -> np.ndarray:
    """1 where any 4-neighbour inside the image carries a different label."""
    edge = np.zeros(seg.shape, dtype=bool)
    diff_v = seg[1:, :] != seg[:-1, :]
    diff_h = seg[:, 1:] != seg[:, :-1]
    edge[1:, :] |= diff_v
    edge[:-1, :] |= diff_v
    edge[:, 1:] |= diff_h
    edge[:, :-1] |= diff_h
    return edge.astype(np.uint8)


def signed_distance(seg: np.ndarray) -> np.ndarray:
    fg = seg > 0
    sd = ndimage.distance_transform_edt(fg) - ndimage.distance_transform_edt(~fg)
    peak = np.abs(sd).max()
    return (sd / peak if peak > 0 else sd).astype(np.float32)


def gradient_normals(depth: np.ndarray, floor: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    gy, gx = np.gradient(depth.astype(np.float64))
    mag = np.hypot(gx, gy)
    valid = mag > floor
    safe = np.where(valid, mag, 1.0)
    normals = np.stack([np.where(valid, gx / safe, 0.0), np.where(valid, gy / safe, 0.0)])
    return normals.astype(np.float32), valid.astype(np.uint8)


def _shape_mask(kind: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    lo = max(3, min(h, w) // 10)
    hi = max(lo + 1, min(h, w) // 3)
    cy, cx = rng.uniform(0.15 * h, 0.85 * h), rng.uniform(0.15 * w, 0.85 * w)
    if kind == "rectangle":
        ry, rx = rng.uniform(lo, hi, size=2)
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    if kind == "circle":
        r = rng.uniform(lo, hi)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # triangle: three vertices on a jittered circle, inside all three half-planes
    r = rng.uniform(lo, hi) * 1.3
    angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, size=3)
    vy, vx = cy + r * np.sin(angles), cx + r * np.cos(angles)
    inside = np.ones((h, w), dtype=bool)
    sign = np.sign((vx[1] - vx[0]) * (vy[2] - vy[0]) - (vy[1] - vy[0]) * (vx[2] - vx[0]))
    for a, b in ((0, 1), (1, 2), (2, 0)):
        cross = (vx[b] - vx[a]) * (yy - vy[a]) - (vy[b] - vy[a]) * (xx - vx[a])
        inside &= sign * cross >= 0
    return inside


def _render(rng: np.random.Generator, h: int, w: int):
    while True:
        seg = np.zeros((h, w), dtype=np.uint8)
        bg = rng.uniform(0.3, 0.6) + rng.uniform(-0.15, 0.15) * np.linspace(-1, 1, w)[None, :]
        image = np.repeat(np.broadcast_to(bg, (h, w))[None], 3, axis=0).astype(np.float64)
        for _ in range(int(rng.integers(1, 5))):
            cls = int(rng.integers(len(SHAPES)))
            mask = _shape_mask(SHAPES[cls], rng, h, w)
            color = np.clip(_BASE_COLORS[cls] + rng.uniform(-0.1, 0.1, size=3), 0, 1)
            seg[mask] = cls + 1
            image[:, mask] = color[:, None]
        if (seg > 0).any():
            break
    image += rng.normal(0.0, 0.04, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), seg


def gen_dataset(seed: int, count: int, h: int = 64, w: int | None = None) -> ToyDataset:
    """Byte-deterministic for fixed (seed, count, h, w)."""
    w = h if w is None else w
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if h < 16 or w < 16:
        raise ValueError(f"image size must be at least 16x16, got {h}x{w}")
    rng = stream(seed, "data")
    images = np.empty((count, 3, h, w), np.float32)
    seg = np.empty((count, h, w), np.uint8)
    boundary = np.empty((count, h, w), np.uint8)
    depth = np.empty((count, 1, h, w), np.float32)
    normals = np.empty((count, 2, h, w), np.float32)
    nmask = np.empty((count, h, w), np.uint8)
    for i in range(count):
        images[i], seg[i] = _render(rng, h, w)
        boundary[i] = seg_edges(seg[i])
        depth[i, 0] = signed_distance(seg[i])
        normals[i], nmask[i] = gradient_normals(depth[i, 0])
    return ToyDataset(images, seg, boundary, depth, normals, nmask, seed=seed)
