"""Tiny multi-scale backbone and the full image-to-task-maps model."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import ops
from ..config import ModelConfig, stream
from ..decoder import Decoder, LinearDecoder
from ..nn import Conv2d, Module
from ..tensor import Tensor
from .tasks import TaskSpec, task_specs

PATCH = 4
BACKBONE_WIDTH = 32


class ToyBackbone(Module):
    """Stride-4 patch embedding then residual conv-GELU stages; one tap per stage."""

    def __init__(self, width: int, rng: np.random.Generator, *, depth: int = 4, dtype=np.float64):
        self.embed = Conv2d(3 * PATCH * PATCH, width, 1, rng, dtype=dtype)
        self.stages = [Conv2d(width, width, 3, rng, dtype=dtype) for _ in range(depth)]

    def forward(self, image: Tensor) -> list[Tensor]:
        x = self.embed(ops.space_to_depth(image, PATCH))
        taps = []
        for conv in self.stages:
            x = x + ops.gelu(conv(x))
            taps.append(x)
        return taps


class MultiTaskModel(Module):
    def __init__(
        self,
        cfg: ModelConfig,
        image_size: tuple[int, int] = (64, 64),
        *,
        decoder: str = "mlore",
        backbone_width: int = BACKBONE_WIDTH,
        dtype=np.float32,
    ):
        h, w = image_size
        if h % PATCH or w % PATCH or h < 4 * PATCH or w < 4 * PATCH:
            raise ValueError(f"image size {h}x{w} must be a multiple of {PATCH} and at least {4 * PATCH}")
        self.cfg = cfg
        self.image_size = (h, w)
        self.decoder_kind = decoder
        self.tasks: list[TaskSpec] = task_specs(cfg.tasks)
        rng = stream(cfg.seed, "init")
        self.backbone = ToyBackbone(backbone_width, rng, depth=cfg.scales, dtype=dtype)
        outs = [t.out_channels for t in self.tasks]
        hw = (h // PATCH, w // PATCH)
        if decoder == "mlore":
            self.decoder = Decoder(cfg, backbone_width, hw, outs, rng, dtype=dtype)
        elif decoder == "linear":
            self.decoder = LinearDecoder(cfg, backbone_width, outs, rng, dtype=dtype)
        else:
            raise ValueError(f"decoder must be 'mlore' or 'linear', got {decoder!r}")
        self.dtype = np.dtype(dtype)

    def forward(self, images: np.ndarray, noise_rng=None, fused: bool = False):
        """Predictions at image resolution plus per-module routings."""
        x = Tensor(np.asarray(images, dtype=self.dtype))
        preds, routings = self.decoder(self.backbone(x), noise_rng, fused)
        return [ops.upsample_bilinear(p, self.image_size) for p in preds], routings

    def balance_loss(self, routings: Sequence) -> Tensor | None:
        if not routings:
            return None
        return self.decoder.balance_loss(routings)
