"""Task registry, per-task losses, dataset-level metrics and the MTL gain."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .. import ops
from ..tensor import Tensor
from .data import NUM_CLASSES

LOSS_KINDS = ("cross-entropy", "L1", "balanced-binary-cross-entropy")
METRIC_KINDS = ("mIoU", "RMSE", "mErr", "F1")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    out_channels: int
    loss: str
    metric: str
    higher_is_better: bool

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.metric not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.metric!r}")


REGISTRY: dict[str, TaskSpec] = {
    "semseg": TaskSpec("semseg", NUM_CLASSES, "cross-entropy", "mIoU", True),
    "boundary": TaskSpec("boundary", 1, "balanced-binary-cross-entropy", "F1", True),
    "depth": TaskSpec("depth", 1, "L1", "RMSE", False),
    "normals": TaskSpec("normals", 2, "L1", "mErr", False),
}


def task_specs(names: Sequence[str]) -> list[TaskSpec]:
    missing = [n for n in names if n not in REGISTRY]
    if missing:
        raise KeyError(f"no toy task registered for {missing}; known: {sorted(REGISTRY)}")
    return [REGISTRY[n] for n in names]


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def task_loss(spec: TaskSpec, pred: Tensor, batch: Mapping[str, np.ndarray]) -> Tensor:
    if spec.name == "semseg":
        return ops.cross_entropy(pred, batch["seg"])
    if spec.name == "boundary":
        return ops.balanced_bce_with_logits(pred, batch["boundary"][:, None])
    if spec.name == "depth":
        return ops.masked_l1(pred, batch["depth"])
    if spec.name == "normals":
        return ops.masked_l1(pred, batch["normals"], batch["normal_mask"][:, None])
    raise KeyError(spec.name)


def task_losses(
    preds: Sequence[Tensor],
    batch: Mapping[str, np.ndarray],
    tasks: Sequence[TaskSpec],
    balance: Tensor | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Unweighted sum of task losses plus the (already weighted) balance term."""
    bad = [t.name for t, p in zip(tasks, preds) if not np.all(np.isfinite(p.data))]
    if bad:
        detail = {t.name: int((~np.isfinite(p.data)).sum()) for t, p in zip(tasks, preds)}
        raise FloatingPointError(f"non-finite predictions for tasks {bad}; non-finite counts per task: {detail}")
    total = None
    parts: dict[str, float] = {}
    for spec, pred in zip(tasks, preds):
        loss = task_loss(spec, pred, batch)
        parts[spec.name] = loss.item()
        total = loss if total is None else total + loss
    if balance is not None:
        parts["balance"] = balance.item()
        total = total + balance
    return total, parts


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


class MetricAccumulator:
    """Sums per-sample statistics; totals use exact integer counts or ``math.fsum``
    so results do not depend on sample order."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.inter = np.zeros(NUM_CLASSES, dtype=np.int64)
        self.union = np.zeros(NUM_CLASSES, dtype=np.int64)
        self.tp = self.fp = self.fn = 0
        self.sums: list[float] = []
        self.count = 0

    def update(self, pred: np.ndarray, batch: Mapping[str, np.ndarray]) -> None:
        """``pred`` holds raw head outputs for a batch."""
        name = self.spec.name
        if name == "semseg":
            labels = pred.argmax(axis=1)
            target = batch["seg"]
            for c in range(NUM_CLASSES):
                p, t = labels == c, target == c
                self.inter[c] += int(np.count_nonzero(p & t))
                self.union[c] += int(np.count_nonzero(p | t))
        elif name == "boundary":
            p = pred[:, 0] > 0.0  # sigmoid(z) > 0.5
            t = batch["boundary"] > 0
            self.tp += int(np.count_nonzero(p & t))
            self.fp += int(np.count_nonzero(p & ~t))
            self.fn += int(np.count_nonzero(~p & t))
        elif name == "depth":
            err = (pred.astype(np.float64) - batch["depth"]) ** 2
            self.sums.extend(float(e.sum()) for e in err)
            self.count += err.size
        elif name == "normals":
            mask = batch["normal_mask"] > 0
            p = pred.astype(np.float64)
            norm = np.sqrt((p**2).sum(axis=1))
            cos = (p * batch["normals"]).sum(axis=1) / np.maximum(norm, 1e-12)
            ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
            self.sums.extend(float(a[m].sum()) for a, m in zip(ang, mask))
            self.count += int(mask.sum())

    def value(self) -> float:
        name = self.spec.name
        if name == "semseg":
            present = self.union > 0
            return float(np.mean(self.inter[present] / self.union[present])) if present.any() else 1.0
        if name == "boundary":
            denom = 2 * self.tp + self.fp + self.fn
            return 1.0 if denom == 0 else 2 * self.tp / denom
        if name == "depth":
            return math.sqrt(math.fsum(self.sums) / max(self.count, 1))
        return math.fsum(self.sums) / max(self.count, 1)


def delta_m(model: Mapping[str, float], baseline: Mapping[str, float], tasks: Sequence[TaskSpec]) -> float:
    """Mean signed relative change in percent, sign flipped for lower-is-better metrics."""
    terms = []
    for spec in tasks:
        if spec.name not in model or spec.name not in baseline:
            raise KeyError(f"metric for task {spec.name!r} missing")
        b = baseline[spec.name]
        if b == 0:
            raise ZeroDivisionError(f"baseline metric for {spec.name!r} is zero")
        sign = 1.0 if spec.higher_is_better else -1.0
        terms.append(sign * (model[spec.name] - b) / b)
    return 100.0 * sum(terms) / len(terms)


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    kinds: dict[str, str] = field(default_factory=dict)
    delta_m: float | None = None

    def to_text(self) -> str:
        body = {"metrics": self.metrics, "kinds": self.kinds}
        if self.delta_m is not None:
            body["delta_m"] = self.delta_m
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(d["metrics"], d.get("kinds", {}), d.get("delta_m"))
