"""Seeded training loop, checkpoint I/O and evaluation for the toy bench."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import blob
from ..config import ModelConfig, stream
from .data import ToyDataset
from .model import MultiTaskModel
from .tasks import MetricAccumulator, MetricsReport, delta_m, task_losses

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, reason: str, last_good: Path | None):
        super().__init__(f"training diverged at step {step}: {reason}; last good checkpoint: {last_good}")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainSettings:
    iters: int = 1000
    batch_size: int = 4
    lr: float = 2e-3
    optimizer: str = "adam"  # or "sgd" (with momentum)
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    schedule: str = "constant"  # or "cosine"
    checkpoint_every: int = 0
    decoder: str = "mlore"
    dtype: str = "float32"

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.iters < 0 or self.batch_size < 1:
            raise ValueError("iters must be >= 0 and batch_size >= 1")
        self.betas = tuple(self.betas)


@dataclass
class TrainResult:
    model: MultiTaskModel
    losses: list[dict[str, float]] = field(default_factory=list)
    gate_log: list[list[list[float]]] = field(default_factory=list)
    checkpoint: Path | None = None

    @property
    def total_losses(self) -> list[float]:
        return [row["total"] for row in self.losses]


class Optimizer:
    def __init__(self, params, settings: TrainSettings):
        self.params = params
        self.s = settings
        self.state = [np.zeros_like(p.data) for p in params]
        self.state2 = [np.zeros_like(p.data) for p in params] if settings.optimizer == "adam" else None
        self.t = 0

    def lr(self) -> float:
        if self.s.schedule == "cosine" and self.s.iters > 0:
            return 0.5 * self.s.lr * (1.0 + math.cos(math.pi * self.t / self.s.iters))
        return self.s.lr

    def step(self) -> None:
        lr = self.lr()
        self.t += 1
        if self.s.optimizer == "sgd":
            for p, v in zip(self.params, self.state):
                if p.grad is None:
                    continue
                v *= self.s.momentum
                v += p.grad
                p.data -= lr * v
            return
        b1, b2 = self.s.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.state, self.state2):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + 1e-8)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def build_model(cfg: ModelConfig, settings: TrainSettings, image_size) -> MultiTaskModel:
    return MultiTaskModel(cfg, tuple(image_size), decoder=settings.decoder, dtype=np.dtype(settings.dtype))


def checkpoint_bytes(model: MultiTaskModel, settings: TrainSettings, step: int) -> bytes:
    meta = {
        "config": model.cfg.to_dict(),
        "settings": asdict(settings),
        "image_size": list(model.image_size),
        "step": step,
    }
    return blob.dumps(model.state_dict(), meta)


def save_checkpoint(model: MultiTaskModel, settings: TrainSettings, step: int, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model, settings, step))
    return path


def load_checkpoint(path: str | Path) -> tuple[MultiTaskModel, TrainSettings, dict]:
    tensors, meta = blob.load(path)
    cfg = ModelConfig.from_dict(meta["config"])
    settings = TrainSettings(**meta["settings"])
    model = build_model(cfg, settings, meta["image_size"])
    model.load_state_dict(tensors)
    return model, settings, meta


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _gate_stats(routings) -> list[list[float]]:
    """Per module: fraction of (task, sample) pairs that activated each expert this step."""
    out = []
    for module_routings in routings:
        masks = np.concatenate([r.mask for r in module_routings], axis=0)
        out.append(masks.mean(axis=0).round(6).tolist())
    return out


def train(
    cfg: ModelConfig,
    dataset: ToyDataset,
    settings: TrainSettings | None = None,
    out_dir: str | Path | None = None,
    *,
    model: MultiTaskModel | None = None,
) -> TrainResult:
    """Deterministic given ``cfg.seed``: init, batch order and router noise come from named sub-streams."""
    settings = settings or TrainSettings()
    model = model or build_model(cfg, settings, dataset.size)
    model.train()
    params = model.parameters()
    opt = Optimizer(params, settings)
    order_rng = stream(cfg.seed, "batches")
    noise_rng = stream(cfg.seed, "routing-noise") if cfg.noise else None
    out_dir = Path(out_dir) if out_dir is not None else None
    result = TrainResult(model)
    last_good_state = {k: v.copy() for k, v in model.state_dict().items()}
    last_good_path = None

    perm = order_rng.permutation(len(dataset))
    cursor = 0
    for step in range(settings.iters):
        if cursor + settings.batch_size > len(perm):
            perm = order_rng.permutation(len(dataset))
            cursor = 0
        idx = np.sort(perm[cursor : cursor + settings.batch_size])
        cursor += settings.batch_size
        batch = dataset.batch(idx)

        try:
            preds, routings = model(batch["images"], noise_rng)
            total, parts = task_losses(preds, batch, model.tasks, model.balance_loss(routings))
        except FloatingPointError as exc:
            raise _abort(model, settings, step, str(exc), last_good_state, out_dir) from exc
        if not math.isfinite(total.item()):
            raise _abort(model, settings, step, f"loss is {total.item()}", last_good_state, out_dir)

        model.zero_grad()
        total.backward()
        opt.step()

        parts["total"] = total.item()
        result.losses.append(parts)
        result.gate_log.append(_gate_stats(routings))
        if step % 100 == 0:
            logger.info("step %d loss %.4f", step, parts["total"])
        if settings.checkpoint_every and (step + 1) % settings.checkpoint_every == 0:
            last_good_state = {k: v.copy() for k, v in model.state_dict().items()}
            if out_dir is not None:
                last_good_path = save_checkpoint(model, settings, step + 1, out_dir / f"step{step + 1:06d}.ckpt")

    if out_dir is not None:
        result.checkpoint = save_checkpoint(model, settings, settings.iters, out_dir / "final.ckpt")
    del last_good_path
    return result


def _abort(model, settings, step, reason, last_good_state, out_dir) -> TrainingDiverged:
    path = None
    model.load_state_dict(last_good_state)
    if out_dir is not None:
        path = save_checkpoint(model, settings, step, Path(out_dir) / "last_good.ckpt")
    return TrainingDiverged(step, reason, path)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def predict(model: MultiTaskModel, dataset: ToyDataset, batch_size: int = 8, fused: bool = False):
    """Yields (batch, raw predictions as numpy, routings) in eval mode with noise off."""
    was_training = model.training
    model.eval()
    try:
        for lo in range(0, len(dataset), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(dataset)))
            batch = dataset.batch(idx)
            preds, routings = model(batch["images"], None, fused)
            yield batch, [p.data for p in preds], routings
    finally:
        model.train(was_training)


def evaluate(
    model: MultiTaskModel,
    dataset: ToyDataset,
    baseline: MetricsReport | dict | None = None,
    *,
    batch_size: int = 8,
) -> MetricsReport:
    accs = [MetricAccumulator(t) for t in model.tasks]
    for batch, preds, _ in predict(model, dataset, batch_size):
        for acc, p in zip(accs, preds):
            acc.update(p, batch)
    metrics = {acc.spec.name: acc.value() for acc in accs}
    kinds = {t.name: t.metric for t in model.tasks}
    report = MetricsReport(metrics, kinds)
    if baseline is not None:
        base = baseline.metrics if isinstance(baseline, MetricsReport) else baseline
        report.delta_m = delta_m(metrics, base, model.tasks)
    return report
