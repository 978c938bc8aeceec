"""Inference-time folding of an MLoRE module into one 3x3 conv per task.

With BatchNorm in eval mode and the router's gates fixed, every path of the
module is linear in its input, so

    W_r = W_g + bn_scale * sum_k g_k (W_b^k W_a^k) + s * W_b^sp W_a^sp
    b_r = b_g + bn_scale * (sum_k g_k (b_b^k W_a^k + b_a^k) - mu) + beta + s * (b_b^sp W_a^sp + b_a^sp)

where ``bn_scale = gamma / sqrt(var + eps)``. Gates depend on the input, so
folding happens per (task, sample).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .config import ModelConfig
from .decoder import GenericPath, LowRankExpert, MLoREModule, Routing
from .nn import BatchNorm2d
from .tensor import ShapeError, Tensor, concat

DOUBLE_TOL = 1e-10
SINGLE_TOL = 1e-5


class ReparamError(RuntimeError):
    pass


@dataclass
class FusedConv:
    weight: np.ndarray  # (3, 3, C, C)
    bias: np.ndarray  # (C,)
    task: int = 0


@dataclass
class FoldedSharedPath:
    weight: np.ndarray
    bias: np.ndarray


def _to_3x3(w: np.ndarray) -> np.ndarray:
    if w.shape[0] == 3:
        return w
    out = np.zeros((3, 3) + w.shape[2:], dtype=w.dtype)
    out[1, 1] = w[0, 0]
    return out


def compose_lowrank(expert: LowRankExpert) -> tuple[np.ndarray, np.ndarray]:
    """Single kernel equal to the expert's 3x3 conv followed by its 1x1 conv."""
    wa = expert.w_a.data[0, 0]
    weight = expert.w_b.data @ wa
    bias = expert.b_b.data @ wa + expert.b_a.data
    return _to_3x3(weight), bias


def _stacked(experts: Sequence[LowRankExpert]) -> tuple[np.ndarray, np.ndarray]:
    pairs = [compose_lowrank(e) for e in experts]
    return np.stack([w for w, _ in pairs]), np.stack([b for _, b in pairs])


def fold_shared(
    gates: np.ndarray,
    experts: Sequence[LowRankExpert],
    bn: BatchNorm2d,
    *,
    composed: tuple[np.ndarray, np.ndarray] | None = None,
) -> FoldedSharedPath:
    if bn.training:
        raise ReparamError("BatchNorm must be in eval mode to fold; training-time folding is unsupported")
    gates = np.asarray(gates)
    if gates.shape != (len(experts),):
        raise ShapeError(f"gate vector of length {gates.shape} for {len(experts)} experts")
    ws, bs = composed if composed is not None else _stacked(experts)
    active = np.flatnonzero(gates)
    w = np.tensordot(gates[active], ws[active], axes=1)
    b = gates[active] @ bs[active]
    scale = bn.scale()
    return FoldedSharedPath(w * scale, scale * (b - bn.running_mean) + bn.beta.data)


def fuse_task(
    t: int,
    generic: GenericPath,
    folded: FoldedSharedPath,
    specific: LowRankExpert,
    s_t: float,
    *,
    specific_composed: tuple[np.ndarray, np.ndarray] | None = None,
) -> FusedConv:
    wg, bg = generic.w_g.data, generic.b_g.data
    if folded.weight.shape != wg.shape:
        raise ShapeError(f"folded shared path {folded.weight.shape} does not match generic path {wg.shape}")
    ws, bs = specific_composed if specific_composed is not None else compose_lowrank(specific)
    if ws.shape != wg.shape:
        raise ShapeError(f"specific expert composes to {ws.shape}, generic path is {wg.shape}")
    return FusedConv(wg + folded.weight + s_t * ws, bg + folded.bias + s_t * bs, t)


def fused_forward(x_t: Tensor, f: FusedConv) -> Tensor:
    return ops.conv2d(x_t, Tensor(f.weight), Tensor(f.bias))


def fuse_sample(module: MLoREModule, t: int, gates: np.ndarray, s_t: float, cache=None) -> FusedConv:
    cache = cache if cache is not None else {}
    if "shared" not in cache:
        cache["shared"] = _stacked(module.shared)
    key = ("specific", t)
    if key not in cache:
        cache[key] = compose_lowrank(module.specific[t])
    folded = fold_shared(gates, module.shared, module.expert_bn[t], composed=cache["shared"])
    return fuse_task(t, module.generic, folded, module.specific[t], s_t, specific_composed=cache[key])


def fused_mix(module: MLoREModule, xs: Sequence[Tensor]) -> tuple[list[Tensor], list[Routing]]:
    """Drop-in replacement for ``module.mix`` at inference: route, fold, one conv per sample."""
    if module.training:
        raise ReparamError("re-parameterization needs the module in eval mode")
    cache: dict = {}
    outs, routings = [], []
    for t, x_t in enumerate(xs):
        routing = module.route(t, x_t)
        g, s = routing.gates.data, routing.scale.data
        per_sample = [fused_forward(x_t[b : b + 1], fuse_sample(module, t, g[b], float(s[b]), cache)) for b in range(x_t.shape[0])]
        outs.append(concat(per_sample, axis=0))
        routings.append(routing)
    return outs, routings


def frozen_gate_mix(module: MLoREModule, xs: Sequence[Tensor]) -> list[Tensor]:
    """Fold once per task with batch-averaged gates and scales.

    Latency benchmarking only: the result is NOT equivalent to the routed
    module, because averaged gates differ from each sample's own gates.
    """
    if module.training:
        raise ReparamError("re-parameterization needs the module in eval mode")
    cache: dict = {}
    outs = []
    for t, x_t in enumerate(xs):
        routing = module.route(t, x_t)
        f = fuse_sample(module, t, routing.gates.data.mean(axis=0), float(routing.scale.data.mean()), cache)
        outs.append(fused_forward(x_t, f))
    return outs


# --------------------------------------------------------------------------
# equivalence verification
# --------------------------------------------------------------------------


@dataclass
class TrialResult:
    index: int
    num_experts: int
    channels: int
    top_k: int
    rel_error: float


@dataclass
class EquivalenceReport:
    precision: str
    tolerance: float
    max_rel_error: float = 0.0
    trials: list[TrialResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_text(self) -> str:
        lines = [
            f"precision: {self.precision}",
            f"tolerance: {self.tolerance:.1e}",
            f"trials: {len(self.trials)}",
            f"max_rel_error: {self.max_rel_error:.3e}",
            f"result: {'PASS' if self.passed else 'FAIL'}",
            "trial,num_experts,channels,top_k,rel_error",
        ]
        lines += [f"{r.index},{r.num_experts},{r.channels},{r.top_k},{r.rel_error:.3e}" for r in self.trials]
        return "\n".join(lines) + "\n"


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| over max |b|, so near-zero entries do not dominate."""
    denom = max(float(np.max(np.abs(b))), 1e-30)
    return float(np.max(np.abs(a - b))) / denom


def randomize_module(module: MLoREModule, rng: np.random.Generator) -> None:
    """Non-trivial biases and BatchNorm statistics so every fold term is exercised."""
    for name, p in module.named_parameters():
        if name.endswith(("b_b", "b_a", "b_g", "bias", "beta")):
            p.data = (0.1 * rng.standard_normal(p.shape)).astype(p.dtype)
        elif name.endswith("gamma"):
            p.data = rng.uniform(0.5, 1.5, p.shape).astype(p.dtype)
    for bn in module.expert_bn:
        bn.running_mean = (0.1 * rng.standard_normal(bn.running_mean.shape)).astype(bn.running_mean.dtype)
        bn.running_var = rng.uniform(0.5, 2.0, bn.running_var.shape).astype(bn.running_var.dtype)


def acceptance_grid() -> list[ModelConfig]:
    """N in {5, 15}, C in {16, 64}, k in {3, 9, N} where k <= N, ranks from 16 step 8."""
    grid = []
    for n in (5, 15):
        for c in (16, 64):
            for k in sorted({3, 9, n}):
                if k <= n:
                    grid.append(ModelConfig(tasks=("a", "b"), num_experts=n, top_k=k, channels=c, specific_rank=8, scales=1))
    return grid


def verify_equivalence(
    configs: ModelConfig | Sequence[ModelConfig] | None = None,
    trials: int = 100,
    precision: str = "double",
    *,
    seed: int = 0,
    hw: tuple[int, int] = (6, 6),
    batch: int = 2,
    module: MLoREModule | None = None,
    bias_corruption: float = 0.0,
) -> EquivalenceReport:
    """Compare the multi-branch eval forward with the folded single conv on fresh random trials.

    ``bias_corruption`` perturbs every fused bias and exists only as a
    negative control.
    """
    if precision not in ("double", "single"):
        raise ValueError(f"precision must be 'double' or 'single', got {precision!r}")
    if module is not None and module.training:
        raise ReparamError("verify_equivalence needs an eval-mode module")
    dtype = np.float64 if precision == "double" else np.float32
    report = EquivalenceReport(precision, DOUBLE_TOL if precision == "double" else SINGLE_TOL)
    if configs is None:
        configs = acceptance_grid()
    elif isinstance(configs, ModelConfig):
        configs = [configs]
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    for i in range(trials):
        cfg = configs[i % len(configs)]
        if module is not None:
            m = module
        else:
            m = MLoREModule(cfg, cfg.channels, hw, rng, dtype=dtype)
            randomize_module(m, rng)
            m.eval()
        h, w = m.hw
        xs = [Tensor(rng.standard_normal((batch, cfg.channels, h, w)).astype(dtype)) for _ in range(m.num_tasks)]
        ref, _ = m.mix(xs)
        fused, _ = fused_mix(m, xs)
        err = 0.0
        for a, b in zip(fused, ref):
            err = max(err, relative_error(a.data + bias_corruption, b.data))
        report.trials.append(TrialResult(i, m.num_experts, cfg.channels, m.top_k, err))
        report.max_rel_error = max(report.max_rel_error, err)
    report.seconds = time.perf_counter() - start
    return report
