"""Mixture of low-rank experts: module, router, stacking and multi-scale decoder.

One module turns T task features into T outputs through three parallel
linear paths::

    S_t = generic(X_t) + BN_t(sum_{k in K_t} g_tk * expert_k(X_t)) + s_t * specific_t(X_t)

The generic 3x3 conv is shared by every task and sees a detached copy of its
input, the shared low-rank experts are mixed by a per-task noisy top-k
router, and each task owns one more low-rank expert scaled by the router's
extra output ``s_t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .config import ModelConfig
from .nn import BatchNorm2d, Conv2d, Dense, Module, Parameter, _normal
from .tensor import ShapeError, Tensor, concat, stack

NOISE_FLOOR = 1e-2


@dataclass
class GateVector:
    gates: np.ndarray
    active: tuple[int, ...]
    scale: float


@dataclass
class Routing:
    """Router output for one task over a batch."""

    gates: Tensor  # (B, N), exactly k nonzeros per row
    mask: np.ndarray  # (B, N) bool, the active sets K_t
    scale: Tensor  # (B,) extra scaling value s_t
    clean_logits: Tensor
    load: Tensor  # (N,) smooth top-k membership estimate, or hard counts when noise is off

    def vectors(self) -> list[GateVector]:
        g = self.gates.data
        return [
            GateVector(g[b].copy(), tuple(np.flatnonzero(self.mask[b]).tolist()), float(self.scale.data[b]))
            for b in range(g.shape[0])
        ]


class LowRankExpert(Module):
    """3x3 conv into ``rank`` channels then a 1x1 conv out, no activation anywhere."""

    def __init__(self, c_in: int, rank: int, c_out: int, rng: np.random.Generator, *, kernel: int = 3, dtype=np.float64):
        self.rank = rank
        self.w_b = Parameter(_normal(rng, (kernel, kernel, c_in, rank), (kernel * kernel * c_in) ** -0.5, dtype))
        self.b_b = Parameter(np.zeros(rank, dtype=dtype))
        self.w_a = Parameter(_normal(rng, (1, 1, rank, c_out), rank**-0.5, dtype))
        self.b_a = Parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(ops.conv2d(x, self.w_b, self.b_b), self.w_a, self.b_a)


class GenericPath(Module):
    def __init__(self, channels: int, rng: np.random.Generator, *, detach_input: bool = True, dtype=np.float64):
        self.w_g = Parameter(_normal(rng, (3, 3, channels, channels), (9 * channels) ** -0.5, dtype))
        self.b_g = Parameter(np.zeros(channels, dtype=dtype))
        self.detach_input = detach_input

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x.detach() if self.detach_input else x, self.w_g, self.b_g)


class Router(Module):
    """Content branch (two 1x1 convs to C/4, global pool) beside a position branch
    (learned spatial weighting, dense to C/4); a dense head maps the concatenation
    to N expert logits plus one scaling value."""

    def __init__(self, channels: int, num_experts: int, hw: tuple[int, int], rng: np.random.Generator, *, dtype=np.float64):
        q = channels // 4
        n_pix = hw[0] * hw[1]
        self.num_experts = num_experts
        self.content1 = Conv2d(channels, q, 1, rng, dtype=dtype)
        self.content2 = Conv2d(q, q, 1, rng, dtype=dtype)
        self.position = Parameter((np.full((n_pix, 1), 1.0 / n_pix) + _normal(rng, (n_pix, 1), 0.1 / n_pix, np.float64)).astype(dtype))
        self.position_dense = Dense(channels, q, rng, dtype=dtype)
        self.head = Dense(2 * q, num_experts + 1, rng, dtype=dtype)
        self.noise_head = Dense(2 * q, num_experts, rng, dtype=dtype)

    def features(self, x: Tensor) -> Tensor:
        content = ops.global_avg_pool(self.content2(self.content1(x)))
        position = self.position_dense(ops.spatial_linear(x, self.position))
        return concat([content, position], axis=1)

    def forward(self, x: Tensor, k: int, noise_rng: np.random.Generator | None = None) -> Routing:
        h = self.features(x)
        out = self.head(h)
        n = self.num_experts
        clean = out[:, :n]
        scale = out[:, n]
        if noise_rng is None:
            gates, mask = ops.topk_softmax(clean, k)
            load = Tensor(mask.sum(axis=0).astype(clean.dtype))
            return Routing(gates, mask, scale, clean, load)

        std = ops.softplus(self.noise_head(h)) + NOISE_FLOOR
        eps = noise_rng.standard_normal(clean.shape).astype(clean.dtype)
        noisy = clean + std * eps
        gates, mask = ops.topk_softmax(noisy, k)
        if k < n:
            load = prob_in_top_k(clean, noisy.data, std, k).sum(axis=0)
        else:
            load = Tensor(mask.sum(axis=0).astype(clean.dtype))
        return Routing(gates, mask, scale, clean, load)


def prob_in_top_k(clean: Tensor, noisy: np.ndarray, std: Tensor, k: int) -> Tensor:
    """Probability each expert stays in the top-k under a fresh draw of its own noise.

    The competing threshold is the k-th largest noisy logit for experts
    currently outside the top-k and the (k+1)-th for those inside; it is held
    constant for differentiation.
    """
    top = -np.sort(-noisy, axis=1)[:, : k + 1]
    thr_in = top[:, k : k + 1]
    thr_out = top[:, k - 1 : k]
    is_in = noisy > thr_in
    thr = np.where(is_in, thr_in, thr_out)
    return ops.normal_cdf((clean - thr) / std)


def cv_squared(x: Tensor) -> Tensor:
    """Population variance over squared mean; 0 for an all-zero vector."""
    mean = x.mean()
    if mean.item() == 0.0:
        return Tensor(np.zeros((), dtype=x.dtype))
    var = ((x - mean) ** 2).mean()
    return var / (mean * mean)


def load_balancing_loss(importance: Tensor, load: Tensor, lb_weight: float) -> Tensor:
    return (cv_squared(importance) + cv_squared(load)) * lb_weight


def module_balance_loss(routings: Sequence[Routing], lb_weight: float) -> Tensor:
    """Importance and load summed over every task and sample routed by one module."""
    importance = routings[0].gates.sum(axis=0)
    load = routings[0].load
    for r in routings[1:]:
        importance = importance + r.gates.sum(axis=0)
        load = load + r.load
    return load_balancing_loss(importance, load, lb_weight)


class MLoREModule(Module):
    def __init__(
        self,
        cfg: ModelConfig,
        in_channels: int,
        hw: tuple[int, int],
        rng: np.random.Generator,
        *,
        split_input: bool = False,
        dtype=np.float64,
    ):
        c = cfg.channels
        self.num_tasks = cfg.num_tasks
        self.top_k = cfg.top_k
        self.split_input = split_input
        self.hw = tuple(hw)
        self.projections = [Conv2d(in_channels, c, 1, rng, dtype=dtype) for _ in range(cfg.num_tasks)]
        self.generic = GenericPath(c, rng, dtype=dtype)
        self.shared = [LowRankExpert(c, r, c, rng, dtype=dtype) for r in cfg.ranks]
        self.routers = [Router(c, cfg.num_experts, hw, rng, dtype=dtype) for _ in range(cfg.num_tasks)]
        self.expert_bn = [BatchNorm2d(c, dtype=dtype) for _ in range(cfg.num_tasks)]
        self.specific = [LowRankExpert(c, cfg.specific_rank, c, rng, dtype=dtype) for _ in range(cfg.num_tasks)]
        self._rank_index = np.repeat(np.arange(cfg.num_experts), cfg.ranks)

    @property
    def num_experts(self) -> int:
        return len(self.shared)

    def project_tasks(self, x: Tensor | Sequence[Tensor]) -> list[Tensor]:
        if self.split_input:
            if isinstance(x, Tensor) or len(x) != self.num_tasks:
                raise ShapeError(f"stacked module expects {self.num_tasks} per-task features")
            return [proj(xt) for proj, xt in zip(self.projections, x)]
        if not isinstance(x, Tensor):
            raise ShapeError("first module expects one shared feature map")
        return [proj(x) for proj in self.projections]

    def route(self, t: int, x_t: Tensor, noise_rng: np.random.Generator | None = None) -> Routing:
        if x_t.shape[1] != self.generic.w_g.shape[2]:
            raise ShapeError(f"task feature has {x_t.shape[1]} channels, module width is {self.generic.w_g.shape[2]}")
        return self.routers[t](x_t, self.top_k, noise_rng)

    def gated_expert_sum(self, x_t: Tensor, gates: Tensor) -> Tensor:
        """sum_k g_k * expert_k(x) for every sample, evaluated as one wide 3x3 conv
        into the concatenated ranks and one 1x1 conv back."""
        n = x_t.shape[0]
        w_b = concat([e.w_b for e in self.shared], axis=3)
        b_b = concat([e.b_b for e in self.shared], axis=0)
        w_a = concat([e.w_a for e in self.shared], axis=2)
        b_a = stack([e.b_a for e in self.shared], axis=0)
        z = ops.conv2d(x_t, w_b, b_b)
        z = z * gates[:, self._rank_index].reshape(n, -1, 1, 1)
        y = ops.conv2d(z, w_a)
        return y + (gates @ b_a).reshape(n, -1, 1, 1)

    def shared_expert_sum(self, t: int, x_t: Tensor, routing: Routing) -> Tensor:
        return self.expert_bn[t](self.gated_expert_sum(x_t, routing.gates))

    def mix(self, xs: Sequence[Tensor], noise_rng: np.random.Generator | None = None) -> tuple[list[Tensor], list[Routing]]:
        """All three paths for already-projected task features.

        The generic path and the shared experts use the same weights for every
        task, so both run once on the task features stacked along the batch axis.
        """
        routings = [self.route(t, x_t, noise_rng) for t, x_t in enumerate(xs)]
        n = xs[0].shape[0]
        if any(x_t.shape[0] != n for x_t in xs):
            raise ShapeError("task features must share a batch size")
        stacked = concat(list(xs), axis=0) if len(xs) > 1 else xs[0]
        gates = concat([r.gates for r in routings], axis=0) if len(xs) > 1 else routings[0].gates
        generic = self.generic(stacked)
        shared = self.gated_expert_sum(stacked, gates)
        outs = []
        for t, (x_t, routing) in enumerate(zip(xs, routings)):
            rows = slice(t * n, (t + 1) * n)
            scale = routing.scale.reshape(-1, 1, 1, 1)
            s = generic[rows] + self.expert_bn[t](shared[rows]) + scale * self.specific[t](x_t)
            outs.append(s)
        return outs, routings

    def forward(self, x, noise_rng: np.random.Generator | None = None) -> tuple[list[Tensor], list[Routing]]:
        return self.mix(self.project_tasks(x), noise_rng)


class NonlinearBlock(Module):
    """BatchNorm -> GELU -> 1x1 linear, channel preserving."""

    def __init__(self, channels: int, rng: np.random.Generator, *, dtype=np.float64):
        self.bn = BatchNorm2d(channels, dtype=dtype)
        self.linear = Conv2d(channels, channels, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.linear(ops.gelu(self.bn(x)))


class TaskBlocks(Module):
    def __init__(self, num_tasks: int, channels: int, rng: np.random.Generator, *, dtype=np.float64):
        self.blocks = [NonlinearBlock(channels, rng, dtype=dtype) for _ in range(num_tasks)]

    def forward(self, xs: Sequence[Tensor]) -> list[Tensor]:
        return [b(x) for b, x in zip(self.blocks, xs)]


class MultiScaleFuse(Module):
    """Per-pixel softmax weights over scales from a 1x1 conv on the concatenation."""

    def __init__(self, num_scales: int, channels: int, rng: np.random.Generator, *, dtype=np.float64):
        self.num_scales = num_scales
        self.mask_conv = Conv2d(num_scales * channels, num_scales, 1, rng, dtype=dtype)

    def forward(self, feats: Sequence[Tensor]) -> Tensor:
        if len(feats) != self.num_scales:
            raise ShapeError(f"expected {self.num_scales} scales, got {len(feats)}")
        h = max(f.shape[2] for f in feats)
        resized = []
        for f in feats:
            if h % f.shape[2]:
                raise ShapeError(f"scale {f.shape[2:]} does not divide finest resolution {h}")
            resized.append(ops.upsample_nearest(f, h // f.shape[2]))
        weights = ops.softmax(self.mask_conv(concat(resized, axis=1)), axis=1)
        out = resized[0] * weights[:, 0:1]
        for s in range(1, self.num_scales):
            out = out + resized[s] * weights[:, s : s + 1]
        return out


class ScaleStack(Module):
    def __init__(self, cfg: ModelConfig, in_channels: int, hw, rng, *, dtype=np.float64):
        self.mlore = [
            MLoREModule(cfg, in_channels if i == 0 else cfg.channels, hw, rng, split_input=i > 0, dtype=dtype)
            for i in range(cfg.stack_per_scale)
        ]
        self.blocks = [TaskBlocks(cfg.num_tasks, cfg.channels, rng, dtype=dtype) for _ in range(cfg.stack_per_scale)]

    def forward(self, x: Tensor, noise_rng=None, fused: bool = False):
        feats, routings = x, []
        for module, blocks in zip(self.mlore, self.blocks):
            if fused:
                from .reparam import fused_mix

                feats, r = fused_mix(module, module.project_tasks(feats))
            else:
                feats, r = module(feats, noise_rng)
            feats = blocks(feats)
            routings.append(r)
        return feats, routings


class Decoder(Module):
    """Stacked MLoRE modules per tapped scale, per-task multi-scale fusion, 1x1 heads."""

    def __init__(
        self,
        cfg: ModelConfig,
        in_channels: int,
        hw: tuple[int, int],
        out_channels: Sequence[int],
        rng: np.random.Generator,
        *,
        dtype=np.float64,
    ):
        if len(out_channels) != cfg.num_tasks:
            raise ValueError("one output width per task is required")
        self.cfg = cfg
        self.stacks = [ScaleStack(cfg, in_channels, hw, rng, dtype=dtype) for _ in range(cfg.scales)]
        self.fuse = [MultiScaleFuse(cfg.scales, cfg.channels, rng, dtype=dtype) for _ in range(cfg.num_tasks)]
        self.heads = [Conv2d(cfg.channels, oc, 1, rng, dtype=dtype) for oc in out_channels]

    def mlore_modules(self) -> list[MLoREModule]:
        return [m for s in self.stacks for m in s.mlore]

    def forward(self, features: Sequence[Tensor], noise_rng=None, fused: bool = False):
        """Returns per-task predictions and, per MLoRE module, the list of T routings."""
        if len(features) != len(self.stacks):
            raise ShapeError(f"decoder expects {len(self.stacks)} backbone features, got {len(features)}")
        per_scale, routings = [], []
        for stack_, x in zip(self.stacks, features):
            feats, r = stack_(x, noise_rng, fused)
            per_scale.append(feats)
            routings.extend(r)
        preds = []
        for t in range(self.cfg.num_tasks):
            fused_t = self.fuse[t]([feats[t] for feats in per_scale])
            preds.append(self.heads[t](fused_t))
        return preds, routings

    def balance_loss(self, routings: Sequence[Sequence[Routing]]) -> Tensor:
        total = None
        for r in routings:
            term = module_balance_loss(r, self.cfg.lb_weight)
            total = term if total is None else total + term
        return total


class LinearDecoder(Module):
    """Baseline head: per scale and task a 1x1 projection and a nonlinear block, then the same fusion and heads."""

    def __init__(self, cfg: ModelConfig, in_channels: int, out_channels: Sequence[int], rng, *, dtype=np.float64):
        self.cfg = cfg
        t = cfg.num_tasks
        self.projections = [TaskProjection(in_channels, cfg.channels, t, rng, dtype=dtype) for _ in range(cfg.scales)]
        self.blocks = [TaskBlocks(t, cfg.channels, rng, dtype=dtype) for _ in range(cfg.scales)]
        self.fuse = [MultiScaleFuse(cfg.scales, cfg.channels, rng, dtype=dtype) for _ in range(t)]
        self.heads = [Conv2d(cfg.channels, oc, 1, rng, dtype=dtype) for oc in out_channels]

    def forward(self, features: Sequence[Tensor], noise_rng=None, fused: bool = False):
        per_scale = [blk(proj(x)) for proj, blk, x in zip(self.projections, self.blocks, features)]
        preds = []
        for t in range(self.cfg.num_tasks):
            preds.append(self.heads[t](self.fuse[t]([feats[t] for feats in per_scale])))
        return preds, []

    def balance_loss(self, routings) -> None:
        return None


class TaskProjection(Module):
    def __init__(self, c_in: int, c_out: int, num_tasks: int, rng, *, dtype=np.float64):
        self.convs = [Conv2d(c_in, c_out, 1, rng, dtype=dtype) for _ in range(num_tasks)]

    def forward(self, x: Tensor) -> list[Tensor]:
        return [c(x) for c in self.convs]
