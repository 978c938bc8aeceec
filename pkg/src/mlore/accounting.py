"""Analytic parameter and FLOP counts for one decoder module, MLoRE vs a standard MoE.

Conventions: a multiply-accumulate is 2 FLOPs, so a conv costs
``2*kh*kw*C_in*C_out*H*W`` and a dense layer ``2*in*out``. Pooling and
softmax cost one FLOP per element, eval BatchNorm two per element (scale and
shift). Bias adds, gate scaling and path sums are not counted.

The standard MoE swaps every low-rank expert for a full-width pair
``[kh x kw, C -> C_e]`` and ``[1x1, C_e -> C]`` with a pointwise nonlinearity
between them, and has no generic path, task-specific experts or expert BN.
Dynamic-routing FLOPs charge each task its ``k`` most expensive experts, an
upper bound that does not depend on the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import ModelConfig

VARIANTS = ("standard_moe", "mlore")
COMPONENTS = (
    "projections",
    "generic",
    "shared_experts",
    "specific_experts",
    "routers",
    "bn",
    "heads",
    "fused_conv",
)
TABLE_EXPERTS = (5, 10, 15)
TABLE_KERNELS = ((1, 1), (3, 1))


@dataclass
class CostReport:
    variant: str
    params: int
    flops: int | None = None
    hw: tuple[int, int] | None = None
    fused: bool = False
    params_breakdown: dict[str, int] = field(default_factory=dict)
    flops_breakdown: dict[str, int] = field(default_factory=dict)

    def check(self) -> None:
        """Components are nonnegative and add up exactly."""
        for name, part in (("params", self.params_breakdown), ("flops", self.flops_breakdown)):
            if any(v < 0 for v in part.values()):
                raise AssertionError(f"negative {name} component in {part}")
        if sum(self.params_breakdown.values()) != self.params:
            raise AssertionError("parameter breakdown does not sum to the total")
        if self.flops is not None and sum(self.flops_breakdown.values()) != self.flops:
            raise AssertionError("FLOP breakdown does not sum to the total")

    def to_text(self) -> str:
        lines = [f"variant: {self.variant}", f"params: {self.params}"]
        if self.flops is not None:
            lines.append(f"flops ({'fused' if self.fused else 'multi-branch'}, {self.hw[0]}x{self.hw[1]}, 1 MAC = 2 FLOPs): {self.flops}")
        for name in COMPONENTS:
            p = self.params_breakdown.get(name, 0)
            f = self.flops_breakdown.get(name)
            lines.append(f"  {name}: params={p}" + (f" flops={f}" if f is not None else ""))
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# primitive costs
# --------------------------------------------------------------------------


def conv_params(k: int, c_in: int, c_out: int, bias: bool = True) -> int:
    return k * k * c_in * c_out + (c_out if bias else 0)


def conv_flops(k: int, c_in: int, c_out: int, h: int, w: int) -> int:
    return 2 * k * k * c_in * c_out * h * w


def dense_params(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def dense_flops(n_in: int, n_out: int) -> int:
    return 2 * n_in * n_out


def expert_params(c: int, hidden: int, kernels: tuple[int, int] = (3, 1)) -> int:
    """Two stacked convs C -> hidden -> C, biases included."""
    return conv_params(kernels[0], c, hidden) + conv_params(kernels[1], hidden, c)


def expert_flops(c: int, hidden: int, h: int, w: int, kernels: tuple[int, int] = (3, 1)) -> int:
    return conv_flops(kernels[0], c, hidden, h, w) + conv_flops(kernels[1], hidden, c, h, w)


def router_params(c: int, num_outputs: int, num_experts: int, hw: tuple[int, int]) -> int:
    q = c // 4
    return (
        conv_params(1, c, q)
        + conv_params(1, q, q)
        + hw[0] * hw[1]  # spatial weighting, no bias
        + dense_params(c, q)
        + dense_params(2 * q, num_outputs)
        + dense_params(2 * q, num_experts)  # noise head
    )


def router_flops(c: int, num_outputs: int, num_experts: int, h: int, w: int) -> int:
    """Inference cost: noise head skipped, softmax over the expert logits."""
    q = c // 4
    hw = h * w
    return (
        conv_flops(1, c, q, h, w)
        + conv_flops(1, q, q, h, w)
        + q * hw  # global average pool
        + 2 * c * hw  # spatial weighting
        + dense_flops(c, q)
        + dense_flops(2 * q, num_outputs)
        + num_experts  # softmax
    )


# --------------------------------------------------------------------------
# module counts
# --------------------------------------------------------------------------


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")


def _hidden_widths(cfg: ModelConfig, variant: str) -> list[int]:
    if variant == "mlore":
        return list(cfg.ranks)
    return [cfg.expert_out_channels] * cfg.num_experts


def count_params(
    cfg: ModelConfig,
    variant: str,
    *,
    hw: tuple[int, int] = (16, 16),
    kernels: tuple[int, int] = (3, 1),
    in_channels: int | None = None,
    out_channels: list[int] | None = None,
) -> CostReport:
    """Exact parameter count of one module (BN running statistics are buffers, not parameters).

    ``hw`` matters only through the router's spatial weighting; ``out_channels``
    adds one 1x1 head per task.
    """
    _check_variant(variant)
    c, t, n = cfg.channels, cfg.num_tasks, cfg.num_experts
    c_in = c if in_channels is None else in_channels
    parts = dict.fromkeys(COMPONENTS, 0)
    parts["projections"] = t * conv_params(1, c_in, c)
    parts["shared_experts"] = sum(expert_params(c, r, kernels) for r in _hidden_widths(cfg, variant))
    if variant == "mlore":
        parts["generic"] = conv_params(3, c, c)
        parts["specific_experts"] = t * expert_params(c, cfg.specific_rank, kernels)
        parts["routers"] = t * router_params(c, n + 1, n, hw)
        parts["bn"] = t * 2 * c
    else:
        parts["routers"] = t * router_params(c, n, n, hw)
    if out_channels is not None:
        parts["heads"] = sum(conv_params(1, c, oc) for oc in out_channels)
    report = CostReport(variant, sum(parts.values()), params_breakdown=parts)
    report.check()
    return report


def count_flops(
    cfg: ModelConfig,
    variant: str,
    h: int,
    w: int,
    *,
    fused: bool = False,
    kernels: tuple[int, int] = (3, 1),
    in_channels: int | None = None,
    out_channels: list[int] | None = None,
) -> CostReport:
    """One forward pass of one module on a single H x W sample (all tasks).

    ``fused`` applies to MLoRE only: every linear path and the expert BN
    collapse into one 3x3 conv per task, while the routers still run.
    """
    _check_variant(variant)
    if h < 1 or w < 1:
        raise ValueError(f"H and W must be >= 1, got {h}x{w}")
    if fused and variant != "mlore":
        raise ValueError("only the MLoRE variant can be re-parameterized")
    c, t, n, k = cfg.channels, cfg.num_tasks, cfg.num_experts, cfg.top_k
    c_in = c if in_channels is None else in_channels
    report = count_params(cfg, variant, hw=(h, w), kernels=kernels, in_channels=in_channels, out_channels=out_channels)
    parts = dict.fromkeys(COMPONENTS, 0)
    parts["projections"] = t * conv_flops(1, c_in, c, h, w)
    if out_channels is not None:
        parts["heads"] = sum(conv_flops(1, c, oc, h, w) for oc in out_channels)
    if variant == "mlore":
        parts["routers"] = t * router_flops(c, n + 1, n, h, w)
        if fused:
            parts["fused_conv"] = t * conv_flops(3, c, c, h, w)
        else:
            costs = sorted((expert_flops(c, r, h, w, kernels) for r in cfg.ranks), reverse=True)
            parts["generic"] = t * conv_flops(3, c, c, h, w)
            parts["shared_experts"] = t * sum(costs[:k])
            parts["specific_experts"] = t * expert_flops(c, cfg.specific_rank, h, w, kernels)
            parts["bn"] = t * 2 * c * h * w
    else:
        parts["routers"] = t * router_flops(c, n, n, h, w)
        parts["shared_experts"] = t * k * expert_flops(c, cfg.expert_out_channels, h, w, kernels)
    report.flops = sum(parts.values())
    report.flops_breakdown = parts
    report.hw = (h, w)
    report.fused = fused
    report.check()
    return report


# --------------------------------------------------------------------------
# comparison table
# --------------------------------------------------------------------------


@dataclass
class TableRow:
    variant: str
    num_experts: int
    kernels: tuple[int, int]
    top_k: int
    params: int
    flops: int | None
    param_ratio: float | None = None  # MLoRE / MoE at the same experts and kernels


def table_top_k(num_experts: int) -> int:
    return max(1, round(0.6 * num_experts))


def compare_table(
    cfg: ModelConfig,
    hw: tuple[int, int] | None = None,
    *,
    expert_counts=TABLE_EXPERTS,
    kernel_sets=TABLE_KERNELS,
) -> list[TableRow]:
    """Both variants for every (kernels, expert count) pair; k scales as 0.6 N."""
    rows = []
    for kernels in kernel_sets:
        for n in expert_counts:
            row_cfg = cfg.with_(num_experts=n, top_k=table_top_k(n))
            pair = {}
            for variant in VARIANTS:
                p = count_params(row_cfg, variant, hw=hw or (16, 16), kernels=kernels).params
                f = count_flops(row_cfg, variant, hw[0], hw[1], kernels=kernels).flops if hw else None
                pair[variant] = TableRow(variant, n, kernels, row_cfg.top_k, p, f)
            pair["mlore"].param_ratio = pair["mlore"].params / pair["standard_moe"].params
            rows += [pair["standard_moe"], pair["mlore"]]
    return rows


def marginal_ratios(rows: list[TableRow], kernels: tuple[int, int]) -> list[float]:
    """Extra MLoRE params over extra MoE params between consecutive expert counts."""
    by = {(r.variant, r.num_experts): r.params for r in rows if r.kernels == kernels}
    counts = sorted({n for _, n in by})
    return [
        (by["mlore", b] - by["mlore", a]) / (by["standard_moe", b] - by["standard_moe", a])
        for a, b in zip(counts, counts[1:])
    ]


def format_table(rows: list[TableRow]) -> str:
    header = ("variant", "experts", "kernels", "top_k", "params", "flops", "param_ratio")
    body = [
        (
            r.variant,
            str(r.num_experts),
            f"[{r.kernels[0]}x{r.kernels[0]},{r.kernels[1]}x{r.kernels[1]}]",
            str(r.top_k),
            str(r.params),
            "-" if r.flops is None else str(r.flops),
            "-" if r.param_ratio is None else f"{r.param_ratio:.4f}",
        )
        for r in rows
    ]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]

    def fmt(cells):
        return "  ".join(c.rjust(wd) if i else c.ljust(wd) for i, (c, wd) in enumerate(zip(cells, widths)))

    lines = [fmt(header), fmt(["-" * wd for wd in widths])] + [fmt(b) for b in body]
    lines.append("FLOPs: 1 multiply-accumulate = 2 FLOPs; one module, one sample, all tasks")
    return "\n".join(lines) + "\n"
