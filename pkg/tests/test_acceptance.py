"""Acceptance criteria, one check each.

Every criterion prints a single ``[PASS]`` or ``[FAIL]`` line. Run under
pytest or directly with ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import json
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from mlore import ops
from mlore.accounting import compare_table, count_flops, count_params, marginal_ratios
from mlore.config import ModelConfig, paper_config, smoke_config
from mlore.decoder import MLoREModule, load_balancing_loss
from mlore.gradcheck import finite_difference_check
from mlore.reparam import acceptance_grid, randomize_module, verify_equivalence
from mlore.tensor import Tensor
from mlore.toybench import TrainSettings, evaluate, gen_dataset, train
from mlore.toybench.analysis import export_activations, recount

GRAD_CFG = ModelConfig(
    tasks=("a", "b"), num_experts=5, top_k=3, channels=8, rank_min=2, rank_max=6, rank_step=1, specific_rank=3, scales=1
)


def line(num: int, title: str, passed: bool, detail: str) -> str:
    return f"[{'PASS' if passed else 'FAIL'}] criterion {num}: {title} | {detail}"


# --------------------------------------------------------------------------
# criteria
# --------------------------------------------------------------------------


def criterion_1():
    grid = acceptance_grid()
    start = time.perf_counter()
    double = verify_equivalence(grid, 100, "double", seed=0)
    single = verify_equivalence(grid, 100, "single", seed=1)
    seconds = time.perf_counter() - start
    covered = {(t.num_experts, t.channels, t.top_k) for t in double.trials}
    passed = double.max_rel_error < 1e-10 and single.max_rel_error < 1e-5 and seconds < 60 and len(covered) == len(grid)
    detail = (
        f"{len(double.trials)} trials over {len(covered)} configs, double max {double.max_rel_error:.2e} (<1e-10), "
        f"single max {single.max_rel_error:.2e} (<1e-5), {seconds:.1f}s (<60s)"
    )
    return passed, detail


def _module_loss(module, x, targets):
    def loss():
        outs, _ = module(x)
        return sum(((o - t) ** 2).mean() for o, t in zip(outs, targets))

    return loss


def criterion_2():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    m = MLoREModule(GRAD_CFG, 8, (4, 4), rng)
    randomize_module(m, rng)
    m.train()
    x = Tensor(rng.standard_normal((3, 8, 4, 4)), requires_grad=True)
    targets = [rng.standard_normal((3, 8, 4, 4)) for _ in range(2)]

    # every input and parameter, with the generic-path cut removed so finite differences see the same function
    m.generic.detach_input = False
    full = finite_difference_check(_module_loss(m, x, targets), [x] + m.parameters(), n_coords=80, rng=rng)
    # with the cut in place, parameters downstream of it
    m.generic.detach_input = True
    downstream = [p for name, p in m.named_parameters() if not name.startswith("projections")]
    cut = finite_difference_check(_module_loss(m, x, targets), downstream, n_coords=60, rng=rng)
    seconds = time.perf_counter() - start
    worst = max(full.max_rel_error, cut.max_rel_error)
    passed = worst < 1e-4 and len(full.coords) >= 50 and len(cut.coords) >= 50 and seconds < 120
    detail = f"{len(full.coords)}+{len(cut.coords)} coords, max rel err {worst:.2e} (<1e-4), {seconds:.1f}s (<120s)"
    return passed, detail


def criterion_3():
    rng = np.random.default_rng(3)
    m = MLoREModule(GRAD_CFG, 8, (4, 4), rng)
    x = Tensor(rng.standard_normal((2, 8, 4, 4)), requires_grad=True)
    (m.generic(x) ** 2).sum().backward()
    input_zero = x.grad is None or not np.any(x.grad)
    weights_nonzero = bool(np.any(m.generic.w_g.grad)) and bool(np.any(m.generic.b_g.grad))

    def input_grad(detach):
        m.generic.detach_input = detach
        m.zero_grad()
        xi = Tensor(x.data.copy(), requires_grad=True)
        outs, _ = m(xi)
        sum((o**2).sum() for o in outs).backward()
        return xi.grad

    with_cut, without_cut = input_grad(True), input_grad(False)
    m.generic.detach_input = True
    control = not np.allclose(with_cut, without_cut)
    passed = input_zero and weights_nonzero and control
    detail = (
        f"generic-path input grad zero={input_zero}, W/b grads nonzero={weights_nonzero}, "
        f"removing the cut changes module input grad={control} (max diff {np.abs(with_cut - without_cut).max():.2e})"
    )
    return passed, detail


def criterion_4():
    rng = np.random.default_rng(4)
    cfg = ModelConfig(tasks=("a", "b"), channels=16, rank_min=2, rank_max=8, rank_step=1, specific_rank=4, scales=1)
    m = MLoREModule(cfg, 16, (6, 6), rng)
    randomize_module(m, rng)
    x = Tensor(rng.standard_normal((100, 16, 6, 6)))
    xs = m.project_tasks(x)
    count_ok, sum_err, samples = True, 0.0, 0
    for noise in (None, 7):
        for t, xt in enumerate(xs):
            noise_rng = None if noise is None else np.random.default_rng(noise)
            g = m.route(t, xt, noise_rng).gates.data
            count_ok &= bool(((g > 0).sum(axis=1) == cfg.top_k).all())
            sum_err = max(sum_err, float(np.abs(g.sum(axis=1) - 1.0).max()))
            samples += g.shape[0]
    deterministic = all(np.array_equal(m.route(t, xt).gates.data, m.route(t, xt).gates.data) for t, xt in enumerate(xs))
    n, w = cfg.num_experts, cfg.lb_weight
    uniform = load_balancing_loss(Tensor(np.full(n, 2.0)), Tensor(np.full(n, 2.0)), w).item()
    onehot = np.eye(n)[0]
    peaked = load_balancing_loss(Tensor(onehot), Tensor(onehot), w).item()
    closed = abs(uniform) < 1e-15 and abs(peaked - w * 2 * (n - 1)) < 1e-12
    passed = count_ok and sum_err < 1e-9 and deterministic and closed
    detail = (
        f"{samples} routed samples (noise off and on), exactly k={cfg.top_k} nonzero={count_ok}, "
        f"max |sum-1|={sum_err:.1e}, deterministic={deterministic}, lb uniform={uniform:.1e}, "
        f"lb one-hot={peaked:.6f} vs {w * 2 * (n - 1):.6f}"
    )
    return passed, detail


def criterion_5():
    cfg = paper_config()
    ratio = count_params(cfg, "mlore").params / count_params(cfg, "standard_moe").params
    rows = compare_table(cfg)
    margins = {k: marginal_ratios(rows, k) for k in ((1, 1), (3, 1))}
    fused = {n: count_flops(cfg.with_(num_experts=n, top_k=min(9, n)), "mlore", 16, 16, fused=True).flops_breakdown["fused_conv"] for n in (5, 10, 15)}
    flat = len(set(fused.values())) == 1
    worst_margin = max(max(v) for v in margins.values())
    passed = ratio < 0.40 and worst_margin < 0.25 and flat
    detail = (
        f"15-expert [3x3,1x1] param ratio {ratio:.4f} (<0.40), marginal ratios "
        f"[1x1,1x1] {[round(v, 3) for v in margins[(1, 1)]]} [3x3,1x1] {[round(v, 3) for v in margins[(3, 1)]]} (<0.25), "
        f"fused conv FLOPs constant in N={flat}"
    )
    return passed, detail


def _directional(mlore: dict, linear: dict, tasks) -> int:
    wins = 0
    for spec in tasks:
        a, b = mlore[spec.name], linear[spec.name]
        wins += (a >= b) if spec.higher_is_better else (a <= b)
    return wins


def criterion_6():
    train_set, eval_set = gen_dataset(0, 64, 64), gen_dataset(1, 32, 64)
    cfg = smoke_config()
    settings = TrainSettings(iters=1000)
    start = time.perf_counter()
    result = train(cfg, train_set, settings)
    report = evaluate(result.model, eval_set)
    seconds = time.perf_counter() - start
    losses = result.total_losses
    first, tail = losses[0], float(np.mean(losses[-50:]))
    drop = 1.0 - tail / first

    baseline = {}
    for task in cfg.tasks:
        single = train(cfg.with_(tasks=(task,)), train_set, TrainSettings(iters=1000, decoder="linear"))
        baseline.update(evaluate(single.model, eval_set).metrics)
    shared_linear = train(cfg, train_set, TrainSettings(iters=1000, decoder="linear"))
    lin_report = evaluate(shared_linear.model, eval_set, baseline)
    report = evaluate(result.model, eval_set, baseline)
    wins = _directional(report.metrics, lin_report.metrics, result.model.tasks)

    finite = all(np.isfinite(v) for v in report.metrics.values()) and np.isfinite(report.delta_m)
    passed = seconds < 600 and drop >= 0.30 and finite
    detail = (
        f"train+eval {seconds:.0f}s (<600s), loss {first:.3f} -> {tail:.3f} (last-50 mean, final {losses[-1]:.3f}), "
        f"drop {100 * drop:.1f}% (>=30%), delta_m MLoRE {report.delta_m:+.2f}% vs shared-linear {lin_report.delta_m:+.2f}%, "
        f"MLoRE >= shared-linear on {wins}/{len(cfg.tasks)} tasks (reported only), "
        f"metrics {json.dumps({k: round(v, 4) for k, v in report.metrics.items()})}"
    )
    return passed, detail


def criterion_7():
    train_set, eval_set = gen_dataset(0, 64, 32), gen_dataset(1, 32, 32)
    base = smoke_config(scales=2, stack_per_scale=1)
    mins, exact = {}, True
    for lb in (0.0, base.lb_weight):
        result = train(base.with_(lb_weight=lb), train_set, TrainSettings(iters=300))
        stats, vectors = export_activations(result.model, eval_set, keep_vectors=True)
        ref = recount(vectors)
        for m in range(len(stats.active)):
            exact &= np.array_equal(stats.active[m], ref.active[m]) and np.array_equal(stats.co_active[m], ref.co_active[m])
            exact &= np.allclose(stats.gate_sum[m], ref.gate_sum[m], rtol=1e-6, atol=0)
        mins[lb] = float(stats.expert_frequency().min())
    passed = exact and mins[base.lb_weight] >= mins[0.0]
    detail = (
        f"recount equality={exact}, min expert frequency lb={base.lb_weight}: {mins[base.lb_weight]:.4f} "
        f">= lb=0: {mins[0.0]:.4f} (same seed, 300 steps)"
    )
    return passed, detail


def _cli(*args) -> subprocess.CompletedProcess:
    return subprocess.run([sys.executable, "-m", "mlore.cli", *map(str, args)], capture_output=True, text=True, check=True)


def _cli_run(root: Path) -> dict[str, bytes]:
    root.mkdir(parents=True)
    cfg = root / "cfg.json"
    cfg.write_text(smoke_config(channels=8, num_experts=4, top_k=2, rank_min=2, rank_max=4, specific_rank=2, scales=2, stack_per_scale=1).dumps())
    data = root / "data.bin"
    _cli("gen-data", "--seed", 3, "--count", 8, "--size", 32, "--out", data)
    _cli("train", "--config", cfg, "--data", data, "--iters", 5, "--out", root / "run", "--checkpoint-every", 2)
    ckpt = root / "run" / "final.ckpt"
    _cli("export-activations", "--ckpt", ckpt, "--data", data, "--out", root / "act")
    _cli("eval", "--ckpt", ckpt, "--data", data, "--out", root / "metrics.json")
    _cli("verify-reparam", "--trials", 3, "--out", root / "verify.txt")
    _cli("verify-reparam", "--trials", 2, "--ckpt", ckpt, "--out", root / "verify_ckpt.txt")
    count = _cli("count", "--config", "paper", "--hw", "16x16").stdout.encode()
    artifacts = {"count.stdout": count}
    for p in sorted(root.rglob("*")):
        if p.is_file() and not p.name.endswith("manifest.json"):
            artifacts[str(p.relative_to(root))] = p.read_bytes()
    return artifacts


def criterion_8():
    with tempfile.TemporaryDirectory() as tmp:
        a = _cli_run(Path(tmp) / "a")
        b = _cli_run(Path(tmp) / "b")
    same = sorted(k for k in a if a[k] == b.get(k))
    differ = sorted(set(a) ^ set(b) | {k for k in a if k in b and a[k] != b[k]})
    passed = not differ and len(same) >= 10
    detail = f"{len(same)} artifacts byte-identical across two runs" + (f"; differing: {differ}" if differ else "")
    return passed, detail


CRITERIA = {
    1: ("re-parameterization exactness", criterion_1),
    2: ("gradient fidelity", criterion_2),
    3: ("stop-gradient contract", criterion_3),
    4: ("gating invariants", criterion_4),
    5: ("parameter-savings trend", criterion_5),
    6: ("toy multi-task training smoke", criterion_6),
    7: ("activation analysis", criterion_7),
    8: ("CLI determinism", criterion_8),
}


# --------------------------------------------------------------------------
# pytest entry points
# --------------------------------------------------------------------------


@pytest.mark.parametrize("num", sorted(CRITERIA))
def test_criterion(num, capsys):
    title, fn = CRITERIA[num]
    passed, detail = fn()
    with capsys.disabled():
        print("\n" + line(num, title, passed, detail))
    assert passed, detail


def main() -> int:
    failed = 0
    for num in sorted(CRITERIA):
        title, fn = CRITERIA[num]
        passed, detail = fn()
        print(line(num, title, passed, detail), flush=True)
        failed += not passed
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
