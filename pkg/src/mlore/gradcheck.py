"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NondeterministicFunction(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    coords: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    analytic: list[float] = field(default_factory=list)
    numeric: list[float] = field(default_factory=list)
    errors: list[float] = field(default_factory=list)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def _sample_coords(params: Sequence[Tensor], n: int, rng: np.random.Generator):
    # one coordinate from every tensor first, then uniform over tensors
    picks = []
    order = list(range(len(params)))
    while len(picks) < n:
        for i in order:
            if len(picks) >= n:
                break
            shape = params[i].shape
            picks.append((i, tuple(int(rng.integers(s)) for s in shape)))
        order = list(rng.permutation(len(params)))
    return picks


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    *,
    step: float = 1e-5,
    n_coords: int = 50,
    rng: np.random.Generator | None = None,
    coords: Sequence[tuple[int, tuple[int, ...]]] | None = None,
) -> GradCheckReport:
    """Compare tape gradients with central differences on sampled coordinates.

    ``loss_fn`` must rebuild the graph from the current ``params`` data and
    return a scalar. It is evaluated twice up front; differing values raise
    :class:`NondeterministicFunction`.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    first = loss_fn()
    second = loss_fn()
    if first.item() != second.item():
        raise NondeterministicFunction(f"loss_fn returned {first.item()!r} then {second.item()!r}")

    for p in params:
        p.grad = None
    second.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else np.array(p.grad) for p in params]

    if coords is None:
        coords = _sample_coords(params, n_coords, rng if rng is not None else np.random.default_rng(0))

    report = GradCheckReport(max_rel_error=0.0)
    for i, idx in coords:
        p = params[i]
        orig = p.data[idx]
        p.data[idx] = orig + step
        fp = loss_fn().item()
        p.data[idx] = orig - step
        fm = loss_fn().item()
        p.data[idx] = orig
        numeric = (fp - fm) / (2 * step)
        analytic = float(grads[i][idx])
        err = relative_error(analytic, numeric)
        report.coords.append((i, idx))
        report.analytic.append(analytic)
        report.numeric.append(numeric)
        report.errors.append(err)
        report.max_rel_error = max(report.max_rel_error, err)
    return report
