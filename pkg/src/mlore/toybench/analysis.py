"""Expert activation statistics over a dataset, exported as CSV."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..decoder import GateVector
from .data import ToyDataset
from .model import MultiTaskModel
from .train import predict

ACTIVATION_COLUMNS = ("module_id", "expert_id", "rank", "task_id", "activation_ratio", "mean_gate")
DISTRIBUTION_COLUMNS = ("module_id", "expert_id", "num_tasks", "count", "fraction")


@dataclass
class ActivationStats:
    """Counts over ``num_samples`` samples for every MLoRE module.

    ``active[m]`` is (tasks, experts) activation counts, ``gate_sum[m]`` the
    summed gate values (zero when inactive), and ``co_active[m]`` is
    (experts, tasks + 1): how many samples had exactly j tasks select expert e.
    """

    num_samples: int
    ranks: list[list[int]]
    active: list[np.ndarray]
    gate_sum: list[np.ndarray]
    co_active: list[np.ndarray]

    def activation_ratio(self, m: int) -> np.ndarray:
        return self.active[m] / self.num_samples

    def mean_gate(self, m: int) -> np.ndarray:
        """Gate averaged over all samples, inactive samples counting as zero."""
        return self.gate_sum[m] / self.num_samples

    def expert_frequency(self) -> np.ndarray:
        """(modules, experts): fraction of (task, sample) pairs that selected each expert."""
        return np.stack([a.mean(axis=0) / self.num_samples for a in self.active])

    def rows(self) -> list[tuple]:
        out = []
        for m in range(len(self.active)):
            ratio, gate = self.activation_ratio(m), self.mean_gate(m)
            for e in range(ratio.shape[1]):
                for t in range(ratio.shape[0]):
                    out.append((m, e, self.ranks[m][e], t, _fmt(ratio[t, e]), _fmt(gate[t, e])))
        return out

    def distribution_rows(self) -> list[tuple]:
        out = []
        for m, co in enumerate(self.co_active):
            for e in range(co.shape[0]):
                for j in range(co.shape[1]):
                    out.append((m, e, j, int(co[e, j]), _fmt(co[e, j] / self.num_samples)))
        return out

    def to_csv(self) -> str:
        return _csv(ACTIVATION_COLUMNS, self.rows())

    def distribution_csv(self) -> str:
        return _csv(DISTRIBUTION_COLUMNS, self.distribution_rows())

    def save(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        a, d = out_dir / "activations.csv", out_dir / "tasks_per_expert.csv"
        a.write_text(self.to_csv())
        d.write_text(self.distribution_csv())
        return a, d


def _fmt(v: float) -> str:
    return f"{float(v):.12g}"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def export_activations(
    model: MultiTaskModel,
    dataset: ToyDataset,
    *,
    batch_size: int = 8,
    keep_vectors: bool = False,
) -> tuple[ActivationStats, list[list[list[GateVector]]] | None]:
    """Eval-mode (noise off) routing statistics; optionally also every raw gate vector,
    indexed ``[module][task][sample]``."""
    modules = model.decoder.mlore_modules() if model.decoder_kind == "mlore" else []
    if not modules:
        raise ValueError("model has no MLoRE modules to analyse")
    num_tasks = len(model.tasks)
    ranks = [[e.rank for e in m.shared] for m in modules]
    active = [np.zeros((num_tasks, m.num_experts), np.int64) for m in modules]
    gate_sum = [np.zeros((num_tasks, m.num_experts), np.float64) for m in modules]
    co_active = [np.zeros((m.num_experts, num_tasks + 1), np.int64) for m in modules]
    vectors = [[[] for _ in range(num_tasks)] for _ in modules] if keep_vectors else None

    for _, _, routings in predict(model, dataset, batch_size):
        for m, module_routings in enumerate(_per_module(routings, num_tasks)):
            masks = np.stack([r.mask for r in module_routings])  # (T, B, N)
            active[m] += masks.sum(axis=1)
            gate_sum[m] += np.stack([r.gates.data.astype(np.float64).sum(axis=0) for r in module_routings])
            per_sample = masks.sum(axis=0)  # (B, N) tasks selecting each expert
            for j in range(num_tasks + 1):
                co_active[m][:, j] += (per_sample == j).sum(axis=0)
            if vectors is not None:
                for t, r in enumerate(module_routings):
                    vectors[m][t].extend(r.vectors())

    return ActivationStats(len(dataset), ranks, active, gate_sum, co_active), vectors


def _per_module(flat_routings, num_tasks):
    for module_routings in flat_routings:
        if len(module_routings) != num_tasks:
            raise ValueError("routing list does not match the task count")
        yield module_routings


def recount(vectors: list[list[list[GateVector]]]) -> ActivationStats:
    """Brute-force statistics from raw gate vectors, independent of the streaming counters."""
    num_tasks = len(vectors[0])
    num_samples = len(vectors[0][0])
    active, gate_sum, co_active = [], [], []
    for per_task in vectors:
        n_exp = len(per_task[0][0].gates)
        a = np.zeros((num_tasks, n_exp), np.int64)
        g = np.zeros((num_tasks, n_exp))
        co = np.zeros((n_exp, num_tasks + 1), np.int64)
        for s in range(num_samples):
            picked = np.zeros(n_exp, np.int64)
            for t in range(num_tasks):
                v = per_task[t][s]
                for e in v.active:
                    a[t, e] += 1
                    g[t, e] += float(v.gates[e])
                    picked[e] += 1
            for e in range(n_exp):
                co[e, picked[e]] += 1
        active.append(a)
        gate_sum.append(g)
        co_active.append(co)
    return ActivationStats(num_samples, [[0] * a.shape[1] for a in active], active, gate_sum, co_active)
