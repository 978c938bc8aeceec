import csv
import io

import numpy as np
import pytest

from mlore.config import smoke_config
from mlore.toybench.analysis import ACTIVATION_COLUMNS, DISTRIBUTION_COLUMNS, export_activations, recount
from mlore.toybench.data import gen_dataset
from mlore.toybench.model import MultiTaskModel

TINY = smoke_config(channels=8, num_experts=4, top_k=2, rank_min=2, rank_max=4, rank_step=1, specific_rank=2, scales=2, stack_per_scale=1)


@pytest.fixture(scope="module")
def data():
    return gen_dataset(2, 20, 32)


def test_counts_match_brute_recount(data):
    stats, vectors = export_activations(MultiTaskModel(TINY, (32, 32)), data, batch_size=6, keep_vectors=True)
    ref = recount(vectors)
    for m in range(len(stats.active)):
        np.testing.assert_array_equal(stats.active[m], ref.active[m])
        np.testing.assert_array_equal(stats.co_active[m], ref.co_active[m])
        np.testing.assert_allclose(stats.gate_sum[m], ref.gate_sum[m], rtol=1e-6)
        assert (stats.active[m].sum(axis=1) == 2 * len(data)).all()
        assert (stats.co_active[m].sum(axis=1) == len(data)).all()


def test_dense_routing_activates_everything(data):
    stats, _ = export_activations(MultiTaskModel(TINY.with_(top_k=4), (32, 32)), data)
    for m in range(len(stats.active)):
        assert (stats.activation_ratio(m) == 1.0).all()
        assert (stats.co_active[m][:, -1] == len(data)).all()


def test_single_task_concentrates_at_one(data):
    stats, _ = export_activations(MultiTaskModel(TINY.with_(tasks=("depth",)), (32, 32)), data)
    for co, active in zip(stats.co_active, stats.active):
        assert co.shape == (4, 2)
        np.testing.assert_array_equal(co[:, 1], active[0])


def test_csv_layout(tmp_path, data):
    stats, _ = export_activations(MultiTaskModel(TINY, (32, 32)), data)
    a, d = stats.save(tmp_path)
    rows = list(csv.reader(io.StringIO(a.read_text())))
    assert tuple(rows[0]) == ACTIVATION_COLUMNS and len(rows) == 1 + 2 * 4 * 4
    drows = list(csv.reader(io.StringIO(d.read_text())))
    assert tuple(drows[0]) == DISTRIBUTION_COLUMNS and len(drows) == 1 + 2 * 4 * 5
    assert stats.expert_frequency().shape == (2, 4)


def test_linear_decoder_rejected(data):
    with pytest.raises(ValueError):
        export_activations(MultiTaskModel(TINY, (32, 32), decoder="linear"), data)
