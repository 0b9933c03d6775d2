import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mids.dataset import LabeledDataset, Schema, StrataDistribution
from mids.metrics import kl_divergence
from mids.star import (
    annotate,
    budget_from_fraction,
    curate_batch,
    curate_batches,
    quota_from_distribution,
    resample_fraction,
    summarize,
)

from oracles import hamilton_quotas

BINARY = Schema(1, 2, (2,))
UNIFORM = [0.25] * 4


def _pool_from_cells(cells, schema=BINARY):
    cells = np.asarray(cells)
    y, g = np.unravel_index(cells, schema.shape)
    X = np.arange(len(cells), dtype=float)[:, None]  # row id as the feature
    return LabeledDataset(X, y, g, schema)


def _sampler(weights, schema=BINARY):
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()

    def sample(n, rng):
        return _pool_from_cells(rng.choice(schema.n_cells, size=n, p=w), schema)

    return sample


class _Threshold:
    """Annotator predicting 1 where feature ``col`` exceeds 0."""

    def __init__(self, col):
        self.col = col

    def predict(self, X):
        return (np.asarray(X)[:, self.col] > 0).astype(int)


# -- quotas and budget ---------------------------------------------------------

def test_quotas_match_exact_rational_apportionment():
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(2, 9))
        p = rng.dirichlet(np.ones(k))
        n = int(rng.integers(1, 500))
        q = quota_from_distribution(p, n)
        assert q.tolist() == hamilton_quotas(p, n)
        assert q.sum() == n
        assert np.all(np.abs(q - n * p) < 1)


def test_quota_ties_go_to_lower_index():
    assert quota_from_distribution(UNIFORM, 2).tolist() == [1, 1, 0, 0]
    assert quota_from_distribution([1 / 3] * 3, 64).tolist() == [22, 21, 21]


def test_quota_rejects_nonpositive_n():
    with pytest.raises(ValueError):
        quota_from_distribution(UNIFORM, 0)


def test_budget_fraction_floors():
    assert budget_from_fraction(0.25, 64) == 16
    assert budget_from_fraction(0.33, 64) == 21
    assert budget_from_fraction(0.0, 64) == 0
    with pytest.raises(ValueError):
        budget_from_fraction(-0.1, 64)


# -- curation ------------------------------------------------------------------

def test_abundant_pool_hits_ideal_exactly():
    # cells repeat 0,1,2,3 so every cell has 20 rows in a pool of 80
    pool = _pool_from_cells(np.tile(np.arange(4), 20))
    cb = curate_batch(lambda n, rng: pool, 64, 16, UNIFORM, None, (), 0)
    assert cb.b == 64 and cb.resample_count == 0
    assert cb.achieved.tolist() == UNIFORM
    assert kl_divergence(cb.achieved.probs, UNIFORM, eps=None) == 0.0


def test_quota_fill_is_first_come_in_pool_order():
    pool = _pool_from_cells(np.tile(np.arange(4), 20))
    cb = curate_batch(lambda n, rng: pool, 8, 72, UNIFORM, None, (), 0)
    # two per cell, the earliest rows of each cell
    assert sorted(cb.batch.X[:, 0].astype(int).tolist()) == [0, 1, 2, 3, 4, 5, 6, 7]


def test_missing_cell_gives_arithmetic_resample_fraction():
    cb = curate_batch(_sampler([1, 1, 1, 0]), 64, 16, UNIFORM, None, (), 3)
    assert cb.b == 64
    # cell 3 is absent: its 16-row quota is backfilled
    assert cb.deficit.tolist()[3] == 16
    assert resample_fraction(cb) >= 0.25
    abundant = _pool_from_cells(np.concatenate([np.tile([0, 1, 2], 27)[:80]]))
    cb = curate_batch(lambda n, rng: abundant, 64, 16, UNIFORM, None, (), 3)
    assert resample_fraction(cb) == pytest.approx(0.25)
    assert cb.achieved.probs[3] == 0.0


def test_empty_pool_cells_backfill_from_leftovers_without_repeats():
    cb = curate_batch(_sampler([5, 1, 1, 0]), 64, 16, UNIFORM, None, (), 5)
    ids = cb.batch.X[:, 0].tolist()
    assert len(ids) == len(set(ids)) == 64
    assert cb.resample_count == 64 - int((cb.quotas - cb.deficit).sum())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4).filter(lambda w: sum(w) > 0.05),
       st.integers(1, 128), st.integers(0, 64), st.integers(0, 2**31))
def test_batch_size_is_always_b(weights, b, r, seed):
    cb = curate_batch(_sampler(weights), b, r, UNIFORM, None, (), seed)
    assert len(cb.batch) == b
    assert 0 <= cb.resample_count <= b
    assert cb.quotas.sum() == b
    assert cb.pool_size == b + r


def test_raw_pool_is_annotated():
    schema = Schema(2, 2, (2,))
    rng = np.random.default_rng(0)

    def raw(n, rng):
        return rng.normal(size=(n, 2))

    cb = curate_batch(raw, 32, 32, UNIFORM, _Threshold(0), [_Threshold(1)], rng, schema)
    assert np.array_equal(cb.batch.y, (cb.batch.X[:, 0] > 0).astype(int))
    assert np.array_equal(cb.batch.s[:, 0], (cb.batch.X[:, 1] > 0).astype(int))
    with pytest.raises(ValueError, match="schema"):
        curate_batch(raw, 8, 0, UNIFORM, _Threshold(0), [_Threshold(1)], rng)


def test_short_pool_raises():
    with pytest.raises(RuntimeError, match="fewer"):
        curate_batch(lambda n, rng: _pool_from_cells([0, 1]), 4, 0, UNIFORM, None, (), 0)


def test_mismatched_ideal_raises():
    with pytest.raises(ValueError):
        curate_batch(_sampler([1, 1, 1, 1]), 8, 0, [0.5, 0.5], None, (), 0)


def test_chunked_curation_matches_per_batch_draws():
    rng = np.random.default_rng(2)
    pool = _pool_from_cells(rng.choice(4, size=3 * 80, p=[0.4, 0.1, 0.1, 0.4]))
    batches = curate_batches(pool, 3, 64, 16, UNIFORM, 7)
    for k, cb in enumerate(batches):
        chunk = pool.subset(np.arange(80 * k, 80 * (k + 1)))
        alone = curate_batch(lambda n, r: chunk, 64, 16, UNIFORM, None, (), 7)
        assert cb.quotas.tolist() == alone.quotas.tolist()
        assert cb.deficit.tolist() == alone.deficit.tolist()
        assert cb.resample_count == alone.resample_count
        filled = int((cb.quotas - cb.deficit).sum())
        # the quota-filled rows are fixed by pool order; only backfill is random
        assert filled == int((alone.quotas - alone.deficit).sum())
    with pytest.raises(RuntimeError):
        curate_batches(pool, 4, 64, 16, UNIFORM, 0)


def test_annotate_builds_dataset():
    X = np.array([[1.0, -1.0], [-1.0, 1.0]])
    data = annotate(X, _Threshold(0), [_Threshold(1)], Schema(2, 2, (2,)))
    assert data.y.tolist() == [1, 0] and data.s[:, 0].tolist() == [0, 1]


def test_summarize_pools_batches():
    b1 = curate_batch(_sampler([1, 1, 1, 1]), 64, 16, UNIFORM, None, (), 0)
    b2 = curate_batch(_sampler([1, 1, 1, 0]), 64, 16, UNIFORM, None, (), 1)
    summary = summarize([b1, b2], gen=4)
    assert summary.n_batches == 2 and summary.gen == 4
    assert summary.resample_frac == pytest.approx((b1.resample_count + b2.resample_count) / 128)
    expected = (b1.achieved.probs + b2.achieved.probs) / 2
    assert summary.achieved_strata == pytest.approx(expected.tolist())
    assert math.isclose(sum(summary.achieved_strata), 1.0)
    assert set(summary.to_json()) == {"gen", "resample_frac", "achieved_strata", "deficit",
                                      "n_batches"}
    StrataDistribution(summary.achieved_strata, BINARY)
