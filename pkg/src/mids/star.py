"""Stratified reparation batches.

A curated batch is filled cell by cell toward a target strata (the fairness
ideal) from a pool of ``b + r`` annotated samples; ``r`` is the reparation
budget.  Cells that cannot meet their quota are backfilled with random
leftovers from the same pool, and the number of such backfilled rows is the
batch's resample count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dataset import LabeledDataset, Schema, StrataDistribution, compute_strata


def quota_from_distribution(target, n: int) -> np.ndarray:
    """Integer quotas summing to ``n`` by largest-remainder apportionment.

    Remainder ties go to the lower cell index.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    p = np.asarray(target, dtype=float).ravel()
    exact = n * p
    quotas = np.floor(exact).astype(np.int64)
    short = n - int(quotas.sum())
    if short > 0:
        remainder = exact - quotas
        # stable sort on -remainder keeps lower indices first among ties
        order = np.argsort(-remainder, kind="stable")
        quotas[order[:short]] += 1
    return quotas


def budget_from_fraction(fraction: float, b: int) -> int:
    if fraction < 0:
        raise ValueError(f"budget fraction must be >= 0, got {fraction}")
    return int(math.floor(fraction * b + 1e-9))


@dataclass
class CuratedBatch:
    batch: LabeledDataset
    achieved: StrataDistribution
    resample_count: int
    deficit: np.ndarray
    quotas: np.ndarray
    pool_size: int
    fresh_draws: int = 0

    @property
    def b(self) -> int:
        return len(self.batch)


def resample_fraction(batch: CuratedBatch) -> float:
    return batch.resample_count / batch.b


def annotate(X, labeler, group_annotators: Sequence, schema: Schema) -> LabeledDataset:
    """Label ``X`` with ``labeler`` and one annotator per sensitive attribute."""
    y = labeler.predict(X)
    s = np.column_stack([a.predict(X) for a in group_annotators])
    return LabeledDataset(X, y, s, schema)


PoolSampler = Callable[[int, np.random.Generator], "np.ndarray | LabeledDataset"]


def curate_batch(
    pool_sampler: PoolSampler,
    b: int,
    budget: int,
    ideal,
    labeler,
    group_annotators: Sequence,
    rng,
    schema: Schema | None = None,
) -> CuratedBatch:
    """Build one reparation batch of exactly ``b`` rows.

    ``pool_sampler(n, rng)`` returns either raw features, which are annotated
    here with ``labeler`` and ``group_annotators``, or an already-labeled
    :class:`LabeledDataset` (annotators are then not consulted).

    Backfill draws from the unused remainder of the pool.  Since at most
    ``b`` rows are quota-filled from a pool of at least ``b`` rows, the
    remainder always covers the deficit and no fresh pool draws are needed.
    """
    if b < 1:
        raise ValueError(f"batch size must be >= 1, got {b}")
    if budget < 0:
        raise ValueError(f"reparation budget must be >= 0, got {budget}")
    rng = np.random.default_rng(rng)
    pool = pool_sampler(b + budget, rng)
    if not isinstance(pool, LabeledDataset):
        if schema is None:
            raise ValueError("schema is required to annotate raw pool features")
        pool = annotate(np.asarray(pool, dtype=float), labeler, group_annotators, schema)
    if len(pool) < b:
        raise RuntimeError(
            f"pool sampler yielded {len(pool)} samples, fewer than the batch size {b}"
        )
    return _fill(pool, quota_from_distribution(ideal, b), b, rng)


def _fill(pool: LabeledDataset, quotas: np.ndarray, b: int, rng) -> CuratedBatch:
    schema = pool.schema
    if len(quotas) != schema.n_cells:
        raise ValueError("fairness ideal does not match the pool schema")
    cells = pool.cells
    taken = np.zeros(len(pool), dtype=bool)
    filled = np.zeros_like(quotas)
    for c in np.flatnonzero(quotas):
        members = np.flatnonzero(cells == c)[: quotas[c]]
        taken[members] = True
        filled[c] = len(members)
    resample = b - int(filled.sum())
    if resample:
        leftover = np.flatnonzero(~taken)
        taken[rng.choice(leftover, size=resample, replace=False)] = True
    order = rng.permutation(np.flatnonzero(taken))
    batch = pool.subset(order)
    return CuratedBatch(
        batch=batch,
        achieved=compute_strata(batch.y, batch.s, schema),
        resample_count=resample,
        deficit=quotas - filled,
        quotas=quotas,
        pool_size=len(pool),
    )


def curate_batches(pool: LabeledDataset, n_batches: int, b: int, budget: int, ideal,
                   rng) -> list[CuratedBatch]:
    """Curate ``n_batches`` batches from one pre-annotated pool.

    The pool is cut into consecutive chunks of ``b + budget`` rows, one per
    batch, which is equivalent to drawing each batch's pool independently
    while annotating everything in a single pass.
    """
    size = b + budget
    if len(pool) < n_batches * size:
        raise RuntimeError(
            f"pool has {len(pool)} samples, {n_batches * size} needed for {n_batches} batches"
        )
    rng = np.random.default_rng(rng)
    quotas = quota_from_distribution(ideal, b)
    return [
        _fill(pool.subset(np.arange(k * size, (k + 1) * size)), quotas, b, rng)
        for k in range(n_batches)
    ]


@dataclass
class StarSummary:
    """Per-generation aggregate over every batch STAR curated."""

    gen: int
    resample_frac: float
    achieved_strata: list[float]
    deficit: list[int]
    n_batches: int

    def to_json(self) -> dict:
        return {
            "gen": self.gen,
            "resample_frac": self.resample_frac,
            "achieved_strata": self.achieved_strata,
            "deficit": self.deficit,
            "n_batches": self.n_batches,
        }


def summarize(batches: Sequence[CuratedBatch], gen: int) -> StarSummary:
    total = sum(cb.b for cb in batches)
    resampled = sum(cb.resample_count for cb in batches)
    counts = sum(cb.achieved.probs * cb.b for cb in batches)
    return StarSummary(
        gen=gen,
        resample_frac=resampled / total,
        achieved_strata=(counts / total).tolist(),
        deficit=np.sum([cb.deficit for cb in batches], axis=0).astype(int).tolist(),
        n_batches=len(batches),
    )
