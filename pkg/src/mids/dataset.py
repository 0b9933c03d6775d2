"""Labeled datasets, strata bookkeeping and quota sampling.

Datasets are stored column-wise as numpy arrays: ``X`` (n, d) features,
``y`` (n,) integer labels and ``s`` (n, m) integer sensitive-group codes,
one column per sensitive attribute.  A *strata* is the categorical
distribution over the cells of the Cartesian product
``labels x group_1 x ... x group_m``, flattened row-major.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

SUM_TOL = 1e-12


class SchemaError(ValueError):
    """Raised when labels, groups or features fall outside a schema."""


@dataclass(frozen=True)
class Schema:
    d: int
    n_labels: int
    groups: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(int(g) for g in self.groups))
        if self.d < 1:
            raise SchemaError(f"d must be >= 1, got {self.d}")
        if self.n_labels < 1:
            raise SchemaError(f"n_labels must be >= 1, got {self.n_labels}")
        if not self.groups or any(g < 1 for g in self.groups):
            raise SchemaError(f"group cardinalities must be >= 1, got {self.groups}")

    @property
    def n_attributes(self) -> int:
        return len(self.groups)

    @property
    def n_groups(self) -> int:
        """Number of intersectional groups (product of cardinalities)."""
        return int(np.prod(self.groups))

    @property
    def n_cells(self) -> int:
        return self.n_labels * self.n_groups

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_labels, *self.groups)

    def to_json(self) -> dict:
        return {"d": self.d, "n_labels": self.n_labels, "groups": list(self.groups)}


class Sample(NamedTuple):
    features: np.ndarray
    label: int
    groups: tuple[int, ...]


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    s: np.ndarray
    schema: Schema

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=np.int64)
        s = np.asarray(self.s, dtype=np.int64)
        if s.ndim == 1:
            s = s[:, None]
        self.s = s
        n = len(self.y)
        if self.X.ndim != 2 or self.X.shape != (n, self.schema.d):
            raise SchemaError(f"X must have shape ({n}, {self.schema.d}), got {self.X.shape}")
        if self.s.shape != (n, self.schema.n_attributes):
            raise SchemaError(
                f"s must have shape ({n}, {self.schema.n_attributes}), got {self.s.shape}"
            )
        if not np.all(np.isfinite(self.X)):
            raise SchemaError("features must be finite")
        _check_codes(self.y, self.s, self.schema)

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(self.X[i], int(self.y[i]), tuple(int(v) for v in self.s[i]))

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        # rows of a validated dataset need no re-validation
        out = object.__new__(LabeledDataset)
        out.X, out.y, out.s, out.schema = self.X[idx], self.y[idx], self.s[idx], self.schema
        return out

    def with_labels(self, y) -> "LabeledDataset":
        return LabeledDataset(self.X, y, self.s, self.schema)

    @property
    def cells(self) -> np.ndarray:
        return cell_indices(self.y, self.s, self.schema)

    @property
    def group_ids(self) -> np.ndarray:
        """Intersectional group id per sample (row-major over attributes)."""
        return group_indices(self.s, self.schema)

    @classmethod
    def concat(cls, parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        parts = [p for p in parts if p is not None]
        schema = parts[0].schema
        return cls(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.s for p in parts]),
            schema,
        )


def _check_codes(y, s, schema: Schema):
    y = np.asarray(y)
    s = np.asarray(s)
    if y.size and (y.min() < 0 or y.max() >= schema.n_labels):
        raise SchemaError(f"labels must lie in [0, {schema.n_labels})")
    if s.size:
        if s.ndim == 1:
            s = s[:, None]
        if s.shape[1] != schema.n_attributes:
            raise SchemaError(
                f"expected {schema.n_attributes} group columns, got {s.shape[1]}"
            )
        card = np.asarray(schema.groups)
        if s.min() < 0 or np.any(s.max(axis=0) >= card):
            raise SchemaError(f"group codes must lie within cardinalities {schema.groups}")


@dataclass
class StrataDistribution:
    probs: np.ndarray
    schema: Schema

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float).ravel()
        if p.shape != (self.schema.n_cells,):
            raise SchemaError(f"strata needs {self.schema.n_cells} cells, got {p.size}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"strata must be a probability vector, got sum={p.sum()!r}")
        self.probs = p

    def __array__(self, dtype=None, copy=None):
        return self.probs if dtype is None else self.probs.astype(dtype)

    def __len__(self) -> int:
        return len(self.probs)

    @classmethod
    def uniform(cls, schema: Schema) -> "StrataDistribution":
        return cls(np.full(schema.n_cells, 1.0 / schema.n_cells), schema)

    def as_table(self) -> np.ndarray:
        return self.probs.reshape(self.schema.shape)

    def tolist(self) -> list[float]:
        return self.probs.tolist()


def cell_index(label: int, groups, schema: Schema) -> int:
    """Row-major index of the cell ``(label, *groups)``."""
    groups = tuple(int(g) for g in np.atleast_1d(groups))
    if len(groups) != schema.n_attributes:
        raise SchemaError(f"expected {schema.n_attributes} group values, got {len(groups)}")
    if not 0 <= label < schema.n_labels:
        raise SchemaError(f"label {label} outside [0, {schema.n_labels})")
    for g, card in zip(groups, schema.groups):
        if not 0 <= g < card:
            raise SchemaError(f"group value {g} outside [0, {card})")
    return int(np.ravel_multi_index((int(label), *groups), schema.shape))


def cell_indices(y, s, schema: Schema) -> np.ndarray:
    """Vectorised :func:`cell_index`."""
    y = np.asarray(y, dtype=np.int64)
    s = np.asarray(s, dtype=np.int64)
    if s.ndim == 1:
        s = s[:, None]
    _check_codes(y, s, schema)
    return np.ravel_multi_index((y, *s.T), schema.shape).astype(np.int64)


def group_indices(s, schema: Schema) -> np.ndarray:
    s = np.asarray(s, dtype=np.int64)
    if s.ndim == 1:
        s = s[:, None]
    return np.ravel_multi_index(tuple(s.T), schema.groups).astype(np.int64)


def compute_strata(labels, groups, schema: Schema) -> StrataDistribution:
    """Empirical strata of the given (label, group) annotations."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot compute strata of an empty sample")
    groups = np.asarray(groups)
    if len(groups) != len(labels):
        raise ValueError("labels and groups must have the same length")
    cells = cell_indices(labels, groups, schema)
    counts = np.bincount(cells, minlength=schema.n_cells)
    return StrataDistribution(counts / counts.sum(), schema)


@dataclass
class BlobsConfig:
    """Gaussian-blob analogue of a colored, binarized digit dataset.

    One isotropic Gaussian per (label, group) cell.  Labels sit along axis 0,
    each sensitive attribute shifts the mean along its own axis (axis 1 for
    the first attribute).  With one binary attribute, ``skew_beneficial`` is
    P(majoritized | beneficial label) and ``skew_detrimental`` is
    P(majoritized | detrimental label).  ``cell_probs`` overrides the joint
    cell distribution entirely.
    """

    n: int = 10000
    d: int = 2
    n_labels: int = 2
    groups: tuple[int, ...] = (2,)
    class_prior: list[float] | None = None
    skew_beneficial: float = 0.7
    skew_detrimental: float = 0.3
    beneficial_label: int = 1
    majoritized_group: int = 1
    label_sep: float = 1.0
    group_sep: float = 2.0
    scale: float = 0.5
    noise: float = 0.05
    cell_means: list[list[float]] | None = None
    cell_probs: list[float] | None = None

    def __post_init__(self):
        self.groups = tuple(int(g) for g in self.groups)

    @property
    def schema(self) -> Schema:
        return Schema(self.d, self.n_labels, self.groups)

    def validate(self):
        checks = [
            ("n", self.n >= 1),
            ("scale", self.scale > 0),
            ("noise", 0 <= self.noise < 1),
            ("skew_beneficial", 0 <= self.skew_beneficial <= 1),
            ("skew_detrimental", 0 <= self.skew_detrimental <= 1),
            ("beneficial_label", 0 <= self.beneficial_label < self.n_labels),
            ("majoritized_group", 0 <= self.majoritized_group < self.groups[0]),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"invalid BlobsConfig.{name}: {getattr(self, name)!r}")
        schema = self.schema
        if self.n < schema.n_cells:
            raise ValueError(f"invalid BlobsConfig.n: need n >= {schema.n_cells} cells")
        if self.class_prior is not None:
            p = np.asarray(self.class_prior, dtype=float)
            if p.shape != (self.n_labels,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
                raise ValueError(f"invalid BlobsConfig.class_prior: {self.class_prior!r}")
        if self.cell_probs is not None:
            p = np.asarray(self.cell_probs, dtype=float)
            if p.shape != (schema.n_cells,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
                raise ValueError(f"invalid BlobsConfig.cell_probs: {self.cell_probs!r}")
        if self.cell_means is not None:
            m = np.asarray(self.cell_means, dtype=float)
            if m.shape != (schema.n_cells, self.d):
                raise ValueError(
                    f"invalid BlobsConfig.cell_means: expected shape ({schema.n_cells}, {self.d})"
                )
        return self

    def joint_probs(self) -> np.ndarray:
        """Pre-noise P(label, groups) flattened row-major."""
        schema = self.schema
        if self.cell_probs is not None:
            p = np.asarray(self.cell_probs, dtype=float)
            return p / p.sum()
        prior = (
            np.full(self.n_labels, 1.0 / self.n_labels)
            if self.class_prior is None
            else np.asarray(self.class_prior, dtype=float)
        )
        table = np.zeros(schema.shape)
        rest = schema.groups[1:]
        rest_p = np.full(rest, 1.0 / int(np.prod(rest))) if rest else np.array(1.0)
        for label in range(self.n_labels):
            first = np.zeros(schema.groups[0])
            if schema.groups[0] == 1:
                first[0] = 1.0
            else:
                p_maj = (
                    self.skew_beneficial
                    if label == self.beneficial_label
                    else self.skew_detrimental
                )
                first[:] = (1 - p_maj) / (schema.groups[0] - 1)
                first[self.majoritized_group] = p_maj
            table[label] = prior[label] * np.multiply.outer(first, rest_p)
        return table.ravel()

    def means(self) -> np.ndarray:
        schema = self.schema
        if self.cell_means is not None:
            return np.asarray(self.cell_means, dtype=float)
        out = np.zeros((schema.n_cells, self.d))
        label_pos = _spread(self.n_labels, self.label_sep)
        for cell in range(schema.n_cells):
            label, *grp = np.unravel_index(cell, schema.shape)
            out[cell, 0] = label_pos[label]
            for k, (g, card) in enumerate(zip(grp, schema.groups)):
                axis = min(1 + k, self.d - 1)
                if axis == 0 and self.d == 1:
                    continue
                out[cell, axis] += _spread(card, self.group_sep)[g]
        return out


def _spread(k: int, sep: float) -> np.ndarray:
    if k == 1:
        return np.zeros(1)
    return np.linspace(-sep, sep, k)


def make_colored_blobs(config: BlobsConfig, rng) -> LabeledDataset:
    config.validate()
    rng = np.random.default_rng(rng)
    schema = config.schema
    probs = config.joint_probs()
    cells = rng.choice(schema.n_cells, size=config.n, p=probs)
    X = config.means()[cells] + config.scale * rng.standard_normal((config.n, config.d))
    label, *grp = np.unravel_index(cells, schema.shape)
    data = LabeledDataset(X, label, np.column_stack(grp), schema)
    if config.noise > 0:
        data = flip_labels(data, config.noise, rng)
    return data


def flip_labels(data: LabeledDataset, rate: float, rng) -> LabeledDataset:
    """Independently replace each label, with probability ``rate``, by a
    uniformly chosen *different* label."""
    if not 0 <= rate < 1:
        raise ValueError(f"flip rate must be in [0, 1), got {rate}")
    rng = np.random.default_rng(rng)
    k = data.schema.n_labels
    flip = rng.random(len(data)) < rate
    y = data.y.copy()
    if k > 1 and flip.any():
        offset = rng.integers(1, k, size=int(flip.sum()))
        y[flip] = (y[flip] + offset) % k
    return data.with_labels(y)


def noisy_cell_probs(joint: np.ndarray, schema: Schema, rate: float) -> np.ndarray:
    """Closed-form cell distribution after :func:`flip_labels`."""
    table = np.asarray(joint, dtype=float).reshape(schema.n_labels, -1)
    k = schema.n_labels
    if k == 1:
        return table.ravel()
    others = (table.sum(axis=0, keepdims=True) - table) / (k - 1)
    return ((1 - rate) * table + rate * others).ravel()


@dataclass
class QuotaStats:
    quotas: np.ndarray
    filled: np.ndarray
    backfill: int
    with_replacement: bool = False
    deficit: np.ndarray = field(init=False)

    def __post_init__(self):
        self.deficit = self.quotas - self.filled


def quota_sample(
    source: LabeledDataset, target, n: int, rng
) -> tuple[LabeledDataset, QuotaStats]:
    """Stratified sample of exactly ``n`` rows whose cell counts follow ``target``.

    Each cell contributes up to its largest-remainder quota, drawn uniformly
    without replacement.  Any shortfall is backfilled uniformly from the rows
    not yet selected; only if those run out does sampling fall back to drawing
    with replacement (flagged in the returned stats).
    """
    from .star import quota_from_distribution

    if len(source) == 0:
        raise ValueError("cannot quota-sample from an empty source")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(rng)
    quotas = quota_from_distribution(target, n)
    if len(quotas) != source.schema.n_cells:
        raise SchemaError("target strata does not match the source schema")
    cells = source.cells
    chosen = []
    filled = np.zeros_like(quotas)
    for c in np.flatnonzero(quotas):
        members = np.flatnonzero(cells == c)
        take = min(int(quotas[c]), len(members))
        if take:
            chosen.append(rng.permutation(members)[:take])
        filled[c] = take
    chosen = np.concatenate(chosen) if chosen else np.empty(0, dtype=np.int64)
    deficit = n - len(chosen)
    with_replacement = False
    if deficit:
        leftover = np.setdiff1d(np.arange(len(source)), chosen)
        if len(leftover) >= deficit:
            extra = rng.choice(leftover, size=deficit, replace=False)
        else:
            with_replacement = True
            extra = np.concatenate(
                [leftover, rng.integers(0, len(source), size=deficit - len(leftover))]
            )
        chosen = np.concatenate([chosen, extra])
    chosen = rng.permutation(chosen)
    stats = QuotaStats(quotas, filled, int(deficit), with_replacement)
    return source.subset(chosen), stats


def train_holdout_split(data: LabeledDataset, holdout_fraction: float, rng):
    """Split once into (quota pool, strata-probe holdout)."""
    if not 0 < holdout_fraction < 1:
        raise ValueError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    rng = np.random.default_rng(rng)
    perm = rng.permutation(len(data))
    n_hold = max(1, int(round(holdout_fraction * len(data))))
    return data.subset(perm[n_hold:]), data.subset(perm[:n_hold])


def write_jsonl(data: LabeledDataset, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps(data.schema.to_json()) + "\n")
        for x, y, s in zip(data.X, data.y, data.s):
            fh.write(json.dumps({"x": x.tolist(), "y": int(y), "s": s.tolist()}) + "\n")


def read_jsonl(path) -> LabeledDataset:
    with Path(path).open() as fh:
        header = json.loads(fh.readline())
        schema = Schema(header["d"], header["n_labels"], tuple(header["groups"]))
        rows = [json.loads(line) for line in fh if line.strip()]
    X = np.array([r["x"] for r in rows], dtype=float).reshape(len(rows), schema.d)
    y = np.array([r["y"] for r in rows], dtype=np.int64)
    s = np.array([r["s"] for r in rows], dtype=np.int64).reshape(len(rows), schema.n_attributes)
    return LabeledDataset(X, y, s, schema)
