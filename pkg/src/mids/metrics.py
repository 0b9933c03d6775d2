"""Group-fairness and utility metrics, strata divergence and per-generation records.

Multi-group metrics reduce by the maximum over all pairs of groups.  A
metric that cannot be computed (fewer than two groups with a defined rate)
is reported as ``nan`` and serialised as ``null``; it is never coerced to 0.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .dataset import LabeledDataset, Schema, StrataDistribution, compute_strata, group_indices

KL_EPS = 1e-9
UNDEFINED = float("nan")


def _pair_gaps(rates: dict) -> dict[str, float]:
    """``|rate_a - rate_b|`` for every pair of groups with defined rates."""
    keys = sorted(k for k, v in rates.items() if not math.isnan(v))
    return {f"{a}-{b}": abs(rates[a] - rates[b]) for a, b in itertools.combinations(keys, 2)}


def _max_pairwise(rates: dict) -> float:
    gaps = _pair_gaps(rates)
    return max(gaps.values()) if gaps else UNDEFINED


def selection_rates(predictions, groups) -> dict[int, float]:
    """Positive-prediction rate for every group present in ``groups``."""
    p = np.asarray(predictions)
    g = np.asarray(groups)
    return {int(k): float(np.mean(p[g == k] == 1)) for k in np.unique(g)}


def group_true_positive_rates(predictions, labels, groups, positive: int = 1) -> dict[int, float]:
    p, y, g = map(np.asarray, (predictions, labels, groups))
    out = {}
    for k in np.unique(g):
        mask = (g == k) & (y == positive)
        out[int(k)] = float(np.mean(p[mask] == 1)) if mask.any() else UNDEFINED
    return out


def demographic_parity_diff(predictions, groups) -> float:
    return _max_pairwise(selection_rates(predictions, groups))


def equalized_odds_pairs(predictions, labels, groups) -> dict[str, float]:
    """Per group pair, the larger of the TPR and FPR gaps.

    A rate is undefined for a group lacking positives (TPR) or negatives
    (FPR).  Pairs are compared on whichever rates both groups define.
    """
    tpr = group_true_positive_rates(predictions, labels, groups, positive=1)
    fpr = group_true_positive_rates(predictions, labels, groups, positive=0)
    out = {}
    for a, b in itertools.combinations(sorted(tpr), 2):
        gaps = [
            abs(r[a] - r[b])
            for r in (tpr, fpr)
            if not (math.isnan(r[a]) or math.isnan(r[b]))
        ]
        if gaps:
            out[f"{a}-{b}"] = max(gaps)
    return out


def equalized_odds_diff(predictions, labels, groups) -> float:
    """Max over group pairs of ``max(|dTPR|, |dFPR|)``."""
    pairs = equalized_odds_pairs(predictions, labels, groups)
    return max(pairs.values()) if pairs else UNDEFINED


def accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.size == 0:
        raise ValueError("accuracy of an empty sample is undefined")
    return float(np.mean(p == y))


def group_accuracies(predictions, labels, groups) -> dict[int, float]:
    p, y, g = map(np.asarray, (predictions, labels, groups))
    return {int(k): float(np.mean(p[g == k] == y[g == k])) for k in np.unique(g)}


def group_accuracy_gap(predictions, labels, groups) -> float:
    return _max_pairwise(group_accuracies(predictions, labels, groups))


def kl_divergence(p, q, eps: float | None = KL_EPS) -> float:
    """KL(p || q) in nats.  ``eps`` is added to every cell of both
    distributions before renormalising; ``eps=None`` gives the raw value."""
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    if p.shape != q.shape:
        raise ValueError(f"cell-count mismatch: {p.size} vs {q.size}")
    if eps is not None:
        p = (p + eps) / (p + eps).sum()
        q = (q + eps) / (q + eps).sum()
    mask = p > 0
    with np.errstate(divide="ignore"):
        val = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    return max(val, 0.0)


def classification_report(predictions, labels, groups) -> dict:
    return {
        "accuracy": accuracy(predictions, labels),
        "acc_gap": group_accuracy_gap(predictions, labels, groups),
        "dp": demographic_parity_diff(predictions, groups),
        "eodds": equalized_odds_diff(predictions, labels, groups),
        "selection_rates": selection_rates(predictions, groups),
        "pairwise": {
            "acc_gap": _pair_gaps(group_accuracies(predictions, labels, groups)),
            "dp": _pair_gaps(selection_rates(predictions, groups)),
            "eodds": equalized_odds_pairs(predictions, labels, groups),
        },
    }


def marginal_balance(values, k: int) -> list[float]:
    counts = np.bincount(np.asarray(values, dtype=np.int64), minlength=k)
    return (counts / counts.sum()).tolist()


@dataclass
class GenerationRecord:
    gen: int
    actual: dict
    relative: dict | None
    classifier_strata: list[float]
    kl_classifier: float
    batch_strata: list[float]
    kl_batch: float
    generator_strata: list[float] | None = None
    kl_generator: float | None = None
    class_balance: list[float] | None = None
    group_balance: list[list[float]] | None = None
    generator_variance: list[float] | None = None
    star: dict = field(default_factory=dict)
    nonsynthetic: dict | None = None
    collapsed: bool = False
    train_loss: float | None = None

    def to_json(self) -> dict:
        return _jsonable(
            {
                "gen": self.gen,
                "actual": self.actual,
                "relative": self.relative,
                "classifier_strata": self.classifier_strata,
                "kl_classifier": self.kl_classifier,
                "batch_strata": self.batch_strata,
                "kl_batch": self.kl_batch,
                "generator_strata": self.generator_strata,
                "kl_generator": self.kl_generator,
                "class_balance": self.class_balance,
                "group_balance": self.group_balance,
                "generator_variance": self.generator_variance,
                "star": self.star,
                "nonsynthetic": self.nonsynthetic,
                "collapsed": self.collapsed,
                "train_loss": self.train_loss,
            }
        )


REQUIRED_FIELDS = {
    "gen": int,
    "actual": dict,
    "classifier_strata": list,
    "kl_classifier": float,
    "batch_strata": list,
    "kl_batch": float,
    "collapsed": bool,
}
REPORT_FIELDS = ("accuracy", "acc_gap", "dp", "eodds", "selection_rates")


def validate_record(rec: dict) -> None:
    """Schema check for one serialised record; raises ``ValueError``."""
    for key, typ in REQUIRED_FIELDS.items():
        if key not in rec:
            raise ValueError(f"record missing field {key!r}")
        if typ is float and rec[key] is not None and not isinstance(rec[key], (int, float)):
            raise ValueError(f"record field {key!r} must be numeric")
        if typ is not float and not isinstance(rec[key], typ):
            raise ValueError(f"record field {key!r} must be {typ.__name__}")
    for block in ("actual", "relative"):
        if block == "relative" and rec.get("relative") is None:
            if rec["gen"] > 0:
                raise ValueError("relative metrics missing after generation 0")
            continue
        for key in REPORT_FIELDS:
            if key not in rec[block]:
                raise ValueError(f"record.{block} missing {key!r}")
    if rec["gen"] == 0 and rec.get("relative") is not None:
        raise ValueError("generation 0 has no predecessor; relative must be null")
    for key in ("classifier_strata", "batch_strata", "generator_strata"):
        vals = rec.get(key)
        if vals is not None and (abs(sum(vals) - 1) > 1e-9 or min(vals) < 0):
            raise ValueError(f"{key} is not a probability vector")
    for key in ("kl_classifier", "kl_batch", "kl_generator"):
        if rec.get(key) is not None and rec[key] < 0:
            raise ValueError(f"{key} must be non-negative")


def _jsonable(obj: Any):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if math.isnan(v) else v
    return obj


def strata_of(labels, groups, schema: Schema) -> StrataDistribution:
    return compute_strata(labels, groups, schema)


def evaluate_generation(
    gen: int,
    classifier,
    eval_set: LabeledDataset,
    oracles,
    ideal,
    rng,
    *,
    generator=None,
    predecessor=None,
    relative_source=None,
    batch_strata: StrataDistribution | None = None,
    probe_size: int = 1000,
    relative_size: int = 2000,
    star: dict | None = None,
    majority_rate: float | None = None,
    collapse_margin: float = 0.02,
) -> GenerationRecord:
    """Actual, relative and generator-probe metrics for one generation.

    ``relative_source`` is the model whose draws feed the relative
    evaluation (G_0 in the sequential-classifier setting, G_i otherwise);
    those draws are labeled by ``predecessor`` and grouped by the
    attribute oracles.
    """
    rng = np.random.default_rng(rng)
    schema = eval_set.schema
    ideal = np.asarray(ideal, dtype=float)
    stream_rel, stream_probe = rng.spawn(2)

    preds = classifier.predict(eval_set.X)
    gids = eval_set.group_ids
    actual = classification_report(preds, eval_set.y, gids)
    cls_strata = compute_strata(preds, eval_set.s, schema)

    relative = None
    if predecessor is not None:
        source = relative_source if relative_source is not None else oracles.g0
        Xr = source.sample(relative_size, stream_rel)
        yr = predecessor.predict(Xr)
        sr = np.column_stack([a.predict(Xr) for a in oracles.a_s])
        relative = classification_report(classifier.predict(Xr), yr, group_indices(sr, schema))

    rec = GenerationRecord(
        gen=gen,
        actual=actual,
        relative=relative,
        classifier_strata=cls_strata.tolist(),
        kl_classifier=kl_divergence(cls_strata, ideal),
        batch_strata=batch_strata.tolist() if batch_strata is not None else cls_strata.tolist(),
        kl_batch=kl_divergence(batch_strata if batch_strata is not None else cls_strata, ideal),
        star=star or {},
        train_loss=(classifier.loss_history_[-1] if classifier.loss_history_ else None),
    )
    if generator is not None:
        Xp = generator.sample(probe_size, stream_probe)
        yp = oracles.a_l.predict(Xp)
        sp = np.column_stack([a.predict(Xp) for a in oracles.a_s])
        gen_strata = compute_strata(yp, sp, schema)
        rec.generator_strata = gen_strata.tolist()
        rec.kl_generator = kl_divergence(gen_strata, ideal)
        rec.class_balance = marginal_balance(yp, schema.n_labels)
        rec.group_balance = [
            marginal_balance(sp[:, k], card) for k, card in enumerate(schema.groups)
        ]
        rec.generator_variance = Xp.var(axis=0).tolist()
    if majority_rate is not None:
        rec.collapsed = bool(abs(actual["accuracy"] - majority_rate) <= collapse_margin)
    return rec


# --- multi-seed aggregation -------------------------------------------------

Z95 = 1.959963984540054


def flatten_record(rec: dict) -> dict[str, float]:
    """Scalar view of a serialised record used for CSV export and charts."""
    out: dict[str, float] = {}
    for block in ("actual", "relative"):
        rep = rec.get(block)
        if rep is None:
            continue
        prefix = "" if block == "actual" else "rel_"
        for key in ("accuracy", "acc_gap", "dp", "eodds"):
            out[prefix + key] = rep.get(key)
    for key in ("kl_classifier", "kl_batch", "kl_generator", "train_loss"):
        if rec.get(key) is not None:
            out[key] = rec[key]
    for key in ("classifier_strata", "batch_strata", "generator_strata"):
        vals = rec.get(key)
        if vals is not None:
            for c, v in enumerate(vals):
                out[f"{key}_{c}"] = v
    if rec.get("class_balance") is not None:
        for c, v in enumerate(rec["class_balance"]):
            out[f"class_balance_{c}"] = v
    if rec.get("group_balance") is not None:
        for k, bal in enumerate(rec["group_balance"]):
            for c, v in enumerate(bal):
                out[f"group_balance_{k}_{c}"] = v
    if rec.get("generator_variance") is not None:
        out["generator_variance"] = float(np.mean(rec["generator_variance"]))
    for side, stats in (rec.get("star") or {}).items():
        out[f"resample_frac_{side}"] = stats["resample_frac"]
    out["collapsed"] = float(rec.get("collapsed", False))
    return out


def mean_ci(values: Sequence[float]) -> tuple[float, float, float]:
    """Mean and normal-approximation 95% interval; NaNs are dropped."""
    v = np.asarray([x for x in values if x is not None and not math.isnan(x)], dtype=float)
    if v.size == 0:
        return UNDEFINED, UNDEFINED, UNDEFINED
    m = float(v.mean())
    if v.size == 1:
        return m, m, m
    half = Z95 * float(v.std(ddof=1)) / math.sqrt(v.size)
    return m, m - half, m + half


def aggregate_runs(runs: Sequence[Sequence[dict]]) -> list[dict]:
    """Per-generation mean/CI rows across seeds for every scalar metric."""
    n_gen = max(len(r) for r in runs)
    rows = []
    for g in range(n_gen):
        flats = [flatten_record(r[g]) for r in runs if len(r) > g]
        keys = sorted(set().union(*flats))
        row = {"generation": g, "n_seeds": len(flats)}
        for key in keys:
            m, lo, hi = mean_ci([f.get(key, UNDEFINED) for f in flats])
            row[f"{key}_mean"] = m
            row[f"{key}_ci_low"] = lo
            row[f"{key}_ci_high"] = hi
        rows.append(row)
    return rows
