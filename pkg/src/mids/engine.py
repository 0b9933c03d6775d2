"""Generational chains of classifiers and generators.

Three settings are supported:

``SeqClass``
    Every classifier trains on fresh G_0 draws labeled by its predecessor
    (A_L for generation 0).
``SeqGenNonSeqClass`` / ``SeqGenSeqClass``
    Each generator is refit on draws from the previous generator; the
    downstream classifier trains on the new generator's draws labeled by A_L
    or by its predecessor respectively.

Every consumer of randomness gets its own stream derived from the master
seed and a fixed label, so e.g. changing how evaluation draws are made never
perturbs training.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import models
from .dataset import (
    LabeledDataset,
    StrataDistribution,
    compute_strata,
    quota_sample,
    train_holdout_split,
)
from .metrics import GenerationRecord, evaluate_generation
from .models import Oracles, TrainConfig
from .star import CuratedBatch, budget_from_fraction, curate_batches, summarize

SEQ_CLASS = "SeqClass"
SEQ_GEN_NONSEQ = "SeqGenNonSeqClass"
SEQ_GEN_SEQ = "SeqGenSeqClass"
KINDS = (SEQ_CLASS, SEQ_GEN_NONSEQ, SEQ_GEN_SEQ)
STAR_MODES = ("none", "cla", "gen", "both")


def stream(master: int, *labels) -> np.random.Generator:
    """Independent generator keyed by ``master`` and a label path."""
    key = tuple(zlib.crc32(str(lab).encode()) for lab in labels)
    return np.random.default_rng(np.random.SeedSequence(int(master), spawn_key=key))


class SettingError(ValueError):
    pass


@dataclass
class SettingSpec:
    kind: str = SEQ_CLASS
    generations: int = 40
    synthetic_fraction: float = 1.0
    disparity: bool = False
    star: str = "none"
    n_train: int = 2000
    budget_fraction: float = 0.25
    ideal: list[float] | None = None
    holdout_fraction: float = 0.2
    probe_size: int = 1000
    relative_size: int = 2000
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if self.kind not in KINDS:
            raise SettingError(f"setting.kind must be one of {KINDS}, got {self.kind!r}")
        if self.star not in STAR_MODES:
            raise SettingError(f"setting.star must be one of {STAR_MODES}, got {self.star!r}")
        if self.star in ("gen", "both") and self.kind == SEQ_CLASS:
            raise SettingError(
                f"setting.star={self.star!r} needs a generator chain but setting.kind={self.kind!r}"
            )
        if self.generations < 1:
            raise SettingError("setting.generations must be >= 1")
        if not 0 <= self.synthetic_fraction <= 1:
            raise SettingError("setting.synthetic_fraction must be in [0, 1]")
        if self.disparity and self.synthetic_fraction >= 1:
            raise SettingError(
                "setting.disparity requires a non-synthetic share (synthetic_fraction < 1)"
            )
        if self.n_train < 1 or self.probe_size < 1 or self.relative_size < 1:
            raise SettingError("sample counts must be >= 1")
        if self.budget_fraction < 0:
            raise SettingError("setting.budget_fraction must be >= 0")
        self.train.validate()
        return self

    @property
    def sequential_labels(self) -> bool:
        return self.kind != SEQ_GEN_NONSEQ

    @property
    def cla_star(self) -> bool:
        return self.star in ("cla", "both")

    @property
    def gen_star(self) -> bool:
        return self.star in ("gen", "both")


@dataclass
class GenerationState:
    index: int
    classifier: object
    generator: object | None


def mix_training_data(
    synthetic: LabeledDataset | None,
    nonsynthetic: LabeledDataset | None,
    fraction: float,
    n: int,
    rng,
) -> LabeledDataset:
    """``round(fraction * n)`` synthetic rows plus the rest non-synthetic, shuffled."""
    if not 0 <= fraction <= 1:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    n_syn = int(round(fraction * n))
    n_non = n - n_syn
    parts = []
    for name, src, k in (("synthetic", synthetic, n_syn), ("non-synthetic", nonsynthetic, n_non)):
        if k == 0:
            continue
        if src is None or len(src) < k:
            have = 0 if src is None else len(src)
            raise ValueError(f"{name} source has {have} rows, {k} required")
        parts.append(src.subset(np.arange(k)))
    mixed = LabeledDataset.concat(parts)
    return mixed.subset(np.random.default_rng(rng).permutation(len(mixed)))


def disparity_sample(
    probe: LabeledDataset,
    pool: LabeledDataset,
    prev_classifier,
    n: int,
    rng,
):
    """Quota-sample ``pool`` to match the prediction strata of ``prev_classifier``.

    The strata is formed from the classifier's predicted labels on ``probe``
    paired with the probe's recorded group annotations.  Returns the sample
    and its :class:`~mids.dataset.QuotaStats`.
    """
    if len(probe) == 0:
        raise ValueError("strata probe set is empty")
    target = compute_strata(prev_classifier.predict(probe.X), probe.s, probe.schema)
    return quota_sample(pool, target, n, rng)


def _annotate(X, labeler, oracles: Oracles, schema) -> LabeledDataset:
    y = labeler.predict(X)
    s = np.column_stack([a.predict(X) for a in oracles.a_s])
    return LabeledDataset(X, y, s, schema)


def _pool_sampler(source, n_frac: float, labeler, oracles, nonsyn, schema):
    """Pool of fresh ``source`` draws (annotated) mixed with non-synthetic rows."""

    def sample(n, rng):
        n_syn = int(round(n_frac * n)) if nonsyn is not None else n
        parts = []
        if n_syn:
            parts.append(_annotate(source.sample(n_syn, rng), labeler, oracles, schema))
        if n - n_syn:
            replace_ = len(nonsyn) < n - n_syn
            parts.append(nonsyn.subset(rng.choice(len(nonsyn), n - n_syn, replace=replace_)))
        pool = LabeledDataset.concat(parts)
        return pool.subset(rng.permutation(len(pool)))

    return sample


def _curate_many(sampler, n_batches, b, r, ideal, rng) -> list[CuratedBatch]:
    # one pool draw covering every batch; chunks of b + r rows match per-batch draws
    pool = sampler(n_batches * (b + r), rng)
    return curate_batches(pool, n_batches, b, r, ideal, rng)


class _Chain:
    """State shared by one seeded generational chain."""

    def __init__(self, spec: SettingSpec, oracles: Oracles, data: LabeledDataset,
                 eval_set: LabeledDataset, seed: int, eval_seed: int | None = None,
                 checkpoint_dir=None):
        self.spec = spec.validate()
        self.oracles = oracles
        self.schema = data.schema
        self.seed = int(seed)
        self.eval_seed = self.seed if eval_seed is None else int(eval_seed)
        self.eval_set = eval_set
        self.pool, self.probe = train_holdout_split(
            data, spec.holdout_fraction, stream(seed, "split")
        )
        self.ideal = (
            StrataDistribution(spec.ideal, self.schema)
            if spec.ideal is not None
            else StrataDistribution.uniform(self.schema)
        )
        self.k_labels = self.schema.n_labels
        counts = np.bincount(eval_set.y, minlength=self.k_labels)
        self.majority_rate = float(counts.max() / counts.sum())
        self.b = spec.train.batch_size
        self.r = budget_from_fraction(spec.budget_fraction, self.b)
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None

    # -- data ---------------------------------------------------------------

    def n_split(self):
        n_syn = int(round(self.spec.synthetic_fraction * self.spec.n_train))
        return n_syn, self.spec.n_train - n_syn

    def nonsynthetic(self, gen, prev_classifier, n_non):
        """h_i: uniform sample of D, or disparity-amplified when enabled."""
        if n_non == 0:
            return None, None
        rng = stream(self.seed, "nonsyn", gen)
        if self.spec.disparity and prev_classifier is not None:
            h, stats = disparity_sample(self.probe, self.pool, prev_classifier, n_non, rng)
            info = {
                "strata": compute_strata(h.y, h.s, self.schema).tolist(),
                "backfill": stats.backfill,
                "with_replacement": stats.with_replacement,
            }
            return h, info
        replace_ = n_non > len(self.pool)
        h = self.pool.subset(rng.choice(len(self.pool), n_non, replace=replace_))
        return h, None

    # -- training -----------------------------------------------------------

    def train_classifier(self, gen, source, labeler, h, fraction):
        """Train C_i on draws from ``source`` labeled by ``labeler`` (+ ``h``)."""
        cfg = self.spec.train
        rng_data = stream(self.seed, "cla-data", gen)
        rng_train = stream(self.seed, "cla-train", gen)
        n = self.spec.n_train
        steps_per_epoch = math.ceil(n / cfg.batch_size)
        star_info = None
        if self.spec.cla_star:
            sampler = _pool_sampler(source, fraction, labeler, self.oracles, h, self.schema)
            rng_star = stream(self.seed, "cla-star", gen)
            batches = _curate_many(
                sampler, steps_per_epoch * cfg.epochs, self.b, self.r, self.ideal, rng_star
            )
            clf = models.SGDSoftmaxClassifier(
                n_labels=self.k_labels, epochs=cfg.epochs, batch_size=cfg.batch_size,
                learning_rate=cfg.learning_rate, l2=cfg.l2,
            ).fit_batches(((cb.batch.X, cb.batch.y) for cb in batches), steps_per_epoch)
            summary = summarize(batches, gen)
            star_info = summary.to_json()
            batch_strata = StrataDistribution(
                np.asarray(summary.achieved_strata) / np.sum(summary.achieved_strata), self.schema
            )
        else:
            n_syn = n - (len(h) if h is not None else 0)
            syn = (
                _annotate(source.sample(n_syn, rng_data), labeler, self.oracles, self.schema)
                if n_syn
                else None
            )
            train = LabeledDataset.concat([syn, h])
            clf = models.train_classifier(train.X, train.y, cfg, rng_train, self.k_labels)
            batch_strata = compute_strata(train.y, train.s, self.schema)
        return clf, batch_strata, star_info

    def train_generator(self, gen, prev_generator, labeler, h, fraction):
        cfg = self.spec.train
        n = self.spec.n_train
        rng_fit = stream(self.seed, "gen-fit", gen)
        star_info = None
        if self.spec.gen_star:
            sampler = _pool_sampler(prev_generator, fraction, labeler, self.oracles, h, self.schema)
            rng_star = stream(self.seed, "gen-star", gen)
            batches = _curate_many(
                sampler, math.ceil(n / self.b), self.b, self.r, self.ideal, rng_star
            )
            X = np.concatenate([cb.batch.X for cb in batches])[:n]
            star_info = summarize(batches, gen).to_json()
        else:
            n_non = len(h) if h is not None else 0
            parts = []
            if n - n_non:
                parts.append(prev_generator.sample(n - n_non, stream(self.seed, "gen-data", gen)))
            if n_non:
                parts.append(h.X)
            X = np.concatenate(parts)
        return models.fit_generator(X, cfg, rng_fit), star_info

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, gen, clf, generator, predecessor, relative_source, batch_strata,
                 star, nonsyn_info):
        rec = evaluate_generation(
            gen,
            clf,
            self.eval_set,
            self.oracles,
            self.ideal,
            stream(self.eval_seed, "eval", gen),
            generator=generator,
            predecessor=predecessor,
            relative_source=relative_source,
            batch_strata=batch_strata,
            probe_size=self.spec.probe_size,
            relative_size=self.spec.relative_size,
            star=star,
            majority_rate=self.majority_rate,
        )
        rec.nonsynthetic = nonsyn_info
        return rec

    def checkpoint(self, gen, clf, generator):
        if self.checkpoint_dir is None:
            return
        out = self.checkpoint_dir / f"gen_{gen}"
        out.mkdir(parents=True, exist_ok=True)
        models.save_model(clf, out / "classifier.json")
        if generator is not None:
            models.save_model(generator, out / "generator.json")


def run_seq_class(spec: SettingSpec, oracles: Oracles, data: LabeledDataset,
                  eval_set: LabeledDataset, seed: int, *, eval_seed=None,
                  checkpoint_dir=None) -> list[GenerationRecord]:
    if spec.kind != SEQ_CLASS:
        raise SettingError(f"run_seq_class needs kind={SEQ_CLASS!r}, got {spec.kind!r}")
    chain = _Chain(spec, oracles, data, eval_set, seed, eval_seed, checkpoint_dir)
    _, n_non = chain.n_split()
    records = []
    prev = None
    for i in range(spec.generations):
        labeler = oracles.a_l if prev is None else prev
        h, h_info = chain.nonsynthetic(i, prev, n_non)
        clf, batch_strata, star_info = chain.train_classifier(
            i, oracles.g0, labeler, h, spec.synthetic_fraction
        )
        star = {"cla": star_info} if star_info else {}
        records.append(
            chain.evaluate(i, clf, None, prev, oracles.g0, batch_strata, star, h_info)
        )
        chain.checkpoint(i, clf, None)
        prev = clf
    return records


def run_seq_gen(spec: SettingSpec, oracles: Oracles, data: LabeledDataset,
                eval_set: LabeledDataset, seed: int, *, eval_seed=None,
                checkpoint_dir=None) -> list[GenerationRecord]:
    if spec.kind not in (SEQ_GEN_NONSEQ, SEQ_GEN_SEQ):
        raise SettingError(f"run_seq_gen needs a generator-bearing kind, got {spec.kind!r}")
    chain = _Chain(spec, oracles, data, eval_set, seed, eval_seed, checkpoint_dir)
    _, n_non = chain.n_split()
    records = []
    prev_clf = None
    generator = oracles.g0
    for i in range(spec.generations):
        if prev_clf is None or not spec.sequential_labels:
            labeler = oracles.a_l
        else:
            labeler = prev_clf
        h, h_info = chain.nonsynthetic(i, prev_clf, n_non)
        star = {}
        if i > 0:
            generator, gen_star = chain.train_generator(
                i, generator, labeler, h, spec.synthetic_fraction
            )
            if gen_star:
                star["gen"] = gen_star
        # a disparity-amplified h_i shapes the generator only
        h_cla = None if (spec.disparity and i > 0) else h
        cla_fraction = spec.synthetic_fraction if h_cla is not None else 1.0
        clf, batch_strata, cla_star = chain.train_classifier(
            i, generator, labeler, h_cla, cla_fraction
        )
        if cla_star:
            star["cla"] = cla_star
        records.append(
            chain.evaluate(i, clf, generator, prev_clf, generator, batch_strata, star, h_info)
        )
        chain.checkpoint(i, clf, generator)
        prev_clf = clf
    return records


def run_setting(spec: SettingSpec, oracles, data, eval_set, seed, **kwargs):
    runner = run_seq_class if spec.kind == SEQ_CLASS else run_seq_gen
    return runner(spec, oracles, data, eval_set, seed, **kwargs)


def records_to_jsonl(records) -> str:
    return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records)


def with_overrides(spec: SettingSpec, **changes) -> SettingSpec:
    return replace(spec, **changes)
