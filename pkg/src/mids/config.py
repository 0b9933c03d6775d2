"""Experiment configuration: JSON files layered over named presets.

A config file is a JSON object with these top-level blocks, all optional::

    {
      "preset": "seqclass-cla-star",
      "dataset":  {... BlobsConfig fields ...},
      "oracles":  {... TrainConfig fields used for G_0, A_L and A_S ...},
      "setting":  {"kind", "generations", "synthetic_fraction", "disparity",
                   "n_train", "holdout_fraction", "train": {... TrainConfig ...}},
      "star":     {"mode", "ideal", "budget_fraction"},
      "metrics":  {"eval_size", "probe_size", "relative_size"},
      "arms":     {"<name>": {partial blocks overriding the above}},
      "seeds":    [0, 1, ...],
      "output":   {"dir", "formats"}
    }

Resolution order is: built-in defaults, then the preset, then the file.
Each arm is the base config with the arm's partial blocks merged on top.
Every validation error names the offending key path.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .dataset import BlobsConfig
from .engine import KINDS, SEQ_CLASS, STAR_MODES, SettingError, SettingSpec
from .models import TrainConfig


class ConfigError(ValueError):
    """Invalid experiment configuration."""


BLOCKS = ("preset", "dataset", "oracles", "setting", "star", "metrics", "arms", "seeds", "output")
ARM_BLOCKS = ("dataset", "oracles", "setting", "star", "metrics")
FORMATS = ("jsonl", "csv", "svg")
DEFAULT_SEEDS = list(range(10))

_SETTING_KEYS = ("kind", "generations", "synthetic_fraction", "disparity", "n_train",
                 "holdout_fraction", "train")
_STAR_DEFAULTS = {"mode": "none", "ideal": None, "budget_fraction": 0.25}
_METRIC_DEFAULTS = {"eval_size": 5000, "probe_size": 1000, "relative_size": 2000}
_OUTPUT_DEFAULTS = {"dir": "runs", "formats": list(FORMATS)}


def _arm(**blocks):
    return blocks


PRESETS: dict[str, dict] = {
    "seqclass-skew70": {
        "description": "SeqClass on skewed blobs (0.7/0.3), fully synthetic, no reparation",
        "setting": {"kind": "SeqClass"},
    },
    "seqclass-cla-star": {
        "description": "SeqClass with and without cla-STAR",
        "setting": {"kind": "SeqClass"},
        "arms": {"none": _arm(star={"mode": "none"}), "cla": _arm(star={"mode": "cla"})},
    },
    "seqclass-50-50": {
        "description": "SeqClass with half non-synthetic data, with and without disparity amplification",
        "setting": {"kind": "SeqClass", "synthetic_fraction": 0.5},
        "arms": {
            "uniform": _arm(setting={"disparity": False}),
            "disparity": _arm(setting={"disparity": True}),
        },
    },
    "seqgen-seq-vs-nonseq": {
        "description": "Generator chain with sequential versus oracle-labeled classifiers",
        "arms": {
            "seq": _arm(setting={"kind": "SeqGenSeqClass"}),
            "nonseq": _arm(setting={"kind": "SeqGenNonSeqClass"}),
        },
    },
    "seqgen-star": {
        "description": "SeqGenSeqClass without reparation, with cla-STAR and with gen-STAR",
        "setting": {"kind": "SeqGenSeqClass"},
        "arms": {
            "none": _arm(star={"mode": "none"}),
            "cla": _arm(star={"mode": "cla"}),
            "gen": _arm(star={"mode": "gen"}),
        },
    },
    "synthetic-fraction": {
        "description": "SeqGenSeqClass sweeping the synthetic share of training data",
        "setting": {"kind": "SeqGenSeqClass"},
        "arms": {
            f"frac_{f:g}": _arm(setting={"synthetic_fraction": f}) for f in (0.0, 0.25, 0.5, 1.0)
        },
    },
    "balance-ablation": {
        "description": "SeqGenSeqClass varying group balance (unskewed) and class balance (skewed)",
        "setting": {"kind": "SeqGenSeqClass"},
        "arms": {
            **{
                f"group_{p:g}": _arm(dataset={"skew_beneficial": p, "skew_detrimental": p})
                for p in (0.3, 0.5, 0.7)
            },
            **{
                f"class_{p:g}": _arm(dataset={"class_prior": [round(1 - p, 10), p]})
                for p in (0.3, 0.5, 0.7)
            },
        },
    },
    "budget-sweep": {
        "description": "SeqClass cla-STAR over a grid of reparation budgets",
        "setting": {"kind": "SeqClass"},
        "star": {"mode": "cla"},
        "arms": {
            f"budget_{b:g}": _arm(star={"budget_fraction": b}) for b in (0.0, 0.1, 0.25, 0.33, 0.5)
        },
    },
    "svhn-analogue": {
        "description": "SeqClass on class-imbalanced blobs (60.7% beneficial), budget 0.33",
        "dataset": {"class_prior": [0.393, 0.607]},
        "setting": {"kind": "SeqClass"},
        "star": {"budget_fraction": 0.33},
        "arms": {"none": _arm(star={"mode": "none"}), "cla": _arm(star={"mode": "cla"})},
    },
}


def preset_names() -> list[str]:
    return sorted(PRESETS)


@dataclass
class ArmConfig:
    """Everything one seeded chain needs."""

    name: str
    dataset: BlobsConfig
    oracles: TrainConfig
    setting: SettingSpec
    eval_size: int

    def to_dict(self) -> dict:
        spec = asdict(self.setting)
        return {
            "dataset": _plain(asdict(self.dataset)),
            "oracles": asdict(self.oracles),
            "setting": {k: spec[k] for k in _SETTING_KEYS},
            "star": {
                "mode": spec["star"],
                "ideal": spec["ideal"],
                "budget_fraction": spec["budget_fraction"],
            },
            "metrics": {
                "eval_size": self.eval_size,
                "probe_size": spec["probe_size"],
                "relative_size": spec["relative_size"],
            },
        }


@dataclass
class ExperimentConfig:
    preset: str | None
    arms: dict[str, ArmConfig]
    seeds: list[int]
    output_dir: str
    formats: list[str]

    @property
    def kinds(self) -> set[str]:
        return {a.setting.kind for a in self.arms.values()}

    def to_dict(self) -> dict:
        """Canonical, fully defaulted form (the input to the run hash)."""
        return {
            "preset": self.preset,
            "arms": {name: arm.to_dict() for name, arm in self.arms.items()},
            "seeds": list(self.seeds),
            "output": {"dir": self.output_dir, "formats": list(self.formats)},
        }


def _plain(obj):
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    if isinstance(obj, list):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _require_object(value, path):
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
    return value


def _check_keys(block: dict, allowed, path):
    for key in block:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key (allowed: {', '.join(allowed)})")


def _coerce(value, default, path):
    """Type-check ``value`` against the type of the field's default."""
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    return value


def _build(cls, block: dict, path: str, skip=()):
    _require_object(block, path)
    names = [f.name for f in fields(cls) if f.name not in skip]
    _check_keys(block, names, path)
    proto = cls()
    kwargs = {k: _coerce(v, getattr(proto, k), f"{path}.{k}") for k, v in block.items()}
    return cls(**kwargs)


def _validated(obj, path):
    try:
        obj.validate()
    except SettingError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return obj


def _resolve_arm(name: str, raw: dict, prefix: str) -> ArmConfig:
    dataset = _validated(_build(BlobsConfig, raw.get("dataset", {}), f"{prefix}dataset"),
                         f"{prefix}dataset")
    oracles = _validated(_build(TrainConfig, raw.get("oracles", {}), f"{prefix}oracles"),
                         f"{prefix}oracles")

    setting = dict(_require_object(raw.get("setting", {}), f"{prefix}setting"))
    _check_keys(setting, _SETTING_KEYS, f"{prefix}setting")
    train = _validated(_build(TrainConfig, setting.pop("train", {}), f"{prefix}setting.train"),
                       f"{prefix}setting.train")

    star = _require_object(raw.get("star", {}), f"{prefix}star")
    _check_keys(star, tuple(_STAR_DEFAULTS), f"{prefix}star")
    star = {**_STAR_DEFAULTS, **star}
    metrics = _require_object(raw.get("metrics", {}), f"{prefix}metrics")
    _check_keys(metrics, tuple(_METRIC_DEFAULTS), f"{prefix}metrics")
    metrics = {**_METRIC_DEFAULTS, **metrics}
    for key, value in metrics.items():
        _coerce(value, 1, f"{prefix}metrics.{key}")
        if value < 1:
            raise ConfigError(f"{prefix}metrics.{key}: must be >= 1, got {value}")

    kind = setting.get("kind", SEQ_CLASS)
    if kind not in KINDS:
        raise ConfigError(f"{prefix}setting.kind: must be one of {', '.join(KINDS)}, got {kind!r}")
    mode = star["mode"]
    if mode not in STAR_MODES:
        raise ConfigError(f"{prefix}star.mode: must be one of {', '.join(STAR_MODES)}, got {mode!r}")
    if mode in ("gen", "both") and kind == SEQ_CLASS:
        raise ConfigError(
            f"{prefix}star.mode={mode!r} contradicts {prefix}setting.kind={kind!r}: "
            "gen-STAR needs a generator chain"
        )
    ideal = star["ideal"]
    if ideal is not None:
        schema = dataset.schema
        if (not isinstance(ideal, list) or len(ideal) != schema.n_cells
                or any(not isinstance(v, (int, float)) or v < 0 for v in ideal)
                or abs(sum(ideal) - 1) > 1e-9):
            raise ConfigError(
                f"{prefix}star.ideal: expected {schema.n_cells} non-negative values summing to 1"
            )

    spec = _build(SettingSpec, setting, f"{prefix}setting",
                  skip=("star", "budget_fraction", "ideal", "probe_size", "relative_size"))
    spec.train = train
    spec.star = mode
    spec.ideal = ideal
    spec.budget_fraction = _coerce(star["budget_fraction"], 0.0, f"{prefix}star.budget_fraction")
    spec.probe_size = metrics["probe_size"]
    spec.relative_size = metrics["relative_size"]
    try:
        spec.validate()
    except SettingError as exc:
        raise ConfigError(f"{prefix}{exc}") from None
    return ArmConfig(name, dataset, oracles, spec, metrics["eval_size"])


def resolve(raw: dict) -> ExperimentConfig:
    """Validate a parsed config object and fill every default."""
    _require_object(raw, "config")
    _check_keys(raw, BLOCKS, "config")
    preset = raw.get("preset")
    layered: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"preset: unknown preset {preset!r} (available: {', '.join(preset_names())})"
            )
        layered = {k: v for k, v in PRESETS[preset].items() if k != "description"}
    layered = _merge(layered, {k: v for k, v in raw.items() if k != "preset"})

    base = {k: layered.get(k, {}) for k in ARM_BLOCKS}
    arms_raw = _require_object(layered.get("arms", {}), "arms")
    implicit = not arms_raw
    if implicit:
        arms_raw = {"default": {}}
    arms = {}
    for name, over in arms_raw.items():
        if not isinstance(name, str) or not name or "/" in name or name.startswith("."):
            raise ConfigError(f"arms.{name}: arm names must be plain, non-empty strings")
        _require_object(over, f"arms.{name}")
        _check_keys(over, ARM_BLOCKS, f"arms.{name}")
        prefix = "" if implicit else f"arms.{name}."
        arms[name] = _resolve_arm(name, _merge(base, over), prefix)

    seeds = layered.get("seeds", DEFAULT_SEEDS)
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds: expected a non-empty list of integers")
    for i, s in enumerate(seeds):
        if isinstance(s, bool) or not isinstance(s, int) or s < 0:
            raise ConfigError(f"seeds[{i}]: expected a non-negative integer, got {s!r}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: entries must be distinct")

    output = _require_object(layered.get("output", {}), "output")
    _check_keys(output, tuple(_OUTPUT_DEFAULTS), "output")
    output = {**_OUTPUT_DEFAULTS, **output}
    if not isinstance(output["dir"], str) or not output["dir"]:
        raise ConfigError("output.dir: expected a non-empty string")
    formats = output["formats"]
    if not isinstance(formats, list) or any(f not in FORMATS for f in formats):
        raise ConfigError(f"output.formats: expected a list drawn from {', '.join(FORMATS)}")
    if "jsonl" not in formats:
        raise ConfigError("output.formats: 'jsonl' is required")
    if "svg" in formats and "csv" not in formats:
        raise ConfigError("output.formats: 'svg' charts are drawn from 'csv' output")
    return ExperimentConfig(preset, arms, list(seeds), output["dir"], list(formats))


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from None
    return resolve(raw)
