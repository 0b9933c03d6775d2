"""Multi-seed orchestration and run-directory output.

Layout of a run directory::

    run_<hash>/
        manifest.json          config, hash, code version, per-seed status
        summary.csv            per-arm, per-generation means and 95% CIs
        <arm>/seed_<s>.jsonl   one record per generation
        charts/*.svg           when "svg" output is enabled

The hash covers the canonical config and the code version, and every chain
draws randomness from streams keyed by its own seed, so equal hashes mean
byte-identical JSONL whatever the worker count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__
from .config import ArmConfig, ExperimentConfig
from .dataset import make_colored_blobs
from .engine import records_to_jsonl, run_setting, stream
from .metrics import aggregate_runs, validate_record
from .models import build_oracles

WORKERS_ENV = "MIDS_WORKERS"


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    digest = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for path in sorted(root.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return f"{__version__}+{digest.hexdigest()[:12]}"


def config_hash(config: ExperimentConfig, version: str | None = None) -> str:
    canon = config.to_dict()
    canon["output"] = {"formats": canon["output"]["formats"]}  # location is not content
    payload = json.dumps({"config": canon, "code": version or code_version()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return n


def run_chain(arm: ArmConfig, seed: int):
    """Build data, oracles and evaluation set for ``seed`` and run one chain."""
    data = make_colored_blobs(arm.dataset, stream(seed, "data"))
    eval_set = make_colored_blobs(replace(arm.dataset, n=arm.eval_size), stream(seed, "eval-data"))
    oracles = build_oracles(data, arm.oracles, rng=stream(seed, "oracles"))
    return run_setting(arm.setting, oracles, data, eval_set, seed)


def _task(arm: ArmConfig, seed: int) -> dict:
    start = time.perf_counter()
    try:
        text = records_to_jsonl(run_chain(arm, seed))
    except Exception as exc:  # recorded per seed; siblings keep running
        return {
            "status": "failed",
            "error": f"{type(exc).__name__}: {exc}",
            "traceback": traceback.format_exc(),
            "wall_time": time.perf_counter() - start,
        }
    return {"status": "complete", "jsonl": text, "wall_time": time.perf_counter() - start}


@dataclass
class RunResult:
    path: Path
    manifest: dict
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _write_manifest(path: Path, manifest: dict) -> None:
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _csv_value(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(v) if isinstance(v, float) else v


def write_summary(path: Path, per_arm: dict[str, list[list[dict]]]) -> Path:
    rows = []
    for arm, runs in per_arm.items():
        if runs:
            rows.extend({"arm": arm, **row} for row in aggregate_runs(runs))
    metric_cols = sorted({k for r in rows for k in r} - {"arm", "generation", "n_seeds"})
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["arm", "generation", "n_seeds", *metric_cols])
    for r in rows:
        writer.writerow([r["arm"], r["generation"], r["n_seeds"],
                         *(_csv_value(r.get(c)) for c in metric_cols)])
    target = path / "summary.csv"
    target.write_text(out.getvalue())
    return target


def read_records(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def run_experiment(config: ExperimentConfig, out_dir=None, workers: int | None = None,
                   progress=None) -> RunResult:
    """Run every (arm, seed) chain and write the run directory."""
    version = code_version()
    digest = config_hash(config, version)
    root = Path(out_dir if out_dir is not None else config.output_dir)
    path = root / f"run_{digest[:12]}"
    path.mkdir(parents=True, exist_ok=True)
    workers = worker_count() if workers is None else int(workers)
    if workers < 1:
        raise ValueError("workers must be >= 1")

    manifest = {
        "config_hash": digest,
        "code_version": version,
        "config": config.to_dict(),
        "kinds": sorted(config.kinds),
        "workers": workers,
        "status": "running",
        "wall_time": None,
        "seeds": {arm: {str(s): {"status": "pending"} for s in config.seeds} for arm in config.arms},
    }
    _write_manifest(path, manifest)
    for arm in config.arms:
        (path / arm).mkdir(exist_ok=True)

    tasks = [(arm, seed) for arm in config.arms for seed in config.seeds]
    start = time.perf_counter()
    results: dict = {}

    def record(arm, seed, res):
        entry = {"status": res["status"], "wall_time": round(res["wall_time"], 3)}
        if res["status"] == "complete":
            target = path / arm / f"seed_{seed}.jsonl"
            target.write_text(res["jsonl"])
            entry["file"] = str(target.relative_to(path))
        else:
            entry["error"] = res["error"]
            entry["traceback"] = res["traceback"]
        manifest["seeds"][arm][str(seed)] = entry
        results[(arm, seed)] = res
        if progress:
            progress(arm, seed, entry)

    try:
        if workers == 1 or len(tasks) == 1:
            for arm, seed in tasks:
                record(arm, seed, _task(config.arms[arm], seed))
        else:
            with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
                futures = {pool.submit(_task, config.arms[a], s): (a, s) for a, s in tasks}
                # collect in task order so manifest writes stay single-threaded
                for fut, (arm, seed) in futures.items():
                    record(arm, seed, fut.result())
    except KeyboardInterrupt:
        for arm, seeds in manifest["seeds"].items():
            for s, entry in seeds.items():
                if entry["status"] == "pending":
                    entry["status"] = "incomplete"
        manifest["status"] = "cancelled"
        manifest["wall_time"] = round(time.perf_counter() - start, 3)
        _write_manifest(path, manifest)
        raise

    per_arm = {arm: [] for arm in config.arms}
    for arm, seed in tasks:
        res = results[(arm, seed)]
        if res["status"] == "complete":
            recs = [json.loads(line) for line in res["jsonl"].splitlines()]
            for rec in recs:
                validate_record(rec)
            per_arm[arm].append(recs)
    if "csv" in config.formats:
        write_summary(path, per_arm)

    failures = [(a, s) for (a, s), r in results.items() if r["status"] != "complete"]
    manifest["status"] = "complete" if not failures else "partial"
    manifest["wall_time"] = round(time.perf_counter() - start, 3)
    _write_manifest(path, manifest)

    if "svg" in config.formats and any(per_arm.values()):
        from .charts import emit_charts

        emit_charts(path)
    return RunResult(path, manifest, failures)
