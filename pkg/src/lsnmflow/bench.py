"""Benchmark ingestion (Tuebingen, SIM family, synthetic) and orchestration."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import re
import signal
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Direction, LsnmError, PairDataset, SplitSpec, standardize
from .flow import FlowConfig
from .scm import DEFAULT_NOISES, generate, sample_scm_spec
from .select import DEFAULT_SPLIT, infer

logger = logging.getLogger(__name__)

TUEBINGEN_EXCLUDED = (47, 52, 53, 54, 55, 70, 71, 105, 107)
SIM_VARIANTS = {"sim": "SIM", "sim-c": "SIM-c", "sim-ln": "SIM-ln", "sim-g": "SIM-G"}
SIM_ROWS = 1000
DEFAULT_TIMEOUT = 600.0


class MissingMeta(LsnmError, FileNotFoundError):
    pass


class MalformedPair(LsnmError, ValueError):
    def __init__(self, ident, reason: str):
        self.ident = ident
        super().__init__(f"pair {ident}: {reason}")


class DatasetTimeout(TimeoutError):
    # deliberately not an LsnmError so per-direction error handling cannot swallow it
    pass


@dataclass
class BenchmarkSuite:
    name: str
    datasets: list
    exclusions: tuple = ()

    def __post_init__(self):
        for d in self.datasets:
            if d.truth not in (Direction.FORWARD, Direction.BACKWARD):
                raise ValueError(f"dataset {d.name} has no truth tag")
            if not d.weight > 0:
                raise ValueError(f"dataset {d.name} has non-positive weight")

    def __len__(self) -> int:
        return len(self.datasets)


# --------------------------------------------------------------------------
# loaders


def _read_matrix(path: Path, ident) -> np.ndarray:
    rows = []
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    rows.append([float(t) for t in line.split()])
    except ValueError as exc:
        raise MalformedPair(ident, f"{path.name}: {exc}") from None
    if not rows:
        raise MalformedPair(ident, f"{path.name}: no data rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise MalformedPair(ident, f"{path.name}: ragged rows (widths {sorted(widths)})")
    return np.asarray(rows, dtype=np.float64)


def _pair_file(directory: Path, pid: int) -> Path:
    return directory / f"pair{pid:04d}.txt"


def load_tuebingen(directory) -> BenchmarkSuite:
    """Load bivariate Tuebingen pairs described by ``pairmeta.txt``.

    Each meta line is ``id cause_start cause_end effect_start effect_end weight``
    with 1-based column indices. Excluded ids and multi-column spans are skipped.
    """
    directory = Path(directory)
    meta = directory / "pairmeta.txt"
    if not meta.is_file():
        raise MissingMeta(f"{meta} not found")
    datasets = []
    for line in meta.read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 6:
            raise MalformedPair(parts[0], "metadata line must have 6 fields")
        pid = int(parts[0])
        cs, ce, es, ee = (int(p) for p in parts[1:5])
        weight = float(parts[5])
        if pid in TUEBINGEN_EXCLUDED:
            continue
        if cs != ce or es != ee:
            logger.info("skipping multivariate pair %d", pid)
            continue
        path = _pair_file(directory, pid)
        if not path.is_file():
            raise MalformedPair(pid, f"{path.name} missing")
        arr = _read_matrix(path, pid)
        if max(cs, es) > arr.shape[1] or min(cs, es) < 1:
            raise MalformedPair(pid, f"column index out of range for {arr.shape[1]} columns")
        # columns stay in file order; the truth tag records where the cause sits
        a, b = sorted((cs, es))
        truth = Direction.FORWARD if cs < es else Direction.BACKWARD
        try:
            d = PairDataset(arr[:, a - 1], arr[:, b - 1], weight=weight, truth=truth, name=f"pair{pid:04d}",
                            meta={"id": pid})
            datasets.append(standardize(d))
        except LsnmError as exc:
            raise MalformedPair(pid, str(exc)) from None
    return BenchmarkSuite("tuebingen", datasets, TUEBINGEN_EXCLUDED)


def _sim_truths(directory: Path) -> dict:
    gt = directory / "pairs_gt.txt"
    if gt.is_file():
        vals = [int(float(t)) for t in gt.read_text().split()]
        return {i + 1: (Direction.FORWARD if v == 1 else Direction.BACKWARD) for i, v in enumerate(vals)}
    meta = directory / "pairmeta.txt"
    if meta.is_file():
        out = {}
        for line in meta.read_text().splitlines():
            p = line.split()
            if p and not p[0].startswith("#"):
                out[int(p[0])] = Direction.FORWARD if int(p[1]) < int(p[3]) else Direction.BACKWARD
        return out
    raise MissingMeta(f"neither pairs_gt.txt nor pairmeta.txt in {directory}")


def load_sim(directory, variant: str = "sim") -> BenchmarkSuite:
    """Load one SIM sub-benchmark. ``directory`` may be the variant folder or its parent."""
    key = variant.lower()
    if key not in SIM_VARIANTS:
        raise ValueError(f"unknown SIM variant {variant!r}; choose from {sorted(SIM_VARIANTS)}")
    directory = Path(directory)
    sub = directory / SIM_VARIANTS[key]
    if sub.is_dir():
        directory = sub
    if not directory.is_dir():
        raise MissingMeta(f"{directory} is not a directory")
    truths = _sim_truths(directory)
    files = sorted(directory.glob("pair[0-9]*.txt"))
    datasets = []
    for path in files:
        pid = int(re.sub(r"\D", "", path.stem))
        arr = _read_matrix(path, path.name)
        if arr.shape[0] != SIM_ROWS or arr.shape[1] < 2:
            raise MalformedPair(path.name, f"expected {SIM_ROWS}x2, got {arr.shape[0]}x{arr.shape[1]}")
        if pid not in truths:
            raise MissingMeta(f"no ground truth for {path.name}")
        d = PairDataset(arr[:, 0], arr[:, 1], truth=truths[pid], name=path.stem, meta={"id": pid})
        datasets.append(standardize(d))
    if not datasets:
        raise MissingMeta(f"no pair files in {directory}")
    return BenchmarkSuite(SIM_VARIANTS[key], datasets)


def synthetic_suite(family: str = "lsnm-sine-tanh", alpha: float = 1.0, n: int = 1000,
                    seeds=range(10), seed: int = 0) -> BenchmarkSuite:
    """One dataset per (noise family, seed); half are stored swapped so truth is balanced."""
    datasets = []
    k = 0
    for noise_name, noise in DEFAULT_NOISES.items():
        for s in seeds:
            ds = seed * 1_000_003 + k
            spec = sample_scm_spec(family, noise, alpha, ds)
            d = standardize(generate(spec, n, ds))
            if k % 2:
                d = d.swapped()
            datasets.append(PairDataset(d.x, d.y, truth=d.truth, name=f"{noise_name}-s{s}", meta={"id": k}))
            k += 1
    return BenchmarkSuite("synthetic", datasets)


# --------------------------------------------------------------------------
# running


@dataclass
class DatasetOutcome:
    name: str
    weight: float
    truth: str
    decision: str
    score_fwd: float
    score_bwd: float
    seconds: float = 0.0
    error: str = ""

    @property
    def correct(self) -> bool:
        return self.decision == self.truth


ROW_FIELDS = ("name", "weight", "truth", "decision", "score_fwd", "score_bwd", "error")


@dataclass
class BenchResult:
    suite: str
    method: str
    config: dict
    outcomes: list = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        if not self.outcomes:
            return 0.0
        return sum(o.correct for o in self.outcomes) / len(self.outcomes)

    @property
    def weighted_accuracy(self) -> float:
        total = sum(o.weight for o in self.outcomes)
        if total == 0:
            return 0.0
        if all(o.correct for o in self.outcomes):
            return 1.0
        return sum(o.weight for o in self.outcomes if o.correct) / total

    def summary(self) -> dict:
        return {
            "suite": self.suite,
            "method": self.method,
            "n_datasets": len(self.outcomes),
            "accuracy": self.accuracy,
            "weighted_accuracy": self.weighted_accuracy,
            "n_failed": sum(bool(o.error) for o in self.outcomes),
            "no_conclusion": sum(o.decision == Direction.NO_CONCLUSION.value for o in self.outcomes),
            "no_conclusion_counts_as_incorrect": True,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "total_seconds": sum(o.seconds for o in self.outcomes),
        }

    def to_json(self) -> str:
        obj = {"suite": self.suite, "method": self.method, "config": self.config,
               "outcomes": [asdict(o) for o in self.outcomes]}
        return json.dumps(obj, sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "BenchResult":
        obj = json.loads(text)
        return cls(obj["suite"], obj["method"], obj["config"], [DatasetOutcome(**o) for o in obj["outcomes"]])

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for o in self.outcomes:
            w.writerow([o.name, repr(float(o.weight)), o.truth, o.decision, repr(float(o.score_fwd)),
                        repr(float(o.score_bwd)), o.error])
        return buf.getvalue()

    def timings_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("name", "seconds"))
        for o in self.outcomes:
            w.writerow([o.name, f"{o.seconds:.3f}"])
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        """Write rows.csv, timings.csv and summary.json into ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "rows.csv").write_text(self.rows_csv())
        (out / "timings.csv").write_text(self.timings_csv())
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return out


def config_snapshot(method: str, cfg: FlowConfig, split_fraction: float, base_seed: int) -> dict:
    snap = asdict(cfg)
    snap.update(method=method, train_fraction=float(split_fraction), base_seed=int(base_seed))
    return snap


def config_hash(snapshot: dict) -> str:
    blob = json.dumps({k: v for k, v in snapshot.items()}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def results_dir(root, suite: str, method: str, snapshot: dict) -> Path:
    return Path(root) / suite.lower() / method / config_hash(snapshot)


def _on_alarm(signum, frame):
    raise DatasetTimeout("dataset exceeded its time budget")


def _run_one(args) -> DatasetOutcome:
    d, method, cfg, split_fraction, seed, timeout = args
    t0 = time.perf_counter()
    truth = d.truth.value
    use_alarm = timeout and hasattr(signal, "setitimer")
    if use_alarm:
        old = signal.signal(signal.SIGALRM, _on_alarm)
        signal.setitimer(signal.ITIMER_REAL, timeout)
    try:
        v = infer(d, method, cfg, SplitSpec(split_fraction, seed), seed)
        note = "; ".join(f"{k.value}: {e}" for k, e in v.errors.items())
        return DatasetOutcome(d.name, d.weight, truth, v.decision.value, v.score_forward, v.score_backward,
                              time.perf_counter() - t0, note)
    except (LsnmError, DatasetTimeout, ArithmeticError, ValueError) as exc:
        logger.warning("dataset %s failed: %s", d.name, exc)
        return DatasetOutcome(d.name, d.weight, truth, Direction.NO_CONCLUSION.value, math.nan, math.nan,
                              time.perf_counter() - t0, f"{type(exc).__name__}: {exc}")
    finally:
        if use_alarm:
            signal.setitimer(signal.ITIMER_REAL, 0)
            signal.signal(signal.SIGALRM, old)


def run_benchmark(suite: BenchmarkSuite, method: str = "it", cfg: FlowConfig = FlowConfig(),
                  split=None, base_seed: int = 0, jobs: int = 1,
                  timeout: Optional[float] = DEFAULT_TIMEOUT) -> BenchResult:
    """Run ``method`` on every dataset; dataset ``i`` uses seed ``base_seed ^ i``."""
    if not suite.datasets:
        raise ValueError("suite is empty")
    frac = DEFAULT_SPLIT[method] if split is None else float(split)
    tasks = [(d, method, cfg, frac, int(base_seed) ^ i, timeout) for i, d in enumerate(suite.datasets)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outcomes = list(ex.map(_run_one, tasks))
    else:
        outcomes = [_run_one(t) for t in tasks]
    return BenchResult(suite.name, method, config_snapshot(method, cfg, frac, base_seed), outcomes)


def load_suite(name: str, data_dir=None, **synthetic_kwargs) -> BenchmarkSuite:
    key = name.lower()
    if key == "synthetic":
        return synthetic_suite(**synthetic_kwargs)
    if data_dir is None:
        raise ValueError(f"suite {name!r} needs a data directory")
    if key == "tuebingen":
        return load_tuebingen(data_dir)
    return load_sim(data_dir, key)
