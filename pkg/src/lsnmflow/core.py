"""Pair datasets, standardization, train/test splitting and seed handling."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np


class LsnmError(Exception):
    """Base class for errors raised by this package."""


class InvalidDataset(LsnmError, ValueError):
    pass


class ConstantColumn(LsnmError, ValueError):
    pass


class EmptySplit(LsnmError, ValueError):
    pass


class Direction(str, enum.Enum):
    FORWARD = "forward"  # X -> Y
    BACKWARD = "backward"  # X <- Y
    NO_CONCLUSION = "no_conclusion"

    @property
    def code(self) -> int:
        """Process exit code used by the CLI."""
        return {"forward": 0, "backward": 1, "no_conclusion": 2}[self.value]

    @property
    def tag(self) -> int:
        return {"forward": 1, "backward": 2, "no_conclusion": 0}[self.value]


@dataclass(frozen=True)
class PairDataset:
    """Two aligned columns: putative cause ``x`` and putative effect ``y``."""

    x: np.ndarray
    y: np.ndarray
    weight: float = 1.0
    truth: Optional[Direction] = None
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64).ravel()
        y = np.array(self.y, dtype=np.float64).ravel()
        if x.shape != y.shape:
            raise InvalidDataset(f"{self.name or 'dataset'}: columns differ in length ({x.size} vs {y.size})")
        if x.size < 2:
            raise InvalidDataset(f"{self.name or 'dataset'}: need at least 2 rows, got {x.size}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InvalidDataset(f"{self.name or 'dataset'}: non-finite values")
        if not (self.weight >= 0 and math.isfinite(self.weight)):
            raise InvalidDataset(f"{self.name or 'dataset'}: weight must be finite and >= 0")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if self.truth is not None:
            object.__setattr__(self, "truth", Direction(self.truth))

    @property
    def n(self) -> int:
        return self.x.size

    def __len__(self) -> int:
        return self.x.size

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def swapped(self) -> "PairDataset":
        """Dataset with the columns exchanged (effect becomes the first column)."""
        truth = {Direction.FORWARD: Direction.BACKWARD, Direction.BACKWARD: Direction.FORWARD}.get(self.truth, self.truth)
        return replace(self, x=self.y, y=self.x, truth=truth)

    def take(self, idx) -> "PairDataset":
        return replace(self, x=self.x[idx], y=self.y[idx])


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.train_fraction <= 1.0):
            raise ValueError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministically derive a 64-bit child seed from ``seed`` and integer keys."""
    ss = np.random.SeedSequence([int(seed) % 2**64, *[int(k) % 2**64 for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_from(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, *[int(k) % 2**64 for k in keys]]))


def _standardize_column(v: np.ndarray, label: str) -> np.ndarray:
    mean = v.mean()
    centered = v - mean
    std = np.sqrt(np.mean(centered**2))
    if std == 0.0 or not np.isfinite(std):
        raise ConstantColumn(f"column {label} has zero standard deviation")
    out = centered / std
    # second pass removes the rounding residue of the first, keeps idempotence tight
    out = out - out.mean()
    return out / np.sqrt(np.mean(out**2))


def standardize(d: PairDataset) -> PairDataset:
    """Return ``d`` with each column shifted to mean 0 and scaled to (population) variance 1."""
    return replace(d, x=_standardize_column(d.x, "x"), y=_standardize_column(d.y, "y"))


def split(d: PairDataset, spec: SplitSpec) -> tuple[PairDataset, PairDataset]:
    """Shuffle-split into (train, test). ``train_fraction == 1`` returns the data twice."""
    if spec.train_fraction == 1.0:
        return d, d
    n = d.n
    n_train = math.ceil(spec.train_fraction * n)
    if n_train < 2 or n - n_train < 2:
        raise EmptySplit(f"split of n={n} at fraction {spec.train_fraction} leaves a side with < 2 points")
    perm = rng_from(spec.seed).permutation(n)
    return d.take(np.sort(perm[:n_train])), d.take(np.sort(perm[n_train:]))


def load_pair_text(path, name: Optional[str] = None, **kwargs) -> PairDataset:
    """Read a whitespace-delimited file; the first two numeric columns become (x, y)."""
    path = Path(path)
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise InvalidDataset(f"{path}:{lineno}: expected at least two columns")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise InvalidDataset(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise InvalidDataset(f"{path}: no data rows")
    width = min(len(r) for r in rows)
    arr = np.array([r[:width] for r in rows], dtype=np.float64)
    return PairDataset(arr[:, 0], arr[:, 1], name=name or path.stem, **kwargs)


def save_pair_text(d: PairDataset, path) -> None:
    header = f"{d.name}" if d.name else ""
    np.savetxt(path, d.as_array(), fmt="%.17g", header=header)
