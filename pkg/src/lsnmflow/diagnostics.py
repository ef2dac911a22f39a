"""Conditional-variance binning, suitability measurement and alpha sweeps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Direction, LsnmError, PairDataset, derive_seed, standardize
from .flow import FlowConfig, cause_residuals, fit, residuals
from .scm import NoiseFamily, ScmSpec, generate, generate_with_noise, sample_scm_spec
from .select import carefl_h, carefl_m


class TooFewPoints(LsnmError, ValueError):
    pass


@dataclass(frozen=True)
class CvReport:
    mvar_y_given_x: float
    mvar_x_given_y: float
    n_bins: int

    @property
    def misleading(self) -> bool:
        return self.mvar_y_given_x > self.mvar_x_given_y


def _binned_variance(cause: np.ndarray, other: np.ndarray, n_bins: int) -> float:
    n = cause.size
    if n_bins < 1 or n < 2 * n_bins:
        raise TooFewPoints(f"need at least {2 * n_bins} points for {n_bins} bins, got {n}")
    # lexicographic order keeps the result independent of row order when causes tie
    order = np.lexsort((other, cause))
    total = 0.0
    for chunk in np.array_split(order, n_bins):
        v = other[chunk]
        total += v.size * v.var()
    return float(total / n)


def binned_cv(d: PairDataset, cause_axis: str = "x", n_bins: int = 10) -> float:
    """Mean conditional variance of the other column given equal-frequency bins of ``cause_axis``."""
    if cause_axis == "x":
        return _binned_variance(d.x, d.y, n_bins)
    if cause_axis == "y":
        return _binned_variance(d.y, d.x, n_bins)
    raise ValueError("cause_axis must be 'x' or 'y'")


def misleading_cv(d: PairDataset, n_bins: int = 10, cause_axis: Optional[str] = None) -> CvReport:
    """Both binned conditional variances, labelled relative to the true cause.

    The cause axis comes from ``d.truth`` unless given explicitly.
    """
    if cause_axis is None:
        if d.truth == Direction.FORWARD:
            cause_axis = "x"
        elif d.truth == Direction.BACKWARD:
            cause_axis = "y"
        else:
            raise ValueError("dataset has no ground-truth direction; pass cause_axis")
    effect_axis = "y" if cause_axis == "x" else "x"
    return CvReport(binned_cv(d, cause_axis, n_bins), binned_cv(d, effect_axis, n_bins), n_bins)


# --------------------------------------------------------------------------
# suitability


@dataclass
class SuitabilityReport:
    # one entry per N: (N, S_cause, S_effect), averaged over trials
    rows: list = field(default_factory=list)
    # per-trial effect values, trials x len(Ns)
    trials_effect: Optional[np.ndarray] = None
    trials_cause: Optional[np.ndarray] = None


def _zscore(v: np.ndarray) -> np.ndarray:
    v = v - v.mean()
    return v / np.sqrt(np.mean(v * v))


def residual_mse(estimated, true) -> float:
    """Mean squared difference after shift/scale normalisation of both sides."""
    return float(np.mean((_zscore(np.asarray(estimated)) - _zscore(np.asarray(true))) ** 2))


def suitability(spec: ScmSpec, cfg: FlowConfig, Ns: Sequence[int] = (50, 500, 1000, 5000),
                trials: int = 10, seed: int = 0, estimator=None) -> SuitabilityReport:
    """Residual reconstruction error of the causal-direction flow as the sample grows.

    For each N, ``2N`` rows are generated and split in half; the flow is
    fitted on one half and its residuals on the other are compared with the
    true noise. ``estimator`` overrides the flow fit: ``estimator(train)``
    must return a callable mapping a test dataset to ``(cause_res, effect_res)``.
    Datasets carry ``meta["unstandardize"] = (mean_x, std_x, mean_y, std_y)``.
    """
    Ns = list(Ns)
    if any(n < 20 for n in Ns):
        raise ValueError("each N must be >= 20")
    s_eff = np.zeros((trials, len(Ns)))
    s_cau = np.zeros((trials, len(Ns)))
    for t in range(trials):
        for j, N in enumerate(Ns):
            ds = derive_seed(seed, t, N)
            raw, noise = generate_with_noise(spec, 2 * N, ds)
            d = standardize(raw)
            # lets an oracle estimator map standardized rows back to generator units
            shift = (raw.x.mean(), raw.x.std(), raw.y.mean(), raw.y.std())
            d = PairDataset(d.x, d.y, truth=d.truth, name=d.name, meta={"unstandardize": shift})
            perm = np.random.default_rng(ds).permutation(2 * N)
            tr_idx, te_idx = np.sort(perm[:N]), np.sort(perm[N:])
            train, test = d.take(tr_idx), d.take(te_idx)
            if estimator is None:
                m = fit(train, Direction.FORWARD, cfg, ds)
                r_c, r_e = cause_residuals(m, test), residuals(m, test)
            else:
                r_c, r_e = estimator(train)(test)
            s_cau[t, j] = residual_mse(r_c, raw.x[te_idx])
            s_eff[t, j] = residual_mse(r_e, noise[te_idx])
    rows = [(N, float(s_cau[:, j].mean()), float(s_eff[:, j].mean())) for j, N in enumerate(Ns)]
    return SuitabilityReport(rows, s_eff, s_cau)


# --------------------------------------------------------------------------
# alpha sweep

SWEEP_FIELDS = [
    "alpha", "seed", "mvar_y_given_x", "mvar_x_given_y", "misleading",
    "ll_forward", "ll_backward", "ll_diff", "hsic_forward", "hsic_backward", "hsic_diff",
    "decision_ml", "decision_it", "correct_ml", "correct_it",
]


def alpha_sweep(family: str, noise: NoiseFamily, prior: str = "gaussian",
                alphas: Iterable[float] = (0.1, 0.5, 1, 5, 10), seeds: Iterable[int] = range(10),
                N: int = 10_000, cfg: Optional[FlowConfig] = None, methods: Sequence[str] = ("ml", "it"),
                n_bins: int = 10) -> tuple[list, list]:
    """Run the robustness grid. Returns (cell rows, per-alpha aggregate rows).

    ``ll_diff`` is causal minus anti-causal test log-likelihood (negative means
    the ML rule errs); ``hsic_diff`` is causal minus anti-causal HSIC (positive
    means the IT rule errs). NoConclusion counts as incorrect.
    """
    cfg = (cfg or FlowConfig()).replace(prior=prior)
    rows = []
    alphas = list(alphas)
    seeds = list(seeds)
    if not alphas:
        raise ValueError("alphas must be nonempty")
    for alpha in alphas:
        for seed in seeds:
            spec = sample_scm_spec(family, noise, alpha, seed)
            d = standardize(generate(spec, N, seed))
            cv = misleading_cv(d, n_bins)
            row = {"alpha": alpha, "seed": seed, "mvar_y_given_x": cv.mvar_y_given_x,
                   "mvar_x_given_y": cv.mvar_x_given_y, "misleading": int(cv.misleading)}
            if "ml" in methods:
                v = carefl_m(d, cfg, None, seed)
                row.update(ll_forward=v.score_forward, ll_backward=v.score_backward,
                           ll_diff=v.score_forward - v.score_backward, decision_ml=v.decision.value,
                           correct_ml=int(v.decision == Direction.FORWARD))
            if "it" in methods:
                v = carefl_h(d, cfg, None, seed)
                row.update(hsic_forward=v.score_forward, hsic_backward=v.score_backward,
                           hsic_diff=v.score_forward - v.score_backward, decision_it=v.decision.value,
                           correct_it=int(v.decision == Direction.FORWARD))
            rows.append(row)
    return rows, aggregate_sweep(rows)


def aggregate_sweep(rows: list) -> list:
    out = []
    for alpha in sorted({r["alpha"] for r in rows}):
        cell = [r for r in rows if r["alpha"] == alpha]
        agg = {"alpha": alpha, "n": len(cell)}
        for key in ("mvar_y_given_x", "mvar_x_given_y", "misleading", "ll_diff", "hsic_diff", "correct_ml", "correct_it"):
            vals = [r[key] for r in cell if key in r]
            if vals:
                agg[key] = float(np.mean(vals))
        out.append(agg)
    return out


def table_summary(aggregates: list) -> dict:
    """Per-alpha columns laid out like the robustness table rows."""
    def col(key):
        return [a.get(key) for a in aggregates]

    summary = {
        "alpha": col("alpha"),
        "MVAR[Y|X]": col("mvar_y_given_x"),
        "MVAR[X|Y]": col("mvar_x_given_y"),
        "misleading_fraction": col("misleading"),
    }
    if any("correct_ml" in a for a in aggregates):
        summary["CAREFL-M"] = col("correct_ml")
        summary["mean_ll_diff"] = col("ll_diff")
    if any("correct_it" in a for a in aggregates):
        summary["CAREFL-H"] = col("correct_it")
        summary["mean_hsic_diff"] = col("hsic_diff")
    summary["no_conclusion_counts_as_incorrect"] = True
    return summary


def write_sweep(rows: list, aggregates: list, csv_path, json_path) -> None:
    fields = [f for f in SWEEP_FIELDS if any(f in r for r in rows)]
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in fields})
    with open(json_path, "w") as fh:
        json.dump({"table": table_summary(aggregates), "aggregates": aggregates}, fh, indent=2, sort_keys=True)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def spearman(a, b) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)
