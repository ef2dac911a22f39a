"""Direction selection: likelihood (CAREFL-M) and residual independence (CAREFL-H, CAREFL-H-RR)."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import Direction, LsnmError, PairDataset, SplitSpec, split
from .flow import FlowConfig, FlowModel, cause_residuals, fit, log_likelihood, residuals
from .hsic import hsic_statistic

logger = logging.getLogger(__name__)


class Rule(str, enum.Enum):
    MAX_LIKELIHOOD = "max_likelihood"
    MIN_HSIC_CAUSE_RESIDUAL = "min_hsic_cause_residual"
    MIN_HSIC_RESIDUAL_RESIDUAL = "min_hsic_residual_residual"

    @property
    def maximize(self) -> bool:
        return self is Rule.MAX_LIKELIHOOD


METHOD_RULES = {
    "ml": Rule.MAX_LIKELIHOOD,
    "it": Rule.MIN_HSIC_CAUSE_RESIDUAL,
    "it-rr": Rule.MIN_HSIC_RESIDUAL_RESIDUAL,
}
DEFAULT_SPLIT = {"ml": 0.8, "it": 1.0, "it-rr": 1.0}


@dataclass
class DirectionVerdict:
    decision: Direction
    score_forward: float
    score_backward: float
    rule: Rule
    models: dict = field(default_factory=dict, repr=False)
    degraded: bool = False
    errors: dict = field(default_factory=dict)

    @property
    def margin(self) -> float:
        """Score difference signed so that positive favours X -> Y."""
        d = self.score_forward - self.score_backward
        return d if self.rule.maximize else -d


def decide(score_forward: float, score_backward: float, rule: Rule) -> Direction:
    """Strict comparison; exactly equal scores give no conclusion."""
    if score_forward == score_backward:
        return Direction.NO_CONCLUSION
    fwd_wins = score_forward > score_backward if rule.maximize else score_forward < score_backward
    return Direction.FORWARD if fwd_wins else Direction.BACKWARD


def direction_seed(seed: int, direction: Direction) -> int:
    return (int(seed) ^ Direction(direction).tag) % 2**64


class FitFailed(LsnmError, RuntimeError):
    def __init__(self, errors: dict):
        self.errors = errors
        super().__init__("; ".join(f"{k.value}: {v}" for k, v in errors.items()))


def fit_both(d_train: PairDataset, cfg: FlowConfig, seed: int) -> tuple[dict, dict]:
    """Fit flows for both hypotheses. Returns (models, errors) keyed by direction."""
    models, errors = {}, {}
    for direction in (Direction.FORWARD, Direction.BACKWARD):
        try:
            models[direction] = fit(d_train, direction, cfg, direction_seed(seed, direction))
        except LsnmError as exc:
            logger.warning("%s fit failed on %s: %s", direction.value, d_train.name, exc)
            errors[direction] = str(exc)
    if not models:
        raise FitFailed(errors)
    return models, errors


def score_models(models: dict, d_test: PairDataset, rule: Rule) -> dict:
    """Per-direction score of fitted models on ``d_test`` under ``rule``."""
    scores = {}
    for direction, m in models.items():
        cause, _ = m.orient(d_test)
        old_err = np.seterr(all="ignore")
        try:
            scores[direction] = _score_one(m, d_test, cause, rule)
        except (ValueError, ArithmeticError, LsnmError) as exc:
            # non-finite residuals or likelihood; the direction loses
            logger.warning("%s scoring failed: %s", direction.value, exc)
            scores[direction] = math.nan
        finally:
            np.seterr(**old_err)
    return scores


def _score_one(m: FlowModel, d_test: PairDataset, cause, rule: Rule) -> float:
    if rule is Rule.MAX_LIKELIHOOD:
        return log_likelihood(m, d_test)[1]
    if rule is Rule.MIN_HSIC_CAUSE_RESIDUAL:
        return hsic_statistic(cause, residuals(m, d_test)).statistic
    return hsic_statistic(cause_residuals(m, d_test), residuals(m, d_test)).statistic


def _verdict(scores: dict, rule: Rule, models: dict, errors: dict) -> DirectionVerdict:
    worst = -math.inf if rule.maximize else math.inf
    errors = dict(errors)
    for direction, value in list(scores.items()):
        if math.isnan(value):
            errors[direction] = "score is NaN"
            del scores[direction]
    fwd = scores.get(Direction.FORWARD, worst)
    bwd = scores.get(Direction.BACKWARD, worst)
    return DirectionVerdict(decide(fwd, bwd, rule), fwd, bwd, rule, models, bool(errors), errors)


def _run(d: PairDataset, cfg: FlowConfig, split_spec: SplitSpec, seed: int, rule: Rule) -> DirectionVerdict:
    d_train, d_test = split(d, split_spec)
    models, errors = fit_both(d_train, cfg, seed)
    return _verdict(score_models(models, d_test, rule), rule, models, errors)


def _split_for(split_spec, method: str, seed: int) -> SplitSpec:
    if split_spec is None:
        return SplitSpec(DEFAULT_SPLIT[method], seed)
    if isinstance(split_spec, (int, float)):
        return SplitSpec(float(split_spec), seed)
    return split_spec


def carefl_m(d: PairDataset, cfg: FlowConfig = FlowConfig(), split_spec=None, seed: int = 0) -> DirectionVerdict:
    """Pick the direction whose fitted flow has the larger test log-likelihood."""
    return _run(d, cfg, _split_for(split_spec, "ml", seed), seed, Rule.MAX_LIKELIHOOD)


def carefl_h(d: PairDataset, cfg: FlowConfig = FlowConfig(), split_spec=None, seed: int = 0) -> DirectionVerdict:
    """Pick the direction whose effect residual is least dependent (HSIC) on the putative cause."""
    return _run(d, cfg, _split_for(split_spec, "it", seed), seed, Rule.MIN_HSIC_CAUSE_RESIDUAL)


def carefl_h_rr(d: PairDataset, cfg: FlowConfig = FlowConfig(), split_spec=None, seed: int = 0) -> DirectionVerdict:
    """Like :func:`carefl_h` but tests the cause residual against the effect residual."""
    return _run(d, cfg, _split_for(split_spec, "it-rr", seed), seed, Rule.MIN_HSIC_RESIDUAL_RESIDUAL)


METHODS = {"ml": carefl_m, "it": carefl_h, "it-rr": carefl_h_rr}


def infer(d: PairDataset, method: str = "it", cfg: FlowConfig = FlowConfig(), split_spec=None, seed: int = 0):
    try:
        fn = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}") from None
    return fn(d, cfg, split_spec, seed)


def hsic_verdict(cause_fwd, resid_fwd, cause_bwd, resid_bwd, rule: Rule = Rule.MIN_HSIC_CAUSE_RESIDUAL) -> DirectionVerdict:
    """Decide from precomputed residuals, e.g. ones built from known generator functions."""
    fwd = hsic_statistic(cause_fwd, resid_fwd).statistic
    bwd = hsic_statistic(cause_bwd, resid_bwd).statistic
    return DirectionVerdict(decide(fwd, bwd, rule), fwd, bwd, rule)


class CauseEffectDirection(BaseEstimator):
    """Estimator wrapper: ``fit(X)`` on an ``(n, 2)`` array sets ``direction_``.

    ``decision_function_`` is the score margin (positive favours column 0 ->
    column 1). ``train_fraction=None`` uses 0.8 for ``"ml"`` and 1.0 otherwise.
    """

    def __init__(self, method="it", n_subflows=4, hidden_width=5, n_layers=4, prior="laplace",
                 epochs=750, l2_penalty=0.0, learning_rate=1e-3, batch_size=None,
                 train_fraction=None, random_state=0):
        self.method = method
        self.n_subflows = n_subflows
        self.hidden_width = hidden_width
        self.n_layers = n_layers
        self.prior = prior
        self.epochs = epochs
        self.l2_penalty = l2_penalty
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.train_fraction = train_fraction
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=4)
        if X.shape[1] != 2:
            raise ValueError(f"expected 2 columns, got {X.shape[1]}")
        cfg = FlowConfig(self.n_subflows, self.hidden_width, self.n_layers, self.prior, self.epochs,
                         self.l2_penalty, self.learning_rate, self.batch_size)
        seed = 0 if self.random_state is None else int(self.random_state)
        self.verdict_ = infer(PairDataset(X[:, 0], X[:, 1]), self.method, cfg, self.train_fraction, seed)
        self.direction_ = self.verdict_.decision
        self.scores_ = (self.verdict_.score_forward, self.verdict_.score_backward)
        self.decision_function_ = self.verdict_.margin
        self.n_features_in_ = 2
        return self

    def predict(self, X=None) -> Direction:
        check_is_fitted(self, "verdict_")
        return self.direction_
