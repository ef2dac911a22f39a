"""Affine autoregressive flows for bivariate location-scale noise models.

A flow for the hypothesis ``cause -> effect`` is a stack of sub-flows. In the
generative direction a single sub-flow maps latent ``(u_c, u_e)`` to

    c = t1 + exp(s1) * u_c
    e = t2(c) + exp(s2(c)) * u_e

where ``t1, s1`` are scalars and ``t2, s2`` are small MLPs of the sub-flow's
cause output. Stacking keeps the effect affine in its latent for fixed cause,
so the whole stack is again a location-scale model with closed-form
location ``f(c)`` and scale ``g(c)``.

All parameters of a model live in one flat float64 vector; gradients are
back-propagated by hand through the fixed architecture.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import _kernels
from .core import Direction, LsnmError, PairDataset, rng_from

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG_2 = math.log(2.0)


class DivergedTraining(LsnmError, RuntimeError):
    pass


class NonFinite(LsnmError, FloatingPointError):
    pass


PRIORS = ("laplace", "gaussian")


def prior_logpdf(z: np.ndarray, prior: str) -> np.ndarray:
    if prior == "laplace":
        return -_LOG_2 - np.abs(z)
    if prior == "gaussian":
        return -_LOG_SQRT_2PI - 0.5 * z * z
    raise ValueError(f"unknown prior {prior!r}")


def _prior_dlogpdf(z: np.ndarray, prior: str) -> np.ndarray:
    if prior == "laplace":
        return -np.sign(z)
    return -z


@dataclass(frozen=True)
class FlowConfig:
    """Architecture and training hyperparameters.

    ``n_layers`` counts linear layers of each conditioner MLP, so the default
    of 4 has three hidden layers of ``hidden_width`` units. ``batch_size=None``
    trains full-batch.
    """

    n_subflows: int = 4
    hidden_width: int = 5
    n_layers: int = 4
    prior: str = "laplace"
    epochs: int = 750
    l2_penalty: float = 0.0
    learning_rate: float = 1e-3
    batch_size: Optional[int] = None
    anm_restricted: bool = False
    s_clip: float = 7.0

    def __post_init__(self):
        for name in ("n_subflows", "hidden_width", "n_layers", "epochs"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}, got {self.prior!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.l2_penalty >= 0:
            raise ValueError("l2_penalty must be >= 0")
        if self.batch_size is not None and int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1 or None")

    def replace(self, **changes) -> "FlowConfig":
        return FlowConfig(**{**asdict(self), **changes})


# --------------------------------------------------------------------------
# parameter layout


@dataclass(frozen=True)
class _MlpLayout:
    # (W offset, b offset, fan_in, fan_out) per linear layer
    layers: tuple

    @property
    def size(self) -> int:
        w, b, i, o = self.layers[-1]
        return b + o - self.layers[0][0]


def _mlp_layout(start: int, width: int, n_layers: int) -> _MlpLayout:
    sizes = [1] + [width] * (n_layers - 1) + [1]
    layers = []
    off = start
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        layers.append((off, off + fi * fo, fi, fo))
        off += fi * fo + fo
    return _MlpLayout(tuple(layers))


@dataclass(frozen=True)
class _SubflowLayout:
    t1: int
    s1: int
    t2: _MlpLayout
    s2: _MlpLayout
    end: int


def _layout(cfg: FlowConfig) -> list[_SubflowLayout]:
    out = []
    off = 0
    for _ in range(cfg.n_subflows):
        t1, s1 = off, off + 1
        t2 = _mlp_layout(off + 2, cfg.hidden_width, cfg.n_layers)
        s2 = _mlp_layout(off + 2 + t2.size, cfg.hidden_width, cfg.n_layers)
        off = off + 2 + t2.size + s2.size
        out.append(_SubflowLayout(t1, s1, t2, s2, off))
    return out


def n_parameters(cfg: FlowConfig) -> int:
    return _layout(cfg)[-1].end


def init_parameters(cfg: FlowConfig, seed: int) -> np.ndarray:
    """Uniform fan-in scaled init for weights and biases; ``t1 = s1 = 0``."""
    rng = rng_from(seed, 0x1A17)
    theta = np.zeros(n_parameters(cfg))
    for sf in _layout(cfg):
        for mlp in (sf.t2, sf.s2):
            for w, b, fi, fo in mlp.layers:
                bound = 1.0 / math.sqrt(fi)
                theta[w : w + fi * fo] = rng.uniform(-bound, bound, fi * fo)
                theta[b : b + fo] = rng.uniform(-bound, bound, fo)
    return theta


# --------------------------------------------------------------------------
# conditioner MLPs


def _mlp_forward(theta: np.ndarray, mlp: _MlpLayout, x: np.ndarray):
    """x has shape (n, 1). Returns output of shape (n,) and a cache for backprop."""
    h = x
    cache = []
    last = len(mlp.layers) - 1
    for i, (w, b, fi, fo) in enumerate(mlp.layers):
        W = theta[w : w + fi * fo].reshape(fi, fo)
        pre = h @ W + theta[b : b + fo]
        cache.append((h, pre))
        h = pre if i == last else np.where(pre > 0, pre, LEAKY_SLOPE * pre)
    return h[:, 0], cache


def _mlp_backward(theta, mlp: _MlpLayout, cache, grad_out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients into ``grad``; return d/d input, shape (n,)."""
    g = grad_out[:, None]
    last = len(mlp.layers) - 1
    for i in range(last, -1, -1):
        w, b, fi, fo = mlp.layers[i]
        h, pre = cache[i]
        if i != last:
            g = np.where(pre > 0, g, LEAKY_SLOPE * g)
        grad[w : w + fi * fo] += (h.T @ g).ravel()
        grad[b : b + fo] += g.sum(axis=0)
        g = g @ theta[w : w + fi * fo].reshape(fi, fo).T
    return g[:, 0]


def _mlp_eval(theta, mlp, x):
    return _mlp_forward(theta, mlp, np.asarray(x, dtype=np.float64).reshape(-1, 1))[0]


# --------------------------------------------------------------------------
# model


@dataclass
class SubFlow:
    """Read-only view of one sub-flow's parameters."""

    theta: np.ndarray
    layout: _SubflowLayout
    anm_restricted: bool
    s_clip: float

    @property
    def t1(self) -> float:
        return float(self.theta[self.layout.t1])

    @property
    def s1(self) -> float:
        return 0.0 if self.anm_restricted else float(self.theta[self.layout.s1])

    def t2(self, c) -> np.ndarray:
        return _mlp_eval(self.theta, self.layout.t2, c)

    def s2(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        if self.anm_restricted:
            return np.zeros(c.size)
        return np.clip(_mlp_eval(self.theta, self.layout.s2, c), -self.s_clip, self.s_clip)


@dataclass
class FlowModel:
    direction: Direction
    config: FlowConfig
    theta: np.ndarray
    history: list = field(default_factory=list, repr=False)
    clamp_events: int = 0

    def __post_init__(self):
        self.direction = Direction(self.direction)
        if self.direction == Direction.NO_CONCLUSION:
            raise ValueError("a flow model needs a concrete direction")
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.size != n_parameters(self.config):
            raise ValueError("parameter vector does not match config")

    @classmethod
    def initial(cls, direction, cfg: FlowConfig, seed: int = 0) -> "FlowModel":
        return cls(Direction(direction), cfg, init_parameters(cfg, seed))

    @property
    def layout(self) -> list[_SubflowLayout]:
        return _layout(self.config)

    @property
    def subflows(self) -> list[SubFlow]:
        """Innermost (latent side) first."""
        return [SubFlow(self.theta, sf, self.config.anm_restricted, self.config.s_clip) for sf in self.layout]

    def orient(self, d: PairDataset) -> tuple[np.ndarray, np.ndarray]:
        """(cause, effect) columns of ``d`` under this model's hypothesis."""
        return (d.x, d.y) if self.direction == Direction.FORWARD else (d.y, d.x)

    # -------------------------------------------------- serialization
    def to_dict(self) -> dict:
        subflows = []
        for sf in self.layout:
            subflows.append(
                {
                    "t1": float(self.theta[sf.t1]),
                    "s1": float(self.theta[sf.s1]),
                    "t2": self.theta[sf.t2.layers[0][0] : sf.s2.layers[0][0]].tolist(),
                    "s2": self.theta[sf.s2.layers[0][0] : sf.end].tolist(),
                }
            )
        return {"direction": self.direction.value, "config": asdict(self.config), "subflows": subflows}

    @classmethod
    def from_dict(cls, obj: dict) -> "FlowModel":
        cfg = FlowConfig(**obj["config"])
        parts = []
        for sf in obj["subflows"]:
            parts.extend([[sf["t1"], sf["s1"]], sf["t2"], sf["s2"]])
        theta = np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])
        return cls(Direction(obj["direction"]), cfg, theta)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "FlowModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# maps


def forward_map(m: FlowModel, latent_cause, latent_effect) -> tuple[np.ndarray, np.ndarray]:
    """Latent pair -> observed (cause, effect), innermost sub-flow first."""
    c = np.array(latent_cause, dtype=np.float64, ndmin=1)
    e = np.array(latent_effect, dtype=np.float64, ndmin=1)
    for sf in m.subflows:
        c = sf.t1 + math.exp(sf.s1) * c
        e = sf.t2(c) + np.exp(sf.s2(c)) * e
    return c, e


def inverse_map(m: FlowModel, cause, effect) -> tuple[np.ndarray, np.ndarray]:
    """Observed (cause, effect) -> latent pair, outermost sub-flow first."""
    c = np.array(cause, dtype=np.float64, ndmin=1)
    e = np.array(effect, dtype=np.float64, ndmin=1)
    for sf in reversed(m.subflows):
        e = (e - sf.t2(c)) * np.exp(-sf.s2(c))
        c = (c - sf.t1) * math.exp(-sf.s1)
    return c, e


def log_det_inverse(m: FlowModel, cause) -> np.ndarray:
    """log |d latent / d observed| per point."""
    c = np.array(cause, dtype=np.float64, ndmin=1)
    total = np.zeros(c.size)
    for sf in reversed(m.subflows):
        total -= sf.s1 + sf.s2(c)
        c = (c - sf.t1) * math.exp(-sf.s1)
    return total


def conditional_moments(m: FlowModel, cause) -> tuple[np.ndarray, np.ndarray]:
    """Composed location ``f(c)`` and scale ``g(c) > 0`` of the effect given the cause.

    ``effect = f(c) + g(c) * u_e``; ``f`` is the effect at latent ``u_e = 0``.
    """
    c = np.array(cause, dtype=np.float64, ndmin=1)
    f = np.zeros(c.size)
    log_g = np.zeros(c.size)
    for sf in reversed(m.subflows):
        s = sf.s2(c)
        f += np.exp(log_g) * sf.t2(c)
        log_g += s
        c = (c - sf.t1) * math.exp(-sf.s1)
    return f, np.exp(log_g)


def cause_moments(m: FlowModel) -> tuple[float, float]:
    """Location and scale of the cause marginal: ``cause = a + b * u_c``."""
    a, b = 0.0, 1.0
    for sf in m.subflows:
        a = sf.t1 + math.exp(sf.s1) * a
        b = math.exp(sf.s1) * b
    return a, b


def residuals(m: FlowModel, d: PairDataset) -> np.ndarray:
    """Effect residual ``(effect - f(cause)) / g(cause)`` for each row of ``d``."""
    cause, effect = m.orient(d)
    f, g = conditional_moments(m, cause)
    return (effect - f) / g


def cause_residuals(m: FlowModel, d: PairDataset) -> np.ndarray:
    cause, _ = m.orient(d)
    a, b = cause_moments(m)
    return (cause - a) / b


# --------------------------------------------------------------------------
# likelihood and gradient


def _loglik_grad(m: FlowModel, cause: np.ndarray, effect: np.ndarray, want_grad: bool = True):
    """Per-point log-likelihood and (optionally) gradient of its sum w.r.t. theta."""
    cfg = m.config
    theta = m.theta
    anm = cfg.anm_restricted
    clip = cfg.s_clip
    n = cause.size
    c = cause.reshape(-1, 1).astype(np.float64, copy=False)
    e = effect.astype(np.float64, copy=True)
    logdet = np.zeros(n)
    tape = []
    clamps = 0
    for sf in reversed(m.layout):
        t, tcache = _mlp_forward(theta, sf.t2, c)
        if anm:
            s, scache, smask = np.zeros(n), None, None
            s1 = 0.0
        else:
            raw, scache = _mlp_forward(theta, sf.s2, c)
            smask = np.abs(raw) < clip
            clamps += int(smask.size - np.count_nonzero(smask))
            s = np.clip(raw, -clip, clip)
            s1 = theta[sf.s1]
        e_out = (e - t) * np.exp(-s)
        c_out = (c - theta[sf.t1]) * math.exp(-s1)
        logdet -= s1 + s
        tape.append((sf, tcache, scache, smask, s, s1, e_out, c_out))
        c, e = c_out, e_out
    c0 = c[:, 0]
    ll = prior_logpdf(c0, cfg.prior) + prior_logpdf(e, cfg.prior) + logdet
    if not np.all(np.isfinite(ll)):
        raise NonFinite("log-likelihood evaluation overflowed")
    if clamps:
        m.clamp_events += clamps
    if not want_grad:
        return ll, None

    grad = np.zeros_like(theta)
    g_c = _prior_dlogpdf(c0, cfg.prior)
    g_e = _prior_dlogpdf(e, cfg.prior)
    # walk back from latent side to observed side
    for sf, tcache, scache, smask, s, s1, e_out, c_out in reversed(tape):
        inv_g = np.exp(-s)
        g_t = -g_e * inv_g
        g_e_in = g_e * inv_g
        g_c_in = g_c * math.exp(-s1) + _mlp_backward(theta, sf.t2, tcache, g_t, grad)
        grad[sf.t1] += -math.exp(-s1) * g_c.sum()
        if not anm:
            g_s = (-g_e * e_out - 1.0) * smask
            g_c_in = g_c_in + _mlp_backward(theta, sf.s2, scache, g_s, grad)
            grad[sf.s1] += -(g_c * c_out[:, 0]).sum() - n
        g_c, g_e = g_c_in, g_e_in
    return ll, grad


class _Workspace:
    """Preallocated buffers for the compiled kernel, sized for up to ``n`` points."""

    def __init__(self, cfg: FlowConfig, n: int):
        K, L, h = cfg.n_subflows, cfg.n_layers, max(cfg.hidden_width, 1)
        self.n = n
        self.hmax = h
        self.lay = np.zeros((K, 2, L, 4), dtype=np.int64)
        self.t1s1 = np.zeros((K, 2), dtype=np.int64)
        for k, sf in enumerate(_layout(cfg)):
            self.t1s1[k] = (sf.t1, sf.s1)
            for net, mlp in enumerate((sf.t2, sf.s2)):
                self.lay[k, net] = np.asarray(mlp.layers, dtype=np.int64)
        self.bufs = (
            np.empty((K, 2, L + 1, h, n)),
            np.empty((K, 2, L, h, n)),
            np.empty((K + 1, n)),
            np.empty((K + 1, n)),
            np.empty((K, n)),
            np.empty((K, n)),
            np.empty((h, n)),
            np.empty((h, n)),
        )
        self.ll = np.empty(n)


def _fast_loglik_grad(m: FlowModel, cause, effect, want_grad=True, ws: Optional[_Workspace] = None):
    cfg = m.config
    cause = np.ascontiguousarray(cause, dtype=np.float64)
    effect = np.ascontiguousarray(effect, dtype=np.float64)
    n = cause.size
    if ws is None or ws.n < n:
        ws = _Workspace(cfg, n)
    grad = np.zeros_like(m.theta)
    ll = ws.ll[:n]
    _kernels.loglik_grad(
        m.theta, ws.lay, ws.t1s1, cause, effect, 0 if cfg.prior == "laplace" else 1,
        cfg.anm_restricted, float(cfg.s_clip), grad, ll, ws.hmax, want_grad, *ws.bufs,
    )
    if not np.all(np.isfinite(ll)):
        raise NonFinite("log-likelihood evaluation overflowed")
    # OK buffer marks points where the scale clamp was inactive
    clamped = int(n * cfg.n_subflows - ws.bufs[5][:, :n].sum()) if not cfg.anm_restricted else 0
    m.clamp_events += clamped
    return ll.copy(), (grad if want_grad else None)


def log_likelihood(m: FlowModel, d: PairDataset) -> tuple[np.ndarray, float]:
    """Per-point joint log-likelihood under ``m`` and its total."""
    cause, effect = m.orient(d)
    ll, _ = _loglik_grad(m, np.asarray(cause), np.asarray(effect), want_grad=False)
    return ll, float(ll.sum())


def gradient(m: FlowModel, d: PairDataset) -> np.ndarray:
    """Gradient of the total log-likelihood with respect to the flat parameter vector."""
    cause, effect = m.orient(d)
    return _fast_loglik_grad(m, cause, effect)[1]


def reference_gradient(m: FlowModel, d: PairDataset) -> np.ndarray:
    """Same quantity as :func:`gradient` through the vectorized numpy code path."""
    cause, effect = m.orient(d)
    return _loglik_grad(m, np.asarray(cause), np.asarray(effect))[1]


def lsnm_conditional_logpdf(effect, loc, scale, noise_logpdf) -> np.ndarray:
    """log p(effect | cause) for ``effect = loc + scale * noise`` with noise log-density ``noise_logpdf``."""
    effect, loc, scale = (np.asarray(a, dtype=np.float64) for a in (effect, loc, scale))
    return noise_logpdf((effect - loc) / scale) - np.log(scale)


# --------------------------------------------------------------------------
# training


def fit(d_train: PairDataset, direction, cfg: FlowConfig, seed: int) -> FlowModel:
    """Maximum-likelihood fit of a flow in ``direction`` with Adam."""
    direction = Direction(direction)
    if d_train.n < 2:
        raise ValueError("need at least 2 training points")
    m = FlowModel.initial(direction, cfg, seed)
    cause, effect = m.orient(d_train)
    cause = np.ascontiguousarray(cause)
    effect = np.ascontiguousarray(effect)
    n = cause.size
    theta = m.theta
    mom1 = np.zeros_like(theta)
    mom2 = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    lr = cfg.learning_rate
    lam = cfg.l2_penalty
    batch = n if cfg.batch_size is None else min(int(cfg.batch_size), n)
    rng = rng_from(seed, 0xBA7C)
    ws = _Workspace(cfg, batch)
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if batch < n else None
        epoch_loss = 0.0
        for start in range(0, n, batch):
            if order is None:
                cb, eb = cause, effect
            else:
                idx = order[start : start + batch]
                cb, eb = cause[idx], effect[idx]
            try:
                ll, g = _fast_loglik_grad(m, cb, eb, ws=ws)
            except NonFinite:
                raise DivergedTraining(f"non-finite loss at epoch {epoch}") from None
            nb = cb.size
            loss = -ll.sum() / nb
            # loss gradient: mean NLL + 0.5 * lam * ||theta||^2
            g = -g / nb
            if lam:
                loss += 0.5 * lam * float(theta @ theta)
                g += lam * theta
            if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                raise DivergedTraining(f"non-finite loss at epoch {epoch}")
            step += 1
            mom1 = b1 * mom1 + (1 - b1) * g
            mom2 = b2 * mom2 + (1 - b2) * g * g
            mhat = mom1 / (1 - b1**step)
            vhat = mom2 / (1 - b2**step)
            theta -= lr * mhat / (np.sqrt(vhat) + eps)
            epoch_loss += loss * nb
        history.append(epoch_loss / n)
    m.history = history
    if m.clamp_events:
        logger.info("scale clamp at +/-%g active in %d point/sub-flow evaluations", cfg.s_clip, m.clamp_events)
    try:
        _loglik_grad(m, cause, effect, want_grad=False)
    except NonFinite:
        raise DivergedTraining("final model is non-finite") from None
    return m


# --------------------------------------------------------------------------
# scikit-learn front end


class AffineFlowLSNM(BaseEstimator, TransformerMixin):
    """Location-scale flow for one causal hypothesis over two-column data.

    ``X`` is an ``(n, 2)`` array of (x, y). With ``direction="forward"`` the
    first column is the cause; ``"backward"`` swaps the roles.
    ``transform`` returns the latent pair (cause latent, effect latent).
    """

    def __init__(
        self,
        direction="forward",
        n_subflows=4,
        hidden_width=5,
        n_layers=4,
        prior="laplace",
        epochs=750,
        l2_penalty=0.0,
        learning_rate=1e-3,
        batch_size=None,
        anm_restricted=False,
        random_state=0,
    ):
        self.direction = direction
        self.n_subflows = n_subflows
        self.hidden_width = hidden_width
        self.n_layers = n_layers
        self.prior = prior
        self.epochs = epochs
        self.l2_penalty = l2_penalty
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.anm_restricted = anm_restricted
        self.random_state = random_state

    def _config(self) -> FlowConfig:
        return FlowConfig(
            n_subflows=self.n_subflows,
            hidden_width=self.hidden_width,
            n_layers=self.n_layers,
            prior=self.prior,
            epochs=self.epochs,
            l2_penalty=self.l2_penalty,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            anm_restricted=self.anm_restricted,
        )

    @staticmethod
    def _dataset(X) -> PairDataset:
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        if X.shape[1] != 2:
            raise ValueError(f"expected 2 columns, got {X.shape[1]}")
        return PairDataset(X[:, 0], X[:, 1])

    def fit(self, X, y=None):
        seed = 0 if self.random_state is None else int(self.random_state)
        self.model_ = fit(self._dataset(X), self.direction, self._config(), seed)
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        d = self._dataset(X)
        uc, ue = inverse_map(self.model_, *self.model_.orient(d))
        return np.column_stack([uc, ue])

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        Z = check_array(Z, dtype=np.float64)
        c, e = forward_map(self.model_, Z[:, 0], Z[:, 1])
        return np.column_stack([c, e] if self.model_.direction == Direction.FORWARD else [e, c])

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        return log_likelihood(self.model_, self._dataset(X))[0]

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def residuals(self, X):
        check_is_fitted(self, "model_")
        return residuals(self.model_, self._dataset(X))

    def conditional_moments(self, cause: Sequence[float]):
        check_is_fitted(self, "model_")
        return conditional_moments(self.model_, cause)
