"""Noise samplers and synthetic ground-truth SCM generators (LSNM and ANM families)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .core import Direction, LsnmError, PairDataset, rng_from


class InvalidParams(LsnmError, ValueError):
    pass


NOISE_KINDS = ("gaussian", "laplace", "uniform", "exponential", "beta", "continuous_bernoulli")


@dataclass(frozen=True)
class NoiseFamily:
    """A noise distribution: ``kind`` plus positional parameters.

    gaussian(mu, sigma), laplace(mu, b), uniform(a, b), exponential(rate),
    beta(a, b), continuous_bernoulli(lam).
    """

    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise InvalidParams(f"unknown noise family {self.kind!r}")
        p = tuple(float(v) for v in self.params)
        object.__setattr__(self, "params", p)
        expected = {"exponential": 1, "continuous_bernoulli": 1}.get(self.kind, 2)
        if len(p) != expected:
            raise InvalidParams(f"{self.kind} takes {expected} parameter(s), got {len(p)}")
        k = self.kind
        if (
            (k in ("gaussian", "laplace") and not p[1] > 0)
            or (k == "uniform" and not p[0] < p[1])
            or (k == "exponential" and not p[0] > 0)
            or (k == "beta" and not (p[0] > 0 and p[1] > 0))
            or (k == "continuous_bernoulli" and not 0 < p[0] < 1)
        ):
            raise InvalidParams(f"invalid parameters for {k}: {p}")

    @classmethod
    def parse(cls, text: str) -> "NoiseFamily":
        """Parse ``"uniform(-1,1)"`` style strings; bare names get the default grid parameters."""
        text = text.strip().lower().replace(" ", "")
        if "(" in text:
            name, rest = text.split("(", 1)
            params = tuple(float(v) for v in rest.rstrip(")").split(",") if v)
        else:
            name, params = text, None
        name = {"normal": "gaussian", "exp": "exponential", "cb": "continuous_bernoulli",
                "continuousbernoulli": "continuous_bernoulli"}.get(name, name)
        if params is None:
            return DEFAULT_NOISES[name]
        return cls(name, params)

    def __str__(self) -> str:
        return f"{self.kind}({','.join(f'{v:g}' for v in self.params)})"

    def mean(self) -> float:
        k, p = self.kind, self.params
        if k in ("gaussian", "laplace"):
            return p[0]
        if k == "uniform":
            return 0.5 * (p[0] + p[1])
        if k == "exponential":
            return 1.0 / p[0]
        if k == "beta":
            return p[0] / (p[0] + p[1])
        lam = p[0]
        if abs(lam - 0.5) < 1e-12:
            return 0.5
        return lam / (2 * lam - 1) + 1 / (2 * math.atanh(1 - 2 * lam))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}


DEFAULT_NOISES = {
    "gaussian": NoiseFamily("gaussian", (0, 1)),
    "laplace": NoiseFamily("laplace", (0, 1)),
    "uniform": NoiseFamily("uniform", (-1, 1)),
    "exponential": NoiseFamily("exponential", (1,)),
    "beta": NoiseFamily("beta", (0.5, 0.5)),
    "continuous_bernoulli": NoiseFamily("continuous_bernoulli", (0.9,)),
}


def _continuous_bernoulli_icdf(u: np.ndarray, lam: float) -> np.ndarray:
    if abs(lam - 0.5) < 1e-12:
        return u
    # CDF F(x) = (lam^x (1-lam)^(1-x) + lam - 1) / (2 lam - 1)
    r = lam / (1 - lam)
    return np.log1p(u * (2 * lam - 1) / (1 - lam)) / math.log(r)


def sample_noise(f: NoiseFamily, n: int, seed) -> np.ndarray:
    """``n`` i.i.d. draws from ``f``; ``seed`` is an int or a ``numpy.random.Generator``."""
    if n < 1:
        raise InvalidParams("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else rng_from(seed, 0x4015E)
    k, p = f.kind, f.params
    if k == "gaussian":
        return rng.normal(p[0], p[1], n)
    if k == "laplace":
        return rng.laplace(p[0], p[1], n)
    if k == "uniform":
        return rng.uniform(p[0], p[1], n)
    if k == "exponential":
        return rng.exponential(1.0 / p[0], n)
    if k == "beta":
        return rng.beta(p[0], p[1], n)
    return _continuous_bernoulli_icdf(rng.uniform(0.0, 1.0, n), p[0])


# --------------------------------------------------------------------------
# SCM families

LSNM_FAMILIES = ("lsnm-tanh-exp-cosine", "lsnm-sine-tanh", "lsnm-sigmoid-sigmoid")
ANM_FAMILIES = ("anm-sine", "anm-tanh", "anm-sigmoid")
FAMILIES = LSNM_FAMILIES + ANM_FAMILIES


@dataclass(frozen=True)
class ScmSpec:
    family: str
    coefficients: dict
    noise: NoiseFamily
    alpha: float = 1.0
    cause_noise: NoiseFamily = field(default_factory=lambda: DEFAULT_NOISES["gaussian"])

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidParams(f"unknown SCM family {self.family!r}")
        if not self.alpha > 0:
            raise InvalidParams("alpha must be > 0")

    @property
    def is_anm(self) -> bool:
        return self.family in ANM_FAMILIES

    def location(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c = self.coefficients
        base = self.family.split("-")[1]
        if base == "tanh":
            return np.tanh(x * c["theta1"]) * c["theta2"]
        if base == "sine":
            return np.sin(x * c["theta1"]) * c["theta2"]
        return expit(x * c["theta1"]) * c["theta2"]

    def scale(self, x) -> np.ndarray:
        """Noise multiplier including ``alpha``."""
        x = np.asarray(x, dtype=np.float64)
        c = self.coefficients
        if self.is_anm:
            g = np.ones_like(x)
        elif self.family == "lsnm-tanh-exp-cosine":
            g = np.exp(np.cos(x * c["psi1"]) * c["psi2"])
        elif self.family == "lsnm-sine-tanh":
            g = np.tanh(x * c["psi"]) + c["phi"]
        else:
            g = expit(x * c["psi1"]) * c["psi2"]
        return self.alpha * g

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "coefficients": dict(self.coefficients),
            "noise": self.noise.to_dict(),
            "alpha": self.alpha,
            "cause_noise": self.cause_noise.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ScmSpec":
        return cls(
            obj["family"],
            dict(obj["coefficients"]),
            NoiseFamily(obj["noise"]["kind"], tuple(obj["noise"]["params"])),
            float(obj["alpha"]),
            NoiseFamily(obj["cause_noise"]["kind"], tuple(obj["cause_noise"]["params"])),
        )


def _signed_coef(rng: np.random.Generator) -> float:
    # uniform on [-2, -0.5] U [0.5, 2]
    mag = rng.uniform(0.5, 2.0)
    return float(mag if rng.random() < 0.5 else -mag)


def sample_scm_spec(family: str, noise: NoiseFamily, alpha: float = 1.0, seed: int = 0,
                    cause_noise: Optional[NoiseFamily] = None) -> ScmSpec:
    family = family.lower()
    if family not in FAMILIES:
        raise InvalidParams(f"unknown SCM family {family!r}")
    rng = rng_from(seed, 0x5C3)
    coef = {"theta1": _signed_coef(rng), "theta2": _signed_coef(rng)}
    if family == "lsnm-tanh-exp-cosine":
        coef.update(psi1=_signed_coef(rng), psi2=_signed_coef(rng))
    elif family == "lsnm-sine-tanh":
        coef.update(psi=_signed_coef(rng), phi=float(rng.uniform(1.0, 2.0)))
    elif family == "lsnm-sigmoid-sigmoid":
        # the scale multiplier must stay positive
        coef.update(psi1=_signed_coef(rng), psi2=float(rng.uniform(0.5, 2.0)))
    return ScmSpec(family, coef, noise, float(alpha), cause_noise or DEFAULT_NOISES["gaussian"])


def generate_with_noise(spec: ScmSpec, n: int, seed: int) -> tuple[PairDataset, np.ndarray]:
    """Like :func:`generate`, also returning the effect-noise draws."""
    if n < 2:
        raise InvalidParams("n must be >= 2")
    rng = rng_from(seed, 0x6E4)
    x = sample_noise(spec.cause_noise, n, rng)
    noise = sample_noise(spec.noise, n, rng)
    y = spec.location(x) + spec.scale(x) * noise
    d = PairDataset(x, y, truth=Direction.FORWARD, name=f"{spec.family}-{spec.noise}-a{spec.alpha:g}-s{seed}")
    return d, noise


def generate(spec: ScmSpec, n: int, seed: int) -> PairDataset:
    """Draw ``n`` rows ``x ~ cause_noise``, ``y = f(x) + alpha * g(x) * noise``."""
    return generate_with_noise(spec, n, seed)[0]
