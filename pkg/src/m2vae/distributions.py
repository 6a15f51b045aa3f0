"""Diagonal Gaussians, Bernoulli likelihoods and Monte Carlo KL estimates.

The array-level functions (``kl_diag``, ``gaussian_log_density`` ...) reduce
over the last axis and broadcast over any leading batch axes. They are shared
by the autodiff primitives so that forward values agree bit for bit.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 20.0
LOG_2PI = math.log(2.0 * math.pi)


class RngStream:
    """Seeded normal/uniform source that can be cloned and split.

    Children are derived from the seed and a spawn path, never from the
    parent's draw position, so ``split`` is reproducible regardless of how
    many numbers the parent has produced.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._children = 0
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low, high, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, high, shape=None):
        return self._gen.integers(high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def split(self, n: int) -> list["RngStream"]:
        kids = [RngStream(self.seed, self.path + (self._children + i,)) for i in range(n)]
        self._children += n
        return kids

    def clone(self) -> "RngStream":
        return copy.deepcopy(self)


def _as_rng(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    return RngStream(0 if rng is None else int(rng))


# -- array level -------------------------------------------------------------

def kl_diag(mu1, lv1, mu2, lv2) -> np.ndarray:
    """KL(N(mu1, e^lv1) || N(mu2, e^lv2)) summed over the last axis."""
    v2 = np.exp(lv2)
    per_dim = 0.5 * (lv2 - lv1) + (np.exp(lv1) + (mu1 - mu2) ** 2) / (2.0 * v2) - 0.5
    return per_dim.sum(axis=-1)


def kl_diag_standard(mu, lv) -> np.ndarray:
    return 0.5 * (np.exp(lv) + mu ** 2 - 1.0 - lv).sum(axis=-1)


def gaussian_log_density(x, mu, lv) -> np.ndarray:
    return (-0.5 * LOG_2PI - 0.5 * lv - (x - mu) ** 2 / (2.0 * np.exp(lv))).sum(axis=-1)


def bernoulli_log_density(x, logits) -> np.ndarray:
    # x*l - log(1 + e^l), with logaddexp for stability at large |l|
    return (x * logits - np.logaddexp(0.0, logits)).sum(axis=-1)


def clamp_log_var(lv):
    return np.clip(lv, LOG_VAR_MIN, LOG_VAR_MAX)


# -- distribution objects ----------------------------------------------------

@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        lv = np.asarray(self.log_var, dtype=np.float64)
        if mean.shape != lv.shape:
            raise ValueError(f"mean shape {mean.shape} != log_var shape {lv.shape}")
        if np.isnan(lv).any() or not np.isfinite(mean).all():
            raise ValueError("DiagGaussian parameters must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", clamp_log_var(lv))

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)


@dataclass(frozen=True)
class StandardPrior:
    dim: int

    def as_gaussian(self) -> DiagGaussian:
        return DiagGaussian.standard(self.dim)


def _check_dims(a: np.ndarray, b: np.ndarray):
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def kl_gaussian(q: DiagGaussian, p: DiagGaussian):
    _check_dims(q.mean, p.mean)
    return kl_diag(q.mean, q.log_var, p.mean, p.log_var)


def kl_to_standard(q: DiagGaussian):
    return kl_diag_standard(q.mean, q.log_var)


def reparam_sample(q: DiagGaussian, rng) -> np.ndarray:
    eps = _as_rng(rng).normal(q.mean.shape)
    return q.mean + q.std * eps


def log_prob_gaussian(x, p: DiagGaussian):
    x = np.asarray(x, dtype=np.float64)
    _check_dims(x, p.mean)
    return gaussian_log_density(x, p.mean, p.log_var)


def log_prob_bernoulli(x, logits):
    x = np.asarray(x, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    _check_dims(x, logits)
    if not np.isin(x, (0.0, 1.0)).all():
        raise ValueError("Bernoulli observations must be 0 or 1")
    return bernoulli_log_density(x, logits)


def mc_kl(q: DiagGaussian, p: DiagGaussian, n: int, rng) -> tuple[float, float]:
    """Sample-mean estimate of KL(q || p) and its standard error."""
    if n < 100:
        raise ValueError("mc_kl needs at least 100 samples")
    _check_dims(q.mean, p.mean)
    if q.mean.ndim != 1:
        raise ValueError("mc_kl takes unbatched distributions")
    z = q.mean + q.std * _as_rng(rng).normal((n, q.dim))
    diff = gaussian_log_density(z, q.mean, q.log_var) - gaussian_log_density(z, p.mean, p.log_var)
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(n))
