"""Analytic references: linear-Gaussian likelihoods and discrete information measures."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from .compiler import TermKind
from .distributions import LOG_2PI, DiagGaussian, RngStream, kl_diag, kl_diag_standard, gaussian_log_density


# -- linear-Gaussian latent model ---------------------------------------------

@dataclass
class LinearGaussianModel:
    """z ~ N(0, I); x_m = W_m z + b_m + noise with variance ``noise_var[m]``."""

    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]
    noise_var: dict[str, float]

    def __post_init__(self):
        self.weights = {k: np.atleast_2d(np.asarray(v, dtype=np.float64)) for k, v in self.weights.items()}
        self.biases = {k: np.asarray(v, dtype=np.float64).reshape(-1) for k, v in self.biases.items()}
        self.noise_var = {k: float(v) for k, v in self.noise_var.items()}
        dims = {w.shape[1] for w in self.weights.values()}
        if len(dims) != 1:
            raise ValueError("all weight matrices need the same latent width")
        for k, w in self.weights.items():
            if self.biases[k].shape != (w.shape[0],):
                raise ValueError(f"bias of {k!r} does not match its weight matrix")

    @property
    def latent_dim(self) -> int:
        return next(iter(self.weights.values())).shape[1]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self.weights))

    def stacked(self, names=None):
        names = self.names if names is None else tuple(sorted(names))
        W = np.vstack([self.weights[n] for n in names])
        b = np.concatenate([self.biases[n] for n in names])
        noise = np.concatenate([np.full(self.weights[n].shape[0], self.noise_var[n]) for n in names])
        return W, b, noise

    def covariance(self, names=None) -> np.ndarray:
        W, _, noise = self.stacked(names)
        return W @ W.T + np.diag(noise)

    def to_dict(self) -> dict:
        return {"weights": {k: v.tolist() for k, v in sorted(self.weights.items())},
                "biases": {k: v.tolist() for k, v in sorted(self.biases.items())},
                "noise_var": dict(sorted(self.noise_var.items()))}

    @classmethod
    def from_dict(cls, doc) -> "LinearGaussianModel":
        return cls(doc["weights"], doc["biases"], doc["noise_var"])


def _stack_obs(model, observation: Mapping[str, np.ndarray]):
    names = tuple(sorted(observation))
    x = np.concatenate([np.asarray(observation[n], dtype=np.float64).reshape(-1) for n in names])
    return names, x


def exact_log_likelihood(model: LinearGaussianModel, observation: Mapping[str, np.ndarray]) -> float:
    """log p of the observed modalities (any subset) under the marginal Gaussian."""
    names, x = _stack_obs(model, observation)
    if any(model.noise_var[n] <= 0 for n in names):
        raise np.linalg.LinAlgError("noise variances must be positive")
    W, b, noise = model.stacked(names)
    L = np.linalg.cholesky(W @ W.T + np.diag(noise))
    r = np.linalg.solve(L, x - b)
    return float(-0.5 * len(x) * LOG_2PI - np.log(np.diag(L)).sum() - 0.5 * r @ r)


def true_posterior(model: LinearGaussianModel, observation: Mapping[str, np.ndarray]):
    """Exact p(z | observed modalities): returns (mean, covariance)."""
    names, x = _stack_obs(model, observation)
    W, b, noise = model.stacked(names)
    precision = np.eye(model.latent_dim) + W.T @ (W / noise[:, None])
    L = np.linalg.cholesky(precision)
    cov = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(model.latent_dim)))
    mean = cov @ (W.T @ ((x - b) / noise))
    return mean, cov


def true_posterior_diag(model, observation) -> DiagGaussian:
    mean, cov = true_posterior(model, observation)
    if not np.allclose(cov, np.diag(np.diag(cov)), atol=1e-12):
        raise ValueError("posterior covariance is not diagonal")
    return DiagGaussian(mean, np.log(np.diag(cov)))


def kl_diag_full(q: DiagGaussian, mean_p, cov_p) -> float:
    """KL(q || N(mean_p, cov_p)) for diagonal q and full-covariance p."""
    L = np.linalg.cholesky(cov_p)
    inv_L = np.linalg.solve(L, np.eye(len(mean_p)))
    prec = inv_L.T @ inv_L
    d = mean_p - q.mean
    logdet_p = 2.0 * np.log(np.diag(L)).sum()
    return float(0.5 * (np.trace(prec * q.var) + d @ prec @ d - q.dim + logdet_p - q.log_var.sum()))


def mc_log_likelihood(model: LinearGaussianModel, observation, n: int, rng) -> tuple[float, float]:
    """log (1/n) sum p(x | z_i), z_i from the prior, with a delta-method standard error."""
    rng = rng if isinstance(rng, RngStream) else RngStream(rng)
    z = rng.normal((n, model.latent_dim))
    logw = np.zeros(n)
    for name, x in observation.items():
        mu = z @ model.weights[name].T + model.biases[name]
        lv = np.full_like(mu, math.log(model.noise_var[name]))
        logw += gaussian_log_density(np.asarray(x, dtype=np.float64), mu, lv)
    top = logw.max()
    w = np.exp(logw - top)
    m = w.mean()
    return float(top + math.log(m)), float(w.std(ddof=1) / math.sqrt(n) / m)


class ElboGap(NamedTuple):
    elbo: float
    exact: float
    gap: float
    std_error: float


def elbo_gap(model: LinearGaussianModel, bundle, observation: Mapping[str, np.ndarray],
             n_samples: int = 10_000, rng=None, posteriors: Mapping[int, DiagGaussian] | None = None,
             exact_reference: bool = False) -> ElboGap:
    """Monte Carlo ELBO of the bundle's expression with exact linear-Gaussian decoders.

    ``posteriors`` overrides encoders by subset mask. With ``exact_reference``
    the cross-KL terms compare against the true reduced-set posteriors, which
    keeps the multi-modal objectives a valid lower bound.
    """
    rng = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else rng)
    expr = bundle.expression
    ms = expr.modality_set
    obs = {k: np.asarray(v, dtype=np.float64).reshape(1, -1) for k, v in observation.items()}
    posteriors = dict(posteriors or {})
    for mask in expr.encoder_inventory():
        if mask not in posteriors:
            mu, lv = bundle.encoders[mask](obs)
            posteriors[mask] = DiagGaussian(mu.data[0], lv.data[0])

    samples = np.zeros(n_samples)
    z_cache = {}
    for t in expr.terms:
        weight = t.sign * float(t.coefficient)
        q = posteriors[t.subset]
        if t.kind is TermKind.PRIOR_KL:
            samples += weight * float(kl_diag_standard(q.mean, q.log_var))
        elif t.kind is TermKind.CROSS_KL:
            if exact_reference:
                ref_obs = {n: obs[n] for n in ms.member_names(t.reference)}
                mean_p, cov_p = true_posterior(model, ref_obs)
                kl = kl_diag_full(q, mean_p, cov_p)
            else:
                r = posteriors[t.reference]
                kl = float(kl_diag(q.mean, q.log_var, r.mean, r.log_var))
            samples += weight * kl
        else:
            if t.subset not in z_cache:
                z_cache[t.subset] = q.mean + q.std * rng.normal((n_samples, ms.latent_dim))
            z = z_cache[t.subset]
            name = ms.modalities[t.index].name
            mu = z @ model.weights[name].T + model.biases[name]
            lv = np.full_like(mu, math.log(model.noise_var[name]))
            samples += weight * gaussian_log_density(obs[name], mu, lv)
    elbo = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(n_samples))
    exact = exact_log_likelihood(model, {n: observation[n] for n in ms.names})
    return ElboGap(elbo, exact, exact - elbo, se)


# -- discrete information theory ------------------------------------------------

@dataclass(frozen=True)
class DiscreteJoint:
    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim not in (2, 3):
            raise ValueError("joint tables cover 2 or 3 variables")
        if (t < 0).any() or abs(t.sum() - 1.0) > 1e-12:
            raise ValueError("table must be nonnegative and sum to 1")
        object.__setattr__(self, "table", t)

    @property
    def nvars(self) -> int:
        return self.table.ndim

    def marginal(self, which) -> np.ndarray:
        which = tuple(sorted(set(which)))
        drop = tuple(i for i in range(self.nvars) if i not in which)
        return self.table.sum(axis=drop)


def _shannon(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def entropy(j: DiscreteJoint, which=None) -> float:
    """Entropy in nats of the marginal over the variables in ``which`` (default: all)."""
    which = range(j.nvars) if which is None else ((which,) if isinstance(which, int) else which)
    return _shannon(j.marginal(which))


def conditional_entropy(j: DiscreteJoint, targets, given=()) -> float:
    targets = (targets,) if isinstance(targets, int) else tuple(targets)
    given = (given,) if isinstance(given, int) else tuple(given)
    if not given:
        return entropy(j, targets)
    return entropy(j, targets + given) - entropy(j, given)


def mutual_information(j: DiscreteJoint, a, b, given=()) -> float:
    """I(A;B) or, with ``given``, I(A;B|C) = H(A|C) - H(A|B,C)."""
    a = (a,) if isinstance(a, int) else tuple(a)
    b = (b,) if isinstance(b, int) else tuple(b)
    given = (given,) if isinstance(given, int) else tuple(given)
    return conditional_entropy(j, a, given) - conditional_entropy(j, a, b + given)


def variation_of_information(j: DiscreteJoint, tol: float = 1e-12) -> float:
    """VI(A,B) = H(A|B) + H(B|A); for three variables the sum of H(X | other two)."""
    if j.nvars == 2:
        via_mi = entropy(j, 0) + entropy(j, 1) - 2.0 * mutual_information(j, 0, 1)
        via_ce = conditional_entropy(j, 0, 1) + conditional_entropy(j, 1, 0)
        if abs(via_mi - via_ce) > tol:
            raise ArithmeticError(f"VI forms disagree: {via_mi!r} vs {via_ce!r}")
        return via_ce
    return sum(conditional_entropy(j, i, tuple(k for k in range(3) if k != i)) for i in range(3))
