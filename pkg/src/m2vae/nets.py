"""Subset encoders, per-modality decoders and the compiled training objective."""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .compiler import (Likelihood, LossExpression, Modality, TermKind, from_dict, to_dict)
from .distributions import LOG_VAR_MAX, LOG_VAR_MIN, RngStream

ACTIVATIONS = ("tanh", "relu")
CHECKPOINT_FORMAT = "m2vae-checkpoint/1"


class InventoryError(LookupError):
    """A term or evaluation asked for an encoder/decoder the bundle lacks."""


def _layer_sizes(n_in, hidden, n_out):
    sizes = [n_in, *hidden]
    return list(zip(sizes[:-1], sizes[1:])), (sizes[-1], n_out)


class _MLP:
    """Shared trunk with named output heads, every head reading the last hidden layer."""

    def __init__(self, prefix: str, n_in: int, hidden, heads: Mapping[str, int], activation: str):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.activation = activation
        self.trunk = []
        self.params: dict[str, ad.Tensor] = {}
        for i, (fi, fo) in enumerate(_layer_sizes(n_in, hidden, 0)[0]):
            W = self._param(f"{prefix}.h{i}.W", (fi, fo))
            b = self._param(f"{prefix}.h{i}.b", (fo,))
            self.trunk.append((W, b))
        width = hidden[-1] if hidden else n_in
        self.heads = {}
        for name, n_out in heads.items():
            self.heads[name] = (self._param(f"{prefix}.{name}.W", (width, n_out)),
                                self._param(f"{prefix}.{name}.b", (n_out,)))

    def _param(self, name, shape):
        t = ad.Tensor(np.zeros(shape), requires_grad=True)
        self.params[name] = t
        return t

    def __call__(self, x) -> dict[str, ad.Tensor]:
        h = ad.as_tensor(x)
        for W, b in self.trunk:
            h = h @ W + b
            h = h.tanh() if self.activation == "tanh" else h.relu()
        return {name: h @ W + b for name, (W, b) in self.heads.items()}


class EncoderNet:
    """q(z | modalities in ``subset``), fed the canonical-order concatenation."""

    def __init__(self, subset: int, members: tuple[Modality, ...], latent_dim: int,
                 hidden=(64, 64), activation="tanh"):
        self.subset = subset
        self.members = members
        self.input_dim = sum(m.data_dim for m in members)
        label = ",".join(m.name for m in members)
        self.net = _MLP(f"enc[{label}]", self.input_dim, tuple(hidden),
                        {"mean": latent_dim, "log_var": latent_dim}, activation)

    @property
    def params(self):
        return self.net.params

    def __call__(self, batch: Mapping[str, np.ndarray]) -> tuple[ad.Tensor, ad.Tensor]:
        x = np.concatenate([np.asarray(batch[m.name], dtype=np.float64) for m in self.members], axis=-1)
        out = self.net(x)
        return out["mean"], ad.clip(out["log_var"], LOG_VAR_MIN, LOG_VAR_MAX)


class DecoderNet:
    def __init__(self, modality: Modality, latent_dim: int, hidden=(64, 64), activation="tanh"):
        self.modality = modality
        d = modality.data_dim
        heads = {"logits": d} if modality.likelihood is Likelihood.BERNOULLI else {"mean": d, "log_var": d}
        self.net = _MLP(f"dec[{modality.name}]", latent_dim, tuple(hidden), heads, activation)

    @property
    def params(self):
        return self.net.params

    def __call__(self, z) -> dict[str, ad.Tensor]:
        out = self.net(z)
        if "log_var" in out:
            out["log_var"] = ad.clip(out["log_var"], LOG_VAR_MIN, LOG_VAR_MAX)
        return out

    def log_likelihood(self, x: np.ndarray, z) -> ad.Tensor:
        """Per-row log p(x | z)."""
        out = self(z)
        if self.modality.likelihood is Likelihood.BERNOULLI:
            return ad.bernoulli_log_prob(x, out["logits"])
        return ad.gaussian_log_prob(x, out["mean"], out["log_var"])

    def predict(self, z) -> np.ndarray:
        """Mean of p(x | z) as a plain array."""
        out = self(z)
        if self.modality.likelihood is Likelihood.BERNOULLI:
            return 0.5 * (1.0 + np.tanh(0.5 * out["logits"].data))
        return out["mean"].data


@dataclass
class ModelBundle:
    expression: LossExpression
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    stop_reference_grad: bool = False
    encoders: dict[int, EncoderNet] = field(default_factory=dict)
    decoders: dict[int, DecoderNet] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        ms = self.expression.modality_set
        if not self.encoders:
            self.encoders = {mask: EncoderNet(mask, ms.members(mask), ms.latent_dim, self.hidden, self.activation)
                             for mask in self.expression.encoder_inventory()}
        if not self.decoders:
            self.decoders = {i: DecoderNet(ms.modalities[i], ms.latent_dim, self.hidden, self.activation)
                             for i in self.expression.decoder_inventory()}
        self.check_inventory()

    @property
    def modality_set(self):
        return self.expression.modality_set

    def check_inventory(self):
        for mask in self.expression.encoder_inventory():
            if mask not in self.encoders:
                names = ",".join(self.modality_set.member_names(mask))
                raise InventoryError(f"encoder not in inventory: {{{names}}}")
        for i in self.expression.decoder_inventory():
            if i not in self.decoders:
                raise InventoryError(f"decoder not in inventory: {self.modality_set.modalities[i].name}")

    def encoder_for(self, names) -> EncoderNet:
        mask = self.modality_set.mask_of(names)
        if mask not in self.encoders:
            raise InventoryError(f"encoder not in inventory: {{{','.join(sorted(names))}}}")
        return self.encoders[mask]

    def parameters(self) -> dict[str, ad.Tensor]:
        params = {}
        for mask in sorted(self.encoders):
            params.update(self.encoders[mask].params)
        for i in sorted(self.decoders):
            params.update(self.decoders[i].params)
        return params

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.parameters().values()])


def init_params(bundle: ModelBundle, seed: int = 0) -> ModelBundle:
    """Glorot-uniform weights, zero biases, encoder log-variance bias -1."""
    rng = RngStream(seed)
    for name, t in bundle.parameters().items():
        if t.data.ndim == 2:
            fan_in, fan_out = t.data.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            t.data = rng.uniform(-bound, bound, t.data.shape)
        elif name.startswith("enc[") and name.endswith(".log_var.b"):
            t.data = np.full(t.data.shape, -1.0)
        else:
            t.data = np.zeros(t.data.shape)
    bundle.seed = int(seed)
    return bundle


def build_bundle(expression: LossExpression, hidden=(64, 64), activation="tanh", seed=0,
                 stop_reference_grad=False) -> ModelBundle:
    bundle = ModelBundle(expression, tuple(hidden), activation, stop_reference_grad)
    return init_params(bundle, seed)


# -- objective ----------------------------------------------------------------

class Forward(NamedTuple):
    objective: ad.Tensor
    tape: ad.Tape
    terms: dict[str, ad.Tensor]


def _recon_subsets(expr: LossExpression) -> list[int]:
    return sorted({t.subset for t in expr.terms if t.kind is TermKind.RECON})


def draw_noise(bundle: ModelBundle, n: int, rng: RngStream, mc_samples: int = 1) -> dict[frozenset, np.ndarray]:
    """Reparameterisation noise, shape (mc_samples, n, latent_dim) per encoder.

    With several samples, sample ``s`` comes from ``rng.split(mc_samples)[s]``;
    a single sample draws from ``rng`` itself.
    """
    ms = bundle.modality_set
    masks = _recon_subsets(bundle.expression)
    streams = [rng] if mc_samples == 1 else rng.split(mc_samples)
    draws = {mask: [] for mask in masks}
    for stream in streams:
        for mask in masks:
            draws[mask].append(stream.normal((n, ms.latent_dim)))
    return {frozenset(ms.member_names(m)): np.stack(v) for m, v in draws.items()}


def _batch_size(bundle, batch) -> int:
    sizes = set()
    for m in bundle.modality_set.modalities:
        if m.name not in batch:
            raise KeyError(f"batch is missing modality {m.name!r}")
        x = np.asarray(batch[m.name])
        if x.ndim != 2 or x.shape[1] != m.data_dim:
            raise ValueError(f"modality {m.name!r}: expected shape (n, {m.data_dim}), got {x.shape}")
        sizes.add(x.shape[0])
    if len(sizes) != 1:
        raise ValueError(f"unequal batch sizes {sorted(sizes)}")
    return sizes.pop()


def _assemble(bundle: ModelBundle, batch, noise) -> tuple[ad.Tensor, dict[str, ad.Tensor]]:
    expr = bundle.expression
    ms = expr.modality_set
    posteriors = {}
    for mask in expr.encoder_inventory():
        try:
            posteriors[mask] = bundle.encoders[mask](batch)
        except FloatingPointError as exc:
            raise FloatingPointError(f"encoder {{{','.join(ms.member_names(mask))}}}: {exc}") from exc
    recon_z = {}
    for mask in _recon_subsets(expr):
        eps = noise[frozenset(ms.member_names(mask))]
        mu, lv = posteriors[mask]
        std = ad.exp(ad.mul(lv, 0.5))
        recon_z[mask] = [mu + std * e for e in eps]

    terms: dict[str, ad.Tensor] = {}
    objective = ad.Tensor(0.0)
    for t in expr.terms:
        try:
            value = _term_value(bundle, t, batch, posteriors, recon_z)
        except FloatingPointError as exc:
            raise FloatingPointError(f"term {expr.term_label(t)}: {exc}") from exc
        terms[expr.term_label(t)] = value
        objective = objective + value * (t.sign * float(t.coefficient))
    return objective, terms


def _term_value(bundle, t, batch, posteriors, recon_z) -> ad.Tensor:
    ms = bundle.modality_set
    mu, lv = posteriors[t.subset]
    if t.kind is TermKind.PRIOR_KL:
        value = ad.kl_standard(mu, lv).mean()
    elif t.kind is TermKind.CROSS_KL:
        mu_r, lv_r = posteriors[t.reference]
        if bundle.stop_reference_grad:
            mu_r, lv_r = ad.stop_gradient(mu_r), ad.stop_gradient(lv_r)
        value = ad.gaussian_kl(mu, lv, mu_r, lv_r).mean()
    else:
        dec = bundle.decoders[t.index]
        x = np.asarray(batch[ms.modalities[t.index].name], dtype=np.float64)
        zs = recon_z[t.subset]
        value = dec.log_likelihood(x, zs[0]).mean()
        for z in zs[1:]:
            value = value + dec.log_likelihood(x, z).mean()
        if len(zs) > 1:
            value = value * (1.0 / len(zs))
    return value


def forward_objective(bundle: ModelBundle, batch: Mapping[str, np.ndarray], rng: RngStream | None = None,
                      mc_samples: int = 1, noise: Mapping[frozenset, np.ndarray] | None = None) -> Forward:
    """Batch-averaged ELBO of the bundle's expression (to be maximised).

    ``noise`` freezes the reparameterisation draws (see :func:`draw_noise`);
    otherwise they come from ``rng``.
    """
    bundle.check_inventory()
    n = _batch_size(bundle, batch)
    if noise is None:
        if mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        noise = draw_noise(bundle, n, rng if rng is not None else RngStream(0), mc_samples)
    else:
        noise = {frozenset(k): np.asarray(v).reshape((-1, n, bundle.modality_set.latent_dim))
                 for k, v in noise.items()}
    with ad.Tape() as tape:
        objective, terms = _assemble(bundle, batch, noise)
    return Forward(objective, tape, terms)


def backward(bundle: ModelBundle, fwd: Forward) -> dict[str, np.ndarray]:
    return ad.backward(fwd.tape, fwd.objective, bundle.parameters())


# -- gradient check ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    checked: int
    failures: list = field(default_factory=list)
    errors: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return not self.failures


def relative_error(analytic, numeric, floor=1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(bundle: ModelBundle, batch, coords: int = 1000, h: float | None = None, seed: int = 0,
               mc_samples: int = 1, tol: float = 1e-4, floor: float = 1e-8, order: int = 4) -> GradCheckReport:
    """Compare backward() with central differences at random parameter coordinates.

    The reparameterisation noise is drawn once, so the sampled objective is a
    deterministic function of the parameters. ``order`` picks the classic
    two-point stencil (error O(h^2), default h 1e-5) or the four-point one
    (error O(h^4), default h 1e-3). The latter resolves gradients near 1e-7
    that roundoff swamps in the two-point estimate, but its wider reach can
    straddle a relu kink, so relu bundles are better checked with order 2.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if h is None:
        h = 1e-5 if order == 2 else 1e-3
    n = _batch_size(bundle, batch)
    rng = RngStream(seed)
    noise = draw_noise(bundle, n, rng.split(1)[0], mc_samples)
    fwd = forward_objective(bundle, batch, noise=noise)
    grads = backward(bundle, fwd)

    params = bundle.parameters()
    names = list(params)
    sizes = np.array([params[k].data.size for k in names])
    total = int(sizes.sum())
    picks = rng.generator.choice(total, size=min(coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def f():
        return _assemble(bundle, batch, noise)[0].item()

    errs, failures = [], []
    for flat in np.sort(picks):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[which], int(flat - offsets[which])
        arr = params[name].data.reshape(-1)
        orig = arr[idx]
        vals = {}
        for k in ((-2, -1, 1, 2) if order == 4 else (-1, 1)):
            arr[idx] = orig + k * h
            vals[k] = f()
        arr[idx] = orig
        if order == 4:
            numeric = (vals[-2] - 8.0 * vals[-1] + 8.0 * vals[1] - vals[2]) / (12.0 * h)
        else:
            numeric = (vals[1] - vals[-1]) / (2.0 * h)
        analytic = grads[name].reshape(-1)[idx]
        err = float(relative_error(analytic, numeric, floor))
        errs.append(err)
        if err > tol:
            failures.append((name, idx, float(analytic), float(numeric), err))
    errs = np.asarray(errs)
    return GradCheckReport(float(errs.max()) if errs.size else 0.0, len(errs), failures, errs)


# -- checkpoints -------------------------------------------------------------

def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(np.float64).reshape(shape)


def checkpoint_dict(bundle: ModelBundle) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "seed": bundle.seed,
        "hidden": list(bundle.hidden),
        "activation": bundle.activation,
        "stop_reference_grad": bundle.stop_reference_grad,
        "expression": to_dict(bundle.expression),
        "params": {name: {"shape": list(t.shape), "data": _encode(t.data)}
                   for name, t in bundle.parameters().items()},
    }


def save_checkpoint(bundle: ModelBundle, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(bundle), fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> ModelBundle:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    bundle = ModelBundle(from_dict(doc["expression"]), tuple(doc["hidden"]), doc["activation"],
                         bool(doc["stop_reference_grad"]), seed=int(doc["seed"]))
    params = bundle.parameters()
    if set(params) != set(doc["params"]):
        raise ValueError(f"{path}: parameter names do not match the expression")
    for name, rec in doc["params"].items():
        params[name].data = _decode(rec["data"], rec["shape"])
    return bundle
