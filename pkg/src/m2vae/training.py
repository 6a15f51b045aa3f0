"""Adam training loop, metrics CSV and cross-modal evaluation."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compiler import ExpansionError, Likelihood, Variant, expand
from .data import Dataset
from .distributions import RngStream
from .nets import InventoryError, ModelBundle, backward, build_bundle, forward_objective, save_checkpoint

log = logging.getLogger(__name__)

SEED_ENV = "M2VAE_SEED"


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def default_seed(fallback: int = 0) -> int:
    """Seed from the environment override, else ``fallback``."""
    value = os.environ.get(SEED_ENV)
    return int(value) if value not in (None, "") else fallback


@dataclass
class TrainConfig:
    """Every field has a default; a JSON config only lists what it overrides.

    ``steps`` (when set) replaces the ``epochs`` budget. ``dataset`` is a file
    written by ``generate``; ``synthetic`` is an inline SyntheticSpec used when
    no dataset file is given. Relative paths written in a config file resolve
    against that file's directory.
    """

    variant: str = "m2vae"
    latent_dim: int = 2
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    steps: int | None = None
    mc_samples: int = 1
    seed: int = field(default_factory=default_seed)
    stop_reference_grad: bool = False
    holdout_fraction: float = 0.1
    eval_every: int = 100
    checkpoint: str = "checkpoint.json"
    metrics: str = "metrics.csv"
    plot: bool = False
    dataset: str | None = None
    synthetic: dict | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        try:
            Variant(self.variant)
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}") from None
        positive = {"latent_dim": self.latent_dim, "batch_size": self.batch_size,
                    "epochs": self.epochs, "mc_samples": self.mc_samples, "eval_every": self.eval_every,
                    "eps": self.eps}
        for name, value in positive.items():
            if not value > 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be positive")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must lie in (0, 1)")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        cfg = cls.from_dict(doc)
        base = Path(path).resolve().parent
        # only paths written in the file; defaults stay relative to --out-dir
        for attr in ("checkpoint", "metrics", "dataset"):
            value = getattr(cfg, attr)
            if attr in doc and value is not None and not os.path.isabs(value):
                setattr(cfg, attr, str(base / value))
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads, maximize=True):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name] if maximize else -grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            # ascent on the ELBO
            p.data = p.data + self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def build_for(config: TrainConfig, dataset: Dataset) -> ModelBundle:
    try:
        expr = expand(config.variant, dataset.modality_set(config.latent_dim))
    except ExpansionError as exc:
        raise ConfigError(str(exc)) from exc
    return build_bundle(expr, config.hidden, config.activation, config.seed, config.stop_reference_grad)


# -- evaluation ----------------------------------------------------------------

def evaluate_cross_modal(bundle: ModelBundle, dataset: Dataset, source, target: str, rng=None) -> float:
    """Encode ``source`` modalities, decode ``target`` from the posterior mean.

    Returns mean squared error for Gaussian targets and mean binary
    cross-entropy (nats per entry) for Bernoulli targets. ``rng`` is unused:
    the posterior mean makes the evaluation deterministic.
    """
    names = tuple(source) if not isinstance(source, str) else tuple(source.split(","))
    encoder = bundle.encoder_for(names)
    ms = bundle.modality_set
    idx = ms.index(target)
    if idx not in bundle.decoders:
        raise InventoryError(f"decoder not in inventory: {target}")
    mu, _ = encoder(dataset.arrays)
    decoder = bundle.decoders[idx]
    x = dataset.arrays[target]
    if decoder.modality.likelihood is Likelihood.BERNOULLI:
        logits = decoder(mu)["logits"].data
        return float(np.mean(np.logaddexp(0.0, logits) - x * logits))
    return float(np.mean((decoder.predict(mu) - x) ** 2))


def cross_modal_pairs(bundle: ModelBundle) -> list[tuple[tuple[str, ...], str]]:
    ms = bundle.modality_set
    return [(ms.member_names(mask), ms.modalities[i].name)
            for mask in sorted(bundle.encoders) for i in sorted(bundle.decoders)]


def pair_label(source, target) -> str:
    return f"{{{','.join(source)}}}->{target}"


def cross_modal_report(bundle: ModelBundle, dataset: Dataset) -> dict[str, float]:
    return {pair_label(s, t): evaluate_cross_modal(bundle, dataset, s, t) for s, t in cross_modal_pairs(bundle)}


# -- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    bundle: ModelBundle
    metrics_path: str | None
    checkpoint_path: str | None
    history: list[dict] = field(default_factory=list)
    columns: list[str] = field(default_factory=list)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _batches(n: int, batch_size: int, rng: RngStream):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def train(config: TrainConfig, dataset: Dataset, out_dir=None, bundle: ModelBundle | None = None) -> TrainResult:
    """Maximise the compiled ELBO with Adam; one metrics row per step."""
    train_set, held_out = dataset.split(config.holdout_fraction)
    if bundle is None:
        bundle = build_for(config, dataset)
    expr = bundle.expression
    term_cols = [expr.term_label(t) for t in expr.terms]
    eval_pairs = cross_modal_pairs(bundle)
    eval_cols = ["eval:" + pair_label(s, t) for s, t in eval_pairs]
    columns = ["step", "epoch", "objective", *term_cols, *eval_cols]

    def resolve(p):
        if p is None:
            return None
        return str(Path(out_dir) / p) if out_dir is not None and not os.path.isabs(p) else p

    metrics_path, ckpt_path = resolve(config.metrics), resolve(config.checkpoint)
    for p in (metrics_path, ckpt_path):
        if p:
            Path(p).parent.mkdir(parents=True, exist_ok=True)

    batch_rng, noise_rng = RngStream(config.seed).split(2)
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    params = bundle.parameters()
    total = config.steps if config.steps is not None else \
        config.epochs * -(-train_set.n // config.batch_size)
    history = []

    fh = open(metrics_path, "w", newline="", encoding="utf-8") if metrics_path else None
    try:
        writer = csv.writer(fh, lineterminator="\n") if fh else None
        if writer:
            writer.writerow(columns)
        step, epoch = 0, 0
        while step < total:
            epoch += 1
            for idx in _batches(train_set.n, config.batch_size, batch_rng):
                if step >= total:
                    break
                step += 1
                try:
                    fwd = forward_objective(bundle, train_set.rows(idx), noise_rng, config.mc_samples)
                except FloatingPointError as exc:
                    raise TrainingError(f"step {step}: non-finite objective ({exc})") from exc
                grads = backward(bundle, fwd)
                row = {"step": step, "epoch": epoch, "objective": fwd.objective.item()}
                row.update({k: v.item() for k, v in fwd.terms.items()})
                opt.step(params, grads)
                if step % config.eval_every == 0 or step == total:
                    for (s, t), col in zip(eval_pairs, eval_cols):
                        row[col] = evaluate_cross_modal(bundle, held_out, s, t)
                history.append(row)
                if writer:
                    writer.writerow([row["step"], row["epoch"]] + [_fmt(row.get(c)) for c in columns[2:]])
    finally:
        if fh:
            fh.close()

    if ckpt_path:
        save_checkpoint(bundle, ckpt_path)
    if config.plot and metrics_path:
        from .plotting import plot_metrics
        plot_metrics(metrics_path, str(Path(metrics_path).with_suffix(".png")))
    log.info("trained %s for %d steps", expr.variant.value, total)
    return TrainResult(bundle, metrics_path, ckpt_path, history, columns)


def read_metrics(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = [{k: (float(v) if v != "" else None) for k, v in r.items()} for r in reader]
        return list(reader.fieldnames), rows


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        raise ValueError("series shorter than the smoothing window")
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window
