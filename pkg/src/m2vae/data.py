"""Synthetic multi-modal datasets and their on-disk format.

File layout: one JSON header line, then for each modality (header order) the
row-major little-endian float64 payload of its ``n x dim`` sample matrix.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .compiler import Likelihood, Modality, ModalitySet
from .distributions import RngStream
from .oracles import LinearGaussianModel

DATASET_FORMAT = "m2vae-dataset/1"
GENERATORS = ("shared_latent_linear", "cluster_bits")


@dataclass
class SyntheticSpec:
    generator: str = "shared_latent_linear"
    dims: dict[str, int] = field(default_factory=lambda: {"a": 4, "b": 4})
    latent_dim: int = 2
    noise: float | dict[str, float] = 0.1
    n_samples: int = 2000
    seed: int = 0
    n_clusters: int = 4

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}")
        if not self.dims or any(int(d) < 1 for d in self.dims.values()):
            raise ValueError("every modality needs a positive dimension")
        if self.n_samples < 1 or self.latent_dim < 1 or self.n_clusters < 1:
            raise ValueError("n_samples, latent_dim and n_clusters must be positive")

    def noise_for(self, name: str) -> float:
        return float(self.noise[name] if isinstance(self.noise, dict) else self.noise)

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        return cls(**doc)


@dataclass
class Dataset:
    modalities: tuple[Modality, ...]
    arrays: dict[str, np.ndarray]
    seed: int = 0
    generator: str = ""
    model: LinearGaussianModel | None = None

    @property
    def n(self) -> int:
        return next(iter(self.arrays.values())).shape[0]

    def modality_set(self, latent_dim: int) -> ModalitySet:
        return ModalitySet(self.modalities, latent_dim)

    def rows(self, idx) -> dict[str, np.ndarray]:
        return {k: v[idx] for k, v in self.arrays.items()}

    def split(self, holdout_fraction: float) -> tuple["Dataset", "Dataset"]:
        """Head/tail split; samples are iid so the tail is a fair held-out set."""
        n_test = int(round(self.n * holdout_fraction))
        if not 0 < n_test < self.n:
            raise ValueError(f"holdout fraction {holdout_fraction} leaves an empty split")
        cut = self.n - n_test
        mk = lambda sl: Dataset(self.modalities, self.rows(sl), self.seed, self.generator, self.model)
        return mk(slice(0, cut)), mk(slice(cut, None))


def generate(spec: SyntheticSpec) -> Dataset:
    """Draw one shared latent per sample and emit every modality from it."""
    names = sorted(spec.dims)
    param_rng, sample_rng = RngStream(spec.seed).split(2)
    if spec.generator == "shared_latent_linear":
        weights = {n: param_rng.normal((spec.dims[n], spec.latent_dim)) for n in names}
        biases = {n: 0.5 * param_rng.normal(spec.dims[n]) for n in names}
        z = sample_rng.normal((spec.n_samples, spec.latent_dim))
        arrays = {}
        for n in names:
            eps = sample_rng.normal((spec.n_samples, spec.dims[n]))
            arrays[n] = z @ weights[n].T + biases[n] + spec.noise_for(n) * eps
        model = LinearGaussianModel(weights, biases, {n: spec.noise_for(n) ** 2 for n in names})
        mods = tuple(Modality(n, spec.dims[n], Likelihood.GAUSSIAN) for n in names)
        return Dataset(mods, arrays, spec.seed, spec.generator, model)

    protos = {n: (param_rng.uniform(0, 1, (spec.n_clusters, spec.dims[n])) < 0.5) for n in names}
    cluster = sample_rng.integers(spec.n_clusters, spec.n_samples)
    arrays = {}
    for n in names:
        flips = sample_rng.uniform(0, 1, (spec.n_samples, spec.dims[n])) < spec.noise_for(n)
        arrays[n] = (protos[n][cluster] ^ flips).astype(np.float64)
    mods = tuple(Modality(n, spec.dims[n], Likelihood.BERNOULLI) for n in names)
    return Dataset(mods, arrays, spec.seed, spec.generator, None)


def save_dataset(ds: Dataset, path) -> None:
    header = {
        "format": DATASET_FORMAT,
        "generator": ds.generator,
        "seed": ds.seed,
        "n": ds.n,
        "modalities": [{"name": m.name, "dim": m.data_dim, "likelihood": m.likelihood.value}
                       for m in ds.modalities],
        "model": ds.model.to_dict() if ds.model is not None else None,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for m in ds.modalities:
            fh.write(np.ascontiguousarray(ds.arrays[m.name], dtype="<f8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not a {DATASET_FORMAT} file")
        n = int(header["n"])
        mods, arrays = [], {}
        for rec in header["modalities"]:
            m = Modality(rec["name"], rec["dim"], rec["likelihood"])
            nbytes = 8 * n * m.data_dim
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise ValueError(f"{path}: truncated payload for modality {m.name!r}")
            arrays[m.name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(n, m.data_dim)
            mods.append(m)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after payload")
    model = LinearGaussianModel.from_dict(header["model"]) if header.get("model") else None
    return Dataset(tuple(mods), arrays, int(header["seed"]), header["generator"], model)
