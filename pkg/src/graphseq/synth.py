"""Synthetic stochastic-block-model datasets with class-mean features.

Node features are a per-class mean (unit-norm, pairwise-orthogonal, scaled by
`separation`) plus isotropic Gaussian noise. Class description rows are the
noiseless means. Splits are stratified 60/20/20 per class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graph import Dataset, graph_from_edges
from .rng import substream


@dataclass(frozen=True)
class SynthSpec:
    n: int = 1000
    classes: int = 5
    dim: int = 32
    p_in: float = 0.02
    p_out: float = 0.002
    noise: float = 0.5
    separation: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.p_out <= self.p_in <= 1.0):
            raise ConfigError("need 0 <= p_out <= p_in <= 1")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.dim < self.classes:
            raise ConfigError("dim must be >= classes for orthogonal class means")
        if self.n < self.classes:
            raise ConfigError("n must be >= classes")


def class_means(spec: SynthSpec, seed: int) -> np.ndarray:
    """(C, d) unit-norm pairwise-orthogonal rows scaled by separation."""
    rng = substream(seed, "means")
    gauss = rng.standard_normal((spec.dim, spec.classes))
    q, _ = np.linalg.qr(gauss)
    return (q.T * spec.separation).astype(np.float32)


def generate(spec: SynthSpec, seed: int) -> Dataset:
    rng = substream(seed, "synth")
    labels = rng.permutation(np.arange(spec.n, dtype=np.int64) % spec.classes)
    means = class_means(spec, seed)
    features = means[labels] + spec.noise * rng.standard_normal((spec.n, spec.dim))
    features = features.astype(np.float32)

    # row-wise Bernoulli over the upper triangle
    us, vs = [], []
    for u in range(spec.n - 1):
        cand = np.arange(u + 1, spec.n)
        prob = np.where(labels[cand] == labels[u], spec.p_in, spec.p_out)
        hit = cand[rng.random(cand.shape[0]) < prob]
        if hit.size:
            us.append(np.full(hit.size, u, dtype=np.int64))
            vs.append(hit)
    u = np.concatenate(us) if us else np.empty(0, dtype=np.int64)
    v = np.concatenate(vs) if vs else np.empty(0, dtype=np.int64)
    graph = graph_from_edges(spec.n, u, v)

    splits = {name: np.zeros(spec.n, dtype=bool) for name in ("train", "valid", "test")}
    for c in range(spec.classes):
        nodes = rng.permutation(np.flatnonzero(labels == c))
        n_train = int(0.6 * nodes.shape[0])
        n_valid = int(0.2 * nodes.shape[0])
        splits["train"][nodes[:n_train]] = True
        splits["valid"][nodes[n_train : n_train + n_valid]] = True
        splits["test"][nodes[n_train + n_valid :]] = True

    return Dataset(
        graph=graph,
        features=features,
        labels=labels,
        splits=splits,
        class_desc=means,
        name="synth",
    )
