"""Seeded synthetic classification tasks standing in for image datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("gaussian-blobs", "concentric", "grid-patterns")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "gaussian-blobs"
    n_classes: int = 10
    input_dim: int = 16
    samples_per_class: int = 200
    val_per_class: int = 100
    seed: int = 0
    cluster_std: float = 1.0
    separation: float = 5.0
    blobs_per_class: int = 1
    standardize: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.n_classes < 2 or self.input_dim < 1:
            raise ValueError("need n_classes >= 2 and input_dim >= 1")
        if self.samples_per_class < 1 or self.val_per_class < 1:
            raise ValueError("need at least one train and one validation sample per class")
        if self.blobs_per_class < 1:
            raise ValueError("blobs_per_class must be >= 1")
        if self.cluster_std <= 0 or self.separation <= 0:
            raise ValueError("cluster_std and separation must be positive")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


def blob_centers(n_classes, dim, min_distance, rng, max_tries=10_000) -> np.ndarray:
    """Centers with every pairwise distance >= ``min_distance`` (rejection sampling)."""
    scale = min_distance / np.sqrt(2.0 * dim) * 1.25
    centers = []
    tries = 0
    while len(centers) < n_classes:
        c = rng.normal(0.0, scale, dim)
        if all(np.linalg.norm(c - o) >= min_distance for o in centers):
            centers.append(c)
        tries += 1
        if tries > max_tries:
            scale *= 1.1
            tries = 0
    return np.array(centers)


def _sample(spec: DatasetSpec, rng, per_class, protos):
    k, d, s = spec.n_classes, spec.input_dim, spec.cluster_std
    X = np.empty((k * per_class, d))
    y = np.repeat(np.arange(k), per_class)
    for c in range(k):
        rows = slice(c * per_class, (c + 1) * per_class)
        if spec.kind == "concentric":
            u = rng.standard_normal((per_class, d))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            r = protos[c] + s * rng.standard_normal((per_class, 1))
            X[rows] = u * r
        elif protos.ndim == 3:
            which = rng.integers(0, protos.shape[1], per_class)
            X[rows] = protos[c][which] + s * rng.standard_normal((per_class, d))
        else:
            X[rows] = protos[c] + s * rng.standard_normal((per_class, d))
    return X, y


def make_dataset(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Class-balanced, disjoint train/validation sets, deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    k, d = spec.n_classes, spec.input_dim
    if spec.kind == "gaussian-blobs":
        b = spec.blobs_per_class
        protos = blob_centers(k * b, d, spec.separation * spec.cluster_std, rng)
        if b > 1:
            protos = protos.reshape(k, b, d)
    elif spec.kind == "concentric":
        protos = spec.separation * spec.cluster_std * (np.arange(k) + 1.0)
    else:
        if k > 2**d:
            raise ValueError("too many classes for distinct sign patterns")
        pats = set()
        protos = []
        while len(protos) < k:
            p = tuple(rng.choice([-1.0, 1.0], size=d))
            if p not in pats:
                pats.add(p)
                protos.append(p)
        protos = np.array(protos) * spec.separation * spec.cluster_std / 2.0
    Xtr, ytr = _sample(spec, rng, spec.samples_per_class, protos)
    Xva, yva = _sample(spec, rng, spec.val_per_class, protos)
    if spec.standardize:
        mu = Xtr.mean(axis=0)
        sd = Xtr.std(axis=0)
        sd[sd == 0] = 1.0
        Xtr = (Xtr - mu) / sd
        Xva = (Xva - mu) / sd
    perm = rng.permutation(len(ytr))
    return Dataset(Xtr[perm], ytr[perm]), Dataset(Xva, yva)


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    classes = np.unique(train.y)
    cents = np.array([train.X[train.y == c].mean(axis=0) for c in classes])
    d = ((test.X[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    return float((classes[d.argmin(axis=1)] == test.y).mean())
