"""Seeded synthetic datasets: 1-D heat and advection pairs, CC triangle density, token relations.

Every sample draws from its own Philox stream keyed by ``(seed, sample index)``,
so a dataset does not depend on generation order.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .complex import CombinatorialComplex, graph_complex

VERSION = 1


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream), int(index)])))


def manifest(generator: str, params: dict, seed: int) -> dict:
    return {"generator": generator, "params": dict(params), "seed": int(seed), "version": VERSION}


@dataclass(frozen=True)
class MinMax:
    """Affine map of ``[lo, hi]`` onto ``[0, 1]``."""

    lo: float
    hi: float

    @classmethod
    def fit(cls, *arrays: np.ndarray) -> "MinMax":
        lo = min(float(a.min()) for a in arrays)
        hi = max(float(a.max()) for a in arrays)
        if hi == lo:
            hi = lo + 1.0
        return cls(lo, hi)

    def apply(self, a: np.ndarray) -> np.ndarray:
        return (a - self.lo) / (self.hi - self.lo)

    def invert(self, a: np.ndarray) -> np.ndarray:
        return a * (self.hi - self.lo) + self.lo


@dataclass
class RegressionDataset:
    """Normalized field pairs; ``norm`` maps raw values to the stored ones."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    norm: MinMax
    manifest: dict = field(default_factory=dict)
    task = "regression"

    @property
    def train(self):
        return self.x_train, self.y_train

    @property
    def test(self):
        return self.x_test, self.y_test

    def raw(self, a: np.ndarray) -> np.ndarray:
        return self.norm.invert(a)

    def to_dict(self) -> dict:
        return {
            "manifest": self.manifest,
            "task": self.task,
            "norm": {"lo": self.norm.lo, "hi": self.norm.hi},
            "x_train": self.x_train.tolist(),
            "y_train": self.y_train.tolist(),
            "x_test": self.x_test.tolist(),
            "y_test": self.y_test.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionDataset":
        arr = lambda k: np.asarray(d[k], dtype=np.float64)  # noqa: E731
        return cls(arr("x_train"), arr("y_train"), arr("x_test"), arr("y_test"), MinMax(**d["norm"]), d["manifest"])


@dataclass
class CcClassificationDataset:
    """Complexes with per-node ``(degree, triangle count)`` features and binary labels."""

    complexes: list[CombinatorialComplex]
    features: list[np.ndarray]
    labels: np.ndarray
    n_train: int
    manifest: dict = field(default_factory=dict)
    task = "cc-classification"

    @property
    def train(self):
        n = self.n_train
        return self.features[:n], self.labels[:n]

    @property
    def test(self):
        n = self.n_train
        return self.features[n:], self.labels[n:]

    def to_dict(self) -> dict:
        return {
            "manifest": self.manifest,
            "task": self.task,
            "n_train": self.n_train,
            "complexes": [c.to_dict() for c in self.complexes],
            "features": [f.tolist() for f in self.features],
            "labels": self.labels.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CcClassificationDataset":
        return cls(
            [CombinatorialComplex.from_dict(c) for c in d["complexes"]],
            [np.asarray(f, dtype=np.float64) for f in d["features"]],
            np.asarray(d["labels"], dtype=np.int64),
            int(d["n_train"]),
            d["manifest"],
        )


@dataclass
class SequenceDataset:
    """Token sequences ``(samples, length, dim)`` with binary labels."""

    x: np.ndarray
    labels: np.ndarray
    n_train: int
    manifest: dict = field(default_factory=dict)
    task = "sequence-classification"

    @property
    def train(self):
        return self.x[: self.n_train], self.labels[: self.n_train]

    @property
    def test(self):
        return self.x[self.n_train:], self.labels[self.n_train:]

    def to_dict(self) -> dict:
        return {"manifest": self.manifest, "task": self.task, "n_train": self.n_train,
                "x": self.x.tolist(), "labels": self.labels.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SequenceDataset":
        return cls(np.asarray(d["x"], dtype=np.float64), np.asarray(d["labels"], dtype=np.int64), int(d["n_train"]), d["manifest"])


_KINDS = {"regression": RegressionDataset, "cc-classification": CcClassificationDataset, "sequence-classification": SequenceDataset}


def dataset_to_json(ds) -> str:
    return json.dumps(ds.to_dict())


def dataset_from_json(text: str):
    d = json.loads(text)
    return _KINDS[d["task"]].from_dict(d)


def save_dataset(ds, path) -> None:
    with open(path, "w") as fh:
        fh.write(dataset_to_json(ds))


def load_dataset(path):
    with open(path) as fh:
        return dataset_from_json(fh.read())


# PDE pairs


def _coefficients(seed: int, n: int, modes: int) -> np.ndarray:
    return np.stack([sample_rng(seed, i).uniform(-1.0, 1.0, size=modes) for i in range(n)])


def _regression(generator, params, seed, u0, uT, n_train) -> RegressionDataset:
    norm = MinMax.fit(u0, uT)
    u0, uT = norm.apply(u0), norm.apply(uT)
    return RegressionDataset(u0[:n_train], uT[:n_train], u0[n_train:], uT[n_train:], norm, manifest(generator, params, seed))


def heat_grid(N: int) -> np.ndarray:
    return np.arange(N) / N


def heat_solution(coef: np.ndarray, x: np.ndarray, nu: float, T: float) -> tuple[np.ndarray, np.ndarray]:
    """``u0 = sum_k a_k sin(k pi x)`` and the exact heat solution at time ``T``."""
    k = np.arange(1, coef.shape[-1] + 1)
    S = np.sin(np.pi * np.outer(k, x))
    decay = np.exp(-nu * (k * np.pi) ** 2 * T)
    return coef @ S, (coef * decay) @ S


def gen_heat(n_train: int = 500, n_test: int = 100, N: int = 100, nu: float = 0.1, T: float = 0.1,
             modes: int = 10, seed: int = 0) -> RegressionDataset:
    """Heat pairs ``(u0, u_T)``; mode amplitudes are ``U(-1, 1)``."""
    params = {"n_train": n_train, "n_test": n_test, "N": N, "nu": nu, "T": T, "modes": modes, "amplitudes": "uniform(-1,1)"}
    coef = _coefficients(seed, n_train + n_test, modes)
    u0, uT = heat_solution(coef, heat_grid(N), nu, T)
    return _regression("heat", params, seed, u0, uT, n_train)


def advection_solution(coef: np.ndarray, x: np.ndarray, shift: float) -> tuple[np.ndarray, np.ndarray]:
    """``u0 = sum_k a_k sin(2 pi k x)`` on the unit circle and ``u0(x - shift)``."""
    k = np.arange(1, coef.shape[-1] + 1)
    return coef @ np.sin(2 * np.pi * np.outer(k, x)), coef @ np.sin(2 * np.pi * np.outer(k, x - shift))


def gen_advection(n_train: int = 500, n_test: int = 100, N: int = 130, c: float = 1.0, T: float = 0.1,
                  modes: int = 10, seed: int = 0) -> RegressionDataset:
    params = {"n_train": n_train, "n_test": n_test, "N": N, "c": c, "T": T, "modes": modes, "amplitudes": "uniform(-1,1)"}
    coef = _coefficients(seed, n_train + n_test, modes)
    shift = float(np.mod(c * T, 1.0))
    u0, uT = advection_solution(coef, np.arange(N) / N, shift)
    return _regression("advection", params, seed, u0, uT, n_train)


# combinatorial complexes


def _balanced_labels(seed: int, n: int, stream: int) -> np.ndarray:
    labels = np.array([0] * (n // 2) + [1] * (n - n // 2), dtype=np.int64)
    return sample_rng(seed, 0, stream).permutation(labels)


def triangles(n: int, edges) -> list[tuple[int, int, int]]:
    es = set(edges)
    return [t for t in itertools.combinations(range(n), 3) if all(p in es for p in itertools.combinations(t, 2))]


def cc_sample(rng: np.random.Generator, nodes: int, p_edge: float, q: float, noise_sigma: float):
    edges = [e for e in itertools.combinations(range(nodes), 2) if rng.random() < p_edge]
    faces = [t for t in triangles(nodes, edges) if rng.random() < q]
    deg = np.zeros(nodes)
    for a, b in edges:
        deg[a] += 1
        deg[b] += 1
    tri = np.zeros(nodes)
    for t in faces:
        tri[list(t)] += 1
    feats = np.stack([deg, tri], axis=1) + rng.normal(0.0, noise_sigma, size=(nodes, 2))
    return graph_complex(nodes, edges, faces), feats


def gen_cc_classification(n_train: int = 200, n_test: int = 50, nodes: int = 10, p_edge: float = 0.5,
                          q0: float = 0.1, q1: float = 0.5, noise_sigma: float = 0.1, seed: int = 0) -> CcClassificationDataset:
    params = {"n_train": n_train, "n_test": n_test, "nodes": nodes, "p_edge": p_edge, "q0": q0, "q1": q1, "noise_sigma": noise_sigma}
    labels = np.concatenate([_balanced_labels(seed, n_train, 1), _balanced_labels(seed, n_test, 2)])
    complexes, feats = [], []
    for i, y in enumerate(labels):
        cc, f = cc_sample(sample_rng(seed, i), nodes, p_edge, q1 if y else q0, noise_sigma)
        complexes.append(cc)
        feats.append(f)
    return CcClassificationDataset(complexes, feats, labels, n_train, manifest("cc-class", params, seed))


# token relations


def random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    """QR of a Gaussian matrix with the signs of ``diag(R)`` folded into ``Q``."""
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return Q * s


def gen_token_relation_orthogonal(n_train: int = 500, n_test: int = 100, tokens: int = 8, dim: int = 16,
                                  noise: float = 0.05, seed: int = 0) -> SequenceDataset:
    """``tokens`` head tokens followed by a tail that is a noisy copy (0) or a noisy rotation (1)."""
    params = {"n_train": n_train, "n_test": n_test, "tokens": tokens, "dim": dim, "noise": noise}
    labels = np.concatenate([_balanced_labels(seed, n_train, 1), _balanced_labels(seed, n_test, 2)])
    xs = np.zeros((len(labels), 2 * tokens, dim))
    for i, y in enumerate(labels):
        rng = sample_rng(seed, i)
        head = rng.standard_normal((tokens, dim))
        tail = head @ random_orthogonal(rng, dim).T if y else head
        xs[i, :tokens] = head
        xs[i, tokens:] = tail + noise * rng.standard_normal((tokens, dim))
    return SequenceDataset(xs, labels, n_train, manifest("token-rel", params, seed))


GENERATORS: dict[str, Any] = {
    "heat": gen_heat,
    "advection": gen_advection,
    "cc-class": gen_cc_classification,
    "token-rel": gen_token_relation_orthogonal,
}
