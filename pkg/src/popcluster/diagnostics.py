"""Resampling checks on PCA for data with far more features than trials."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import pca as pca_mod
from .dataset import TrialMatrix


class DiagnosticsError(ValueError):
    pass


@dataclass(frozen=True)
class DiagnosticsConfig:
    sample_sizes: tuple[int, ...] = (200, 500, 1000, 1500, 2000)
    n_iter: int = 10
    top_vectors: int = 5
    test_n: int = 220
    train_sizes: tuple[int, ...] = tuple(range(100, 2001, 100))
    seed: int = 0
    # an int fixes D; a float in (0, 1] applies the variance-threshold rule
    d_rule: float | int = 0.95

    def __post_init__(self):
        if self.n_iter < 1 or self.top_vectors < 1 or self.test_n < 1:
            raise DiagnosticsError("n_iter, top_vectors and test_n must be positive")
        if any(s < 2 for s in self.sample_sizes) or any(s < 2 for s in self.train_sizes):
            raise DiagnosticsError("sample and train sizes must be >= 2")


@dataclass(frozen=True)
class ScreeCurve:
    size: int
    eigenvalues: np.ndarray


@dataclass(frozen=True)
class ConsistencyRow:
    comparison: str
    size_a: int
    iter_a: int
    vec_a: int
    size_b: int
    iter_b: int
    vec_b: int
    abs_cos: float


@dataclass(frozen=True)
class LossPoint:
    train_size: int
    d: int
    loss: float


@dataclass(frozen=True)
class Consistency:
    rows: tuple[ConsistencyRow, ...]
    matrices: dict[int, np.ndarray] = field(default_factory=dict)

    def first_vector_min(self, size: int) -> float:
        """Smallest |cos| between leading eigenvectors of different iterations at ``size``."""
        vals = [
            r.abs_cos
            for r in self.rows
            if r.comparison == "within_size" and r.size_a == size
            and r.vec_a == 0 and r.vec_b == 0 and r.iter_a < r.iter_b
        ]
        return min(vals) if vals else 1.0


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, TrialMatrix) else np.asarray(x, dtype=np.float64)


def _check_sizes(sizes, n: int) -> None:
    for s in sizes:
        if s > n:
            raise DiagnosticsError(f"sample size {s} exceeds the {n} available trials")


def eigenvalue_spread(x, cfg: DiagnosticsConfig) -> list[ScreeCurve]:
    """Scree data: all eigenvalues of a PCA fitted on one random subsample per size."""
    values = _values(x)
    _check_sizes(cfg.sample_sizes, values.shape[0])
    rng = np.random.default_rng(cfg.seed)
    out = []
    for size in cfg.sample_sizes:
        rows = rng.choice(values.shape[0], size=size, replace=False)
        out.append(ScreeCurve(size, pca_mod.fit(values[rows]).eigenvalues))
    return out


def eigenvector_consistency(x, cfg: DiagnosticsConfig) -> Consistency:
    """|cos| between the top eigenvectors of repeated subsamples.

    Within each size, every (iteration, vector) pair is compared with every
    other, giving an (n_iter * top) square matrix. Across sizes, the leading
    eigenvector of each size's first iteration is compared.
    """
    values = _values(x)
    _check_sizes(cfg.sample_sizes, values.shape[0])
    rng = np.random.default_rng(cfg.seed)
    rows, mats, leading = [], {}, {}
    for size in cfg.sample_sizes:
        top = min(cfg.top_vectors, size - 1, values.shape[1])
        vecs = []
        for _ in range(cfg.n_iter):
            sub = rng.choice(values.shape[0], size=size, replace=False)
            vecs.append(pca_mod.fit(values[sub], max_components=top).components)
        stacked = np.vstack(vecs)
        mat = np.abs(stacked @ stacked.T)
        mats[size] = mat
        leading[size] = vecs[0][0]
        for a in range(stacked.shape[0]):
            for b in range(stacked.shape[0]):
                rows.append(
                    ConsistencyRow(
                        "within_size", size, a // top, a % top, size, b // top, b % top, float(mat[a, b])
                    )
                )
    sizes = list(cfg.sample_sizes)
    for sa in sizes:
        for sb in sizes:
            rows.append(
                ConsistencyRow(
                    "across_size", sa, 0, 0, sb, 0, 0, float(abs(leading[sa] @ leading[sb]))
                )
            )
    return Consistency(tuple(rows), mats)


def reconstruction_loss_curve(x, cfg: DiagnosticsConfig) -> list[LossPoint]:
    """Held-out reconstruction error versus training-set size.

    ``cfg.test_n`` rows are held out once; the remaining rows are shuffled
    once and each training set is a prefix of that order, so larger sets
    contain the smaller ones. Loss is total squared error / (test_n * M).
    """
    values = _values(x)
    n = values.shape[0]
    if max(cfg.train_sizes) + cfg.test_n > n:
        raise DiagnosticsError(
            f"need {max(cfg.train_sizes) + cfg.test_n} rows for the largest training set "
            f"plus the test set, have {n}"
        )
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    test = values[perm[: cfg.test_n]]
    pool = perm[cfg.test_n :]
    out = []
    for size in cfg.train_sizes:
        train = values[pool[:size]]
        full = pca_mod.fit(train)
        if isinstance(cfg.d_rule, float):
            d, _ = pca_mod.select_components(full.variance_ratio, cfg.d_rule)
        else:
            d = int(cfg.d_rule)
            if d > full.d:
                raise DiagnosticsError(
                    f"D={d} exceeds the {full.d} components computable from {size} training rows"
                )
        model = full.truncate(d)
        out.append(LossPoint(size, d, pca_mod.reconstruction_error(model, test)))
    return out
