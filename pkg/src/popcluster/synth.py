"""Synthetic trial matrices with planted cluster structure."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .dataset import TrialMatrix
from .selection import rand_index

MAX_REJECTIONS = 10_000


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings. Defaults are this package's own choices, tuned so
    the 95%-variance PCA rule keeps about ``d_low`` components."""

    k_true: int = 3
    n: int = 600
    d_low: int = 5
    m: int = 200
    separation: float = 10.0
    within_sd: float = 1.0
    noise_sd: float = 0.1
    weights: Optional[tuple[float, ...]] = None
    seed: int = 0

    def __post_init__(self):
        if self.k_true < 1:
            raise SynthError("k_true must be >= 1")
        if self.n < 10 * self.k_true:
            raise SynthError(f"n must be >= 10 * k_true = {10 * self.k_true}")
        if not 1 <= self.d_low <= self.m:
            raise SynthError("need 1 <= d_low <= m")
        if self.separation < 0 or self.within_sd <= 0 or self.noise_sd < 0:
            raise SynthError("separation, within_sd and noise_sd must be nonnegative (within_sd > 0)")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.k_true,) or (w < 0).any() or abs(w.sum() - 1) > 1e-9:
                raise SynthError("weights must be a simplex vector of length k_true")

    def weight_vector(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.k_true, 1.0 / self.k_true)
        return np.asarray(self.weights, dtype=float)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SynthData:
    x: TrialMatrix
    true_labels: np.ndarray
    spec: SynthSpec
    latent_means: np.ndarray
    embedding: np.ndarray
    latent: np.ndarray


def _latent_means(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    # Candidates are drawn with per-coordinate sd equal to the required
    # distance, so typical pairwise gaps are about sqrt(2 d_low) times it.
    min_dist = spec.separation * spec.within_sd
    scale = max(min_dist, spec.within_sd)
    for _ in range(MAX_REJECTIONS):
        mu = rng.standard_normal((spec.k_true, spec.d_low)) * scale
        if spec.k_true == 1:
            return mu
        diff = mu[:, None, :] - mu[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=-1))
        if dist[np.triu_indices(spec.k_true, 1)].min() >= min_dist:
            return mu
    raise SynthError(
        f"could not place {spec.k_true} means {min_dist:g} apart after {MAX_REJECTIONS} "
        "draws; lower the separation or raise d_low"
    )


def generate(spec: SynthSpec) -> SynthData:
    rng = np.random.default_rng(spec.seed)
    means = _latent_means(spec, rng)
    labels = rng.choice(spec.k_true, size=spec.n, p=spec.weight_vector())
    latent = means[labels] + spec.within_sd * rng.standard_normal((spec.n, spec.d_low))
    q, r = np.linalg.qr(rng.standard_normal((spec.m, spec.d_low)))
    q = q * np.sign(np.diag(r))  # Haar-distributed orthonormal columns
    x = latent @ q.T
    if spec.noise_sd > 0:
        x = x + spec.noise_sd * rng.standard_normal((spec.n, spec.m))
    width = len(str(spec.n - 1))
    ids = tuple(f"t{i:0{width}d}" for i in range(spec.n))
    return SynthData(TrialMatrix(ids, x), labels, spec, means, q, latent)


@dataclass(frozen=True)
class OracleReport:
    k_match: bool
    rand_vs_truth: float
    chosen_k: int
    k_true: int


def oracle_check(data: SynthData, chosen_k: int, labels) -> OracleReport:
    labels = np.asarray(labels)
    if labels.shape != data.true_labels.shape:
        raise SynthError(f"{labels.size} labels for {data.true_labels.size} trials")
    return OracleReport(
        chosen_k == data.spec.k_true,
        rand_index(data.true_labels, labels),
        int(chosen_k),
        data.spec.k_true,
    )
