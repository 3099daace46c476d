"""Cluster-interpretation metrics: trial overlap, rating NMI, and cosine
similarity of back-projected cluster means."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import pca as pca_mod
from .gmm import GmmFit, Posterior, hard_assign

VARIANCE_FLOOR = 1e-8
OVERLAP_THRESHOLDS = (20.0, 40.0, 60.0, 80.0)
COSINE_THRESHOLDS = (0.2, 0.4, 0.6, 0.8)


class InterpretError(ValueError):
    pass


@dataclass(frozen=True)
class Clustering:
    subject_id: str
    trial_ids: tuple[str, ...]
    labels: np.ndarray
    k: int
    posterior: Posterior | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (len(self.trial_ids),):
            raise InterpretError("one label per trial required")
        if labels.size and (labels.min() < 0 or labels.max() >= self.k):
            raise InterpretError(f"labels must lie in [0, {self.k})")
        if self.posterior is not None:
            if self.posterior.resp.shape != (labels.size, self.k):
                raise InterpretError("posterior shape does not match labels")
            if not np.array_equal(hard_assign(self.posterior), labels):
                raise InterpretError("labels must equal the hard assignment of the posterior")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "trial_ids", tuple(self.trial_ids))

    @classmethod
    def from_posterior(cls, subject_id: str, trial_ids, posterior: Posterior) -> "Clustering":
        return cls(subject_id, tuple(trial_ids), hard_assign(posterior), posterior.k, posterior)

    def members(self, c: int) -> frozenset[str]:
        return frozenset(t for t, lab in zip(self.trial_ids, self.labels) if lab == c)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def reorder(self, trial_ids: Sequence[str]) -> "Clustering":
        """Restrict and reorder to ``trial_ids`` (all of which must be present)."""
        pos = {t: i for i, t in enumerate(self.trial_ids)}
        try:
            idx = np.array([pos[t] for t in trial_ids], dtype=np.intp)
        except KeyError as exc:
            raise InterpretError(f"trial {exc.args[0]} not clustered for {self.subject_id}") from None
        post = None if self.posterior is None else Posterior(self.posterior.resp[idx])
        return Clustering(self.subject_id, tuple(trial_ids), self.labels[idx], self.k, post)


# -- trial overlap ---------------------------------------------------------


def percent_overlap(a, b) -> float:
    """Dice-style overlap of two trial sets: 2|A & B| / (|A| + |B|) * 100."""
    a, b = set(a), set(b)
    if not a or not b:
        raise InterpretError("percent_overlap needs two nonempty sets")
    return 2.0 * len(a & b) / (len(a) + len(b)) * 100.0


@dataclass(frozen=True)
class OverlapMatrix:
    index: tuple[tuple[str, int], ...]
    values: np.ndarray
    across_mean: float
    across_sd: float
    thresholds: dict[float, np.ndarray] = field(default_factory=dict)

    def across_subject_mask(self) -> np.ndarray:
        subj = np.array([s for s, _ in self.index])
        return subj[:, None] != subj[None, :]


def overlap_matrix(clusterings: Sequence[Clustering]) -> OverlapMatrix:
    """Pairwise percent overlap between every nonempty cluster of every subject.

    Clusters that received no trials are left out of the index. Summary
    statistics cover across-subject pairs only (SD uses ddof=1).
    """
    if not clusterings:
        raise InterpretError("no clusterings")
    universe = set(clusterings[0].trial_ids)
    for c in clusterings[1:]:
        if set(c.trial_ids) != universe:
            raise InterpretError(
                f"trial universe of {c.subject_id} differs from {clusterings[0].subject_id}"
            )
    index, sets = [], []
    for cl in clusterings:
        for c in range(cl.k):
            members = cl.members(c)
            if members:
                index.append((cl.subject_id, c))
                sets.append(members)
    n = len(index)
    values = np.zeros((n, n))
    for i in range(n):
        values[i, i] = 100.0
        for j in range(i + 1, n):
            values[i, j] = values[j, i] = percent_overlap(sets[i], sets[j])
    out = OverlapMatrix(tuple(index), values, math.nan, math.nan)
    across = values[np.triu(out.across_subject_mask(), 1)]
    mean = float(across.mean()) if across.size else math.nan
    sd = float(across.std(ddof=1)) if across.size > 1 else math.nan
    masks = {t: values > t for t in OVERLAP_THRESHOLDS}
    return OverlapMatrix(tuple(index), values, mean, sd, masks)


# -- information measures --------------------------------------------------


def kl_gaussian_univariate(mu1: float, var1: float, mu0: float, var0: float) -> float:
    """KL( N(mu1, var1) || N(mu0, var0) ) in nats."""
    if var1 <= 0 or var0 <= 0:
        raise InterpretError("variances must be positive")
    return 0.5 * math.log(var0 / var1) + (var1 + (mu1 - mu0) ** 2) / (2.0 * var0) - 0.5


@dataclass(frozen=True)
class GaussianNmi:
    nmi: float
    mi: float
    h_y: float
    clusters: tuple[int, ...]
    kl: tuple[float, ...]
    sizes: tuple[int, ...]
    clipped: bool


def gaussian_nmi_detail(rating, labels, variance_floor: float = VARIANCE_FLOOR) -> GaussianNmi:
    """Information a cluster assignment carries about a continuous rating,
    under Gaussian marginal and per-cluster conditional distributions.

    MI is the size-weighted mean KL from each cluster's rating distribution
    to the marginal one; dividing by the cluster-assignment entropy gives a
    value clipped to [0, 1]. Only clusters that contain trials take part.
    """
    x = np.asarray(rating, dtype=np.float64)
    if isinstance(labels, Clustering):
        labels = labels.labels
    labels = np.asarray(labels)
    if x.shape != labels.shape or x.ndim != 1:
        raise InterpretError("rating and labels must be equal-length vectors")
    if x.size == 0:
        raise InterpretError("no trials")
    n = x.size
    clusters, inverse, sizes = np.unique(labels, return_inverse=True, return_counts=True)
    mu0 = float(x.mean())
    var0 = max(float(x.var()), variance_floor)
    kls = []
    for j in range(len(clusters)):
        xc = x[inverse == j]
        kls.append(kl_gaussian_univariate(float(xc.mean()), max(float(xc.var()), variance_floor), mu0, var0))
    p = sizes / n
    mi = float(np.dot(p, kls))
    h_y = float(-np.dot(p, np.log(p)))
    if len(clusters) < 2 or h_y <= 0:
        nmi, clipped = 0.0, False
    else:
        raw = mi / h_y
        nmi = min(max(raw, 0.0), 1.0)
        clipped = nmi != raw
    return GaussianNmi(
        nmi, mi, h_y, tuple(int(c) for c in clusters), tuple(kls), tuple(int(s) for s in sizes), clipped
    )


def gaussian_nmi(rating, clustering, variance_floor: float = VARIANCE_FLOOR) -> float:
    return gaussian_nmi_detail(rating, clustering, variance_floor).nmi


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def discrete_nmi(a, b, normalization: str = "arithmetic") -> float:
    """Normalized mutual information between two discrete labelings.

    ``arithmetic`` divides MI by the mean of H(a) and H(b); ``h_y`` divides
    by H(b), the entropy of the clustering passed second. A zero normalizer
    gives 0.
    """
    return discrete_nmi_detail(a, b, normalization)[0]


def discrete_nmi_detail(a, b, normalization: str = "arithmetic") -> tuple[float, float, float]:
    """``(nmi, mi, normalizer)`` for :func:`discrete_nmi`."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise InterpretError("label vectors must have equal length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    n = a.size
    pij = table / n
    pi = pij.sum(axis=1, keepdims=True)
    pj = pij.sum(axis=0, keepdims=True)
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / (pi @ pj)[nz])).sum())
    mi = max(mi, 0.0)
    ha, hb = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if normalization == "arithmetic":
        norm = 0.5 * (ha + hb)
    elif normalization == "h_y":
        norm = hb
    else:
        raise InterpretError(f"unknown normalization {normalization!r}")
    if norm <= 0:
        return 0.0, mi, norm
    return min(mi / norm, 1.0), mi, norm


# -- cluster means ---------------------------------------------------------


@dataclass(frozen=True)
class CosineMatrix:
    index: tuple[tuple[str, int], ...]
    values: np.ndarray
    undefined: tuple[tuple[str, int], ...]
    within_mean: float
    between_mean: float
    thresholds: dict[float, np.ndarray] = field(default_factory=dict)


def back_projected_means(fit: GmmFit, model: pca_mod.PcaModel) -> np.ndarray:
    if fit.params.dim != model.d:
        raise InterpretError(f"fit dimension {fit.params.dim} != PCA dimension {model.d}")
    return pca_mod.inverse_transform(model, fit.params.means)


def cosine_matrix(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise cosine similarity; rows with zero norm yield NaN and are flagged."""
    norms = np.linalg.norm(vectors, axis=1)
    ok = norms > 0
    unit = np.zeros_like(vectors)
    unit[ok] = vectors[ok] / norms[ok, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim[~ok, :] = np.nan
    sim[:, ~ok] = np.nan
    np.fill_diagonal(sim, np.where(ok, 1.0, np.nan))
    return sim, ~ok


def cluster_means_cosine(
    fits: dict[str, GmmFit],
    pcas: dict[str, pca_mod.PcaModel],
    mask=None,
    clusters: dict[str, Sequence[int]] | None = None,
) -> CosineMatrix:
    """Cosine similarity between every pair of cluster means, mapped back to
    feature space. ``mask`` restricts the comparison to a feature subset;
    ``clusters`` optionally limits which components of each subject enter."""
    index, rows = [], []
    for subject, fit in fits.items():
        means = back_projected_means(fit, pcas[subject])
        if mask is not None:
            idx = np.asarray(mask, dtype=np.intp)
            if idx.size == 0 or idx.min() < 0 or idx.max() >= means.shape[1]:
                raise InterpretError("mask indices out of range")
            means = means[:, idx]
        keep = range(fit.k) if clusters is None else clusters[subject]
        for c in keep:
            index.append((subject, int(c)))
            rows.append(means[c])
    if not rows:
        raise InterpretError("no cluster means")
    sim, bad = cosine_matrix(np.vstack(rows))
    subj = np.array([s for s, _ in index])
    same = subj[:, None] == subj[None, :]
    upper = np.triu(np.ones_like(same), 1) & ~np.isnan(sim)
    within = sim[upper & same]
    between = sim[upper & ~same]
    return CosineMatrix(
        tuple(index),
        sim,
        tuple(ix for ix, b in zip(index, bad) if b),
        float(within.mean()) if within.size else math.nan,
        float(between.mean()) if between.size else math.nan,
        {t: sim > t for t in COSINE_THRESHOLDS},
    )


# -- top-rated labels ------------------------------------------------------


@dataclass(frozen=True)
class LabelDistribution:
    column_names: tuple[str, ...]
    top_label: np.ndarray
    counts: np.ndarray  # K x R
    never_top: tuple[str, ...]


def top_label_distribution(values, column_names: Sequence[str], clustering) -> LabelDistribution:
    """Give each trial its highest-rated column (lowest index wins ties)
    and histogram those labels within each cluster."""
    values = np.asarray(values, dtype=np.float64)
    labels = clustering.labels if isinstance(clustering, Clustering) else np.asarray(clustering)
    k = clustering.k if isinstance(clustering, Clustering) else int(labels.max()) + 1
    if values.shape != (labels.size, len(column_names)):
        raise InterpretError("ratings must be N x R with one row per clustered trial")
    top = np.argmax(values, axis=1)
    counts = np.zeros((k, len(column_names)), dtype=np.int64)
    np.add.at(counts, (labels, top), 1)
    never = tuple(name for j, name in enumerate(column_names) if counts[:, j].sum() == 0)
    return LabelDistribution(tuple(column_names), top, counts, never)
