"""Principal component analysis by SVD of the centered data matrix."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DataError, TrialMatrix, read_block, write_block


class PcaError(ValueError):
    pass


@dataclass(frozen=True)
class PcaModel:
    """A fitted projection ``x -> y = (x - mean) @ components.T``.

    ``eigenvalues`` use the unbiased (N - 1) denominator; ``variance_ratio``
    is relative to the total variance of the fitted data, so it sums to 1
    only when every computable component is kept.
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    variance_ratio: np.ndarray
    total_variance: float
    n_fit: int

    @property
    def m(self) -> int:
        return self.components.shape[1]

    @property
    def d(self) -> int:
        return self.components.shape[0]

    def truncate(self, d: int) -> "PcaModel":
        if not 1 <= d <= self.d:
            raise PcaError(f"cannot truncate {self.d} components to {d}")
        return PcaModel(
            self.mean,
            self.components[:d],
            self.eigenvalues[:d],
            self.variance_ratio[:d],
            self.total_variance,
            self.n_fit,
        )


def _canonical_order(x: np.ndarray) -> np.ndarray:
    # Sorting rows by fixed random projections makes the fit independent of
    # input row order bit for bit (distinct rows tie with probability zero).
    probes = np.random.default_rng(0x5CA1AB1E).standard_normal((x.shape[1], 2))
    keys = x @ probes
    return np.lexsort((keys[:, 1], keys[:, 0]))


def sign_flip(components: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive (first index wins ties)."""
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def fit(x, max_components: int | None = None) -> PcaModel:
    """Fit PCA on the rows of ``x`` (a TrialMatrix or 2-D array).

    ``max_components=None`` keeps every computable component,
    ``min(N - 1, M)`` of them.
    """
    values = x.values if isinstance(x, TrialMatrix) else np.asarray(x, dtype=np.float64)
    if values.ndim != 2:
        raise PcaError("data must be 2-D")
    n, m = values.shape
    if n < 2:
        raise PcaError(f"PCA needs at least 2 rows, got {n}")
    limit = min(n - 1, m)
    if max_components is None:
        max_components = limit
    if not 1 <= max_components <= limit:
        raise PcaError(f"max_components must be in [1, {limit}], got {max_components}")

    values = values[_canonical_order(values)]
    mean = values.mean(axis=0)
    centered = values - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    eig = s**2 / (n - 1)
    total = float(eig.sum())
    if total <= 0.0 or not np.isfinite(total):
        raise PcaError("zero-variance data: all rows are identical")

    d = max_components
    components = sign_flip(vt[:d])
    eig = eig[:d]
    model = PcaModel(
        mean=mean,
        components=components,
        eigenvalues=eig,
        variance_ratio=eig / total,
        total_variance=total,
        n_fit=n,
    )
    for a in (model.mean, model.components, model.eigenvalues, model.variance_ratio):
        a.setflags(write=False)
    return model


def select_components(variance_ratio, threshold: float = 0.95) -> tuple[int, bool]:
    """Smallest D whose cumulative explained variance reaches ``threshold``.

    Returns ``(d, reached)``; when the threshold is never reached, ``d`` is
    the vector length and ``reached`` is False.
    """
    ratio = np.asarray(variance_ratio, dtype=np.float64)
    if ratio.size == 0:
        raise PcaError("empty variance_ratio")
    if not 0.0 < threshold <= 1.0:
        raise PcaError(f"threshold must be in (0, 1], got {threshold}")
    if (ratio < 0).any() or ratio.sum() > 1.0 + 1e-8:
        raise PcaError("variance_ratio must be nonnegative and sum to at most 1")
    cum = np.cumsum(ratio)
    hit = np.flatnonzero(cum >= threshold - 1e-12)
    if hit.size == 0:
        return ratio.size, False
    return int(hit[0]) + 1, True


def shared_dimension(per_subject: list[int], mode: str = "max") -> list[int]:
    """Resolve the component count per subject: ``max`` shares the largest
    per-subject D with everyone; ``per-subject`` keeps each subject's own."""
    if not per_subject:
        raise PcaError("no subjects")
    if mode in ("max", "max-over-subjects"):
        return [max(per_subject)] * len(per_subject)
    if mode == "per-subject":
        return list(per_subject)
    raise PcaError(f"unknown shared_d_mode {mode!r}")


def _as_array(x) -> np.ndarray:
    return x.values if isinstance(x, TrialMatrix) else np.asarray(x, dtype=np.float64)


def transform(model: PcaModel, x) -> np.ndarray:
    values = _as_array(x)
    if values.ndim == 1:
        values = values[None, :]
    if values.shape[1] != model.m:
        raise PcaError(f"expected {model.m} features, got {values.shape[1]}")
    return (values - model.mean) @ model.components.T


def inverse_transform(model: PcaModel, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape[1] != model.d:
        raise PcaError(f"expected {model.d} components, got {y.shape[1]}")
    return y @ model.components + model.mean


def reconstruction_error(model: PcaModel, x) -> float:
    """Per-element mean squared error of projecting ``x`` onto the model subspace."""
    values = _as_array(x)
    resid = values - inverse_transform(model, transform(model, values))
    return float(np.mean(resid**2))


def save(model: PcaModel, path) -> None:
    """Write the model as four consecutive PCM1 records (layout in docs/FORMATS.md)."""
    d = model.d
    pcs = [f"pc{i}" for i in range(d)]
    with Path(path).open("wb") as fh:
        write_block(fh, model.components, pcs)
        write_block(fh, model.mean[None, :], ["mean"])
        write_block(fh, np.column_stack([model.eigenvalues, model.variance_ratio]), pcs)
        write_block(fh, np.array([[model.n_fit, model.m, model.total_variance]]), ["meta"])


def load(path) -> PcaModel:
    with Path(path).open("rb") as fh:
        blocks = []
        while (b := read_block(fh)) is not None:
            blocks.append(b[0])
    if len(blocks) != 4:
        raise DataError(f"{path}: expected 4 PCA records, found {len(blocks)}")
    components, mean, spectrum, meta = blocks
    if mean.shape != (1, components.shape[1]) or spectrum.shape != (components.shape[0], 2):
        raise DataError(f"{path}: inconsistent PCA record shapes")
    model = PcaModel(
        mean=mean[0],
        components=components,
        eigenvalues=spectrum[:, 0].copy(),
        variance_ratio=spectrum[:, 1].copy(),
        total_variance=float(meta[0, 2]),
        n_fit=int(meta[0, 0]),
    )
    return model
