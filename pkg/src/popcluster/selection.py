"""BIC model-order sweeps and stability of hard clusterings across refits."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .gmm import EmOptions, GmmError, bic, em_fit, hard_assign, responsibilities

# Mean-BIC values closer than this count as a tie; the smaller K wins.
BIC_TIE = 1e-9


def derive_seed(base_seed: int, k: int, init: int) -> int:
    """Seed for init ``init`` at ``K=k``: a pure function of its arguments.

    Uses numpy's SeedSequence with ``base_seed`` as entropy and ``(k, init)``
    as the spawn key, reduced to an unsigned 64-bit integer.
    """
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(k), int(init)))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 32 | int(lo)


@dataclass(frozen=True)
class InitRecord:
    k: int
    init: int
    seed: int
    bic: float
    log_likelihood: float
    converged: bool
    n_iter: int


@dataclass(frozen=True)
class SweepResult:
    k_grid: tuple[int, ...]
    per_k: dict[int, tuple[InitRecord, ...]]
    mean_bic: dict[int, float]
    chosen_k: int
    n_samples: int

    def best_init(self, k: int | None = None) -> InitRecord:
        """Lowest-BIC initialization at ``k`` (the chosen K by default); first init wins ties."""
        recs = self.per_k[self.chosen_k if k is None else k]
        return min(recs, key=lambda r: (r.bic, r.init))

    def records(self) -> list[InitRecord]:
        return [r for k in self.k_grid for r in self.per_k[k]]


@dataclass(frozen=True)
class StabilityResult:
    k: int
    seeds: tuple[int, ...]
    labelings: tuple[np.ndarray, ...]
    rand_matrix: np.ndarray
    ari_matrix: np.ndarray
    mean_rand: float
    mean_ari: float


def _pair_counts(a, b) -> tuple[int, int, int, int]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"label vectors differ in shape: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("need at least 2 items")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        x = x.astype(np.int64)
        return int((x * (x - 1) // 2).sum())

    n = a.size
    return n * (n - 1) // 2, pairs(table), pairs(table.sum(axis=1)), pairs(table.sum(axis=0))


def rand_index(a, b) -> float:
    """Fraction of item pairs on which two labelings agree."""
    total, both, same_a, same_b = _pair_counts(a, b)
    agree = total + 2 * both - same_a - same_b
    return agree / total


def adjusted_rand_index(a, b) -> float:
    """Hubert-Arabie adjusted Rand index; 1.0 when both labelings are trivial and equal."""
    total, both, same_a, same_b = _pair_counts(a, b)
    expected = same_a * same_b / total
    maximum = 0.5 * (same_a + same_b)
    if maximum == expected:
        return 1.0
    return (both - expected) / (maximum - expected)


def _fit_job(args):
    y, k, init, seed, opts = args
    try:
        fit = em_fit(y, k, seed, opts)
    except (GmmError, ValueError) as exc:
        raise GmmError(f"fit failed at K={k}, seed={seed}: {exc}") from exc
    return InitRecord(k, init, seed, bic(fit), fit.log_likelihood, fit.converged, fit.n_iter)


def _run_jobs(func, jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [func(j) for j in jobs]
    chunk = max(1, len(jobs) // (threads * 4))
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, jobs, chunksize=chunk))


def default_threads() -> int:
    env = os.environ.get("POPCLUSTER_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def bic_sweep(
    y,
    k_min: int,
    k_max: int,
    n_init: int,
    base_seed: int,
    opts: EmOptions | None = None,
    threads: int = 1,
) -> SweepResult:
    """Fit ``n_init`` seeded mixtures for every K in ``k_min..k_max`` and
    choose the K with the lowest mean BIC."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n = y.shape[0]
    if k_min < 1 or k_max < k_min:
        raise ValueError(f"invalid K grid {k_min}..{k_max}")
    if k_max >= n:
        raise ValueError(f"k_max={k_max} must be below the number of trials N={n}")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    opts = opts or EmOptions()
    grid = tuple(range(k_min, k_max + 1))
    jobs = [(y, k, i, derive_seed(base_seed, k, i), opts) for k in grid for i in range(n_init)]
    records = _run_jobs(_fit_job, jobs, threads)

    per_k = {k: [] for k in grid}
    for r in records:
        per_k[r.k].append(r)
    per_k = {k: tuple(sorted(v, key=lambda r: r.init)) for k, v in per_k.items()}
    mean_bic = {k: math.fsum(r.bic for r in per_k[k]) / n_init for k in grid}
    chosen = grid[0]
    for k in grid[1:]:
        if mean_bic[k] < mean_bic[chosen] - BIC_TIE:
            chosen = k
    return SweepResult(grid, per_k, mean_bic, chosen, n)


def _labels_job(args):
    y, k, seed, opts = args
    try:
        fit = em_fit(y, k, seed, opts)
    except (GmmError, ValueError) as exc:
        raise GmmError(f"refit failed at K={k}, seed={seed}: {exc}") from exc
    return hard_assign(responsibilities(fit.params, y))


def stability(
    y, k: int, n_refit: int, seeds, opts: EmOptions | None = None, threads: int = 1
) -> StabilityResult:
    """Refit ``n_refit`` times with the given seeds and compare hard labelings pairwise."""
    seeds = tuple(int(s) for s in seeds)
    if n_refit < 2:
        raise ValueError("n_refit must be >= 2")
    if len(seeds) != n_refit:
        raise ValueError(f"{len(seeds)} seeds supplied for {n_refit} refits")
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    labelings = tuple(_run_jobs(_labels_job, [(y, k, s, opts) for s in seeds], threads))
    rand = np.eye(n_refit)
    ari = np.eye(n_refit)
    for i, j in combinations(range(n_refit), 2):
        rand[i, j] = rand[j, i] = rand_index(labelings[i], labelings[j])
        ari[i, j] = ari[j, i] = adjusted_rand_index(labelings[i], labelings[j])
    iu = np.triu_indices(n_refit, 1)
    return StabilityResult(
        k, seeds, labelings, rand, ari, float(rand[iu].mean()), float(ari[iu].mean())
    )
