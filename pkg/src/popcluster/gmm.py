"""Full-covariance Gaussian mixtures fitted by expectation-maximization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)


class GmmError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmOptions:
    max_iter: int = 200
    tol: float = 1e-4
    reg_covar: float = 1e-6

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol < 0 or self.reg_covar < 0:
            raise ValueError("tol and reg_covar must be nonnegative")


@dataclass(frozen=True)
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def n_free_parameters(self) -> int:
        k, d = self.k, self.dim
        return (k - 1) + k * d + k * d * (d + 1) // 2


@dataclass(frozen=True)
class GmmFit:
    params: GmmParams
    log_likelihood: float
    n_iter: int
    converged: bool
    seed: int
    mean_ll_trace: tuple[float, ...]
    n_samples: int
    opts: EmOptions = field(default_factory=EmOptions)

    @property
    def k(self) -> int:
        return self.params.k


@dataclass(frozen=True)
class Posterior:
    resp: np.ndarray

    @property
    def k(self) -> int:
        return self.resp.shape[1]


def _cholesky_all(covariances: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(covariances)
    except np.linalg.LinAlgError:
        pass
    for c, cov in enumerate(covariances):
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise GmmError(
                f"covariance of component {c} is not positive definite despite regularization"
            ) from None
    raise GmmError("covariance factorization failed")


def _inverse_factors(chols: np.ndarray) -> np.ndarray:
    eye = np.broadcast_to(np.eye(chols.shape[-1]), chols.shape)
    return np.linalg.solve(chols, eye)


def _weighted_log_prob(y: np.ndarray, params: GmmParams) -> np.ndarray:
    """log pi_c + log N(y_n; mu_c, Sigma_c) as an N x K matrix."""
    n, d = y.shape
    chols = _cholesky_all(params.covariances)
    inv = _inverse_factors(chols)
    log_det = 2.0 * np.log(np.diagonal(chols, axis1=1, axis2=2)).sum(axis=1)
    # whitened residuals, K x N x D
    sol = (y[None, :, :] - params.means[:, None, :]) @ inv.transpose(0, 2, 1)
    maha = np.einsum("knd,knd->nk", sol, sol)
    with np.errstate(divide="ignore"):
        log_w = np.log(params.weights)
    return -0.5 * (d * LOG_2PI + log_det[None, :] + maha) + log_w[None, :]


def _check_dims(params: GmmParams, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[1] != params.dim:
        raise ValueError(f"data has {y.shape[1]} columns, model has {params.dim}")
    return y


def log_likelihood(params: GmmParams, y) -> float:
    """Total log-likelihood of the rows of ``y`` under the mixture."""
    y = _check_dims(params, y)
    return float(logsumexp(_weighted_log_prob(y, params), axis=1).sum())


def responsibilities(params: GmmParams, y) -> Posterior:
    y = _check_dims(params, y)
    wlp = _weighted_log_prob(y, params)
    resp = np.exp(wlp - logsumexp(wlp, axis=1, keepdims=True))
    resp /= resp.sum(axis=1, keepdims=True)
    return Posterior(resp)


def hard_assign(post: Posterior | np.ndarray) -> np.ndarray:
    """Most probable component per row; ties go to the lowest index."""
    resp = post.resp if isinstance(post, Posterior) else np.asarray(post)
    return np.argmax(resp, axis=1)


def bic(fit: GmmFit, n: int | None = None) -> float:
    """p ln N - 2 L; lower is better."""
    n = fit.n_samples if n is None else n
    return fit.params.n_free_parameters() * math.log(n) - 2.0 * fit.log_likelihood


def _init_means(y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # k-means++ style: each new mean is a data point drawn with probability
    # proportional to its squared distance from the nearest chosen mean.
    n = y.shape[0]
    idx = [int(rng.integers(n))]
    d2 = ((y - y[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, ((y - y[nxt]) ** 2).sum(axis=1))
    return y[idx].copy()


def _gaussian_objective(covs: np.ndarray, scatter: np.ndarray) -> np.ndarray:
    """log|cov| + tr(cov^-1 scatter) per component; the M-step minimizes this."""
    chols = np.linalg.cholesky(covs)
    inv = _inverse_factors(chols)
    log_det = 2.0 * np.log(np.diagonal(chols, axis1=1, axis2=2)).sum(axis=1)
    return log_det + np.einsum("kij,kij->k", inv @ scatter, inv)


def _m_step(y: np.ndarray, resp: np.ndarray, reg: float, prev_covs: np.ndarray) -> GmmParams:
    n, d = y.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(np.float64).eps
    means = (resp.T @ y) / nk[:, None]
    diff = y[None, :, :] - means[:, None, :]
    scatter = (diff * resp.T[:, :, None]).transpose(0, 2, 1) @ diff / nk[:, None, None]
    scatter = 0.5 * (scatter + scatter.transpose(0, 2, 1))
    cand = scatter + reg * np.eye(d)
    # The ridge makes cand a non-maximizer of the expected log-likelihood;
    # where it scores below the previous covariance, keep the previous one
    # so every iteration stays a generalized EM step.
    try:
        worse = _gaussian_objective(cand, scatter) > _gaussian_objective(prev_covs, scatter)
    except np.linalg.LinAlgError:
        worse = np.zeros(len(nk), dtype=bool)
    covs = np.where(worse[:, None, None], prev_covs, cand)
    return GmmParams(nk / nk.sum(), means, covs)


def _initial_params(y: np.ndarray, k: int, reg: float, rng: np.random.Generator) -> GmmParams:
    n, d = y.shape
    means = _init_means(y, k, rng)
    diff = y - y.mean(axis=0)
    cov = diff.T @ diff / n
    cov = 0.5 * (cov + cov.T) + reg * np.eye(d)
    return GmmParams(np.full(k, 1.0 / k), means, np.repeat(cov[None], k, axis=0))


def em_fit(y, k: int, seed: int, opts: EmOptions | None = None) -> GmmFit:
    """Fit a K-component full-covariance mixture by EM.

    Means are seeded from the data by distance-weighted sampling, every
    covariance starts at the global covariance and weights start uniform.
    Iteration stops once the mean per-sample log-likelihood changes by less
    than ``opts.tol`` or after ``opts.max_iter`` M-steps. The returned
    parameters are always the output of an M-step, and ``log_likelihood``
    is evaluated at exactly those parameters.
    """
    opts = opts or EmOptions()
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n, d = y.shape
    if d < 1:
        raise ValueError("embedding needs at least one column")
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= K < N, got K={k}, N={n}")
    if not np.isfinite(y).all():
        raise ValueError("embedding contains non-finite values")

    rng = np.random.default_rng(seed)
    params = _initial_params(y, k, opts.reg_covar, rng)
    wlp = _weighted_log_prob(y, params)
    norm = logsumexp(wlp, axis=1)
    prev = float(norm.mean())
    trace = [prev]
    converged = False
    n_iter = 0
    for n_iter in range(1, opts.max_iter + 1):
        resp = np.exp(wlp - norm[:, None])
        params = _m_step(y, resp, opts.reg_covar, params.covariances)
        wlp = _weighted_log_prob(y, params)
        norm = logsumexp(wlp, axis=1)
        cur = float(norm.mean())
        trace.append(cur)
        if abs(cur - prev) < opts.tol:
            converged = True
            break
        prev = cur

    return GmmFit(
        params=params,
        log_likelihood=float(norm.sum()),
        n_iter=n_iter,
        converged=converged,
        seed=int(seed),
        mean_ll_trace=tuple(trace),
        n_samples=n,
        opts=opts,
    )


def fit_to_dict(fit: GmmFit) -> dict:
    p = fit.params
    return {
        "k": p.k,
        "dim": p.dim,
        "n_samples": fit.n_samples,
        "seed": fit.seed,
        "log_likelihood": fit.log_likelihood,
        "bic": bic(fit),
        "n_iter": fit.n_iter,
        "converged": fit.converged,
        "weights": p.weights.tolist(),
        "means": p.means.tolist(),
        "covariances": [c.ravel().tolist() for c in p.covariances],
        "mean_ll_trace": list(fit.mean_ll_trace),
        "opts": {
            "max_iter": fit.opts.max_iter,
            "tol": fit.opts.tol,
            "reg_covar": fit.opts.reg_covar,
        },
    }


def fit_from_dict(data: dict) -> GmmFit:
    k, d = int(data["k"]), int(data["dim"])
    covs = np.array(data["covariances"], dtype=np.float64).reshape(k, d, d)
    params = GmmParams(
        np.array(data["weights"], dtype=np.float64),
        np.array(data["means"], dtype=np.float64).reshape(k, d),
        covs,
    )
    return GmmFit(
        params=params,
        log_likelihood=float(data["log_likelihood"]),
        n_iter=int(data["n_iter"]),
        converged=bool(data["converged"]),
        seed=int(data["seed"]),
        mean_ll_trace=tuple(float(v) for v in data["mean_ll_trace"]),
        n_samples=int(data["n_samples"]),
        opts=EmOptions(**data["opts"]),
    )


def save_fit(fit: GmmFit, path) -> None:
    Path(path).write_text(json.dumps(fit_to_dict(fit), indent=1) + "\n", encoding="utf-8")


def load_fit(path) -> GmmFit:
    return fit_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
