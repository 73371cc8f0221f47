"""Gaussian and Gaussian-mixture primitives.

Densities, quantiles, sampling, clustering-based moment estimation,
moment concentration bounds and a 1-D VaR/CVaR oracle for mixtures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

PSD_REPAIR_TOL = 1e-8
PSD_CHECK_TOL = 1e-10


class EstimationError(ValueError):
    """Raised when moments cannot be estimated from a sample set."""


# ---------------------------------------------------------------------------
# Standard normal helpers
# ---------------------------------------------------------------------------

# Acklam's rational approximation coefficients (relative error ~1.15e-9).
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549671010264556e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def inverse_normal_cdf(p: float) -> float:
    """Quantile of the standard normal distribution.

    Rational approximation followed by one Halley refinement on the
    erfc-based CDF, accurate to ~1e-15 in the central region.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"inverse_normal_cdf: p must lie in (0, 1), got {p!r}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    # Halley step; residual is computed on the tail that keeps precision.
    if x < 0:
        e = normal_cdf(x) - p
    else:
        e = (1.0 - p) - 0.5 * math.erfc(x / math.sqrt(2.0))
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

def repair_psd(cov: np.ndarray, tol: float = PSD_REPAIR_TOL) -> np.ndarray:
    """Symmetrize and clip slightly negative eigenvalues to zero.

    Matrices that are PSD up to rounding come back merely symmetrized.

    Raises ValueError when the most negative eigenvalue is below ``-tol``.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    sym = 0.5 * (cov + cov.T)
    if sym.size == 0:
        return sym
    w, v = np.linalg.eigh(sym)
    if w.min() < -tol:
        raise ValueError(f"covariance is not PSD (min eigenvalue {w.min():.3e})")
    # rounding-level negatives are left alone so exact zero blocks stay exact
    if w.min() < -1e-12 * max(float(np.abs(w).max()), 1.0):
        w = np.clip(w, 0.0, None)
        sym = (v * w) @ v.T
        sym = 0.5 * (sym + sym.T)
    return sym


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """Return L with L @ L.T == cov for a PSD (possibly singular) matrix."""
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.clip(w, 0.0, None)
    return v * np.sqrt(w)


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim < 2:
            cov = np.atleast_2d(cov)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        sym = 0.5 * (cov + cov.T)
        if mean.size and np.linalg.eigvalsh(sym).min() < -PSD_CHECK_TOL * max(1.0, np.abs(sym).max()):
            raise ValueError("covariance must be positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", sym)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> float:
        """Standard deviation of a scalar Gaussian."""
        if self.dim != 1:
            raise ValueError("std is only defined for 1-D Gaussians")
        return math.sqrt(self.cov[0, 0])


@dataclass(frozen=True)
class GaussianMixture:
    modes: tuple[Gaussian, ...]
    weights: np.ndarray

    def __post_init__(self):
        modes = tuple(self.modes)
        weights = np.asarray(self.weights, dtype=float).ravel()
        if not modes:
            raise ValueError("a mixture needs at least one mode")
        if weights.size != len(modes):
            raise ValueError("one weight per mode is required")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be a probability vector, got {weights}")
        dims = {m.dim for m in modes}
        if len(dims) != 1:
            raise ValueError("all modes must share one dimension")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def scalar(cls, means, stds, weights) -> "GaussianMixture":
        modes = tuple(Gaussian([m], [[s * s]]) for m, s in zip(means, stds))
        return cls(modes, np.asarray(weights, dtype=float))

    @property
    def dim(self) -> int:
        return self.modes[0].dim

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def cdf(self, x: float) -> float:
        """Mixture CDF (1-D only)."""
        total = 0.0
        for w, m in zip(self.weights, self.modes):
            s = m.std
            total += w * (normal_cdf((x - m.mean[0]) / s) if s > 0 else float(x >= m.mean[0]))
        return total

    def shifted(self, c: float) -> "GaussianMixture":
        return GaussianMixture(tuple(Gaussian(m.mean + c, m.cov) for m in self.modes), self.weights)


@dataclass(frozen=True)
class MomentEstimate:
    mean_hat: np.ndarray
    cov_hat: np.ndarray
    n_samples: int
    mode_index: int

    def __post_init__(self):
        if self.n_samples < 2:
            raise EstimationError(f"mode {self.mode_index}: need at least 2 samples, got {self.n_samples}")

    @property
    def dim(self) -> int:
        return np.atleast_1d(self.mean_hat).size

    def as_gaussian(self) -> Gaussian:
        return Gaussian(self.mean_hat, self.cov_hat)


@dataclass(frozen=True)
class ConcentrationBounds:
    r1: float
    r2: float
    beta: float
    n_samples: int


@dataclass(frozen=True)
class BoundFamily:
    """Coefficients of the concentration-bound family.

    r1 = mean_coef * sqrt(||cov||_F) * sqrt(2 ln(2/beta) / N)
    r2 = dim_coef * sqrt(d / N) + conf_coef * sqrt(2 ln(2/beta) / N)
    """
    mean_coef: float = 1.0
    dim_coef: float = 1.0
    conf_coef: float = 1.0


DEFAULT_BOUNDS = BoundFamily()


# ---------------------------------------------------------------------------
# Sampling and estimation
# ---------------------------------------------------------------------------

def sample_labeled(mixture: GaussianMixture, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` samples and their mode labels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.choice(mixture.n_modes, size=n, p=mixture.weights)
    z = rng.standard_normal((n, mixture.dim))
    out = np.empty((n, mixture.dim))
    for k, mode in enumerate(mixture.modes):
        idx = labels == k
        out[idx] = mode.mean + z[idx] @ psd_factor(mode.cov).T
    return out, labels


def sample(mixture: GaussianMixture, n: int, seed: int) -> np.ndarray:
    return sample_labeled(mixture, n, seed)[0]


def sample_moments(samples: np.ndarray, mode_index: int = 0) -> MomentEstimate:
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise EstimationError(f"mode {mode_index}: need at least 2 samples, got {n}")
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return MomentEstimate(mean, repair_psd(cov), n, mode_index)


def cluster_and_estimate(samples, k: int, seed: int, n_init: int = 50):
    """k-means (k-means++ seeding) clustering followed by per-cluster moments.

    Clusters are relabelled in lexicographic order of their centroids so the
    output is independent of the clustering's internal label permutation.

    Returns
    -------
    estimates : list[MomentEstimate]
    weights : np.ndarray
        Cluster fractions.
    labels : np.ndarray
        Cluster index of every sample after relabelling.
    """
    from sklearn.cluster import KMeans

    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if k < 1:
        raise ValueError("k must be >= 1")
    if x.shape[0] < 2 * k:
        raise EstimationError(f"need at least {2 * k} samples for {k} clusters, got {x.shape[0]}")
    if k == 1:
        labels = np.zeros(x.shape[0], dtype=int)
    else:
        km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, random_state=seed)
        raw = km.fit_predict(x)
        centers = np.array([x[raw == c].mean(axis=0) if np.any(raw == c) else np.full(x.shape[1], np.inf)
                            for c in range(k)])
        order = np.lexsort(centers.T[::-1])
        relabel = np.empty(k, dtype=int)
        relabel[order] = np.arange(k)
        labels = relabel[raw]
    estimates = []
    for c in range(k):
        members = x[labels == c]
        if members.shape[0] == 0:
            raise EstimationError(f"cluster {c} is empty after assignment")
        estimates.append(sample_moments(members, mode_index=c))
    weights = np.bincount(labels, minlength=k) / x.shape[0]
    return estimates, weights, labels


def concentration_bounds(estimate: MomentEstimate, beta: float,
                         family: BoundFamily = DEFAULT_BOUNDS) -> ConcentrationBounds:
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    n = estimate.n_samples
    conf = math.sqrt(2.0 * math.log(2.0 / beta) / n)
    scale = math.sqrt(np.linalg.norm(np.atleast_2d(estimate.cov_hat), "fro"))
    r1 = family.mean_coef * scale * conf
    r2 = family.dim_coef * math.sqrt(estimate.dim / n) + family.conf_coef * conf
    return ConcentrationBounds(r1, r2, beta, n)


# ---------------------------------------------------------------------------
# Tail risk of scalar mixtures
# ---------------------------------------------------------------------------

def _partial_expectation(mu: float, sigma: float, v: float) -> float:
    """E[X 1{X > v}] for X ~ N(mu, sigma^2)."""
    if sigma == 0.0:
        return mu if mu > v else 0.0
    a = (v - mu) / sigma
    return mu * 0.5 * math.erfc(a / math.sqrt(2.0)) + sigma * normal_pdf(a)


def mixture_tail_mass(mixture: GaussianMixture, v: float) -> float:
    """P(X > v), computed on the upper tail to avoid cancellation."""
    total = 0.0
    for w, m in zip(mixture.weights, mixture.modes):
        s = m.std
        total += w * (0.5 * math.erfc((v - m.mean[0]) / (s * math.sqrt(2.0))) if s > 0
                      else float(m.mean[0] > v))
    return total


def mixture_partial_expectation(mixture: GaussianMixture, v: float) -> float:
    return sum(w * _partial_expectation(m.mean[0], m.std, v)
               for w, m in zip(mixture.weights, mixture.modes))


def mixture_quantile(mixture: GaussianMixture, p: float, xtol: float = 1e-12) -> float:
    """Inverse CDF of a scalar mixture by bracketed root finding."""
    if mixture.dim != 1:
        raise ValueError("mixture_quantile requires a 1-D mixture")
    means = np.array([m.mean[0] for m in mixture.modes])
    stds = np.array([m.std for m in mixture.modes])
    span = 40.0 * max(stds.max(), 1.0)
    lo, hi = means.min() - span, means.max() + span
    return optimize.brentq(lambda x: (1.0 - mixture_tail_mass(mixture, x)) - p, lo, hi,
                           xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=500)


def gmm_var_cvar(mixture: GaussianMixture, epsilon: float) -> tuple[float, float]:
    """Value-at-risk and conditional value-at-risk at level ``epsilon``.

    VaR is the (1 - epsilon) quantile; CVaR the expected value beyond it,
    assembled from closed-form Gaussian partial expectations.
    """
    if mixture.dim != 1:
        raise ValueError("gmm_var_cvar requires a 1-D mixture")
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    var = mixture_quantile(mixture, 1.0 - epsilon)
    cvar = mixture_partial_expectation(mixture, var) / epsilon
    return float(var), float(cvar)
