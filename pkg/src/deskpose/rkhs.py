"""Trainable-kernel RKHS machinery: kernels, MMD estimators, gradients, fitting.

The default domain-gap estimator is the off-diagonal form

    value = sqrt(max(0, (S_ss - S_sr + S_rr) / m^2)),

where each S term sums kernel values over index pairs i != j (within the
first batch, across batches, within the second batch).  The biased and
unbiased textbook estimators are provided as cross-checking oracles; their
discrepancy against the default form is reported, never silently corrected.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FitDivergenceError

ESTIMATORS = ("offdiag", "biased", "unbiased")
SCALINGS = ("m2", "m")


def _check_batch(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DomainError(f"{name} must be (m, d) with m >= 2")
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name} must be finite")
    return x


@dataclass(frozen=True, eq=False)
class KernelWeights:
    """Weight matrices applied to the two kernel arguments before the inner product."""

    w_x: np.ndarray
    w_y: np.ndarray

    def __post_init__(self):
        wx = np.asarray(self.w_x, dtype=np.float64)
        wy = np.asarray(self.w_y, dtype=np.float64)
        if wx.ndim != 2 or wx.shape[0] != wx.shape[1] or wy.shape != wx.shape:
            raise DomainError("kernel weights must be matching square matrices")
        if not (np.all(np.isfinite(wx)) and np.all(np.isfinite(wy))):
            raise DomainError("kernel weights must be finite")
        object.__setattr__(self, "w_x", wx)
        object.__setattr__(self, "w_y", wy)

    @staticmethod
    def identity(dim: int) -> "KernelWeights":
        return KernelWeights(np.eye(dim), np.eye(dim))


class LinearKernel:
    """k(a, b) = <W_x a, W_y b>; identity weights give the plain dot product."""

    def __init__(self, weights: KernelWeights):
        self.weights = weights

    def pair(self, x, y) -> float:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        d = self.weights.w_x.shape[0]
        if len(x) != d or len(y) != d:
            raise DomainError("kernel argument dimension mismatch")
        return float((self.weights.w_x @ x) @ (self.weights.w_y @ y))

    def gram(self, a, b) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape[1] != self.weights.w_x.shape[0] or b.shape[1] != a.shape[1]:
            raise DomainError("kernel argument dimension mismatch")
        return (a @ self.weights.w_x.T) @ (b @ self.weights.w_y.T).T


class RbfKernel:
    """k(a, b) = exp(-w ||a - b||^2) with a single positive width parameter."""

    def __init__(self, w: float):
        if not w > 0:
            raise DomainError("RBF parameter must be positive")
        self.w = float(w)

    def pair(self, x, y) -> float:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if len(x) != len(y):
            raise DomainError("kernel argument dimension mismatch")
        return float(np.exp(-self.w * np.sum((x - y) ** 2)))

    def gram(self, a, b) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape[1] != b.shape[1]:
            raise DomainError("kernel argument dimension mismatch")
        d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
        return np.exp(-self.w * np.maximum(d2, 0.0))


def kernel_linear_trainable(x, y, weights: KernelWeights) -> float:
    return LinearKernel(weights).pair(x, y)


def kernel_rbf_trainable(x, y, w: float) -> float:
    return RbfKernel(w).pair(x, y)


@dataclass(frozen=True)
class MMDReport:
    value: float
    estimator: str
    clamped: bool


def _sqrt_clamped(pre, estimator) -> MMDReport:
    clamped = pre < 0
    return MMDReport(value=float(np.sqrt(max(pre, 0.0))), estimator=estimator,
                     clamped=bool(clamped))


def mmd_offdiag(sr, r, kernel, scaling: str = "m2") -> MMDReport:
    """Off-diagonal-sum MMD over two equal-size batches (the toolkit default).

    scaling "m2" divides the bracketed sum by m^2; "m" divides by m only.
    Unequal batch sizes are a domain error here; callers that tolerate them
    truncate before calling (see fit_kernel_weights).
    """
    sr = _check_batch(sr, "sr")
    r = _check_batch(r, "r")
    if sr.shape[0] != r.shape[0]:
        raise DomainError("the off-diagonal estimator needs equal batch sizes")
    if scaling not in SCALINGS:
        raise DomainError(f"unknown scaling {scaling!r}")
    m = sr.shape[0]
    k_ss = kernel.gram(sr, sr)
    k_sr = kernel.gram(sr, r)
    k_rr = kernel.gram(r, r)
    bracket = ((k_ss.sum() - np.trace(k_ss))
               - (k_sr.sum() - np.trace(k_sr))
               + (k_rr.sum() - np.trace(k_rr)))
    denom = m * m if scaling == "m2" else m
    return _sqrt_clamped(bracket / denom, "offdiag")


def mmd_biased(sr, r, kernel) -> MMDReport:
    """Textbook biased (V-statistic) estimator; exactly 0 on identical batches."""
    sr = _check_batch(sr, "sr")
    r = _check_batch(r, "r")
    pre = (kernel.gram(sr, sr).mean() - 2.0 * kernel.gram(sr, r).mean()
           + kernel.gram(r, r).mean())
    return _sqrt_clamped(pre, "biased")


def mmd_unbiased(sr, r, kernel) -> MMDReport:
    """Textbook unbiased (U-statistic) estimator with diagonal-excluded sums."""
    sr = _check_batch(sr, "sr")
    r = _check_batch(r, "r")
    m, n = sr.shape[0], r.shape[0]
    k_ss = kernel.gram(sr, sr)
    k_rr = kernel.gram(r, r)
    pre = ((k_ss.sum() - np.trace(k_ss)) / (m * (m - 1))
           - 2.0 * kernel.gram(sr, r).mean()
           + (k_rr.sum() - np.trace(k_rr)) / (n * (n - 1)))
    return _sqrt_clamped(pre, "unbiased")


@dataclass(frozen=True, eq=False)
class MMDGradient:
    d_wx: np.ndarray
    d_wy: np.ndarray
    defined: bool  # False when the pre-sqrt value was clamped at zero


def _structure_matrix(sr, r):
    """G such that the off-diagonal bracket equals tr(W_x^T W_y G)."""
    s_sum = sr.sum(axis=0)
    r_sum = r.sum(axis=0)
    g_ss = np.outer(s_sum, s_sum) - sr.T @ sr
    g_sr = np.outer(r_sum, s_sum) - r.T @ sr
    g_rr = np.outer(r_sum, r_sum) - r.T @ r
    return g_ss - g_sr + g_rr


def mmd_grad_weights(sr, r, weights: KernelWeights, scaling: str = "m2"):
    """Analytic gradient of the off-diagonal linear-kernel MMD value w.r.t.
    both weight matrices.  Zero gradients with defined=False when the value
    is clamped (the sqrt has no derivative there)."""
    sr = _check_batch(sr, "sr")
    r = _check_batch(r, "r")
    if sr.shape[0] != r.shape[0]:
        raise DomainError("the off-diagonal estimator needs equal batch sizes")
    if sr.shape[1] != weights.w_x.shape[0]:
        raise DomainError("batch dimension does not match kernel weights")
    if scaling not in SCALINGS:
        raise DomainError(f"unknown scaling {scaling!r}")
    m = sr.shape[0]
    denom = m * m if scaling == "m2" else m
    g = _structure_matrix(sr, r)
    pre = float(np.trace(weights.w_x.T @ weights.w_y @ g)) / denom
    if pre <= 0:
        zero = np.zeros_like(weights.w_x)
        return MMDGradient(d_wx=zero, d_wy=zero.copy(), defined=False)
    scale = 1.0 / (2.0 * np.sqrt(pre) * denom)
    return MMDGradient(d_wx=weights.w_y @ g * scale,
                       d_wy=weights.w_x @ g.T * scale,
                       defined=True)


@dataclass(frozen=True, eq=False)
class FitResult:
    weights: KernelWeights
    trace: tuple  # mean MMD value before training and after every epoch


def _truncate_pair(sr, r):
    if sr.shape[0] != r.shape[0]:
        m = min(sr.shape[0], r.shape[0])
        warnings.warn(f"unequal batch sizes; truncating both to {m} samples",
                      stacklevel=3)
        return sr[:m], r[:m]
    return sr, r


def fit_kernel_weights(pairs, lr: float, epochs: int,
                       objective: str = "minimize",
                       scaling: str = "m2") -> FitResult:
    """Plain gradient descent of the mean off-diagonal MMD over batch pairs.

    Weights start at identity so epoch 0 reproduces the untrained kernel.
    Unequal batch pairs are truncated to their common prefix with a warning.
    Non-finite losses abort with the trace collected so far.
    """
    if len(pairs) == 0:
        raise DomainError("need at least one batch pair")
    if lr <= 0:
        raise DomainError("learning rate must be positive")
    if epochs < 0:
        raise DomainError("epoch count must be >= 0")
    if objective not in ("minimize", "maximize"):
        raise DomainError(f"unknown objective {objective!r}")
    clean = [_truncate_pair(_check_batch(sr, "sr"), _check_batch(r, "r"))
             for sr, r in pairs]
    dim = clean[0][0].shape[1]
    if any(sr.shape[1] != dim or r.shape[1] != dim for sr, r in clean):
        raise DomainError("all batch pairs must share one feature dimension")

    weights = KernelWeights.identity(dim)
    sign = -1.0 if objective == "minimize" else 1.0

    def mean_loss(w):
        kern = LinearKernel(w)
        return float(np.mean([mmd_offdiag(sr, r, kern, scaling).value
                              for sr, r in clean]))

    trace = [mean_loss(weights)]
    for _ in range(epochs):
        gx = np.zeros((dim, dim))
        gy = np.zeros((dim, dim))
        for sr, r in clean:
            grad = mmd_grad_weights(sr, r, weights, scaling)
            gx += grad.d_wx
            gy += grad.d_wy
        weights = KernelWeights(weights.w_x + sign * lr * gx / len(clean),
                                weights.w_y + sign * lr * gy / len(clean))
        loss = mean_loss(weights)
        if not np.isfinite(loss):
            raise FitDivergenceError("kernel fit diverged to a non-finite loss",
                                     trace)
        trace.append(loss)
    return FitResult(weights=weights, trace=tuple(trace))


def kl_divergence_gaussianized(sr, r, reg: float = 1e-6) -> float:
    """KL divergence between Gaussians moment-matched to the two batches.

    Covariances get +reg*I; a still-singular covariance is a domain error.
    """
    sr = _check_batch(sr, "sr")
    r = _check_batch(r, "r")
    if sr.shape[1] != r.shape[1]:
        raise DomainError("batches must share one feature dimension")
    d = sr.shape[1]
    mu0, mu1 = sr.mean(axis=0), r.mean(axis=0)
    c0 = np.cov(sr, rowvar=False).reshape(d, d) + reg * np.eye(d)
    c1 = np.cov(r, rowvar=False).reshape(d, d) + reg * np.eye(d)
    sign1, logdet1 = np.linalg.slogdet(c1)
    sign0, logdet0 = np.linalg.slogdet(c0)
    if sign1 <= 0 or sign0 <= 0:
        raise DomainError("singular covariance after regularization")
    try:
        c1_inv = np.linalg.inv(c1)
    except np.linalg.LinAlgError as exc:
        raise DomainError("singular covariance after regularization") from exc
    diff = mu1 - mu0
    return float(0.5 * (np.trace(c1_inv @ c0) + diff @ c1_inv @ diff - d
                        + logdet1 - logdet0))


def wasserstein_1d_sliced(sr, r, n_projections: int = 64, seed: int = 0) -> float:
    """Sliced 1D Wasserstein-1: sorted projections averaged over random
    unit directions.  Unequal batch sizes are compared through midpoint
    quantiles of both empirical distributions."""
    sr = _check_batch(sr, "sr")
    r = _check_batch(r, "r")
    if sr.shape[1] != r.shape[1]:
        raise DomainError("batches must share one feature dimension")
    if n_projections < 1:
        raise DomainError("need at least one projection")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_projections, sr.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for u in dirs:
        a = np.sort(sr @ u)
        b = np.sort(r @ u)
        if len(a) != len(b):
            q = (np.arange(max(len(a), len(b))) + 0.5) / max(len(a), len(b))
            a = np.quantile(a, q)
            b = np.quantile(b, q)
        total += float(np.mean(np.abs(a - b)))
    return total / n_projections


def lift_features(x, factor: int = 4, seed: int = 0) -> np.ndarray:
    """Fixed random linear lift d -> factor*d (deterministic given seed),
    standing in for a learned feature encoder."""
    x = _check_batch(x, "x")
    if factor < 1:
        raise DomainError("lift factor must be >= 1")
    d = x.shape[1]
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((factor * d, d)) / np.sqrt(d)
    return x @ w.T
