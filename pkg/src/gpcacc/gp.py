"""Sliding-window Gaussian-process speed forecaster.

The forecaster follows the scikit-learn estimator protocol: hyperparameters
are constructor arguments, ``fit`` learns the kernel parameters from a short
window of equally spaced speed samples by maximizing the marginal
likelihood, and ``predict`` returns the posterior mean (and optionally the
marginal standard deviation) at arbitrary times.

The window mean is removed before fitting and added back on prediction, so
far-horizon forecasts revert to the recent average speed.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.linalg import cho_solve, cholesky
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

WINDOW_SIZE = 5
_LOG_2PI = np.log(2.0 * np.pi)

# box on the log hyperparameters searched by the optimizer
SIGNAL_VAR_BOUNDS = (1e-6, 1e4)
LENGTH_SCALE_BOUNDS = (0.25, 30.0)  # multiples of the window span
DEFAULT_JITTER = 1e-11  # relative to tr(K)/n; keeps training-point error well under 1e-4 at long length scales


class GpFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class GpHyperParams:
    signal_variance: float
    length_scale: float
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if not (self.signal_variance > 0 and self.length_scale > 0 and self.jitter >= 0):
            raise ValueError(f"invalid GP hyperparameters {self}")


@dataclass(frozen=True)
class SpeedForecast:
    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class DisturbanceLevels:
    levels: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        if len(self.levels) != len(self.probabilities) or len(self.levels) < 1:
            raise ValueError("levels and probabilities must be non-empty and aligned")


def rbf_kernel(t1, t2, hp: GpHyperParams):
    """Squared-exponential covariance between time arrays ``t1`` and ``t2``."""
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    lag = np.subtract.outer(t1, t2)
    return hp.signal_variance * np.exp(-0.5 * (lag / hp.length_scale) ** 2)


def _check_window(times, speeds):
    times = np.asarray(times, dtype=float).ravel()
    speeds = np.asarray(speeds, dtype=float).ravel()
    if times.shape != speeds.shape:
        raise ValueError("times and speeds must have the same length")
    if len(times) != WINDOW_SIZE:
        raise ValueError(f"training window needs exactly {WINDOW_SIZE} samples, got {len(times)}")
    if not np.all(np.isfinite(times)) or not np.all(np.isfinite(speeds)):
        raise ValueError("window contains non-finite values")
    steps = np.diff(times)
    if np.any(steps <= 0):
        raise ValueError("training times must be strictly increasing")
    if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9):
        raise ValueError("training times must be equally spaced")
    return times, speeds


def _batched_lml(lags_sq, resid, log_sf2, log_ell, jitter, with_grad=True):
    """Log marginal likelihood for a batch of hyperparameter pairs.

    ``log_sf2`` and ``log_ell`` are 1-D arrays of equal length. Returns the
    values and the gradient columns (d/dlog sf2, d/dlog ell).
    """
    sf2 = np.exp(log_sf2)[:, None, None]
    ell2 = np.exp(2.0 * log_ell)[:, None, None]
    n = resid.shape[0]
    corr = np.exp(-0.5 * lags_sq[None] / ell2)
    K = sf2 * (corr + jitter * np.eye(n)[None])
    L = np.linalg.cholesky(K)
    eye = np.broadcast_to(np.eye(n), K.shape)
    Linv = np.linalg.solve(L, eye)
    Kinv = np.swapaxes(Linv, 1, 2) @ Linv
    alpha = Kinv @ resid
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    value = -0.5 * (resid @ alpha.T) - 0.5 * logdet - 0.5 * n * _LOG_2PI
    if not with_grad:
        return value, None
    inner = alpha[:, :, None] * alpha[:, None, :] - Kinv
    dK_dsf = K
    dK_dell = sf2 * corr * (lags_sq[None] / ell2)
    g_sf = 0.5 * np.einsum("bij,bji->b", inner, dK_dsf)
    g_ell = 0.5 * np.einsum("bij,bji->b", inner, dK_dell)
    return value, np.stack([g_sf, g_ell], axis=1)


def log_marginal_likelihood(times, speeds, hp: GpHyperParams, mean_offset=None):
    """Gaussian log-density of the window residuals and its gradient.

    The gradient is taken with respect to ``(log signal_variance,
    log length_scale)``; the relative jitter scales with the signal
    variance.
    """
    times, speeds = _check_window(times, speeds)
    offset = speeds.mean() if mean_offset is None else mean_offset
    resid = speeds - offset
    lags_sq = np.subtract.outer(times, times) ** 2
    try:
        value, grad = _batched_lml(lags_sq, resid, np.array([np.log(hp.signal_variance)]),
                                   np.array([np.log(hp.length_scale)]), hp.jitter)
    except np.linalg.LinAlgError as exc:
        raise GpFitError(f"kernel matrix not positive definite for {hp}") from exc
    return float(value[0]), grad[0]


def _profiled_signal_variance(lags_sq, resid, log_ell, jitter, lo, hi):
    """Closed-form maximizer of the likelihood over log signal variance.

    With a relative jitter the covariance is ``sf2 * (C + jitter*I)``, so for
    fixed length scale the optimum is ``r' (C + jitter*I)^-1 r / n``; the
    likelihood is concave in log sf2, so clipping gives the boxed optimum.
    """
    n = resid.shape[0]
    corr = np.exp(-0.5 * lags_sq[None] / np.exp(2.0 * log_ell)[:, None, None])
    corr = corr + jitter * np.eye(n)[None]
    quad = np.einsum("i,bi->b", resid, np.linalg.solve(corr, np.broadcast_to(resid, (len(log_ell), n))[..., None])[..., 0])
    with np.errstate(divide="ignore"):
        log_sf2 = np.log(np.maximum(quad / n, 0.0))
    return np.clip(log_sf2, lo, hi)


def _maximize_lml(times, resid, jitter, max_iter=100, tol=1e-8):
    """Multi-start projected gradient ascent in log hyperparameter space.

    The signal variance is eliminated exactly at every iterate, so the
    starts differ only in length scale: 0.5x, 1x and 2x the window span
    scaled by e^-1, e^0, e^1.
    """
    span = times[-1] - times[0]
    lags_sq = np.subtract.outer(times, times) ** 2
    lo = np.log([SIGNAL_VAR_BOUNDS[0], LENGTH_SCALE_BOUNDS[0] * span])
    hi = np.log([SIGNAL_VAR_BOUNDS[1], LENGTH_SCALE_BOUNDS[1] * span])

    def evaluate(log_ell):
        log_sf2 = _profiled_signal_variance(lags_sq, resid, log_ell, jitter, lo[0], hi[0])
        value, grad = _batched_lml(lags_sq, resid, log_sf2, log_ell, jitter)
        return log_sf2, value, grad[:, 1]

    log_ell = np.clip(np.log(span) + np.array([-1.0, 0.0, 1.0]), lo[1], hi[1])
    log_sf2, value, grad = evaluate(log_ell)
    step = np.full(len(log_ell), 0.5)
    active = np.ones(len(log_ell), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        cand = np.clip(log_ell[idx] + step[idx] * grad[idx], lo[1], hi[1])
        c_sf2, c_value, c_grad = evaluate(cand)
        ok = c_value >= value[idx] + 1e-4 * grad[idx] * (cand - log_ell[idx])
        for j, b in enumerate(idx):
            if ok[j]:
                converged = (abs(cand[j] - log_ell[b]) < tol
                             or c_value[j] - value[b] < tol * (1.0 + abs(value[b])))
                log_ell[b], log_sf2[b], value[b], grad[b] = cand[j], c_sf2[j], c_value[j], c_grad[j]
                step[b] *= 2.0
                active[b] = not converged
            else:
                step[b] *= 0.25
                active[b] = step[b] * abs(grad[b]) >= tol
    best = int(np.argmax(value))
    return np.array([log_sf2[best], log_ell[best]]), float(value[best])


class GaussianProcessSpeedModel(RegressorMixin, BaseEstimator):
    """RBF Gaussian process over a 5-sample speed window.

    Parameters
    ----------
    jitter : float
        Relative diagonal regularizer; the absolute jitter is
        ``jitter * trace(K) / n``.
    max_iter : int
        Iteration cap of the gradient ascent run from each start.
    v_max : float or None
        Upper clamp on forecast means (lower clamp is always 0).
    """

    def __init__(self, jitter=DEFAULT_JITTER, max_iter=100, v_max=None):
        self.jitter = jitter
        self.max_iter = max_iter
        self.v_max = v_max

    def fit(self, X, y):
        times, speeds = _check_window(X, y)
        self.mean_offset_ = float(speeds.mean())
        resid = speeds - self.mean_offset_
        theta, value = _maximize_lml(times, resid, self.jitter, self.max_iter)
        self.hyper_ = GpHyperParams(float(np.exp(theta[0])), float(np.exp(theta[1])), self.jitter)
        self.log_marginal_likelihood_ = value
        return self._condition(times, speeds)

    def set_window(self, X, y, hyper: GpHyperParams, mean_offset=None):
        """Condition on a window with given hyperparameters, skipping the fit."""
        times, speeds = _check_window(X, y)
        self.mean_offset_ = float(speeds.mean() if mean_offset is None else mean_offset)
        self.hyper_ = hyper
        return self._condition(times, speeds)

    def _condition(self, times, speeds):
        self.X_train_ = times
        self.y_train_ = speeds
        K = rbf_kernel(times, times, self.hyper_)
        self.noise_ = self.jitter * np.trace(K) / len(times)
        try:
            self.L_ = cholesky(K + self.noise_ * np.eye(len(times)), lower=True)
        except np.linalg.LinAlgError as exc:
            raise GpFitError("kernel matrix factorization failed") from exc
        self.alpha_ = cho_solve((self.L_, True), speeds - self.mean_offset_)
        return self

    def predict(self, X, return_std=False, return_cov=False):
        check_is_fitted(self, "alpha_")
        t = np.asarray(X, dtype=float).ravel()
        Ks = rbf_kernel(t, self.X_train_, self.hyper_)
        mean = Ks @ self.alpha_ + self.mean_offset_
        mean = np.clip(mean, 0.0, np.inf if self.v_max is None else self.v_max)
        if not (return_std or return_cov):
            return mean
        v = cho_solve((self.L_, True), Ks.T)
        cov = rbf_kernel(t, t, self.hyper_) - Ks @ v
        if return_cov:
            return mean, cov
        return mean, np.sqrt(np.clip(np.diag(cov), 0.0, None))

    def forecast(self, start, horizon, t_s) -> SpeedForecast:
        """Posterior mean and marginal std at ``start + j*t_s``, j=0..horizon-1."""
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        times = start + t_s * np.arange(horizon)
        mean, std = self.predict(times, return_std=True)
        return SpeedForecast(times, mean, std)

    # -- wire payload -----------------------------------------------------

    def to_payload(self) -> bytes:
        """13 little-endian binary64: 5 times, 5 speeds, sf2, ell, offset."""
        check_is_fitted(self, "alpha_")
        vals = [*self.X_train_, *self.y_train_, self.hyper_.signal_variance,
                self.hyper_.length_scale, self.mean_offset_]
        return struct.pack("<13d", *vals)

    @classmethod
    def from_payload(cls, payload: bytes, jitter=DEFAULT_JITTER, v_max=None):
        vals = struct.unpack("<13d", payload)
        model = cls(jitter=jitter, v_max=v_max)
        hyper = GpHyperParams(vals[10], vals[11], jitter)
        return model.set_window(vals[:5], vals[5:10], hyper, mean_offset=vals[12])


PAYLOAD_SIZE = struct.calcsize("<13d")


def fit(times, speeds, jitter=DEFAULT_JITTER, v_max=None) -> GaussianProcessSpeedModel:
    if np.ptp(np.asarray(times, dtype=float)) == 0:
        raise ValueError("degenerate window: all sample times identical")
    return GaussianProcessSpeedModel(jitter=jitter, v_max=v_max).fit(times, speeds)


def forecast(model: GaussianProcessSpeedModel, horizon, t_s, start=None) -> SpeedForecast:
    if start is None:
        start = model.X_train_[-1]
    return model.forecast(start, horizon, t_s)


# Three-point Gauss-Hermite rule for N(0, s^2): nodes 0, +-sqrt(3)s.
GH3_WEIGHTS = (Fraction(1, 6), Fraction(2, 3), Fraction(1, 6))


def discretize(std) -> DisturbanceLevels:
    if std < 0:
        raise ValueError("standard deviation must be non-negative")
    node = np.sqrt(3.0) * std
    return DisturbanceLevels(np.array([-node, 0.0, node]),
                             np.array([float(w) for w in GH3_WEIGHTS]))


def implied_accel(mean, t_s, a_min=-np.inf, a_max=np.inf):
    """Forward-difference acceleration of a speed forecast, last entry repeated."""
    mean = np.asarray(mean, dtype=float)
    if len(mean) < 2:
        raise ValueError("need at least two forecast points")
    acc = np.diff(mean) / t_s
    acc = np.append(acc, acc[-1])
    return np.clip(acc, a_min, a_max)
