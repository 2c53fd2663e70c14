"""Single-output Gaussian-process regression on a scalar input.

Hyperparameters are handled in log space throughout: ``(log tau, log lam,
log sigma)`` for the input scale, output scale and observation-noise
standard deviation.  The covariance of the observed targets is

    K = k(x, x') + (sigma**2 + jitter) * I

with ``k`` either the squared exponential ``lam**2 exp(-(x-x')**2 / (2 tau**2))``
or the linear kernel ``lam**2 x x'``.  For the linear kernel, inputs are
centred on the training mean before use, so the fit does not depend on where
the score origin happens to sit.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateData, FactorizationFailure
from .optimize import OptimizerOptions, maximize

LOG_2PI = math.log(2.0 * math.pi)
JITTER_LADDER = (1e-10, 1e-6, 1e-4)


class KernelKind(enum.Enum):
    SE = "se"
    LINEAR = "linear"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown kernel {value!r}; expected 'se' or 'linear'") from None


@dataclass(frozen=True)
class HyperParams:
    """Log-hyperparameters of one voxel's GP."""

    log_input_scale: float = 0.0
    log_output_scale: float = 0.0
    log_noise: float = 0.0

    def __post_init__(self):
        for name in ("log_input_scale", "log_output_scale", "log_noise"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)

    @property
    def tau(self):
        return math.exp(self.log_input_scale)

    @property
    def lam(self):
        return math.exp(self.log_output_scale)

    @property
    def sigma(self):
        return math.exp(self.log_noise)

    def as_array(self):
        return np.array([self.log_input_scale, self.log_output_scale, self.log_noise])

    @classmethod
    def from_array(cls, values):
        a, b, c = (float(v) for v in values)
        return cls(a, b, c)

    @classmethod
    def from_natural(cls, tau, lam, sigma):
        return cls(math.log(tau), math.log(lam), math.log(sigma))


@dataclass(frozen=True)
class GpDataset:
    inputs: np.ndarray
    targets: np.ndarray
    mean_value: float = 0.0

    def __post_init__(self):
        x = np.array(self.inputs, dtype=float).reshape(-1)
        y = np.array(self.targets, dtype=float).reshape(-1)
        if x.size == 0 or x.size != y.size:
            raise ValueError(f"inputs ({x.size}) and targets ({y.size}) must be non-empty and equal length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("inputs and targets must be finite")
        m = float(self.mean_value)
        if not math.isfinite(m):
            raise ValueError("mean_value must be finite")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "mean_value", m)

    @property
    def n(self):
        return self.inputs.size

    def residuals(self):
        return self.targets - self.mean_value


@dataclass(frozen=True)
class PredictiveGaussian:
    mean: float
    variance: float

    @property
    def std(self):
        return math.sqrt(self.variance)

    def logpdf(self, value):
        return -0.5 * (LOG_2PI + math.log(self.variance) + (value - self.mean) ** 2 / self.variance)


@dataclass(frozen=True)
class VoxelFit:
    """Outcome of one per-voxel optimization."""

    params: HyperParams
    lml: float
    status: str  # "ok", "stall", "degenerate" or "failed"
    n_iter: int = 0
    grad_norm: float = float("nan")


def _theta_array(theta):
    if isinstance(theta, HyperParams):
        return theta.as_array()
    return np.asarray(theta, dtype=float)


def _cross_cov(kind, ell, xa, xb):
    """Noise-free kernel between two input vectors (no centring applied)."""
    with np.errstate(over="ignore", invalid="ignore"):
        lam2 = np.exp(2.0 * ell[1])
        if kind is KernelKind.SE:
            d = np.subtract.outer(xa, xb)
            return lam2 * np.exp(-0.5 * d * d * np.exp(-2.0 * ell[0]))
        return lam2 * np.multiply.outer(xa, xb)


def _working_inputs(kind, x):
    """Inputs as the kernel sees them, plus the centring offset."""
    if kind is KernelKind.LINEAR:
        centre = float(np.mean(x))
        return x - centre, centre
    return x, 0.0


def kernel_eval(kind, theta, xi, xj, include_noise=False):
    """Covariance between two scalar inputs.

    ``include_noise`` marks ``xi`` and ``xj`` as the same observation, in
    which case the noise variance is added.
    """
    kind = KernelKind.parse(kind)
    ell = _theta_array(theta)
    value = float(_cross_cov(kind, ell, np.array([float(xi)]), np.array([float(xj)]))[0, 0])
    if include_noise:
        value += math.exp(2.0 * ell[2])
    return value


def _jitter_ladder(jitter):
    return (jitter,) + tuple(j for j in JITTER_LADDER if j > jitter)


def _factorize(kind, ell, x, jitter):
    """Return ``(K, L)`` with the smallest jitter on the ladder that factorizes."""
    base = _cross_cov(kind, ell, x, x)
    with np.errstate(over="ignore"):
        noise = np.exp(2.0 * ell[2])
    idx = np.diag_indices_from(base)
    for j in _jitter_ladder(jitter):
        K = base.copy()
        K[idx] += noise + j
        if not np.all(np.isfinite(K)):
            break
        try:
            return K, np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            continue
    raise FactorizationFailure(
        f"covariance not positive definite for log-hyperparameters {np.round(ell, 4).tolist()}"
    )


def kernel_matrix(kind, theta, xs, jitter=1e-10):
    """Noise-inclusive covariance matrix over ``xs``.

    The diagonal carries ``sigma**2 + jitter``; if the matrix does not admit a
    Cholesky factor, jitter is escalated along 1e-10, 1e-6, 1e-4 before
    :class:`FactorizationFailure` is raised.
    """
    kind = KernelKind.parse(kind)
    xs = np.asarray(xs, dtype=float).reshape(-1)
    if xs.size == 0:
        raise ValueError("xs must be non-empty")
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    K, _ = _factorize(kind, _theta_array(theta), xs, jitter)
    return K


def condition_gaussian(mu, sigma, observed_idx, observed_vals):
    """Conditional distribution of the unobserved block of a joint Gaussian.

    Returns ``(mean, cov)`` of the coordinates not in ``observed_idx`` given
    that the observed coordinates take ``observed_vals``::

        mean = mu_u + S_uo S_oo^-1 (y_o - mu_o)
        cov  = S_uu - S_uo S_oo^-1 S_ou
    """
    mu = np.asarray(mu, dtype=float).reshape(-1)
    sigma = np.asarray(sigma, dtype=float)
    obs = np.asarray(observed_idx, dtype=int).reshape(-1)
    vals = np.asarray(observed_vals, dtype=float).reshape(-1)
    if sigma.shape != (mu.size, mu.size):
        raise ValueError("sigma must be square and match mu")
    if obs.size != vals.size:
        raise ValueError("observed_idx and observed_vals differ in length")
    unobs = np.setdiff1d(np.arange(mu.size), obs)
    s_oo = sigma[np.ix_(obs, obs)]
    s_uo = sigma[np.ix_(unobs, obs)]
    try:
        L = np.linalg.cholesky(s_oo)
    except np.linalg.LinAlgError:
        raise FactorizationFailure("observed block of sigma is singular") from None
    # A = S_uo S_oo^-1 via two triangular solves
    A = solve_triangular(L.T, solve_triangular(L, s_uo.T, lower=True), lower=False).T
    mean = mu[unobs] + A @ (vals - mu[obs])
    cov = sigma[np.ix_(unobs, unobs)] - A @ s_uo.T
    return mean, 0.5 * (cov + cov.T)


class _Evidence:
    """Log evidence and gradient for one dataset, with the input geometry cached.

    Per-voxel optimizers call this hundreds of times on tiny matrices, so the
    pairwise distances and residuals are computed once up front.
    """

    def __init__(self, kind, data, jitter):
        self.kind = kind
        self.jitter = jitter
        self.x, _ = _working_inputs(kind, data.inputs)
        self.r = data.residuals()
        self.n = self.x.size
        if kind is KernelKind.SE:
            d = np.subtract.outer(self.x, self.x)
            self.geom = d * d
        else:
            self.geom = np.multiply.outer(self.x, self.x)
        self.const = -0.5 * self.n * LOG_2PI

    def _factor(self, ell):
        lam2 = math.exp(2.0 * ell[1])
        if self.kind is KernelKind.SE:
            Kf = lam2 * np.exp(self.geom * (-0.5 * math.exp(-2.0 * ell[0])))
        else:
            Kf = lam2 * self.geom
        noise = math.exp(2.0 * ell[2])
        step = self.n + 1
        for j in _jitter_ladder(self.jitter):
            K = Kf.copy()
            K.flat[::step] += noise + j
            try:
                L = np.linalg.cholesky(K)
            except np.linalg.LinAlgError:
                continue
            if np.all(np.isfinite(L)):
                return Kf, L
        raise FactorizationFailure(
            f"covariance not positive definite for log-hyperparameters {np.round(ell, 4).tolist()}"
        )

    def __call__(self, ell, want_grad=True):
        Kf, L = self._factor(ell)
        Linv = np.linalg.inv(L)
        Kinv = Linv.T @ Linv
        alpha = Kinv @ self.r
        logdet = 2.0 * float(np.log(L.diagonal()).sum())
        lml = self.const - 0.5 * logdet - 0.5 * float(self.r @ alpha)
        if not want_grad:
            return lml, None
        W = np.outer(alpha, alpha) - Kinv
        grad = np.empty(3)
        if self.kind is KernelKind.SE:
            grad[0] = 0.5 * float((W * Kf * self.geom).sum()) * math.exp(-2.0 * ell[0])
        else:
            grad[0] = 0.0
        grad[1] = float((W * Kf).sum())  # dK/dlog(lam) = 2 Kf, times 1/2
        grad[2] = float(W.trace()) * math.exp(2.0 * ell[2])
        return lml, grad


def _lml_parts(kind, ell, data, jitter, want_grad):
    return _Evidence(kind, data, jitter)(np.asarray(ell, dtype=float), want_grad)


def evidence_function(kind, data, jitter=1e-10):
    """Return ``f(ell) -> (lml, grad)`` for repeated evaluation on one dataset."""
    return _Evidence(KernelKind.parse(kind), data, jitter)


def log_marginal_likelihood(kind, theta, data, jitter=1e-10):
    """Log evidence of ``data.targets`` under the GP with hyperparameters ``theta``."""
    kind = KernelKind.parse(kind)
    return _lml_parts(kind, _theta_array(theta), data, jitter, False)[0]


def lml_gradient(kind, theta, data, jitter=1e-10):
    """Gradient of the log evidence with respect to ``(log tau, log lam, log sigma)``."""
    kind = KernelKind.parse(kind)
    return _lml_parts(kind, _theta_array(theta), data, jitter, True)[1]


def lml_and_gradient(kind, theta, data, jitter=1e-10):
    kind = KernelKind.parse(kind)
    return _lml_parts(kind, _theta_array(theta), data, jitter, True)


def predict(kind, theta, data, x_star, include_noise=False, jitter=1e-10):
    """Predictive distribution of the latent function at ``x_star``.

    With ``include_noise`` the observation noise is added, giving the
    distribution of a new noisy measurement instead.
    """
    kind = KernelKind.parse(kind)
    ell = _theta_array(theta)
    x, centre = _working_inputs(kind, data.inputs)
    xs = np.array([float(x_star) - centre])
    _, L = _factorize(kind, ell, x, jitter)
    k_star = _cross_cov(kind, ell, x, xs)[:, 0]
    v = solve_triangular(L, k_star, lower=True)
    w = solve_triangular(L, data.residuals(), lower=True)
    mean = data.mean_value + float(v @ w)
    var = float(_cross_cov(kind, ell, xs, xs)[0, 0]) - float(v @ v)
    var = max(var, 0.0)
    if include_noise:
        var += math.exp(2.0 * ell[2])
    return PredictiveGaussian(mean, var)


def is_degenerate(data):
    """True when a voxel's targets cannot inform the hyperparameters."""
    if data.n < 2:
        return True
    y = data.targets
    scale = max(1.0, float(np.max(np.abs(y))))
    return float(np.ptp(y)) <= 8.0 * np.finfo(float).eps * scale


def optimize_voxel(kind, data, init=None, opts=None):
    """Maximize the log evidence from ``init``; never lowers the evidence.

    Degenerate data (fewer than two points, or constant targets) return
    ``init`` with the noise floored at the optimizer bound and status
    ``"degenerate"``.  A stalled line search returns the best iterate with
    status ``"stall"``.
    """
    kind = KernelKind.parse(kind)
    opts = opts or OptimizerOptions()
    init = init or HyperParams()
    x0 = np.clip(init.as_array(), -opts.bound, opts.bound)

    if is_degenerate(data):
        x0[2] = -opts.bound
        params = HyperParams.from_array(x0)
        try:
            lml = log_marginal_likelihood(kind, params, data, opts.jitter)
        except FactorizationFailure:
            lml = float("nan")
        return VoxelFit(params, lml, "degenerate")

    try:
        res = maximize(_Evidence(kind, data, opts.jitter), x0, opts)
    except FactorizationFailure:
        return VoxelFit(HyperParams.from_array(x0), float("nan"), "failed")
    status = "stall" if res.status == "stall" else "ok"
    return VoxelFit(HyperParams.from_array(res.x), res.fun, status, res.n_iter, res.grad_norm)


def fit_voxel(kind, data, init=None, opts=None):
    """Maximum-likelihood log-hyperparameters for one voxel.

    Thin wrapper over :func:`optimize_voxel` that drops the diagnostics.
    """
    return optimize_voxel(kind, data, init, opts).params


def check_fit(kind, data, init=None, opts=None):
    """Like :func:`fit_voxel` but raises :class:`DegenerateData` on unusable data."""
    fit = optimize_voxel(kind, data, init, opts)
    if fit.status == "degenerate":
        raise DegenerateData("targets are constant or fewer than two points")
    return fit
