"""Box-guarded nonlinear conjugate gradient with a strong-Wolfe line search.

The line search is written out rather than taken from ``scipy.optimize``
because objective evaluations can fail (a covariance matrix that will not
factorize); a failed trial point is treated as "step too long" and the
bracket shrinks, which the SciPy routines do not support.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import FactorizationFailure


@dataclass(frozen=True)
class OptimizerOptions:
    """Settings shared by every per-voxel optimization.

    Parameters
    ----------
    max_iter : int
        Maximum number of conjugate-gradient iterations.
    gtol : float
        Convergence threshold on the (projected) gradient norm.
    bound : float
        Every coordinate is confined to ``[-bound, bound]``; in log space
        this keeps ``exp`` well away from overflow.
    jitter : float
        Diagonal jitter added before the first Cholesky attempt.
    c1, c2 : float
        Strong-Wolfe constants; ``c2 = 0.1`` is the usual choice for CG.
    """

    max_iter: int = 100
    gtol: float = 1e-5
    bound: float = 10.0
    jitter: float = 1e-10
    c1: float = 1e-4
    c2: float = 0.1
    max_linesearch: int = 30

    def __post_init__(self):
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")
        if not self.gtol > 0:
            raise ValueError("gtol must be positive")
        if not self.bound > 0:
            raise ValueError("bound must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    status: str  # "converged", "max_iter" or "stall"
    history: list = field(default_factory=list)

    @property
    def grad_norm(self):
        return float(np.linalg.norm(self.grad))


class _Objective:
    """Counts evaluations and maps factorization failures to +inf."""

    def __init__(self, fun_and_grad):
        self.fun_and_grad = fun_and_grad
        self.n_eval = 0

    def __call__(self, x):
        self.n_eval += 1
        try:
            f, g = self.fun_and_grad(x)
        except FactorizationFailure:
            return np.inf, None
        f = float(f)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            return np.inf, None
        return f, np.asarray(g, dtype=float)


def _projected(g, x, bound):
    """Zero gradient components that point out of the box at an active bound."""
    pg = g.copy()
    at_hi = (x >= bound) & (g < 0)
    at_lo = (x <= -bound) & (g > 0)
    pg[at_hi | at_lo] = 0.0
    return pg


def _max_step(x, p, bound):
    with np.errstate(divide="ignore", invalid="ignore"):
        room = np.where(p > 0, (bound - x) / p, np.where(p < 0, (-bound - x) / p, np.inf))
    return float(np.min(room))


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolating two points with slopes, or None."""
    if a == b:
        return None
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def _line_search(obj, x, p, f0, g0, a_init, amax, opts):
    """Strong-Wolfe step along ``p``; returns (alpha, f, g) or None."""
    d0 = float(g0 @ p)
    if d0 >= 0:
        return None

    def phi(a):
        f, g = obj(np.clip(x + a * p, -opts.bound, opts.bound))
        return f, g, (float(g @ p) if g is not None else np.nan)

    def zoom(lo, f_lo, d_lo, g_lo, hi, f_hi, d_hi):
        for _ in range(opts.max_linesearch):
            width = hi - lo
            trial = None
            if np.isfinite(f_hi) and np.isfinite(d_hi):
                trial = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            lo_edge, hi_edge = sorted((lo + 0.1 * width, hi - 0.1 * width))
            if trial is None or not lo_edge <= trial <= hi_edge:
                trial = lo + 0.5 * width
            f_t, g_t, d_t = phi(trial)
            if not np.isfinite(f_t) or f_t > f0 + opts.c1 * trial * d0 or f_t >= f_lo:
                hi, f_hi, d_hi = trial, f_t, d_t
            else:
                if abs(d_t) <= -opts.c2 * d0:
                    return trial, f_t, g_t
                if d_t * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo, g_lo = trial, f_t, d_t, g_t
        # bracket exhausted: the low end still satisfies sufficient decrease
        if lo > 0:
            return lo, f_lo, g_lo
        return None

    a_prev, f_prev, d_prev, g_prev = 0.0, f0, d0, g0
    a = min(a_init, amax)
    for i in range(opts.max_linesearch):
        if a <= 0:
            return None
        f_a, g_a, d_a = phi(a)
        if not np.isfinite(f_a) or f_a > f0 + opts.c1 * a * d0 or (i > 0 and f_a >= f_prev):
            return zoom(a_prev, f_prev, d_prev, g_prev, a, f_a, d_a)
        if abs(d_a) <= -opts.c2 * d0:
            return a, f_a, g_a
        if d_a >= 0:
            return zoom(a, f_a, d_a, g_a, a_prev, f_prev, d_prev)
        if a >= amax:
            return a, f_a, g_a
        a_prev, f_prev, d_prev, g_prev = a, f_a, d_a, g_a
        a = min(2.0 * a, amax)
    if a_prev > 0:
        return a_prev, f_prev, g_prev
    return None


def minimize(fun_and_grad, x0, opts=None):
    """Minimize ``fun_and_grad`` (returning value and gradient) inside the box.

    Uses Polak-Ribiere+ directions with automatic restarts.  Every accepted
    step satisfies the sufficient-decrease condition, so the objective is
    monotonically non-increasing and the final iterate is the best one seen.

    Raises
    ------
    FactorizationFailure
        If the objective cannot be evaluated at the starting point.
    """
    opts = opts or OptimizerOptions()
    obj = _Objective(fun_and_grad)
    x = np.clip(np.asarray(x0, dtype=float).copy(), -opts.bound, opts.bound)
    f, g = obj(x)
    if g is None:
        raise FactorizationFailure("objective not finite at starting point")
    history = [f]
    pg = _projected(g, x, opts.bound)
    p = -pg
    prev_step_dot = None
    status = "max_iter"
    n_iter = 0
    while n_iter < opts.max_iter:
        if np.linalg.norm(pg) <= opts.gtol:
            status = "converged"
            break
        p = np.where(pg == 0.0, 0.0, p)
        if not float(pg @ p) < 0:
            p = -pg
        amax = _max_step(x, p, opts.bound)
        gp = float(g @ p)
        a0 = 1.0 / max(1.0, float(np.linalg.norm(p)))
        if prev_step_dot is not None and gp < 0:
            a0 = prev_step_dot / gp
        step = _line_search(obj, x, p, f, g, a0, amax, opts)
        if step is None and not np.allclose(p, -pg):
            p = -pg
            amax = _max_step(x, p, opts.bound)
            step = _line_search(obj, x, p, f, g, 1.0 / max(1.0, float(np.linalg.norm(p))), amax, opts)
        if step is None:
            status = "stall"
            break
        a, f_new, g_new = step
        x = np.clip(x + a * p, -opts.bound, opts.bound)
        n_iter += 1
        prev_step_dot = a * gp
        pg_new = _projected(g_new, x, opts.bound)
        beta = max(0.0, float(pg_new @ (pg_new - pg)) / max(float(pg @ pg), 1e-300))
        if n_iter % x.size == 0:
            beta = 0.0
        p = -pg_new + beta * p
        f, g, pg = f_new, g_new, pg_new
        history.append(f)
    else:
        if np.linalg.norm(pg) <= opts.gtol:
            status = "converged"
    return OptimResult(x=x, fun=f, grad=pg, n_iter=n_iter, n_eval=obj.n_eval,
                       status=status, history=history)


def maximize(fun_and_grad, x0, opts=None):
    """Maximize; the returned ``fun``/``grad``/``history`` are on the original scale."""

    def neg(x):
        f, g = fun_and_grad(x)
        return -f, -np.asarray(g)

    res = minimize(neg, x0, opts)
    res.fun = -res.fun
    res.grad = -res.grad
    res.history = [-h for h in res.history]
    return res
