"""Gradient-based minimization: NCG and L-BFGS with a strong-Wolfe search.

Both drivers operate on flat parameter vectors through a single callback
returning (value, gradient).  Optional per-cell bounds are enforced by
projection (clipping), a deliberate deviation from the textbook
unconstrained methods so that velocity positivity survives every trial
step of the line search.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class Method(enum.Enum):
    NCG = "ncg"
    LBFGS = "lbfgs"


@dataclass(frozen=True)
class LineSearchConfig:
    """Strong-Wolfe line-search constants.

    initial_step of None picks the first trial so that the model changes
    by at most 1% of its largest entry, a conservative default for
    velocity updates whose misfit is expensive to evaluate.
    """

    c1: float = 1e-4
    c2: float = 0.9
    max_trials: int = 25
    initial_step: float | None = None

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.max_trials < 1:
            raise ValueError("max_trials must be at least 1")
        if self.initial_step is not None and self.initial_step <= 0:
            raise ValueError("initial_step must be positive")


@dataclass(frozen=True)
class OptimizerConfig:
    method: Method = Method.LBFGS
    memory: int = 5
    max_iters: int = 20
    line_search: LineSearchConfig = field(default_factory=LineSearchConfig)
    bounds: tuple | None = None
    gtol: float = 0.0

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be at least 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if self.gtol < 0:
            raise ValueError("gtol must be nonnegative")


@dataclass
class OptimizeResult:
    """Best-seen iterate, its value/gradient and the accepted-value history.

    history[0] is the starting value; one entry is appended per accepted
    step, so the sequence is strictly decreasing while the line search
    succeeds.  line_search_failed marks an early stop after max_trials
    unsuccessful step lengths.
    """

    x: np.ndarray
    value: float
    gradient: np.ndarray
    history: np.ndarray
    iterations: int
    converged: bool
    line_search_failed: bool


def _project(x, bounds):
    if bounds is None:
        return x
    lo, hi = bounds
    return np.clip(x, lo, hi)


def _free_mask(x, g, bounds):
    """Coordinates allowed to move along -g without leaving the bounds."""
    if bounds is None:
        return np.ones_like(x, dtype=bool)
    lo, hi = bounds
    blocked_lo = (x <= lo) & (g > 0)
    blocked_hi = (x >= hi) & (g < 0)
    return ~(blocked_lo | blocked_hi)


class _WolfeSearch:
    """Strong-Wolfe search along x + alpha * p with projection onto bounds.

    phi(alpha) = f(project(x + alpha p)); its derivative uses the gradient
    restricted to coordinates still moving (unclipped), which reduces to
    the plain g.p in the unconstrained case.
    """

    def __init__(self, oracle, x, p, f0, g0, cfg, bounds):
        self.oracle = oracle
        self.x = x
        self.p = p
        self.cfg = cfg
        self.bounds = bounds
        self.f0 = f0
        self.d0 = self._slope(x, g0)
        self.trials = 0

    def _slope(self, xa, ga):
        mask = _free_mask(xa, ga, self.bounds)
        return float((ga * self.p)[mask].sum())

    def _eval(self, alpha):
        self.trials += 1
        xa = _project(self.x + alpha * self.p, self.bounds)
        f, g = self.oracle(xa)
        return float(f), np.asarray(g, dtype=float), xa

    def run(self, alpha0):
        """Returns (alpha, f, g, x, ok); ok False exhausts max_trials."""
        c1, c2 = self.cfg.c1, self.cfg.c2
        a_prev, f_prev, d_prev = 0.0, self.f0, self.d0
        a = alpha0
        best = None
        while self.trials < self.cfg.max_trials:
            f, g, xa = self._eval(a)
            if not np.isfinite(f):
                a = 0.5 * (a_prev + a)
                continue
            if f > self.f0 + c1 * a * self.d0 or (best is not None
                                                  and f >= f_prev):
                return self._zoom(a_prev, f_prev, d_prev, a, f)
            d = self._slope(xa, g)
            best = (a, f, g, xa)
            if abs(d) <= -c2 * self.d0:
                return a, f, g, xa, True
            if d >= 0:
                return self._zoom(a, f, d, a_prev, f_prev)
            a_next = self._extrapolate(a, f, d, a_prev, f_prev)
            a_prev, f_prev, d_prev = a, f, d
            a = a_next
        if best is not None:
            return best + (False,)
        return None, self.f0, None, self.x, False

    @staticmethod
    def _extrapolate(a, f, d, a_prev, f_prev):
        """Next bracketing trial past a, by quadratic extrapolation.

        The one-dimensional slope at a is still negative, so the minimum
        lies ahead; the quadratic through (a, f, d) and (a_prev, f_prev)
        predicts where (exactly, for quadratic objectives).  Falls back to
        doubling when the prediction is degenerate or out of the trusted
        growth range.
        """
        span = a_prev - a
        denom = f_prev - f - d * span
        if denom <= 0 or not np.isfinite(denom):
            return 2.0 * a
        cand = a - 0.5 * d * span * span / denom
        if not np.isfinite(cand) or cand < 1.1 * a or cand > 100.0 * a:
            return 2.0 * a
        return cand

    @staticmethod
    def _interp(lo, f_lo, d_lo, hi, f_hi):
        """Minimizer of the quadratic through (lo, f_lo, d_lo) and f_hi.

        Exact for quadratic objectives, so the zoom phase lands on the
        one-dimensional minimum in a single trial there; falls back to
        bisection when the interpolant is degenerate or the candidate
        sits too close to an endpoint.
        """
        span = hi - lo
        denom = f_hi - f_lo - d_lo * span
        if denom <= 0 or not np.isfinite(denom):
            return lo + 0.5 * span
        a = lo - 0.5 * d_lo * span * span / denom
        t = (a - lo) / span
        if not np.isfinite(t) or t < 0.05 or t > 0.95:
            return lo + 0.5 * span
        return a

    def _zoom(self, lo, f_lo, d_lo, hi, f_hi):
        c1, c2 = self.cfg.c1, self.cfg.c2
        result = None
        while self.trials < self.cfg.max_trials:
            a = self._interp(lo, f_lo, d_lo, hi, f_hi)
            f, g, xa = self._eval(a)
            if not np.isfinite(f) or f > self.f0 + c1 * a * self.d0 \
                    or f >= f_lo:
                hi, f_hi = a, f
                continue
            d = self._slope(xa, g)
            result = (a, f, g, xa)
            if abs(d) <= -c2 * self.d0:
                return a, f, g, xa, True
            if d * (hi - lo) >= 0:
                hi, f_hi = lo, f_lo
            lo, f_lo, d_lo = a, f, d
        if result is not None:
            return result + (False,)
        return None, self.f0, None, self.x, False


class _LbfgsDirection:
    """Two-loop recursion over the most recent curvature pairs."""

    def __init__(self, memory):
        self.memory = memory
        self.pairs = []

    def push(self, s, y):
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            self.pairs.append((s, y, sy))
            if len(self.pairs) > self.memory:
                self.pairs.pop(0)

    def apply(self, g):
        q = g.copy()
        alphas = []
        for s, y, sy in reversed(self.pairs):
            a = float(s @ q) / sy
            alphas.append(a)
            q -= a * y
        if self.pairs:
            s, y, sy = self.pairs[-1]
            q *= sy / float(y @ y)
        for (s, y, sy), a in zip(self.pairs, reversed(alphas)):
            b = float(y @ q) / sy
            q += (a - b) * s
        return -q


def _initial_alpha(cfg, x, p):
    if cfg.line_search.initial_step is not None:
        return cfg.line_search.initial_step
    pmax = float(np.max(np.abs(p)))
    if pmax == 0.0:
        return 1.0
    return 0.01 * max(float(np.max(np.abs(x))), 1.0) / pmax


def minimize(cfg: OptimizerConfig, x0, oracle, callback=None) -> OptimizeResult:
    """Minimize oracle(x) -> (value, gradient) starting from x0.

    Stops on max_iters, a projected-gradient norm at or below gtol, or a
    failed line search; always reports the best iterate seen.  Each
    accepted step satisfies the strong Wolfe conditions (except the rare
    trial-budget stop, which keeps the best sufficient-decrease point and
    raises the line_search_failed flag on the following failure).
    callback(iteration, x, value) runs after every accepted step.
    """
    x = _project(np.asarray(x0, dtype=float).copy(), cfg.bounds)
    f, g = oracle(x)
    f = float(f)
    g = np.asarray(g, dtype=float)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise ValueError("objective or gradient is not finite at the "
                         "starting point")

    history = [f]
    lbfgs = _LbfgsDirection(cfg.memory) if cfg.method is Method.LBFGS else None
    g_prev = None
    p_prev = None
    alpha_prev = None
    converged = False
    ls_failed = False
    it = 0

    for it in range(1, cfg.max_iters + 1):
        pg = np.where(_free_mask(x, g, cfg.bounds), g, 0.0)
        gnorm = float(np.linalg.norm(pg))
        if gnorm <= cfg.gtol:
            converged = True
            it -= 1
            break

        if cfg.method is Method.LBFGS:
            p = lbfgs.apply(pg)
        else:
            if g_prev is None:
                p = -pg
            else:
                beta = max(0.0, float(pg @ (pg - g_prev))
                           / float(g_prev @ g_prev))
                p = -pg + beta * p_prev
            if float(p @ pg) >= 0.0:
                p = -pg
        slope = float(p @ pg)
        if slope >= 0.0:
            p = -pg
            slope = float(p @ pg)

        if cfg.method is Method.LBFGS and lbfgs.pairs:
            alpha0 = 1.0
        elif cfg.method is Method.NCG and alpha_prev is not None:
            alpha0 = alpha_prev
        else:
            alpha0 = _initial_alpha(cfg, x, p)

        search = _WolfeSearch(oracle, x, p, f, g, cfg.line_search, cfg.bounds)
        alpha, f_new, g_new, x_new, ok = search.run(alpha0)
        if alpha is None:
            ls_failed = True
            it -= 1
            break

        s = x_new - x
        if lbfgs is not None:
            lbfgs.push(s, g_new - g)
        g_prev, p_prev, alpha_prev = pg, p, alpha
        x, f, g = x_new, f_new, g_new
        history.append(f)
        logger.info("iter %4d  misfit %.8e  gnorm %.4e  step %.4e  "
                    "trials %d", it, f, float(np.linalg.norm(g)), alpha,
                    search.trials)
        if callback is not None:
            callback(it, x, f)
        if not ok:
            ls_failed = True
            break

    pg = np.where(_free_mask(x, g, cfg.bounds), g, 0.0)
    if float(np.linalg.norm(pg)) <= cfg.gtol:
        converged = True
    return OptimizeResult(x=x, value=f, gradient=g,
                          history=np.array(history), iterations=it,
                          converged=converged, line_search_failed=ls_failed)
