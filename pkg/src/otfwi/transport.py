"""Entropic optimal-transport solvers on discrete 1D measures.

Contains the Sinkhorn matrix-scaling solver for balanced entropic OT, the
scaling solver for KL-relaxed unbalanced OT, the mixed L1/Wasserstein
objective with its gradient, and a small exact LP solver used as a test
oracle.

Both solvers iterate on the dual potentials phi, psi.  Updates use direct
Gibbs-kernel matvecs (u = e^{phi/eps} against K = e^{-C/eps}) when epsilon
is large relative to the cost scale, and log-sum-exp updates otherwise,
which keeps tiny epsilon finite at the cost of an exponential per sweep.
Cold starts anneal epsilon from the cost scale down to the target value,
warm-starting the potentials at each level; this steps around the metastable
plateaus of the plain iteration at small epsilon.  The unbalanced sweep adds
a closed-form joint translation of (phi, psi), which removes the constant
mode whose contraction rate degrades like 1 - O(eps/eps_u).  When sweeps
stall before reaching the requested tolerance, the solver switches to damped
Newton steps on the smooth concave dual, which converge quadratically at any
epsilon.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .measures import DiscreteMeasure, kl_divergence, normalize_mass

# Direct-kernel sweeps are used when eps / max(C) is at least this ratio;
# below it the kernel e^{-C/eps} underflows and sweeps go through log-sum-exp.
_FAST_KERNEL_RATIO = 1e-2

# The balanced solver only reports convergence once the plan marginals match
# the inputs this closely in L1: the relative-change rule alone can fire on
# metastable plateaus where the plan is still far from feasible.
_MARGINAL_STOP_TOL = 1e-6

# Epsilon annealing for cold starts: first level, level spacing, sweeps per
# level.  Annealing stops one factor above the target epsilon.
_ANNEAL_START_FACTOR = 0.5
_ANNEAL_LEVEL_FACTOR = 4.0
_ANNEAL_SWEEPS = 40

# Sweeps are declared stalled when the dual residual shrinks by less than
# half over this many iterations; the solver then switches to Newton steps.
_STALL_WINDOW = 20

# Tolerance on the unit-mass precondition of the balanced solver.
_MASS_BALANCE_TOL = 1e-9


@dataclass(frozen=True)
class SolverConfig:
    """Parameters shared by the scaling solvers.

    epsilon    entropic regularization of the transport plan
    epsilon_u  weight of the KL marginal penalties (unbalanced OT only)
    lambda_m   weight of the squared mass-difference term (mixed only)
    eta        relative-change stopping threshold on the distance value
    max_iters  iteration cap; hitting it yields converged=False
    """

    epsilon: float = 1e-3
    epsilon_u: float = 1.0
    lambda_m: float = 0.0
    eta: float = 1e-9
    max_iters: int = 500

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.epsilon_u <= 0:
            raise ValueError("epsilon_u must be positive")
        if self.lambda_m < 0:
            raise ValueError("lambda_m must be nonnegative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class TransportResult:
    """Output of one transport solve.

    plan may be None when the caller asked to skip materializing it (the
    distance and gradient never need the full matrix).  potential_a and
    potential_b are the converged dual potentials phi, psi; they can seed a
    warm start of a neighbouring problem via init_potentials.  iterations
    counts sweeps and Newton steps at the target epsilon; annealing warm-up
    sweeps are preparatory and excluded.
    """

    plan: Optional[np.ndarray]
    distance: float
    grad_a: np.ndarray
    iterations: int
    converged: bool
    potential_a: np.ndarray
    potential_b: np.ndarray


def _softmin_rows(psi: np.ndarray, C: np.ndarray, eps: float) -> np.ndarray:
    """Rowwise -eps * log sum_j exp((psi_j - C_ij)/eps), -inf entries ok."""
    M = (psi[None, :] - C) / eps
    mx = np.max(M, axis=1)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(under="ignore"):
        return -eps * (mx + np.log(np.exp(M - mx[:, None]).sum(axis=1)))


def _softmin_cols(phi: np.ndarray, C: np.ndarray, eps: float) -> np.ndarray:
    M = (phi[:, None] - C) / eps
    mx = np.max(M, axis=0)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(under="ignore"):
        return -eps * (mx + np.log(np.exp(M - mx[None, :]).sum(axis=0)))


def _relative_change(d_new: float, d_old: Optional[float]) -> float:
    if d_old is None:
        return np.inf
    if d_old == 0.0:
        return 0.0 if d_new == 0.0 else np.inf
    return abs(d_new / d_old - 1.0)


def _check_measure_pair(a: DiscreteMeasure, b: DiscreteMeasure, C: np.ndarray):
    C = np.asarray(C, dtype=float)
    if C.shape != (len(a), len(b)):
        raise ValueError(
            f"cost matrix shape {C.shape} does not match measures "
            f"({len(a)}, {len(b)})"
        )
    return C


class _DualSolver:
    """Shared engine for the balanced and unbalanced entropic duals.

    eps_u=None selects the balanced problem (the eps_u -> infinity limit of
    the unbalanced one: marginal constraints instead of KL penalties, and a
    gauge freedom phi -> phi + s, psi -> psi - s that Newton pins).
    """

    def __init__(self, a, b, C, eps, eps_u=None):
        self.a = a
        self.b = b
        self.C = C
        self.eps = eps
        self.eps_u = eps_u
        self.ia = a > 0
        self.ib = b > 0
        self.gamma = 1.0 if eps_u is None else eps_u / (eps_u + eps)
        with np.errstate(divide="ignore"):
            self.la = eps * np.log(a)
            self.lb = eps * np.log(b)
        cmax = float(np.max(C)) if C.size else 0.0
        self.fast = eps >= _FAST_KERNEL_RATIO * cmax
        self._KC = None
        if self.fast:
            with np.errstate(under="ignore"):
                self.K = np.exp(-C / eps)
        self.phi = np.where(self.ia, 0.0, -np.inf)
        self.psi = np.where(self.ib, 0.0, -np.inf)

    def set_potentials(self, phi, psi):
        self.phi = np.where(self.ia, phi, -np.inf)
        self.psi = np.where(self.ib, psi, -np.inf)

    def _smin_rows(self, psi):
        if self.fast:
            with np.errstate(under="ignore", over="ignore"):
                v = np.exp(psi / self.eps)
                s = self.K @ v
            if np.all(np.isfinite(s)) and not np.any((s <= 0) & self.ia):
                with np.errstate(divide="ignore"):
                    return -self.eps * np.log(s)
            # The scaling vectors left the float range (large potentials
            # relative to epsilon); degrade to log-sum-exp for this solve.
            self.fast = False
        return _softmin_rows(psi, self.C, self.eps)

    def _smin_cols(self, phi):
        if self.fast:
            with np.errstate(under="ignore", over="ignore"):
                u = np.exp(phi / self.eps)
                s = self.K.T @ u
            if np.all(np.isfinite(s)) and not np.any((s <= 0) & self.ib):
                with np.errstate(divide="ignore"):
                    return -self.eps * np.log(s)
            self.fast = False
        return _softmin_cols(phi, self.C, self.eps)

    def plan(self):
        if self.fast:
            with np.errstate(under="ignore", over="ignore"):
                u = np.exp(self.phi / self.eps)
                v = np.exp(self.psi / self.eps)
                P = (u[:, None] * self.K) * v[None, :]
            if np.all(np.isfinite(P)):
                return P
        with np.errstate(under="ignore"):
            return np.exp((self.phi[:, None] + self.psi[None, :] - self.C) / self.eps)

    def _log_plan_mass(self):
        """log of the total plan mass, via scaling vectors when possible."""
        if self.fast:
            with np.errstate(under="ignore", over="ignore"):
                u = np.exp(self.phi / self.eps)
                v = np.exp(self.psi / self.eps)
                m = float(u @ (self.K @ v))
            if np.isfinite(m) and m > 0:
                return float(np.log(m))
        with np.errstate(invalid="ignore"):
            logP = (self.phi[:, None] + self.psi[None, :] - self.C) / self.eps
        logP = np.where(np.isnan(logP), -np.inf, logP)
        top = float(np.max(logP)) if logP.size else -np.inf
        if not np.isfinite(top):
            return -np.inf
        return top + float(np.log(np.sum(np.exp(logP - top))))

    def sweep(self):
        """One scaling update of both potentials.

        Unbalanced sweeps finish with the jointly optimal constant
        translation of (phi, psi), solvable in closed form; plain sweeps
        move the constant mode at a 1 - O(eps/eps_u) rate.  Balanced
        sweeps pin the gauge by recentering phi instead.
        """
        self.phi = self.gamma * (self.la + self._smin_rows(self.psi))
        self.psi = self.gamma * (self.lb + self._smin_cols(self.phi))
        if self.eps_u is None:
            shift = np.mean(self.phi[self.ia]) if np.any(self.ia) else 0.0
            self.phi = self.phi - shift
            self.psi = self.psi + shift
            return
        eps, eps_u = self.eps, self.eps_u
        log_m = self._log_plan_mass()
        if not np.isfinite(log_m):
            return
        with np.errstate(under="ignore"):
            asum = np.sum(self.a[self.ia] * np.exp(-self.phi[self.ia] / eps_u))
            bsum = np.sum(self.b[self.ib] * np.exp(-self.psi[self.ib] / eps_u))
        if not (asum > 0 and bsum > 0):
            return
        both = (np.log(asum) + np.log(bsum) - 2.0 * log_m) / (
            1.0 / eps_u + 2.0 / eps)
        diff = eps_u * (np.log(bsum) - np.log(asum))
        self.phi = self.phi + 0.5 * (both - diff)
        self.psi = self.psi + 0.5 * (both + diff)

    def transport_stats(self):
        """Plan marginals and transport cost <P, C>, plan-free when possible.

        Returns (pa, pb, cost, P).  On the direct-kernel path the marginals
        and cost come from kernel matvecs and P is None; otherwise the plan
        is materialized and P is returned for reuse.
        """
        if self.fast:
            if self._KC is None:
                self._KC = self.K * self.C
            with np.errstate(under="ignore", over="ignore"):
                u = np.exp(self.phi / self.eps)
                v = np.exp(self.psi / self.eps)
                pa = u * (self.K @ v)
                pb = v * (self.K.T @ u)
                cost = float(u @ (self._KC @ v))
            if (np.all(np.isfinite(pa)) and np.all(np.isfinite(pb))
                    and np.isfinite(cost)):
                return pa, pb, cost, None
        P = self.plan()
        return P.sum(axis=1), P.sum(axis=0), float((P * self.C).sum()), P

    def damped_masses(self):
        """Input masses as seen by the dual residual: a, b for the balanced
        problem, damped by e^{-phi/eps_u}, e^{-psi/eps_u} otherwise."""
        if self.eps_u is None:
            return self.a, self.b
        with np.errstate(under="ignore"):
            ea = np.where(self.ia, self.a * np.exp(-self.phi / self.eps_u), 0.0)
            eb = np.where(self.ib, self.b * np.exp(-self.psi / self.eps_u), 0.0)
        return ea, eb

    def dual_residual(self):
        """First-order optimality residual of the dual, and the plan.

        Balanced: (a - P1, b - P'1).  Unbalanced: the same with a, b damped
        by e^{-phi/eps_u}, e^{-psi/eps_u}.  The plan slot is None when the
        marginals were computed without materializing it.
        """
        pa, pb, _, P = self.transport_stats()
        ea, eb = self.damped_masses()
        return ea - pa, eb - pb, P

    def _merit(self, phi, psi):
        """Dual objective (constants dropped); Newton's line-search merit."""
        with np.errstate(under="ignore", over="ignore"):
            if self.fast:
                u = np.exp(phi / self.eps)
                v = np.exp(psi / self.eps)
                mass = float(u @ (self.K @ v))
                if not np.isfinite(mass):
                    mass = np.exp(
                        (phi[:, None] + psi[None, :] - self.C) / self.eps).sum()
            else:
                mass = np.exp(
                    (phi[:, None] + psi[None, :] - self.C) / self.eps).sum()
            if self.eps_u is None:
                val = phi[self.ia] @ self.a[self.ia] + psi[self.ib] @ self.b[self.ib]
            else:
                val = -self.eps_u * (
                    np.sum(self.a[self.ia] * np.exp(-phi[self.ia] / self.eps_u))
                    + np.sum(self.b[self.ib] * np.exp(-psi[self.ib] / self.eps_u))
                )
        return float(val - self.eps * mass)

    def newton_step(self, damping):
        """One damped Newton step on the dual restricted to positive masses.

        Returns (new damping, step accepted).  The Hessian is assembled from
        the current plan; the balanced gauge direction is pinned with a
        rank-one shift.  Line search backtracks on the dual objective, and
        the damping grows until a step is accepted.  Near the optimum the
        merit saturates at float resolution while the residual can still
        shrink quadratically, so a step that halves the residual is also
        accepted.
        """
        P = self.plan()
        ea, eb = self.damped_masses()
        ra, rb = ea - P.sum(axis=1), eb - P.sum(axis=0)
        res0 = float(np.abs(ra).sum() + np.abs(rb).sum())
        ia, ib = self.ia, self.ib
        na, nb = int(ia.sum()), int(ib.sum())
        r = np.concatenate([ra[ia], rb[ib]])
        Pa = P[np.ix_(ia, ib)]
        H = np.zeros((na + nb, na + nb))
        H[:na, :na] = np.diag(Pa.sum(axis=1))
        H[na:, na:] = np.diag(Pa.sum(axis=0))
        H[:na, na:] = Pa
        H[na:, :na] = Pa.T
        H /= self.eps
        if self.eps_u is None:
            v = np.concatenate([np.ones(na), -np.ones(nb)]) / np.sqrt(na + nb)
            H += np.outer(v, v)
        else:
            extra = np.concatenate([
                self.a[ia] * np.exp(-self.phi[ia] / self.eps_u),
                self.b[ib] * np.exp(-self.psi[ib] / self.eps_u),
            ]) / self.eps_u
            H[np.diag_indices_from(H)] += extra
        scale = max(float(np.trace(H)) / (na + nb), np.finfo(float).tiny)
        m0 = self._merit(self.phi, self.psi)
        for _ in range(8):
            Hd = H + (damping * scale) * np.eye(na + nb)
            try:
                s = np.linalg.solve(Hd, r)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            slope = float(r @ s)
            step = 1.0
            for _ in range(40):
                phi = self.phi.copy()
                psi = self.psi.copy()
                phi[ia] += step * s[:na]
                psi[ib] += step * s[na:]
                m1 = self._merit(phi, psi)
                good = np.isfinite(m1) and m1 > m0 + 1e-4 * step * slope
                if not good and np.isfinite(m1):
                    saved = self.phi, self.psi
                    self.phi, self.psi = phi, psi
                    with np.errstate(over="ignore"):
                        ra1, rb1, _ = self.dual_residual()
                        res1 = float(np.abs(ra1).sum() + np.abs(rb1).sum())
                    self.phi, self.psi = saved
                    good = np.isfinite(res1) and res1 <= 0.5 * res0
                if good:
                    self.phi, self.psi = phi, psi
                    return max(damping / 10.0, 1e-14), True
                step *= 0.5
            damping *= 10.0
        return damping, False


def _anneal(core_factory, eps_target, cmax):
    """Cold-start warm-up: scaling sweeps over decreasing epsilon levels.

    Returns the warm potentials at the last level above the target (or None
    when the cost scale gives nothing to anneal from).
    """
    eps0 = _ANNEAL_START_FACTOR * cmax
    if eps_target >= eps0:
        return None
    n_levels = int(np.ceil(
        np.log(eps0 / eps_target) / np.log(_ANNEAL_LEVEL_FACTOR)
    ))
    pots = None
    for k in range(n_levels):
        eps_k = eps0 * (eps_target / eps0) ** (k / n_levels)
        core = core_factory(eps_k)
        if pots is not None:
            core.set_potentials(*pots)
        for _ in range(_ANNEAL_SWEEPS):
            core.sweep()
        pots = (core.phi, core.psi)
    return pots


def _polish(core, tol, max_steps=400):
    """Drive one solver to a residual tolerance: sweeps, then Newton.

    Used by the path-following retry, where each epsilon level must be
    solved accurately enough that the next level starts inside Newton's
    convergence basin.  Returns the best residual reached.
    """
    damping = 1e-12
    fails = 0
    stale = 0
    best = np.inf
    newton = False
    hist = []
    for _ in range(max_steps):
        if newton:
            damping, ok = core.newton_step(damping)
            fails = 0 if ok else fails + 1
        else:
            core.sweep()
        ra, rb, _ = core.dual_residual()
        res = float(np.abs(ra).sum() + np.abs(rb).sum())
        hist.append(res)
        if newton:
            stale = 0 if res < 0.9 * best else stale + 1
        best = min(best, res)
        if res <= tol:
            break
        if not newton and len(hist) > _STALL_WINDOW:
            if res > 0.5 * hist[-1 - _STALL_WINDOW]:
                newton = True
        if newton and (fails >= 3 or stale >= 30):
            break
    return best


def _path_follow(core_factory, eps_target, cmax, scale):
    """Slow-but-robust cold start: solve a sequence of shrinking epsilons.

    Unlike the quick annealing warm-up (a fixed number of sweeps per
    level), every level here is polished to a small residual so that the
    quadratically convergent Newton phase of the next level starts close
    to its solution.  This rescues instances where sweeping stalls on a
    degenerate plateau: as epsilon approaches zero the dual tends to a
    linear program and plain iterations stop contracting.  Returns warm
    potentials at the target epsilon, or None when the cost scale offers
    no room to follow.
    """
    eps0 = _ANNEAL_START_FACTOR * cmax
    if eps_target >= eps0:
        return None
    n_levels = int(np.ceil(np.log(eps0 / eps_target) / np.log(2.0)))
    pots = None
    core = None
    for k in range(1, n_levels + 1):
        eps_k = eps0 * (eps_target / eps0) ** (k / n_levels)
        core = core_factory(eps_k)
        if pots is not None:
            core.set_potentials(*pots)
        _polish(core, tol=1e-10 * scale)
        pots = (core.phi.copy(), core.psi.copy())
    return pots


def _drive(core, value_fn, cfg, *, marginal_gate, consecutive_hits):
    """Main solver loop: scaling sweeps, stall detection, Newton polish.

    value_fn(pa, pb, cost) maps the current plan marginals and transport
    cost to the reported distance; the loop stops once its relative change
    falls below cfg.eta over consecutive_hits successive iterations.  The relative-change rule alone can fire while
    the iteration is merely slow (tiny epsilon makes sweeps nearly frozen),
    so convergence additionally requires the L1 dual residual to drop below
    eta times the mass scale (capped at _MARGINAL_STOP_TOL for the balanced
    problem, whose residual is exactly the marginal error).
    """
    scale = float(np.sum(core.a) + np.sum(core.b))
    gate_tol = cfg.eta * scale
    if marginal_gate:
        gate_tol = min(gate_tol, _MARGINAL_STOP_TOL)
    d_prev = None
    hits = 0
    newton = False
    damping = 1e-12
    newton_fails = 0
    newton_stale = 0
    best_res = np.inf
    best_pots = None
    resid_log = []
    iterations = 0
    converged = False
    for it in range(1, cfg.max_iters + 1):
        iterations = it
        if newton:
            damping, ok = core.newton_step(damping)
            newton_fails = 0 if ok else newton_fails + 1
            if newton_fails >= 3 or newton_stale >= 30:
                # Numerical floor of the dual: the merit no longer improves
                # or the residual has stopped shrinking across polish steps.
                # Report from the best-residual iterate, not wherever the
                # stalled polish happened to wander.
                if best_pots is not None:
                    core.set_potentials(*best_pots)
                pa, pb, cost, _ = core.transport_stats()
                d = value_fn(pa, pb, cost)
                converged = _relative_change(d, d_prev) <= cfg.eta
                break
        else:
            core.sweep()
            # Residual/value bookkeeping costs as much as a sweep; on long
            # smoothly contracting runs, checking every sweep roughly
            # doubles the solve time for no benefit, so after the initial
            # stall-detection window the checks run every fourth sweep.
            if it > 2 * _STALL_WINDOW and it % 4 and it < cfg.max_iters:
                continue
        pa, pb, cost, _ = core.transport_stats()
        ea, eb = core.damped_masses()
        res = float(np.abs(ea - pa).sum() + np.abs(eb - pb).sum())
        resid_log.append(res)
        if newton:
            if res < 0.9 * best_res:
                newton_stale = 0
            else:
                newton_stale += 1
        if res < best_res:
            best_res = res
            best_pots = (core.phi.copy(), core.psi.copy())
        if not newton and len(resid_log) > _STALL_WINDOW:
            if res > 0.5 * resid_log[-1 - _STALL_WINDOW]:
                newton = True
        d = value_fn(pa, pb, cost)
        if _relative_change(d, d_prev) <= cfg.eta:
            hits += 1
            if hits >= consecutive_hits and res <= gate_tol:
                converged = True
                break
        else:
            hits = 0
        d_prev = d
    if not converged and best_pots is not None:
        core.set_potentials(*best_pots)
    return iterations, converged


def sinkhorn(
    a: DiscreteMeasure,
    b: DiscreteMeasure,
    C: np.ndarray,
    cfg: SolverConfig,
    *,
    want_plan: bool = True,
    init_potentials: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> TransportResult:
    """Entropic OT between two unit-mass measures.

    Returns the regularized transport cost <P, C> and its gradient with
    respect to the first mass vector, reported as the zero-mean dual
    potential (the dual is only defined up to an additive constant).
    Convergence requires both a small relative change of the cost and small
    L1 marginal residuals of the plan.  A caller-provided warm start skips
    the annealing.
    """
    C = _check_measure_pair(a, b, C)
    am, bm = a.masses, b.masses
    if abs(np.sum(am) - 1.0) > _MASS_BALANCE_TOL or abs(np.sum(bm) - 1.0) > _MASS_BALANCE_TOL:
        raise ValueError("sinkhorn requires unit-mass inputs")

    core = _DualSolver(am, bm, C, cfg.epsilon)
    if init_potentials is not None:
        core.set_potentials(*init_potentials)
    else:
        pots = _anneal(
            lambda e: _DualSolver(am, bm, C, e), cfg.epsilon, float(np.max(C))
        )
        if pots is not None:
            core.set_potentials(*pots)

    value = lambda pa, pb, cost: cost
    iterations, converged = _drive(
        core, value, cfg, marginal_gate=True, consecutive_hits=1
    )
    if not converged and init_potentials is None and iterations < cfg.max_iters:
        pots = _path_follow(
            lambda e: _DualSolver(am, bm, C, e),
            cfg.epsilon,
            float(np.max(C)),
            float(np.sum(am) + np.sum(bm)),
        )
        if pots is not None:
            core.set_potentials(*pots)
            extra, converged = _drive(
                core,
                value,
                replace(cfg, max_iters=cfg.max_iters - iterations),
                marginal_gate=True,
                consecutive_hits=1,
            )
            iterations += extra

    _, _, distance, P = core.transport_stats()
    if want_plan and P is None:
        P = core.plan()
    phi = core.phi
    grad = phi - np.mean(phi[core.ia])
    return TransportResult(
        plan=P if want_plan else None,
        distance=distance,
        grad_a=grad,
        iterations=iterations,
        converged=converged,
        potential_a=phi,
        potential_b=core.psi,
    )


def uot_scaling(
    a: DiscreteMeasure,
    b: DiscreteMeasure,
    C: np.ndarray,
    cfg: SolverConfig,
    *,
    want_plan: bool = True,
    init_potentials: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> TransportResult:
    """Unbalanced entropic OT with KL marginal penalties.

    The scaling exponent is epsilon_u / (epsilon_u + epsilon); the reported
    distance is the unregularized objective
    <P, C> + epsilon_u * (KL(P1|a) + KL(P'1|b)) evaluated at the regularized
    plan.  The gradient with respect to a is -epsilon_u * (exp(-phi /
    epsilon_u) - 1), which coincides with -epsilon_u * (u ** (-epsilon /
    epsilon_u) - 1) through phi = epsilon * log(u).
    """
    C = _check_measure_pair(a, b, C)
    am, bm = a.masses, b.masses
    if np.sum(am) <= 0 or np.sum(bm) <= 0:
        raise ValueError("zero-mass input")
    eps_u = cfg.epsilon_u

    core = _DualSolver(am, bm, C, cfg.epsilon, eps_u)
    if init_potentials is not None:
        core.set_potentials(*init_potentials)
    else:
        pots = _anneal(
            lambda e: _DualSolver(am, bm, C, e, eps_u),
            cfg.epsilon,
            float(np.max(C)),
        )
        if pots is not None:
            core.set_potentials(*pots)

    def value(P):
        val = float((P * C).sum())
        val += eps_u * _kl_allow_zero(P.sum(axis=1), am)
        val += eps_u * _kl_allow_zero(P.sum(axis=0), bm)
        return val

    iterations, converged = _drive(
        core, value, cfg, marginal_gate=False, consecutive_hits=2
    )
    if not converged and init_potentials is None and iterations < cfg.max_iters:
        pots = _path_follow(
            lambda e: _DualSolver(am, bm, C, e, eps_u),
            cfg.epsilon,
            float(np.max(C)),
            float(np.sum(am) + np.sum(bm)),
        )
        if pots is not None:
            core.set_potentials(*pots)
            extra, converged = _drive(
                core,
                value,
                replace(cfg, max_iters=cfg.max_iters - iterations),
                marginal_gate=False,
                consecutive_hits=2,
            )
            iterations += extra

    P = core.plan()
    phi = core.phi
    with np.errstate(over="ignore"):
        grad = -eps_u * (np.exp(-phi / eps_u) - 1.0)
    return TransportResult(
        plan=P if want_plan else None,
        distance=value(P),
        grad_a=grad,
        iterations=iterations,
        converged=converged,
        potential_a=phi,
        potential_b=core.psi,
    )


def _kl_allow_zero(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p|q) tolerating q_i = 0 where p_i = 0 (skipped atoms)."""
    mask = q > 0
    if np.any(p[~mask] > 0):
        return np.inf
    return kl_divergence(p[mask], q[mask])


def mixed_distance(
    a: DiscreteMeasure,
    b: DiscreteMeasure,
    C: np.ndarray,
    cfg: SolverConfig,
    *,
    want_plan: bool = True,
    init_potentials: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> TransportResult:
    """Mixed mass/shape objective: entropic W2^2 between the mass-normalized
    measures plus lambda_m times the squared total-mass difference.

    The gradient chains through the normalization without forming the
    Jacobian: (D a_hat)' g = (g - <a_hat, g> 1) / ||a||_1.
    """
    a_hat, mass_a = normalize_mass(a)
    b_hat, mass_b = normalize_mass(b)
    res = sinkhorn(
        a_hat, b_hat, C, cfg, want_plan=want_plan, init_potentials=init_potentials
    )
    dm = mass_a - mass_b
    g = res.grad_a
    grad = (g - float(a_hat.masses @ g)) / mass_a + 2.0 * cfg.lambda_m * dm
    return TransportResult(
        plan=res.plan,
        distance=res.distance + cfg.lambda_m * dm * dm,
        grad_a=grad,
        iterations=res.iterations,
        converged=res.converged,
        potential_a=res.potential_a,
        potential_b=res.potential_b,
    )


_LP_MAX_SIZE = 8


def lp_oracle(
    a: DiscreteMeasure, b: DiscreteMeasure, C: np.ndarray
) -> tuple[np.ndarray, float]:
    """Exact unregularized transport cost for tiny 1D instances.

    On sorted supports with convex ground cost the monotone (north-west
    corner) plan is optimal, so the oracle is a direct greedy fill.  Intended
    for tests only; refuses instances larger than 8 x 8.
    """
    C = _check_measure_pair(a, b, C)
    n, m = C.shape
    if n > _LP_MAX_SIZE or m > _LP_MAX_SIZE:
        raise ValueError(f"lp_oracle is limited to {_LP_MAX_SIZE} atoms per side")
    am = a.masses.copy()
    bm = b.masses.copy()
    if not np.isclose(np.sum(am), np.sum(bm), rtol=1e-9, atol=1e-12):
        raise ValueError("lp_oracle requires equal total masses")

    P = np.zeros((n, m))
    i = j = 0
    while i < n and j < m:
        t = min(am[i], bm[j])
        P[i, j] = t
        am[i] -= t
        bm[j] -= t
        if am[i] <= bm[j]:
            i += 1
        else:
            j += 1
    return P, float(np.sum(P * C))
