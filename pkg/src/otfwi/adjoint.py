"""Misfit evaluation and adjoint-state velocity gradients.

Every misfit compares synthetic and observed seismograms trace by trace
(one receiver time series at a time).  The L2 misfit works on raw traces;
the transport misfits first map each trace through a positivity-enforcing
normalization and then measure an optimal-transport distance on the time
axis.  The velocity gradient correlates the forward wavefield with one
adjoint simulation per shot, driven by the per-trace misfit derivatives.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .measures import DiscreteMeasure, cost_matrix
from .normalize import NormalizationSpec, NormKind, apply, chain_factor
from .transport import SolverConfig, mixed_distance, uot_scaling
from .wavesim import (
    AcquisitionGeometry,
    BoundarySpec,
    Seismogram,
    VelocityModel,
    model_sensitivity,
    simulate,
)

logger = logging.getLogger(__name__)


class DistanceKind(enum.Enum):
    L2 = "l2"
    UOT = "uot"
    MIXED = "mixed"


@dataclass(frozen=True)
class MisfitSpec:
    """Distance kind plus normalization and transport-solver settings."""

    distance: DistanceKind = DistanceKind.L2
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        norm = self.normalization.kind
        if self.distance is DistanceKind.L2:
            if norm is not NormKind.NONE:
                raise ValueError("the L2 misfit takes raw traces; "
                                 "normalization must be none")
        elif norm is NormKind.NONE:
            raise ValueError(
                f"{self.distance.value} misfit requires a linear or "
                "exponential normalization to make traces positive")


@dataclass(frozen=True)
class GradientField:
    """Velocity gradient of the total misfit plus its value breakdown."""

    g: np.ndarray
    misfit_value: float
    per_shot_values: np.ndarray


def trace_misfit(spec, synthetic, observed, timeline, cost=None):
    """Misfit value and its derivative for one receiver trace.

    Returns (value, adjoint_trace) where adjoint_trace is the raw
    derivative d value / d synthetic; any sign flip required by a
    particular adjoint-equation convention is the caller's business.
    cost optionally carries a precomputed squared-distance matrix of the
    timeline against itself, shared across traces.
    """
    syn = np.asarray(synthetic, dtype=float)
    obs = np.asarray(observed, dtype=float)
    timeline = np.asarray(timeline, dtype=float)
    if syn.shape != timeline.shape or obs.shape != timeline.shape:
        raise ValueError("traces and timeline must have equal length")

    if spec.distance is DistanceKind.L2:
        r = syn - obs
        return 0.5 * float(r @ r), r

    if cost is None:
        cost = cost_matrix(timeline, timeline)
    a = DiscreteMeasure(apply(spec.normalization, syn), timeline)
    b = DiscreteMeasure(apply(spec.normalization, obs), timeline)
    solve = uot_scaling if spec.distance is DistanceKind.UOT else mixed_distance
    res = solve(a, b, cost, spec.solver, want_plan=False)
    if not res.converged:
        logger.warning(
            "%s solve hit the iteration cap (%d); using the last iterate",
            spec.distance.value, spec.solver.max_iters)
    return res.distance, chain_factor(spec.normalization, syn) * res.grad_a


def _shot_misfit(spec, synthetic, observed, timeline, cost):
    """Per-trace misfits for one shot: (value, adjoint source matrix)."""
    adj = np.empty_like(synthetic.data)
    total = 0.0
    for r in range(synthetic.data.shape[0]):
        value, adj[r] = trace_misfit(
            spec, synthetic.data[r], observed.data[r], timeline, cost)
        total += value
    return total, adj


def _shot_gradient(model, geom, observed, spec, boundary, shot):
    timeline = geom.timeline
    cost = None
    if spec.distance is not DistanceKind.L2:
        cost = cost_matrix(timeline, timeline)
    syn, wf = simulate(model, geom, shot, boundary, keep_wavefield=True)
    value, adj = _shot_misfit(spec, syn, observed[shot], timeline, cost)
    grad = model_sensitivity(model, geom, Seismogram(adj, geom.dt), wf,
                             boundary)
    return value, grad


def _shot_value(model, geom, observed, spec, boundary, shot):
    timeline = geom.timeline
    cost = None
    if spec.distance is not DistanceKind.L2:
        cost = cost_matrix(timeline, timeline)
    syn, _ = simulate(model, geom, shot, boundary, keep_wavefield=False)
    value, _ = _shot_misfit(spec, syn, observed[shot], timeline, cost)
    return value


def _check_observed(geom, observed):
    if len(observed) != len(geom.sources):
        raise ValueError(
            f"{len(observed)} observed seismograms for "
            f"{len(geom.sources)} sources")
    for s in observed:
        if s.data.shape != (len(geom.receivers), geom.nt):
            raise ValueError("observed seismogram shape mismatch")


def _run_shots(fn, args, n_shots, workers):
    if workers <= 1 or n_shots <= 1:
        return [fn(*args, s) for s in range(n_shots)]
    with ProcessPoolExecutor(max_workers=min(workers, n_shots)) as pool:
        futures = [pool.submit(fn, *args, s) for s in range(n_shots)]
        return [f.result() for f in futures]


def evaluate_misfit(model, geom, observed, spec,
                    boundary=BoundarySpec(), workers=1):
    """Total misfit over all shots and traces, without a gradient.

    Returns (value, per_shot_values); shots are reduced in index order.
    """
    _check_observed(geom, observed)
    values = _run_shots(_shot_value, (model, geom, observed, spec, boundary),
                        len(geom.sources), workers)
    per_shot = np.array(values, dtype=float)
    return float(per_shot.sum()), per_shot


def model_gradient(model, geom, observed, spec, boundary=BoundarySpec(),
                   workers=1, source_mute_radius=0):
    """Gradient of the total misfit with respect to the velocity grid.

    Each shot contributes one forward and one adjoint simulation; the
    adjoint source is the matrix of raw per-trace misfit derivatives.
    Shots are summed in index order regardless of worker count.
    source_mute_radius > 0 zeroes the gradient within that many cells of
    every source node, suppressing the near-source singularity.
    """
    _check_observed(geom, observed)
    results = _run_shots(_shot_gradient,
                         (model, geom, observed, spec, boundary),
                         len(geom.sources), workers)
    per_shot = np.array([v for v, _ in results], dtype=float)
    g = np.zeros_like(model.c)
    for _, grad in results:
        g += grad

    if source_mute_radius > 0:
        ii, jj = np.meshgrid(np.arange(model.nx), np.arange(model.nz),
                             indexing="ij")
        for sx, sz in geom.sources:
            si = int(round(sx / model.dx))
            sj = int(round(sz / model.dz))
            g[(ii - si) ** 2 + (jj - sj) ** 2 <= source_mute_radius ** 2] = 0.0

    return GradientField(g=g, misfit_value=float(per_shot.sum()),
                         per_shot_values=per_shot)
