"""Experiment runners: convexity scans, misfit landscape, and inversion.

Each runner takes a parsed ExperimentConfig, writes plot-ready CSV tables
and velocity/seismogram rasters into the output directory, and attaches a
metadata sidecar to every file it emits.  Parallel work is split into a
fixed number of chunks independent of the worker count, so outputs are
bit-identical for any --workers value.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from ..adjoint import (
    DistanceKind,
    MisfitSpec,
    model_gradient,
    trace_misfit,
)
from ..measures import DiscreteMeasure, cost_matrix
from ..normalize import apply
from ..optim import minimize
from ..transport import mixed_distance, uot_scaling
from ..wavesim import (
    AcquisitionGeometry,
    BoundarySpec,
    VelocityModel,
    cfl_max_dt,
    load_velocity,
    ricker,
    ricker_sigma,
    save_velocity,
    simulate,
)
from .config import ExperimentConfig, ExperimentKind
from .output import write_csv, write_metadata

_SCAN_CHUNKS = 8


def _solver_for(spec: MisfitSpec):
    return uot_scaling if spec.distance is DistanceKind.UOT else mixed_distance


def _run_jobs(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _chunk_ranges(n, chunks):
    step = (n + chunks - 1) // chunks
    return [(lo, min(lo + step, n)) for lo in range(0, n, step)]


# ---------------------------------------------------------------------------
# Ricker convexity scans


def _scan_chunk(args):
    """Transport distances over one contiguous block of scan parameters.

    Solves are warm-started from the previous parameter inside the block,
    which is what makes a dense scan affordable; blocks are fixed-size so
    results do not depend on the worker count.
    """
    spec, params, shift, scan, timeline, cost = args
    b = ricker(scan.center, scan.sigma, timeline)
    bn = DiscreteMeasure(apply(spec.normalization, b), timeline)
    solve = _solver_for(spec)
    pots = None
    out = np.empty(len(params))
    for i, p in enumerate(params):
        a = ricker(p, scan.sigma, timeline) if shift \
            else ricker(scan.center, p, timeline)
        an = DiscreteMeasure(apply(spec.normalization, a), timeline)
        res = solve(an, bn, cost, spec.solver, want_plan=False,
                    init_potentials=pots)
        pots = (res.potential_a, res.potential_b)
        out[i] = res.distance
    return out


def _scan_l2(params, shift, scan, timeline):
    b = ricker(scan.center, scan.sigma, timeline)
    out = np.empty(len(params))
    for i, p in enumerate(params):
        a = ricker(p, scan.sigma, timeline) if shift \
            else ricker(scan.center, p, timeline)
        out[i] = 0.5 * float(((a - b) ** 2).sum())
    return out


def run_scan(cfg: ExperimentConfig, out_dir, workers=1):
    scan = cfg.scan
    shift = cfg.kind is ExperimentKind.SHIFT_SCAN
    dt = 1.0 / scan.sampling_hz
    timeline = np.arange(0.0, scan.window + 0.5 * dt, dt)
    params = np.linspace(scan.start, scan.stop, scan.points)
    cost = cost_matrix(timeline, timeline)

    started = time.time()
    jobs = []
    owners = []
    for name, spec in cfg.misfits.items():
        if spec.distance is DistanceKind.L2:
            continue
        for lo, hi in _chunk_ranges(scan.points, _SCAN_CHUNKS):
            jobs.append((spec, params[lo:hi], shift, scan, timeline, cost))
            owners.append(name)
    results = _run_jobs(_scan_chunk, jobs, workers)

    curves = {}
    for name, spec in cfg.misfits.items():
        if spec.distance is DistanceKind.L2:
            curves[name] = _scan_l2(params, shift, scan, timeline)
        else:
            parts = [r for o, r in zip(owners, results) if o == name]
            curves[name] = np.concatenate(parts)

    param_label = "t0" if shift else "sigma0"
    header = [param_label]
    columns = [params]
    for name, values in curves.items():
        peak = float(np.max(values))
        header += [name, f"{name}_raw"]
        columns += [values / peak if peak > 0 else values, values]
    path = out_dir / ("shift_scan.csv" if shift else "dilation_scan.csv")
    write_csv(path, header, np.column_stack(columns))
    write_metadata(path, cfg.raw, time.time() - started, workers)
    return path


# ---------------------------------------------------------------------------
# Two-layer misfit landscape


def _layer_model(ls, dc, z_int):
    c = np.full((ls.grid, ls.grid), ls.background)
    h = ls.extent / (ls.grid - 1)
    j0 = int(np.ceil(z_int / h - 1e-9))
    c[:, j0:] += dc
    return VelocityModel(c, h, h)


def _landscape_geometry(ls):
    h = ls.extent / (ls.grid - 1)
    dt = 1.0 / ls.sampling_hz
    nt = int(round(ls.record_time / dt)) + 1
    timeline = np.arange(nt) * dt
    sigma = ricker_sigma(ls.source_frequency)
    rx = np.linspace(0.0, ls.extent, ls.n_receivers)
    return AcquisitionGeometry(
        sources=((0.5 * ls.extent, 0.05),),
        receivers=tuple((x, 0.0) for x in rx),
        dt=dt,
        nt=nt,
        source_wavelet=ricker(6.0 * sigma, sigma, timeline),
    ), h


def _landscape_slice(args):
    """All (dc, misfit) objectives for one interface depth z.

    One forward simulation per dc value is shared by every misfit; the
    transport solves are warm-started along the dc axis per trace.
    """
    ls, misfits, z_int, dcs, observed = args
    geom, _ = _landscape_geometry(ls)
    timeline = geom.timeline
    need_cost = any(s.distance is not DistanceKind.L2 for s in misfits.values())
    cost = cost_matrix(timeline, timeline) if need_cost else None
    names = list(misfits)
    warm = {}
    out = np.zeros((len(dcs), len(names)))
    for i, dc in enumerate(dcs):
        syn, _ = simulate(_layer_model(ls, dc, z_int), geom, 0,
                          keep_wavefield=False)
        for m, name in enumerate(names):
            spec = misfits[name]
            if spec.distance is DistanceKind.L2:
                total = 0.0
                for r in range(syn.data.shape[0]):
                    total += trace_misfit(spec, syn.data[r], observed[r],
                                          timeline)[0]
                out[i, m] = total
                continue
            solve = _solver_for(spec)
            total = 0.0
            for r in range(syn.data.shape[0]):
                a = DiscreteMeasure(apply(spec.normalization, syn.data[r]),
                                    timeline)
                b = DiscreteMeasure(apply(spec.normalization, observed[r]),
                                    timeline)
                res = solve(a, b, cost, spec.solver, want_plan=False,
                            init_potentials=warm.get((name, r)))
                warm[(name, r)] = (res.potential_a, res.potential_b)
                total += res.distance
            out[i, m] = total
    return out


def run_landscape(cfg: ExperimentConfig, out_dir, workers=1):
    ls = cfg.landscape
    geom, _ = _landscape_geometry(ls)
    started = time.time()

    true_model = _layer_model(ls, ls.true_dc, ls.true_z)
    observed, _ = simulate(true_model, geom, 0, keep_wavefield=False)

    dcs = np.linspace(ls.dc_start, ls.dc_stop, ls.dc_points)
    zs = np.linspace(ls.z_start, ls.z_stop, ls.z_points)
    jobs = [(ls, cfg.misfits, z, dcs, observed.data) for z in zs]
    slices = _run_jobs(_landscape_slice, jobs, workers)

    names = list(cfg.misfits)
    raw = np.stack(slices, axis=1)  # (dc, z, misfit)
    peaks = raw.reshape(-1, len(names)).max(axis=0)
    rows = []
    for i, dc in enumerate(dcs):
        for j, z in enumerate(zs):
            row = [dc, z]
            for m in range(len(names)):
                peak = peaks[m]
                row += [raw[i, j, m] / peak if peak > 0 else raw[i, j, m],
                        raw[i, j, m]]
            rows.append(row)
    header = ["dc", "z"]
    for name in names:
        header += [name, f"{name}_raw"]
    path = out_dir / "landscape.csv"
    write_csv(path, header, rows)
    write_metadata(path, cfg.raw, time.time() - started, workers)

    model_path = out_dir / "true_model.vgrd"
    save_velocity(model_path, true_model)
    write_metadata(model_path, cfg.raw, time.time() - started, workers)
    return path


# ---------------------------------------------------------------------------
# Inversion fixtures and driver


def _camembert_models(rng):
    n, h = 101, 0.02
    extent = h * (n - 1)
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    r2 = ((ii * h - 0.5 * extent) ** 2 + (jj * h - 0.5 * extent) ** 2)
    c = np.full((n, n), 3.0)
    c[r2 <= 0.5 ** 2] = 3.6
    true = VelocityModel(c, h, h)
    initial = VelocityModel(np.full((n, n), 3.0), h, h)
    return true, initial


def _marmousi_models(rng):
    """Procedural layered-plus-faults stand-in on the published grid size.

    The real reference model is external data; this fixture has the same
    dimensions and the same qualitative structure (velocity increasing
    with depth, dipping layers, a few fault offsets) so the reflection
    pipeline runs out of the box.
    """
    nx, nz, h = 301, 84, 0.03
    x = np.arange(nx) * h
    z = np.arange(nz) * h
    depth = np.tile(z, (nx, 1))

    # gently dipping layer boundaries with lateral undulation
    n_layers = 9
    bases = np.linspace(0.15, nz * h * 0.95, n_layers)
    dips = rng.uniform(-0.04, 0.06, n_layers)
    waves = rng.uniform(0.05, 0.12, n_layers)
    phases = rng.uniform(0.0, 2 * np.pi, n_layers)
    vels = np.linspace(1.8, 4.3, n_layers + 1)

    horizon = np.zeros((n_layers, nx))
    for k in range(n_layers):
        horizon[k] = (bases[k] + dips[k] * x
                      + waves[k] * np.sin(2 * np.pi * x / 3.1 + phases[k]))

    # fault offsets shift the horizons past two vertical planes
    for fx, throw in ((nx // 3, 0.12), (2 * nx // 3, -0.09)):
        horizon[:, fx:] += throw

    c = np.full((nx, nz), vels[0])
    for k in range(n_layers):
        c[depth >= horizon[k][:, None]] = 0.0
        c += np.where(depth >= horizon[k][:, None], vels[k + 1], 0.0)
    c = np.clip(c, 1.5, 4.5)

    from scipy.ndimage import gaussian_filter

    smooth = gaussian_filter(c, sigma=12.0)
    return VelocityModel(c, h, h), VelocityModel(smooth, h, h)


def _invert_fixture(cfg: ExperimentConfig):
    inv = cfg.invert
    rng = np.random.default_rng(cfg.seed)
    if inv.problem == "camembert":
        true, initial = _camembert_models(rng)
    elif inv.problem == "marmousi":
        true, initial = _marmousi_models(rng)
        if inv.true_model:
            true = load_velocity(inv.true_model)
        if inv.initial_model:
            initial = load_velocity(inv.initial_model)
    else:
        true = load_velocity(inv.true_model)
        initial = load_velocity(inv.initial_model)
    if true.c.shape != initial.c.shape:
        raise ValueError("true and initial models differ in shape")

    width = true.dx * (true.nx - 1)
    depth = true.dz * (true.nz - 1)
    if inv.problem == "camembert":
        # cross-well: sources down the left edge, receivers down the right
        sources = tuple((0.0, z) for z in np.linspace(0, depth,
                                                      inv.n_sources))
        receivers = tuple((width, z) for z in np.linspace(0, depth,
                                                          inv.n_receivers))
    else:
        # reflection: both on the surface
        sources = tuple((x, true.dz) for x in np.linspace(0, width,
                                                          inv.n_sources))
        receivers = tuple((x, true.dz) for x in np.linspace(0, width,
                                                            inv.n_receivers))

    dt = 1.0 / inv.sampling_hz
    max_dt = cfl_max_dt(true)
    if dt > max_dt:
        raise ValueError(
            f"sampling interval {dt:.5f} s violates the stability limit "
            f"{max_dt:.5f} s of the true model")
    nt = int(round(inv.record_time / dt)) + 1
    timeline = np.arange(nt) * dt
    sigma = ricker_sigma(inv.source_frequency)
    geom = AcquisitionGeometry(sources=sources, receivers=receivers, dt=dt,
                               nt=nt,
                               source_wavelet=ricker(6.0 * sigma, sigma,
                                                     timeline))
    return true, initial, geom


def _observe_shot(args):
    model, geom, shot = args
    return simulate(model, geom, shot, keep_wavefield=False)[0]


def run_invert(cfg: ExperimentConfig, out_dir, workers=1):
    from dataclasses import replace

    inv = cfg.invert
    started = time.time()
    true, initial, geom = _invert_fixture(cfg)
    observed = _run_jobs(_observe_shot,
                         [(true, geom, s) for s in range(len(geom.sources))],
                         workers)

    boundary = BoundarySpec()
    shape = initial.c.shape
    history = []
    flags = []
    model = initial

    for stage_idx, (stage, iters) in enumerate(
            zip(inv.stages, inv.stage_iterations), start=1):
        spec = cfg.misfits[stage]

        def oracle(x):
            m = VelocityModel(x.reshape(shape), initial.dx, initial.dz)
            gf = model_gradient(m, geom, observed, spec, boundary,
                                workers=workers,
                                source_mute_radius=inv.source_mute_radius)
            if not np.isfinite(gf.misfit_value):
                raise FloatingPointError("misfit became non-finite")
            return gf.misfit_value, gf.g.ravel()

        saved = []

        def callback(it, x, value):
            if inv.save_intermediate:
                m = VelocityModel(x.reshape(shape), initial.dx, initial.dz)
                p = out_dir / f"model_stage{stage_idx}_iter{it:03d}.vgrd"
                save_velocity(p, m)
                saved.append(p)

        opt = replace(cfg.optimizer, max_iters=iters, bounds=cfg.bounds)
        result = minimize(opt, model.c.ravel(), oracle, callback=callback)
        history.append((stage_idx, stage, 0, float(result.history[0])))
        for it, value in enumerate(result.history[1:], start=1):
            history.append((stage_idx, stage, it, float(value)))
        flags.append(result.line_search_failed)
        model = VelocityModel(result.x.reshape(shape), initial.dx,
                              initial.dz)
        for p in saved:
            write_metadata(p, cfg.raw, time.time() - started, workers)

    runtime = time.time() - started
    extra = {"line_search_failed":
             ",".join(str(f).lower() for f in flags)}

    hist_path = out_dir / "history.csv"
    write_csv(hist_path, ["stage", "misfit_name", "iteration", "misfit"],
              history)
    write_metadata(hist_path, cfg.raw, runtime, workers, extra)

    final_path = out_dir / "model_final.vgrd"
    save_velocity(final_path, model)
    write_metadata(final_path, cfg.raw, runtime, workers, extra)

    true_path = out_dir / "model_true.vgrd"
    save_velocity(true_path, true)
    write_metadata(true_path, cfg.raw, runtime, workers)
    init_path = out_dir / "model_initial.vgrd"
    save_velocity(init_path, initial)
    write_metadata(init_path, cfg.raw, runtime, workers)
    return hist_path


def run_experiment(cfg: ExperimentConfig, out_dir, workers=1):
    if cfg.kind in (ExperimentKind.SHIFT_SCAN, ExperimentKind.DILATION_SCAN):
        return run_scan(cfg, out_dir, workers)
    if cfg.kind is ExperimentKind.LANDSCAPE:
        return run_landscape(cfg, out_dir, workers)
    return run_invert(cfg, out_dir, workers)
