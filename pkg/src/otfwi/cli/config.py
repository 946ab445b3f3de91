"""Experiment configuration: a sectioned key-value text file (INI syntax).

Layout:

    [experiment]
    kind = shift-scan | dilation-scan | landscape | invert
    seed = 0

    [misfit:NAME]          ; one section per compared distance
    distance = l2 | uot | mixed
    normalization = none | linear | exponential
    k = 1.0
    epsilon = 1e-2
    epsilon_u = 1.0
    lambda_m = 0
    eta = 1e-5
    max_iters = 20000

    [scan]                 ; shift-scan / dilation-scan
    start = 0.25
    stop = 0.75
    points = 501
    sigma = 0.03           ; reference wavelet width (s)
    center = 0.5           ; reference wavelet center (s)
    sampling_hz = 1000
    window = 1.0           ; record length (s)

    [landscape]            ; two-layer objective surface
    grid = 101             ; square model size
    extent = 1.0           ; model width/depth (km)
    background = 1.0       ; top-layer velocity (km/s)
    dc_start/dc_stop/dc_points, z_start/z_stop/z_points
    true_dc = 0.05
    true_z = 0.51
    source_frequency = 6
    sampling_hz = 300
    record_time = 2.0
    n_receivers = 11

    [invert]
    problem = camembert | marmousi | files
    true_model / initial_model    ; velocity raster paths (files mode;
                                  ; optional override for marmousi)
    stages = NAME[,NAME...]       ; misfit section per inversion stage
    stage_iterations = 5[,10...]
    source_mute_radius = 0
    save_intermediate = true
    ... plus per-problem acquisition overrides (see _INVERT_DEFAULTS)

    [optimizer]
    method = lbfgs | ncg
    memory = 5
    c1/c2/max_trials/initial_step
    min_velocity / max_velocity   ; optional projection bounds
"""

from __future__ import annotations

import configparser
import enum
import os
from dataclasses import dataclass, field

from ..adjoint import DistanceKind, MisfitSpec
from ..normalize import NormalizationSpec, NormKind
from ..optim import LineSearchConfig, Method, OptimizerConfig
from ..transport import SolverConfig


class ConfigError(Exception):
    """Invalid or incomplete experiment configuration."""


class ExperimentKind(enum.Enum):
    SHIFT_SCAN = "shift-scan"
    DILATION_SCAN = "dilation-scan"
    LANDSCAPE = "landscape"
    INVERT = "invert"


@dataclass(frozen=True)
class ScanConfig:
    start: float
    stop: float
    points: int
    sigma: float
    center: float
    sampling_hz: float
    window: float


@dataclass(frozen=True)
class LandscapeConfig:
    grid: int
    extent: float
    background: float
    dc_start: float
    dc_stop: float
    dc_points: int
    z_start: float
    z_stop: float
    z_points: int
    true_dc: float
    true_z: float
    source_frequency: float
    sampling_hz: float
    record_time: float
    n_receivers: int


@dataclass(frozen=True)
class InvertConfig:
    problem: str
    stages: tuple
    stage_iterations: tuple
    true_model: str | None
    initial_model: str | None
    source_mute_radius: int
    save_intermediate: bool
    source_frequency: float
    sampling_hz: float
    record_time: float
    n_sources: int
    n_receivers: int


@dataclass(frozen=True)
class ExperimentConfig:
    kind: ExperimentKind
    seed: int
    misfits: dict  # name -> MisfitSpec, insertion-ordered
    scan: ScanConfig | None = None
    landscape: LandscapeConfig | None = None
    invert: InvertConfig | None = None
    optimizer: OptimizerConfig | None = None
    bounds: tuple | None = None
    raw: dict = field(default_factory=dict)  # resolved key/values for metadata


def _get(section, key, conv, default=None, positive=False):
    if key not in section:
        if default is None:
            raise ConfigError(f"[{section.name}] is missing '{key}'")
        return default
    try:
        value = conv(section[key])
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key}: {exc}") from None
    if positive and value <= 0:
        raise ConfigError(f"[{section.name}] {key} must be positive")
    return value


def _bool(text):
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_misfit(section) -> MisfitSpec:
    dist_name = _get(section, "distance", str)
    try:
        distance = DistanceKind(dist_name)
    except ValueError:
        raise ConfigError(f"[{section.name}] unknown distance "
                          f"{dist_name!r}") from None
    norm_name = _get(section, "normalization", str, default="none")
    try:
        kind = NormKind(norm_name)
    except ValueError:
        raise ConfigError(f"[{section.name}] unknown normalization "
                          f"{norm_name!r}") from None
    try:
        norm = NormalizationSpec(kind, k=_get(section, "k", float,
                                              default=0.0))
        solver = SolverConfig(
            epsilon=_get(section, "epsilon", float, default=1e-2),
            epsilon_u=_get(section, "epsilon_u", float, default=1.0),
            lambda_m=_get(section, "lambda_m", float, default=0.0),
            eta=_get(section, "eta", float, default=1e-5),
            max_iters=_get(section, "max_iters", int, default=20000),
        )
        return MisfitSpec(distance, norm, solver)
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {exc}") from None


def _parse_scan(section, kind) -> ScanConfig:
    shift = kind is ExperimentKind.SHIFT_SCAN
    cfg = ScanConfig(
        start=_get(section, "start", float, default=0.25 if shift else 0.02),
        stop=_get(section, "stop", float, default=0.75 if shift else 0.04),
        points=_get(section, "points", int,
                    default=501 if shift else 201, positive=True),
        sigma=_get(section, "sigma", float, default=0.03, positive=True),
        center=_get(section, "center", float, default=0.5, positive=True),
        sampling_hz=_get(section, "sampling_hz", float, default=1000.0,
                         positive=True),
        window=_get(section, "window", float, default=1.0, positive=True),
    )
    if cfg.stop <= cfg.start:
        raise ConfigError("[scan] stop must exceed start")
    if not shift and cfg.start <= 0:
        raise ConfigError("[scan] dilation widths must be positive")
    return cfg


def _parse_landscape(section) -> LandscapeConfig:
    cfg = LandscapeConfig(
        grid=_get(section, "grid", int, default=101, positive=True),
        extent=_get(section, "extent", float, default=1.0, positive=True),
        background=_get(section, "background", float, default=1.0,
                        positive=True),
        dc_start=_get(section, "dc_start", float, default=-0.1),
        dc_stop=_get(section, "dc_stop", float, default=0.2),
        dc_points=_get(section, "dc_points", int, default=31, positive=True),
        z_start=_get(section, "z_start", float, default=0.41, positive=True),
        z_stop=_get(section, "z_stop", float, default=0.61, positive=True),
        z_points=_get(section, "z_points", int, default=11, positive=True),
        true_dc=_get(section, "true_dc", float, default=0.05),
        true_z=_get(section, "true_z", float, default=0.51, positive=True),
        source_frequency=_get(section, "source_frequency", float,
                              default=6.0, positive=True),
        sampling_hz=_get(section, "sampling_hz", float, default=300.0,
                         positive=True),
        record_time=_get(section, "record_time", float, default=2.0,
                         positive=True),
        n_receivers=_get(section, "n_receivers", int, default=11,
                         positive=True),
    )
    if cfg.dc_stop <= cfg.dc_start or cfg.z_stop <= cfg.z_start:
        raise ConfigError("[landscape] ranges must be increasing")
    return cfg


_INVERT_DEFAULTS = {
    # problem: (source_frequency, sampling_hz, record_time, n_src, n_rec)
    "camembert": (10.0, 400.0, 1.0, 11, 101),
    "marmousi": (5.0, 400.0, 3.0, 11, 101),
    "files": (10.0, 300.0, 1.0, 11, 101),
}


def _parse_invert(section, misfits) -> InvertConfig:
    problem = _get(section, "problem", str)
    if problem not in _INVERT_DEFAULTS:
        raise ConfigError(f"[invert] unknown problem {problem!r}")
    freq, hz, rec_t, n_src, n_rec = _INVERT_DEFAULTS[problem]
    stages = tuple(s.strip() for s in _get(section, "stages", str).split(","))
    for name in stages:
        if name not in misfits:
            raise ConfigError(f"[invert] stage {name!r} has no "
                              f"[misfit:{name}] section")
    iters_text = _get(section, "stage_iterations", str)
    try:
        iters = tuple(int(s) for s in iters_text.split(","))
    except ValueError:
        raise ConfigError("[invert] stage_iterations must be a "
                          "comma-separated integer list") from None
    if len(iters) != len(stages) or any(i < 0 for i in iters):
        raise ConfigError("[invert] stage_iterations must give one "
                          "nonnegative count per stage")
    cfg = InvertConfig(
        problem=problem,
        stages=stages,
        stage_iterations=iters,
        true_model=section.get("true_model") or None,
        initial_model=section.get("initial_model") or None,
        source_mute_radius=_get(section, "source_mute_radius", int,
                                default=0),
        save_intermediate=_get(section, "save_intermediate", _bool,
                               default=True),
        source_frequency=_get(section, "source_frequency", float,
                              default=freq, positive=True),
        sampling_hz=_get(section, "sampling_hz", float, default=hz,
                         positive=True),
        record_time=_get(section, "record_time", float, default=rec_t,
                         positive=True),
        n_sources=_get(section, "n_sources", int, default=n_src,
                       positive=True),
        n_receivers=_get(section, "n_receivers", int, default=n_rec,
                         positive=True),
    )
    if problem == "files" and not (cfg.true_model and cfg.initial_model):
        raise ConfigError("[invert] problem = files needs true_model and "
                          "initial_model paths")
    for path in (cfg.true_model, cfg.initial_model):
        if path and not os.path.exists(path):
            raise ConfigError(f"[invert] model file not found: {path}")
    return cfg


def _parse_optimizer(section):
    method_name = _get(section, "method", str, default="lbfgs")
    try:
        method = Method(method_name)
    except ValueError:
        raise ConfigError(f"[optimizer] unknown method "
                          f"{method_name!r}") from None
    initial = section.get("initial_step")
    try:
        ls = LineSearchConfig(
            c1=_get(section, "c1", float, default=1e-4),
            c2=_get(section, "c2", float, default=0.9),
            max_trials=_get(section, "max_trials", int, default=25),
            initial_step=float(initial) if initial else None,
        )
        opt = OptimizerConfig(
            method=method,
            memory=_get(section, "memory", int, default=5),
            max_iters=0,  # per-stage counts come from [invert]
            line_search=ls,
        )
    except ValueError as exc:
        raise ConfigError(f"[optimizer] {exc}") from None
    lo = section.get("min_velocity")
    hi = section.get("max_velocity")
    bounds = None
    if lo is not None or hi is not None:
        if lo is None or hi is None or float(lo) >= float(hi):
            raise ConfigError("[optimizer] min_velocity and max_velocity "
                              "must both be set with min < max")
        bounds = (float(lo), float(hi))
    return opt, bounds


def load_config(path, expected_kind=None) -> ExperimentConfig:
    """Parse and validate an experiment configuration file."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if "experiment" not in parser:
        raise ConfigError(f"{path}: missing [experiment] section")

    exp = parser["experiment"]
    kind_name = _get(exp, "kind", str)
    try:
        kind = ExperimentKind(kind_name)
    except ValueError:
        raise ConfigError(f"unknown experiment kind {kind_name!r}") from None
    if expected_kind is not None and kind is not expected_kind:
        raise ConfigError(
            f"config is a {kind.value} experiment, but the "
            f"{expected_kind.value} command was invoked")
    seed = _get(exp, "seed", int, default=0)

    misfits = {}
    for name in parser.sections():
        if name.startswith("misfit:"):
            label = name.split(":", 1)[1]
            if not label:
                raise ConfigError("misfit section needs a name after ':'")
            misfits[label] = _parse_misfit(parser[name])
    if not misfits:
        raise ConfigError("at least one [misfit:NAME] section is required")

    scan = landscape = invert = optimizer = bounds = None
    if kind in (ExperimentKind.SHIFT_SCAN, ExperimentKind.DILATION_SCAN):
        section = parser["scan"] if "scan" in parser else {"name": "scan"}
        if not isinstance(section, configparser.SectionProxy):
            parser.add_section("scan")
            section = parser["scan"]
        scan = _parse_scan(section, kind)
    elif kind is ExperimentKind.LANDSCAPE:
        if "landscape" not in parser:
            parser.add_section("landscape")
        landscape = _parse_landscape(parser["landscape"])
    else:
        if "invert" not in parser:
            raise ConfigError("invert experiments need an [invert] section")
        invert = _parse_invert(parser["invert"], misfits)
        if "optimizer" not in parser:
            parser.add_section("optimizer")
        optimizer, bounds = _parse_optimizer(parser["optimizer"])

    raw = {s: dict(parser[s]) for s in parser.sections()}
    return ExperimentConfig(kind=kind, seed=seed, misfits=misfits, scan=scan,
                            landscape=landscape, invert=invert,
                            optimizer=optimizer, bounds=bounds, raw=raw)
