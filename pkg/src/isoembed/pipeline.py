"""End-to-end solve drivers and their JSON/CSV reporting.

A run is configured by one flat JSON object (see RunConfig), produces a
SolveReport whose dictionary form round-trips through json, and leaves its
artifacts under out_dir: <command>_report.json plus CSV dumps of the final
fields.  Configuration problems raise ConfigError; everything downstream
raises ValueError or FloatingPointError, and a partial report is still
written before the error propagates."""

from __future__ import annotations

import dataclasses
import json
import os
import time
import warnings

import numpy as np

from .decompose import (
    DecompositionResult,
    ExpBump,
    PlateauBump,
    PrimitiveTensor,
    cone_decompose,
    decomposition_to_json,
    localize_primitives,
    quartic_partition,
)
from .freemaps import (
    FreeMapRecord,
    free_map_record,
    headroom_scale,
    pullback_metric,
)
from .grids import (
    BallGrid,
    ScalarField,
    SymTensorField,
    cm_alpha_norm,
    csv_to_field,
    field_to_csv,
    make_ball_grid,
    sym_pairs,
)
from .oscillate import (
    StepState,
    build_frames,
    build_profiles,
    build_u1,
    corrector_u2,
    injectivity_margin,
    padded_standard_map,
    step_Fk,
    substitute,
)
from .perturb import PerturbationProblem, build_E, family_solve, fixed_point_solve
from .poisson import regularity_diagnostic

FRAME_EPS = 0.3            # frame-mixing scale of the oscillation stage
COLLAR_STEPS = 4           # working-region dilation passed to build_u1
SUPPORT_STEPS = (3, 6)     # plateau inner/outer collar beyond a stage support
INJ_DELTA_L = 0.25         # pair separation for the injectivity certificate
T_SAMPLES = {2: 512, 3: 2048}   # phase samples needed per substitution order


class ConfigError(ValueError):
    """Bad or missing run configuration; the command line maps it to exit 2."""


# ---------------------------------------------------------------------------
# Run configuration


_MISSING = object()

_DEFAULTS = {
    "q": None,
    "alpha": 0.5,
    "epsilon": 0.1,
    "k": None,
    "k0_override": None,
    "theta": 1e-2,
    "tol": 1e-9,
    "max_iter": 40,
    "seed": 0,
    "metric": None,
    "delta": 0.5,
    "out_dir": ".",
}


@dataclasses.dataclass
class RunConfig:
    """One solve's worth of knobs, deserialized from a flat JSON object.

    n, N are required; q defaults to the padded-map width n(n+3)/2 + 5; k is
    resolved at run time (from k0_override, or by the decay-slope estimate)
    when left unset.  metric is {"name": ..., "params": {...}} and is only
    required by commands that consume one."""

    n: int
    N: int
    q: int = None
    alpha: float = 0.5
    epsilon: float = 0.1
    k: int | None = None
    k0_override: int | None = None
    theta: float = 1e-2
    tol: float = 1e-9
    max_iter: int = 40
    seed: int = 0
    metric: dict | None = None
    delta: float = 0.5
    out_dir: str = "."

    def __post_init__(self):
        if self.q is None:
            self.q = self.n * (self.n + 3) // 2 + 5
        self._check()

    def _check(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(isinstance(self.n, int) and 1 <= self.n <= 3,
             "config key n must be an integer in [1, 3]")
        need(isinstance(self.N, int) and self.N >= 9 and self.N % 2 == 1,
             "config key N must be an odd integer >= 9")
        need(isinstance(self.q, int) and self.q >= self.n * (self.n + 3) // 2,
             f"config key q must be an integer >= {self.n * (self.n + 3) // 2}")
        need(0.0 < self.alpha < 1.0, "config key alpha must lie in (0, 1)")
        need(0.0 < self.epsilon <= 1.0, "config key epsilon must lie in (0, 1]")
        if self.k is not None:
            need(isinstance(self.k, int) and self.k >= 2,
                 "config key k must be an integer >= 2")
        if self.k0_override is not None:
            need(isinstance(self.k0_override, int) and self.k0_override >= 0,
                 "config key k0_override must be a nonnegative integer")
        need(self.theta > 0.0, "config key theta must be positive")
        need(self.tol > 0.0, "config key tol must be positive")
        need(isinstance(self.max_iter, int) and self.max_iter >= 1,
             "config key max_iter must be a positive integer")
        need(isinstance(self.seed, int), "config key seed must be an integer")
        need(self.delta > 0.0, "config key delta must be positive")
        need(isinstance(self.out_dir, str) and self.out_dir,
             "config key out_dir must be a nonempty string")
        if self.metric is not None:
            need(isinstance(self.metric, dict), "config key metric must be an object")
            if "name" not in self.metric:
                raise ConfigError("missing config key: metric.name")
            need(isinstance(self.metric["name"], str),
                 "config key metric.name must be a string")
            params = self.metric.get("params", {})
            need(isinstance(params, dict), "config key metric.params must be an object")
            unknown = set(self.metric) - {"name", "params"}
            if unknown:
                raise ConfigError(f"unknown config key: metric.{sorted(unknown)[0]}")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        for key in ("n", "N"):
            if key not in data:
                raise ConfigError(f"missing config key: {key}")
        unknown = set(data) - {"n", "N"} - set(_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config key: {sorted(unknown)[0]}")
        kwargs = {"n": data["n"], "N": data["N"]}
        for key, default in _DEFAULTS.items():
            kwargs[key] = data.get(key, default)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path: str) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        return cls.from_dict(data)

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return out


def _metric_name(config: RunConfig) -> str:
    if config.metric is None:
        raise ConfigError("missing config key: metric")
    return config.metric["name"]


def _metric_params(config: RunConfig) -> dict:
    return dict(config.metric.get("params", {}))


def _param(params: dict, key: str, default=_MISSING):
    if key in params:
        return params[key]
    if default is _MISSING:
        raise ConfigError(f"missing config key: metric.params.{key}")
    return default


def _center(params: dict, n: int, key: str = "center") -> np.ndarray:
    c = np.asarray(_param(params, key, [0.0] * n), dtype=float)
    if c.shape != (n,):
        raise ConfigError(f"config key metric.params.{key} must have {n} entries")
    return c


# ---------------------------------------------------------------------------
# Metric builders


def _axis_primitive(grid: BallGrid, scale: float, center, radius: float) -> PrimitiveTensor:
    """Gain scale * bump^4 (dx^1)^2 as a single first-axis primitive."""
    if radius <= 0.0:
        raise ConfigError("config key metric.params.radius must be positive")
    bump = ExpBump(center, radius)
    amp = float(scale) ** 0.25
    field = ScalarField(grid, amp * bump.values(grid.coords), amp * bump.grads(grid.coords))
    form = np.zeros(grid.n)
    form[0] = 1.0
    try:
        return PrimitiveTensor(
            field=field,
            form=form,
            rotation=np.eye(grid.n),
            support_center=np.asarray(center, dtype=float),
            support_radius=float(radius),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def gain_primitives(config: RunConfig, grid: BallGrid) -> list[PrimitiveTensor]:
    """Primitive list of a metric gain declared directly in the config.

    flat_plus_bump: one first-axis primitive amplitude * bump^4 (dx^1)^2.
    primitive_direct: an explicit list of {scale, center, radius} entries.
    Zero-scale entries are dropped, so a vanishing gain yields an empty list."""
    name = _metric_name(config)
    params = _metric_params(config)
    prims = []
    if name == "flat_plus_bump":
        amp = float(_param(params, "amplitude"))
        if amp < 0.0:
            raise ConfigError("config key metric.params.amplitude must be nonnegative")
        if amp > 0.0:
            prims.append(_axis_primitive(
                grid, amp, _center(params, grid.n), float(_param(params, "radius", 0.4))))
    elif name == "primitive_direct":
        entries = _param(params, "primitives")
        if not isinstance(entries, list) or not entries:
            raise ConfigError("config key metric.params.primitives must be a nonempty list")
        for pos, entry in enumerate(entries):
            if not isinstance(entry, dict):
                raise ConfigError(f"config key metric.params.primitives[{pos}] must be an object")
            for key in ("scale", "center", "radius"):
                if key not in entry:
                    raise ConfigError(
                        f"missing config key: metric.params.primitives[{pos}].{key}")
            scale = float(entry["scale"])
            if scale < 0.0:
                raise ConfigError(
                    f"config key metric.params.primitives[{pos}].scale must be nonnegative")
            if scale == 0.0:
                continue
            center = np.asarray(entry["center"], dtype=float)
            if center.shape != (grid.n,):
                raise ConfigError(
                    f"config key metric.params.primitives[{pos}].center must have {grid.n} entries")
            prims.append(_axis_primitive(grid, scale, center, float(entry["radius"])))
    else:
        raise ConfigError(
            f"metric {name} does not declare primitives; use flat_plus_bump or primitive_direct")
    return prims


def _anisotropic_target(config: RunConfig, grid: BallGrid) -> np.ndarray:
    """g = g_can + diag(c_i * bump^4) in i <= j storage, shape (P, nn)."""
    params = _metric_params(config)
    coeffs = np.asarray(_param(params, "coefficients", [0.3] * grid.n), dtype=float)
    if coeffs.shape != (grid.n,):
        raise ConfigError(f"config key metric.params.coefficients must have {grid.n} entries")
    if np.any(coeffs < 0.0):
        raise ConfigError("config key metric.params.coefficients must be nonnegative")
    bump = ExpBump(_center(params, grid.n), float(_param(params, "radius", 0.5)))
    phi4 = bump.values(grid.coords) ** 4
    nn = grid.n * (grid.n + 1) // 2
    g = np.zeros((grid.P, nn))
    for k, (i, j) in enumerate(sym_pairs(grid.n)):
        if i == j:
            g[:, k] = 1.0 + coeffs[i] * phi4
    return g


def _ramp_curve(config: RunConfig, grid: BallGrid):
    """Conformal linear ramp: ghat(t) = t * amplitude * bump * g_can.

    Returns (plateau cutoff, per-slice tensor values (S, P, nn), times)."""
    params = _metric_params(config)
    amp = float(_param(params, "amplitude"))
    center = _center(params, grid.n)
    radius = float(_param(params, "radius", 0.5))
    slices = _param(params, "slices", 5)
    t_end = float(_param(params, "t_end", 1.0))
    if not isinstance(slices, int) or slices < 2:
        raise ConfigError("config key metric.params.slices must be an integer >= 2")
    if t_end <= 0.0:
        raise ConfigError("config key metric.params.t_end must be positive")
    if radius <= 0.0:
        raise ConfigError("config key metric.params.radius must be positive")
    shape = amp * ExpBump(center, radius).values(grid.coords)
    nn = grid.n * (grid.n + 1) // 2
    base_curve = np.zeros((grid.P, nn))
    for k, (i, j) in enumerate(sym_pairs(grid.n)):
        if i == j:
            base_curve[:, k] = shape
    r1 = radius + SUPPORT_STEPS[0] * grid.h
    r2 = radius + SUPPORT_STEPS[1] * grid.h
    if float(np.linalg.norm(center)) + r2 >= 1.0 - 1e-12:
        raise ConfigError("metric.params.radius leaves no collar inside the unit ball")
    plateau = PlateauBump(center, r1, r2).on_grid(grid)
    times = np.linspace(0.0, t_end, slices)
    return plateau, base_curve, times


# ---------------------------------------------------------------------------
# Verification and report plumbing


def verify_pullback(record: FreeMapRecord, target: SymTensorField, alpha: float = 0.5):
    """Metric defect of a map against a target tensor.

    Returns (residual (P, nn), norms dict with max, l2, and C^{0,alpha}
    entries measured over non-exterior nodes)."""
    grid = record.grid
    if target.grid is not grid and (target.grid.n != grid.n or target.grid.N != grid.N):
        raise ValueError("target tensor lives on a different grid")
    resid = pullback_metric(record.jet) - target.values
    mask = grid.nonext_mask
    sel = resid[mask]
    norms = {
        "max": float(np.abs(sel).max()),
        "l2": float(np.sqrt(grid.h ** grid.n * np.sum(sel ** 2))),
        "holder": float(max(
            cm_alpha_norm(grid, resid[:, c], 0, alpha).value
            for c in range(resid.shape[1])
        )),
    }
    return resid, norms


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else None
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


@dataclasses.dataclass
class SolveReport:
    """Everything one command produced: config echo, per-stage entries, the
    final certificate block, and wall-clock timings.  Only the timing block
    may differ between identical reruns."""

    command: str
    config: dict
    stages: list
    final: dict
    timing: dict
    path: str | None = None
    record: FreeMapRecord | None = dataclasses.field(default=None, repr=False)

    def as_dict(self) -> dict:
        return _jsonable({
            "command": self.command,
            "config": self.config,
            "stages": self.stages,
            "final": self.final,
            "timing": self.timing,
        })

    def write(self, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        name = self.command.replace("-", "_") + "_report.json"
        self.path = os.path.join(out_dir, name)
        with open(self.path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return self.path


def _abort(command: str, config: RunConfig, stages: list, timing: dict, exc: Exception):
    """Write the partial report before letting a stage error propagate."""
    report = SolveReport(
        command=command,
        config=config.as_dict(),
        stages=stages,
        final={"error": str(exc)},
        timing=timing,
    )
    try:
        report.write(config.out_dir)
    except OSError:
        pass
    raise exc


def _log_entries(logs: list) -> list:
    out = []
    for log in logs:
        entry = {"kind": type(log).__name__}
        entry.update(dataclasses.asdict(log))
        entry.pop("values", None)
        entry.pop("residual", None)
        out.append(entry)
    return out


# ---------------------------------------------------------------------------
# Order selection


def estimate_k0(state: StepState, eps_ladder=(0.2, 0.1), alpha: float = 0.5) -> dict:
    """Decay index of the solve-operator bound along an eps ladder.

    Substitutes the staged map at each eps, probes the lower bound on the
    right-inverse norm, and regresses its log-log slope; k0 is the rounded-up
    nonnegative slope and the suggested step count is 2 k0 + 3."""
    eps_ladder = tuple(float(e) for e in eps_ladder)
    if len(eps_ladder) < 2 or not all(a > b for a, b in zip(eps_ladder, eps_ladder[1:])):
        raise ValueError("eps ladder must be strictly decreasing with >= 2 rungs")
    norms = []
    for eps in eps_ladder:
        sub = substitute(state, eps)
        norms.append(build_E(sub.record).norm_lower_bound(alpha))
    logs_e = np.log(eps_ladder)
    logs_n = np.log(norms)
    slope = float(np.polyfit(logs_e, logs_n, 1)[0])
    k0 = max(0, int(np.ceil(-slope - 1e-9)))
    return {
        "eps_ladder": list(eps_ladder),
        "norm_bounds": [float(v) for v in norms],
        "slope": slope,
        "k0": k0,
        "k_suggested": 2 * k0 + 3,
    }


def _resolve_k(config: RunConfig, k0_info: dict | None = None) -> int:
    if config.k is not None:
        k = config.k
    elif config.k0_override is not None:
        k = 2 * config.k0_override + 3
    elif k0_info is not None:
        k = k0_info["k_suggested"]
    else:
        k = 3
    if k not in T_SAMPLES:
        raise ConfigError(
            f"step count k = {k} is outside the supported substitution orders {sorted(T_SAMPLES)}")
    return k


# ---------------------------------------------------------------------------
# One primitive through the oscillation stage


_AXIS_TOL = 1e-9


def _first_axis_amplitude(grid: BallGrid, prim: PrimitiveTensor, label: str) -> ScalarField:
    """Fold the form length into the amplitude; only +-e1 forms oscillate."""
    lam = float(np.linalg.norm(prim.form))
    direction = prim.form / lam
    e1 = np.zeros(grid.n)
    e1[0] = 1.0
    if min(np.abs(direction - e1).max(), np.abs(direction + e1).max()) > _AXIS_TOL:
        raise ValueError(
            f"{label}: oscillation needs the first coordinate direction, got form {prim.form}")
    s = np.sqrt(lam)
    grad = None if prim.field.grad is None else s * prim.field.grad
    return ScalarField(grid, s * prim.field.values, grad)


def _oscillate(config: RunConfig, current: FreeMapRecord, amp: ScalarField, profiles, k: int):
    frames = build_frames(current, FRAME_EPS)
    state = build_u1(current, amp, frames, profiles, collar_steps=COLLAR_STEPS)
    corrector_u2(state)
    for kk in range(2, k):
        step_Fk(state, kk)
    return state


def _collar_plateau(grid: BallGrid, center: np.ndarray, support_mask: np.ndarray,
                    label: str) -> tuple[ScalarField, float, float]:
    """Plateau cutoff hugging a measured support: 1 out to R + 3h, gone by R + 6h."""
    dist = np.linalg.norm(grid.coords - center, axis=1)
    radius = float(dist[support_mask].max())
    r1 = radius + SUPPORT_STEPS[0] * grid.h
    r2 = radius + SUPPORT_STEPS[1] * grid.h
    if float(np.linalg.norm(center)) + r2 >= 1.0 - 1e-12:
        raise ValueError(f"{label}: correction collar reaches the unit sphere")
    return PlateauBump(center, r1, r2).on_grid(grid), r1, r2


# ---------------------------------------------------------------------------
# embed


def run_embed(config: RunConfig) -> SolveReport:
    """Full chain: declared gain -> per-primitive oscillation -> perturbative
    cleanup -> assembled certificates, with artifacts under out_dir."""
    t_start = time.perf_counter()
    grid = make_ball_grid(config.n, config.N)
    base = padded_standard_map(grid, extra=config.q - grid.n * (grid.n + 3) // 2)
    base_pull = pullback_metric(base.jet)
    mask = grid.nonext_mask
    stages: list = []
    timing: dict = {}

    prims = gain_primitives(config, grid)
    stages.append({
        "stage": "decompose",
        "route": "direct",
        "primitives": len(prims),
        "forms": [list(p.form) for p in prims],
        "max_error": 0.0,
    })

    try:
        k0_info = None
        if config.k is None and config.k0_override is None and prims:
            # decide the step count from the decay of the solve operator on a
            # cheap second-order chain before committing to the full build
            probe_profiles = build_profiles(T_SAMPLES[2])
            amp0 = _first_axis_amplitude(grid, prims[0], "primitive 0")
            probe = _oscillate(config, base, amp0, probe_profiles, k=2)
            k0_info = estimate_k0(probe, alpha=config.alpha)
            k0_info["k_suggested"] = min(k0_info["k_suggested"], max(T_SAMPLES))
            stages.append({"stage": "order_selection", **k0_info})
        k = _resolve_k(config, k0_info)
        profiles = build_profiles(T_SAMPLES[k]) if prims else None

        current = base
        gain_sum = np.zeros_like(base_pull)
        budget_total = 0.0
        allowed = np.zeros(grid.P, dtype=bool)
        per_prim_budget = config.delta / max(len(prims), 1)

        for idx, prim in enumerate(prims):
            label = f"primitive {idx}"
            t0 = time.perf_counter()
            amp = _first_axis_amplitude(grid, prim, label)
            state = _oscillate(config, current, amp, profiles, k)
            sub = substitute(state, config.epsilon)
            osc = sub.record
            gain = prim.tensor_values()
            defect = pullback_metric(osc.jet) - pullback_metric(current.jet) - gain
            osc_disp = float(np.abs(osc.values - current.values).max())
            stages.append({
                "stage": "oscillate",
                "primitive": idx,
                "eps": config.epsilon,
                "k": k,
                "order": sub.order,
                "t_samples": state.profiles.M,
                "scaled_defect_sup": sub.residual_sup,
                "defect_max": float(np.abs(defect[mask]).max()),
                "displacement": osc_disp,
                "displacement_budget": per_prim_budget,
                "steps": _log_entries(state.step_logs),
            })

            supp = np.any(defect != 0.0, axis=1)
            allowed |= state.K_mask
            if supp.any():
                plateau, r1, r2 = _collar_plateau(grid, prim.support_center, supp, label)
                problem = PerturbationProblem(
                    osc, plateau, SymTensorField(grid, -defect),
                    alpha=config.alpha, tol=config.tol,
                    max_iter=config.max_iter, gate_threshold=config.theta,
                )
                with warnings.catch_warnings(record=True) as wlog:
                    warnings.simplefilter("always")
                    _, u, trace = fixed_point_solve(problem)
                notes = [str(w.message) for w in wlog]
                if not trace.converged:
                    raise FloatingPointError(
                        f"{label}: fixed point stalled after {trace.iterations} iterations")
                current = free_map_record(grid, osc.values + u.values)
                budget_total += trace.residual_budget
                allowed |= np.linalg.norm(grid.coords - prim.support_center, axis=1) <= r2
                perturb_entry = {
                    "stage": "perturb",
                    "primitive": idx,
                    "plateau": [r1, r2],
                    "fixed_point": trace.as_dict(),
                    "warnings": notes,
                }
            else:
                current = osc
                perturb_entry = {"stage": "perturb", "primitive": idx, "skipped": "zero defect"}

            gain_sum += gain
            partial = pullback_metric(current.jet) - base_pull - gain_sum
            perturb_entry["pullback_partial_max"] = float(np.abs(partial[mask]).max())
            perturb_entry["displacement_total"] = float(
                np.abs(current.values - base.values).max())
            stages.append(perturb_entry)
            timing[f"primitive_{idx:02d}"] = time.perf_counter() - t0

        resid, norms = verify_pullback(
            current, SymTensorField(grid, base_pull + gain_sum), config.alpha)
        if norms["max"] > budget_total and prims:
            raise FloatingPointError(
                f"assembled pullback residual {norms['max']:.3e} exceeds the "
                f"stage budget sum {budget_total:.3e}")
        displacement = float(np.abs(current.values - base.values).max())
        if displacement > config.delta:
            raise FloatingPointError(
                f"total displacement {displacement:.3e} exceeds delta {config.delta:.3e}")
        if np.any(current.values[~allowed] != base.values[~allowed]):
            raise FloatingPointError("the correction escaped its declared support region")
        inj = injectivity_margin(current, INJ_DELTA_L)
        if current.min_margin <= 0.0 or inj.immersion <= 0.0:
            raise FloatingPointError("assembled map lost its freeness certificate")

        final = {
            "pullback_residual_max": norms["max"],
            "pullback_residual_l2": norms["l2"],
            "pullback_residual_holder": norms["holder"],
            "residual_budget_total": budget_total,
            "displacement_max": displacement,
            "displacement_budget": config.delta,
            "freeness_min": float(current.min_margin),
            "injectivity_min": inj.value,
            "immersion_min": inj.immersion,
            "support_nodes": int(np.count_nonzero(
                np.any(current.values != base.values, axis=1))),
            "k": k,
        }
    except (ValueError, FloatingPointError) as exc:
        timing["total"] = time.perf_counter() - t_start
        _abort("embed", config, stages, timing, exc)

    os.makedirs(config.out_dir, exist_ok=True)
    field_to_csv(grid, current.values, os.path.join(config.out_dir, "final_map.csv"))
    field_to_csv(grid, resid, os.path.join(config.out_dir, "pullback_residual.csv"))
    timing["total"] = time.perf_counter() - t_start
    report = SolveReport(
        command="embed",
        config=config.as_dict(),
        stages=stages,
        final=final,
        timing=timing,
        record=current,
    )
    report.write(config.out_dir)
    return report


# ---------------------------------------------------------------------------
# family


def run_family(config: RunConfig) -> SolveReport:
    """Track a curve of conformal gains, halving the time window until every
    slice passes its contraction gate."""
    t_start = time.perf_counter()
    if _metric_name(config) != "conformal_ramp":
        raise ConfigError("family runs need metric.name = conformal_ramp")
    grid = make_ball_grid(config.n, config.N)
    base = padded_standard_map(grid, extra=config.q - grid.n * (grid.n + 3) // 2)
    plateau, base_curve, times = _ramp_curve(config, grid)
    stages: list = []
    timing: dict = {}
    halvings: list = []

    try:
        while True:
            ghat = [SymTensorField(grid, t * base_curve) for t in times]
            try:
                with warnings.catch_warnings(record=True):
                    warnings.simplefilter("always")
                    rep = family_solve(
                        base, plateau, ghat, times=times,
                        alpha=config.alpha, tol=config.tol,
                        max_iter=config.max_iter, gate_threshold=config.theta,
                    )
                worst_gate = max(tr.gate_value for tr in rep.traces)
                if worst_gate > config.theta:
                    raise FloatingPointError(
                        f"contraction gate {worst_gate:.3e} exceeds theta {config.theta:.3e}")
                stalled = [t for t, tr in zip(times, rep.traces) if not tr.converged]
                if stalled:
                    raise FloatingPointError(
                        f"time slice t={stalled[0]:.6g}: fixed point did not converge")
                break
            except FloatingPointError as exc:
                halvings.append({
                    "window_end": float(times[-1]),
                    "slices": len(times),
                    "reason": str(exc),
                })
                keep = times[times <= times[-1] / 2.0 + 1e-12]
                if len(keep) < 2:
                    raise ValueError(
                        f"family window collapsed below two slices ({exc})") from exc
                times = keep

        min_margin = min(tr.assembled_margin for tr in rep.traces[1:]) \
            if len(rep.traces) > 1 else float(base.min_margin)
        final = {
            "window_end": float(times[-1]),
            "slices": len(times),
            "halvings": len(halvings),
            "max_gate": float(max(tr.gate_value for tr in rep.traces)),
            "per_slice_residual_max": [tr.residual_max for tr in rep.traces],
            "per_slice_budget": [tr.residual_budget for tr in rep.traces],
            "max_stability_ratio": float(max(rep.stability_ratios))
            if rep.stability_ratios else None,
            "max_warm_cold_gap": float(max(rep.warm_cold_gaps))
            if rep.warm_cold_gaps else None,
            "dt1_sup": rep.dt1_sup,
            "dt2_sup": rep.dt2_sup,
            "freeness_min": min_margin,
        }
        stages.append({
            "stage": "family",
            "halvings": halvings,
            "report": rep.as_dict(),
        })
    except (ValueError, FloatingPointError) as exc:
        timing["total"] = time.perf_counter() - t_start
        _abort("family", config, stages, timing, exc)

    os.makedirs(config.out_dir, exist_ok=True)
    last = free_map_record(grid, base.values + rep.us[-1].values)
    field_to_csv(grid, last.values, os.path.join(config.out_dir, "final_map.csv"))
    timing["total"] = time.perf_counter() - t_start
    report = SolveReport(
        command="family",
        config=config.as_dict(),
        stages=stages,
        final=final,
        timing=timing,
        record=last,
    )
    report.write(config.out_dir)
    return report


# ---------------------------------------------------------------------------
# decompose


def run_decompose(config: RunConfig) -> SolveReport:
    """Write a positive rank-one decomposition of the configured gain.

    Primitive-style metrics serialize their declared primitives; anisotropic
    targets go through headroom scaling and the cone representation."""
    t_start = time.perf_counter()
    grid = make_ball_grid(config.n, config.N)
    name = _metric_name(config)
    stages: list = []
    timing: dict = {}

    try:
        if name in ("flat_plus_bump", "primitive_direct"):
            prims = gain_primitives(config, grid)
            result = DecompositionResult(
                primitives=prims,
                residual=np.zeros((grid.P, grid.n * (grid.n + 1) // 2)),
                max_error=0.0,
                grid=grid,
            )
            final = {
                "route": "direct",
                "primitives": len(prims),
                "reconstruction_max": 0.0,
            }
        elif name == "anisotropic":
            params = _metric_params(config)
            g = _anisotropic_target(config, grid)
            base = padded_standard_map(grid, extra=config.q - grid.n * (grid.n + 3) // 2)
            scaled, eps0 = headroom_scale(base, g)
            h = SymTensorField(grid, g - pullback_metric(scaled.jet))
            center = _center(params, grid.n)
            rep = cone_decompose(h, center=center)
            covered = (np.linalg.norm(grid.coords - center, axis=1)
                       <= 0.8 * rep.rho) & grid.nonext_mask
            cutoffs = quartic_partition(grid, [(center, rep.rho)], mask=covered)
            result = localize_primitives(rep, cutoffs)
            recon = result.total()
            weight = cutoffs[0].values ** 4
            err = float(np.abs(recon[covered] - (weight[:, None] * h.values)[covered]).max())
            final = {
                "route": "cone",
                "primitives": len(result.primitives),
                "eps0": eps0,
                "rho": rep.rho,
                "coefficient_min": float(rep.coefficients[rep.ball_mask()].min()),
                "reconstruction_max": err,
            }
        else:
            raise ConfigError(f"unknown metric name: {name}")

        os.makedirs(config.out_dir, exist_ok=True)
        json_path = decomposition_to_json(result, config.out_dir)
        final["primitives_json"] = os.path.basename(json_path)
        stages.append({
            "stage": "decompose",
            "primitives": len(result.primitives),
            "forms": [list(p.form) for p in result.primitives],
            "max_error": result.max_error,
        })
    except (ValueError, FloatingPointError) as exc:
        timing["total"] = time.perf_counter() - t_start
        _abort("decompose", config, stages, timing, exc)

    timing["total"] = time.perf_counter() - t_start
    report = SolveReport(
        command="decompose",
        config=config.as_dict(),
        stages=stages,
        final=final,
        timing=timing,
    )
    report.write(config.out_dir)
    return report


# ---------------------------------------------------------------------------
# oscillate


def run_oscillate(config: RunConfig) -> SolveReport:
    """One primitive through the staged oscillation, with the defect measured
    at eps and eps/2 so the report exhibits the claimed decay order."""
    t_start = time.perf_counter()
    grid = make_ball_grid(config.n, config.N)
    base = padded_standard_map(grid, extra=config.q - grid.n * (grid.n + 3) // 2)
    stages: list = []
    timing: dict = {}

    try:
        prims = gain_primitives(config, grid)
        if len(prims) != 1:
            raise ValueError(
                f"the oscillation driver takes exactly one primitive, got {len(prims)}")
        k = _resolve_k(config)
        profiles = build_profiles(T_SAMPLES[k])
        amp = _first_axis_amplitude(grid, prims[0], "primitive 0")
        state = _oscillate(config, base, amp, profiles, k)
        sub = substitute(state, config.epsilon)
        half = substitute(state, config.epsilon / 2.0)
        # raw defects recover a factor 2^order between the two eps levels
        raw = sub.residual_sup * config.epsilon ** sub.order
        raw_half = half.residual_sup * (config.epsilon / 2.0) ** half.order
        inj = injectivity_margin(sub.record, INJ_DELTA_L)
        stages.append({
            "stage": "oscillate",
            "primitive": 0,
            "eps": config.epsilon,
            "k": k,
            "t_samples": profiles.M,
            "steps": _log_entries(state.step_logs),
        })
        final = {
            "order": sub.order,
            "scaled_defect_sup": sub.residual_sup,
            "defect_ratio": raw / raw_half if raw_half > 0.0 else None,
            "expected_ratio": 2.0 ** sub.order,
            "displacement_max": sub.displacement * config.epsilon,
            "freeness_min": float(sub.record.min_margin),
            "injectivity_min": inj.value,
            "immersion_min": inj.immersion,
        }
        os.makedirs(config.out_dir, exist_ok=True)
        field_to_csv(grid, sub.record.values,
                     os.path.join(config.out_dir, "oscillate_map.csv"))
    except (ValueError, FloatingPointError) as exc:
        timing["total"] = time.perf_counter() - t_start
        _abort("oscillate", config, stages, timing, exc)

    timing["total"] = time.perf_counter() - t_start
    report = SolveReport(
        command="oscillate",
        config=config.as_dict(),
        stages=stages,
        final=final,
        timing=timing,
        record=sub.record,
    )
    report.write(config.out_dir)
    return report


# ---------------------------------------------------------------------------
# perturb


def run_perturb(config: RunConfig) -> SolveReport:
    """Solve one localized perturbation problem on the padded base map, with
    the declared gain as the residual tensor."""
    t_start = time.perf_counter()
    grid = make_ball_grid(config.n, config.N)
    base = padded_standard_map(grid, extra=config.q - grid.n * (grid.n + 3) // 2)
    stages: list = []
    timing: dict = {}

    try:
        prims = gain_primitives(config, grid)
        if len(prims) != 1:
            raise ValueError(
                f"the perturbation driver takes exactly one primitive, got {len(prims)}")
        prim = prims[0]
        f = prim.tensor_values()
        supp = np.any(f != 0.0, axis=1)
        plateau, r1, r2 = _collar_plateau(grid, prim.support_center, supp, "primitive 0")
        problem = PerturbationProblem(
            base, plateau, SymTensorField(grid, f),
            alpha=config.alpha, tol=config.tol,
            max_iter=config.max_iter, gate_threshold=config.theta,
        )
        with warnings.catch_warnings(record=True) as wlog:
            warnings.simplefilter("always")
            _, u, trace = fixed_point_solve(problem)
        assembled = free_map_record(grid, base.values + u.values)
        resid, norms = verify_pullback(
            assembled, SymTensorField(grid, pullback_metric(base.jet) + f), config.alpha)
        stages.append({
            "stage": "perturb",
            "primitive": 0,
            "plateau": [r1, r2],
            "fixed_point": trace.as_dict(),
            "warnings": [str(w.message) for w in wlog],
        })
        final = {
            "residual_max": trace.residual_max,
            "residual_budget": trace.residual_budget,
            "verify_max": norms["max"],
            "verify_l2": norms["l2"],
            "freeness_min": float(assembled.min_margin),
            "correction_max": float(np.abs(u.values).max()),
        }
        os.makedirs(config.out_dir, exist_ok=True)
        field_to_csv(grid, assembled.values, os.path.join(config.out_dir, "final_map.csv"))
        field_to_csv(grid, u.values, os.path.join(config.out_dir, "perturb_correction.csv"))
    except (ValueError, FloatingPointError) as exc:
        timing["total"] = time.perf_counter() - t_start
        _abort("perturb", config, stages, timing, exc)

    timing["total"] = time.perf_counter() - t_start
    report = SolveReport(
        command="perturb",
        config=config.as_dict(),
        stages=stages,
        final=final,
        timing=timing,
        record=assembled,
    )
    report.write(config.out_dir)
    return report


# ---------------------------------------------------------------------------
# poisson-check


def _poisson_cases(n: int):
    """Analytic Dirichlet pairs on the unit ball in n variables."""
    def f_const(x):
        return np.full(x.shape[0], 2.0 * n)

    def u_const(x):
        return np.sum(x ** 2, axis=1) - 1.0

    def f_quartic(x):
        return np.sum(x ** 2, axis=1)

    def u_quartic(x):
        return (np.sum(x ** 2, axis=1) ** 2 - 1.0) / (4.0 * (n + 2))

    return [("constant", f_const, u_const), ("quartic", f_quartic, u_quartic)]


def run_poisson_check(config: RunConfig) -> SolveReport:
    """Refinement study of the Dirichlet solver against analytic solutions."""
    t_start = time.perf_counter()
    params = _metric_params(config) if config.metric is not None else {}
    ladder = tuple(_param(params, "ladder", [33, 65, 129]))
    if len(ladder) < 2 or not all(isinstance(N, int) and N % 2 == 1 for N in ladder):
        raise ConfigError("config key metric.params.ladder must list odd grid sizes")
    stages: list = []
    timing: dict = {}
    os.makedirs(config.out_dir, exist_ok=True)

    try:
        orders = []
        finest = []
        for name, f_of_x, exact in _poisson_cases(config.n):
            diag = regularity_diagnostic(
                f_of_x, exact_of_x=exact, n=config.n, ladder=ladder,
                m=0, alpha=config.alpha,
                csv_path=os.path.join(config.out_dir, f"poisson_{name}.csv"),
            )
            rows = [dataclasses.asdict(r) for r in diag["rows"]]
            stages.append({
                "stage": "poisson",
                "case": name,
                "rows": rows,
                "orders": diag["orders"],
                "ratio_spread": diag["ratio_spread"],
                "flags": diag["flags"],
            })
            orders.extend(o for o in diag["orders"] if np.isfinite(o))
            finest.append(rows[-1]["max_error"])
        final = {
            "ladder": list(ladder),
            "min_order": min(orders) if orders else None,
            "max_error_finest": max(finest),
        }
        if orders and min(orders) < 1.7:
            raise FloatingPointError(
                f"refinement order {min(orders):.3f} fell below the second-order gate")
    except (ValueError, FloatingPointError) as exc:
        timing["total"] = time.perf_counter() - t_start
        _abort("poisson-check", config, stages, timing, exc)

    timing["total"] = time.perf_counter() - t_start
    report = SolveReport(
        command="poisson-check",
        config=config.as_dict(),
        stages=stages,
        final=final,
        timing=timing,
    )
    report.write(config.out_dir)
    return report


# ---------------------------------------------------------------------------
# verify


def run_verify(config: RunConfig) -> SolveReport:
    """Re-measure a previously written final_map.csv against its target."""
    t_start = time.perf_counter()
    grid = make_ball_grid(config.n, config.N)
    base = padded_standard_map(grid, extra=config.q - grid.n * (grid.n + 3) // 2)
    stages: list = []
    timing: dict = {}

    try:
        path = os.path.join(config.out_dir, "final_map.csv")
        if not os.path.exists(path):
            raise ValueError(f"missing artifact: {path}")
        values = csv_to_field(grid, path)
        if values.ndim != 2 or values.shape[1] != config.q:
            raise ValueError(
                f"final map in {path} has {values.shape[-1] if values.ndim == 2 else 1} "
                f"components, configuration says q = {config.q}")
        record = free_map_record(grid, values)
        target = pullback_metric(base.jet)
        for prim in gain_primitives(config, grid):
            target = target + prim.tensor_values()
        resid, norms = verify_pullback(record, SymTensorField(grid, target), config.alpha)
        inj = injectivity_margin(record, INJ_DELTA_L)
        stages.append({"stage": "verify", "map_csv": path})
        final = {
            "pullback_residual_max": norms["max"],
            "pullback_residual_l2": norms["l2"],
            "pullback_residual_holder": norms["holder"],
            "freeness_min": float(record.min_margin),
            "injectivity_min": inj.value,
            "immersion_min": inj.immersion,
            "displacement_max": float(np.abs(record.values - base.values).max()),
        }
        field_to_csv(grid, resid, os.path.join(config.out_dir, "pullback_residual.csv"))
    except (ValueError, FloatingPointError) as exc:
        timing["total"] = time.perf_counter() - t_start
        _abort("verify", config, stages, timing, exc)

    timing["total"] = time.perf_counter() - t_start
    report = SolveReport(
        command="verify",
        config=config.as_dict(),
        stages=stages,
        final=final,
        timing=timing,
        record=record,
    )
    report.write(config.out_dir)
    return report
