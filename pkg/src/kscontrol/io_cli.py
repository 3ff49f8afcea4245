"""Command-line front end: configuration files, snapshots, CSV reports.

Configuration
-------------
Plain text, one ``key = value`` per line, ``#`` starts a comment.  Keys are
flat dotted paths (``model.kappa = 0.5``); every key has a default, so an
empty file is a valid configuration.  Unknown keys are rejected with the
offending key named.  Initial and target fields are compact expressions:

    zero                         shorthand for constant:0
    constant:VALUE
    cosine:BASE,AMP,KX,KY        BASE + AMP cos(KX pi x / Lx) cos(KY pi y / Ly)
    gaussian:BASE,AMP,XC,YC,SIG  BASE + AMP exp(-((x-XC)^2+(y-YC)^2)/(2 SIG^2))
    path:FILE.ksf                values loaded from a snapshot file

Snapshots
---------
Binary, little endian: a 24-byte header ``struct '<4sIIId'`` holding the
magic ``KSF1``, format version 1, ``nx``, ``ny`` and the time stamp, then
``nx * ny`` float64 cell values in row-major order.

Exit codes
----------
0   success
1   usage or configuration problem (including malformed snapshots)
2   solver failure (linear solve, fixed-point stall, lost definiteness)
3   a verification check ran and failed beyond tolerance
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import struct
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import mesh, verify
from .adjoint import solve_adjoint
from .control import (
    AdmissibleSet,
    ControlField,
    CostWeights,
    TrackingTargets,
    project,
    reduced_gradient,
)
from .errors import (
    ConfigError,
    LinearSolverError,
    PicardDivergenceError,
    SnapshotFormatError,
    StepConditioningError,
)
from .forward import (
    ModelParams,
    PicardSettings,
    StateTrajectory,
    TimeGrid,
    solve_forward,
)
from .mesh import Field2D, GridSpec, RegionMask
from .optimize import (
    ArmijoSettings,
    ControlProblem,
    OptimizeOptions,
    cost_of_control,
    solve,
)

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULTS: dict[str, object] = {
    "domain.Lx": 1.0,
    "domain.Ly": 1.0,
    "grid.nx": 32,
    "grid.ny": 32,
    "time.T": 1.0,
    "time.nt": 100,
    "model.kappa": 1.0,
    "model.r": 1.0,
    "model.mu": 2.0,
    "model.p_exponent": 2.1,
    "forward.scheme": "central",
    "forward.cg_tol": 1e-10,
    "forward.picard_tol": 1e-9,
    "forward.picard_max_iters": 50,
    "init.u0": "constant:0.5",
    "init.v0": "constant:0.5",
    "targets.u_d": "constant:0.5",
    "targets.v_d": "constant:0.5",
    "cost.gamma_u": 1.0,
    "cost.gamma_v": 1.0,
    "cost.gamma_f": 1e-3,
    "control.region.x0": 0.0,
    "control.region.y0": 0.0,
    "control.region.x1": 1.0,
    "control.region.y1": 1.0,
    "control.kind": "unconstrained",
    "control.f_min": -1.0,
    "control.f_max": 1.0,
    "control.initial": "zero",
    "optimizer.max_iters": 100,
    "optimizer.vi_tol": 1e-6,
    "optimizer.armijo_c1": 1e-4,
    "optimizer.armijo_shrink": 0.5,
    "optimizer.armijo_s0": 1.0,
    "optimizer.armijo_max_backtracks": 40,
    "output.directory": "out",
    "output.snapshot_every": 0,
}


class _UsageError(Exception):
    """Command-line misuse distinct from configuration-file problems."""


def parse_config_text(text: str) -> dict[str, str]:
    """Raw ``key -> string`` pairs from config text; later entries win."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"line {lineno}", f"expected 'key = value', got {stripped!r}"
            )
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def _convert(key: str, text: str) -> object:
    default = DEFAULTS[key]
    if isinstance(default, str):
        return text
    try:
        if isinstance(default, int) and not isinstance(default, bool):
            return int(text)
        return float(text)
    except ValueError:
        kind = "an integer" if isinstance(default, int) else "a number"
        raise ConfigError(key, f"expected {kind}, got {text!r}") from None


def load_config(path: Optional[str], overrides: list[str]) -> dict[str, object]:
    """Defaults, overlaid with a config file, overlaid with --set pairs."""
    raw: dict[str, str] = {}
    if path is not None:
        try:
            raw.update(parse_config_text(Path(path).read_text()))
        except OSError as err:
            raise ConfigError("config", f"cannot read {path}: {err}") from None
    for pair in overrides:
        if "=" not in pair:
            raise _UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        raw[key.strip()] = value.strip()

    cfg = dict(DEFAULTS)
    for key, text in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown configuration key")
        cfg[key] = _convert(key, text)
    return cfg


# ---------------------------------------------------------------------------
# snapshot files
# ---------------------------------------------------------------------------

SNAPSHOT_MAGIC = b"KSF1"
SNAPSHOT_VERSION = 1
_SNAP_HEADER = struct.Struct("<4sIIId")


def write_snapshot(path: "Path | str", values: np.ndarray, time: float) -> None:
    """Write one field as a KSF1 snapshot (see module docstring)."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError(f"snapshot values must be 2-D, got shape {values.shape}")
    nx, ny = values.shape
    header = _SNAP_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, nx, ny, float(time))
    payload = np.ascontiguousarray(values, dtype="<f8").tobytes()
    Path(path).write_bytes(header + payload)


def read_snapshot(path: "Path | str") -> tuple[np.ndarray, float]:
    """Read a KSF1 snapshot; returns ``(values, time)`` with a writable array."""
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        raise SnapshotFormatError(f"{path}: cannot read snapshot: {err}") from None
    if len(data) < _SNAP_HEADER.size:
        raise SnapshotFormatError(f"{path}: truncated header")
    magic, version, nx, ny, time = _SNAP_HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotFormatError(f"{path}: bad magic {magic!r}, expected {SNAPSHOT_MAGIC!r}")
    if version != SNAPSHOT_VERSION:
        raise SnapshotFormatError(f"{path}: unsupported format version {version}")
    expected = _SNAP_HEADER.size + nx * ny * 8
    if len(data) != expected:
        raise SnapshotFormatError(
            f"{path}: expected {expected} bytes for a {nx}x{ny} field, found {len(data)}"
        )
    values = np.frombuffer(data, dtype="<f8", offset=_SNAP_HEADER.size)
    return values.reshape(nx, ny).astype(float), time


# ---------------------------------------------------------------------------
# field expressions
# ---------------------------------------------------------------------------


def _expr_floats(key: str, text: str, count: int) -> list[float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != count:
        raise ConfigError(key, f"expression needs {count} parameters, got {len(parts)}")
    out = []
    for part in parts:
        try:
            out.append(float(part))
        except ValueError:
            raise ConfigError(key, f"expected a number, got {part!r}") from None
    return out


def evaluate_expression(key: str, text: str, grid: GridSpec) -> Field2D:
    """Turn one config field expression into a grid field."""
    head, _, rest = text.partition(":")
    head = head.strip()
    if head == "zero":
        if rest.strip():
            raise ConfigError(key, "the zero expression takes no parameters")
        return mesh.constant_field(grid, 0.0)
    if head == "constant":
        return mesh.constant_field(grid, _expr_floats(key, rest, 1)[0])
    if head == "cosine":
        base, amp, kx, ky = _expr_floats(key, rest, 4)
        X, Y = grid.cell_centers()
        values = base + amp * np.cos(kx * np.pi * X / grid.Lx) * np.cos(
            ky * np.pi * Y / grid.Ly
        )
        return Field2D(grid, values)
    if head == "gaussian":
        base, amp, xc, yc, sigma = _expr_floats(key, rest, 5)
        if sigma <= 0:
            raise ConfigError(key, "gaussian width must be positive")
        X, Y = grid.cell_centers()
        values = base + amp * np.exp(
            -(((X - xc) ** 2 + (Y - yc) ** 2) / (2.0 * sigma * sigma))
        )
        return Field2D(grid, values)
    if head == "path":
        name = rest.strip()
        if not name:
            raise ConfigError(key, "path expression needs a file name")
        values, _time = read_snapshot(name)
        if values.shape != (grid.nx, grid.ny):
            raise ConfigError(
                key,
                f"snapshot {name} holds a {values.shape[0]}x{values.shape[1]} field, "
                f"the grid is {grid.nx}x{grid.ny}",
            )
        return Field2D(grid, values)
    raise ConfigError(
        key,
        f"unknown field expression {head!r} "
        "(expected constant, cosine, gaussian, or path)",
    )


# ---------------------------------------------------------------------------
# building solver objects from a configuration
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class RunSetup:
    grid: GridSpec
    time_grid: TimeGrid
    params: ModelParams
    scheme: str
    picard: PicardSettings
    cg_tol: float
    region: RegionMask
    admissible: AdmissibleSet
    weights: CostWeights
    u0: Field2D
    v0: Field2D
    targets: TrackingTargets
    f0: ControlField


def _positive(cfg: dict, key: str, what: str) -> float:
    value = float(cfg[key])
    if not value > 0:
        raise ConfigError(key, f"{what} must be positive")
    return value


def build_setup(cfg: dict[str, object], need_cost: bool) -> RunSetup:
    """Validate a configuration and build every solver object it describes.

    ``need_cost`` enables the checks that only make sense when the cost
    functional is actually used (optimization and gradient checks).
    """
    Lx = _positive(cfg, "domain.Lx", "domain length")
    Ly = _positive(cfg, "domain.Ly", "domain length")
    nx, ny = int(cfg["grid.nx"]), int(cfg["grid.ny"])
    if nx < 2:
        raise ConfigError("grid.nx", "need at least two cells per direction")
    if ny < 2:
        raise ConfigError("grid.ny", "need at least two cells per direction")
    grid = GridSpec(Lx, Ly, nx, ny)

    T = _positive(cfg, "time.T", "final time")
    nt = int(cfg["time.nt"])
    if nt < 1:
        raise ConfigError("time.nt", "need at least one time step")
    time_grid = TimeGrid(T=T, nt=nt)

    mu = float(cfg["model.mu"])
    if not mu > 0:
        raise ConfigError("model.mu", "the logistic damping coefficient must be positive")
    p = float(cfg["model.p_exponent"])
    if not 2.0 < p < 3.0:
        raise ConfigError(
            "model.p_exponent", "the control-cost exponent must lie strictly between 2 and 3"
        )
    params = ModelParams(
        kappa=float(cfg["model.kappa"]), r=float(cfg["model.r"]), mu=mu, p_exponent=p
    )

    scheme = str(cfg["forward.scheme"])
    if scheme not in ("central", "upwind"):
        raise ConfigError(
            "forward.scheme", f"expected 'central' or 'upwind', got {scheme!r}"
        )

    picard = PicardSettings(
        tol=_positive(cfg, "forward.picard_tol", "fixed-point tolerance"),
        max_iters=max(int(cfg["forward.picard_max_iters"]), 1),
    )
    cg_tol = _positive(cfg, "forward.cg_tol", "linear solver tolerance")

    x0, y0 = float(cfg["control.region.x0"]), float(cfg["control.region.y0"])
    x1, y1 = float(cfg["control.region.x1"]), float(cfg["control.region.y1"])
    if not x1 > x0:
        raise ConfigError("control.region.x1", "region needs x1 > x0")
    if not y1 > y0:
        raise ConfigError("control.region.y1", "region needs y1 > y0")
    region = RegionMask.rectangle(grid, x0, y0, x1, y1)
    if region.count == 0:
        raise ConfigError("control.region.x0", "the control region contains no grid cells")

    kind = str(cfg["control.kind"])
    if kind == "unconstrained":
        admissible = AdmissibleSet()
    elif kind == "box":
        f_min, f_max = float(cfg["control.f_min"]), float(cfg["control.f_max"])
        if not np.isfinite(f_min) or not np.isfinite(f_max):
            raise ConfigError("control.f_min", "box bounds must be finite")
        if not f_min <= f_max:
            raise ConfigError("control.f_min", "box requires f_min <= f_max")
        admissible = AdmissibleSet("box", f_min, f_max)
    else:
        raise ConfigError(
            "control.kind", f"expected 'unconstrained' or 'box', got {kind!r}"
        )

    gamma_u = float(cfg["cost.gamma_u"])
    gamma_v = float(cfg["cost.gamma_v"])
    gamma_f = float(cfg["cost.gamma_f"])
    for key, value in (("cost.gamma_u", gamma_u), ("cost.gamma_v", gamma_v),
                       ("cost.gamma_f", gamma_f)):
        if value < 0:
            raise ConfigError(key, "cost weights must be nonnegative")
    if need_cost and gamma_f == 0.0 and not admissible.bounded:
        raise ConfigError(
            "cost.gamma_f",
            "a zero control-cost weight is well-posed only on a bounded admissible "
            "set; set control.kind = box with finite control.f_min and "
            "control.f_max",
        )
    weights = CostWeights(gamma_u=gamma_u, gamma_v=gamma_v, gamma_f=gamma_f)

    u0 = evaluate_expression("init.u0", str(cfg["init.u0"]), grid)
    v0 = evaluate_expression("init.v0", str(cfg["init.v0"]), grid)
    for key, field0 in (("init.u0", u0), ("init.v0", v0)):
        lowest = float(field0.values.min())
        if lowest < 0:
            raise ConfigError(
                key, f"initial data must be nonnegative, minimum value is {lowest:.6g}"
            )
    u_d = evaluate_expression("targets.u_d", str(cfg["targets.u_d"]), grid)
    v_d = evaluate_expression("targets.v_d", str(cfg["targets.v_d"]), grid)
    targets = TrackingTargets(u_d=u_d, v_d=v_d)

    f0_field = evaluate_expression("control.initial", str(cfg["control.initial"]), grid)
    f0_values = np.tile(f0_field.values[region.inside], (nt, 1))
    f0 = project(ControlField(time_grid, region, f0_values), admissible)

    return RunSetup(grid, time_grid, params, scheme, picard, cg_tol, region,
                    admissible, weights, u0, v0, targets, f0)


def build_problem(cfg: dict[str, object]) -> tuple[ControlProblem, OptimizeOptions]:
    setup = build_setup(cfg, need_cost=True)
    problem = ControlProblem(
        u0=setup.u0,
        v0=setup.v0,
        targets=setup.targets,
        params=setup.params,
        weights=setup.weights,
        admissible=setup.admissible,
        region=setup.region,
        time_grid=setup.time_grid,
        scheme=setup.scheme,
        picard=setup.picard,
        cg_tol=setup.cg_tol,
        f0=setup.f0,
    )
    opts = OptimizeOptions(
        max_iters=max(int(cfg["optimizer.max_iters"]), 0),
        vi_tol=_positive(cfg, "optimizer.vi_tol", "stationarity tolerance"),
        armijo=ArmijoSettings(
            c1=_positive(cfg, "optimizer.armijo_c1", "sufficient-decrease constant"),
            shrink=float(cfg["optimizer.armijo_shrink"]),
            s0=_positive(cfg, "optimizer.armijo_s0", "initial step"),
            max_backtracks=max(int(cfg["optimizer.armijo_max_backtracks"]), 0),
        ),
    )
    return problem, opts


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _out_dir(args, cfg: dict[str, object]) -> Path:
    out = Path(args.output) if args.output is not None else Path(str(cfg["output.directory"]))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_forward(setup: RunSetup) -> StateTrajectory:
    return solve_forward(
        setup.u0, setup.v0, setup.f0, setup.params, setup.time_grid,
        setup.picard, setup.scheme, setup.cg_tol,
    )


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    setup = build_setup(cfg, need_cost=False)
    if args.snapshot_every is not None:
        snapshot_every = args.snapshot_every
        if snapshot_every < 0:
            raise _UsageError("--snapshot-every must be nonnegative")
    else:
        snapshot_every = int(cfg["output.snapshot_every"])
        if snapshot_every < 0:
            raise ConfigError("output.snapshot_every", "must be nonnegative")
    state = _run_forward(setup)
    report = verify.monitor_invariants(state, setup.params)

    out = _out_dir(args, cfg)
    (out / "invariants.csv").write_text(report.to_csv())
    written = 1
    if snapshot_every > 0:
        times = setup.time_grid.times()
        for n in range(setup.time_grid.nt + 1):
            if n % snapshot_every == 0 or n == setup.time_grid.nt:
                write_snapshot(out / f"u_{n:06d}.ksf", state.u[n].values, times[n])
                write_snapshot(out / f"v_{n:06d}.ksf", state.v[n].values, times[n])
                written += 2

    nt = setup.time_grid.nt
    print(
        f"simulate: {nt} steps to T={setup.time_grid.T!r} on "
        f"{setup.grid.nx}x{setup.grid.ny} ({setup.scheme} fluxes), "
        f"{int(state.picard_iters.sum())} fixed-point sweeps"
    )
    print(
        f"final: mass_u={float(report.mass_u[-1])!r} min_u={float(report.min_u[-1])!r} "
        f"min_v={float(report.min_v[-1])!r}"
    )
    print(
        f"invariants: nonneg={report.nonneg_ok} mass_bound={report.mass_bound_ok} "
        f"mass_identity={report.mass_identity_ok}"
    )
    print(f"wrote {written} file(s) to {out}")
    return 0


def _cmd_invariants(args) -> int:
    cfg = load_config(args.config, args.overrides)
    setup = build_setup(cfg, need_cost=False)
    state = _run_forward(setup)
    report = verify.monitor_invariants(state, setup.params)
    out = _out_dir(args, cfg)
    (out / "invariants.csv").write_text(report.to_csv())

    # Which failures falsify a guaranteed property, as opposed to one that
    # holds only under hypotheses this run does not satisfy?  The mass
    # identity is unconditional.  Nonnegativity is guaranteed for the upwind
    # flux with a nonnegative control.  The mass bound assumes the density
    # stayed nonnegative.
    control_nonneg = float(setup.f0.values.min()) >= 0.0
    hard: list[str] = []
    checks = [
        ("mass_identity", report.mass_identity_ok, True),
        ("nonnegativity", report.nonneg_ok,
         setup.scheme == "upwind" and control_nonneg),
        ("mass_bound", report.mass_bound_ok, report.nonneg_ok),
    ]
    for name, ok, guaranteed in checks:
        status = "PASS" if ok else ("FAIL" if guaranteed else "fail (not guaranteed here)")
        print(f"check {name}: {status}")
        if not ok and guaranteed:
            hard.append(name)
    print(f"wrote {out / 'invariants.csv'}")
    if hard:
        print(f"verification failed: {', '.join(hard)}", file=sys.stderr)
        return 3
    return 0


def _cmd_adjoint(args) -> int:
    cfg = load_config(args.config, args.overrides)
    setup = build_setup(cfg, need_cost=False)
    state_dir = Path(args.state_dir)
    nt = setup.time_grid.nt

    u: list[Field2D] = []
    v: list[Field2D] = []
    for n in range(nt + 1):
        fields = {}
        for prefix in ("u", "v"):
            path = state_dir / f"{prefix}_{n:06d}.ksf"
            if not path.exists():
                raise _UsageError(
                    f"missing state snapshot {path}; run "
                    "`ks-control simulate --snapshot-every 1` with the same "
                    "configuration first"
                )
            values, _time = read_snapshot(path)
            if values.shape != (setup.grid.nx, setup.grid.ny):
                raise SnapshotFormatError(
                    f"{path}: {values.shape[0]}x{values.shape[1]} field does not "
                    f"match the configured {setup.grid.nx}x{setup.grid.ny} grid"
                )
            fields[prefix] = Field2D(setup.grid, values)
        u.append(fields["u"])
        v.append(fields["v"])

    state = StateTrajectory(setup.time_grid, u, v)
    adj = solve_adjoint(state, setup.f0, setup.targets, setup.params,
                        setup.weights, setup.scheme, setup.cg_tol,
                        settings=setup.picard)

    out = _out_dir(args, cfg)
    times = setup.time_grid.times()
    for n in range(nt + 1):
        write_snapshot(out / f"lam_{n:06d}.ksf", adj.lam[n].values, times[n])
        write_snapshot(out / f"eta_{n:06d}.ksf", adj.eta[n].values, times[n])
    lam0 = mesh.norms(adj.lam[0]).l2
    eta0 = mesh.norms(adj.eta[0]).l2
    print(f"adjoint: swept {nt} steps backward; |lam(0)|_L2={lam0!r} |eta(0)|_L2={eta0!r}")
    print(f"wrote {2 * (nt + 1)} snapshot(s) to {out}")
    return 0


def _optimize_csv(report) -> str:
    lines = ["iter,j_total,j_u,j_v,j_f,vi_residual,step,backtracks"]
    for rec in report.iterates:
        lines.append(
            f"{rec.iteration},{rec.cost.j_total!r},{rec.cost.j_u!r},"
            f"{rec.cost.j_v!r},{rec.cost.j_f!r},{rec.vi_residual!r},"
            f"{rec.step_size!r},{rec.backtracks}"
        )
    return "\n".join(lines) + "\n"


def _cmd_optimize(args) -> int:
    cfg = load_config(args.config, args.overrides)
    problem, opts = build_problem(cfg)
    if args.starts < 1:
        raise _UsageError("--starts must be at least 1")

    rng = np.random.default_rng(args.seed)
    base = problem.initial_control()
    starts = [base]
    for _ in range(1, args.starts):
        if problem.admissible.bounded:
            values = rng.uniform(problem.admissible.f_min, problem.admissible.f_max,
                                 size=base.values.shape)
        else:
            values = base.values + args.start_scale * rng.standard_normal(base.values.shape)
        f_start = ControlField(problem.time_grid, problem.region, values)
        starts.append(project(f_start, problem.admissible))

    out = _out_dir(args, cfg)
    best = None
    best_index = -1
    for k, f_start in enumerate(starts):
        report = solve(dataclasses.replace(problem, f0=f_start), opts)
        (out / f"optimize_start{k:02d}.csv").write_text(_optimize_csv(report))
        cost = report.final_cost
        print(
            f"start {k}: J={cost.j_total!r} vi_residual={report.iterates[-1].vi_residual!r} "
            f"iters={report.iterates[-1].iteration} reason={report.reason}"
        )
        if best is None or cost.j_total < best.final_cost.j_total:
            best, best_index = report, k

    times = problem.time_grid.times()
    for n in range(problem.time_grid.nt):
        write_snapshot(out / f"f_best_{n:06d}.ksf",
                       best.final_control.field_at(n).values, times[n])
    print(
        f"best start {best_index}: J={best.final_cost.j_total!r} "
        f"converged={best.converged} reason={best.reason}"
    )
    print(f"wrote results to {out}")
    return 0


def _cmd_grad_check(args) -> int:
    cfg = load_config(args.config, args.overrides)
    problem, _opts = build_problem(cfg)
    if args.directions < 1:
        raise _UsageError("--directions must be at least 1")
    if args.eps <= 0:
        raise _UsageError("--eps must be positive")

    f = problem.initial_control()
    state, _cost = cost_of_control(problem, f)
    adj = solve_adjoint(state, f, problem.targets, problem.params,
                        problem.weights, problem.scheme, problem.cg_tol,
                        settings=problem.picard)
    d = reduced_gradient(f, state, adj, problem.weights.gamma_f,
                         problem.params.p_exponent)

    rng = np.random.default_rng(args.seed)
    directions = [
        ControlField(f.time_grid, f.region, rng.standard_normal(f.values.shape))
        for _ in range(args.directions)
    ]
    weight = problem.region.grid.cell_area * problem.time_grid.tau
    analytic = np.array(
        [float(np.sum(d.values * F.values)) * weight for F in directions]
    )
    fd = verify.fd_gradient(problem, f, directions, eps=args.eps)

    lines = ["direction,analytic,finite_difference,rel_error"]
    worst = 0.0
    for k in range(args.directions):
        denom = max(abs(fd[k]), 1e-14)
        rel = float(abs(analytic[k] - fd[k]) / denom)
        worst = max(worst, rel)
        lines.append(f"{k},{float(analytic[k])!r},{float(fd[k])!r},{rel!r}")
        print(
            f"direction {k}: analytic={analytic[k]:.10e} fd={fd[k]:.10e} "
            f"rel_error={rel:.3e}"
        )
    out = _out_dir(args, cfg)
    (out / "grad_check.csv").write_text("\n".join(lines) + "\n")
    print(f"worst relative error {worst:.3e} (tolerance {args.tol:.3e})")
    if worst > args.tol:
        print("verification failed: gradient mismatch", file=sys.stderr)
        return 3
    return 0


def _cmd_mms(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if args.levels < 2:
        raise _UsageError("--levels must be at least 2")
    table = verify.mms_convergence(levels=args.levels, study=args.study,
                                   scheme=args.scheme)
    out = _out_dir(args, cfg)
    path = out / f"mms_{args.study}.csv"
    path.write_text(table.to_csv())
    for k, row in enumerate(table.rows):
        print(
            f"level {k}: h={float(row.h)!r} tau={float(row.tau)!r} "
            f"error_u={row.error_u:.6e} error_v={row.error_v:.6e} "
            f"order_u={row.observed_order_u:.3f} order_v={row.observed_order_v:.3f}"
        )
    expected = 2.0 if args.study == "spatial" else 1.0
    order_u, order_v = table.final_orders()
    print(f"wrote {path}")
    print(f"final observed orders: u={order_u:.3f} v={order_v:.3f} (expected {expected})")
    if abs(order_u - expected) > args.order_tol or abs(order_v - expected) > args.order_tol:
        print("verification failed: convergence order out of band", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 for usage problems, not argparse's 2
        raise _UsageError(message)


def _add_common(parser: argparse.ArgumentParser, needs_config: bool = True) -> None:
    parser.add_argument("--config", required=needs_config, default=None,
                        help="configuration file (key = value lines)")
    parser.add_argument("--set", action="append", default=[], dest="overrides",
                        metavar="KEY=VALUE", help="override one configuration key")
    parser.add_argument("--output", default=None, metavar="DIR",
                        help="directory for output files (default: output.directory)")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for any randomized auxiliary data")
    parser.add_argument("--threads", type=int, default=None,
                        help="pin BLAS/OpenMP thread-pool sizes for reproducibility")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="ks-control",
        description="Chemotaxis-growth simulation and bilinear optimal control.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sim = sub.add_parser("simulate", help="run the forward solver")
    _add_common(sim)
    sim.add_argument("--snapshot-every", type=int, default=None, metavar="K",
                     help="write u/v snapshots every K levels (0 = none; "
                          "default: output.snapshot_every)")

    adj = sub.add_parser("adjoint", help="sweep the dual system along stored snapshots")
    _add_common(adj)
    adj.add_argument("--state-dir", required=True,
                     help="directory with u_NNNNNN.ksf / v_NNNNNN.ksf for every level")

    opt = sub.add_parser("optimize", help="projected-gradient descent on the control")
    _add_common(opt)
    opt.add_argument("--starts", type=int, default=1,
                     help="number of initial controls (first is control.initial)")
    opt.add_argument("--start-scale", type=float, default=1.0,
                     help="perturbation size for unconstrained extra starts")

    gc = sub.add_parser("grad-check",
                        help="compare the assembled gradient with finite differences")
    _add_common(gc)
    gc.add_argument("--directions", type=int, default=5)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=2e-2,
                    help="largest acceptable relative error")

    inv = sub.add_parser("invariants", help="run the solver and check its invariants")
    _add_common(inv)

    mms = sub.add_parser("mms", help="manufactured-solution convergence study")
    _add_common(mms, needs_config=False)
    mms.add_argument("--study", choices=("spatial", "temporal"), default="spatial")
    mms.add_argument("--levels", type=int, default=3)
    mms.add_argument("--scheme", choices=("central", "upwind"), default="central")
    mms.add_argument("--order-tol", type=float, default=0.2)

    return parser


_COMMANDS = {
    "simulate": _cmd_simulate,
    "adjoint": _cmd_adjoint,
    "optimize": _cmd_optimize,
    "grad-check": _cmd_grad_check,
    "invariants": _cmd_invariants,
    "mms": _cmd_mms,
}


def _apply_thread_env(threads: Optional[int]) -> None:
    # Best effort: affects pools created after this point in the process.
    # The solver kernels are plain elementwise numpy, so this is about
    # run-to-run reproducibility, not speed.
    if threads is None:
        return
    if threads < 1:
        raise _UsageError("--threads must be at least 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = str(threads)


def run(argv: Optional[list[str]] = None) -> int:
    """Parse arguments, dispatch, and map failures to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except SystemExit as err:  # argparse --help
        return int(err.code or 0)

    try:
        _apply_thread_env(args.threads)
        return _COMMANDS[args.command](args)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ConfigError, SnapshotFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (LinearSolverError, PicardDivergenceError, StepConditioningError) as err:
        print(f"solver error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
