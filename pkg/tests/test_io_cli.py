"""Configuration parsing, snapshot files, and the command-line surface."""

import os

import numpy as np
import pytest

from kscontrol.errors import ConfigError, SnapshotFormatError
from kscontrol.io_cli import (
    DEFAULTS,
    build_setup,
    evaluate_expression,
    load_config,
    parse_config_text,
    read_snapshot,
    run,
    write_snapshot,
)
from kscontrol.mesh import GridSpec


BASE_CFG = """
# small, fast problem shared by the command tests
grid.nx = 10
grid.ny = 10
time.T = 0.2
time.nt = 5
model.kappa = 0.6
model.r = 0.5
model.mu = 1.2
cost.gamma_u = 1.0
cost.gamma_v = 0.7
cost.gamma_f = 0.5
control.region.x0 = 0.25
control.region.y0 = 0.25
control.region.x1 = 0.75
control.region.y1 = 0.75
control.initial = constant:0.5
init.u0 = cosine:0.5,0.2,1,0
init.v0 = cosine:0.5,0.15,0,1
targets.u_d = constant:0.4
targets.v_d = constant:0.6
forward.picard_tol = 1e-11
forward.cg_tol = 1e-11
"""


@pytest.fixture
def base_cfg(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(BASE_CFG)
    return str(path)


# ----------------------------------------------------------------------
# config text


def test_parse_config_text_strips_comments_and_blank_lines():
    raw = parse_config_text("# header\n\n  time.T = 2.0  # trailing\ntime.nt=7\n")
    assert raw == {"time.T": "2.0", "time.nt": "7"}


def test_parse_config_text_last_entry_wins():
    raw = parse_config_text("model.r = 1.0\nmodel.r = 3.0\n")
    assert raw["model.r"] == "3.0"


def test_parse_config_text_reports_line_numbers():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("model.r = 1.0\nnot a pair\n")


def test_load_config_defaults_when_empty():
    cfg = load_config(None, [])
    assert cfg == DEFAULTS
    assert cfg["model.p_exponent"] == 2.1
    assert cfg["forward.scheme"] == "central"
    assert cfg["optimizer.vi_tol"] == 1e-6
    assert cfg["control.kind"] == "unconstrained"


def test_load_config_rejects_unknown_key():
    with pytest.raises(ConfigError) as exc:
        load_config(None, ["grid.nz=4"])
    assert exc.value.key == "grid.nz"


def test_load_config_type_errors():
    with pytest.raises(ConfigError, match="integer"):
        load_config(None, ["grid.nx=3.5"])
    with pytest.raises(ConfigError, match="number"):
        load_config(None, ["model.kappa=strong"])


def test_load_config_overrides_beat_file(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("model.r = 1.0\n")
    cfg = load_config(str(path), ["model.r=2.5"])
    assert cfg["model.r"] == 2.5


def test_load_config_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/path.cfg", [])


# ----------------------------------------------------------------------
# setup validation


def _setup_cfg(**overrides):
    cfg = load_config(None, [])
    cfg.update(overrides)
    return cfg


def test_build_setup_validates_model_constants():
    with pytest.raises(ConfigError) as exc:
        build_setup(_setup_cfg(**{"model.mu": -1.0}), need_cost=False)
    assert exc.value.key == "model.mu"
    with pytest.raises(ConfigError) as exc:
        build_setup(_setup_cfg(**{"model.p_exponent": 3.5}), need_cost=False)
    assert exc.value.key == "model.p_exponent"


def test_build_setup_validates_grid_and_time():
    with pytest.raises(ConfigError) as exc:
        build_setup(_setup_cfg(**{"grid.nx": 1}), need_cost=False)
    assert exc.value.key == "grid.nx"
    with pytest.raises(ConfigError) as exc:
        build_setup(_setup_cfg(**{"time.nt": 0}), need_cost=False)
    assert exc.value.key == "time.nt"
    with pytest.raises(ConfigError) as exc:
        build_setup(_setup_cfg(**{"domain.Lx": 0.0}), need_cost=False)
    assert exc.value.key == "domain.Lx"


def test_build_setup_validates_region():
    with pytest.raises(ConfigError, match="x1 > x0"):
        build_setup(_setup_cfg(**{"control.region.x1": 0.0}), need_cost=False)
    # a well-ordered box lying outside the domain selects no cells
    with pytest.raises(ConfigError, match="no grid cells"):
        build_setup(_setup_cfg(**{"control.region.x0": 2.0,
                                  "control.region.x1": 3.0}), need_cost=False)


def test_build_setup_validates_scheme_and_kind():
    with pytest.raises(ConfigError) as exc:
        build_setup(_setup_cfg(**{"forward.scheme": "quick"}), need_cost=False)
    assert exc.value.key == "forward.scheme"
    with pytest.raises(ConfigError) as exc:
        build_setup(_setup_cfg(**{"control.kind": "ball"}), need_cost=False)
    assert exc.value.key == "control.kind"
    with pytest.raises(ConfigError, match="f_min <= f_max"):
        build_setup(_setup_cfg(**{"control.kind": "box", "control.f_min": 2.0,
                                  "control.f_max": 1.0}), need_cost=False)


def test_build_setup_rejects_negative_initial_data():
    with pytest.raises(ConfigError) as exc:
        build_setup(_setup_cfg(**{"init.u0": "constant:-0.2"}), need_cost=False)
    assert exc.value.key == "init.u0"
    assert "-0.2" in str(exc.value)


def test_build_setup_well_posedness_depends_on_need_cost():
    cfg = _setup_cfg(**{"cost.gamma_f": 0.0})
    build_setup(cfg, need_cost=False)  # simulation does not touch the cost
    with pytest.raises(ConfigError, match="box"):
        build_setup(cfg, need_cost=True)
    # a box makes the zero-weight cost well posed again
    cfg_box = _setup_cfg(**{"cost.gamma_f": 0.0, "control.kind": "box",
                            "control.f_min": -1.0, "control.f_max": 1.0})
    build_setup(cfg_box, need_cost=True)


def test_build_setup_projects_initial_control_into_the_box():
    cfg = _setup_cfg(**{"control.kind": "box", "control.f_min": -0.1,
                        "control.f_max": 0.1, "control.initial": "constant:5.0"})
    setup = build_setup(cfg, need_cost=False)
    np.testing.assert_array_equal(setup.f0.values, 0.1)


# ----------------------------------------------------------------------
# field expressions


GRID = GridSpec(1.0, 1.0, 8, 8)


def test_expression_zero_and_constant():
    z = evaluate_expression("init.u0", "zero", GRID)
    np.testing.assert_array_equal(z.values, 0.0)
    c = evaluate_expression("init.u0", "constant:0.75", GRID)
    np.testing.assert_array_equal(c.values, 0.75)
    with pytest.raises(ConfigError, match="no parameters"):
        evaluate_expression("init.u0", "zero:1", GRID)


def test_expression_cosine_matches_hand_evaluation():
    f = evaluate_expression("init.v0", "cosine:0.5,0.2,1,2", GRID)
    X, Y = GRID.cell_centers()
    np.testing.assert_allclose(
        f.values, 0.5 + 0.2 * np.cos(np.pi * X) * np.cos(2 * np.pi * Y), rtol=1e-14
    )


def test_expression_gaussian_peaks_at_the_center():
    f = evaluate_expression("init.u0", "gaussian:0.1,1.0,0.5,0.5,0.2", GRID)
    assert f.values.max() <= 1.1
    peak = np.unravel_index(np.argmax(f.values), f.values.shape)
    assert peak in ((3, 3), (3, 4), (4, 3), (4, 4))
    with pytest.raises(ConfigError, match="width"):
        evaluate_expression("init.u0", "gaussian:0.1,1.0,0.5,0.5,0.0", GRID)


def test_expression_path_round_trips_a_snapshot(tmp_path):
    rng = np.random.default_rng(81)
    values = rng.uniform(0.0, 1.0, size=(8, 8))
    snap = tmp_path / "field.ksf"
    write_snapshot(snap, values, 0.0)
    f = evaluate_expression("init.u0", f"path:{snap}", GRID)
    np.testing.assert_array_equal(f.values, values)


def test_expression_path_rejects_wrong_grid(tmp_path):
    snap = tmp_path / "small.ksf"
    write_snapshot(snap, np.zeros((4, 4)), 0.0)
    with pytest.raises(ConfigError, match="4x4"):
        evaluate_expression("init.u0", f"path:{snap}", GRID)


def test_expression_validation():
    with pytest.raises(ConfigError, match="unknown field expression"):
        evaluate_expression("init.u0", "sinusoid:1", GRID)
    with pytest.raises(ConfigError, match="needs 4 parameters"):
        evaluate_expression("init.u0", "cosine:1,2", GRID)
    with pytest.raises(ConfigError, match="expected a number"):
        evaluate_expression("init.u0", "constant:tall", GRID)


# ----------------------------------------------------------------------
# snapshot format


def test_snapshot_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(82)
    values = rng.standard_normal((16, 12))
    path = tmp_path / "a.ksf"
    write_snapshot(path, values, 0.375)
    back, time = read_snapshot(path)
    np.testing.assert_array_equal(back, values)
    assert time == 0.375
    back[0, 0] = 99.0  # the returned array must be writable


def test_snapshot_rejects_non_2d():
    with pytest.raises(ValueError, match="2-D"):
        write_snapshot("/tmp/never-written.ksf", np.zeros(5), 0.0)


def test_snapshot_bad_magic(tmp_path):
    path = tmp_path / "bad.ksf"
    write_snapshot(path, np.zeros((3, 3)), 0.0)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(SnapshotFormatError, match="bad magic"):
        read_snapshot(path)


def test_snapshot_unsupported_version(tmp_path):
    path = tmp_path / "vers.ksf"
    write_snapshot(path, np.zeros((3, 3)), 0.0)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(SnapshotFormatError, match="version 9"):
        read_snapshot(path)


def test_snapshot_truncation_reports_byte_counts(tmp_path):
    path = tmp_path / "trunc.ksf"
    write_snapshot(path, np.ones((4, 4)), 0.0)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(SnapshotFormatError) as exc:
        read_snapshot(path)
    msg = str(exc.value)
    assert str(len(data)) in msg and str(len(data) - 8) in msg
    path.write_bytes(data[:10])
    with pytest.raises(SnapshotFormatError, match="truncated header"):
        read_snapshot(path)


def test_snapshot_missing_file():
    with pytest.raises(SnapshotFormatError, match="cannot read"):
        read_snapshot("/nonexistent/field.ksf")


# ----------------------------------------------------------------------
# commands: exit codes and artifacts


def test_cli_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "simulate" in capsys.readouterr().out


def test_cli_unknown_subcommand_exits_one(capsys):
    assert run(["frobnicate"]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_unknown_config_key_exits_one(base_cfg, capsys):
    assert run(["simulate", "--config", base_cfg, "--set", "grid.nz=4"]) == 1
    assert "grid.nz" in capsys.readouterr().err


def test_cli_simulate_writes_invariants_and_snapshots(base_cfg, tmp_path, capsys):
    out = tmp_path / "out"
    rc = run(["simulate", "--config", base_cfg, "--output", str(out),
              "--snapshot-every", "2"])
    assert rc == 0
    text = capsys.readouterr().out
    assert "invariants: nonneg=True" in text
    assert (out / "invariants.csv").exists()
    # levels 0, 2, 4 plus the forced final level 5
    for n in (0, 2, 4, 5):
        assert (out / f"u_{n:06d}.ksf").exists()
        assert (out / f"v_{n:06d}.ksf").exists()
    assert not (out / "u_000001.ksf").exists()
    header = (out / "invariants.csv").read_text().splitlines()[0]
    assert header.startswith("level,time,min_u")


def test_cli_simulate_rejects_negative_snapshot_cadence(base_cfg, capsys):
    assert run(["simulate", "--config", base_cfg, "--snapshot-every", "-1"]) == 1
    capsys.readouterr()
    assert run(["simulate", "--config", base_cfg,
                "--set", "output.snapshot_every=-2"]) == 1


def test_cli_solver_failure_exits_two(base_cfg, capsys):
    rc = run(["simulate", "--config", base_cfg,
              "--set", "forward.picard_tol=1e-15",
              "--set", "forward.picard_max_iters=1"])
    assert rc == 2
    assert "solver error" in capsys.readouterr().err


def test_cli_adjoint_requires_snapshots(base_cfg, tmp_path, capsys):
    rc = run(["adjoint", "--config", base_cfg, "--state-dir", str(tmp_path)])
    assert rc == 1
    assert "snapshot" in capsys.readouterr().err


def test_cli_adjoint_round_trip(base_cfg, tmp_path):
    state_dir = tmp_path / "state"
    rc = run(["simulate", "--config", base_cfg, "--output", str(state_dir),
              "--snapshot-every", "1"])
    assert rc == 0
    out = tmp_path / "dual"
    rc = run(["adjoint", "--config", base_cfg, "--state-dir", str(state_dir),
              "--output", str(out)])
    assert rc == 0
    for n in range(6):
        assert (out / f"lam_{n:06d}.ksf").exists()
        assert (out / f"eta_{n:06d}.ksf").exists()
    # terminal multipliers close the recursion at exactly zero
    lam5, _ = read_snapshot(out / "lam_000005.ksf")
    np.testing.assert_array_equal(lam5, 0.0)


def test_cli_optimize_writes_history_and_control(base_cfg, tmp_path):
    out = tmp_path / "opt"
    rc = run(["optimize", "--config", base_cfg, "--output", str(out),
              "--set", "optimizer.max_iters=3"])
    assert rc == 0
    csv = (out / "optimize_start00.csv").read_text()
    lines = csv.strip().splitlines()
    assert lines[0] == "iter,j_total,j_u,j_v,j_f,vi_residual,step,backtracks"
    assert len(lines) >= 2
    assert "np.float64" not in csv
    for n in range(5):
        assert (out / f"f_best_{n:06d}.ksf").exists()
    costs = [float(line.split(",")[1]) for line in lines[1:]]
    assert costs == sorted(costs, reverse=True)


def test_cli_optimize_repeat_runs_are_bitwise(base_cfg, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        rc = run(["optimize", "--config", base_cfg, "--output", str(out),
                  "--seed", "7", "--threads", "1",
                  "--set", "optimizer.max_iters=2"])
        assert rc == 0
    assert (out_a / "optimize_start00.csv").read_bytes() == \
           (out_b / "optimize_start00.csv").read_bytes()
    for n in range(5):
        name = f"f_best_{n:06d}.ksf"
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


def test_cli_grad_check_passes_on_smooth_fixture(base_cfg, tmp_path, capsys):
    out = tmp_path / "gc"
    rc = run(["grad-check", "--config", base_cfg, "--output", str(out),
              "--directions", "3", "--seed", "0"])
    assert rc == 0
    text = capsys.readouterr().out
    assert "worst relative error" in text
    csv = (out / "grad_check.csv").read_text()
    assert csv.splitlines()[0] == "direction,analytic,finite_difference,rel_error"
    assert len(csv.strip().splitlines()) == 4


def test_cli_grad_check_fails_on_absurd_tolerance(base_cfg, tmp_path, capsys):
    rc = run(["grad-check", "--config", base_cfg, "--output", str(tmp_path / "gc"),
              "--directions", "1", "--tol", "1e-12"])
    assert rc == 3
    assert "verification failed" in capsys.readouterr().err


def test_cli_invariants_soft_failure_is_reported_but_not_fatal(tmp_path, capsys):
    """The central-flux undershoot is outside the guaranteed regime, so the
    invariants command must flag it in the output yet still exit 0."""
    grid = GridSpec(1.0, 1.0, 16, 16)
    X, _ = grid.cell_centers()
    write_snapshot(tmp_path / "front_u0.ksf",
                   0.5 * (1.0 + np.tanh((0.45 - X) / 0.02)), 0.0)
    write_snapshot(tmp_path / "ramp_v0.ksf", X.copy(), 0.0)
    cfg = tmp_path / "front.cfg"
    cfg.write_text(
        "grid.nx = 16\ngrid.ny = 16\ntime.T = 0.04\ntime.nt = 40\n"
        "model.kappa = 64.0\nmodel.r = 0.1\nmodel.mu = 0.01\n"
        "forward.scheme = central\n"
        f"init.u0 = path:{tmp_path / 'front_u0.ksf'}\n"
        f"init.v0 = path:{tmp_path / 'ramp_v0.ksf'}\n"
        "control.initial = zero\n"
        "forward.picard_tol = 1e-10\nforward.picard_max_iters = 400\n"
        "forward.cg_tol = 1e-12\n"
    )
    rc = run(["invariants", "--config", str(cfg), "--output", str(tmp_path / "inv")])
    captured = capsys.readouterr()
    assert rc == 0
    assert "check mass_identity: PASS" in captured.out
    assert "check nonnegativity: fail (not guaranteed here)" in captured.out


def test_cli_invariants_upwind_logistic_passes(tmp_path, capsys):
    cfg = tmp_path / "log.cfg"
    cfg.write_text(
        "grid.nx = 8\ngrid.ny = 8\ntime.T = 1.0\ntime.nt = 50\n"
        "model.kappa = 1.0\nmodel.r = 1.0\nmodel.mu = 2.0\n"
        "forward.scheme = upwind\n"
        "init.u0 = constant:0.1\ninit.v0 = constant:0.1\n"
        "control.initial = zero\n"
    )
    rc = run(["invariants", "--config", str(cfg), "--output", str(tmp_path / "inv")])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3


def test_cli_mms_passes_and_fails_by_tolerance(tmp_path, capsys):
    out = tmp_path / "mms"
    rc = run(["mms", "--study", "spatial", "--levels", "2",
              "--order-tol", "0.35", "--output", str(out)])
    assert rc == 0
    assert (out / "mms_spatial.csv").exists()
    capsys.readouterr()
    rc = run(["mms", "--study", "spatial", "--levels", "2",
              "--order-tol", "0.01", "--output", str(out)])
    assert rc == 3
    assert "out of band" in capsys.readouterr().err


def test_cli_threads_flag_pins_pool_sizes(base_cfg, tmp_path):
    saved = {var: os.environ.get(var) for var in
             ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")}
    try:
        rc = run(["simulate", "--config", base_cfg,
                  "--output", str(tmp_path / "o"), "--threads", "2"])
        assert rc == 0
        assert os.environ["OMP_NUM_THREADS"] == "2"
        assert run(["simulate", "--config", base_cfg, "--threads", "0",
                    "--output", str(tmp_path / "o")]) == 1
    finally:
        for var, value in saved.items():
            if value is None:
                os.environ.pop(var, None)
            else:
                os.environ[var] = value
