"""End-to-end driver tests.

Oracles: a vanishing gain must return the base map bitwise and an embed rerun
must reproduce its artifacts byte for byte; the two-primitive run is checked
against the sum of its declared gains; the family gate against hand-computed
window halvings (the gate grows linearly in t, so each halving divides it by
two); everything else against values frozen from instrumented runs."""

import json
import os
import tempfile
from functools import lru_cache

import numpy as np
import pytest

from isoembed.cli import cli_main
from isoembed.freemaps import pullback_metric, standard_free_map
from isoembed.grids import SymTensorField, csv_to_field, make_ball_grid
from isoembed.oscillate import padded_standard_map
from isoembed.pipeline import (
    ConfigError,
    RunConfig,
    run_decompose,
    run_embed,
    run_family,
    run_oscillate,
    run_perturb,
    run_poisson_check,
    run_verify,
    verify_pullback,
)


def _cfg(**over):
    data = {"n": 1, "N": 65, "q": 7, "out_dir": tempfile.mkdtemp()}
    data.update(over)
    return RunConfig.from_dict(data)


def _flag_dict(N, out_dir):
    return {
        "n": 1, "N": N, "q": 7, "epsilon": 0.1, "k": 3,
        "metric": {"name": "flat_plus_bump",
                   "params": {"amplitude": 0.7 ** 4, "center": [0.0], "radius": 0.4}},
        "delta": 0.5, "out_dir": out_dir,
    }


@lru_cache(maxsize=1)
def embed_run():
    return run_embed(RunConfig.from_dict(_flag_dict(65, tempfile.mkdtemp())))


@lru_cache(maxsize=1)
def trivial_run():
    return run_embed(_cfg(metric={"name": "flat_plus_bump", "params": {"amplitude": 0.0}}))


@lru_cache(maxsize=1)
def two_primitive_run():
    cfg = _cfg(epsilon=0.1, k=3, metric={"name": "primitive_direct", "params": {
        "primitives": [
            {"scale": 0.08, "center": [-0.4], "radius": 0.3},
            {"scale": 0.05, "center": [0.4], "radius": 0.3},
        ]}})
    return run_embed(cfg)


@lru_cache(maxsize=1)
def family_run():
    cfg = _cfg(N=129, metric={"name": "conformal_ramp", "params": {
        "amplitude": 2e-5, "center": [0.0], "radius": 0.5, "slices": 5, "t_end": 1.0}})
    return run_family(cfg)


@lru_cache(maxsize=1)
def halving_run():
    cfg = _cfg(N=129, metric={"name": "conformal_ramp", "params": {
        "amplitude": 2e-4, "radius": 0.5, "slices": 17}})
    return run_family(cfg)


@lru_cache(maxsize=1)
def decompose_run():
    cfg = _cfg(n=2, N=33, q=10, metric={"name": "anisotropic", "params": {
        "coefficients": [0.3, 0.6], "radius": 0.5}})
    return run_decompose(cfg)


@lru_cache(maxsize=1)
def perturb_run():
    cfg = _cfg(N=129, metric={"name": "flat_plus_bump",
                              "params": {"amplitude": 1e-4, "radius": 0.4}})
    return run_perturb(cfg)


@lru_cache(maxsize=1)
def poisson_run():
    return run_poisson_check(_cfg(n=2, N=33))


def _write_cfg(data):
    path = os.path.join(tempfile.mkdtemp(), "run.json")
    with open(path, "w") as fh:
        json.dump(data, fh)
    return path


# ---------------------------------------------------------------------------
# configuration


def test_config_fills_the_documented_defaults():
    cfg = RunConfig.from_dict({"n": 1, "N": 65})
    assert cfg.q == 7
    assert cfg.alpha == 0.5 and cfg.epsilon == 0.1
    assert cfg.k is None and cfg.k0_override is None
    assert cfg.theta == 1e-2 and cfg.tol == 1e-9 and cfg.max_iter == 40
    assert cfg.delta == 0.5 and cfg.out_dir == "."
    assert RunConfig.from_dict(cfg.as_dict()).q == 7


def test_config_rejects_bad_shapes():
    with pytest.raises(ConfigError, match="missing config key: n"):
        RunConfig.from_dict({"N": 65})
    with pytest.raises(ConfigError, match="missing config key: N"):
        RunConfig.from_dict({"n": 1})
    with pytest.raises(ConfigError, match="unknown config key: bogus"):
        RunConfig.from_dict({"n": 1, "N": 65, "bogus": 3})
    with pytest.raises(ConfigError, match="odd integer"):
        RunConfig.from_dict({"n": 1, "N": 64})
    with pytest.raises(ConfigError, match="k must be"):
        RunConfig.from_dict({"n": 1, "N": 65, "k": 1})
    with pytest.raises(ConfigError, match="missing config key: metric.name"):
        RunConfig.from_dict({"n": 1, "N": 65, "metric": {"params": {}}})
    with pytest.raises(ConfigError, match="alpha"):
        RunConfig.from_dict({"n": 1, "N": 65, "alpha": 1.5})


def test_config_loads_from_json_files():
    path = _write_cfg({"n": 2, "N": 33, "theta": 0.05})
    cfg = RunConfig.from_json(path)
    assert cfg.n == 2 and cfg.N == 33 and cfg.theta == 0.05 and cfg.q == 10
    with pytest.raises(ConfigError, match="cannot read configuration"):
        RunConfig.from_json(os.path.join(tempfile.mkdtemp(), "absent.json"))


def test_commands_that_need_a_metric_say_so():
    with pytest.raises(ConfigError, match="missing config key: metric"):
        run_embed(_cfg())
    with pytest.raises(ConfigError, match="missing config key: metric.params.amplitude"):
        run_embed(_cfg(metric={"name": "flat_plus_bump"}))
    with pytest.raises(ConfigError, match="conformal_ramp"):
        run_family(_cfg(metric={"name": "flat_plus_bump", "params": {"amplitude": 0.1}}))
    with pytest.raises(ConfigError, match="unknown metric name"):
        run_decompose(_cfg(metric={"name": "nope", "params": {}}))


def test_unsupported_step_counts_are_config_errors():
    cfg = _cfg(k0_override=1,
               metric={"name": "flat_plus_bump", "params": {"amplitude": 0.1}})
    with pytest.raises(ConfigError, match="outside the supported substitution orders"):
        run_embed(cfg)


# ---------------------------------------------------------------------------
# pullback verification


def test_verify_pullback_is_exact_on_polynomial_maps():
    # centered stencils differentiate degree-2 data exactly, so the standard
    # map's pullback 1 + 4x^2 is reproduced without any truncation error
    grid = make_ball_grid(1, 65)
    record = standard_free_map(grid)
    target = SymTensorField(grid, 1.0 + 4.0 * grid.coords ** 2)
    resid, norms = verify_pullback(record, target)
    assert norms["max"] == 0.0 and norms["l2"] == 0.0 and norms["holder"] == 0.0
    flat = SymTensorField(grid, np.ones((grid.P, 1)))
    _, wrong = verify_pullback(record, flat)
    assert wrong["max"] > 3.0


def test_verify_pullback_rejects_grid_mismatch():
    record = standard_free_map(make_ball_grid(1, 65))
    other = make_ball_grid(1, 33)
    with pytest.raises(ValueError, match="different grid"):
        verify_pullback(record, SymTensorField(other, np.ones((other.P, 1))))


# ---------------------------------------------------------------------------
# embed


def test_vanishing_gain_returns_the_base_map_bitwise():
    rep = trivial_run()
    grid = make_ball_grid(1, 65)
    base = padded_standard_map(grid, extra=5)
    assert np.array_equal(rep.record.values, base.values)
    f = rep.final
    assert f["pullback_residual_max"] == 0.0
    assert f["displacement_max"] == 0.0
    assert f["support_nodes"] == 0
    assert abs(f["freeness_min"] - 4.0) < 1e-9
    assert abs(f["injectivity_min"] - 0.25) < 1e-12


def test_embed_stays_inside_its_certificates():
    f = embed_run().final
    assert 1e-4 < f["pullback_residual_max"] < 3e-3
    assert f["pullback_residual_max"] <= f["residual_budget_total"]
    assert f["displacement_max"] < 0.01 <= f["displacement_budget"]
    assert f["freeness_min"] > 3.5
    assert f["injectivity_min"] > 0.24 and f["immersion_min"] > 0.99
    assert 20 <= f["support_nodes"] <= 80
    assert f["k"] == 3


def test_embed_stage_log_tells_the_whole_story():
    rep = embed_run()
    kinds = [s["stage"] for s in rep.stages]
    assert kinds == ["decompose", "oscillate", "perturb"]
    osc = rep.stages[1]
    assert osc["order"] == 4 and osc["t_samples"] == 2048
    assert osc["defect_max"] < 2e-4
    assert any(e["kind"] == "StepKReport" for e in osc["steps"])
    fp = rep.stages[2]["fixed_point"]
    assert fp["converged"] and fp["residual_max"] <= fp["residual_budget"]
    # gate bound is pessimistic on oscillatory data; the warning is recorded
    assert any("contraction gate" in w for w in rep.stages[2]["warnings"])


def test_embed_artifacts_round_trip():
    rep = embed_run()
    out = rep.config["out_dir"]
    with open(os.path.join(out, "embed_report.json")) as fh:
        on_disk = json.load(fh)
    assert on_disk == rep.as_dict()
    assert sorted(on_disk) == ["command", "config", "final", "stages", "timing"]
    grid = make_ball_grid(1, 65)
    values = csv_to_field(grid, os.path.join(out, "final_map.csv"))
    assert values.shape == (grid.P, 7)
    mask = grid.nonext_mask
    assert np.array_equal(values[mask], rep.record.values[mask])
    assert np.all(values[~mask] == 0.0)
    resid = csv_to_field(grid, os.path.join(out, "pullback_residual.csv"))
    assert resid.shape == (grid.P,)


def test_embed_reruns_are_byte_identical():
    first = embed_run()
    out2 = tempfile.mkdtemp()
    second = run_embed(RunConfig.from_dict(_flag_dict(65, out2)))

    def strip(rep):
        d = rep.as_dict()
        d.pop("timing")
        d["config"].pop("out_dir")
        return d

    assert strip(first) == strip(second)
    out1 = first.config["out_dir"]
    for name in ("final_map.csv", "pullback_residual.csv"):
        with open(os.path.join(out1, name), "rb") as a, \
             open(os.path.join(out2, name), "rb") as b:
            assert a.read() == b.read()


def test_two_primitives_add_their_gains():
    rep = two_primitive_run()
    f = rep.final
    assert f["pullback_residual_max"] <= f["residual_budget_total"]
    assert f["pullback_residual_max"] < 2e-3
    assert f["freeness_min"] > 2.5 and f["injectivity_min"] > 0.24
    perturbs = [s for s in rep.stages if s["stage"] == "perturb"]
    assert len(perturbs) == 2
    assert all(s["fixed_point"]["converged"] for s in perturbs)
    # the second stage must not undo the first: the partial defect after each
    # primitive stays at the assembly-noise level
    assert all(s["pullback_partial_max"] < 2e-3 for s in perturbs)
    # coarse-grid collars stretch the plateaus to |x| ~ 0.97; the sphere
    # nodes themselves must stay untouched
    grid = make_ball_grid(1, 65)
    base = padded_standard_map(grid, extra=5)
    outside = np.abs(grid.coords[:, 0]) > 0.99
    assert np.array_equal(rep.record.values[outside], base.values[outside])


def test_oversized_oscillation_data_fails_loudly():
    # radius 0.25 amplifies the order-4 coefficients until the quadratic
    # iteration cannot contract; the driver must raise, not deliver junk
    cfg = _cfg(N=129, epsilon=0.1, k=3, metric={"name": "primitive_direct", "params": {
        "primitives": [{"scale": 0.3, "center": [-0.45], "radius": 0.25}]}})
    with pytest.raises(FloatingPointError, match="diverges"):
        run_embed(cfg)
    with open(os.path.join(cfg.out_dir, "embed_report.json")) as fh:
        partial = json.load(fh)
    assert "error" in partial["final"]
    assert [s["stage"] for s in partial["stages"]][:2] == ["decompose", "oscillate"]


def test_order_selection_probes_the_decay_slope():
    cfg = _cfg(metric={"name": "flat_plus_bump",
                       "params": {"amplitude": 0.7 ** 4, "radius": 0.4}})
    rep = run_embed(cfg)
    sel = [s for s in rep.stages if s["stage"] == "order_selection"]
    assert len(sel) == 1
    assert sel[0]["k0"] >= 0 and sel[0]["k_suggested"] == rep.final["k"] == 3
    assert len(sel[0]["norm_bounds"]) == 2


# ---------------------------------------------------------------------------
# family


def test_family_holds_the_full_window():
    f = family_run().final
    assert f["halvings"] == 0 and f["window_end"] == 1.0 and f["slices"] == 5
    assert f["max_gate"] < 1e-2
    assert f["max_stability_ratio"] < 1.1
    assert f["max_warm_cold_gap"] <= 1e-8
    for resid, budget in zip(f["per_slice_residual_max"], f["per_slice_budget"]):
        assert resid <= budget
    assert f["freeness_min"] > 3.9


def test_family_halves_until_the_gate_clears():
    rep = halving_run()
    f = rep.final
    # gate ~ 4.8e-2 at the full window, halving twice per step: three cuts
    assert f["halvings"] == 3 and f["window_end"] == 0.125 and f["slices"] == 3
    assert f["max_gate"] < 1e-2
    cuts = rep.stages[0]["halvings"]
    assert [c["window_end"] for c in cuts] == [1.0, 0.5, 0.25]
    assert all("contraction gate" in c["reason"] for c in cuts)


def test_family_window_collapse_is_a_stage_error():
    cfg = _cfg(metric={"name": "conformal_ramp", "params": {
        "amplitude": 2e-2, "slices": 3, "radius": 0.5}})
    with pytest.raises(ValueError, match="collapsed below two slices"):
        run_family(cfg)
    with open(os.path.join(cfg.out_dir, "family_report.json")) as fh:
        assert "error" in json.load(fh)["final"]


# ---------------------------------------------------------------------------
# decompose


def test_cone_route_decomposes_the_anisotropic_target():
    rep = decompose_run()
    f = rep.final
    assert f["route"] == "cone" and f["primitives"] == 6
    assert f["rho"] == 0.5
    assert f["coefficient_min"] > 0.05
    assert f["reconstruction_max"] < 1e-12
    assert 0.05 < f["eps0"] < 0.2
    out = rep.config["out_dir"]
    with open(os.path.join(out, "primitives.json")) as fh:
        entries = json.load(fh)["primitives"]
    assert len(entries) == 6
    assert all(os.path.exists(os.path.join(out, e["coefficient_field"])) for e in entries)


def test_direct_route_serializes_declared_primitives():
    cfg = _cfg(metric={"name": "flat_plus_bump",
                       "params": {"amplitude": 0.2, "radius": 0.4}})
    rep = run_decompose(cfg)
    assert rep.final["route"] == "direct" and rep.final["primitives"] == 1
    assert rep.final["reconstruction_max"] == 0.0
    assert os.path.exists(os.path.join(cfg.out_dir, "primitives.json"))


# ---------------------------------------------------------------------------
# oscillate / perturb drivers


def test_oscillate_driver_reports_fourth_order_decay():
    cfg = _cfg(N=129, epsilon=0.1, k=3, metric={
        "name": "flat_plus_bump", "params": {"amplitude": 0.7 ** 4, "radius": 0.4}})
    rep = run_oscillate(cfg)
    f = rep.final
    assert f["order"] == 4
    assert 11.0 < f["defect_ratio"] < 21.0
    assert f["expected_ratio"] == 16.0
    assert f["freeness_min"] > 3.5 and f["immersion_min"] > 0.99
    assert os.path.exists(os.path.join(cfg.out_dir, "oscillate_map.csv"))


def test_oscillate_driver_respects_the_phase_resolution_gate():
    # eps/2 = 0.05 needs h <= 8 * 0.05^2 = 0.02; N = 65 sits at h = 1/32
    cfg = _cfg(epsilon=0.1, k=3, metric={
        "name": "flat_plus_bump", "params": {"amplitude": 0.7 ** 4, "radius": 0.4}})
    with pytest.raises(ValueError, match="too coarse"):
        run_oscillate(cfg)


def test_perturb_driver_agrees_with_its_own_verify():
    f = perturb_run().final
    assert f["residual_max"] <= f["residual_budget"]
    assert abs(f["residual_max"] - f["verify_max"]) < 1e-12
    assert f["correction_max"] < 1e-6
    assert f["freeness_min"] > 3.9


# ---------------------------------------------------------------------------
# poisson-check / verify


def test_poisson_check_certifies_second_order():
    rep = poisson_run()
    assert rep.final["min_order"] > 1.7
    assert rep.final["max_error_finest"] < 1e-3
    cases = {s["case"] for s in rep.stages}
    assert cases == {"constant", "quartic"}
    out = rep.config["out_dir"]
    assert os.path.exists(os.path.join(out, "poisson_constant.csv"))
    assert os.path.exists(os.path.join(out, "poisson_quartic.csv"))


def test_verify_reproduces_the_embed_certificate():
    emb = embed_run()
    cfg = RunConfig.from_dict(_flag_dict(65, emb.config["out_dir"]))
    rep = run_verify(cfg)
    assert abs(rep.final["pullback_residual_max"]
               - emb.final["pullback_residual_max"]) < 1e-12
    assert abs(rep.final["freeness_min"] - emb.final["freeness_min"]) < 1e-9
    assert abs(rep.final["displacement_max"] - emb.final["displacement_max"]) < 1e-12


def test_verify_names_a_missing_artifact():
    cfg = _cfg(metric={"name": "flat_plus_bump", "params": {"amplitude": 1e-4}})
    with pytest.raises(ValueError, match="missing artifact"):
        run_verify(cfg)


def test_verify_checks_the_component_count():
    emb = embed_run()
    data = _flag_dict(65, emb.config["out_dir"])
    data["q"] = 8
    with pytest.raises(ValueError, match="components"):
        run_verify(RunConfig.from_dict(data))


# ---------------------------------------------------------------------------
# command line


def test_cli_exit_codes_follow_the_contract(capsys):
    ok = _write_cfg({"n": 1, "N": 65, "out_dir": tempfile.mkdtemp(),
                     "metric": {"name": "flat_plus_bump",
                                "params": {"amplitude": 0.2, "radius": 0.4}}})
    assert cli_main(["decompose", "--config", ok]) == 0
    out = capsys.readouterr().out
    assert "decompose: ok" in out and "report:" in out

    missing = _write_cfg({"N": 65})
    assert cli_main(["decompose", "--config", missing]) == 2
    assert "config error: missing config key: n" in capsys.readouterr().err

    assert cli_main(["embed", "--config", "/no/such/file.json"]) == 2
    assert "cannot read configuration" in capsys.readouterr().err

    diverging = _write_cfg({
        "n": 1, "N": 65, "q": 7, "out_dir": tempfile.mkdtemp(),
        "metric": {"name": "flat_plus_bump",
                   "params": {"amplitude": 50.0, "radius": 0.25}}})
    assert cli_main(["perturb", "--config", diverging]) == 1
    assert "stage error" in capsys.readouterr().err

    no_artifact = _write_cfg({
        "n": 1, "N": 65, "q": 7, "out_dir": tempfile.mkdtemp(),
        "metric": {"name": "flat_plus_bump", "params": {"amplitude": 1e-4}}})
    assert cli_main(["verify", "--config", no_artifact]) == 1
    assert "missing artifact" in capsys.readouterr().err


def test_cli_reports_are_valid_json(capsys):
    cfg_path = _write_cfg({"n": 2, "N": 33, "out_dir": tempfile.mkdtemp()})
    assert cli_main(["poisson-check", "--config", cfg_path]) == 0
    capsys.readouterr()
    with open(json.load(open(cfg_path))["out_dir"] + "/poisson_check_report.json") as fh:
        report = json.load(fh)
    json.dumps(report)
    assert report["command"] == "poisson-check"
