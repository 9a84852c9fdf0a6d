import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from odebench import experiments as E
from odebench.integrate import Trajectory

from conftest import tiny_regime


def test_builtin_regime_inventory():
    names = [r.name for r in E.builtin_regimes()]
    assert names == ["seir-full", "seir-missing-e", "lorenz-chaotic",
                     "lorenz-stable", "lorenz-forecast"]


def test_seir_grid_shape():
    regime = E.get_regime("seir-full")
    master = regime.master_times()
    assert master.size == 321
    assert regime.insample_times().size == 161
    assert np.allclose(np.diff(master), 0.0375, atol=1e-12)
    obs = regime.obs_times()
    assert obs.size == 41
    assert np.allclose(np.diff(obs), 0.15, atol=1e-12)
    # forecast evaluation grid is the 160 points past the observation window
    ev = regime.eval_times()
    assert ev.size == 160
    assert ev[0] > 6.0 and ev[-1] == pytest.approx(12.0)


def test_lorenz_chaotic_grid_shape():
    regime = E.get_regime("lorenz-chaotic")
    assert regime.master_times().size == 321
    obs = regime.obs_times()
    assert obs.size == 81
    assert np.allclose(np.diff(obs), 0.1, atol=1e-12)
    assert regime.forecast_protocol is None


def test_lorenz_forecast_grid_shape():
    regime = E.get_regime("lorenz-forecast")
    master = regime.master_times()
    assert master.size == 201
    assert regime.insample_times().size == 81
    assert np.allclose(np.diff(master), 0.025, atol=1e-12)
    obs = regime.obs_times()
    assert obs.size == 41 and obs[-1] == pytest.approx(2.0)
    ev = regime.eval_times()
    assert ev.size == 121
    assert ev[0] == pytest.approx(2.0) and ev[-1] == pytest.approx(5.0)
    assert regime.noise_level == pytest.approx(0.0005)


def test_lorenz_stable_differs_only_in_rho():
    chaotic = E.get_regime("lorenz-chaotic")
    stable = E.get_regime("lorenz-stable")
    assert stable.theta_true == (8.0 / 3.0, 23.0, 10.0)
    assert chaotic.theta_true[1] == 28.0
    assert replace(stable, name=chaotic.name, theta_true=chaotic.theta_true) == chaotic


def test_seir_r0_truth():
    regime = E.get_regime("seir-full")
    r0, peak_t, peak_v = E.regime_truth_qoi(regime)
    assert r0 == pytest.approx(10.0)
    assert 6.0 < peak_t <= 12.0
    assert 0 < peak_v < 1


def test_missing_e_masks_component():
    regime = E.get_regime("seir-missing-e")
    ds = E.simulate_dataset(regime, 7)
    assert np.all(np.isnan(ds.values[:, 0]))
    assert not np.any(np.isnan(ds.values[:, 1:]))
    assert ds.mask == (False, True, True)


def test_zero_noise_reproduces_truth():
    regime = replace(E.get_regime("seir-full"), noise_level=0.0)
    ds = E.simulate_dataset(regime, 3)
    truth = E.ground_truth(regime)
    obs_rows = np.arange(0, regime.n_grid_insample, regime.obs_stride())
    assert np.allclose(ds.values, truth.values[obs_rows], atol=0)


def test_lorenz_noise_anchored_to_component_sd():
    regime = E.get_regime("lorenz-chaotic")
    ds = E.simulate_dataset(regime, 11)
    truth = E.ground_truth(regime)
    clean = truth.values[::4]
    expected_sds = 0.05 * clean.std(axis=0)
    resid = ds.values - clean
    for c in range(3):
        assert abs(resid[:, c].std() / expected_sds[c] - 1.0) < 0.4
    assert ds.noise_spec["kind"] == "sd-fraction"
    assert np.allclose(ds.noise_spec["per_component_sd"], expected_sds)


def test_dataset_simulation_is_pure(tmp_path):
    regime = E.get_regime("seir-full")
    a = E.simulate_dataset(regime, 21)
    b = E.simulate_dataset(regime, 21)
    assert np.array_equal(a.values, b.values)
    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    a.to_csv(pa, regime.model().component_names)
    b.to_csv(pb, regime.model().component_names)
    assert pa.read_bytes() == pb.read_bytes()
    c = E.simulate_dataset(regime, 22)
    assert not np.array_equal(a.values, c.values)


def test_metric_space_flags_pinned():
    assert E.get_regime("seir-full").metric_space == "log"
    assert E.get_regime("seir-missing-e").metric_space == "log"
    assert E.get_regime("lorenz-chaotic").metric_space == "raw"
    assert E.get_regime("lorenz-forecast").metric_space == "raw"


def test_fourier_prior_toggle_pinned():
    assert not E.get_regime("seir-full").fourier_prior
    assert E.get_regime("lorenz-chaotic").fourier_prior
    assert E.get_regime("lorenz-forecast").fourier_prior


def test_compute_rmse_identities():
    times = np.linspace(0, 1, 9)
    vals = np.random.default_rng(0).standard_normal((9, 3))
    base = Trajectory(times=times, values=vals)
    assert np.allclose(E.compute_rmse(base, base, times), 0.0)

    shifted = Trajectory(times=times, values=vals + np.array([0.0, 0.7, 0.0]))
    rmse = E.compute_rmse(shifted, base, times)
    assert rmse[0] == 0.0
    assert rmse[1] == pytest.approx(0.7, rel=1e-12)
    assert rmse[2] == 0.0


def test_compute_rmse_against_two_loop_reference():
    rng = np.random.default_rng(5)
    times = np.linspace(0, 2, 13)
    a = Trajectory(times=times, values=rng.standard_normal((13, 2)))
    b = Trajectory(times=times, values=rng.standard_normal((13, 2)))
    eval_times = times[::3]
    got = E.compute_rmse(a, b, eval_times)
    for c in range(2):
        acc = 0.0
        count = 0
        for t in eval_times:
            i = list(times).index(t)
            acc += (a.values[i, c] - b.values[i, c]) ** 2
            count += 1
        assert abs(got[c] - np.sqrt(acc / count)) < 1e-12


def test_compute_rmse_requires_exact_membership():
    times = np.linspace(0, 1, 9)
    traj = Trajectory(times=times, values=np.zeros((9, 1)))
    with pytest.raises(ValueError):
        E.compute_rmse(traj, traj, np.array([0.123456]))


def test_quantities_of_interest():
    theta = np.array([2.0, 0.2, 0.6])
    times = np.linspace(0, 12, 101)
    logi = -((times - 8.0) ** 2) / 4.0  # peak at t=8
    vals = np.column_stack([np.zeros_like(times), logi, np.zeros_like(times)])
    qoi = E.quantities_of_interest(theta, Trajectory(times=times, values=vals))
    assert qoi.r0 == pytest.approx(10.0)
    assert qoi.peak_time == pytest.approx(8.04, abs=0.2)
    assert not qoi.peak_at_boundary

    rising = np.column_stack([times, times, times])
    qoi2 = E.quantities_of_interest(theta, Trajectory(times=times, values=rising))
    assert qoi2.peak_time == pytest.approx(12.0)
    assert qoi2.peak_at_boundary


def test_mechanistic_fidelity_on_truth_and_flatline():
    regime = E.get_regime("lorenz-chaotic")
    model = regime.model()
    truth = E.ground_truth(regime)
    times = truth.times
    exact_deriv = model.rhs(truth.values, np.array(regime.theta_true), times)
    fid = E.mechanistic_fidelity(truth.values, exact_deriv, model,
                                 np.array(regime.theta_true), times)
    assert np.all(fid < 1e-10)

    beta, rho, sigma = regime.theta_true
    fp = np.array([np.sqrt(beta * (rho - 1)), np.sqrt(beta * (rho - 1)), rho - 1])
    flat = np.tile(fp, (times.size, 1))
    fid_flat = E.mechanistic_fidelity(flat, np.zeros_like(flat), model,
                                      np.array(regime.theta_true), times)
    assert np.all(fid_flat < 1e-12)


def test_coverage_report():
    theta = np.array([2.0, 0.2, 0.6])
    wide = np.array([[-np.inf, np.inf]] * 3)
    assert np.allclose(E.coverage_report([wide, wide], theta), 1.0)
    tight_miss = np.array([[5.0, 6.0], [0.19, 0.21], [0.0, 1.0]])
    cov = E.coverage_report([wide, tight_miss], theta)
    assert np.allclose(cov, [0.5, 1.0, 1.0])
    with pytest.raises(ValueError):
        E.coverage_report([wide], theta)


def test_reference_coverage_targets():
    assert E.REFERENCE_COVERAGE["seir-full"] == {"beta": 0.90, "gamma": 0.89, "sigma": 0.90}
    assert E.REFERENCE_COVERAGE["seir-missing-e"] == {"beta": 0.94, "gamma": 0.91, "sigma": 0.93}


def test_derive_seed_stability_and_method_independence():
    regime = E.get_regime("seir-full")
    s1 = E.dataset_seed(7, regime, 0)
    s2 = E.dataset_seed(7, regime, 0)
    assert s1 == s2
    assert E.dataset_seed(7, regime, 1) != s1
    # adding methods never perturbs datasets: dataset seed has no method tag
    assert E.derive_seed(7, 0, "magi", regime.name) != s1


def test_run_study_counts_and_resume(tmp_path):
    regime = tiny_regime(name="tiny-seir", replicates=2)
    methods = [("magi", {"n_warmup": 20, "n_samples": 20, "init_budget": 50}),
               ("pinn", {"lam": 10.0, "epochs": 50})]
    out = tmp_path / "study"
    res = E.run_study(regime, methods, replicates=2, base_seed=3, out_dir=str(out))
    assert res.attempted == 4 and res.failed == 0 and res.skipped == 0

    with open(out / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert set(r["method"] for r in rows) == {"magi", "pinn"}
    assert set(int(r["replicate"]) for r in rows) == {0, 1}
    header = open(out / "results.csv").readline().strip()
    assert header == ",".join(E.RESULT_COLUMNS)

    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest) == 4

    # resuming recomputes nothing
    res2 = E.run_study(regime, methods, replicates=2, base_seed=3, out_dir=str(out))
    assert res2.attempted == 0 and res2.skipped == 4
    with open(out / "results.csv") as fh:
        rows2 = list(csv.DictReader(fh))
    assert len(rows2) == len(rows)


def test_run_study_records_failures(tmp_path):
    regime = tiny_regime(name="tiny-bad")
    # invalid option type forces a failure inside the worker
    res = E.run_study(regime, [("pinn", {"lam": 10.0, "epochs": "not-a-number"})],
                      replicates=1, base_seed=0, out_dir=str(tmp_path / "s"))
    assert res.failed == 1
    assert res.rows[0][6] == "error"


def test_run_single_magi_metrics(tmp_path):
    regime = tiny_regime(name="tiny-metrics")
    rows, manifest = E.run_single(regime, "magi",
                                  {"n_warmup": 30, "n_samples": 30, "init_budget": 50},
                                  replicate=0, base_seed=1, forecast=False,
                                  out_dir=str(tmp_path))
    metrics = {(r[5], r[6]) for r in rows}
    for comp in ("logE", "logI", "logR"):
        assert (comp, "rmse_insample") in metrics
        assert (comp, "mech_fidelity") in metrics
    for par in ("beta", "gamma", "sigma"):
        assert (par, "abs_error_theta") in metrics
        assert (par, "ci_hit") in metrics
    assert "wall_time_s" in manifest
    assert all(float(r[7]) >= 0 for r in rows if r[6] != "ci_hit")
    # posterior artifacts written
    assert any(p.name.startswith("posterior_") for p in tmp_path.iterdir())


def test_run_single_forecast_adds_qoi(tmp_path):
    regime = tiny_regime(name="tiny-forecast")
    rows, _ = E.run_single(regime, "pinn", {"lam": 10.0, "epochs": 60},
                           replicate=0, base_seed=1, forecast=True, out_dir=None)
    metrics = {r[6] for r in rows}
    assert "rmse_forecast" in metrics
    assert "abs_error_R0" in metrics
    assert "abs_error_peak_time" in metrics
    assert "abs_error_peak_intensity" in metrics
