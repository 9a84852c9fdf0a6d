import math

import numpy as np
import pytest

from odebench import gp, integrate, magi
from odebench.dynamics import OdeModel, get_model
from odebench.observations import ObservationSet
from odebench.sampler import NutsConfig, nuts_sample

from conftest import central_fd, make_missing_e_problem, rel_err


def _state_for(problem, seed=0, q_scale=0.05):
    """A sampler-plausible random state built by perturbing in whitened space."""
    rng = np.random.default_rng(seed)
    init = magi.init_missing_components(problem.model, problem.grid,
                                        problem.observations, n_iter=300)
    log_sigma = np.array([
        math.log(max(problem.noise_sd_init.get(c, 0.1), 1e-3)) for c in problem.observed
    ])
    base = magi.MagiState(x=init.x, theta=init.theta, log_sigma=log_sigma)
    q = problem.whiten(base) + q_scale * rng.standard_normal(problem.dim)
    return problem.unpack(problem.unwhiten_draws(q[None, :])[0])


def test_log_posterior_gradient_matches_fd(seir_small):
    problem = seir_small["problem"]
    f = magi.make_logdensity(problem, force_numpy=True)
    for seed in range(3):
        state = _state_for(problem, seed=seed)
        flat = problem.pack(state)
        _, grad = f(flat)
        fd = central_fd(lambda v: f(v)[0], flat)
        assert rel_err(grad, fd, floor=1e-4 * max(1.0, np.max(np.abs(fd)))) < 1e-5


def test_whitened_gradient_matches_fd(seir_small):
    problem = seir_small["problem"]
    f = magi.make_logdensity_whitened(problem)
    state = _state_for(problem, seed=1)
    q = problem.whiten(state)
    _, grad = f(q)
    fd = central_fd(lambda v: f(v)[0], q)
    assert rel_err(grad, fd, floor=1e-4 * max(1.0, np.max(np.abs(fd)))) < 1e-5


def test_compiled_paths_match_numpy(seir_small, lorenz_small):
    for fixture in (seir_small, lorenz_small):
        problem = fixture["problem"]
        state = _state_for(problem, seed=2)
        flat = problem.pack(state)
        v_np, g_np = magi.make_logdensity(problem, force_numpy=True)(flat)
        v_nb, g_nb = magi.make_logdensity(problem)(flat)
        assert abs(v_np - v_nb) < 1e-8 * max(1.0, abs(v_np))
        assert np.max(np.abs(g_np - g_nb)) < 1e-9 * max(1.0, np.max(np.abs(g_np)))

        fw = magi.make_logdensity_whitened(problem)
        q = problem.whiten(state)
        v_w, g_w = fw(q)
        target = magi.make_sampler_target(problem)
        v_c, g_c = target.func(q, target.ctx)
        assert abs(v_w - v_c) < 1e-8 * max(1.0, abs(v_w))
        assert np.max(np.abs(g_w - g_c)) < 1e-9 * max(1.0, np.max(np.abs(g_w)))


def test_whitened_value_equals_plain_value(seir_small):
    problem = seir_small["problem"]
    state = _state_for(problem, seed=3)
    v_plain, _ = magi.make_logdensity(problem, force_numpy=True)(problem.pack(state))
    v_white, _ = magi.make_logdensity_whitened(problem)(problem.whiten(state))
    assert rel_err(v_plain, v_white) < 1e-10


def test_doubling_sigma_identity(seir_small):
    problem = seir_small["problem"]
    state = _state_for(problem, seed=4)
    f = magi.make_logdensity(problem, force_numpy=True)
    v1, _ = f(problem.pack(state))

    c = 1  # second observed component
    rows = problem.obs_rows[c]
    sse = float(np.sum((problem.obs_vals[c] - state.x[rows, problem.observed[c]]) ** 2))
    n_c = problem.obs_counts[c]
    sigma = math.exp(state.log_sigma[c])

    doubled = state.copy()
    doubled.log_sigma = state.log_sigma.copy()
    doubled.log_sigma[c] += math.log(2.0)
    v2, _ = f(problem.pack(doubled))
    expected = 0.5 * (1.0 - 0.25) * sse / sigma**2 - n_c * math.log(2.0)
    assert rel_err(v2 - v1, expected) < 1e-9


def test_observation_order_is_set_semantics(seir_small):
    # The observation container enforces sorted times, so any input ordering
    # reaching the posterior is canonical; identical data gives identical values.
    problem = seir_small["problem"]
    obs = seir_small["obs"]
    rebuilt = ObservationSet(times=obs.times.copy(), values=obs.values.copy(),
                             mask=obs.mask)
    problem2 = magi.make_problem(seir_small["model"], seir_small["grid"], rebuilt,
                                 seir_small["fits"])
    state = _state_for(problem, seed=5)
    v1 = magi.log_posterior(problem, state)
    v2 = magi.log_posterior(problem2, state)
    assert v1 == v2
    with pytest.raises(ValueError):
        ObservationSet(times=obs.times[::-1].copy(), values=obs.values.copy(), mask=obs.mask)


def test_missing_component_bookkeeping():
    model, grid, obs, init, fits, problem = make_missing_e_problem()
    assert problem.observed == [1, 2]
    state = magi.MagiState(x=init.x, theta=init.theta, log_sigma=np.array([-2.0, -2.0]))
    assert problem.pack(state).size == grid.size * 3 + 3 + 2
    grad = magi.log_posterior_grad(problem, state)
    assert grad.size == problem.dim
    assert np.all(np.isfinite(init.x))


def test_mech_term_ignores_missingness_mask(seir_small):
    """Masking a component's data must not change the mechanistic term."""
    model = seir_small["model"]
    grid = seir_small["grid"]
    obs = seir_small["obs"]
    fits = seir_small["fits"]
    values = obs.values.copy()
    values[:, 0] = np.nan
    obs_masked = ObservationSet(times=obs.times, values=values, mask=(False, True, True))
    problem_full = seir_small["problem"]
    problem_masked = magi.make_problem(model, grid, obs_masked, fits)

    state_full = _state_for(problem_full, seed=6)
    state_masked = magi.MagiState(x=state_full.x, theta=state_full.theta,
                                  log_sigma=state_full.log_sigma[1:])

    def terms(problem, state):
        xc = (state.x - problem.mu).T
        fvals = model.rhs(state.x, state.theta, grid.times)
        gdot = np.matmul(problem.mmat, xc[:, :, None])[:, :, 0]
        resid = fvals.T - gdot
        b = np.matmul(problem.Cinv, resid[:, :, None])[:, :, 0]
        return float(np.sum(resid * b))

    assert terms(problem_full, state_full) == pytest.approx(
        terms(problem_masked, state_masked), rel=1e-12)


def test_huge_sigma_leaves_mech_term_in_charge(seir_small):
    """At sigma -> large the theta profile is governed by the mechanistic term."""
    problem = seir_small["problem"]
    state = _state_for(problem, seed=7)
    f = magi.make_logdensity(problem, force_numpy=True)

    def value_at(beta, log_sigma_val):
        st = state.copy()
        st.theta = state.theta.copy()
        st.theta[0] = beta
        st.log_sigma = np.full_like(state.log_sigma, log_sigma_val)
        v, _ = f(problem.pack(st))
        return v

    # sigma at the top of its prior box: the data term shrinks to nothing
    betas = np.linspace(0.5, 4.0, 29)
    with_data = [value_at(b, magi.LOG_SIGMA_HI) for b in betas]

    # Mechanistic + GP objective only (no observation terms).
    def mech_only(beta):
        st = state.copy()
        st.theta = state.theta.copy()
        st.theta[0] = beta
        xc = (st.x - problem.mu).T
        a = np.matmul(problem.Kinv, xc[:, :, None])[:, :, 0]
        fvals = problem.model.rhs(st.x, st.theta, problem.grid.times)
        gdot = np.matmul(problem.mmat, xc[:, :, None])[:, :, 0]
        resid = fvals.T - gdot
        b = np.matmul(problem.Cinv, resid[:, :, None])[:, :, 0]
        return -0.5 * (np.sum(xc * a) + np.sum(resid * b))

    without_data = [mech_only(b) for b in betas]
    assert np.argmax(with_data) == np.argmax(without_data)


def test_init_fully_observed_uses_splines(seir_small):
    model = seir_small["model"]
    grid = seir_small["grid"]
    obs = seir_small["obs"]
    init = magi.init_missing_components(model, grid, obs, n_iter=400)
    from odebench.magi import _interp_and_smooth

    for c in range(3):
        t_obs, y_obs = obs.component_values(c)
        expected = _interp_and_smooth(t_obs, y_obs, grid.times)
        assert np.allclose(init.x[:, c], expected)
    assert init.flag is None
    assert np.all(init.theta > 0)


def test_init_gradient_matching_on_clean_lorenz():
    model = get_model("lorenz")
    theta_true = np.array([8.0 / 3.0, 28.0, 10.0])
    times = magi.uniform_grid(0.0, 2.0, 161)
    truth = integrate.integrate_rk45(model, np.array([5.0, 5.0, 5.0]), theta_true, times)
    obs = ObservationSet(times=times, values=truth.values, mask=(True, True, True))
    grid = magi.DiscretizationGrid.build(times, obs.times)
    init = magi.init_missing_components(model, grid, obs, n_iter=4000)
    for j in range(3):
        assert abs(init.theta[j] - theta_true[j]) / theta_true[j] < 0.10


def test_init_missing_e_is_finite():
    model, grid, obs, init, fits, problem = make_missing_e_problem(n_grid=41, seed=9)
    assert np.all(np.isfinite(init.x))
    assert np.all(np.isfinite(init.theta))


def test_grid_exact_membership():
    times = magi.uniform_grid(0.0, 12.0, 321)
    insample = times[:161]
    obs_times = insample[::4]
    grid = magi.DiscretizationGrid.build(times, obs_times)
    assert grid.obs_index.tolist() == list(range(0, 161, 4))
    with pytest.raises(ValueError):
        magi.DiscretizationGrid.build(times, np.array([0.0375 / 2]))


def test_seir_extended_grid_spacing():
    times = magi.uniform_grid(0.0, 12.0, 321)
    assert times.size == 321
    spacing = np.diff(times)
    assert np.allclose(spacing, 0.0375, rtol=0, atol=1e-12)
    # first 161 points span the observation window
    assert times[160] == pytest.approx(6.0, abs=1e-12)


def test_linear_ode_posterior_recovery():
    """Easy conjugate-like case: dense low-noise data on x' = -theta x."""
    decay = OdeModel(
        name="decay-1d",
        state_dim=1,
        param_dim=1,
        component_names=("x",),
        param_names=("theta",),
        rhs=lambda x, th, t: -th[0] * x,
        jac_state=lambda x, th, t: np.full(np.shape(x)[:-1] + (1, 1), -th[0]),
        jac_param=lambda x, th, t: -np.asarray(x)[..., None],
        positive_params=(True,),
        theta_box=((1e-6, 100.0),),
    )
    theta_true = 0.8
    times = magi.uniform_grid(0.0, 3.0, 41)
    truth = np.exp(-theta_true * times)[:, None] * 2.0
    rng = np.random.default_rng(0)
    values = truth[::2] + 0.01 * rng.standard_normal(truth[::2].shape)
    obs = ObservationSet(times=times[::2], values=values, mask=(True,))
    grid = magi.DiscretizationGrid.build(times, obs.times)
    init = magi.init_missing_components(decay, grid, obs, n_iter=800)
    fits = magi.prepare_fits(decay, grid, obs, False, init)
    problem = magi.make_problem(decay, grid, obs, fits)
    post = magi.run_inference(problem, init, n_warmup=800, n_samples=800, seed=5)
    theta_draws = post.theta_draws()[:, 0]
    sd = theta_draws.std()
    assert abs(post.theta_mean[0] - theta_true) < 3.0 * max(sd, 1e-3)


def test_run_inference_determinism(seir_small):
    problem = seir_small["problem"]
    init = magi.init_missing_components(seir_small["model"], seir_small["grid"],
                                        seir_small["obs"], n_iter=200)
    a = magi.run_inference(problem, init, n_warmup=50, n_samples=50, seed=9)
    b = magi.run_inference(problem, init, n_warmup=50, n_samples=50, seed=9)
    assert np.array_equal(a.draws, b.draws)
    assert np.array_equal(a.theta_ci, b.theta_ci)


def test_prior_driven_run_stays_finite():
    """No observations at all: the GP prior plus mechanism keeps draws finite."""
    model = get_model("lorenz")
    times = magi.uniform_grid(0.0, 1.0, 17)
    obs = ObservationSet(times=np.empty(0), values=np.empty((0, 3)),
                         mask=(True, True, True))
    hyper = gp.MaternHyper(amplitude=5.0, lengthscale=0.5)
    fits = {c: gp.GpFit(hyper=hyper, noise_sd=0.5) for c in range(3)}
    grid = magi.DiscretizationGrid.build(times, obs.times)
    problem = magi.make_problem(model, grid, obs, fits)
    init = magi.InitResult(x=np.zeros((17, 3)) + 0.1, theta=np.array([2.0, 20.0, 8.0]))
    post = magi.run_inference(problem, init, n_warmup=100, n_samples=100, seed=3)
    assert np.all(np.isfinite(post.x_mean))


def test_posterior_samples_roundtrip(tmp_path, seir_small):
    problem = seir_small["problem"]
    init = magi.init_missing_components(seir_small["model"], seir_small["grid"],
                                        seir_small["obs"], n_iter=200)
    post = magi.run_inference(problem, init, n_warmup=30, n_samples=40, seed=2,
                              config_hash="abc123")
    prefix = str(tmp_path / "post")
    post.save(prefix)
    back = magi.PosteriorSamples.load(prefix)
    assert np.array_equal(back.draws, post.draws)
    assert np.allclose(back.theta_ci, post.theta_ci)
    assert back.config_hash == "abc123"
    summary = (tmp_path / "post_summary.csv").read_text().splitlines()
    assert summary[0] == "kind,name,time,mean,q025,q975"
    assert len(summary) == 1 + post.grid_times.size * 3 + 3 + 3
