"""Fast finite-difference and oracle suites runnable from the CLI.

Each check returns (name, passed, detail); the CLI prints one line per
check.  These deliberately overlap the unit-test suite so a deployed
installation can validate its numerical kernels without pytest.
"""

from __future__ import annotations

import numpy as np

from . import dynamics, gp, integrate, magi, pinn, sampler
from .observations import ObservationSet

__all__ = ["central_difference_gradient", "relative_agreement", "run_selfcheck"]


def central_difference_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def relative_agreement(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, scale floor)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)),
                       floor * max(1.0, float(np.max(np.abs(b), initial=1.0))))
    return float(np.max(np.abs(a - b) / scale))


def _check_dynamics_jacobians() -> tuple[bool, str]:
    rng = np.random.default_rng(11)
    worst = 0.0
    for model in (dynamics.get_model("seir-log"), dynamics.get_model("lorenz")):
        for _ in range(20):
            if model.name == "seir-log":
                x = rng.uniform(-5.0, -1.0, size=3)
                theta = rng.uniform(0.2, 3.0, size=3)
            else:
                x = rng.uniform(-10.0, 10.0, size=3)
                theta = np.array([rng.uniform(1, 4), rng.uniform(10, 30), rng.uniform(5, 15)])
            jx = model.jac_state(x, theta, 0.0)
            jt = model.jac_param(x, theta, 0.0)
            for c in range(3):
                fd_x = central_difference_gradient(lambda v: model.rhs(v, theta, 0.0)[c], x)
                fd_t = central_difference_gradient(lambda v: model.rhs(x, v, 0.0)[c], theta)
                worst = max(worst, relative_agreement(jx[c], fd_x, floor=1e-5),
                            relative_agreement(jt[c], fd_t, floor=1e-5))
    return worst < 1e-5, f"max rel err {worst:.2e}"


def _check_integrator() -> tuple[bool, str]:
    times = np.linspace(0.0, 1.0, 11)
    traj = integrate.integrate_rk45(lambda x, p, t: -x, np.array([1.0]), np.zeros(1), times)
    err1 = float(np.max(np.abs(traj.values[:, 0] - np.exp(-times))))
    peak_t, _ = integrate.solve_peak(lambda x, p, t: (1.0 - 2.0 * t) * x, np.array([1.0]),
                                     np.zeros(1), horizon=(0.0, 1.0), grid_step=0.001,
                                     component=0, value_transform=None)
    ok = err1 < 1e-6 and abs(peak_t - 0.5) < 2e-3
    return ok, f"decay err {err1:.1e}, peak at {peak_t:.3f}"


def fd_kernel_matrices(hyper, grid: np.ndarray, h: float = 1e-5):
    """(dK, Kd, ddK) from central differences of the plain kernel values."""
    def k(s, t):
        return gp.matern_eval(hyper, s, t)

    m = grid.size
    dK = np.empty((m, m))
    Kd = np.empty((m, m))
    ddK = np.empty((m, m))
    for i, s in enumerate(grid):
        for j, t in enumerate(grid):
            dK[i, j] = (k(s + h, t) - k(s - h, t)) / (2 * h)
            Kd[i, j] = (k(s, t + h) - k(s, t - h)) / (2 * h)
            ddK[i, j] = (k(s + h, t + h) - k(s + h, t - h)
                         - k(s - h, t + h) + k(s - h, t - h)) / (4 * h * h)
    return dK, Kd, ddK


def matrix_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| scaled by the magnitude of the reference matrix b."""
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def _check_kernel_derivatives() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    grid = np.linspace(0.0, 2.0, 10)
    worst = 0.0
    for _ in range(5):
        hyper = gp.MaternHyper(amplitude=rng.uniform(0.5, 3.0),
                               lengthscale=rng.uniform(0.3, 2.0))
        mats = gp.build_kernel_mats(hyper, grid)
        fd_dK, fd_Kd, fd_ddK = fd_kernel_matrices(hyper, grid)
        worst = max(worst,
                    matrix_relative_error(mats.dK, fd_dK),
                    matrix_relative_error(mats.Kd, fd_Kd),
                    matrix_relative_error(mats.ddK, fd_ddK))
    return worst < 1e-4, f"max matrix-rel err {worst:.2e}"


def _small_seir_problem():
    model = dynamics.get_model("seir-log")
    times = magi.uniform_grid(0.0, 2.0, 21)
    truth = integrate.integrate_rk45(model, np.log([0.01, 0.01, 0.01]),
                                     np.array([2.0, 0.2, 0.6]), times)
    rng = np.random.default_rng(3)
    values = truth.values[::4] + 0.1 * rng.standard_normal(truth.values[::4].shape)
    obs = ObservationSet(times=times[::4], values=values, mask=(True, True, True))
    grid = magi.DiscretizationGrid.build(times, obs.times)
    fits = {c: gp.gp_smooth_fit(obs.times, values[:, c], n_iter=200) for c in range(3)}
    return magi.make_problem(model, grid, obs, fits), truth


def _check_posterior_gradient() -> tuple[bool, str]:
    problem, truth = _small_seir_problem()
    f = magi.make_logdensity(problem)
    rng = np.random.default_rng(7)
    flat = problem.pack(magi.MagiState(
        x=truth.values + 0.05 * rng.standard_normal(truth.values.shape),
        theta=np.array([1.8, 0.25, 0.5]),
        log_sigma=np.array([-2.0, -2.1, -1.9]),
    ))
    _, grad = f(flat)
    fd = central_difference_gradient(lambda v: f(v)[0], flat)
    err = relative_agreement(grad, fd, floor=1e-6)
    return err < 1e-5, f"max rel err {err:.2e}"


def _check_pinn_gradient() -> tuple[bool, str]:
    model = dynamics.get_model("lorenz")
    times = np.linspace(0.0, 1.0, 9)
    rng = np.random.default_rng(2)
    obs = ObservationSet(times=times[::2], values=rng.standard_normal((5, 3)),
                         mask=(True, True, True))
    grid = magi.DiscretizationGrid.build(times, obs.times)
    net = pinn.init_mlp([1, 3, 3], 0.0, 1.0, seed=4)
    theta = np.array([2.0, 20.0, 8.0])

    packs = [w for w in net.weights] + [b for b in net.biases] + [theta]
    shapes = [p.shape for p in packs]
    sizes = [p.size for p in packs]

    def unpack(flat):
        arrs, k = [], 0
        for shape, size in zip(shapes, sizes):
            arrs.append(flat[k:k + size].reshape(shape))
            k += size
        return arrs

    def loss_of(flat):
        arrs = unpack(flat)
        tmp = pinn.MlpNet(weights=arrs[:2], biases=arrs[2:4], t_lo=0.0, t_hi=1.0)
        total, _, _ = pinn.pinn_loss(model, tmp, arrs[4], obs, grid, lam=10.0)
        return total

    flat0 = np.concatenate([p.ravel() for p in packs])
    total, _, _, gw, gb, gt = pinn._loss_and_grads(model, net, theta, obs, grid, 10.0)
    grad = np.concatenate([g.ravel() for g in gw + gb + [gt]])
    fd = central_difference_gradient(loss_of, flat0)
    err = relative_agreement(grad, fd, floor=1e-6)
    return err < 1e-5, f"max rel err {err:.2e}"


def _check_sampler_determinism() -> tuple[bool, str]:
    def target(q):
        return -0.5 * float(q @ q), -q

    cfg = sampler.NutsConfig(n_warmup=200, n_samples=200, seed=99)
    a = sampler.nuts_sample(target, np.zeros(3), cfg)
    b = sampler.nuts_sample(target, np.zeros(3), cfg)
    same = bool(np.array_equal(a.draws, b.draws))
    return same, "identical draws" if same else "draws differ"


def run_selfcheck() -> list[tuple[str, bool, str]]:
    checks = [
        ("dynamics-jacobians", _check_dynamics_jacobians),
        ("integrator-oracles", _check_integrator),
        ("kernel-derivatives", _check_kernel_derivatives),
        ("posterior-gradient", _check_posterior_gradient),
        ("pinn-nested-gradient", _check_pinn_gradient),
        ("sampler-determinism", _check_sampler_determinism),
    ]
    results = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
