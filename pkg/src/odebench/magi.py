"""Manifold-constrained Gaussian process inference over ODE trajectories.

The joint log-posterior over (trajectory values on the discretization grid,
ODE parameters, per-component noise scales) combines, per component:

  * a GP prior quadratic form on the centered trajectory,
  * the Gaussian observation error with its sigma normalization, and
  * a gradient-matching quadratic form between the ODE right-hand side and
    the conditional mean of the GP derivative, weighted by the conditional
    covariance of that derivative.

Sampling is delegated to the NUTS chain in :mod:`odebench.sampler`; both
forecasting protocols (extended grid for the epidemic testbed, sequential
horizon growth for the chaotic one) are driven from here.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_smoothing_spline

from . import _fast
from .dynamics import OdeModel
from .gp import GpFit, GpKernelMats, build_kernel_mats, gp_smooth_fit
from .integrate import IntegrationError, integrate_rk45
from .observations import ObservationSet
from .optim import Adam
from .sampler import ChainResult, NutsConfig, nuts_sample

__all__ = [
    "DiscretizationGrid",
    "MagiState",
    "MagiProblem",
    "InitResult",
    "PosteriorSamples",
    "uniform_grid",
    "make_problem",
    "log_posterior",
    "log_posterior_grad",
    "make_logdensity",
    "init_missing_components",
    "run_inference",
    "fit_magi",
    "forecast_extended_grid",
    "forecast_sequential",
    "gp_gradient_estimate",
]

LOG_SIGMA_LO = math.log(1e-6)
LOG_SIGMA_HI = math.log(1e3)


def uniform_grid(t0: float, t1: float, n: int) -> np.ndarray:
    """n evenly spaced points on [t0, t1], built by integer subdivision."""
    if n < 2 or t1 <= t0:
        raise ValueError("need n >= 2 and t1 > t0")
    return t0 + (t1 - t0) * np.arange(n) / (n - 1)


@dataclass(frozen=True)
class DiscretizationGrid:
    """Constraint-enforcement times I plus exact positions of the observations."""

    times: np.ndarray
    obs_index: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        obs_index = np.asarray(self.obs_index, dtype=int)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "obs_index", obs_index)
        if np.any(np.diff(times) <= 0):
            raise ValueError("grid times must be strictly increasing")

    @classmethod
    def build(cls, times: np.ndarray, obs_times: np.ndarray) -> "DiscretizationGrid":
        """Locate each observation time in the grid, requiring exact membership."""
        times = np.asarray(times, dtype=float)
        obs_times = np.asarray(obs_times, dtype=float)
        idx = np.searchsorted(times, obs_times)
        ok = (idx < times.size) & (times[np.minimum(idx, times.size - 1)] == obs_times)
        if not np.all(ok):
            bad = obs_times[~ok]
            raise ValueError(f"observation times not exact members of the grid: {bad[:3]}")
        return cls(times=times, obs_index=idx)

    @property
    def size(self) -> int:
        return self.times.size


@dataclass
class MagiState:
    """One point of the joint sampling space."""

    x: np.ndarray  # M x D latent trajectory values
    theta: np.ndarray  # P
    log_sigma: np.ndarray  # one entry per observed component

    def copy(self) -> "MagiState":
        return MagiState(self.x.copy(), self.theta.copy(), self.log_sigma.copy())


class MagiProblem:
    """Immutable bundle of model, grid, data and per-component kernel matrices."""

    def __init__(
        self,
        model: OdeModel,
        grid: DiscretizationGrid,
        observations: ObservationSet,
        kernels: list[GpKernelMats],
        noise_sd_init: dict[int, float] | None = None,
    ):
        if len(kernels) != model.state_dim:
            raise ValueError("need one kernel bundle per state component")
        for km in kernels:
            if km.grid.size != grid.size or not np.array_equal(km.grid, grid.times):
                raise ValueError("all kernel bundles must live on the problem grid")
        if observations.n_components != model.state_dim:
            raise ValueError("observation set dimensionality mismatch")
        self.model = model
        self.grid = grid
        self.observations = observations
        self.kernels = kernels
        self.observed = observations.observed_components()
        self.noise_sd_init = dict(noise_sd_init or {})

        m_sz = grid.size
        d = model.state_dim
        self.mu = np.array([km.hyper.mean for km in kernels])
        self.Kinv = np.stack([km.Kinv() for km in kernels])  # (D, M, M)
        self.Cinv = np.stack([km.Cinv() for km in kernels])
        self.mmat = np.stack([km.m for km in kernels])
        self.mmat_T = np.ascontiguousarray(self.mmat.transpose(0, 2, 1))
        # Lower Cholesky factors of K: the sampler works in whitened
        # coordinates q with x = mu + L q, so the GP prior is isotropic.
        self.Lmat = np.stack([np.tril(km.chol_K[0]) for km in kernels])

        # Per observed component: grid rows with usable data and the values.
        self.obs_rows: list[np.ndarray] = []
        self.obs_vals: list[np.ndarray] = []
        self.obs_counts: list[int] = []
        for c in self.observed:
            col = observations.values[:, c]
            keep = ~np.isnan(col)
            self.obs_rows.append(grid.obs_index[keep])
            self.obs_vals.append(col[keep])
            self.obs_counts.append(int(keep.sum()))

        lo = np.array([b[0] for b in model.theta_box])
        hi = np.array([b[1] for b in model.theta_box])
        self.theta_lo, self.theta_hi = lo, hi
        self.dim = m_sz * d + model.param_dim + len(self.observed)

        # Flattened observation layout for the compiled fast path.
        self.obs_rows_flat = (
            np.concatenate(self.obs_rows) if self.obs_rows else np.empty(0, dtype=np.int64)
        ).astype(np.int64)
        self.obs_vals_flat = (
            np.concatenate(self.obs_vals) if self.obs_vals else np.empty(0)
        ).astype(float)
        self.obs_offsets = np.concatenate([[0], np.cumsum(self.obs_counts)]).astype(np.int64)
        self.obs_comps = np.asarray(self.observed, dtype=np.int64)

    # -- state packing -----------------------------------------------------

    def pack(self, state: MagiState) -> np.ndarray:
        return np.concatenate([state.x.ravel(), state.theta, state.log_sigma])

    def unpack(self, flat: np.ndarray) -> MagiState:
        m, d, p = self.grid.size, self.model.state_dim, self.model.param_dim
        x = flat[: m * d].reshape(m, d)
        theta = flat[m * d : m * d + p]
        log_sigma = flat[m * d + p :]
        return MagiState(x=x, theta=theta, log_sigma=log_sigma)

    def whiten(self, state: MagiState) -> np.ndarray:
        """Pack a state with the trajectory block in whitened coordinates."""
        from scipy.linalg import solve_triangular

        q = np.empty_like(state.x)
        for c in range(self.model.state_dim):
            q[:, c] = solve_triangular(self.Lmat[c], state.x[:, c] - self.mu[c], lower=True)
        return np.concatenate([q.ravel(), state.theta, state.log_sigma])

    def unwhiten_draws(self, draws: np.ndarray) -> np.ndarray:
        """Map whitened draws back to trajectory space (in place on a copy)."""
        m, d = self.grid.size, self.model.state_dim
        out = draws.copy()
        q = draws[:, : m * d].reshape(-1, m, d)
        x = np.empty_like(q)
        for c in range(d):
            x[:, :, c] = q[:, :, c] @ self.Lmat[c].T + self.mu[c]
        out[:, : m * d] = x.reshape(draws.shape[0], m * d)
        return out

    def coordinate_names(self) -> list[str]:
        names = [
            f"x[{self.model.component_names[c]},{i}]"
            for i in range(self.grid.size)
            for c in range(self.model.state_dim)
        ]
        names += [f"theta[{p}]" for p in self.model.param_names]
        names += [f"log_sigma[{self.model.component_names[c]}]" for c in self.observed]
        return names


def make_problem(
    model: OdeModel,
    grid: DiscretizationGrid,
    observations: ObservationSet,
    fits: dict[int, GpFit],
) -> MagiProblem:
    """Assemble kernel bundles from per-component hyperparameter fits."""
    kernels = []
    noise_init = {}
    for c in range(model.state_dim):
        if c not in fits:
            raise ValueError(f"missing hyperparameter fit for component {c}")
        kernels.append(build_kernel_mats(fits[c].hyper, grid.times))
        noise_init[c] = fits[c].noise_sd
    return MagiProblem(model, grid, observations, kernels, noise_sd_init=noise_init)


# ---------------------------------------------------------------------------
# Log-posterior and analytic gradient
# ---------------------------------------------------------------------------


def _compiled_ctx(problem: MagiProblem) -> tuple:
    return (
        _fast.MODEL_IDS[problem.model.name],
        problem.mu,
        problem.Kinv,
        problem.Cinv,
        problem.mmat,
        problem.obs_rows_flat,
        problem.obs_vals_flat,
        problem.obs_offsets,
        problem.obs_comps,
        problem.theta_lo,
        problem.theta_hi,
        np.array([LOG_SIGMA_LO, LOG_SIGMA_HI]),
    )


def _compiled_ctx_whitened(problem: MagiProblem) -> tuple:
    return (
        _fast.MODEL_IDS[problem.model.name],
        problem.mu,
        problem.Lmat,
        problem.Cinv,
        problem.mmat,
        problem.obs_rows_flat,
        problem.obs_vals_flat,
        problem.obs_offsets,
        problem.obs_comps,
        problem.theta_lo,
        problem.theta_hi,
        np.array([LOG_SIGMA_LO, LOG_SIGMA_HI]),
    )


def make_sampler_target(problem: MagiProblem):
    """Sampler-ready whitened log density: compiled when the model supports it."""
    from .sampler import CompiledTarget

    if _fast.NUMBA_OK and problem.model.name in _fast.MODEL_IDS:
        return CompiledTarget(func=_fast.magi_value_grad_whitened,
                              ctx=_compiled_ctx_whitened(problem))
    return make_logdensity_whitened(problem)


def make_logdensity_whitened(problem: MagiProblem):
    """Numpy reference for the whitened target (used for non-builtin models)."""
    model = problem.model
    m_sz, d, p = problem.grid.size, model.state_dim, model.param_dim
    times = problem.grid.times
    mu, Lmat = problem.mu, problem.Lmat
    Cinv, mmat, mmat_T = problem.Cinv, problem.mmat, problem.mmat_T
    observed = problem.observed
    obs_rows, obs_vals, obs_counts = problem.obs_rows, problem.obs_vals, problem.obs_counts
    theta_lo, theta_hi = problem.theta_lo, problem.theta_hi

    def logdensity_and_grad(flat: np.ndarray) -> tuple[float, np.ndarray]:
        q = flat[: m_sz * d].reshape(m_sz, d).T  # (D, M)
        theta = flat[m_sz * d : m_sz * d + p]
        log_sigma = flat[m_sz * d + p :]
        if (
            np.any(theta < theta_lo)
            or np.any(theta > theta_hi)
            or np.any(log_sigma < LOG_SIGMA_LO)
            or np.any(log_sigma > LOG_SIGMA_HI)
        ):
            return -np.inf, np.zeros_like(flat)

        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            xc = np.matmul(Lmat, q[:, :, None])[:, :, 0]  # (D, M)
            x = xc.T + mu
            gp_term = float(np.sum(q * q))

            fvals = model.rhs(x, theta, times)
            gdot = np.matmul(mmat, xc[:, :, None])[:, :, 0]
            resid = fvals.T - gdot
            b = np.matmul(Cinv, resid[:, :, None])[:, :, 0]
            mech_term = float(np.sum(resid * b))

            obs_term = 0.0
            norm_term = 0.0
            sig2 = np.exp(2.0 * log_sigma)
            sse = np.empty(len(observed))
            for j, c in enumerate(observed):
                diff = obs_vals[j] - x[obs_rows[j], c]
                sse[j] = float(diff @ diff)
                obs_term += sse[j] / sig2[j]
                norm_term += obs_counts[j] * log_sigma[j]

            value = -0.5 * (gp_term + obs_term + mech_term) - norm_term
            if not np.isfinite(value):
                return -np.inf, np.zeros_like(flat)

            jac_x = model.jac_state(x, theta, times)
            jac_t = model.jac_param(x, theta, times)
            gx = -np.einsum("cm,mcd->md", b, jac_x)
            gx += np.matmul(mmat_T, b[:, :, None])[:, :, 0].T
            for j, c in enumerate(observed):
                rows = obs_rows[j]
                gx[rows, c] += (obs_vals[j] - x[rows, c]) / sig2[j]

            gq = np.matmul(Lmat.transpose(0, 2, 1), gx.T[:, :, None])[:, :, 0] - q
            grad_theta = -np.einsum("cm,mcp->p", b, jac_t)
            grad_sigma = sse / sig2 - np.asarray(obs_counts, dtype=float)
            grad = np.concatenate([gq.T.ravel(), grad_theta, grad_sigma])
            if not np.all(np.isfinite(grad)):
                return -np.inf, np.zeros_like(flat)
            return value, grad

    return logdensity_and_grad


def make_logdensity(problem: MagiProblem, force_numpy: bool = False):
    """Build a (log density, gradient) callable over the packed state.

    Built-in models get a compiled kernel; anything else (or
    ``force_numpy``) uses the vectorized numpy reference implementation.
    The two agree to floating-point round-off (asserted in the test suite).
    """
    if not force_numpy and _fast.NUMBA_OK and problem.model.name in _fast.MODEL_IDS:
        ctx = _compiled_ctx(problem)

        def fast_logdensity(flat: np.ndarray) -> tuple[float, np.ndarray]:
            return _fast.magi_value_grad(flat, ctx)

        return fast_logdensity
    model = problem.model
    m_sz = problem.grid.size
    d = model.state_dim
    p = model.param_dim
    times = problem.grid.times
    mu = problem.mu
    Kinv, Cinv = problem.Kinv, problem.Cinv
    mmat, mmat_T = problem.mmat, problem.mmat_T
    observed = problem.observed
    obs_rows, obs_vals, obs_counts = problem.obs_rows, problem.obs_vals, problem.obs_counts
    theta_lo, theta_hi = problem.theta_lo, problem.theta_hi

    def logdensity_and_grad(flat: np.ndarray) -> tuple[float, np.ndarray]:
        x = flat[: m_sz * d].reshape(m_sz, d)
        theta = flat[m_sz * d : m_sz * d + p]
        log_sigma = flat[m_sz * d + p :]

        if (
            np.any(theta < theta_lo)
            or np.any(theta > theta_hi)
            or np.any(log_sigma < LOG_SIGMA_LO)
            or np.any(log_sigma > LOG_SIGMA_HI)
        ):
            return -np.inf, np.zeros_like(flat)

        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            xc = (x - mu).T  # (D, M) centered
            a = np.matmul(Kinv, xc[:, :, None])[:, :, 0]  # K^{-1} (x - mu)
            gp_term = float(np.sum(xc * a))

            fvals = model.rhs(x, theta, times)  # (M, D)
            gdot = np.matmul(mmat, xc[:, :, None])[:, :, 0]  # conditional mean derivative
            resid = fvals.T - gdot  # (D, M)
            b = np.matmul(Cinv, resid[:, :, None])[:, :, 0]
            mech_term = float(np.sum(resid * b))

            obs_term = 0.0
            norm_term = 0.0
            sig2 = np.exp(2.0 * log_sigma)
            sse = np.empty(len(observed))
            for j, c in enumerate(observed):
                diff = obs_vals[j] - x[obs_rows[j], c]
                sse[j] = float(diff @ diff)
                obs_term += sse[j] / sig2[j]
                norm_term += obs_counts[j] * log_sigma[j]

            value = -0.5 * (gp_term + obs_term + mech_term) - norm_term
            if not np.isfinite(value):
                return -np.inf, np.zeros_like(flat)

            jac_x = model.jac_state(x, theta, times)  # (M, D, D)
            jac_t = model.jac_param(x, theta, times)  # (M, D, P)

            grad_x = -a.T  # GP prior part, (M, D)
            # Mechanistic part: rhs Jacobian couples components at each grid
            # point; the gradient-predictor couples grid points per component.
            grad_x -= np.einsum("cm,mcd->md", b, jac_x)
            grad_x += np.matmul(mmat_T, b[:, :, None])[:, :, 0].T
            for j, c in enumerate(observed):
                rows = obs_rows[j]
                grad_x[rows, c] += (obs_vals[j] - x[rows, c]) / sig2[j]

            grad_theta = -np.einsum("cm,mcp->p", b, jac_t)
            grad_sigma = sse / sig2 - np.asarray(obs_counts, dtype=float)

            grad = np.concatenate([grad_x.ravel(), grad_theta, grad_sigma])
            if not np.all(np.isfinite(grad)):
                return -np.inf, np.zeros_like(flat)
            return value, grad

    return logdensity_and_grad


def log_posterior(problem: MagiProblem, state: MagiState) -> float:
    """Joint log posterior up to an additive constant; -inf when non-finite."""
    value, _ = make_logdensity(problem)(problem.pack(state))
    return value


def log_posterior_grad(problem: MagiProblem, state: MagiState) -> np.ndarray:
    """Analytic gradient over (x, theta, log_sigma), packed like the state."""
    _, grad = make_logdensity(problem)(problem.pack(state))
    return grad


def gp_gradient_estimate(problem: MagiProblem, x: np.ndarray) -> np.ndarray:
    """Conditional-mean GP derivative m (x - mu) per component, (M, D)."""
    xc = (x - problem.mu).T
    return np.matmul(problem.mmat, xc[:, :, None])[:, :, 0].T


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InitResult:
    x: np.ndarray  # M x D
    theta: np.ndarray  # P
    flag: str | None = None


def _interp_and_smooth(obs_t: np.ndarray, obs_y: np.ndarray, grid_t: np.ndarray) -> np.ndarray:
    """Linear interpolation onto the grid, then GCV cubic-spline smoothing."""
    linear = np.interp(grid_t, obs_t, obs_y)
    if obs_t.size < 5:
        return linear
    try:
        spline = make_smoothing_spline(obs_t, obs_y)
        inside = (grid_t >= obs_t[0]) & (grid_t <= obs_t[-1])
        out = linear.copy()
        out[inside] = spline(grid_t[inside])
        return out
    except Exception:  # degenerate data; linear interp is an acceptable fallback
        return linear


def _diff_matrices(times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dense centered first- and second-difference operators on the grid."""
    m = times.size
    d1 = np.zeros((m, m))
    d2 = np.zeros((m, m))
    h = np.diff(times)
    d1[0, 0], d1[0, 1] = -1.0 / h[0], 1.0 / h[0]
    d1[-1, -2], d1[-1, -1] = -1.0 / h[-1], 1.0 / h[-1]
    for i in range(1, m - 1):
        span = times[i + 1] - times[i - 1]
        d1[i, i - 1], d1[i, i + 1] = -1.0 / span, 1.0 / span
        hm, hp = h[i - 1], h[i]
        denom = 0.5 * hm * hp * (hm + hp)
        d2[i, i - 1] = hp / denom
        d2[i, i] = -(hm + hp) / denom
        d2[i, i + 1] = hm / denom
    if m > 2:
        d2[0] = d2[1]
        d2[-1] = d2[-2]
    return d1, d2


def init_missing_components(
    model: OdeModel,
    grid: DiscretizationGrid,
    observations: ObservationSet,
    n_iter: int = 3000,
    lr: float = 0.01,
    curvature_weight: float = 1e-3,
) -> InitResult:
    """Initial trajectories and parameters for the sampler.

    Observed components come from spline-smoothed interpolation of their
    data.  Missing components and theta are then estimated jointly by
    matching finite-difference trajectory derivatives to the ODE right-hand
    side, with a curvature penalty keeping the free trajectories smooth.
    """
    observed = observations.observed_components()
    if not observed:
        raise ValueError("at least one component must be observed")
    times = grid.times
    m_sz, d, p = times.size, model.state_dim, model.param_dim
    missing = [c for c in range(d) if c not in observed]

    x0 = np.zeros((m_sz, d))
    for c in observed:
        obs_t, obs_y = observations.component_values(c)
        x0[:, c] = _interp_and_smooth(obs_t, obs_y, times)

    fallback_level = float(np.mean([x0[:, c].mean() for c in observed]))
    for c in missing:
        x0[:, c] = fallback_level

    d1, d2 = _diff_matrices(times)
    pos = np.asarray(model.positive_params, dtype=bool)
    theta0 = np.ones(p)

    # Optimize (missing trajectory block, theta); positivity-constrained
    # parameters move on log scale.
    u_theta = np.where(pos, np.log(theta0), theta0)
    free_x = x0[:, missing].copy() if missing else np.zeros((m_sz, 0))

    def objective_and_grads(free_block, u_th):
        theta = np.where(pos, np.exp(u_th), u_th)
        x = x0.copy()
        if missing:
            x[:, missing] = free_block
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            xdot = d1 @ x
            fvals = model.rhs(x, theta, times)
            resid = xdot - fvals
            obj = float(np.sum(resid * resid))
            g_theta_raw = -2.0 * np.einsum("mc,mcp->p", resid, model.jac_param(x, theta, times))
            if missing:
                jac_x = model.jac_state(x, theta, times)
                g_free = 2.0 * (d1.T @ resid[:, missing])
                g_free -= 2.0 * np.einsum("mc,mcd->md", resid, jac_x)[:, missing]
                curv = d2 @ free_block
                obj += curvature_weight * float(np.sum(curv * curv))
                g_free += 2.0 * curvature_weight * (d2.T @ curv)
            else:
                g_free = np.zeros((m_sz, 0))
        g_u = np.where(pos, g_theta_raw * theta, g_theta_raw)
        return obj, g_free, g_u

    adam = Adam([free_x, u_theta], lr=lr)
    ok = True
    for _ in range(n_iter):
        obj, g_free, g_u = objective_and_grads(free_x, u_theta)
        if not np.isfinite(obj) or not np.all(np.isfinite(g_u)) or not np.all(np.isfinite(g_free)):
            ok = False
            break
        free_x, u_theta = adam.step([free_x, u_theta], [g_free, g_u])

    if not ok:
        warnings.warn("gradient-matching initializer diverged; using constant fallback")
        x = x0.copy()
        for c in missing:
            x[:, c] = fallback_level
        return InitResult(x=x, theta=np.ones(p), flag="init-fallback-constant")

    theta = np.where(pos, np.exp(u_theta), u_theta)
    theta = np.clip(theta, [b[0] for b in model.theta_box], [b[1] for b in model.theta_box])
    x = x0.copy()
    if missing:
        x[:, missing] = free_x
    return InitResult(x=x, theta=theta, flag=None)


# ---------------------------------------------------------------------------
# Posterior samples container
# ---------------------------------------------------------------------------


@dataclass
class PosteriorSamples:
    """Post-warmup draws over the packed state plus ready-made summaries."""

    grid_times: np.ndarray
    component_names: tuple[str, ...]
    param_names: tuple[str, ...]
    sigma_components: tuple[str, ...]
    draws: np.ndarray  # n_samples x dim
    x_mean: np.ndarray  # M x D
    theta_mean: np.ndarray
    theta_ci: np.ndarray  # P x 2 equal-tailed 95%
    sigma_mean: np.ndarray
    seed: int
    config_hash: str = ""
    flags: tuple[str, ...] = ()
    step_size: float = float("nan")
    divergence_count: int = 0
    x_deriv_mean: np.ndarray | None = None  # GP-derivative estimate at x_mean

    @property
    def n_samples(self) -> int:
        return self.draws.shape[0]

    def x_draws(self) -> np.ndarray:
        m, d = self.grid_times.size, len(self.component_names)
        return self.draws[:, : m * d].reshape(-1, m, d)

    def theta_draws(self) -> np.ndarray:
        m, d = self.grid_times.size, len(self.component_names)
        p = len(self.param_names)
        return self.draws[:, m * d : m * d + p]

    def save(self, prefix: str) -> None:
        """Write draws as flat doubles plus a JSON sidecar and summary CSV."""
        self.draws.astype(np.float64).tofile(f"{prefix}.bin")
        m, d = self.grid_times.size, len(self.component_names)
        sidecar = {
            "n_samples": int(self.draws.shape[0]),
            "dim": int(self.draws.shape[1]),
            "grid_size": int(m),
            "state_dim": int(d),
            "component_names": list(self.component_names),
            "param_names": list(self.param_names),
            "sigma_components": list(self.sigma_components),
            "grid_times": [float(t) for t in self.grid_times],
            "seed": int(self.seed),
            "config_hash": self.config_hash,
            "flags": list(self.flags),
            "step_size": float(self.step_size),
            "divergence_count": int(self.divergence_count),
        }
        with open(f"{prefix}.json", "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
        with open(f"{prefix}_summary.csv", "w") as fh:
            fh.write("kind,name,time,mean,q025,q975\n")
            x_draws = self.x_draws()
            lo = np.quantile(x_draws, 0.025, axis=0)
            hi = np.quantile(x_draws, 0.975, axis=0)
            for i, t in enumerate(self.grid_times):
                for c, name in enumerate(self.component_names):
                    fh.write(
                        f"x,{name},{t:.17g},{self.x_mean[i, c]:.17g},"
                        f"{lo[i, c]:.17g},{hi[i, c]:.17g}\n"
                    )
            for j, name in enumerate(self.param_names):
                fh.write(
                    f"theta,{name},,{self.theta_mean[j]:.17g},"
                    f"{self.theta_ci[j, 0]:.17g},{self.theta_ci[j, 1]:.17g}\n"
                )
            sig_draws = np.exp(self.draws[:, -len(self.sigma_components):]) \
                if self.sigma_components else np.empty((self.n_samples, 0))
            for j, name in enumerate(self.sigma_components):
                fh.write(
                    f"sigma,{name},,{self.sigma_mean[j]:.17g},"
                    f"{np.quantile(sig_draws[:, j], 0.025):.17g},"
                    f"{np.quantile(sig_draws[:, j], 0.975):.17g}\n"
                )

    @classmethod
    def load(cls, prefix: str) -> "PosteriorSamples":
        with open(f"{prefix}.json") as fh:
            meta = json.load(fh)
        draws = np.fromfile(f"{prefix}.bin", dtype=np.float64).reshape(
            meta["n_samples"], meta["dim"])
        grid_times = np.asarray(meta["grid_times"])
        return _summarize(
            draws,
            grid_times,
            tuple(meta["component_names"]),
            tuple(meta["param_names"]),
            tuple(meta["sigma_components"]),
            seed=meta["seed"],
            config_hash=meta.get("config_hash", ""),
            flags=tuple(meta.get("flags", ())),
            step_size=meta.get("step_size", float("nan")),
            divergence_count=meta.get("divergence_count", 0),
        )


def _summarize(draws, grid_times, component_names, param_names, sigma_components,
               seed, config_hash="", flags=(), step_size=float("nan"),
               divergence_count=0, x_deriv_mean=None) -> PosteriorSamples:
    m, d = grid_times.size, len(component_names)
    p = len(param_names)
    x_mean = draws[:, : m * d].mean(axis=0).reshape(m, d)
    theta_draws = draws[:, m * d : m * d + p]
    theta_mean = theta_draws.mean(axis=0)
    theta_ci = np.column_stack([
        np.quantile(theta_draws, 0.025, axis=0),
        np.quantile(theta_draws, 0.975, axis=0),
    ])
    sigma_mean = (
        np.exp(draws[:, m * d + p :]).mean(axis=0)
        if sigma_components else np.empty(0)
    )
    return PosteriorSamples(
        grid_times=grid_times,
        component_names=component_names,
        param_names=param_names,
        sigma_components=sigma_components,
        draws=draws,
        x_mean=x_mean,
        theta_mean=theta_mean,
        theta_ci=theta_ci,
        sigma_mean=sigma_mean,
        seed=seed,
        config_hash=config_hash,
        flags=flags,
        step_size=step_size,
        divergence_count=divergence_count,
        x_deriv_mean=x_deriv_mean,
    )


# ---------------------------------------------------------------------------
# Inference drivers
# ---------------------------------------------------------------------------

DIVERGENCE_WARN_RATE = 0.25


def replace_draws(chain: ChainResult, draws: np.ndarray) -> ChainResult:
    from dataclasses import replace as _dc_replace

    return _dc_replace(chain, draws=draws)


def _initial_log_sigma(problem: MagiProblem) -> np.ndarray:
    vals = []
    for c in problem.observed:
        sd = problem.noise_sd_init.get(c, 0.1)
        vals.append(math.log(min(max(sd, 2e-6), 5e2)))
    return np.array(vals)


def run_inference(
    problem: MagiProblem,
    init: InitResult,
    n_warmup: int = 3000,
    n_samples: int = 3000,
    seed: int = 0,
    config_hash: str = "",
) -> PosteriorSamples:
    """NUTS over the full joint state; returns draws plus posterior summaries."""
    log_sigma = _initial_log_sigma(problem)
    state = MagiState(x=np.asarray(init.x, dtype=float), theta=np.asarray(init.theta, dtype=float),
                      log_sigma=log_sigma)
    value, _ = make_logdensity(problem)(problem.pack(state))
    if not np.isfinite(value):
        raise ValueError("log posterior is not finite at the initial state")

    config = NutsConfig(n_warmup=n_warmup, n_samples=n_samples, seed=seed)
    chain: ChainResult = nuts_sample(make_sampler_target(problem), problem.whiten(state), config)
    chain = replace_draws(chain, problem.unwhiten_draws(chain.draws))

    flags = list(init.flag.split() if init.flag else [])
    if chain.divergence_rate > DIVERGENCE_WARN_RATE:
        flags.append(f"high-divergence-rate:{chain.divergence_rate:.2f}")
        warnings.warn(
            f"NUTS divergence rate {chain.divergence_rate:.1%} exceeds "
            f"{DIVERGENCE_WARN_RATE:.0%}; treat this run with suspicion")

    post = _summarize(
        chain.draws,
        problem.grid.times,
        problem.model.component_names,
        problem.model.param_names,
        tuple(problem.model.component_names[c] for c in problem.observed),
        seed=seed,
        config_hash=config_hash,
        flags=tuple(flags),
        step_size=chain.step_size,
        divergence_count=chain.divergence_count,
    )
    post.x_deriv_mean = gp_gradient_estimate(problem, post.x_mean)
    return post


def prepare_fits(
    model: OdeModel,
    grid: DiscretizationGrid,
    observations: ObservationSet,
    use_fourier_prior: bool,
    init: InitResult,
) -> dict[int, GpFit]:
    """Hyperparameter fits: observed components from their data, missing
    components from the gradient-matched interpolant on the grid."""
    fits: dict[int, GpFit] = {}
    for c in range(model.state_dim):
        if observations.mask[c]:
            obs_t, obs_y = observations.component_values(c)
            fits[c] = gp_smooth_fit(obs_t, obs_y, use_fourier_prior=use_fourier_prior)
        else:
            fits[c] = gp_smooth_fit(grid.times, init.x[:, c],
                                    use_fourier_prior=use_fourier_prior)
    return fits


def forecast_extended_grid(
    model: OdeModel,
    full_times: np.ndarray,
    n_insample: int,
    observations: ObservationSet,
    use_fourier_prior: bool = False,
    n_warmup: int = 3000,
    n_samples: int = 3000,
    seed: int = 0,
    init_budget: int = 3000,
    config_hash: str = "",
) -> PosteriorSamples:
    """Joint inference over the observation window plus a forecast horizon.

    The discretization grid simply extends past the data; the forecast
    segment of the initial trajectory is continued by numerical integration
    from the in-sample initializer.
    """
    full_times = np.asarray(full_times, dtype=float)
    insample = DiscretizationGrid.build(full_times[:n_insample], observations.times)
    init_in = init_missing_components(model, insample, observations, n_iter=init_budget)

    x_full = np.empty((full_times.size, model.state_dim))
    x_full[:n_insample] = init_in.x
    tail_times = full_times[n_insample - 1 :]
    try:
        tail = integrate_rk45(model, init_in.x[-1], init_in.theta, tail_times)
        x_full[n_insample:] = tail.values[1:]
        flag = init_in.flag
    except IntegrationError:
        x_full[n_insample:] = init_in.x[-1]
        flag = "forecast-init-constant" if init_in.flag is None else init_in.flag
    init_full = InitResult(x=x_full, theta=init_in.theta, flag=flag)

    fits = prepare_fits(model, insample, observations, use_fourier_prior, init_in)
    grid_full = DiscretizationGrid.build(full_times, observations.times)
    problem = make_problem(model, grid_full, observations, fits)
    return run_inference(problem, init_full, n_warmup=n_warmup, n_samples=n_samples,
                         seed=seed, config_hash=config_hash)


def fit_magi(
    model: OdeModel,
    times: np.ndarray,
    observations: ObservationSet,
    use_fourier_prior: bool = False,
    n_warmup: int = 3000,
    n_samples: int = 3000,
    seed: int = 0,
    init_budget: int = 3000,
    config_hash: str = "",
) -> PosteriorSamples:
    """In-sample protocol: initialize, fit hyperparameters, sample."""
    grid = DiscretizationGrid.build(np.asarray(times, dtype=float), observations.times)
    init = init_missing_components(model, grid, observations, n_iter=init_budget)
    fits = prepare_fits(model, grid, observations, use_fourier_prior, init)
    problem = make_problem(model, grid, observations, fits)
    return run_inference(problem, init, n_warmup=n_warmup, n_samples=n_samples,
                         seed=seed, config_hash=config_hash)


@dataclass(frozen=True)
class SequentialStage:
    grid_size: int
    samples: PosteriorSamples


def forecast_sequential(
    model: OdeModel,
    full_times: np.ndarray,
    n_insample: int,
    points_per_step: int,
    observations: ObservationSet,
    use_fourier_prior: bool = True,
    n_warmup: int = 3000,
    n_samples: int = 3000,
    seed: int = 0,
    init_budget: int = 3000,
    config_hash: str = "",
) -> tuple[PosteriorSamples, list[SequentialStage]]:
    """Stepwise horizon extension with warm starts between stages.

    Each stage appends ``points_per_step`` grid points; the old segment is
    warm-started from the previous chain's final draw, the new segment by
    integrating forward from the boundary state, and kernel hyperparameters
    are refit on the last unit interval of the previous posterior mean.
    """
    full_times = np.asarray(full_times, dtype=float)
    if (full_times.size - n_insample) % points_per_step != 0:
        raise ValueError("forecast points must be a whole number of steps")
    n_steps = (full_times.size - n_insample) // points_per_step

    seed_seq = np.random.SeedSequence(seed)
    stage_seeds = [int(s.generate_state(1)[0]) for s in seed_seq.spawn(n_steps + 1)]

    grid0 = DiscretizationGrid.build(full_times[:n_insample], observations.times)
    init0 = init_missing_components(model, grid0, observations, n_iter=init_budget)
    fits = prepare_fits(model, grid0, observations, use_fourier_prior, init0)
    problem = make_problem(model, grid0, observations, fits)
    samples = run_inference(problem, init0, n_warmup=n_warmup, n_samples=n_samples,
                            seed=stage_seeds[0], config_hash=config_hash)
    stages = [SequentialStage(grid_size=n_insample, samples=samples)]

    for step in range(1, n_steps + 1):
        prev_len = n_insample + (step - 1) * points_per_step
        new_len = prev_len + points_per_step
        times_new = full_times[:new_len]

        last = problem.unpack(samples.draws[-1])
        x_init = np.empty((new_len, model.state_dim))
        x_init[:prev_len] = last.x
        flag = None
        seg_times = full_times[prev_len - 1 : new_len]
        try:
            seg = integrate_rk45(model, last.x[-1], last.theta, seg_times)
            x_init[prev_len:] = seg.values[1:]
        except IntegrationError:
            x_init[prev_len:] = last.x[-1]
            flag = "forecast-warmstart-constant"
            warnings.warn("warm-start integration failed; extrapolating the boundary state")

        # Refit hyperparameters on the final unit interval of the previous
        # posterior mean (the freshest dynamics the chain has committed to).
        span = full_times[prev_len - 1] - full_times[0]
        per_unit = int(round((prev_len - 1) / span)) if span > 0 else prev_len - 1
        tail_lo = max(0, prev_len - 1 - per_unit)
        fits = {}
        for c in range(model.state_dim):
            fits[c] = gp_smooth_fit(
                full_times[tail_lo:prev_len],
                samples.x_mean[tail_lo:prev_len, c],
                use_fourier_prior=use_fourier_prior,
            )

        grid_new = DiscretizationGrid.build(times_new, observations.times)
        problem = make_problem(model, grid_new, observations, fits)
        init = InitResult(x=x_init, theta=last.theta.copy(), flag=flag)

        log_sigma = last.log_sigma.copy()
        state = MagiState(x=x_init, theta=init.theta, log_sigma=log_sigma)
        value, _ = make_logdensity(problem)(problem.pack(state))
        if not np.isfinite(value):
            raise ValueError(f"non-finite posterior at warm start of stage {step}")
        config = NutsConfig(n_warmup=n_warmup, n_samples=n_samples, seed=stage_seeds[step])
        chain = nuts_sample(make_sampler_target(problem), problem.whiten(state), config)
        chain = replace_draws(chain, problem.unwhiten_draws(chain.draws))
        flags = [flag] if flag else []
        if chain.divergence_rate > DIVERGENCE_WARN_RATE:
            flags.append(f"high-divergence-rate:{chain.divergence_rate:.2f}")
        samples = _summarize(
            chain.draws, times_new, model.component_names, model.param_names,
            tuple(model.component_names[c] for c in problem.observed),
            seed=stage_seeds[step], config_hash=config_hash, flags=tuple(flags),
            step_size=chain.step_size, divergence_count=chain.divergence_count,
        )
        samples.x_deriv_mean = gp_gradient_estimate(problem, samples.x_mean)
        stages.append(SequentialStage(grid_size=new_len, samples=samples))

    return samples, stages
