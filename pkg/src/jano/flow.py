"""Closed-form rectified-flow machinery.

Targets are isotropic Gaussian mixtures (point masses when the variance is
zero), so the optimal velocity field has an exact expression and no network
is needed to test claims about it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidInputError, NumericError, SingularityError

T_EPS = 1e-4


@dataclass(frozen=True)
class MixtureTarget:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    variances: np.ndarray  # (k,) isotropic per component

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_1d(np.asarray(self.variances, dtype=np.float64))
        if w.size < 1:
            raise InvalidInputError("mixture needs at least one component")
        if mu.shape[0] != w.size or var.size != w.size:
            raise InvalidInputError("weights, means and variances disagree on component count")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidInputError(f"weights must be non-negative and sum to 1, got {w.sum()!r}")
        if np.any(var < 0):
            raise InvalidInputError("component variances must be >= 0")
        for name, val in (("weights", w), ("means", mu), ("variances", var)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @classmethod
    def point_mass(cls, mu):
        mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
        return cls(np.ones(1), mu[None, :], np.zeros(1))

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.size

    def sample(self, n, rng):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * z, comp


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), d)
    x0: np.ndarray
    component: int | None = None

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise InvalidInputError("times and states differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise InvalidInputError("trajectory times must be strictly increasing")


def _same_dim(*points):
    arrs = [np.asarray(p, dtype=np.float64) for p in points]
    if len({a.shape[-1] if a.ndim else 1 for a in arrs}) != 1:
        raise InvalidInputError(f"dimension mismatch: {[a.shape for a in arrs]}")
    return arrs


def interpolate(x0, x1, t):
    """Point on the straight path: ``t*x1 + (1-t)*x0``."""
    x0, x1 = _same_dim(x0, x1)
    if x0.shape != x1.shape:
        raise InvalidInputError(f"dimension mismatch: {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise InvalidInputError(f"t must lie in [0, 1], got {t}")
    return t * x1 + (1.0 - t) * x0


def posterior(target, x, scale, noise):
    """Posterior over components and E[x1 | x] for ``x = scale*x1 + noise*eps``.

    ``x`` may be a single point (d,) or a batch (n, d). Returns
    ``(weights, mean)`` with weights of shape (..., k).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != target.dim:
        raise InvalidInputError(f"point has dim {x.shape[-1]}, target has dim {target.dim}")
    d = target.dim
    # marginal variance of x given component i
    s2 = noise**2 + scale**2 * target.variances  # (k,)
    if np.any(s2 <= 0):
        raise SingularityError("degenerate path variance; posterior undefined")
    resid = x[..., None, :] - scale * target.means  # (..., k, d)
    sq = np.einsum("...kd,...kd->...k", resid, resid)
    with np.errstate(divide="ignore"):
        logw = np.log(target.weights) - sq / (2 * s2) - 0.5 * d * np.log(s2)
    logw = logw - logsumexp(logw, axis=-1, keepdims=True)
    w = np.exp(logw)
    gain = scale * target.variances / s2  # (k,)
    comp_mean = target.means + gain[:, None] * resid  # (..., k, d)
    mean = np.einsum("...k,...kd->...d", w, comp_mean)
    return w, mean


def oracle_velocity(target, x_t, t):
    """Optimal rectified-flow velocity ``(E[x1 | x_t] - x_t) / (1 - t)``."""
    if t > 1.0 - T_EPS:
        raise SingularityError(f"t={t} is within {T_EPS} of the singularity at t=1")
    if t < 0:
        raise InvalidInputError(f"t must be >= 0, got {t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    _, m = posterior(target, x_t, t, 1.0 - t)
    return (m - x_t) / (1.0 - t)


def euler_integrate(velocity_fn, x0, steps):
    """Plain Euler on the uniform grid ``t_k = k/steps``.

    The velocity is evaluated at ``min(t_k, 1 - T_EPS)``.
    """
    if steps < 1:
        raise InvalidInputError(f"steps must be >= 1, got {steps}")
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / steps
    times = np.arange(steps + 1) / steps
    states = [x.copy()]
    for k in range(steps):
        v = np.asarray(velocity_fn(x, min(times[k], 1.0 - T_EPS)), dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise NumericError("velocity field returned non-finite values", step=k)
        x = x + dt * v
        states.append(x.copy())
    return Trajectory(times, np.stack(states), np.array(x0, dtype=np.float64))


def latent_distance(vA, vB, x0A, x0B):
    """Signed distance ``||vA - vB|| - ||x0A - x0B||``; larger means diverging outcomes."""
    vA, vB, x0A, x0B = _same_dim(vA, vB, x0A, x0B)
    if not (vA.shape == vB.shape == x0A.shape == x0B.shape):
        raise InvalidInputError("all points must share one shape")
    return float(np.linalg.norm(vA - vB) - np.linalg.norm(x0A - x0B))


def velocity_constancy_profile(target, pairA, pairB, time_grid):
    """``||v*(x_tA, t) - v*(x_tB, t)||`` along two straight paths.

    Each pair is ``(x0, x1)``; positions follow :func:`interpolate`.
    """
    time_grid = np.asarray(time_grid, dtype=np.float64)
    if np.any(time_grid < 0) or np.any(time_grid > 0.9):
        raise InvalidInputError("time grid must lie within [0, 0.9]")
    x0A, x1A = pairA
    x0B, x1B = pairB
    out = np.empty(time_grid.size)
    for i, t in enumerate(time_grid):
        vA = oracle_velocity(target, interpolate(x0A, x1A, t), t)
        vB = oracle_velocity(target, interpolate(x0B, x1B, t), t)
        out[i] = np.linalg.norm(vA - vB)
    return out


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete affine path ``x = alpha[k]*x_data + sigma[k]*eps`` at ``times[k]``."""

    times: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        t, a, s = (np.asarray(v, dtype=np.float64) for v in (self.times, self.alpha, self.sigma))
        if not (t.shape == a.shape == s.shape) or t.ndim != 1:
            raise InvalidInputError("times, alpha and sigma must be 1-D arrays of equal length")
        if np.any(np.diff(t) <= 0):
            raise InvalidInputError("schedule times must be strictly increasing")
        if np.any(a**2 + s**2 > 4.0):
            raise InvalidInputError("alpha^2 + sigma^2 is unbounded")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "sigma", s)

    def __len__(self):
        return self.times.size

    @classmethod
    def from_functions(cls, alpha_fn, sigma_fn, times):
        times = np.asarray(times, dtype=np.float64)
        return cls(times, alpha_fn(times), sigma_fn(times))

    @classmethod
    def rectified(cls, n):
        t = np.linspace(0.0, 1.0, n)
        return cls(t, t, 1.0 - t)

    @classmethod
    def cosine(cls, n, t_max=0.999):
        """Trigonometric path ``alpha = sin(pi t/2)``, ``sigma = cos(pi t/2)``."""
        t = np.linspace(0.0, t_max, n)
        return cls(t, np.sin(0.5 * np.pi * t), np.cos(0.5 * np.pi * t))

    @classmethod
    def from_alphas_cumprod(cls, alphas_cumprod, times=None):
        """DDIM-style schedule from cumulative alphas ordered noise -> data."""
        abar = np.asarray(alphas_cumprod, dtype=np.float64)
        if times is None:
            times = np.linspace(0.0, 1.0, abar.size)
        return cls(times, np.sqrt(abar), np.sqrt(1.0 - abar))


def finite_diff_derivatives(schedule, index, forward=False):
    """Backward-difference ``(d alpha/dt, d sigma/dt)`` at ``index``."""
    k = int(index)
    n = len(schedule)
    if forward and k == 0:
        lo, hi = 0, 1
    else:
        if k < 1 or k >= n:
            raise InvalidInputError(f"index must satisfy 1 <= k < {n}, got {k}")
        lo, hi = k - 1, k
    dt = schedule.times[hi] - schedule.times[lo]
    return (
        (schedule.alpha[hi] - schedule.alpha[lo]) / dt,
        (schedule.sigma[hi] - schedule.sigma[lo]) / dt,
    )


def eps_to_v(eps_hat, x_t, schedule, index):
    """Convert an epsilon prediction into a flow-matching velocity."""
    k = int(index)
    if k < 1 or k >= len(schedule):
        raise InvalidInputError(f"index must satisfy 1 <= k < {len(schedule)}, got {k}")
    a, s = schedule.alpha[k], schedule.sigma[k]
    if a == 0:
        raise SingularityError(f"alpha is zero at index {k}")
    da, ds = finite_diff_derivatives(schedule, k)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    return (da / a) * x_t + (ds - da * s / a) * eps_hat


def oracle_eps(target, x, alpha, sigma):
    """MMSE noise prediction ``E[eps | x]`` for ``x = alpha*x_data + sigma*eps``."""
    if sigma == 0:
        raise SingularityError("sigma is zero; epsilon is not identifiable")
    _, m = posterior(target, x, alpha, sigma)
    return (np.asarray(x, dtype=np.float64) - alpha * m) / sigma


def oracle_schedule_velocity(target, x, alpha, sigma, dalpha, dsigma):
    """Exact ``E[dalpha*x_data + dsigma*eps | x]`` under an affine path."""
    _, m = posterior(target, x, alpha, sigma)
    eps = (np.asarray(x, dtype=np.float64) - alpha * m) / sigma
    return dalpha * m + dsigma * eps
