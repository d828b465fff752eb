"""Flow-matching core: interpolation schedules, the velocity-matching loss,
deterministic ODE sampling, and the stochastic sampler with Gaussian
per-step transition densities.

Conventions: time runs from t=1 (noise) down to t=0 (data); integration
steps use signed dt (negative toward t=0). A velocity model maps
(x_t, t, cond) -> v with the condition concatenated after a scalar time
feature.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import numkit
from .errors import DegenerateKernelError, DivergenceError, ShapeError
from .numkit import AdapterSet, Array, Grads, MlpParams


# ---------------------------------------------------------------------------
# schedules

@dataclass(frozen=True)
class Schedule:
    """Signal/noise coefficients alpha(t), sigma(t), their derivatives, and
    the per-sample loss weight w(t)."""

    name: str
    alpha: Callable[[Array], Array]
    sigma: Callable[[Array], Array]
    dalpha: Callable[[Array], Array]
    dsigma: Callable[[Array], Array]
    weight: Callable[[Array], Array] = field(default=lambda t: np.ones_like(t))

    def __post_init__(self):
        z = np.array(0.0)
        if not np.isclose(float(self.alpha(z)), 1.0) or not np.isclose(
            float(self.sigma(z)), 0.0
        ):
            raise ValueError(f"schedule {self.name!r} must satisfy alpha(0)=1, sigma(0)=0")


def rectified_schedule() -> Schedule:
    """alpha = 1 - t, sigma = t; velocity target is exactly x1 - x0."""
    return Schedule(
        name="rectified",
        alpha=lambda t: 1.0 - t,
        sigma=lambda t: np.asarray(t, dtype=np.float64) + 0.0,
        dalpha=lambda t: -np.ones_like(np.asarray(t, dtype=np.float64)),
        dsigma=lambda t: np.ones_like(np.asarray(t, dtype=np.float64)),
    )


def trig_schedule() -> Schedule:
    """alpha = cos(pi t / 2), sigma = sin(pi t / 2); exercises the general path."""
    h = np.pi / 2.0
    return Schedule(
        name="trig",
        alpha=lambda t: np.cos(h * t),
        sigma=lambda t: np.sin(h * t),
        dalpha=lambda t: -h * np.sin(h * t),
        dsigma=lambda t: h * np.cos(h * t),
    )


_SCHEDULES = {"rectified": rectified_schedule, "trig": trig_schedule}


def get_schedule(name: str, weight: str = "uniform") -> Schedule:
    try:
        base = _SCHEDULES[name]()
    except KeyError:
        raise ValueError(f"unknown schedule {name!r}") from None
    if weight == "uniform":
        return base
    if weight == "time":
        # w(t) = t turns the velocity error into the data-estimate error,
        # which trains noticeably sharper task models at this scale
        return replace(base, weight=lambda t: np.asarray(t, dtype=np.float64) + 0.0)
    raise ValueError(f"unknown weight {weight!r}")


# ---------------------------------------------------------------------------
# interpolation and batches

def interpolate(x0: Array, x1: Array, t, schedule: Schedule) -> tuple[Array, Array]:
    """Trajectory point x_t = alpha(t) x0 + sigma(t) x1 and its velocity
    v = alpha'(t) x0 + sigma'(t) x1, broadcast over a batch."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError("x0/x1 shape mismatch")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t outside [0, 1]")
    tc = t.reshape(-1, 1) if x0.ndim == 2 else t
    x_t = schedule.alpha(tc) * x0 + schedule.sigma(tc) * x1
    v = schedule.dalpha(tc) * x0 + schedule.dsigma(tc) * x1
    return x_t, v


@dataclass
class FlowBatch:
    """Paired training tuples for the velocity-matching loss."""

    x0: Array        # (B, D) data
    x1: Array        # (B, D) noise
    t: Array         # (B,)
    x_t: Array       # (B, D)
    v_target: Array  # (B, D)
    cond: Array      # (B, C); C may be 0


def make_flow_batch(x0: Array, x1: Array, t: Array, cond: Array,
                    schedule: Schedule) -> FlowBatch:
    x_t, v = interpolate(x0, x1, t, schedule)
    cond = np.asarray(cond, dtype=np.float64)
    if cond.shape[0] != x0.shape[0]:
        raise ShapeError("condition batch size mismatch")
    return FlowBatch(np.asarray(x0, float), np.asarray(x1, float),
                     np.asarray(t, float), x_t, v, cond)


def draw_times(rng: np.random.Generator, n: int, t_eps: float = 1e-3) -> Array:
    """Training times uniform on (t_eps, 1 - t_eps)."""
    return rng.uniform(t_eps, 1.0 - t_eps, size=n)


# ---------------------------------------------------------------------------
# velocity model

N_TIME_FEATURES = 4


def velocity_input_dim(x_dim: int, cond_dim: int) -> int:
    """Input width of the packed (x_t, t, cond) encoding."""
    return 2 * x_dim + 2 * cond_dim + N_TIME_FEATURES


def pack_velocity_input(x: Array, t, cond: Array) -> Array:
    """Feature encoding fed to the velocity MLP.

    The state and condition appear raw and multiplied by an inverse-time
    gate: the optimal rectified field scales like (x_t - x0(c)) / t near
    t = 0, and providing those products keeps the network's job close to
    linear instead of demanding unbounded input sensitivity.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    tcol = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1),
                           (x.shape[0], 1))
    gate = 0.1 / (tcol + 0.05)
    feats = np.concatenate(
        [tcol, gate, 1.0 / (1.05 - tcol), np.cos(np.pi * tcol)], axis=1)
    return np.concatenate([x, x * gate, cond, cond * gate, feats], axis=1)


@dataclass
class VelocityModel:
    """An MLP velocity field over the packed (x_t, t, cond) encoding."""

    params: MlpParams
    adapters: AdapterSet | None = None

    @property
    def x_dim(self) -> int:
        return self.params.out_dim

    @property
    def cond_dim(self) -> int:
        return (self.params.in_dim - 2 * self.params.out_dim
                - N_TIME_FEATURES) // 2

    def _pack(self, x: Array, t, cond: Array) -> Array:
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        if cond.shape[1] != self.cond_dim:
            raise ShapeError(f"condition width {cond.shape[1]} != {self.cond_dim}")
        return pack_velocity_input(x, t, cond)

    def velocity(self, x: Array, t, cond: Array) -> Array:
        return numkit.forward(self.params, self._pack(x, t, cond), self.adapters)

    def velocity_with_tape(self, x: Array, t, cond: Array):
        return numkit.forward_with_grad(self.params, self._pack(x, t, cond),
                                        self.adapters)


def init_velocity_net(x_dim: int, cond_dim: int, hidden,
                      rng: np.random.Generator) -> MlpParams:
    return numkit.init_mlp([velocity_input_dim(x_dim, cond_dim), *hidden, x_dim],
                           rng)


# ---------------------------------------------------------------------------
# flow-matching loss

def fm_loss(model: VelocityModel, batch: FlowBatch,
            schedule: Schedule) -> tuple[float, Grads]:
    """Mean over the batch of w(t) * ||v_target - v_theta||^2, with gradients
    for every base and adapter parameter of the model."""
    if batch.x0.shape[0] == 0:
        raise ValueError("empty batch")
    v_pred, tape = model.velocity_with_tape(batch.x_t, batch.t, batch.cond)
    w = schedule.weight(batch.t)
    diff = v_pred - batch.v_target
    loss = float(np.mean(w * np.sum(diff * diff, axis=1)))
    dout = (2.0 / batch.x0.shape[0]) * w[:, None] * diff
    return loss, tape.backward(dout)


# ---------------------------------------------------------------------------
# samplers

def make_time_grid(steps: int, t_start: float = 1.0, t_end: float = 0.0) -> Array:
    """Descending time grid with `steps` uniform Euler steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return np.linspace(t_start, t_end, steps + 1)


def sample_ode(model: VelocityModel, cond: Array, steps: int = 50,
               rng: np.random.Generator | None = None,
               x1: Array | None = None,
               t_grid: Array | None = None) -> Array:
    """Euler integration of dx = v dt from t=1 down to t=0.

    Starts from x1 ~ N(0, I) unless given; returns the terminal state
    (the data estimate). Raises DivergenceError naming the offending step
    if the state leaves the finite range.
    """
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    n = cond.shape[0]
    if x1 is None:
        if rng is None:
            raise ValueError("need rng when x1 is not supplied")
        x1 = rng.standard_normal((n, model.x_dim))
    x = np.array(x1, dtype=np.float64, copy=True)
    grid = make_time_grid(steps) if t_grid is None else np.asarray(t_grid, float)
    for k in range(len(grid) - 1):
        t, dt = grid[k], grid[k + 1] - grid[k]
        v = model.velocity(x, t, cond)
        x = x + dt * v
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k, float(t))
    return x


@dataclass
class SdeConfig:
    """Stochastic sampler settings: noise scale a, step count, time clamp."""

    noise_scale: float = 0.7
    steps: int = 30
    t_eps: float = 1e-3

    def __post_init__(self):
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.t_eps < 0.5:
            raise ValueError("t_eps must lie in (0, 0.5)")


@dataclass
class SdeTrajectory:
    """Full record of one batched stochastic rollout.

    states[k] is the state at times[k]; means[k]/variances[k] describe the
    Gaussian that generated states[k+1] from states[k].
    """

    states: Array      # (N+1, B, D)
    times: Array       # (N+1,)
    means: Array       # (N, B, D)
    variances: Array   # (N,)
    cond: Array        # (B, C)
    config: SdeConfig

    @property
    def terminal(self) -> Array:
        return self.states[-1]


def noise_coeff(t: float, noise_scale: float) -> float:
    """Diffusion coefficient g_t = a * sqrt(t / (1 - t))."""
    return noise_scale * float(np.sqrt(t / (1.0 - t)))


def _sde_step_stats(x: Array, v: Array, t: float, dt: float,
                    noise_scale: float) -> tuple[Array, float]:
    """Mean and variance of the Euler-Maruyama transition from time t.

    dt is signed (negative toward t=0); the injected variance uses |dt|.
    """
    g2 = noise_scale * noise_scale * t / (1.0 - t)
    drift = v + (g2 / (2.0 * t)) * (x + (1.0 - t) * v)
    return x + drift * dt, g2 * abs(dt)


def sample_sde(model: VelocityModel, cond: Array, cfg: SdeConfig,
               rng: np.random.Generator,
               x1: Array | None = None) -> SdeTrajectory:
    """Euler-Maruyama rollout over t from 1-t_eps down to t_eps.

    With noise_scale = 0 the update reduces bit-for-bit to the Euler ODE
    step on the same grid.
    """
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    n = cond.shape[0]
    x = rng.standard_normal((n, model.x_dim)) if x1 is None else np.array(
        x1, dtype=np.float64, copy=True)
    grid = make_time_grid(cfg.steps, 1.0 - cfg.t_eps, cfg.t_eps)
    states = [x.copy()]
    means, variances = [], []
    for k in range(cfg.steps):
        t, dt = float(grid[k]), float(grid[k + 1] - grid[k])
        v = model.velocity(x, t, cond)
        mean, var = _sde_step_stats(x, v, t, dt, cfg.noise_scale)
        x = mean + np.sqrt(var) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k, t)
        states.append(x.copy())
        means.append(mean)
        variances.append(var)
    return SdeTrajectory(np.stack(states), grid, np.stack(means),
                         np.array(variances), cond, cfg)


def transition_log_density(x_next: Array, x_t: Array, t: float, dt: float,
                           v: Array, cfg: SdeConfig):
    """Log-density of the sampler's Gaussian step kernel.

    Accepts single states (1-D) or batches (2-D, one density per row).
    Requires noise_scale > 0; the dt sign must match the sampler's.
    """
    if cfg.noise_scale == 0:
        raise DegenerateKernelError("noise_scale = 0 has no transition density")
    if not 0.0 < t < 1.0:
        raise ValueError("t must lie strictly inside (0, 1)")
    x_next = np.asarray(x_next, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if x_next.shape != x_t.shape or v.shape != x_t.shape:
        raise ShapeError("state/velocity shape mismatch")
    mean, var = _sde_step_stats(x_t, v, float(t), float(dt), cfg.noise_scale)
    d = x_next.shape[-1]
    sq = np.sum((x_next - mean) ** 2, axis=-1)
    logp = -0.5 * d * np.log(2.0 * np.pi * var) - sq / (2.0 * var)
    return float(logp) if logp.ndim == 0 else logp


def trajectory_to_csv(traj: SdeTrajectory, path, sample: int = 0) -> None:
    """Dump one sample's states as rows of (step, t, x_0..x_{D-1})."""
    d = traj.states.shape[-1]
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["step", "t"] + [f"x{i}" for i in range(d)])
        for k in range(traj.states.shape[0]):
            wr.writerow([k, f"{traj.times[k]:.12g}"]
                        + [f"{x:.17g}" for x in traj.states[k, sample]])
