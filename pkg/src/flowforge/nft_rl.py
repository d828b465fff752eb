"""Reward-guided finetuning: group reward normalization, implicit
positive/negative policies with the contrastive velocity loss, the
reinforcement loop over a fresh low-rank adapter, and a clipped
policy-gradient baseline over stochastic trajectories."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .errors import ShapeError
from .flow_core import (Schedule, SdeConfig, SdeTrajectory, VelocityModel,
                        draw_times, interpolate, rectified_schedule,
                        sample_ode, sample_sde, transition_log_density)
from .numkit import (AdamW, AdapterSet, Array, Grads, MlpParams, adapter_flat,
                     copy_adapters)
from .posterworld import TaskSample, encode_conditions, flow_to_grid, grid_to_flow
from .rewardkit import RewardNet
from .errors import DivergenceError


# ---------------------------------------------------------------------------
# reward normalization

@dataclass
class RewardGroup:
    """Raw scores for one condition's sampled candidates."""

    condition_id: int
    raw: Array

    @property
    def size(self) -> int:
        return self.raw.shape[0]

    def normalized(self) -> Array:
        return normalize_rewards(self.raw)


def normalize_rewards(raw: Array, z_floor: float = 1e-6) -> Array:
    """Map raw scores to [0, 1]: 0.5 + 0.5 * clip((r - mean) / Z, -1, 1)
    with Z = max(group std, z_floor). A singleton group maps to 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or raw.size < 1:
        raise ValueError("raw rewards must be a nonempty vector")
    z = max(float(raw.std()), z_floor)
    return 0.5 + 0.5 * np.clip((raw - raw.mean()) / z, -1.0, 1.0)


# ---------------------------------------------------------------------------
# implicit policies and contrastive loss

def implicit_policies(v_old: Array, v_theta: Array,
                      beta: float) -> tuple[Array, Array]:
    """v+ = (1-beta) v_old + beta v_theta; v- = (1+beta) v_old - beta v_theta."""
    v_old = np.asarray(v_old, dtype=np.float64)
    v_theta = np.asarray(v_theta, dtype=np.float64)
    if v_old.shape != v_theta.shape:
        raise ShapeError("v_old/v_theta shape mismatch")
    return ((1.0 - beta) * v_old + beta * v_theta,
            (1.0 + beta) * v_old - beta * v_theta)


@dataclass
class NftBatch:
    """Re-noised rollout terminals with per-sample normalized rewards."""

    x_t: Array      # (B, D)
    t: Array        # (B,)
    cond: Array     # (B, C)
    v_target: Array  # (B, D) forward-process velocity target
    reward: Array   # (B,) in [0, 1]


@dataclass
class NftConfig:
    beta: float = 0.25
    group_size: int = 8
    steps: int = 500
    rank: int = 2
    refresh_interval: int = 50
    conditions_per_step: int = 2
    lr: float = 1e-3
    ode_steps: int = 25
    t_eps: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2 for normalization")


def nft_loss(model: VelocityModel, old_model: VelocityModel, batch: NftBatch,
             beta: float) -> tuple[float, Grads]:
    """Mean of r ||v+ - v||^2 + (1 - r) ||v- - v||^2 over the batch.

    Gradients flow only through v_theta; the old policy is a constant.
    """
    r = np.asarray(batch.reward, dtype=np.float64)
    if np.any(r < 0.0) or np.any(r > 1.0):
        raise ValueError("rewards must lie in [0, 1]")
    v_old = old_model.velocity(batch.x_t, batch.t, batch.cond)
    v_th, tape = model.velocity_with_tape(batch.x_t, batch.t, batch.cond)
    v_plus, v_minus = implicit_policies(v_old, v_th, beta)
    dp = v_plus - batch.v_target
    dm = v_minus - batch.v_target
    per = (r * np.sum(dp * dp, axis=1) + (1.0 - r) * np.sum(dm * dm, axis=1))
    n = r.shape[0]
    loss = float(per.mean())
    dout = (2.0 * beta / n) * (r[:, None] * dp - (1.0 - r)[:, None] * dm)
    return loss, tape.backward(dout)


# ---------------------------------------------------------------------------
# RL loop

def run_omni_edit_rl(sft_params: MlpParams, reward_net: RewardNet,
                     conditions: list[TaskSample], cfg: NftConfig,
                     rng: np.random.Generator,
                     schedule: Schedule | None = None
                     ) -> tuple[AdapterSet, list[float], int]:
    """Contrastive reinforcement finetuning of a fresh adapter.

    Per step: the frozen old-policy snapshot generates group_size ODE
    rollouts per condition, the learned reward scores them, scores are
    normalized per condition, the terminals are re-noised at fresh times,
    and the contrastive loss updates only the adapter. The snapshot
    refreshes every refresh_interval steps.

    Returns (adapter set, per-step mean raw reward, skipped rollout count).
    """
    schedule = schedule or rectified_schedule()
    adapters = numkit.init_adapters(sft_params, cfg.rank, rng)
    policy = VelocityModel(sft_params, adapters)
    old = VelocityModel(sft_params, copy_adapters(adapters))
    opt = AdamW(adapter_flat(adapters), lr=cfg.lr)
    cond_all = encode_conditions(conditions)
    k2 = sft_params.out_dim
    curve: list[float] = []
    skipped = 0
    for step in range(cfg.steps):
        if step > 0 and step % cfg.refresh_interval == 0:
            old.adapters = copy_adapters(adapters)
        pick = rng.choice(len(conditions),
                          size=min(cfg.conditions_per_step, len(conditions)),
                          replace=False)
        cond = np.repeat(cond_all[pick], cfg.group_size, axis=0)
        try:
            terminal = sample_ode(old, cond, cfg.ode_steps, rng)
        except DivergenceError:
            skipped += cond.shape[0]
            curve.append(float("nan"))
            continue
        grids = flow_to_grid(terminal)
        raw = reward_net.score(cond, grids)
        groups = raw.reshape(len(pick), cfg.group_size)
        r = np.concatenate([normalize_rewards(g) for g in groups])
        x0 = grid_to_flow(grids)
        t = draw_times(rng, x0.shape[0], cfg.t_eps)
        x1 = rng.standard_normal((x0.shape[0], k2))
        x_t, v_target = interpolate(x0, x1, t, schedule)
        loss, grads = nft_loss(policy, old, NftBatch(x_t, t, cond, v_target, r),
                               cfg.beta)
        opt.step(grads.adapter_flat())
        curve.append(float(raw.mean()))
    return adapters, curve, skipped


# ---------------------------------------------------------------------------
# clipped policy-gradient baseline over stochastic trajectories

@dataclass
class RolloutGroup:
    """One condition's stochastic rollouts (batched trajectory) and rewards."""

    trajectory: SdeTrajectory  # batch dimension = group size
    rewards: Array             # (G,) raw scores


def group_advantages(rewards: Array, floor: float = 1e-8) -> Array:
    rewards = np.asarray(rewards, dtype=np.float64)
    return (rewards - rewards.mean()) / max(float(rewards.std()), floor)


def flowgrpo_step(model: VelocityModel, old_model: VelocityModel,
                  groups: list[RolloutGroup],
                  clip: float = 0.2) -> tuple[float, Grads]:
    """Clipped surrogate objective over per-step Gaussian likelihood ratios.

    Comparison mode only: requires trajectories sampled with noise_scale > 0
    so the transition kernels are proper densities.
    """
    if not groups:
        raise ValueError("no rollout groups")
    total = 0.0
    count = 0
    acc: Grads | None = None
    for group in groups:
        traj = group.trajectory
        if traj.config.noise_scale <= 0.0:
            raise ValueError("flowgrpo needs noise_scale > 0 trajectories")
        adv = group_advantages(group.rewards)
        n_steps = traj.means.shape[0]
        for k in range(n_steps):
            t = float(traj.times[k])
            dt = float(traj.times[k + 1] - traj.times[k])
            x_k, x_k1 = traj.states[k], traj.states[k + 1]
            v_new, tape = model.velocity_with_tape(x_k, t, traj.cond)
            v_old = old_model.velocity(x_k, t, traj.cond)
            logp_new = transition_log_density(x_k1, x_k, t, dt, v_new,
                                              traj.config)
            logp_old = transition_log_density(x_k1, x_k, t, dt, v_old,
                                              traj.config)
            ratio = np.exp(logp_new - logp_old)
            surr1 = ratio * adv
            surr2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
            total += float(-np.minimum(surr1, surr2).sum())
            count += ratio.shape[0]
            active = surr1 <= surr2
            coeff = np.where(active, -adv * ratio, 0.0)
            g2 = traj.config.noise_scale ** 2 * t / (1.0 - t)
            var = g2 * abs(dt)
            mean, _ = _step_mean(x_k, v_new, t, dt, g2)
            dmean_dv = dt * (1.0 + g2 * (1.0 - t) / (2.0 * t))
            dout = coeff[:, None] * dmean_dv * (x_k1 - mean) / var
            g = tape.backward(dout)
            acc = g if acc is None else _add_grads(acc, g)
    assert acc is not None
    scale = 1.0 / count
    return total * scale, _scale_grads(acc, scale)


def _step_mean(x: Array, v: Array, t: float, dt: float, g2: float):
    drift = v + (g2 / (2.0 * t)) * (x + (1.0 - t) * v)
    return x + drift * dt, g2 * abs(dt)


def _add_grads(a: Grads, b: Grads) -> Grads:
    return Grads(
        [x + y for x, y in zip(a.weights, b.weights)],
        [x + y for x, y in zip(a.biases, b.biases)],
        {i: (a.adapters[i][0] + b.adapters[i][0],
             a.adapters[i][1] + b.adapters[i][1]) for i in a.adapters},
    )


def _scale_grads(g: Grads, s: float) -> Grads:
    return Grads(
        [s * x for x in g.weights],
        [s * x for x in g.biases],
        {i: (s * g.adapters[i][0], s * g.adapters[i][1]) for i in g.adapters},
    )


def run_flowgrpo(sft_params: MlpParams, reward_net: RewardNet,
                 conditions: list[TaskSample], cfg: NftConfig,
                 sde_cfg: SdeConfig, rng: np.random.Generator
                 ) -> tuple[AdapterSet, list[float], int]:
    """Policy-gradient baseline loop sharing the reinforcement scaffolding."""
    if sde_cfg.noise_scale <= 0:
        raise ValueError("flowgrpo needs noise_scale > 0")
    adapters = numkit.init_adapters(sft_params, cfg.rank, rng)
    policy = VelocityModel(sft_params, adapters)
    old = VelocityModel(sft_params, copy_adapters(adapters))
    opt = AdamW(adapter_flat(adapters), lr=cfg.lr)
    cond_all = encode_conditions(conditions)
    curve: list[float] = []
    skipped = 0
    for step in range(cfg.steps):
        if step > 0 and step % cfg.refresh_interval == 0:
            old.adapters = copy_adapters(adapters)
        pick = rng.choice(len(conditions),
                          size=min(cfg.conditions_per_step, len(conditions)),
                          replace=False)
        groups: list[RolloutGroup] = []
        raws: list[Array] = []
        for i in pick:
            cond = np.repeat(cond_all[[i]], cfg.group_size, axis=0)
            try:
                traj = sample_sde(old, cond, sde_cfg, rng)
            except DivergenceError:
                skipped += cfg.group_size
                continue
            raw = reward_net.score(cond, flow_to_grid(traj.terminal))
            groups.append(RolloutGroup(traj, raw))
            raws.append(raw)
        if not groups:
            curve.append(float("nan"))
            continue
        _, grads = flowgrpo_step(policy, old, groups)
        opt.step(grads.adapter_flat())
        curve.append(float(np.concatenate(raws).mean()))
    return adapters, curve, skipped
