"""Task-expert fine-tuning and task distillation.

Experts are low-rank adapters trained with the velocity-matching loss on
their task group plus a share of text-reconstruction batches. Distillation
trains a fresh student adapter on the raw base to regress routed teacher
velocities, with the same auxiliary text term mixed in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numkit
from .flow_core import (FlowBatch, Schedule, VelocityModel, draw_times, fm_loss,
                        make_flow_batch)
from .numkit import AdamW, AdapterSet, Array, Grads, MlpParams, adapter_flat
from .posterworld import (GLOBAL_TASKS, LOCAL_TASKS, TASKS, TaskSample,
                          encode_conditions, grid_to_flow)


@dataclass
class ExpertSpec:
    """One expert's task group and training budget."""

    group: str  # "local", "global", or "mixed" (joint-training baseline)
    rank: int = 8
    steps: int = 1500
    lr: float = 1e-3
    lr_min: float | None = None
    batch: int = 64
    aux_ratio: float = 0.1
    t_eps: float = 1e-3

    def __post_init__(self):
        if self.group not in ("local", "global", "mixed"):
            raise ValueError(f"unknown expert group {self.group!r}")

    @property
    def tasks(self) -> tuple[str, ...]:
        if self.group == "local":
            return LOCAL_TASKS
        if self.group == "global":
            return GLOBAL_TASKS
        return LOCAL_TASKS + GLOBAL_TASKS


def default_routing() -> dict[str, str]:
    routing = {kind: "local" for kind in LOCAL_TASKS}
    routing.update({kind: "global" for kind in GLOBAL_TASKS})
    return routing


@dataclass
class DistillConfig:
    lambda_e: float = 1.0
    aux_ratio: float = 0.1
    rank: int = 4
    steps: int = 1500
    lr: float = 1e-3
    lr_min: float | None = None
    batch: int = 64
    t_eps: float = 1e-3
    routing: dict[str, str] = field(default_factory=default_routing)

    def __post_init__(self):
        if self.lambda_e < 0:
            raise ValueError("lambda_e must be >= 0")
        missing = set(LOCAL_TASKS + GLOBAL_TASKS) - set(self.routing)
        if missing:
            raise ValueError(f"routing misses tasks: {sorted(missing)}")


# ---------------------------------------------------------------------------
# batch pools

@dataclass
class SamplePool:
    """Pre-encoded dataset slice: flattened targets and condition vectors."""

    x0: Array    # (n, k*k)
    cond: Array  # (n, cond_dim)

    def __len__(self) -> int:
        return self.x0.shape[0]

    def take(self, idx: Array) -> tuple[Array, Array]:
        return self.x0[idx], self.cond[idx]


def make_pool(samples: list[TaskSample]) -> SamplePool:
    """Flow-space targets plus raw condition vectors."""
    if not samples:
        return SamplePool(np.zeros((0, 0)), np.zeros((0, 0)))
    x0 = grid_to_flow(np.stack([s.target.ravel() for s in samples]))
    return SamplePool(x0, encode_conditions(samples))


def mixed_draw(task_pool: SamplePool, aux_pool: SamplePool, batch: int,
               aux_ratio: float) -> Callable[[np.random.Generator], tuple[Array, Array]]:
    """Batch sampler mixing task samples with text-reconstruction samples."""
    n_aux = int(round(batch * aux_ratio))
    if n_aux > 0 and len(aux_pool) == 0:
        raise ValueError("aux_ratio > 0 but no text_aux samples available")
    if batch - n_aux > 0 and len(task_pool) == 0:
        raise ValueError("empty task pool")

    def draw(rng: np.random.Generator) -> tuple[Array, Array]:
        parts = []
        if batch - n_aux > 0:
            parts.append(task_pool.take(rng.integers(len(task_pool),
                                                     size=batch - n_aux)))
        if n_aux > 0:
            parts.append(aux_pool.take(rng.integers(len(aux_pool), size=n_aux)))
        return (np.concatenate([p[0] for p in parts]),
                np.concatenate([p[1] for p in parts]))

    return draw


# ---------------------------------------------------------------------------
# generic velocity training

def cosine_lr(step: int, steps: int, lr: float, lr_min: float | None) -> float:
    if lr_min is None or steps <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + np.cos(np.pi * step / steps))


def train_velocity(model: VelocityModel,
                   draw: Callable[[np.random.Generator], tuple[Array, Array]],
                   steps: int, lr: float, rng: np.random.Generator,
                   schedule: Schedule, trainable: str = "adapters",
                   t_eps: float = 1e-3,
                   lr_min: float | None = None) -> list[float]:
    """Velocity-matching training loop; updates the model in place.

    `trainable` picks which parameter set the optimizer touches: "adapters"
    (base frozen) or "base" (full fine-tune, adapters ignored). A cosine
    decay from lr to lr_min is applied when lr_min is given.
    """
    if trainable == "adapters":
        if not model.adapters:
            raise ValueError("trainable='adapters' but model has none")
        opt_params = adapter_flat(model.adapters)
    elif trainable == "base":
        opt_params = model.params.flat()
    else:
        raise ValueError(f"unknown trainable selector {trainable!r}")
    opt = AdamW(opt_params, lr=lr)
    losses: list[float] = []
    for step in range(steps):
        opt.lr = cosine_lr(step, steps, lr, lr_min)
        x0, cond = draw(rng)
        t = draw_times(rng, x0.shape[0], t_eps)
        x1 = rng.standard_normal(x0.shape)
        batch = make_flow_batch(x0, x1, t, cond, schedule)
        loss, grads = fm_loss(model, batch, schedule)
        opt.step(grads.adapter_flat() if trainable == "adapters"
                 else grads.base_flat())
        losses.append(loss)
    return losses


def pretrain(params: MlpParams, samples: list[TaskSample], steps: int,
             lr: float, batch: int, rng: np.random.Generator,
             schedule: Schedule, lr_min: float | None = None,
             t_eps: float = 1e-3) -> list[float]:
    """Full-parameter velocity pretraining on the mixed sample pool."""
    pool = make_pool(samples)

    def draw(r: np.random.Generator) -> tuple[Array, Array]:
        return pool.take(r.integers(len(pool), size=batch))

    model = VelocityModel(params, None)
    return train_velocity(model, draw, steps, lr, rng, schedule,
                          trainable="base", t_eps=t_eps, lr_min=lr_min)


def train_sft(base: MlpParams, spec: ExpertSpec, samples: list[TaskSample],
              rng: np.random.Generator,
              schedule: Schedule) -> tuple[AdapterSet, list[float]]:
    """Adapter-only fine-tuning on the expert's task group plus text batches.

    The base parameters are never touched; a foreign task kind in the
    dataset is an error.
    """
    allowed = set(spec.tasks) | {"text_aux"}
    foreign = {s.kind for s in samples} - allowed
    if foreign:
        raise ValueError(f"dataset contains foreign task kinds: {sorted(foreign)}")
    task_pool = make_pool([s for s in samples if s.kind in spec.tasks])
    aux_pool = make_pool([s for s in samples if s.kind == "text_aux"])
    adapters = numkit.init_adapters(base, spec.rank, rng)
    model = VelocityModel(base, adapters)
    draw = mixed_draw(task_pool, aux_pool, spec.batch, spec.aux_ratio)
    losses = train_velocity(model, draw, spec.steps, spec.lr, rng, schedule,
                            t_eps=spec.t_eps, lr_min=spec.lr_min)
    return adapters, losses


# ---------------------------------------------------------------------------
# distillation

def distill_grads(student: VelocityModel, teachers: dict[str, VelocityModel],
                  routes: list[str], batch_aux: FlowBatch | None,
                  batch_task: FlowBatch, lambda_e: float,
                  schedule: Schedule) -> tuple[float, float, float, Grads]:
    """One distillation step's loss terms and combined student gradients.

    The auxiliary term is the plain velocity-matching loss on text batches;
    the distillation term regresses the student onto the routed teacher's
    output at the same (x_t, t, cond) points. Teachers stay frozen.
    Returns (total, aux_term, distill_term, grads) with
    total = aux_term + lambda_e * distill_term.
    """
    if len(routes) != batch_task.x0.shape[0]:
        raise ValueError("route list does not match task batch")
    for route in set(routes):
        if route not in teachers:
            raise ValueError(f"missing teacher for route {route!r}")

    aux_loss = 0.0
    parts: list[list[Array]] = []
    if batch_aux is not None and batch_aux.x0.shape[0] > 0:
        aux_loss, g_aux = fm_loss(student, batch_aux, schedule)
        parts.append(g_aux.base_flat() + g_aux.adapter_flat())

    n = batch_task.x0.shape[0]
    v_teacher = np.empty((n, student.x_dim))
    route_arr = np.array(routes)
    for route, teacher in teachers.items():
        rows = route_arr == route
        if rows.any():
            v_teacher[rows] = teacher.velocity(batch_task.x_t[rows],
                                               batch_task.t[rows],
                                               batch_task.cond[rows])
    v_student, tape = student.velocity_with_tape(batch_task.x_t, batch_task.t,
                                                 batch_task.cond)
    diff = v_student - v_teacher
    dist_loss = float(np.mean(np.sum(diff * diff, axis=1)))
    g_dist = tape.backward((2.0 / n) * diff)
    parts.append([lambda_e * g for g in
                  g_dist.base_flat() + g_dist.adapter_flat()])

    combined = parts[0]
    for extra in parts[1:]:
        combined = [a + b for a, b in zip(combined, extra)]
    n_base = 2 * student.params.n_layers
    grads = _grads_from_flat(student, combined, n_base)
    return aux_loss + lambda_e * dist_loss, aux_loss, dist_loss, grads


def _grads_from_flat(model: VelocityModel, flat: list[Array], n_base: int) -> Grads:
    weights = flat[0:n_base:2]
    biases = flat[1:n_base:2]
    adapters: dict[int, tuple[Array, Array]] = {}
    pos = n_base
    for layer in sorted(model.adapters or {}):
        adapters[layer] = (flat[pos], flat[pos + 1])
        pos += 2
    return Grads(list(weights), list(biases), adapters)


def distill(base: MlpParams, teacher_local: AdapterSet,
            teacher_global: AdapterSet, cfg: DistillConfig,
            samples: list[TaskSample], rng: np.random.Generator,
            schedule: Schedule) -> tuple[AdapterSet, list[tuple[float, float, float]]]:
    """Train a fresh student adapter on the raw base under routed teachers.

    Returns the student adapter set and the (total, aux, distill) loss
    triple per step.
    """
    teachers = {
        "local": VelocityModel(base, teacher_local),
        "global": VelocityModel(base, teacher_global),
    }
    task_samples = [s for s in samples if s.kind != "text_aux"]
    aux_pool = make_pool([s for s in samples if s.kind == "text_aux"])
    task_pool = make_pool(task_samples)
    task_routes = np.array([cfg.routing[s.kind] for s in task_samples])

    n_aux = int(round(cfg.batch * cfg.aux_ratio))
    if n_aux > 0 and len(aux_pool) == 0:
        raise ValueError("aux_ratio > 0 but no text_aux samples available")
    n_task = cfg.batch - n_aux
    if n_task < 1 or len(task_pool) == 0:
        raise ValueError("distillation needs a nonempty task batch")

    student_adapters = numkit.init_adapters(base, cfg.rank, rng)
    student = VelocityModel(base, student_adapters)
    opt = AdamW(adapter_flat(student_adapters), lr=cfg.lr)
    curve: list[tuple[float, float, float]] = []
    for step in range(cfg.steps):
        opt.lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min)
        idx = rng.integers(len(task_pool), size=n_task)
        x0, cond = task_pool.take(idx)
        t = draw_times(rng, n_task, cfg.t_eps)
        x1 = rng.standard_normal(x0.shape)
        batch_task = make_flow_batch(x0, x1, t, cond, schedule)
        batch_aux = None
        if n_aux > 0:
            ax0, acond = aux_pool.take(rng.integers(len(aux_pool), size=n_aux))
            at = draw_times(rng, n_aux, cfg.t_eps)
            batch_aux = make_flow_batch(ax0, rng.standard_normal(ax0.shape),
                                        at, acond, schedule)
        total, aux, dist, grads = distill_grads(
            student, teachers, list(task_routes[idx]), batch_aux, batch_task,
            cfg.lambda_e, schedule)
        opt.step(grads.adapter_flat())
        curve.append((total, aux, dist))
    return student_adapters, curve
