"""Held-out evaluation: a two-sample energy distance, per-task oracle score
suites over sampled candidates, and run comparison tables."""

from __future__ import annotations

import csv
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .flow_core import VelocityModel, sample_ode
from .posterworld import (TASKS, TaskSample, by_kind, encode_conditions,
                          encode_sample_body, flow_to_grid, oracle_task_reward)
from .rewardkit import RewardNet


def thread_limit() -> int:
    """Worker cap from FLOWFORGE_THREADS; defaults to serial execution."""
    try:
        return max(1, int(os.environ.get("FLOWFORGE_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Order-preserving map, threaded when the env cap allows it."""
    limit = thread_limit()
    if limit <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=limit) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# energy distance

def energy_distance(samples_a: np.ndarray, samples_b: np.ndarray) -> float:
    """2 E||X-Y|| - E||X-X'|| - E||Y-Y'|| with all-pairs (V-statistic) means."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("energy distance needs nonempty sample sets")

    def mean_cross(x, y):
        d = x[:, None, :] - y[None, :, :]
        return float(np.mean(np.sqrt(np.sum(d * d, axis=-1))))

    return 2.0 * mean_cross(a, b) - mean_cross(a, a) - mean_cross(b, b)


# ---------------------------------------------------------------------------
# candidate samplers

@dataclass
class OdeBenchSampler:
    """Draws candidates from a velocity model with the deterministic sampler."""

    model: VelocityModel
    steps: int = 50

    def __call__(self, samples: list[TaskSample], n_per: int,
                 rng: np.random.Generator) -> np.ndarray:
        cond = np.repeat(encode_conditions(samples), n_per, axis=0)
        out = sample_ode(self.model, cond, self.steps, rng)
        k = samples[0].k
        return flow_to_grid(out).reshape(-1, k, k)


@dataclass
class EchoSampler:
    """Returns the ground-truth target for every request (oracle ceiling)."""

    def __call__(self, samples: list[TaskSample], n_per: int,
                 rng: np.random.Generator) -> np.ndarray:
        return np.repeat(np.stack([s.target for s in samples]), n_per, axis=0)


# ---------------------------------------------------------------------------
# bench reports

@dataclass
class TaskStats:
    count: int
    oracle_mean: float
    oracle_std: float
    energy: float
    reward_mean: float = float("nan")


@dataclass
class BenchReport:
    task_stats: dict[str, TaskStats]
    meta: dict[str, str] = field(default_factory=dict)

    def overall_mean(self) -> float:
        vals = [s.oracle_mean for s in self.task_stats.values()]
        return float(np.mean(vals)) if vals else float("nan")


def bench_hash(samples: list[TaskSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(encode_sample_body(s))
    return h.hexdigest()[:16]


def run_bench(sampler, bench_samples: list[TaskSample],
              rng: np.random.Generator, n_per_cond: int = 2,
              reward_net: RewardNet | None = None,
              oracle=oracle_task_reward,
              meta: dict[str, str] | None = None) -> BenchReport:
    """Sample n_per_cond candidates per held-out condition, score them with
    the analytic oracle (and optionally the learned reward), and aggregate
    per task. Missing task kinds are reported in the meta, not fatal."""
    grouped = by_kind(bench_samples)
    kinds = [k for k in TASKS if k in grouped]
    streams = dict(zip(kinds, rng.spawn(len(kinds))))

    def eval_kind(kind: str) -> tuple[str, TaskStats]:
        group = grouped[kind]
        cands = sampler(group, n_per_cond, streams[kind])
        scores = np.array([
            oracle(group[i // n_per_cond], cands[i])
            for i in range(cands.shape[0])
        ])
        targets = np.stack([s.target.ravel() for s in group])
        e = energy_distance(cands.reshape(cands.shape[0], -1), targets)
        stats = TaskStats(len(scores), float(scores.mean()),
                          float(scores.std()), e)
        if reward_net is not None:
            cond = np.repeat(encode_conditions(group), n_per_cond, axis=0)
            stats.reward_mean = float(np.mean(reward_net.score(cond, cands)))
        return kind, stats

    task_stats = dict(parallel_map(eval_kind, kinds))
    report_meta = dict(meta or {})
    report_meta.setdefault("bench_hash", bench_hash(bench_samples))
    report_meta.setdefault("n_per_cond", str(n_per_cond))
    missing = [k for k in TASKS if k not in grouped and k != "text_aux"]
    if missing:
        report_meta["missing_tasks"] = ",".join(missing)
    return BenchReport(task_stats, report_meta)


# ---------------------------------------------------------------------------
# CSV persistence and run comparison

def report_to_csv(report: BenchReport, path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        for key in sorted(report.meta):
            wr.writerow(["#meta", key, report.meta[key]])
        wr.writerow(["task", "count", "oracle_mean", "oracle_std", "energy",
                     "reward_mean"])
        for kind in TASKS:
            if kind in report.task_stats:
                s = report.task_stats[kind]
                wr.writerow([kind, s.count, f"{s.oracle_mean:.17g}",
                             f"{s.oracle_std:.17g}", f"{s.energy:.17g}",
                             f"{s.reward_mean:.17g}"])


def report_from_csv(path) -> BenchReport:
    meta: dict[str, str] = {}
    stats: dict[str, TaskStats] = {}
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row:
                continue
            if row[0] == "#meta":
                meta[row[1]] = row[2]
            elif row[0] != "task":
                stats[row[0]] = TaskStats(int(row[1]), float(row[2]),
                                          float(row[3]), float(row[4]),
                                          float(row[5]))
    return BenchReport(stats, meta)


def report_summary(report: BenchReport, name: str = "run") -> str:
    lines = [f"bench report: {name}"]
    for key in sorted(report.meta):
        lines.append(f"  {key} = {report.meta[key]}")
    lines.append(f"  {'task':<10} {'n':>5} {'oracle':>8} {'std':>8} "
                 f"{'energy':>8} {'reward':>8}")
    for kind in TASKS:
        if kind in report.task_stats:
            s = report.task_stats[kind]
            lines.append(f"  {kind:<10} {s.count:>5} {s.oracle_mean:>8.4f} "
                         f"{s.oracle_std:>8.4f} {s.energy:>8.4f} "
                         f"{s.reward_mean:>8.4f}")
    lines.append(f"  overall oracle mean = {report.overall_mean():.4f}")
    return "\n".join(lines)


@dataclass
class Comparison:
    names: list[str]
    ranked: list[tuple[str, float]]              # (name, overall) best first
    deltas: dict[str, dict[str, float]]          # name -> task -> delta vs first
    overall_delta: dict[str, float]


def compare_runs(reports: list[BenchReport],
                 names: list[str] | None = None) -> Comparison:
    """Per-task and overall deltas of every report against the first one.

    All reports must share the bench hash; the ranked table orders runs by
    overall oracle mean.
    """
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    names = names or [f"run{i}" for i in range(len(reports))]
    hashes = {r.meta.get("bench_hash", "") for r in reports}
    if len(hashes) != 1:
        raise ValueError("reports come from different bench datasets")
    base = reports[0]
    deltas: dict[str, dict[str, float]] = {}
    overall: dict[str, float] = {}
    for name, rep in zip(names, reports):
        deltas[name] = {
            kind: rep.task_stats[kind].oracle_mean - base.task_stats[kind].oracle_mean
            for kind in rep.task_stats if kind in base.task_stats
        }
        overall[name] = rep.overall_mean() - base.overall_mean()
    ranked = sorted(((n, r.overall_mean()) for n, r in zip(names, reports)),
                    key=lambda x: -x[1])
    return Comparison(names, ranked, deltas, overall)


def comparison_to_csv(cmp: Comparison, path) -> None:
    kinds = sorted({k for d in cmp.deltas.values() for k in d})
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["name", "overall_delta"] + [f"delta_{k}" for k in kinds])
        for name in cmp.names:
            wr.writerow([name, f"{cmp.overall_delta[name]:.17g}"]
                        + [f"{cmp.deltas[name].get(k, float('nan')):.17g}"
                           for k in kinds])


# ---------------------------------------------------------------------------
# grid dumps

def write_pgm(grid: np.ndarray, path) -> None:
    """Plain-text portable graymap of one grid, 0..255."""
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    vals = np.round(g * 255).astype(int)
    with open(path, "w") as f:
        f.write(f"P2\n{g.shape[1]} {g.shape[0]}\n255\n")
        for row in vals:
            f.write(" ".join(str(v) for v in row) + "\n")
