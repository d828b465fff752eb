"""Command-line pipeline driver.

One config file drives every stage; artifacts land in --out with fixed
names, each embedding the config hash and its lineage so downstream stages
and reports can verify provenance. Stages never mutate their inputs and
refuse to overwrite existing outputs unless --force is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import evalbench, experts, flow_core, nft_rl, numkit, posterworld, rewardkit
from .config import RunConfig, config_hash, load_config
from .errors import FlowforgeError
from .flow_core import SdeConfig, VelocityModel
from .numkit import Checkpoint, load_checkpoint, save_checkpoint, stage_seed
from .posterworld import TASKS, by_kind, cond_dim

ARTIFACTS = {
    "gen-data": ("dataset_train.ffd", "dataset_bench.ffd", "gen_stats.csv"),
    "pretrain": ("base.ckpt", "pretrain_loss.csv"),
    "train-expert-local": ("expert_local.ckpt", "expert_local_loss.csv"),
    "train-expert-global": ("expert_global.ckpt", "expert_global_loss.csv"),
    "train-expert-mixed": ("expert_mixed.ckpt", "expert_mixed_loss.csv"),
    "distill": ("student.ckpt", "distill_loss.csv"),
    "build-prefs": ("prefs.ffd",),
    "train-reward": ("reward.ckpt", "reward_acc.csv"),
    "rl-finetune": ("rl.ckpt", "rl_reward.csv"),
}


class StageError(FlowforgeError):
    pass


def _guard_outputs(out: Path, names, force: bool, chash: str) -> None:
    for name in names:
        path = out / name
        if path.exists() and not force:
            hint = ""
            if name.endswith(".ckpt"):
                try:
                    old = load_checkpoint(path).meta.get("config_hash", "?")
                    hint = (" (same config hash)" if old == chash
                            else f" (config hash differs: {old})")
                except FlowforgeError:
                    pass
            raise StageError(f"{path} already exists{hint}; use --force to overwrite")


def _meta(cfg: RunConfig, stage: str, lineage: str) -> dict[str, str]:
    return {"config_hash": config_hash(cfg), "stage": stage,
            "seed": str(cfg.run.seed), "lineage": lineage}


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(header)
        wr.writerows(rows)


def _schedule(cfg: RunConfig):
    return flow_core.get_schedule(cfg.schedule.name, cfg.schedule.weight)


def _load_train(out: Path):
    path = out / "dataset_train.ffd"
    if not path.exists():
        raise StageError(f"missing input {path}; run gen-data first")
    return posterworld.read_dataset(path)


def _load_bench(out: Path):
    path = out / "dataset_bench.ffd"
    if not path.exists():
        raise StageError(f"missing input {path}; run gen-data first")
    return posterworld.read_dataset(path)


def _load_ckpt(out: Path, name: str) -> Checkpoint:
    path = out / name
    if not path.exists():
        raise StageError(f"missing input {path}")
    return load_checkpoint(path)


def load_velocity_model(path) -> tuple[VelocityModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.role == "reward":
        raise StageError(f"{path} is a reward checkpoint, not a velocity model")
    return VelocityModel(ckpt.params, ckpt.adapters), ckpt


# ---------------------------------------------------------------------------
# stages

def stage_gen_data(cfg: RunConfig, out: Path, force: bool) -> None:
    _guard_outputs(out, ARTIFACTS["gen-data"], force, config_hash(cfg))
    k = cfg.world.k
    seed = cfg.run.seed
    train, stats = posterworld.make_dataset(TASKS, cfg.world.train_per_task,
                                            stage_seed(seed, "data-train"), k)
    bench, bstats = posterworld.make_dataset(TASKS, cfg.world.bench_per_task,
                                             stage_seed(seed, "data-bench"), k)
    meta = _meta(cfg, "gen-data", "data")
    meta["seeds"] = (f"train:{stage_seed(seed, 'data-train')},"
                     f"bench:{stage_seed(seed, 'data-bench')}")
    posterworld.write_dataset(train, out / "dataset_train.ffd", meta)
    posterworld.write_dataset(bench, out / "dataset_bench.ffd", meta)
    rows = []
    for split, st in (("train", stats), ("bench", bstats)):
        for kind in st:
            for reason, count in sorted(st[kind].items()):
                rows.append([split, kind, reason, count])
    _write_csv(out / "gen_stats.csv", ["split", "task", "outcome", "count"], rows)
    print(f"gen-data: {len(train)} train / {len(bench)} bench samples")


def stage_pretrain(cfg: RunConfig, out: Path, force: bool) -> None:
    _guard_outputs(out, ARTIFACTS["pretrain"], force, config_hash(cfg))
    train, _ = _load_train(out)
    k = cfg.world.k
    params = flow_core.init_velocity_net(
        k * k, cond_dim(k), cfg.net.hidden,
        numkit.make_rng(stage_seed(cfg.run.seed, "pretrain-init")))
    losses = experts.pretrain(
        params, train, cfg.pretrain.steps, cfg.pretrain.lr, cfg.pretrain.batch,
        numkit.make_rng(stage_seed(cfg.run.seed, "pretrain")), _schedule(cfg),
        lr_min=cfg.pretrain.lr_min, t_eps=cfg.schedule.train_t_eps)
    save_checkpoint(out / "base.ckpt",
                    Checkpoint("base", params, None, _meta(cfg, "pretrain", "base")))
    _write_csv(out / "pretrain_loss.csv", ["step", "loss"],
               list(enumerate(losses)))
    print(f"pretrain: {len(losses)} steps, final loss "
          f"{np.mean(losses[-20:]) if losses else float('nan'):.4f}")


def stage_train_expert(cfg: RunConfig, out: Path, force: bool, group: str) -> None:
    key = f"train-expert-{group}"
    _guard_outputs(out, ARTIFACTS[key], force, config_hash(cfg))
    base = _load_ckpt(out, "base.ckpt")
    train, _ = _load_train(out)
    spec = experts.ExpertSpec(group, rank=cfg.expert.rank, steps=cfg.expert.steps,
                              lr=cfg.expert.lr, lr_min=cfg.expert.lr_min,
                              batch=cfg.expert.batch,
                              aux_ratio=cfg.expert.aux_ratio,
                              t_eps=cfg.schedule.train_t_eps)
    data = [s for s in train if s.kind in spec.tasks or s.kind == "text_aux"]
    adapters, losses = experts.train_sft(
        base.params, spec, data,
        numkit.make_rng(stage_seed(cfg.run.seed, f"expert-{group}")),
        _schedule(cfg))
    save_checkpoint(out / f"expert_{group}.ckpt",
                    Checkpoint(group, base.params, adapters,
                               _meta(cfg, key, f"base->{group}")))
    _write_csv(out / f"expert_{group}_loss.csv", ["step", "loss"],
               list(enumerate(losses)))
    print(f"train-expert {group}: final loss "
          f"{np.mean(losses[-20:]) if losses else float('nan'):.4f}")


def stage_distill(cfg: RunConfig, out: Path, force: bool) -> None:
    _guard_outputs(out, ARTIFACTS["distill"], force, config_hash(cfg))
    base = _load_ckpt(out, "base.ckpt")
    local = _load_ckpt(out, "expert_local.ckpt")
    glob = _load_ckpt(out, "expert_global.ckpt")
    train, _ = _load_train(out)
    dcfg = experts.DistillConfig(
        lambda_e=cfg.distill.lambda_e, aux_ratio=cfg.distill.aux_ratio,
        rank=cfg.distill.rank, steps=cfg.distill.steps, lr=cfg.distill.lr,
        lr_min=cfg.distill.lr_min, batch=cfg.distill.batch,
        t_eps=cfg.schedule.train_t_eps)
    student, curve = experts.distill(
        base.params, local.adapters, glob.adapters, dcfg, train,
        numkit.make_rng(stage_seed(cfg.run.seed, "distill")), _schedule(cfg))
    save_checkpoint(out / "student.ckpt",
                    Checkpoint("student", base.params, student,
                               _meta(cfg, "distill",
                                     "base->local+global->student")))
    _write_csv(out / "distill_loss.csv", ["step", "total", "aux", "distill"],
               [(i, *c) for i, c in enumerate(curve)])
    print(f"distill: final distill term "
          f"{np.mean([c[2] for c in curve[-20:]]) if curve else float('nan'):.4f}")


def stage_merge_adapters(cfg: RunConfig, out: Path, force: bool,
                         alpha: float) -> None:
    name = f"merged_{alpha:g}.ckpt"
    _guard_outputs(out, (name,), force, config_hash(cfg))
    base = _load_ckpt(out, "base.ckpt")
    local = _load_ckpt(out, "expert_local.ckpt")
    glob = _load_ckpt(out, "expert_global.ckpt")
    deltas = numkit.merge_adapters_linear(local.adapters, glob.adapters,
                                          alpha, 1.0 - alpha)
    merged = numkit.apply_deltas(base.params, deltas)
    save_checkpoint(out / name,
                    Checkpoint("merged", merged, None,
                               _meta(cfg, "merge-adapters",
                                     f"base->linear-merge({alpha:g})")))
    print(f"merge-adapters: wrote {name}")


def stage_build_prefs(cfg: RunConfig, out: Path, force: bool) -> None:
    _guard_outputs(out, ARTIFACTS["build-prefs"], force, config_hash(cfg))
    model, student = load_velocity_model(out / "student.ckpt")
    train, _ = _load_train(out)
    rng = numkit.make_rng(stage_seed(cfg.run.seed, "build-prefs"))
    picked: list[posterworld.TaskSample] = []
    for kind, group in by_kind(train).items():
        n = min(cfg.reward.prefs_per_task, len(group))
        idx = rng.choice(len(group), size=n, replace=False)
        picked.extend(group[i] for i in idx)
    sde_cfg = SdeConfig(cfg.sde.noise_scale, cfg.sde.steps, cfg.sde.t_eps)
    pairs = rewardkit.build_preference_data(
        model, picked, posterworld.oracle_task_reward, rng, sde_cfg,
        neg_ratio=cfg.reward.neg_ratio)
    meta = _meta(cfg, "build-prefs", student.meta.get("lineage", "?") + "->prefs")
    rewardkit.write_pairs(pairs, out / "prefs.ffd", meta)
    print(f"build-prefs: {len(pairs)} pairs")


def stage_train_reward(cfg: RunConfig, out: Path, force: bool) -> None:
    _guard_outputs(out, ARTIFACTS["train-reward"], force, config_hash(cfg))
    pairs, _ = rewardkit.read_pairs(out / "prefs.ffd")
    k = cfg.world.k
    rng = numkit.make_rng(stage_seed(cfg.run.seed, "train-reward"))
    net = rewardkit.init_reward_net(cond_dim(k), k * k, cfg.reward.hidden, rng)
    rcfg = rewardkit.RewardTrainConfig(cfg.reward.steps, cfg.reward.lr,
                                       cfg.reward.batch, cfg.reward.holdout,
                                       cfg.reward.eval_every)
    net, curve = rewardkit.train_reward(net, pairs, rcfg, rng)
    meta = _meta(cfg, "train-reward", "prefs->reward")
    meta["holdout_accuracy"] = f"{curve[-1][1]:.6f}"
    save_checkpoint(out / "reward.ckpt", Checkpoint("reward", net.params, None, meta))
    _write_csv(out / "reward_acc.csv", ["step", "holdout_accuracy"], curve)
    print(f"train-reward: holdout accuracy {curve[-1][1]:.3f}")


def stage_rl_finetune(cfg: RunConfig, out: Path, force: bool) -> None:
    _guard_outputs(out, ARTIFACTS["rl-finetune"], force, config_hash(cfg))
    _, student = load_velocity_model(out / "student.ckpt")
    reward_ckpt = _load_ckpt(out, "reward.ckpt")
    reward_net = rewardkit.RewardNet(reward_ckpt.params)
    train, _ = _load_train(out)
    conditions = [s for s in train if s.kind != "text_aux"]
    sft_params = numkit.apply_adapter_set(student.params, student.adapters or {})
    ncfg = nft_rl.NftConfig(
        beta=cfg.rl.beta, group_size=cfg.rl.group_size, steps=cfg.rl.steps,
        rank=cfg.rl.rank, refresh_interval=cfg.rl.refresh_interval,
        conditions_per_step=cfg.rl.conditions_per_step, lr=cfg.rl.lr,
        ode_steps=cfg.rl.ode_steps, t_eps=cfg.schedule.train_t_eps)
    rng = numkit.make_rng(stage_seed(cfg.run.seed, "rl-finetune"))
    if cfg.rl.algo == "nft":
        adapters, curve, skipped = nft_rl.run_omni_edit_rl(
            sft_params, reward_net, conditions, ncfg, rng, _schedule(cfg))
    else:
        sde_cfg = SdeConfig(cfg.sde.noise_scale, cfg.rl.ode_steps, cfg.sde.t_eps)
        adapters, curve, skipped = nft_rl.run_flowgrpo(
            sft_params, reward_net, conditions, ncfg, sde_cfg, rng)
    meta = _meta(cfg, "rl-finetune",
                 "base->local+global->student->rl:" + cfg.rl.algo)
    meta["skipped_rollouts"] = str(skipped)
    save_checkpoint(out / "rl.ckpt", Checkpoint("rl", sft_params, adapters, meta))
    _write_csv(out / "rl_reward.csv", ["step", "mean_raw_reward"],
               list(enumerate(curve)))
    tail = [c for c in curve[-20:] if not np.isnan(c)]
    print(f"rl-finetune[{cfg.rl.algo}]: mean raw reward "
          f"{np.mean(tail) if tail else float('nan'):.4f} "
          f"(skipped {skipped} rollouts)")


def stage_sample(cfg: RunConfig, out: Path, force: bool, model_path: str,
                 task: str, count: int, use_sde: bool) -> None:
    model, ckpt = load_velocity_model(model_path)
    bench, _ = _load_bench(out)
    group = [s for s in bench if s.kind == task]
    if not group:
        raise StageError(f"bench dataset has no {task!r} conditions")
    group = group[:count]
    rng = numkit.make_rng(stage_seed(cfg.run.seed, f"sample-{task}"))
    cond = posterworld.encode_conditions(group)
    k = cfg.world.k
    dump_dir = out / f"samples_{task}"
    dump_dir.mkdir(exist_ok=True)
    if use_sde:
        sde_cfg = SdeConfig(cfg.sde.noise_scale, cfg.sde.steps, cfg.sde.t_eps)
        traj = flow_core.sample_sde(model, cond, sde_cfg, rng)
        flow_core.trajectory_to_csv(traj, dump_dir / "trajectory.csv")
        grids = posterworld.flow_to_grid(traj.terminal).reshape(-1, k, k)
    else:
        terminal = flow_core.sample_ode(model, cond, cfg.sampler.ode_steps, rng)
        grids = posterworld.flow_to_grid(terminal).reshape(-1, k, k)
    rows = []
    for i, (sample, grid) in enumerate(zip(group, grids)):
        evalbench.write_pgm(grid, dump_dir / f"candidate_{i:03d}.pgm")
        evalbench.write_pgm(sample.target, dump_dir / f"target_{i:03d}.pgm")
        rows.append([i, posterworld.oracle_task_reward(sample, grid)])
    _write_csv(dump_dir / "scores.csv", ["index", "oracle_reward"], rows)
    print(f"sample: wrote {len(rows)} candidates to {dump_dir} "
          f"(model role {ckpt.role})")


def stage_bench(cfg: RunConfig, out: Path, force: bool, model_path: str,
                name: str | None, with_reward: bool) -> None:
    model, ckpt = load_velocity_model(model_path)
    name = name or ckpt.role
    report_path = out / f"bench_{name}.csv"
    _guard_outputs(out, (report_path.name,), force, config_hash(cfg))
    bench, _ = _load_bench(out)
    reward_net = None
    if with_reward:
        reward_net = rewardkit.RewardNet(_load_ckpt(out, "reward.ckpt").params)
    rng = numkit.make_rng(stage_seed(cfg.run.seed, f"bench-{name}"))
    sampler = evalbench.OdeBenchSampler(model, cfg.bench.ode_steps)
    meta = _meta(cfg, "bench", ckpt.meta.get("lineage", ckpt.role))
    meta["model"] = name
    report = evalbench.run_bench(sampler, bench, rng, cfg.bench.n_per_cond,
                                 reward_net, meta=meta)
    evalbench.report_to_csv(report, report_path)
    summary = evalbench.report_summary(report, name)
    (out / f"bench_{name}.txt").write_text(summary + "\n")
    print(summary)


def stage_compare(out: Path, report_paths: list[str]) -> None:
    reports = [evalbench.report_from_csv(p) for p in report_paths]
    names = [Path(p).stem.removeprefix("bench_") for p in report_paths]
    cmp = evalbench.compare_runs(reports, names)
    evalbench.comparison_to_csv(cmp, out / "comparison.csv")
    print("ranked by overall oracle mean:")
    for name, overall in cmp.ranked:
        print(f"  {name:<20} {overall:.4f}")
    base = names[0]
    for name in names[1:]:
        deltas = " ".join(f"{k}:{v:+.3f}" for k, v in cmp.deltas[name].items())
        print(f"  {name} vs {base}: overall {cmp.overall_delta[name]:+.4f} {deltas}")


def stage_describe(path: str) -> None:
    records, meta = posterworld.read_record_file(path)
    print(f"{path}:")
    for key in sorted(meta):
        print(f"  {key} = {meta[key]}")
    kinds: dict[str, int] = {}
    for rtype, body in records:
        if rtype == posterworld.RECORD_SAMPLE:
            sample, _ = posterworld.decode_sample_body(body, 0)
            kinds[sample.kind] = kinds.get(sample.kind, 0) + 1
        else:
            pair = rewardkit._decode_pair(body)
            key = f"pair[{pair.origin}:{pair.sample.kind}]"
            kinds[key] = kinds.get(key, 0) + 1
    for kind in sorted(kinds):
        print(f"  {kind}: {kinds[kind]}")


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="flowforge",
        description="Grid-poster flow pipeline: data, pretraining, experts, "
                    "distillation, reward modeling, RL finetuning, evaluation.")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                   help="override a config value (repeatable)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", default="runs/default", help="artifact directory")
    p.add_argument("--force", action="store_true",
                   help="overwrite existing artifacts")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data")
    sub.add_parser("pretrain")
    te = sub.add_parser("train-expert")
    te.add_argument("group", choices=["local", "global", "mixed"])
    sub.add_parser("distill")
    ma = sub.add_parser("merge-adapters")
    ma.add_argument("--alpha", type=float, default=0.5,
                    help="local-expert weight; global gets 1-alpha")
    sub.add_parser("build-prefs")
    sub.add_parser("train-reward")
    sub.add_parser("rl-finetune")
    sa = sub.add_parser("sample")
    sa.add_argument("--model", required=True)
    sa.add_argument("--task", choices=list(TASKS), default="extend")
    sa.add_argument("--count", type=int, default=8)
    sa.add_argument("--sde", action="store_true",
                    help="use the stochastic sampler and dump its trajectory")
    be = sub.add_parser("bench")
    be.add_argument("--model", required=True)
    be.add_argument("--name")
    be.add_argument("--with-reward", action="store_true")
    co = sub.add_parser("compare")
    co.add_argument("reports", nargs="+")
    de = sub.add_parser("describe")
    de.add_argument("path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        if args.command == "describe":
            stage_describe(args.path)
            return 0
        if args.command == "compare":
            out.mkdir(parents=True, exist_ok=True)
            stage_compare(out, args.reports)
            return 0
        cfg = load_config(args.config, args.set, args.seed)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            stage_gen_data(cfg, out, args.force)
        elif args.command == "pretrain":
            stage_pretrain(cfg, out, args.force)
        elif args.command == "train-expert":
            stage_train_expert(cfg, out, args.force, args.group)
        elif args.command == "distill":
            stage_distill(cfg, out, args.force)
        elif args.command == "merge-adapters":
            stage_merge_adapters(cfg, out, args.force, args.alpha)
        elif args.command == "build-prefs":
            stage_build_prefs(cfg, out, args.force)
        elif args.command == "train-reward":
            stage_train_reward(cfg, out, args.force)
        elif args.command == "rl-finetune":
            stage_rl_finetune(cfg, out, args.force)
        elif args.command == "sample":
            stage_sample(cfg, out, args.force, args.model, args.task,
                         args.count, args.sde)
        elif args.command == "bench":
            stage_bench(cfg, out, args.force, args.model, args.name,
                        args.with_reward)
        return 0
    except (FlowforgeError, OSError) as e:
        record = {"stage": args.command, "error": type(e).__name__,
                  "message": str(e)}
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(json.dumps(record, indent=2) + "\n")
        except OSError:
            pass
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
