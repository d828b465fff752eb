"""Unified reward model: preference-pair construction with input-negative
augmentation, Bradley-Terry training, and scoring."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import numkit, posterworld
from .flow_core import SdeConfig, VelocityModel, sample_sde
from .numkit import AdamW, Array, MlpParams
from .posterworld import (RECORD_PAIR, TaskSample, decode_sample_body,
                          encode_condition, encode_conditions,
                          encode_sample_body, flow_to_grid, read_record_file,
                          write_record_file)
from .errors import DatasetError

ORIGIN_MODEL_PAIR = "model-pair"
ORIGIN_INPUT_NEGATIVE = "input-negative"
_ORIGINS = (ORIGIN_MODEL_PAIR, ORIGIN_INPUT_NEGATIVE)

TIE_EPS = 1e-6


@dataclass
class PreferencePair:
    """(condition, chosen, rejected) with the sample that defined the condition."""

    sample: TaskSample
    chosen: Array    # (k, k)
    rejected: Array  # (k, k)
    origin: str = ORIGIN_MODEL_PAIR


@dataclass
class RewardNet:
    """Scalar scorer over concatenated (condition channels, candidate grid)."""

    params: MlpParams

    def score(self, cond: Array, candidates: Array) -> Array:
        x = self._pack(cond, candidates)
        return numkit.forward(self.params, x)[..., 0]

    def score_with_tape(self, cond: Array, candidates: Array):
        out, tape = numkit.forward_with_grad(self.params,
                                             self._pack(cond, candidates))
        return out[..., 0], tape

    def _pack(self, cond: Array, candidates: Array) -> Array:
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        candidates = np.asarray(candidates, dtype=np.float64)
        flat = candidates.reshape(cond.shape[0], -1)
        return np.concatenate([cond, flat], axis=1)


def init_reward_net(cond_width: int, grid_cells: int, hidden,
                    rng: np.random.Generator) -> RewardNet:
    widths = [cond_width + grid_cells, *hidden, 1]
    return RewardNet(numkit.init_mlp(widths, rng))


def reward_score(net: RewardNet, sample: TaskSample, candidate: Array) -> float:
    """Deterministic raw score for one candidate grid."""
    return float(net.score(encode_condition(sample), candidate.ravel()))


# ---------------------------------------------------------------------------
# pair construction

def build_preference_data(model: VelocityModel, samples: list[TaskSample],
                          oracle, rng: np.random.Generator,
                          sde_cfg: SdeConfig | None = None,
                          neg_ratio: float = 1.0 / 3.0) -> list[PreferencePair]:
    """Draw two stochastic samples per condition and rank them by the oracle.

    Ties within TIE_EPS are skipped. One input-negative pair (chosen = the
    winner, rejected = the raw condition reference) is appended per
    ceil(1/neg_ratio) model-pairs.
    """
    if not 0.0 < neg_ratio <= 1.0:
        raise ValueError("neg_ratio must lie in (0, 1]")
    if not samples:
        return []
    sde_cfg = sde_cfg or SdeConfig()
    cond = encode_conditions(samples)
    k = samples[0].k
    cand_a = flow_to_grid(sample_sde(model, cond, sde_cfg, rng).terminal)
    cand_b = flow_to_grid(sample_sde(model, cond, sde_cfg, rng).terminal)
    neg_every = int(np.ceil(1.0 / neg_ratio))
    pairs: list[PreferencePair] = []
    n_model = 0
    for i, sample in enumerate(samples):
        a = cand_a[i].reshape(k, k)
        b = cand_b[i].reshape(k, k)
        ra, rb = oracle(sample, a), oracle(sample, b)
        if abs(ra - rb) < TIE_EPS:
            continue
        chosen, rejected = (a, b) if ra > rb else (b, a)
        pairs.append(PreferencePair(sample, chosen, rejected))
        n_model += 1
        if n_model % neg_every == 0:
            pairs.append(PreferencePair(sample, chosen, sample.cond_ref.copy(),
                                        ORIGIN_INPUT_NEGATIVE))
    return pairs


# ---------------------------------------------------------------------------
# Bradley-Terry loss and training

def bt_loss(score_chosen: float, score_rejected: float) -> float:
    """-log sigmoid(chosen - rejected), computed stably."""
    return float(np.logaddexp(0.0, -(score_chosen - score_rejected)))


def _bt_batch(margin: Array) -> tuple[float, Array]:
    """Mean Bradley-Terry loss over margins plus dLoss/dMargin."""
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    dmargin = -1.0 / (1.0 + np.exp(margin)) / margin.shape[0]
    return loss, dmargin


@dataclass
class RewardTrainConfig:
    steps: int = 1500
    lr: float = 1e-3
    batch: int = 64
    holdout: float = 0.2
    eval_every: int = 100


def pairwise_accuracy(net: RewardNet, pairs: list[PreferencePair]) -> float:
    if not pairs:
        return float("nan")
    cond = encode_conditions([p.sample for p in pairs])
    sc = net.score(cond, np.stack([p.chosen.ravel() for p in pairs]))
    sr = net.score(cond, np.stack([p.rejected.ravel() for p in pairs]))
    return float(np.mean(sc > sr))


def train_reward(net: RewardNet, pairs: list[PreferencePair],
                 cfg: RewardTrainConfig, rng: np.random.Generator
                 ) -> tuple[RewardNet, list[tuple[int, float]]]:
    """Minimize the mean pairwise loss; track held-out accuracy.

    Returns the trained net and an (step, accuracy) curve on the held-out
    split. The split is drawn from `rng`, so runs are seed-reproducible.
    """
    if not pairs:
        raise ValueError("empty pair set")
    order = rng.permutation(len(pairs))
    n_hold = int(round(len(pairs) * cfg.holdout))
    hold = [pairs[i] for i in order[:n_hold]]
    train = [pairs[i] for i in order[n_hold:]]
    if not train:
        raise ValueError("holdout fraction leaves no training pairs")
    cond = encode_conditions([p.sample for p in train])
    chosen = np.stack([p.chosen.ravel() for p in train])
    rejected = np.stack([p.rejected.ravel() for p in train])
    opt = AdamW(net.params.flat(), lr=cfg.lr)
    curve: list[tuple[int, float]] = [(0, pairwise_accuracy(net, hold))]
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(len(train), size=min(cfg.batch, len(train)))
        sc, tape_c = net.score_with_tape(cond[idx], chosen[idx])
        sr, tape_r = net.score_with_tape(cond[idx], rejected[idx])
        _, dmargin = _bt_batch(sc - sr)
        gc = tape_c.backward(dmargin[:, None])
        gr = tape_r.backward(-dmargin[:, None])
        opt.step([a + b for a, b in zip(gc.base_flat(), gr.base_flat())])
        if step % cfg.eval_every == 0 or step == cfg.steps:
            curve.append((step, pairwise_accuracy(net, hold)))
    return net, curve


def holdout_split(pairs: list[PreferencePair], holdout: float,
                  rng: np.random.Generator
                  ) -> tuple[list[PreferencePair], list[PreferencePair]]:
    """The same split train_reward would make from an identical rng state."""
    order = rng.permutation(len(pairs))
    n_hold = int(round(len(pairs) * holdout))
    return ([pairs[i] for i in order[n_hold:]],
            [pairs[i] for i in order[:n_hold]])


# ---------------------------------------------------------------------------
# pair dataset persistence (posterworld format, pair-record extension)

def _encode_pair(p: PreferencePair) -> bytes:
    body = encode_sample_body(p.sample)
    k = p.sample.k
    grids = (np.ascontiguousarray(p.chosen, dtype="<f8").tobytes()
             + np.ascontiguousarray(p.rejected, dtype="<f8").tobytes())
    return struct.pack("<B", _ORIGINS.index(p.origin)) + body + grids


def _decode_pair(body: memoryview) -> PreferencePair:
    (origin_id,) = struct.unpack_from("<B", body, 0)
    sample, pos = decode_sample_body(body, 1)
    k = sample.k
    n = 8 * k * k
    chosen = np.frombuffer(body, dtype="<f8", count=k * k,
                           offset=pos).reshape(k, k).astype(np.float64)
    rejected = np.frombuffer(body, dtype="<f8", count=k * k,
                             offset=pos + n).reshape(k, k).astype(np.float64)
    if pos + 2 * n != len(body):
        raise DatasetError("pair record size mismatch")
    return PreferencePair(sample, chosen, rejected, _ORIGINS[origin_id])


def write_pairs(pairs: list[PreferencePair], path,
                meta: dict[str, str] | None = None) -> None:
    meta = dict(meta or {})
    if pairs:
        meta.setdefault("k", str(pairs[0].sample.k))
    meta.setdefault("origin_mix", ",".join(
        f"{o}:{sum(1 for p in pairs if p.origin == o)}" for o in _ORIGINS))
    write_record_file(path, [(RECORD_PAIR, _encode_pair(p)) for p in pairs], meta)


def read_pairs(path) -> tuple[list[PreferencePair], dict[str, str]]:
    records, meta = read_record_file(path)
    pairs = []
    for rtype, body in records:
        if rtype != RECORD_PAIR:
            raise DatasetError(f"{path}: unexpected record type {rtype}")
        pairs.append(_decode_pair(body))
    return pairs, meta
