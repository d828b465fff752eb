"""Synthetic grid-poster task world: parametric posters on a K x K raster,
six paired-task constructors plus a text-reconstruction auxiliary, analytic
accept/reject filtering, an analytic per-task reward oracle, and a binary
dataset format.

Intensity bands keep content types separable by value alone: palette
backgrounds stay <= 0.50, layout-slot content lives in [0.55, 0.68],
subjects in [0.75, 1.0], and text pixels at 0.95. The oracle's membership
functions are trapezoids with plateaus covering each band, so a candidate
equal to the target scores exactly 1.0 on every task.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DatasetError, GenerationError
from .numkit import Array, make_rng

K_DEFAULT = 12

TASKS = ("extend", "fill", "rescale", "identity", "layout", "style", "text_aux")
LOCAL_TASKS = ("extend", "fill", "rescale", "identity")
GLOBAL_TASKS = ("layout", "style")

# intensity bands
MATTE = 0.04
SLOT_LO, SLOT_HI = 0.55, 0.68
SUBJECT_LO = 0.75
TEXT_HI = 0.95
TEXT_THRESHOLD = 0.72  # decode: bright pixel reads as an "on" text bit

# three palettes of two background levels each, all <= 0.48, min gap 0.07
PALETTES = tuple((0.08 + 0.07 * s, 0.34 + 0.07 * s) for s in range(3))

# vertical content frames per aspect-ratio code (row fractions)
RATIO_FRAMES = {0: (0.0, 1.0), 1: (1.0 / 6.0, 5.0 / 6.0), 2: (0.25, 0.75)}

EXTEND_MARGIN = 2
FILL_MIN_FRAC, FILL_MAX_FRAC = 0.05, 0.25

REWARD_TAU = 0.02

# grids are modeled at a larger scale so the unit-variance noise does not
# drown the signal; flow states map back through the inverse + clamp
FLOW_SCALE = 3.0


def grid_to_flow(grids: Array) -> Array:
    return (np.asarray(grids, dtype=np.float64) - 0.5) * FLOW_SCALE


def flow_to_grid(states: Array) -> Array:
    return np.clip(np.asarray(states, dtype=np.float64) / FLOW_SCALE + 0.5,
                   0.0, 1.0)


# ---------------------------------------------------------------------------
# poster parameters and rendering

@dataclass(frozen=True)
class Subject:
    row: float
    col: float
    radius: float
    intensity: float  # in [SUBJECT_LO, 1]
    shape: int        # 0 disc, 1 square, 2 diamond


@dataclass(frozen=True)
class PosterParams:
    k: int
    grad_dir: int                     # 0 along cols, 1 along rows, 2 diagonal
    grad_levels: tuple[float, float]  # pre-quantization endpoints in [0, 1]
    subject: Subject | None
    slots: tuple[tuple[int, int, int, int], ...]  # (r0, c0, h, w)
    slot_fill: tuple[float, ...]
    style: int                        # palette id
    text_row: int
    text_pattern: tuple[int, ...]
    frame: tuple[int, int] = (-1, -1)  # content rows [r0, r1); (-1,-1) = full

    def __post_init__(self):
        if self.frame == (-1, -1):
            object.__setattr__(self, "frame", (0, self.k))

    @property
    def has_text(self) -> bool:
        return any(self.text_pattern)


def _validate_params(p: PosterParams) -> None:
    k = p.k
    r0, r1 = p.frame
    if not (0 <= r0 < r1 <= k):
        raise ValueError(f"frame {p.frame} outside grid")
    if p.grad_dir not in (0, 1, 2):
        raise ValueError("bad gradient direction")
    if not all(0.0 <= g <= 1.0 for g in p.grad_levels):
        raise ValueError("gradient levels outside [0, 1]")
    if not 0 <= p.style < len(PALETTES):
        raise ValueError("bad style id")
    if len(p.text_pattern) != k or any(b not in (0, 1) for b in p.text_pattern):
        raise ValueError("text pattern must be k binary tokens")
    if not r0 <= p.text_row < r1:
        raise ValueError("text row outside frame")
    if len(p.slots) != len(p.slot_fill):
        raise ValueError("slot/fill length mismatch")
    for (sr, sc, sh, sw), fill in zip(p.slots, p.slot_fill):
        if sh < 1 or sw < 1 or sr < r0 or sr + sh > r1 or sc < 0 or sc + sw > k:
            raise ValueError(f"slot {(sr, sc, sh, sw)} outside frame")
        if not SLOT_LO <= fill <= SLOT_HI:
            raise ValueError("slot fill outside content band")
    s = p.subject
    if s is not None:
        if not (r0 <= s.row < r1 and 0 <= s.col < k):
            raise ValueError("subject center outside frame")
        if not 0.5 <= s.radius <= k / 2:
            raise ValueError("subject radius out of range")
        if not SUBJECT_LO <= s.intensity <= 1.0:
            raise ValueError("subject intensity outside band")
        if s.shape not in (0, 1, 2):
            raise ValueError("bad subject shape tag")


def subject_footprint(p: PosterParams) -> Array:
    """Boolean mask of the subject's cells (all False when no subject)."""
    mask = np.zeros((p.k, p.k), dtype=bool)
    s = p.subject
    if s is None:
        return mask
    rows, cols = np.mgrid[0:p.k, 0:p.k].astype(np.float64)
    dr, dc = rows - s.row, cols - s.col
    if s.shape == 0:
        mask = dr * dr + dc * dc <= s.radius * s.radius
    elif s.shape == 1:
        mask = np.maximum(np.abs(dr), np.abs(dc)) <= s.radius
    else:
        mask = np.abs(dr) + np.abs(dc) <= s.radius
    return mask


def slot_indicator(p: PosterParams) -> Array:
    mask = np.zeros((p.k, p.k), dtype=bool)
    for sr, sc, sh, sw in p.slots:
        mask[sr:sr + sh, sc:sc + sw] = True
    return mask


def make_poster(p: PosterParams) -> Array:
    """Deterministic render: background, subject, slot contents, text band,
    composited in that order. Rows outside the frame are matte.

    The background gradient snaps each pixel to the nearer of its two end
    levels, giving a two-tone banded backdrop; the constrained sampler
    draws those levels from the style's palette, so scene pixels land
    exactly on palette values.
    """
    _validate_params(p)
    k = p.k
    r0, r1 = p.frame
    grid = np.full((k, k), MATTE)
    h = r1 - r0
    cols = np.arange(k, dtype=np.float64) / max(k - 1, 1)
    rows = (np.arange(r0, r1, dtype=np.float64) - r0) / max(h - 1, 1)
    if p.grad_dir == 0:
        u = np.tile(cols, (h, 1))
    elif p.grad_dir == 1:
        u = np.tile(rows[:, None], (1, k))
    else:
        u = (rows[:, None] + cols[None, :]) / 2.0
    g0, g1 = p.grad_levels
    grid[r0:r1, :] = np.where(u <= 0.5, g0, g1)
    fp = subject_footprint(p)
    if p.subject is not None:
        grid[fp] = p.subject.intensity
    for (sr, sc, sh, sw), fill in zip(p.slots, p.slot_fill):
        grid[sr:sr + sh, sc:sc + sw] = fill
    bits = np.array(p.text_pattern, dtype=bool)
    grid[p.text_row, bits] = TEXT_HI
    return grid


def place_for_ratio(p: PosterParams, ratio: int) -> PosterParams:
    """Re-seat full-frame content inside the ratio's letterbox frame."""
    f0, f1 = RATIO_FRAMES[ratio]
    k = p.k
    r0, r1 = int(round(f0 * k)), int(round(f1 * k))
    h = r1 - r0
    scale = h / k

    def map_row(r: float) -> float:
        return r0 + r * scale

    subject = p.subject
    if subject is not None:
        radius = max(1.0, subject.radius * scale)
        row = min(max(map_row(subject.row), r0 + radius), r1 - 1 - radius)
        subject = replace(subject, row=row, radius=radius)
    slots, fills = [], []
    for (sr, sc, sh, sw), fill in zip(p.slots, p.slot_fill):
        nh = max(1, int(round(sh * scale)))
        nr = min(max(int(round(map_row(sr))), r0), r1 - nh)
        slots.append((nr, sc, nh, sw))
        fills.append(fill)
    text_row = min(max(int(round(map_row(p.text_row))), r0), r1 - 1)
    return replace(p, subject=subject, slots=tuple(slots), slot_fill=tuple(fills),
                   text_row=text_row, frame=(r0, r1))


# ---------------------------------------------------------------------------
# parameter sampling

def sample_params(rng: np.random.Generator, k: int = K_DEFAULT,
                  constrained: bool = True) -> PosterParams:
    """Draw poster parameters.

    Constrained draws keep all content inside the extendable center window,
    keep the subject and the slots off the text row, and cap background
    levels so rendered text stays decodable. Unconstrained draws relax all
    of that and are only used to exercise the filter.
    """
    m = EXTEND_MARGIN
    lo, hi = (m, k - m) if constrained else (0, k)
    style = int(rng.integers(len(PALETTES)))
    grad_dir = int(rng.integers(3))
    if constrained:
        grad_levels = tuple(float(v) for v in rng.permutation(PALETTES[style]))
    else:
        grad_levels = (float(rng.uniform(0.0, 0.9)), float(rng.uniform(0.0, 0.9)))

    for _ in range(200):
        pattern = rng.integers(0, 2, size=k)
        if 3 <= pattern.sum() <= k - 3:
            break

    radius = float(rng.uniform(1.2, 2.2))
    intensity = float(rng.uniform(0.78, 1.0))
    shape = int(rng.integers(3))
    row = float(rng.uniform(lo + radius, hi - 1 - radius))
    col = float(rng.uniform(lo + radius, hi - 1 - radius))
    subject = Subject(row, col, radius, intensity, shape)

    if constrained:
        clear = [r for r in range(lo, hi) if abs(r - row) > radius + 0.6]
        if not clear:
            raise GenerationError("no text row clear of the subject")
        text_row = int(clear[rng.integers(len(clear))])
    else:
        text_row = int(rng.integers(lo, hi))

    fp = subject_footprint(
        PosterParams(k, 0, (0, 0), subject, (), (), 0, text_row,
                     tuple(int(b) for b in pattern)))
    n_slots = int(rng.integers(1, 4))
    slots: list[tuple[int, int, int, int]] = []
    fills: list[float] = []
    occupied = fp.copy()
    occupied[text_row, :] = True
    for _ in range(n_slots):
        for _ in range(50):
            sh, sw = int(rng.integers(2, 4)), int(rng.integers(2, 5))
            sr = int(rng.integers(lo, max(lo + 1, hi - sh)))
            sc = int(rng.integers(lo, max(lo + 1, hi - sw)))
            if sr + sh > hi or sc + sw > hi:
                continue
            region = np.zeros((k, k), dtype=bool)
            region[sr:sr + sh, sc:sc + sw] = True
            if constrained and (region & occupied).any():
                continue
            slots.append((sr, sc, sh, sw))
            fills.append(float(rng.uniform(SLOT_LO + 0.01, SLOT_HI - 0.01)))
            occupied |= region
            break
    if not slots:
        # crowded scenes may reject every draw; keep at least one slot off
        # the text row (overlapping the subject is tolerable: slots paint
        # over it and no invariant forbids that)
        sr = lo if text_row != lo else lo + 1
        slots.append((sr, lo, 2, 2))
        fills.append(float(rng.uniform(SLOT_LO + 0.01, SLOT_HI - 0.01)))
    return PosterParams(k, grad_dir, grad_levels, subject, tuple(slots),
                        tuple(fills), style, text_row,
                        tuple(int(b) for b in pattern))


# ---------------------------------------------------------------------------
# task samples

@dataclass
class TaskSample:
    """One paired training example: condition channels plus target grid.

    `params` always describes the target scene in its final placement, so
    the oracle can read geometry (slots, subject, text row) directly.
    """

    kind: str
    params: PosterParams
    cond_ref: Array                  # (k, k) reference channel
    cond_mask: Array                 # (k, k) binary mask channel
    ratio_code: tuple[float, float]  # (source, target) ratio codes, else zeros
    target: Array                    # (k, k)
    seed: int = 0

    @property
    def k(self) -> int:
        return self.params.k


def kind_index(kind: str) -> int:
    try:
        return TASKS.index(kind)
    except ValueError:
        raise ValueError(f"unknown task kind {kind!r}") from None


def cond_dim(k: int) -> int:
    return 2 * k * k + len(TASKS) + 2


def encode_condition(sample: TaskSample) -> Array:
    onehot = np.zeros(len(TASKS))
    onehot[kind_index(sample.kind)] = 1.0
    return np.concatenate([
        sample.cond_ref.ravel(),
        sample.cond_mask.ravel(),
        onehot,
        np.array(sample.ratio_code, dtype=np.float64),
    ])


def encode_conditions(samples: list[TaskSample]) -> Array:
    return np.stack([encode_condition(s) for s in samples])


def build_task_sample(kind: str, params: PosterParams,
                      rng: np.random.Generator) -> TaskSample:
    """Construct the (condition, target) pair for one task kind.

    Degenerate draws (e.g. a scene that cannot host the shared slots) are
    retried internally and raise GenerationError past the bound.
    """
    k = params.k
    if kind == "extend":
        target = make_poster(params)
        m = EXTEND_MARGIN
        ref = np.zeros((k, k))
        mask = np.zeros((k, k))
        ref[m:k - m, m:k - m] = target[m:k - m, m:k - m]
        mask[m:k - m, m:k - m] = 1.0
        return TaskSample(kind, params, ref, mask, (0.0, 0.0), target)

    if kind == "fill":
        target = make_poster(params)
        cells = k * k
        for _ in range(200):
            h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            if not FILL_MIN_FRAC <= h * w / cells <= FILL_MAX_FRAC:
                continue
            r0 = int(rng.integers(0, k - h + 1))
            c0 = int(rng.integers(0, k - w + 1))
            # holes never cut the text band: masked bits are unrecoverable
            if params.has_text and r0 <= params.text_row < r0 + h:
                continue
            break
        else:
            raise GenerationError("no admissible hole placement")
        ref = target.copy()
        ref[r0:r0 + h, c0:c0 + w] = 0.0
        mask = np.zeros((k, k))
        mask[r0:r0 + h, c0:c0 + w] = 1.0
        return TaskSample(kind, params, ref, mask, (0.0, 0.0), target)

    if kind == "rescale":
        src, dst = rng.permutation(len(RATIO_FRAMES))[:2]
        placed = place_for_ratio(params, int(dst))
        ref = make_poster(place_for_ratio(params, int(src)))
        code = (float(src) / 2.0, float(dst) / 2.0)
        mask = np.zeros((k, k))
        mask[placed.frame[0]:placed.frame[1], :] = 1.0  # destination frame
        return TaskSample(kind, placed, ref, mask, code, make_poster(placed))

    if kind == "identity":
        assert params.subject is not None
        for _ in range(100):
            q = sample_params(rng, k)
            if q.subject is None:
                continue
            s = q.subject
            ident = Subject(s.row, s.col, params.subject.radius,
                            params.subject.intensity, params.subject.shape)
            if abs(ident.row - q.text_row) <= ident.radius + 0.6:
                continue
            q = replace(q, subject=ident)
            try:
                ref = make_poster(q)
            except ValueError:
                continue
            mask = subject_footprint(q).astype(np.float64)  # where the identity sits
            return TaskSample(kind, params, ref, mask, (0.0, 0.0),
                              make_poster(params))
        raise GenerationError("could not build identity condition scene")

    if kind == "layout":
        base = slot_indicator(params)
        for attempt in range(100):
            q = sample_params(rng, k)
            if q.style == params.style:
                continue
            # prefer conditions whose own text row leaves the shared slots
            # intact, but accept a crossing once clean draws run out
            if attempt < 50:
                occupied = subject_footprint(q)
                occupied[q.text_row, :] = True
                if (base & occupied).any():
                    continue
            fills = tuple(float(rng.uniform(SLOT_LO + 0.01, SLOT_HI - 0.01))
                          for _ in params.slots)
            q = replace(q, slots=params.slots, slot_fill=fills)
            mask = base.astype(np.float64)  # the layout spec itself
            return TaskSample(kind, params, make_poster(q), mask,
                              (0.0, 0.0), make_poster(params))
        raise GenerationError("could not build layout condition scene")

    if kind == "style":
        # the backdrop is part of the style: the condition shares the
        # palette, the band direction, and the level order, and differs in
        # layout, content, subject, and text
        for _ in range(100):
            q = sample_params(rng, k)
            q = replace(q, style=params.style, grad_dir=params.grad_dir,
                        grad_levels=params.grad_levels)
            if q.slots != params.slots:
                return TaskSample(kind, params, make_poster(q),
                                  np.zeros((k, k)), (0.0, 0.0),
                                  make_poster(params))
        raise GenerationError("could not build style condition scene")

    if kind == "text_aux":
        bits = np.array(params.text_pattern, dtype=np.float64)
        ref = np.zeros((k, k))
        ref[params.text_row, :] = bits
        mask = np.zeros((k, k))
        mask[params.text_row, :] = 1.0
        target = np.zeros((k, k))
        target[params.text_row, :] = TEXT_HI * bits
        return TaskSample(kind, params, ref, mask, (0.0, 0.0), target)

    raise ValueError(f"unknown task kind {kind!r}")


# ---------------------------------------------------------------------------
# filtering

def decode_text_bits(row_values: Array) -> Array:
    return (np.asarray(row_values) > TEXT_THRESHOLD).astype(np.float64)


def pearson(a: Array, b: Array) -> float:
    """Correlation with a hard zero on degenerate (constant) inputs."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    num = float(np.dot(da, db))
    den = float(np.sqrt(np.dot(da, da) * np.dot(db, db)))
    if den == 0.0:
        return 0.0
    return num / den


def filter_sample(sample: TaskSample) -> tuple[bool, str]:
    """Analytic stand-in for the multimodal quality filters.

    Rejects targets whose subject sits on the text band, whose rendered
    text no longer decodes to the token pattern, and fill tasks whose hole
    swallows the subject completely.
    """
    p = sample.params
    if p.has_text and p.subject is not None:
        fp = subject_footprint(p)
        if fp[p.text_row, :].any():
            return False, "text occluded"
    if p.has_text:
        decoded = decode_text_bits(sample.target[p.text_row, :])
        if pearson(decoded, np.array(p.text_pattern, dtype=np.float64)) < 0.99:
            return False, "text unreadable"
    if sample.kind == "fill" and p.subject is not None:
        fp = subject_footprint(p)
        if fp.any() and not (fp & (sample.cond_mask < 0.5)).any():
            return False, "subject masked"
    return True, "ok"


# ---------------------------------------------------------------------------
# reward oracle

def _trapezoid_rise(v: Array, lo: float, hi: float) -> Array:
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def _trapezoid_band(v: Array, lo0: float, lo1: float, hi1: float, hi0: float) -> Array:
    return np.clip(np.minimum((v - lo0) / (lo1 - lo0), (hi0 - v) / (hi0 - hi1)),
                   0.0, 1.0)


def _mse(a: Array, b: Array) -> float:
    d = np.asarray(a, float) - np.asarray(b, float)
    return float(np.mean(d * d)) if d.size else 0.0


def _subject_membership(grid: Array) -> Array:
    return _trapezoid_rise(grid, TEXT_THRESHOLD, SUBJECT_LO)


def _occupancy(grid: Array) -> Array:
    return _trapezoid_band(grid, 0.52, SLOT_LO, SLOT_HI, 0.71)


def _match_fraction(candidate: Array, target: Array) -> float:
    """Soft exact-match score: per-pixel agreement within a tolerance ramp
    (full credit below 0.05 absolute error, none above 0.12)."""
    if candidate.size == 0:
        return 1.0
    d = np.abs(np.asarray(candidate, float) - np.asarray(target, float))
    return float(np.mean(np.clip((0.12 - d) / 0.07, 0.0, 1.0)))


def _blob_features(grid: Array, text_row: int) -> tuple[float, float]:
    """Position-free blob descriptors: effective radius and mean intensity
    of the bright footprint, with the text row excluded."""
    keep = np.ones(grid.shape[0], dtype=bool)
    keep[text_row] = False
    m = _subject_membership(grid[keep])
    mass = float(m.sum())
    if mass <= 0.0:
        return 0.0, 0.0
    radius = float(np.sqrt(mass / np.pi))
    intensity = float((m * grid[keep]).sum() / mass)
    return radius, intensity


def _subject_recovery(candidate: Array, target: Array, text_row: int) -> float:
    """Identity agreement of the detected blobs, position-free: a subject of
    the right size and brightness anywhere in the scene counts."""
    rc, ic = _blob_features(candidate, text_row)
    rt, it = _blob_features(target, text_row)
    if rc == 0.0 or rt == 0.0:
        return 0.0 if (rc != rt) else 1.0
    return float(np.exp(-((rc - rt) ** 2) / 0.25 - ((ic - it) ** 2) / 0.02))


def oracle_task_reward(sample: TaskSample, candidate: Array) -> float:
    """Task-specific quality score in [0, 1]; exactly 1 when the candidate
    equals the target."""
    candidate = np.asarray(candidate, dtype=np.float64)
    target = sample.target
    if candidate.shape != target.shape:
        raise ValueError("candidate/target shape mismatch")
    p = sample.params
    kind = sample.kind
    tau = REWARD_TAU

    if kind in ("extend", "fill"):
        hole = sample.cond_mask > 0.5 if kind == "fill" else sample.cond_mask < 0.5
        known = ~hole
        s_hole = np.exp(-_mse(candidate[hole], target[hole]) / tau)
        s_known = _match_fraction(candidate[known], target[known])
        return float(s_hole * s_known)

    if kind in ("rescale", "identity"):
        recovery = _subject_recovery(candidate, target, p.text_row)
        scene = np.exp(-_mse(candidate, target) / (5.0 * tau))
        return float(recovery * scene)

    if kind == "layout":
        ind = slot_indicator(p).astype(np.float64)
        d = float(np.mean(np.abs(_occupancy(candidate) - ind)))
        return float(np.exp(-d / 0.08))

    if kind == "style":
        levels = np.array(PALETTES[p.style])
        w = np.clip((0.53 - candidate) / 0.03, 0.0, 1.0)
        dist = np.min(np.abs(candidate[..., None] - levels), axis=-1)
        m = np.clip((0.0525 - dist) / 0.035, 0.0, 1.0)
        wsum = float(w.sum())
        if wsum <= 0.0:
            return 0.0
        d = float((w * (1.0 - m)).sum()) / wsum
        return float(np.exp(-d / 0.3))

    if kind == "text_aux":
        row = p.text_row
        corr = max(0.0, pearson(candidate[row, :], target[row, :]))
        off = np.ones(candidate.shape[0], dtype=bool)
        off[row] = False
        return float(corr * np.exp(-_mse(candidate[off], target[off]) / tau))

    raise ValueError(f"unknown task kind {kind!r}")


# ---------------------------------------------------------------------------
# dataset generation

def make_dataset(kinds, per_task: int, seed: int, k: int = K_DEFAULT,
                 max_tries: int = 50):
    """Generate `per_task` accepted samples per kind.

    Returns (samples, stats) where stats counts accepts and per-reason
    rejections for each kind. Deterministic in (kinds, per_task, seed, k).
    """
    samples: list[TaskSample] = []
    stats: dict[str, dict[str, int]] = {kind: {"accepted": 0} for kind in kinds}
    for kind in kinds:
        ki = kind_index(kind)
        for i in range(per_task):
            for j in range(max_tries):
                ss = np.random.SeedSequence([seed, ki, i, j])
                child = int(ss.generate_state(1, np.uint64)[0] % (2**63))
                rng = make_rng(child)
                try:
                    params = sample_params(rng, k)
                    sample = build_task_sample(kind, params, rng)
                except GenerationError:
                    stats[kind]["degenerate"] = stats[kind].get("degenerate", 0) + 1
                    continue
                ok, reason = filter_sample(sample)
                if ok:
                    sample.seed = child
                    samples.append(sample)
                    stats[kind]["accepted"] += 1
                    break
                stats[kind][reason] = stats[kind].get(reason, 0) + 1
            else:
                raise GenerationError(
                    f"{kind}: no acceptable sample in {max_tries} tries (index {i})")
    return samples, stats


# ---------------------------------------------------------------------------
# binary dataset format (FFDATA1)

DATASET_MAGIC = b"FFDATA1\n"
_SCHEMA = 1
_HEADER_END = b"---\n"
RECORD_SAMPLE = 0
RECORD_PAIR = 1


def _encode_params(p: PosterParams) -> bytes:
    vals: list[float] = [p.k, p.frame[0], p.frame[1], p.grad_dir,
                         p.grad_levels[0], p.grad_levels[1], p.style,
                         p.text_row]
    if p.subject is None:
        vals.append(0.0)
    else:
        s = p.subject
        vals.extend([1.0, s.row, s.col, s.radius, s.intensity, s.shape])
    vals.append(len(p.slots))
    for (sr, sc, sh, sw), fill in zip(p.slots, p.slot_fill):
        vals.extend([sr, sc, sh, sw, fill])
    vals.extend(float(b) for b in p.text_pattern)
    arr = np.array(vals, dtype="<f8")
    return struct.pack("<I", arr.size) + arr.tobytes()


def _decode_params(buf: memoryview, pos: int) -> tuple[PosterParams, int]:
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    vals = np.frombuffer(buf, dtype="<f8", count=n, offset=pos)
    pos += 8 * n
    it = iter(vals.tolist())
    k = int(next(it))
    frame = (int(next(it)), int(next(it)))
    grad_dir = int(next(it))
    levels = (next(it), next(it))
    style = int(next(it))
    text_row = int(next(it))
    subject = None
    if next(it) > 0.5:
        subject = Subject(next(it), next(it), next(it), next(it), int(next(it)))
    n_slots = int(next(it))
    slots, fills = [], []
    for _ in range(n_slots):
        slots.append((int(next(it)), int(next(it)), int(next(it)), int(next(it))))
        fills.append(next(it))
    pattern = tuple(int(next(it)) for _ in range(k))
    return PosterParams(k, grad_dir, levels, subject, tuple(slots), tuple(fills),
                        style, text_row, pattern, frame), pos


def _grid_bytes(grid: Array) -> bytes:
    return np.ascontiguousarray(grid, dtype="<f8").tobytes()


def _read_grid(buf: memoryview, pos: int, k: int) -> tuple[Array, int]:
    grid = np.frombuffer(buf, dtype="<f8", count=k * k, offset=pos)
    return grid.reshape(k, k).astype(np.float64), pos + 8 * k * k


def encode_sample_body(s: TaskSample) -> bytes:
    head = struct.pack("<BQdd", kind_index(s.kind), s.seed,
                       s.ratio_code[0], s.ratio_code[1])
    return (head + _encode_params(s.params) + _grid_bytes(s.cond_ref)
            + _grid_bytes(s.cond_mask) + _grid_bytes(s.target))


def decode_sample_body(buf: memoryview, pos: int) -> tuple[TaskSample, int]:
    kind_id, seed, ra, rb = struct.unpack_from("<BQdd", buf, pos)
    pos += struct.calcsize("<BQdd")
    params, pos = _decode_params(buf, pos)
    ref, pos = _read_grid(buf, pos, params.k)
    mask, pos = _read_grid(buf, pos, params.k)
    target, pos = _read_grid(buf, pos, params.k)
    return TaskSample(TASKS[kind_id], params, ref, mask, (ra, rb), target,
                      seed), pos


def write_record_file(path, records: list[tuple[int, bytes]],
                      meta: dict[str, str]) -> None:
    """Shared framing: magic, text header, then length-prefixed records."""
    lines = [f"schema = {_SCHEMA}", f"records = {len(records)}"]
    for key in sorted(meta):
        if key in ("schema", "records"):
            raise DatasetError(f"reserved meta key {key!r}")
        lines.append(f"{key} = {meta[key]}")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        f.write(_HEADER_END)
        for rtype, body in records:
            f.write(struct.pack("<IB", len(body), rtype))
            f.write(body)


def read_record_file(path) -> tuple[list[tuple[int, memoryview]], dict[str, str]]:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(DATASET_MAGIC):
        raise DatasetError(f"{path}: bad magic")
    end = blob.find(_HEADER_END, len(DATASET_MAGIC))
    if end < 0:
        raise DatasetError(f"{path}: missing header terminator")
    meta: dict[str, str] = {}
    for line in blob[len(DATASET_MAGIC):end].decode("utf-8").splitlines():
        if line.strip():
            key, _, val = line.partition(" = ")
            meta[key.strip()] = val.strip()
    if int(meta.get("schema", "-1")) != _SCHEMA:
        raise DatasetError(f"{path}: schema version mismatch")
    count = int(meta.get("records", "0"))
    buf = memoryview(blob)
    pos = end + len(_HEADER_END)
    records: list[tuple[int, memoryview]] = []
    for _ in range(count):
        if pos + 5 > len(blob):
            raise DatasetError(f"{path}: truncated record header")
        size, rtype = struct.unpack_from("<IB", buf, pos)
        pos += 5
        if pos + size > len(blob):
            raise DatasetError(f"{path}: truncated record payload")
        records.append((rtype, buf[pos:pos + size]))
        pos += size
    if pos != len(blob):
        raise DatasetError(f"{path}: trailing bytes after last record")
    return records, meta


def task_mix(samples: list[TaskSample]) -> str:
    counts: dict[str, int] = {}
    for s in samples:
        counts[s.kind] = counts.get(s.kind, 0) + 1
    return ",".join(f"{k}:{counts[k]}" for k in TASKS if k in counts)


def write_dataset(samples: list[TaskSample], path,
                  meta: dict[str, str] | None = None) -> None:
    meta = dict(meta or {})
    if samples:
        meta.setdefault("k", str(samples[0].k))
    meta.setdefault("task_mix", task_mix(samples))
    records = [(RECORD_SAMPLE, encode_sample_body(s)) for s in samples]
    write_record_file(path, records, meta)


def read_dataset(path) -> tuple[list[TaskSample], dict[str, str]]:
    records, meta = read_record_file(path)
    samples = []
    for rtype, body in records:
        if rtype != RECORD_SAMPLE:
            raise DatasetError(f"{path}: unexpected record type {rtype}")
        sample, used = decode_sample_body(body, 0)
        if used != len(body):
            raise DatasetError(f"{path}: record size mismatch")
        samples.append(sample)
    return samples, meta


def by_kind(samples: list[TaskSample]) -> dict[str, list[TaskSample]]:
    out: dict[str, list[TaskSample]] = {}
    for s in samples:
        out.setdefault(s.kind, []).append(s)
    return out
