"""Dense numeric substrate: a small MLP with analytic gradients, low-rank
adapters, AdamW, seeded randomness, and the FFCKPT1 checkpoint format.

Everything is float64 and deterministic under seed. The MLP uses tanh on
hidden layers and identity on the output layer; backprop is written by hand
so gradients can be checked against finite differences without an autodiff
dependency.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ShapeError

Array = np.ndarray

CHECKPOINT_MAGIC = b"FFCKPT1\n"


# ---------------------------------------------------------------------------
# randomness

def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; same seed, same stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split off n independent child streams."""
    return list(rng.spawn(n))


def stage_seed(root_seed: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the run seed and stage name."""
    ss = np.random.SeedSequence([root_seed, *stage.encode()])
    return int(ss.generate_state(1, np.uint64)[0] % (2**63))


# ---------------------------------------------------------------------------
# parameters

_ACTIVATIONS = ("tanh",)


@dataclass
class MlpParams:
    """Weights (out, in) and biases (out,) per layer, tanh hidden / identity out."""

    weights: list[Array]
    biases: list[Array]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights/biases layer count mismatch")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} width incompatible with layer {i - 1}")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[0],):
                raise ShapeError("bias width mismatch")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def flat(self) -> list[Array]:
        out: list[Array] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def init_mlp(widths, rng: np.random.Generator, activation: str = "tanh") -> MlpParams:
    """Xavier-scaled init; biases zero."""
    widths = list(widths)
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        s = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.normal(0.0, s, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation)


# ---------------------------------------------------------------------------
# low-rank adapters

@dataclass
class LowRankAdapter:
    """Additive delta scale * up @ down on one layer's weight matrix."""

    layer: int
    down: Array  # (rank, in_dim)
    up: Array    # (out_dim, rank)
    scale: float = 1.0

    def __post_init__(self):
        if self.down.shape[0] != self.up.shape[1]:
            raise ShapeError("down/up rank mismatch")

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    def delta(self) -> Array:
        return self.scale * (self.up @ self.down)

    def copy(self) -> "LowRankAdapter":
        return LowRankAdapter(self.layer, self.down.copy(), self.up.copy(), self.scale)


# One adapter per layer, keyed by layer index.
AdapterSet = dict[int, LowRankAdapter]


def init_adapters(
    params: MlpParams,
    rank: int,
    rng: np.random.Generator,
    scale: float = 1.0,
    down_std: float = 0.02,
) -> AdapterSet:
    """Attach an adapter to every weight matrix.

    Down-projections get a small Gaussian init, up-projections start at zero,
    so the adapted network is exactly the base network until training moves
    the up matrices.
    """
    adapters: AdapterSet = {}
    for i, w in enumerate(params.weights):
        out_dim, in_dim = w.shape
        adapters[i] = LowRankAdapter(
            layer=i,
            down=rng.normal(0.0, down_std, size=(rank, in_dim)),
            up=np.zeros((out_dim, rank)),
            scale=scale,
        )
    return adapters


def copy_adapters(adapters: AdapterSet) -> AdapterSet:
    return {i: a.copy() for i, a in adapters.items()}


def adapter_flat(adapters: AdapterSet) -> list[Array]:
    out: list[Array] = []
    for i in sorted(adapters):
        out.extend((adapters[i].down, adapters[i].up))
    return out


def apply_adapter(params: MlpParams, adapter: LowRankAdapter) -> MlpParams:
    """Bake one adapter's delta into a copy of the base weights."""
    if not 0 <= adapter.layer < params.n_layers:
        raise ShapeError(f"layer index {adapter.layer} out of range")
    w = params.weights[adapter.layer]
    if adapter.down.shape[1] != w.shape[1] or adapter.up.shape[0] != w.shape[0]:
        raise ShapeError("adapter dims do not match target layer")
    out = params.copy()
    out.weights[adapter.layer] = w + adapter.delta()
    return out


def apply_adapter_set(params: MlpParams, adapters: AdapterSet) -> MlpParams:
    out = params
    for i in sorted(adapters):
        out = apply_adapter(out, adapters[i])
    return out


def merge_adapters_linear(
    a: AdapterSet, b: AdapterSet, wa: float, wb: float
) -> dict[int, Array]:
    """Dense per-layer deltas wa*delta_a + wb*delta_b (rank may exceed r)."""
    if set(a) != set(b):
        raise ShapeError("adapter sets cover different layers")
    merged: dict[int, Array] = {}
    for i in sorted(a):
        if a[i].delta().shape != b[i].delta().shape:
            raise ShapeError(f"layer {i} delta shapes differ")
        merged[i] = wa * a[i].delta() + wb * b[i].delta()
    return merged


def apply_deltas(params: MlpParams, deltas: dict[int, Array]) -> MlpParams:
    out = params.copy()
    for i, d in deltas.items():
        if d.shape != out.weights[i].shape:
            raise ShapeError(f"delta shape mismatch on layer {i}")
        out.weights[i] = out.weights[i] + d
    return out


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class Grads:
    """Gradients mirroring MlpParams plus (d_down, d_up) per adapter layer."""

    weights: list[Array]
    biases: list[Array]
    adapters: dict[int, tuple[Array, Array]] = field(default_factory=dict)

    def base_flat(self) -> list[Array]:
        out: list[Array] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def adapter_flat(self) -> list[Array]:
        out: list[Array] = []
        for i in sorted(self.adapters):
            out.extend(self.adapters[i])
        return out


class Tape:
    """Stored activations from one forward pass; backward() gives all grads."""

    def __init__(self, params: MlpParams, adapters: AdapterSet | None,
                 acts: list[Array], downs: dict[int, Array], squeeze: bool):
        self._params = params
        self._adapters = adapters or {}
        self._acts = acts          # acts[0] = input, acts[l+1] = layer l output
        self._downs = downs        # per layer: x @ down.T, shape (B, rank)
        self._squeeze = squeeze

    def backward(self, dout: Array) -> Grads:
        """Backpropagate dLoss/dOutput to every base and adapter parameter."""
        p, ads = self._params, self._adapters
        dout = np.asarray(dout, dtype=np.float64)
        if self._squeeze:
            dout = dout.reshape(1, -1)
        if dout.shape != self._acts[-1].shape:
            raise ShapeError("dout shape does not match tape output")
        n = p.n_layers
        gw: list[Array] = [None] * n  # type: ignore[list-item]
        gb: list[Array] = [None] * n  # type: ignore[list-item]
        gads: dict[int, tuple[Array, Array]] = {}
        grad = dout
        for l in range(n - 1, -1, -1):
            a_prev, a_out = self._acts[l], self._acts[l + 1]
            dz = grad if l == n - 1 else grad * (1.0 - a_out * a_out)
            gw[l] = dz.T @ a_prev
            gb[l] = dz.sum(axis=0)
            grad = dz @ p.weights[l]
            if l in ads:
                ad = ads[l]
                proj = self._downs[l]
                dproj = ad.scale * (dz @ ad.up)
                gads[l] = (dproj.T @ a_prev, ad.scale * (dz.T @ proj))
                grad = grad + ad.scale * ((dz @ ad.up) @ ad.down)
        return Grads(gw, gb, gads)


def _prep_input(params: MlpParams, x: Array) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} != first layer {params.in_dim}")
    return x, squeeze


def forward(params: MlpParams, x: Array, adapters: AdapterSet | None = None) -> Array:
    """Plain forward pass; adapters (if any) contribute scale*up@down deltas."""
    out, _ = _forward_impl(params, x, adapters, keep=False)
    return out


def forward_with_grad(
    params: MlpParams, x: Array, adapters: AdapterSet | None = None
) -> tuple[Array, Tape]:
    """Forward pass that records activations for backprop."""
    return _forward_impl(params, x, adapters, keep=True)


def _forward_impl(params, x, adapters, keep):
    x, squeeze = _prep_input(params, x)
    ads = adapters or {}
    acts = [x]
    downs: dict[int, Array] = {}
    h = x
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        if l in ads:
            ad = ads[l]
            if ad.down.shape[1] != w.shape[1] or ad.up.shape[0] != w.shape[0]:
                raise ShapeError(f"adapter dims do not match layer {l}")
            proj = h @ ad.down.T
            z = z + ad.scale * (proj @ ad.up.T)
            if keep:
                downs[l] = proj
        h = z if l == last else np.tanh(z)
        if keep:
            acts.append(h)
    out = h[0] if squeeze else h
    if not keep:
        return out, None
    return out, Tape(params, ads, acts, downs, squeeze)


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Decoupled weight-decay Adam over a fixed list of parameter arrays.

    Parameters are updated in place; the list identity (ordering) must stay
    stable across steps.
    """

    def __init__(self, params: list[Array], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[Array]) -> None:
        if len(grads) != len(self.params):
            raise ShapeError("gradient list does not match parameter list")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    """A role-tagged model: base params plus optional adapter set."""

    role: str
    params: MlpParams
    adapters: AdapterSet | None = None
    meta: dict[str, str] = field(default_factory=dict)


_HEADER_END = b"---\n"


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Magic line, key=value text header, then little-endian float64 payload.

    Payload order: per layer W then b, then per adapter (ascending layer)
    down then up.
    """
    p = ckpt.params
    payload: list[Array] = p.flat()
    lines = [
        f"role = {ckpt.role}",
        f"widths = {','.join(str(w) for w in p.widths)}",
        f"activation = {p.activation}",
    ]
    if ckpt.adapters:
        specs = ";".join(
            f"{i}:{ckpt.adapters[i].rank}:{ckpt.adapters[i].scale!r}"
            for i in sorted(ckpt.adapters)
        )
        lines.append(f"adapters = {specs}")
        payload.extend(adapter_flat(ckpt.adapters))
    for k in sorted(ckpt.meta):
        if k in ("role", "widths", "activation", "adapters", "payload"):
            raise CheckpointError(f"reserved meta key {k!r}")
        lines.append(f"{k} = {ckpt.meta[k]}")
    count = sum(a.size for a in payload)
    lines.append(f"payload = {count}")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        f.write(_HEADER_END)
        for a in payload:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    end = blob.find(_HEADER_END, len(CHECKPOINT_MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    header = blob[len(CHECKPOINT_MAGIC):end].decode("utf-8")
    fields: dict[str, str] = {}
    for line in header.splitlines():
        if not line.strip():
            continue
        k, _, v = line.partition(" = ")
        fields[k.strip()] = v.strip()
    try:
        role = fields.pop("role")
        widths = [int(w) for w in fields.pop("widths").split(",")]
        activation = fields.pop("activation")
        count = int(fields.pop("payload"))
    except KeyError as e:
        raise CheckpointError(f"{path}: missing header field {e}") from None
    raw = blob[end + len(_HEADER_END):]
    if len(raw) != 8 * count:
        raise CheckpointError(
            f"{path}: payload truncated ({len(raw)} bytes, expected {8 * count})"
        )
    data = np.frombuffer(raw, dtype="<f8")
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        a = data[pos:pos + n].reshape(shape).astype(np.float64)
        pos += n
        return a

    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(take((fan_out, fan_in)))
        biases.append(take((fan_out,)))
    params = MlpParams(weights, biases, activation)
    adapters: AdapterSet | None = None
    spec = fields.pop("adapters", "")
    if spec:
        adapters = {}
        for part in spec.split(";"):
            layer_s, rank_s, scale_s = part.split(":")
            layer, rank = int(layer_s), int(rank_s)
            out_dim, in_dim = params.weights[layer].shape
            down = take((rank, in_dim))
            up = take((out_dim, rank))
            adapters[layer] = LowRankAdapter(layer, down, up, float(scale_s))
    if pos != count:
        raise CheckpointError(f"{path}: payload count mismatch")
    return Checkpoint(role, params, adapters, fields)


