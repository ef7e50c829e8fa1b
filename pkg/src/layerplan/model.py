"""Deterministic toy decoder transformer and the canonical weight normalizer.

Every linear weight lives in one of seven canonical per-layer slots
(``q, k, v, o, gate, up, down``), stored ``(out, in)`` as float32. Weights are
drawn from a counter-based Philox stream keyed by ``(seed, layer, slot)``, so
any slot can be regenerated without touching the others.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

SLOTS: tuple[str, ...] = ("q", "k", "v", "o", "gate", "up", "down")
ATTN_SLOTS: tuple[str, ...] = ("q", "k", "v", "o")
FFN_SLOTS: tuple[str, ...] = ("gate", "up", "down")
# group aliases accepted by inject_outlier; scaling `down` scales the whole FFN update
SLOT_ALIASES = {"ffn": "down", "attn": "o"}

LAYOUTS = ("plain", "fused-qkv", "fused-gate-up", "conv1d-transposed")
WEIGHT_MAGIC = b"NVEW1"


class ModelSpecError(ValueError):
    pass


class WeightLayoutError(ValueError):
    """Raised when a raw weight container cannot be mapped onto canonical slots."""


class TokenError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    hidden_dim: int
    ffn_dim: int
    num_heads: int
    vocab_size: int
    seed: int = 0
    rms_eps: float = 1e-5
    # embedding entries are uniform in [-embed_scale, +embed_scale]
    embed_scale: float = 4.0

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "ffn_dim", "num_heads", "vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ModelSpecError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads != 0:
            raise ModelSpecError(
                f"hidden_dim % num_heads == 0 violated: {self.hidden_dim} % {self.num_heads}"
            )
        if not 0 <= int(self.seed) < 2**64:
            raise ModelSpecError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def slot_shape(self, slot: str) -> tuple[int, int]:
        d, f = self.hidden_dim, self.ffn_dim
        if slot in ATTN_SLOTS:
            return (d, d)
        if slot in ("gate", "up"):
            return (f, d)
        if slot == "down":
            return (d, f)
        raise KeyError(slot)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LayerWeights:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray
    gate: np.ndarray
    up: np.ndarray
    down: np.ndarray
    bias: Mapping[str, np.ndarray] = field(default_factory=dict)

    def slot(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def nbytes(self) -> int:
        return sum(self.slot(s).nbytes for s in SLOTS) + sum(b.nbytes for b in self.bias.values())


@dataclass(frozen=True)
class ToyModel:
    spec: ModelSpec
    embedding: np.ndarray  # (vocab, hidden)
    layers: tuple[LayerWeights, ...]

    def __post_init__(self):
        if len(self.layers) != self.spec.num_layers:
            raise ModelSpecError(
                f"spec says {self.spec.num_layers} layers, got {len(self.layers)} weight blocks"
            )

    @property
    def num_layers(self) -> int:
        return self.spec.num_layers

    def layer_bytes(self) -> list[int]:
        return [lw.nbytes() for lw in self.layers]

    def weight_digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.embedding.tobytes())
        for i, lw in enumerate(self.layers):
            for s in SLOTS:
                h.update(f"{i}.{s}".encode())
                h.update(lw.slot(s).tobytes())
            for name in sorted(lw.bias):
                h.update(f"{i}.{name}.bias".encode())
                h.update(lw.bias[name].tobytes())
        return h.hexdigest()

    def architecture_key(self) -> str:
        """Content key: spec digest plus a digest of every weight byte."""
        blob = f"{self.spec.digest()}:{self.weight_digest()}"
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# construction


def _slot_stream(seed: int, layer: int, tag: int) -> np.random.Generator:
    # 128-bit Philox key: high word = seed, low word = (layer + 1, slot tag)
    key = (int(seed) << 64) | ((layer + 1) << 16) | tag
    return np.random.Generator(np.random.Philox(key=key))


def _uniform(seed: int, layer: int, tag: int, shape: tuple[int, ...], bound: float) -> np.ndarray:
    u = _slot_stream(seed, layer, tag).random(int(np.prod(shape)))
    return _frozen(((2.0 * u - 1.0) * bound).reshape(shape))


def build_toy_model(spec: ModelSpec) -> ToyModel:
    bound = 1.0 / np.sqrt(spec.hidden_dim)
    embedding = _uniform(spec.seed, -1, 0, (spec.vocab_size, spec.hidden_dim), spec.embed_scale)
    layers = []
    for i in range(spec.num_layers):
        slots = {
            s: _uniform(spec.seed, i, t + 1, spec.slot_shape(s), bound) for t, s in enumerate(SLOTS)
        }
        layers.append(LayerWeights(**slots))
    return ToyModel(spec, embedding, tuple(layers))


def inject_outlier(model: ToyModel, layer: int, slot: str, factor: float) -> ToyModel:
    """Return a copy of ``model`` with one slot of one layer multiplied by ``factor``.

    ``slot`` may be a canonical slot name or the alias ``"ffn"`` (scales ``down``,
    hence the whole FFN update) or ``"attn"`` (scales ``o``).
    """
    if not 0 <= layer < model.num_layers:
        raise IndexError(f"layer {layer} out of range for {model.num_layers}-layer model")
    name = SLOT_ALIASES.get(slot, slot)
    if name not in SLOTS:
        raise KeyError(f"unknown slot {slot!r}; expected one of {SLOTS + tuple(SLOT_ALIASES)}")
    if not factor >= 0 or not np.isfinite(factor):
        raise ValueError(f"factor must be finite and non-negative, got {factor}")
    lw = model.layers[layer]
    scaled = _frozen(lw.slot(name) * np.float32(factor))
    layers = list(model.layers)
    layers[layer] = replace(lw, **{name: scaled})
    return replace(model, layers=tuple(layers))


def graded_outliers(
    model: ToyModel, low: float = 1.0, high: float = 8.0, seed: int = 0, slot: str = "ffn"
) -> ToyModel:
    """Scale one slot in every layer by a seeded permutation of ``geomspace(low, high, L)``.

    Gives a model whose layers have clearly separated, distinct importances.
    """
    factors = np.random.default_rng(seed).permutation(np.geomspace(low, high, model.num_layers))
    for i, f in enumerate(factors):
        model = inject_outlier(model, i, slot, float(f))
    return model


# ---------------------------------------------------------------------------
# forward pass


def rms_norm(x: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True, dtype=np.float32)
    return (x / np.sqrt(ms + np.float32(eps))).astype(np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    return (x / (np.float32(1.0) + np.exp(-x))).astype(np.float32)


Linear = Callable[[int, str, np.ndarray], np.ndarray]


def dense_linear(lw: LayerWeights) -> Callable[[str, np.ndarray], np.ndarray]:
    def apply(slot: str, x: np.ndarray) -> np.ndarray:
        y = x @ lw.slot(slot).T
        if slot in lw.bias:
            y = y + lw.bias[slot]
        return y.astype(np.float32)

    return apply


@dataclass(frozen=True)
class LayerTaps:
    """Per-token activations recorded while a layer executes."""

    layer_input: np.ndarray  # residual stream entering the layer, (T, d)
    q: np.ndarray  # (T, d)
    v: np.ndarray  # (T, d)
    ffn_out: np.ndarray  # (T, d)


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, num_heads: int) -> np.ndarray:
    t, d = q.shape
    hd = d // num_heads
    qh = q.reshape(t, num_heads, hd).transpose(1, 0, 2)
    kh = k.reshape(t, num_heads, hd).transpose(1, 0, 2)
    vh = v.reshape(t, num_heads, hd).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) / np.float32(np.sqrt(hd))
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(mask, np.float32(-np.inf), scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w = w / w.sum(axis=-1, keepdims=True)
    out = (w @ vh).transpose(1, 0, 2).reshape(t, d)
    return out.astype(np.float32)


def layer_step(
    x: np.ndarray,
    linear: Callable[[str, np.ndarray], np.ndarray],
    num_heads: int,
    eps: float,
) -> tuple[np.ndarray, LayerTaps]:
    """Run one pre-norm block on the residual stream ``x`` of shape (T, d)."""
    h = rms_norm(x, eps)
    q = linear("q", h)
    k = linear("k", h)
    v = linear("v", h)
    attn = linear("o", causal_attention(q, k, v, num_heads))
    x_mid = (x + attn).astype(np.float32)
    h2 = rms_norm(x_mid, eps)
    ffn = linear("down", silu(linear("gate", h2)) * linear("up", h2))
    out = (x_mid + ffn).astype(np.float32)
    return out, LayerTaps(layer_input=x, q=q, v=v, ffn_out=ffn)


@dataclass(frozen=True)
class ForwardResult:
    hidden: np.ndarray  # final-normed hidden states, (T, d)
    taps: dict[int, LayerTaps]  # executed layers only

    @property
    def executed(self) -> list[int]:
        return sorted(self.taps)


def check_tokens(tokens: Sequence[int], vocab_size: int) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise TokenError("token sequence must be a non-empty 1-D sequence")
    bad = ids[(ids < 0) | (ids >= vocab_size)]
    if bad.size:
        raise TokenError(f"token id {int(bad[0])} out of range [0, {vocab_size})")
    return ids


def forward(
    model: ToyModel,
    tokens: Sequence[int],
    active_layers: Iterable[int] | None = None,
    linear: Linear | None = None,
    on_layer: Callable[[int], None] | None = None,
) -> ForwardResult:
    """Full forward pass.

    Layers outside ``active_layers`` are the identity on the residual stream.
    ``linear(layer, slot, x)`` overrides the dense matmul (quantized execution);
    ``on_layer(layer)`` is called before each executed layer (pager hook).
    """
    spec = model.spec
    ids = check_tokens(tokens, spec.vocab_size)
    active = set(range(spec.num_layers)) if active_layers is None else set(active_layers)
    unknown = [i for i in active if not 0 <= i < spec.num_layers]
    if unknown:
        raise IndexError(f"active layer {unknown[0]} out of range")
    x = model.embedding[ids].astype(np.float32)
    taps: dict[int, LayerTaps] = {}
    for i, lw in enumerate(model.layers):
        if i not in active:
            continue
        if on_layer is not None:
            on_layer(i)
        if linear is None:
            lin = dense_linear(lw)
        else:
            lin = lambda slot, h, _i=i: linear(_i, slot, h)  # noqa: E731
        x, taps[i] = layer_step(x, lin, spec.num_heads, spec.rms_eps)
    return ForwardResult(hidden=rms_norm(x, spec.rms_eps), taps=taps)


# ---------------------------------------------------------------------------
# raw containers and the normalizer


@dataclass(frozen=True)
class RawTensor:
    data: np.ndarray
    shape: tuple[int, ...]
    layout: str | tuple[str, ...] = "plain"

    def __post_init__(self):
        if int(np.prod(self.shape)) != np.asarray(self.data).size:
            raise WeightLayoutError(
                f"element count {np.asarray(self.data).size} != prod(shape {self.shape})"
            )
        for tag in self.tags:
            if tag not in LAYOUTS:
                raise WeightLayoutError(f"unknown layout tag {tag!r}")

    @property
    def tags(self) -> tuple[str, ...]:
        return (self.layout,) if isinstance(self.layout, str) else tuple(self.layout)

    def array(self) -> np.ndarray:
        return np.asarray(self.data, dtype=np.float32).reshape(self.shape)


# tensor names: "layers.{i}.{slot}", fused "layers.{i}.qkv" / "layers.{i}.gate_up",
# biases "layers.{i}.{slot}.bias"; the embedding is "embedding"
RawWeightContainer = dict  # name -> RawTensor


@dataclass(frozen=True)
class GenericBlockWeights:
    embedding: np.ndarray | None
    layers: tuple[LayerWeights, ...]


def _oriented(name: str, t: RawTensor) -> np.ndarray:
    a = t.array()
    if "conv1d-transposed" in t.tags:
        if a.ndim != 2:
            raise WeightLayoutError(f"{name}: conv1d-transposed tensor must be 2-D, got {a.shape}")
        a = a.T
    return np.ascontiguousarray(a)


def _expect(name: str, a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if a.shape != shape:
        raise WeightLayoutError(f"{name}: expected shape {shape}, got {a.shape}")
    return a


def normalize_weights(raw: Mapping[str, RawTensor], spec: ModelSpec) -> GenericBlockWeights:
    d, f = spec.hidden_dim, spec.ffn_dim
    layers = []
    for i in range(spec.num_layers):
        pre = f"layers.{i}."
        slots: dict[str, np.ndarray] = {}
        bias: dict[str, np.ndarray] = {}

        fused_qkv = raw.get(pre + "qkv")
        if fused_qkv is not None:
            a = _expect(pre + "qkv", _oriented(pre + "qkv", fused_qkv), (3 * d, d))
            slots["q"], slots["k"], slots["v"] = a[:d], a[d : 2 * d], a[2 * d :]
            b = raw.get(pre + "qkv.bias")
            if b is not None:
                bv = _expect(pre + "qkv.bias", b.array().reshape(-1), (3 * d,))
                bias["q"], bias["k"], bias["v"] = bv[:d], bv[d : 2 * d], bv[2 * d :]
        fused_gu = raw.get(pre + "gate_up")
        if fused_gu is not None:
            a = _expect(pre + "gate_up", _oriented(pre + "gate_up", fused_gu), (2 * f, d))
            slots["gate"], slots["up"] = a[:f], a[f:]
            b = raw.get(pre + "gate_up.bias")
            if b is not None:
                bv = _expect(pre + "gate_up.bias", b.array().reshape(-1), (2 * f,))
                bias["gate"], bias["up"] = bv[:f], bv[f:]

        for s in SLOTS:
            t = raw.get(pre + s)
            if t is not None:
                if s in slots:
                    raise WeightLayoutError(f"{pre + s}: slot given both fused and separately")
                slots[s] = _expect(pre + s, _oriented(pre + s, t), spec.slot_shape(s))
            elif s not in slots:
                raise WeightLayoutError(f"missing slot {pre + s} (shape {spec.slot_shape(s)})")
            b = raw.get(pre + s + ".bias")
            if b is not None:
                bias[s] = _expect(pre + s + ".bias", b.array().reshape(-1), (spec.slot_shape(s)[0],))

        layers.append(
            LayerWeights(
                **{s: _frozen(slots[s]) for s in SLOTS},
                bias={k: _frozen(v) for k, v in bias.items()},
            )
        )
    emb = raw.get("embedding")
    embedding = None
    if emb is not None:
        embedding = _frozen(_expect("embedding", emb.array(), (spec.vocab_size, d)))
    return GenericBlockWeights(embedding=embedding, layers=tuple(layers))


def model_from_weights(spec: ModelSpec, weights: GenericBlockWeights) -> ToyModel:
    if weights.embedding is None:
        raise WeightLayoutError("container has no embedding tensor")
    return ToyModel(spec, weights.embedding, weights.layers)


def model_to_container(model: ToyModel) -> dict[str, RawTensor]:
    raw = {"embedding": RawTensor(model.embedding, model.embedding.shape)}
    for i, lw in enumerate(model.layers):
        for s in SLOTS:
            a = lw.slot(s)
            raw[f"layers.{i}.{s}"] = RawTensor(a, a.shape)
        for s, b in lw.bias.items():
            raw[f"layers.{i}.{s}.bias"] = RawTensor(b, b.shape)
    return raw


# ---------------------------------------------------------------------------
# NVEW1 weight container file


def write_weight_container(path: str | Path, raw: Mapping[str, RawTensor], spec: ModelSpec | None = None):
    """Write ``raw`` as: magic, u32 LE header length, canonical JSON header, f32 LE data."""
    names = list(raw)
    header = {
        "tensors": [
            {
                "name": n,
                "shape": list(raw[n].shape),
                "layout": list(raw[n].tags),
                "dtype": "f32le",
            }
            for n in names
        ],
    }
    if spec is not None:
        header["spec"] = spec.to_dict()
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(raw[n].array().astype("<f4").tobytes())
    tmp.replace(path)


def read_weight_container(path: str | Path) -> tuple[dict[str, RawTensor], ModelSpec | None]:
    data = Path(path).read_bytes()
    if data[:5] != WEIGHT_MAGIC:
        raise WeightLayoutError(f"{path}: bad magic {data[:5]!r}")
    (hlen,) = struct.unpack_from("<I", data, 5)
    header = json.loads(data[9 : 9 + hlen])
    off = 9 + hlen
    raw = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        if off + 4 * n > len(data):
            raise WeightLayoutError(f"{path}: truncated data for {entry['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float32)
        off += 4 * n
        layout = tuple(entry["layout"])
        raw[entry["name"]] = RawTensor(arr.reshape(shape), shape, layout[0] if len(layout) == 1 else layout)
    if off != len(data):
        raise WeightLayoutError(f"{path}: {len(data) - off} trailing bytes")
    spec = ModelSpec(**header["spec"]) if "spec" in header else None
    return raw, spec
