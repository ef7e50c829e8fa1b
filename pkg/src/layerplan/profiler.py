"""Per-layer activation profiling and the importance-profile artifact.

The profiler streams the model one layer at a time: all calibration prompts are
pushed through layer ``i`` against their recorded residual streams before layer
``i + 1`` is loaded, so only one layer's weights are ever resident.

Aggregation is per-prompt token mean followed by the prompt mean, both summed
with :func:`math.fsum`. ``fsum`` is correctly rounded, so scores do not depend
on prompt order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.stats import rankdata

from .model import LayerWeights, ToyModel, check_tokens, dense_linear, layer_step

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_TAU = 0.7
DEFAULT_EPSILON = 1e-9
W4A16 = "W4A16"
W4A8 = "W4A8"
CACHE_ENV = "LAYERPLAN_CACHE_DIR"
DEFAULT_CACHE_DIR = Path("~/.cache/layerplan/importance")

PROFILE_FIELDS = (
    "architecture_key",
    "assignments",
    "epsilon",
    "format_version",
    "normalized_scores",
    "prompt_count",
    "raw_scores",
    "scorer_id",
    "tau",
)


class ProfileError(ValueError):
    pass


class ProfileFormatError(ProfileError):
    """Malformed or unsupported profile bytes."""


class Scorer(str, Enum):
    COMBINED = "combined"
    FFN_ONLY = "ffn_only"
    ATTN_ONLY = "attn_only"
    INPUT_L2 = "input_l2"


@dataclass(frozen=True)
class CalibrationSet:
    prompts: tuple[tuple[int, ...], ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.prompts:
            raise ProfileError("calibration set is empty")
        if any(len(p) == 0 for p in self.prompts):
            raise ProfileError("calibration prompts must be non-empty")
        if self.labels and len(self.labels) != len(self.prompts):
            raise ProfileError("one domain label per prompt")

    @property
    def count(self) -> int:
        return len(self.prompts)

    @classmethod
    def from_lists(cls, prompts, labels=()) -> "CalibrationSet":
        return cls(tuple(tuple(int(t) for t in p) for p in prompts), tuple(labels))

    def subset(self, indices: Sequence[int]) -> "CalibrationSet":
        labels = tuple(self.labels[i] for i in indices) if self.labels else ()
        return CalibrationSet(tuple(self.prompts[i] for i in indices), labels)

    def digest(self) -> str:
        blob = json.dumps([list(p) for p in self.prompts], separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_json(self) -> dict:
        return {"prompts": [list(p) for p in self.prompts], "labels": list(self.labels)}


DOMAINS = ("science", "code", "history", "math")


def synthetic_calibration(
    vocab_size: int, count: int = 12, seed: int = 0, min_len: int = 8, max_len: int = 24
) -> CalibrationSet:
    """Deterministic stand-in for a stratified prompt set: random token ids, varied lengths."""
    rng = np.random.default_rng([seed, 0xCA1B])
    prompts = []
    for _ in range(count):
        n = int(rng.integers(min_len, max_len + 1))
        prompts.append(tuple(int(t) for t in rng.integers(0, vocab_size, n)))
    labels = tuple(DOMAINS[i % len(DOMAINS)] for i in range(count))
    return CalibrationSet(tuple(prompts), labels)


# ---------------------------------------------------------------------------
# per-token statistics


def attn_proxy(q_vec, v_vec) -> float | np.ndarray:
    """L2 norm of the concatenation ``[q, v]``; vectorised over leading axes."""
    q = np.asarray(q_vec, dtype=np.float64)
    v = np.asarray(v_vec, dtype=np.float64)
    return np.sqrt(np.sum(q * q, axis=-1) + np.sum(v * v, axis=-1))


def ffn_magnitude(ffn_out) -> float | np.ndarray:
    f = np.asarray(ffn_out, dtype=np.float64)
    return np.sqrt(np.sum(f * f, axis=-1))


def token_scores(taps, scorer: Scorer | str) -> np.ndarray:
    scorer = Scorer(scorer)
    if scorer is Scorer.COMBINED:
        return attn_proxy(taps.q, taps.v) + ffn_magnitude(taps.ffn_out)
    if scorer is Scorer.FFN_ONLY:
        return ffn_magnitude(taps.ffn_out)
    if scorer is Scorer.ATTN_ONLY:
        return attn_proxy(taps.q, taps.v)
    return ffn_magnitude(taps.layer_input)


class WeightStreamer:
    """Hands out one layer's weights at a time and counts resident buffers."""

    def __init__(self, model: ToyModel):
        self.model = model
        self.resident = 0
        self.peak_resident = 0
        self.loads = 0

    @contextmanager
    def load(self, layer: int) -> Iterator[LayerWeights]:
        src = self.model.layers[layer]
        # private copy stands in for the host->device transfer
        buf = LayerWeights(
            **{s: src.slot(s).copy() for s in ("q", "k", "v", "o", "gate", "up", "down")},
            bias={k: v.copy() for k, v in src.bias.items()},
        )
        self.resident += 1
        self.loads += 1
        self.peak_resident = max(self.peak_resident, self.resident)
        try:
            yield buf
        finally:
            self.resident -= 1
            del buf


def collect_statistics(
    model: ToyModel,
    calib: CalibrationSet,
    scorer: Scorer | str = Scorer.COMBINED,
    streamer: WeightStreamer | None = None,
) -> np.ndarray:
    """Per-prompt token-mean statistic, shape ``(prompt_count, num_layers)``."""
    spec = model.spec
    streamer = streamer or WeightStreamer(model)
    hidden = [model.embedding[check_tokens(p, spec.vocab_size)] for p in calib.prompts]
    stats = np.zeros((calib.count, spec.num_layers), dtype=np.float64)
    for i in range(spec.num_layers):
        with streamer.load(i) as lw:
            lin = dense_linear(lw)
            for j, x in enumerate(hidden):
                x_next, taps = layer_step(x, lin, spec.num_heads, spec.rms_eps)
                per_token = token_scores(taps, scorer)
                if not np.all(np.isfinite(per_token)):
                    raise ProfileError(f"non-finite activation at layer {i}, prompt {j}")
                stats[j, i] = math.fsum(per_token.tolist()) / per_token.size
                hidden[j] = x_next
    return stats


# ---------------------------------------------------------------------------
# normalisation and assignment


def minmax_normalize(scores: Sequence[float], epsilon: float = DEFAULT_EPSILON) -> list[float]:
    s = [float(x) for x in scores]
    if not s:
        raise ProfileError("cannot normalise an empty score vector")
    lo, hi = min(s), max(s)
    if hi - lo < epsilon:
        return [0.0] * len(s)
    span = hi - lo
    return [(x - lo) / span for x in s]


def assign(normalized: Sequence[float], tau: float) -> list[str]:
    return [W4A16 if x >= tau else W4A8 for x in normalized]


@dataclass(frozen=True)
class ImportanceProfile:
    raw_scores: tuple[float, ...]
    normalized_scores: tuple[float, ...]
    tau: float
    assignments: tuple[str, ...]
    architecture_key: str
    scorer_id: str = Scorer.COMBINED.value
    prompt_count: int = 0
    epsilon: float = DEFAULT_EPSILON
    format_version: int = FORMAT_VERSION
    # per-prompt statistics; not part of the serialized artifact
    per_prompt: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        n = len(self.raw_scores)
        if not (len(self.normalized_scores) == len(self.assignments) == n):
            raise ProfileFormatError(
                f"length mismatch: raw={n} normalized={len(self.normalized_scores)} "
                f"assignments={len(self.assignments)}"
            )

    @property
    def num_layers(self) -> int:
        return len(self.raw_scores)

    def w4a16_layers(self) -> list[int]:
        return [i for i, a in enumerate(self.assignments) if a == W4A16]


def profile_from_stats(
    stats: np.ndarray,
    tau: float = DEFAULT_TAU,
    epsilon: float = DEFAULT_EPSILON,
    architecture_key: str = "",
    scorer: Scorer | str = Scorer.COMBINED,
) -> ImportanceProfile:
    stats = np.asarray(stats, dtype=np.float64)
    if stats.ndim != 2 or stats.shape[0] == 0:
        raise ProfileError("statistics must be (prompts, layers) with at least one prompt")
    if tau < 0:
        raise ProfileError(f"tau must be >= 0, got {tau}")
    if not epsilon > 0:
        raise ProfileError(f"epsilon must be > 0, got {epsilon}")
    k = stats.shape[0]
    raw = [math.fsum(stats[:, i].tolist()) / k for i in range(stats.shape[1])]
    norm = minmax_normalize(raw, epsilon)
    return ImportanceProfile(
        raw_scores=tuple(raw),
        normalized_scores=tuple(norm),
        tau=float(tau),
        assignments=tuple(assign(norm, tau)),
        architecture_key=architecture_key,
        scorer_id=Scorer(scorer).value,
        prompt_count=k,
        epsilon=float(epsilon),
        per_prompt=stats,
    )


def profile(
    model: ToyModel,
    calib: CalibrationSet,
    scorer: Scorer | str = Scorer.COMBINED,
    tau: float = DEFAULT_TAU,
    epsilon: float = DEFAULT_EPSILON,
    streamer: WeightStreamer | None = None,
) -> ImportanceProfile:
    if tau < 0:
        raise ProfileError(f"tau must be >= 0, got {tau}")
    if not epsilon > 0:
        raise ProfileError(f"epsilon must be > 0, got {epsilon}")
    stats = collect_statistics(model, calib, scorer, streamer)
    return profile_from_stats(stats, tau, epsilon, model.architecture_key(), scorer)


def profile_from_normalized(normalized: Sequence[float], tau: float = DEFAULT_TAU) -> ImportanceProfile:
    """Wrap an externally supplied normalised vector (e.g. a published table)."""
    norm = tuple(float(x) for x in normalized)
    return ImportanceProfile(
        raw_scores=norm,
        normalized_scores=norm,
        tau=float(tau),
        assignments=tuple(assign(norm, tau)),
        architecture_key="",
        prompt_count=0,
    )


# ---------------------------------------------------------------------------
# stability metrics


def top_k(scores: Sequence[float], k: int) -> list[int]:
    """Indices of the ``k`` largest scores; ties go to the lower index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


def _scores(p) -> list[float]:
    return list(p.raw_scores) if isinstance(p, ImportanceProfile) else [float(x) for x in p]


def topk_overlap(a, b, k: int) -> float:
    sa, sb = _scores(a), _scores(b)
    if len(sa) != len(sb):
        raise ProfileError(f"layer counts differ: {len(sa)} vs {len(sb)}")
    if not 1 <= k <= len(sa):
        raise ProfileError(f"k={k} outside [1, {len(sa)}]")
    return len(set(top_k(sa, k)) & set(top_k(sb, k))) / k


def spearman(a, b) -> float:
    """Rank correlation with average ranks for ties (Pearson on the rank vectors)."""
    sa, sb = _scores(a), _scores(b)
    if len(sa) != len(sb):
        raise ProfileError(f"layer counts differ: {len(sa)} vs {len(sb)}")
    ra, rb = rankdata(sa), rankdata(sb)
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        return float("nan")
    return float(da @ db) / denom


def split_half_overlap(
    model: ToyModel,
    calib: CalibrationSet,
    scorer: Scorer | str = Scorer.COMBINED,
    k: int = 1,
) -> float:
    """Profile even- and odd-indexed prompts separately and compare top-k sets."""
    if calib.count < 2:
        raise ProfileError("split-half needs at least two prompts")
    if not 1 <= k <= model.num_layers:
        raise ProfileError(f"k={k} outside [1, {model.num_layers}]")
    even = calib.subset(range(0, calib.count, 2))
    odd = calib.subset(range(1, calib.count, 2))
    a = profile(model, even, scorer)
    b = profile(model, odd, scorer)
    return topk_overlap(a, b, k)


# ---------------------------------------------------------------------------
# artifact


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def profile_to_dict(p: ImportanceProfile) -> dict:
    return {
        "architecture_key": p.architecture_key,
        "assignments": list(p.assignments),
        "epsilon": float(p.epsilon),
        "format_version": int(p.format_version),
        "normalized_scores": [float(x) for x in p.normalized_scores],
        "prompt_count": int(p.prompt_count),
        "raw_scores": [float(x) for x in p.raw_scores],
        "scorer_id": str(p.scorer_id),
        "tau": float(p.tau),
    }


def serialize_profile(p: ImportanceProfile) -> bytes:
    return _canonical(profile_to_dict(p))


def load_profile(data: bytes | str) -> ImportanceProfile:
    try:
        obj = json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProfileFormatError(f"profile is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProfileFormatError("profile must be a JSON object")
    if obj.get("format_version") != FORMAT_VERSION:
        raise ProfileFormatError(f"unknown format_version {obj.get('format_version')!r}")
    missing = [k for k in PROFILE_FIELDS if k not in obj]
    if missing:
        raise ProfileFormatError(f"profile missing fields {missing}")
    extra = sorted(set(obj) - set(PROFILE_FIELDS))
    if extra:
        raise ProfileFormatError(f"profile has unknown fields {extra}")
    try:
        Scorer(obj["scorer_id"])
    except ValueError as exc:
        raise ProfileFormatError(str(exc)) from exc
    bad = [a for a in obj["assignments"] if a not in (W4A16, W4A8)]
    if bad:
        raise ProfileFormatError(f"unknown precision assignment {bad[0]!r}")
    return ImportanceProfile(
        raw_scores=tuple(float(x) for x in obj["raw_scores"]),
        normalized_scores=tuple(float(x) for x in obj["normalized_scores"]),
        tau=float(obj["tau"]),
        assignments=tuple(obj["assignments"]),
        architecture_key=str(obj["architecture_key"]),
        scorer_id=obj["scorer_id"],
        prompt_count=int(obj["prompt_count"]),
        epsilon=float(obj["epsilon"]),
        format_version=int(obj["format_version"]),
    )


def profile_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# cache


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, DEFAULT_CACHE_DIR)).expanduser()


def cache_path(cache_dir, model: ToyModel, calib: CalibrationSet, scorer, tau, epsilon) -> Path:
    # one entry per architecture key; the suffix separates profiling settings
    variant = hashlib.sha256(
        _canonical([Scorer(scorer).value, float(tau), float(epsilon), calib.digest()])
    ).hexdigest()[:16]
    return Path(cache_dir) / f"{model.architecture_key()}.{variant}.json"


def cache_get_or_profile(
    cache_dir,
    model: ToyModel,
    calib: CalibrationSet,
    scorer: Scorer | str = Scorer.COMBINED,
    tau: float = DEFAULT_TAU,
    epsilon: float = DEFAULT_EPSILON,
) -> tuple[ImportanceProfile, bool, float]:
    """Return ``(profile, cache_hit, on_device_ms)``; a hit costs 0 ms."""
    cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    path = cache_path(cache_dir, model, calib, scorer, tau, epsilon)
    if path.exists():
        try:
            cached = load_profile(path.read_bytes())
            if cached.architecture_key != model.architecture_key():
                raise ProfileFormatError("architecture key does not match entry name")
            return cached, True, 0.0
        except (ProfileError, OSError) as exc:
            log.warning("ignoring corrupt cache entry %s: %s", path, exc)
    start = time.perf_counter()
    p = profile(model, calib, scorer, tau, epsilon)
    elapsed_ms = (time.perf_counter() - start) * 1000.0
    cache_dir.mkdir(parents=True, exist_ok=True)
    atomic_write(path, serialize_profile(p))
    return p, False, elapsed_ms
