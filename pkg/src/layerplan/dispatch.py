"""Turn an importance profile and a memory budget into an executable plan.

A plan fixes three things: the per-layer precision route (W4A16 for layers at
or above the threshold, W4A8 otherwise), which layers stay on the fast tier
under a byte budget, and the deployment mode:

* ``A_paged``    every layer runs; residency is handled by the pager.
* ``B_hot_only`` only the hot layers run; skipped layers pass the residual
  stream through unchanged.
* ``C_hot_awq``  as B, for models where within-layer saliency scaling is
  viable. The scaling itself is out of scope, so C executes exactly like B.

Also hosts the sweep harnesses (active-layer ratio, threshold, code width)
that measure hidden-state divergence against the full-precision baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .model import SLOTS, Linear, ToyModel, forward
from .profiler import (
    DEFAULT_TAU,
    W4A8,
    W4A16,
    CalibrationSet,
    ImportanceProfile,
    assign,
    profile as run_profile,
    top_k,
)
from .quant import (
    QK,
    Q4_BPW,
    QuantError,
    QuantMatrix,
    _q8_groups,
    matvec_w4a8_codes,
    matvec_w4a16,
    quantize_matrix,
    truncate_codes,
)

if TYPE_CHECKING:
    from .pager import PagerState

DEFAULT_FLOOR_RATIO = 0.5


class PlanError(ValueError):
    pass


class Mode(str, Enum):
    A_PAGED = "A_paged"
    B_HOT_ONLY = "B_hot_only"
    C_HOT_AWQ = "C_hot_awq"

    @classmethod
    def parse(cls, text: str) -> "Mode":
        short = {"A": cls.A_PAGED, "B": cls.B_HOT_ONLY, "C": cls.C_HOT_AWQ}
        return short.get(text) or cls(text)


# ---------------------------------------------------------------------------
# routing and hot-set selection


def route_layers(profile: ImportanceProfile, tau: float) -> tuple[str, ...]:
    return tuple(assign(profile.normalized_scores, tau))


def _layer_sizes(per_layer_bytes: int | Sequence[int], n: int) -> list[int]:
    if isinstance(per_layer_bytes, (int, np.integer)):
        return [int(per_layer_bytes)] * n
    sizes = [int(b) for b in per_layer_bytes]
    if len(sizes) != n:
        raise PlanError(f"{len(sizes)} layer sizes for {n} layers")
    return sizes


def hot_set(
    profile: ImportanceProfile, budget_bytes: int, per_layer_bytes: int | Sequence[int]
) -> tuple[int, ...]:
    """Layers admitted in descending importance until the next one would overflow.

    Ties go to the lower layer index. Admission stops at the first layer that
    does not fit, so the result grows monotonically with the budget.
    """
    if budget_bytes < 0:
        raise PlanError(f"budget must be >= 0, got {budget_bytes}")
    n = profile.num_layers
    sizes = _layer_sizes(per_layer_bytes, n)
    chosen: list[int] = []
    used = 0
    for i in top_k(profile.normalized_scores, n):
        if used + sizes[i] > budget_bytes:
            break
        chosen.append(i)
        used += sizes[i]
    return tuple(chosen)


def mode_for_ratio(ratio: float, awq_viable: bool, floor_ratio: float = DEFAULT_FLOOR_RATIO) -> Mode:
    if ratio >= floor_ratio:
        return Mode.C_HOT_AWQ if awq_viable else Mode.B_HOT_ONLY
    return Mode.A_PAGED


@dataclass(frozen=True)
class ModePlan:
    mode: Mode
    active_layers: tuple[int, ...]
    routes: tuple[str, ...]
    budget_bytes: int
    active_ratio: float
    floor_ratio: float = DEFAULT_FLOOR_RATIO
    hot_layers: tuple[int, ...] = ()

    def __post_init__(self):
        n = len(self.routes)
        if any(not 0 <= i < n for i in self.active_layers):
            raise PlanError(f"active layers {self.active_layers} outside 0..{n - 1}")
        if not 0.0 <= self.active_ratio <= 1.0:
            raise PlanError(f"active ratio {self.active_ratio} outside [0, 1]")
        if any(r not in (W4A8, W4A16) for r in self.routes):
            raise PlanError(f"unknown route in {self.routes}")

    @property
    def num_layers(self) -> int:
        return len(self.routes)

    def summary(self) -> dict:
        return {
            "mode": self.mode.value,
            "active_layers": list(self.active_layers),
            "hot_layers": list(self.hot_layers),
            "routes": list(self.routes),
            "budget_bytes": self.budget_bytes,
            "active_ratio": self.active_ratio,
            "floor_ratio": self.floor_ratio,
        }


def select_mode(
    profile: ImportanceProfile,
    budget_bytes: int,
    per_layer_bytes: int | Sequence[int],
    awq_viable: bool,
    floor_ratio: float = DEFAULT_FLOOR_RATIO,
    tau: float | None = None,
) -> ModePlan:
    n = profile.num_layers
    hot = hot_set(profile, budget_bytes, per_layer_bytes)
    ratio = len(hot) / n
    mode = mode_for_ratio(ratio, awq_viable, floor_ratio)
    return plan_for_mode(profile, mode, hot, budget_bytes, floor_ratio, tau)


def plan_for_mode(
    profile: ImportanceProfile,
    mode: Mode,
    hot: Sequence[int],
    budget_bytes: int,
    floor_ratio: float = DEFAULT_FLOOR_RATIO,
    tau: float | None = None,
) -> ModePlan:
    n = profile.num_layers
    active = tuple(range(n)) if mode is Mode.A_PAGED else tuple(sorted(hot))
    return ModePlan(
        mode=mode,
        active_layers=active,
        routes=route_layers(profile, profile.tau if tau is None else tau),
        budget_bytes=int(budget_bytes),
        active_ratio=len(hot) / n,
        floor_ratio=floor_ratio,
        hot_layers=tuple(hot),
    )


# ---------------------------------------------------------------------------
# quantized execution


@dataclass(frozen=True)
class QuantizedModel:
    model: ToyModel
    matrices: tuple[dict[str, QuantMatrix], ...]
    code_bits: int = 4

    @property
    def bits_per_weight(self) -> float:
        return self.code_bits + Q4_BPW - 4


def quantize_model(model: ToyModel, code_bits: int = 4) -> QuantizedModel:
    """Q4_0-encode every slot; ``code_bits < 4`` snaps codes to fewer levels."""
    spec = model.spec
    if spec.hidden_dim % QK or spec.ffn_dim % QK:
        raise QuantError(f"hidden_dim and ffn_dim must be multiples of {QK}")
    mats = []
    for lw in model.layers:
        layer = {}
        for s in SLOTS:
            m = quantize_matrix(lw.slot(s))
            if code_bits != 4:
                m = m.with_codes(truncate_codes(m.codes, code_bits))
            layer[s] = m
        mats.append(layer)
    return QuantizedModel(model, tuple(mats), code_bits)


def w4a8_rows(w: QuantMatrix, x: np.ndarray) -> np.ndarray:
    """W4A8 product for each row of ``x`` (tokens, cols)."""
    s, codes = _q8_groups(np.asarray(x, dtype=np.float32).reshape(x.shape[0], -1, QK))
    return matvec_w4a8_codes(w, s, codes)


def quantized_linear(qmodel: QuantizedModel, routes: Sequence[str]) -> Linear:
    if len(routes) != qmodel.model.num_layers:
        raise PlanError(f"{len(routes)} routes for {qmodel.model.num_layers} layers")

    def apply(layer: int, slot: str, x: np.ndarray) -> np.ndarray:
        w = qmodel.matrices[layer][slot]
        y = w4a8_rows(w, x) if routes[layer] == W4A8 else matvec_w4a16(w, x)
        bias = qmodel.model.layers[layer].bias
        if slot in bias:
            y = y + bias[slot]
        return y.astype(np.float32)

    return apply


# ---------------------------------------------------------------------------
# running plans


def cosine_divergence(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over tokens of ``1 - cos(a_t, b_t)``; identical rows count as exactly 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise PlanError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = 1.0 - np.sum(a * b, axis=1) / (na * nb)
    d = np.where(np.all(a == b, axis=1), 0.0, d)
    d = np.where(np.isfinite(d), d, 1.0)
    return float(np.mean(np.clip(d, 0.0, 2.0)))


@dataclass(frozen=True)
class RunResult:
    hidden: np.ndarray
    baseline: np.ndarray
    divergence: float
    executed: tuple[int, ...]
    pager_stats: dict | None = None


def run_plan(
    model: ToyModel,
    plan: ModePlan,
    tokens: Sequence[int],
    qmodel: QuantizedModel | None = None,
    pager: "PagerState | None" = None,
) -> RunResult:
    """Execute ``plan`` on one token sequence and compare with the dense baseline.

    With ``qmodel`` every executed layer goes through its routed quantized
    kernel; without it the dense float32 weights are used. In mode A with a
    pager, decoding is replayed token by token and every executed layer
    touches its attention and FFN sub-blocks in the pager.
    """
    if plan.num_layers != model.num_layers:
        raise PlanError(f"plan covers {plan.num_layers} layers, model has {model.num_layers}")
    if qmodel is not None and qmodel.model is not model:
        raise PlanError("quantized weights belong to a different model")
    linear = quantized_linear(qmodel, plan.routes) if qmodel is not None else None
    baseline = forward(model, tokens).hidden
    stats = None
    if plan.mode is Mode.A_PAGED and pager is not None:

        def touch(i: int) -> None:
            pager.access_subblock(f"L{i}.attn")
            pager.access_subblock(f"L{i}.ffn")

        result = None
        for t in range(1, len(tokens) + 1):
            result = forward(model, tokens[:t], plan.active_layers, linear, on_layer=touch)
        stats = pager.stats()
    else:
        result = forward(model, tokens, plan.active_layers, linear)
    return RunResult(
        hidden=result.hidden,
        baseline=baseline,
        divergence=cosine_divergence(result.hidden, baseline),
        executed=tuple(result.executed),
        pager_stats=stats,
    )


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepReport:
    kind: str
    rows: tuple[dict, ...]

    def __post_init__(self):
        if not self.rows:
            raise PlanError("sweep needs at least one setting")
        s = [r["setting"] for r in self.rows]
        up = all(a < b for a, b in zip(s, s[1:]))
        down = all(a > b for a, b in zip(s, s[1:]))
        if not (up or down):
            raise PlanError(f"sweep settings must be strictly monotone, got {s}")

    @property
    def settings(self) -> list:
        return [r["setting"] for r in self.rows]

    @property
    def metrics(self) -> list[float]:
        return [r["divergence"] for r in self.rows]

    def to_json(self) -> dict:
        return {"kind": self.kind, "rows": list(self.rows)}


def _mean_divergence(model: ToyModel, calib: CalibrationSet, run: Callable) -> float:
    vals = [run(p) for p in calib.prompts]
    return math.fsum(vals) / len(vals)


def layer_sweep(
    model: ToyModel,
    calib: CalibrationSet,
    ratios: Sequence[float] = (1.0, 0.75, 0.5, 0.25),
    profile: ImportanceProfile | None = None,
) -> SweepReport:
    """Hot-only divergence as the share of executed (most important) layers drops."""
    prof = profile or run_profile(model, calib)
    n = model.num_layers
    order = top_k(prof.normalized_scores, n)
    rows = []
    for r in ratios:
        count = max(0, min(n, round(r * n)))
        active = set(order[:count])
        div = _mean_divergence(
            model,
            calib,
            lambda p: cosine_divergence(forward(model, p, active).hidden, forward(model, p).hidden),
        )
        rows.append({"setting": count, "active_ratio": count / n, "divergence": div})
    return SweepReport("layers", tuple(rows))


def threshold_sweep(
    model: ToyModel,
    calib: CalibrationSet,
    taus: Sequence[float],
    profile: ImportanceProfile | None = None,
    qmodel: QuantizedModel | None = None,
) -> SweepReport:
    """All layers run quantized; the threshold only moves layers between routes."""
    prof = profile or run_profile(model, calib)
    qmodel = qmodel or quantize_model(model)
    rows = []
    for tau in taus:
        routes = route_layers(prof, tau)
        lin = quantized_linear(qmodel, routes)
        div = _mean_divergence(
            model,
            calib,
            lambda p: cosine_divergence(forward(model, p, linear=lin).hidden, forward(model, p).hidden),
        )
        w16 = routes.count(W4A16)
        rows.append({"setting": float(tau), "w4a16": w16, "w4a8": len(routes) - w16, "divergence": div})
    return SweepReport("threshold", tuple(rows))


def bpw_sweep(
    model: ToyModel,
    calib: CalibrationSet,
    code_bits: Sequence[int] = (4, 3, 2, 1),
    profile: ImportanceProfile | None = None,
    tau: float = DEFAULT_TAU,
) -> SweepReport:
    """Divergence as Q4_0 codes are snapped to fewer levels (storage bpw = bits + 0.5)."""
    prof = profile or run_profile(model, calib)
    routes = route_layers(prof, tau)
    rows = []
    for bits in code_bits:
        qm = quantize_model(model, bits)
        lin = quantized_linear(qm, routes)
        div = _mean_divergence(
            model,
            calib,
            lambda p: cosine_divergence(forward(model, p, linear=lin).hidden, forward(model, p).hidden),
        )
        rows.append({"setting": qm.bits_per_weight, "code_bits": bits, "divergence": div})
    return SweepReport("bpw", tuple(rows))
