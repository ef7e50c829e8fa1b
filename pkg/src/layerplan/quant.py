"""Scalar reference arithmetic for 4-bit block weights and 8-bit activations.

Weights use the 18-byte Q4_0 block: a float16 scale ``d`` followed by 32
unsigned 4-bit codes, split nibble layout (byte ``j`` holds element ``j`` in its
low nibble and element ``j + 16`` in its high nibble). Element value is
``d * (code - 8)``.

Activations are quantized per 32-element group to int8 with scale
``amax / 127``. The W4A8 product keeps the zero offset out of the inner loop::

    y += d * s * (sum_j code_j * q_j  -  8 * sum_j q_j)

with both sums in exact integer arithmetic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

QK = 32
Q4_BLOCK_BYTES = 18
Q4_BPW = Q4_BLOCK_BYTES * 8 / QK  # 4.5
FORMAT_BITS = {"q4_0": Q4_BPW, "f16": 16.0, "f32": 32.0}
MATRIX_MAGIC = b"NVEQ1"
FORMAT_Q4_0 = 0
_HEADER = struct.Struct("<5sIIB")


class QuantError(ValueError):
    pass


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _finite_block(values, n: int = QK) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    if x.shape != (n,):
        raise QuantError(f"expected {n} values, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise QuantError("non-finite value in block")
    return x


# ---------------------------------------------------------------------------
# Q4_0 weights


def _q4_scales(x: np.ndarray) -> np.ndarray:
    """Per-row float16 scale for blocks ``x`` of shape (n, 32).

    Conventional rule: ``d = m / -8`` with ``m`` the first max-magnitude element,
    so ``m`` lands exactly on code 0. When an element of the opposite sign would
    then clamp at code 15 by more than half a step, fall back to the symmetric
    ``d = amax / 7``, which keeps every element within half a step.
    """
    n = x.shape[0]
    idx = np.argmax(np.abs(x), axis=1)
    m = x[np.arange(n), idx]
    amax = np.abs(m)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        d = (m / -8.0).astype(np.float16).astype(np.float64)
        q = x / d[:, None]
        clamps = np.any(q > 7.5, axis=1) & (amax > 0)
        d = np.where(clamps, (amax / 7.0).astype(np.float16).astype(np.float64), d)
    d = np.where(amax == 0, 0.0, d)
    bad = (amax > 0) & ((d == 0) | ~np.isfinite(d))
    if np.any(bad):
        raise QuantError(f"block scale {amax[bad][0] / 8:g} outside float16 range")
    return d


def _q4_codes(x: np.ndarray, d: np.ndarray) -> np.ndarray:
    safe = np.where(d == 0, 1.0, d)
    codes = np.clip(round_half_away(x / safe[:, None]) + 8, 0, 15)
    codes = np.where(d[:, None] == 0, 8, codes)
    return codes.astype(np.uint8)


@dataclass(frozen=True)
class QuantBlockQ4:
    d: float  # float16 value, held as a Python float
    codes: np.ndarray  # (32,) uint8 in [0, 15]

    def to_bytes(self) -> bytes:
        c = np.asarray(self.codes, dtype=np.uint8)
        packed = (c[:16] & 0x0F) | ((c[16:] & 0x0F) << 4)
        return struct.pack("<e", self.d) + packed.astype(np.uint8).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantBlockQ4":
        if len(data) != Q4_BLOCK_BYTES:
            raise QuantError(f"Q4_0 block must be {Q4_BLOCK_BYTES} bytes, got {len(data)}")
        (d,) = struct.unpack_from("<e", data)
        qs = np.frombuffer(data, dtype=np.uint8, offset=2)
        codes = np.concatenate([qs & 0x0F, qs >> 4]).astype(np.uint8)
        return cls(float(d), codes)

    def __eq__(self, other):
        if not isinstance(other, QuantBlockQ4):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def __hash__(self):
        return hash(self.to_bytes())


def quantize_q4_0(block: Sequence[float]) -> QuantBlockQ4:
    x = _finite_block(block)[None, :]
    d = _q4_scales(x)
    return QuantBlockQ4(float(d[0]), _q4_codes(x, d)[0])


def dequantize_q4_0(b: QuantBlockQ4) -> np.ndarray:
    return (np.float32(b.d) * (b.codes.astype(np.float32) - np.float32(8))).astype(np.float32)


def truncate_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Snap 4-bit codes onto ``2**bits`` levels centred at 8 (bits=4 is the identity)."""
    if not 1 <= bits <= 4:
        raise QuantError(f"code bits must be in [1, 4], got {bits}")
    step = 2 ** (4 - bits)
    signed = codes.astype(np.int64) - 8
    snapped = np.clip(step * round_half_away(signed / step), -8, 8 - step)
    return (snapped + 8).astype(np.uint8)


# ---------------------------------------------------------------------------
# Q8 activations


@dataclass(frozen=True)
class QuantGroupQ8:
    scale: float  # float32 value
    codes: np.ndarray  # (32,) int8 in [-127, 127]


def _q8_groups(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quantize (..., 32) groups; returns float32 scales (...) and int8 codes (..., 32)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise QuantError("non-finite activation")
    amax = np.max(np.abs(x), axis=-1)
    s = (amax / 127.0).astype(np.float32)
    if np.any((amax > 0) & (s == 0)):
        raise QuantError("activation group too small for a float32 scale")
    safe = np.where(s == 0, 1.0, s.astype(np.float64))
    codes = np.clip(round_half_away(x / safe[..., None]), -127, 127)
    codes = np.where(s[..., None] == 0, 0, codes)
    return s, codes.astype(np.int8)


def quantize_activations_q8(group: Sequence[float]) -> QuantGroupQ8:
    s, codes = _q8_groups(_finite_block(group))
    return QuantGroupQ8(float(s), codes)


def dequantize_q8(g: QuantGroupQ8) -> np.ndarray:
    return np.float32(g.scale) * g.codes.astype(np.float32)


def quantize_vector_q8(x: Sequence[float]) -> list[QuantGroupQ8]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size % QK:
        raise QuantError(f"vector length must be a multiple of {QK}, got {x.size}")
    s, codes = _q8_groups(x.reshape(-1, QK))
    return [QuantGroupQ8(float(si), ci) for si, ci in zip(s, codes)]


# ---------------------------------------------------------------------------
# matrices


@dataclass(frozen=True)
class QuantMatrix:
    rows: int
    cols: int
    scales: np.ndarray  # (rows, cols // 32) float16
    codes: np.ndarray  # (rows, cols // 32, 32) uint8

    @property
    def blocks_per_row(self) -> int:
        return self.cols // QK

    def block(self, r: int, b: int) -> QuantBlockQ4:
        return QuantBlockQ4(float(self.scales[r, b]), self.codes[r, b])

    def dequantize(self) -> np.ndarray:
        d = self.scales.astype(np.float32)[..., None]
        w = d * (self.codes.astype(np.float32) - np.float32(8))
        return w.reshape(self.rows, self.cols).astype(np.float32)

    def with_codes(self, codes: np.ndarray) -> "QuantMatrix":
        return QuantMatrix(self.rows, self.cols, self.scales, codes)

    def nbytes(self) -> int:
        return Q4_BLOCK_BYTES * self.rows * self.blocks_per_row

    def to_bytes(self) -> bytes:
        out = bytearray(_HEADER.pack(MATRIX_MAGIC, self.rows, self.cols, FORMAT_Q4_0))
        c = self.codes
        packed = (c[..., :16] & 0x0F) | ((c[..., 16:] & 0x0F) << 4)
        d = self.scales.astype("<f2")
        for r in range(self.rows):
            for b in range(self.blocks_per_row):
                out += d[r, b].tobytes()
                out += packed[r, b].astype(np.uint8).tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantMatrix":
        if len(data) < _HEADER.size:
            raise QuantError("truncated matrix header")
        magic, rows, cols, fmt = _HEADER.unpack_from(data)
        if magic != MATRIX_MAGIC:
            raise QuantError(f"bad magic {magic!r}")
        if fmt != FORMAT_Q4_0:
            raise QuantError(f"unknown block format id {fmt}")
        if cols % QK:
            raise QuantError(f"cols {cols} not a multiple of {QK}")
        nb = cols // QK
        expected = _HEADER.size + Q4_BLOCK_BYTES * rows * nb
        if len(data) != expected:
            raise QuantError(f"expected {expected} bytes, got {len(data)}")
        raw = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size).reshape(rows, nb, Q4_BLOCK_BYTES)
        scales = raw[..., :2].copy().view("<f2").reshape(rows, nb).astype(np.float16)
        qs = raw[..., 2:]
        codes = np.concatenate([qs & 0x0F, qs >> 4], axis=-1).astype(np.uint8)
        return cls(rows, cols, scales, codes)


def quantize_matrix(w: np.ndarray) -> QuantMatrix:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise QuantError(f"expected a matrix, got shape {w.shape}")
    rows, cols = w.shape
    if cols % QK:
        raise QuantError(f"cols {cols} not a multiple of {QK}")
    if not np.all(np.isfinite(w)):
        raise QuantError("non-finite weight")
    blocks = w.reshape(-1, QK)
    d = _q4_scales(blocks)
    codes = _q4_codes(blocks, d)
    nb = cols // QK
    return QuantMatrix(rows, cols, d.astype(np.float16).reshape(rows, nb), codes.reshape(rows, nb, QK))


def _accumulate_blocks(terms: np.ndarray) -> np.ndarray:
    """Sum float32 per-block terms (..., rows, nb) left to right over blocks."""
    acc = np.zeros(terms.shape[:-1], dtype=np.float32)
    for b in range(terms.shape[-1]):
        acc = acc + terms[..., b]
    return acc


def w4a8_integer_terms(w: QuantMatrix, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``sumi`` (..., rows, nb) and ``sum_x`` (..., nb) for int8 activation codes (..., nb, 32)."""
    q = codes.astype(np.int64)
    sumi = np.einsum("rbj,...bj->...rb", w.codes.astype(np.int64), q)
    sum_x = q.sum(axis=-1)
    return sumi, sum_x


def matvec_w4a8_codes(w: QuantMatrix, scales: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Batched W4A8 product; ``scales`` (..., nb) float32, ``codes`` (..., nb, 32) int8."""
    if codes.shape[-2:] != (w.blocks_per_row, QK):
        raise QuantError(
            f"activation groups {codes.shape[-2:]} do not match {w.blocks_per_row} blocks of {QK}"
        )
    sumi, sum_x = w4a8_integer_terms(w, codes)
    corr = (sumi - 8 * sum_x[..., None, :]).astype(np.float32)  # |corr| <= 60960, exact
    ds = w.scales.astype(np.float32) * np.asarray(scales, dtype=np.float32)[..., None, :]
    return _accumulate_blocks(ds * corr)


def matvec_w4a8(w: QuantMatrix, x: Sequence[QuantGroupQ8]) -> np.ndarray:
    if len(x) != w.blocks_per_row:
        raise QuantError(f"expected {w.blocks_per_row} activation groups, got {len(x)}")
    scales = np.array([g.scale for g in x], dtype=np.float32)
    codes = np.stack([np.asarray(g.codes, dtype=np.int8) for g in x])
    return matvec_w4a8_codes(w, scales, codes)


def to_f16_activations(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float16).astype(np.float32)


def matvec_w4a16(w: QuantMatrix, x) -> np.ndarray:
    """Dequantize blocks and dot with float16 activations, float32 accumulation.

    ``x`` may be (cols,) or (batch, cols).
    """
    x = np.asarray(x)
    if x.shape[-1] != w.cols:
        raise QuantError(f"activation length {x.shape[-1]} != cols {w.cols}")
    xa = to_f16_activations(x).reshape(*x.shape[:-1], w.blocks_per_row, QK)
    wd = w.scales.astype(np.float32)[..., None] * (w.codes.astype(np.float32) - np.float32(8))
    # per-block partial sums, then blocks left to right
    partial = np.einsum("rbj,...bj->...rb", wd, xa, dtype=np.float32)
    return _accumulate_blocks(partial.astype(np.float32))


# ---------------------------------------------------------------------------
# analytic error bounds


def weight_error_bound(w: QuantMatrix) -> np.ndarray:
    """Per-element bound on |w - dequant(w)|: half a quantization step."""
    half = np.abs(w.scales.astype(np.float64)) / 2
    return np.repeat(half, QK, axis=1)


def w4a8_error_bound(w: QuantMatrix, x: np.ndarray) -> np.ndarray:
    """Bound on |W x - w4a8(W, q8(x))| per row, from the two rounding steps."""
    x = np.asarray(x, dtype=np.float64)
    s, codes = _q8_groups(x.reshape(-1, QK))
    x_hat = (s[:, None].astype(np.float64) * codes).reshape(-1)
    w_hat = np.abs(w.dequantize().astype(np.float64))
    act_half = np.repeat(s.astype(np.float64) / 2, QK)
    bound = weight_error_bound(w) @ np.abs(x) + w_hat @ act_half
    rounding = 1e-6 * (w_hat @ np.abs(x_hat))
    return bound + rounding


def w4a16_error_bound(w: QuantMatrix, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x16 = to_f16_activations(x).astype(np.float64)
    w_hat = np.abs(w.dequantize().astype(np.float64))
    bound = weight_error_bound(w) @ np.abs(x) + w_hat @ np.abs(x - x16)
    return bound + 1e-5 * (w_hat @ np.abs(x16))


# ---------------------------------------------------------------------------
# storage accounting


def effective_bpw(
    plan: Sequence, layer_sizes: Sequence[int], w4a16_storage: str = "q4_0"
) -> float:
    """Weighted mean storage bits per weight element.

    ``plan`` entries are precision routes (``"W4A8"``/``"W4A16"``), storage
    format names (``"q4_0"``, ``"f16"``) or explicit bit widths. Both routes share
    Q4_0 weights unless ``w4a16_storage`` says otherwise.
    """
    if len(plan) != len(layer_sizes):
        raise QuantError("plan and layer_sizes differ in length")
    total = sum(layer_sizes)
    if total <= 0:
        raise QuantError("layer sizes must sum to a positive count")
    bits = []
    for entry in plan:
        if isinstance(entry, (int, float)):
            bits.append(float(entry))
        elif entry == "W4A8":
            bits.append(Q4_BPW)
        elif entry == "W4A16":
            bits.append(FORMAT_BITS[w4a16_storage])
        else:
            bits.append(FORMAT_BITS[entry])
    return sum(b * n for b, n in zip(bits, layer_sizes)) / total
