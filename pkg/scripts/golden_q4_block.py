"""Independent pure-Python Q4_0 encoder used to freeze the golden test vector.

Shares no code with the package: scalar loops, ``struct`` for float16
rounding, explicit half-away-from-zero rounding. Prints the input block, the
18 encoded bytes as hex and the dequantized values.

    python3 scripts/golden_q4_block.py
"""

import math
import struct


def f16(x):
    return struct.unpack("<e", struct.pack("<e", x))[0]


def round_half_away(v):
    return math.copysign(math.floor(abs(v) + 0.5), v)


def encode(block):
    m = 0.0
    for v in block:
        if abs(v) > abs(m):
            m = v
    if m == 0.0:
        return 0.0, [8] * 32
    d = f16(m / -8.0)
    if any(v / d > 7.5 for v in block):
        d = f16(abs(m) / 7.0)
    codes = [int(min(15, max(0, round_half_away(v / d) + 8))) for v in block]
    return d, codes


def pack(d, codes):
    body = bytes((codes[j] & 0xF) | ((codes[j + 16] & 0xF) << 4) for j in range(16))
    return struct.pack("<e", d) + body


def golden_block():
    # deterministic, hand-checkable pattern: a signed ramp with one dominant element
    block = [round((j - 15.5) * 0.0625, 6) for j in range(32)]
    block[5] = -1.375
    return block


if __name__ == "__main__":
    block = golden_block()
    d, codes = encode(block)
    raw = pack(d, codes)
    print("input   ", block)
    print("scale   ", d)
    print("codes   ", codes)
    print("bytes   ", raw.hex())
    print("dequant ", [d * (c - 8) for c in codes])
