"""Deterministic mid-tread quantization of gradient innovations.

A device never uploads a raw gradient. It uploads the *innovation* (current
local gradient minus the last quantized gradient the server holds for it),
encoded on a uniform lattice:

    R     = max-magnitude of the innovation (the quantization range)
    tau   = 1 / (2**bits - 1)               (the granularity)
    step  = 2 * tau * R                     (lattice spacing on [-R, R])

    encode:  code_i = floor((v_i + R) / step + 1/2), clamped to [0, 2**bits - 1]
    decode:  dq_i   = 2 * tau * R * code_i - R

Every decoded component lies in [-R, R] and the reconstruction error per
component is at most half a lattice step, tau * R. The degenerate case
R == 0 (zero innovation) encodes to all-zero codes and decodes to the zero
vector by convention.

The quantizer is deterministic on purpose: no dithering, no random
rounding, so a run is exactly reproducible and cheap on weak devices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError, PolicyError
from .numerics import Vector, norm_inf

MAX_BITS = 32
DEFAULT_HEADER_BITS = 40  # 32-bit float for R plus an 8-bit level tag

# Clamp events are recorded so tests can assert the clamp only ever fires
# on floating-point round-up at the lattice boundary, never mid-range.
_clamp_events: list[tuple[float, int]] = []
_CLAMP_LOG_LIMIT = 1000


def granularity(bits: int) -> float:
    """Lattice granularity tau = 1 / (2**bits - 1)."""
    if not 1 <= bits <= MAX_BITS:
        raise PolicyError(f"bits must be in [1, {MAX_BITS}], got {bits}")
    return 1.0 / (2.0 ** bits - 1.0)


def floor_quantize(value: float, step: float) -> float:
    """Reference scalar quantizer: snap value down to a multiple of step."""
    return np.floor(value / step) * step


def clamp_event_count() -> int:
    return len(_clamp_events)


def drain_clamp_events() -> list[tuple[float, int]]:
    """Return and clear the recorded (raw_code, limit) clamp events."""
    global _clamp_events
    events, _clamp_events = _clamp_events, []
    return events


@dataclass(frozen=True)
class QuantizedInnovation:
    """Wire payload: integer codes plus the (bits, range) needed to decode."""

    codes: np.ndarray  # nonnegative int64, one code per coordinate
    bits: int
    range: float

    def __post_init__(self):
        if not 1 <= self.bits <= MAX_BITS:
            raise PolicyError(f"bits must be in [1, {MAX_BITS}], got {self.bits}")
        if not (self.range >= 0.0 and np.isfinite(self.range)):
            raise NumericError(f"range must be finite and >= 0, got {self.range}")

    @property
    def dim(self) -> int:
        return int(self.codes.size)


@dataclass(frozen=True)
class QuantizationError:
    """Per-coordinate reconstruction error of one quantization step."""

    epsilon: Vector


def encode(innovation: Vector, bits: int) -> QuantizedInnovation:
    """Quantize an innovation vector onto the mid-tread lattice.

    The range R is taken from the vector itself (its inf-norm). R == 0 is a
    first-class degenerate case: all codes are zero and decode() returns the
    zero vector.
    """
    if not 1 <= int(bits) <= MAX_BITS:
        raise PolicyError(f"bits must be in [1, {MAX_BITS}], got {bits}")
    bits = int(bits)
    v = np.asarray(innovation, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NumericError("cannot quantize a non-finite innovation")

    r = norm_inf(v)
    top = 2 ** bits - 1
    if r == 0.0:
        return QuantizedInnovation(np.zeros(v.size, dtype=np.int64), bits, 0.0)

    step = 2.0 * granularity(bits) * r
    raw = np.floor((v + r) / step + 0.5)
    codes = raw.astype(np.int64)
    low = codes < 0
    high = codes > top
    if low.any() or high.any():
        for x in raw[low | high]:
            if len(_clamp_events) < _CLAMP_LOG_LIMIT:
                _clamp_events.append((float(x), top))
        codes = np.clip(codes, 0, top)
    return QuantizedInnovation(codes, bits, r)


def decode(q: QuantizedInnovation) -> Vector:
    """Reconstruct the quantized innovation from its codes.

    Affine inverse of encode: dq = 2 * tau * R * codes - R. Components are
    guaranteed to lie in [-R, R].
    """
    if q.range == 0.0:
        return np.zeros(q.dim, dtype=np.float64)
    tau = granularity(q.bits)
    return 2.0 * tau * q.range * q.codes.astype(np.float64) - q.range


def quantization_error(innovation: Vector, q: QuantizedInnovation) -> QuantizationError:
    """Innovation minus its reconstruction; obeys the half-step bound."""
    v = np.asarray(innovation, dtype=np.float64)
    if v.size != q.dim:
        raise DimensionError(f"innovation dim {v.size} != codes dim {q.dim}")
    return QuantizationError(epsilon=v - decode(q))


def payload_bits(q: QuantizedInnovation, header_bits: int = DEFAULT_HEADER_BITS) -> int:
    """Bits on the wire for one upload: codes plus the per-message header.

    Skipped uploads are accounted as 0 bits by the round loop; this function
    only prices a payload that is actually sent.
    """
    return q.dim * q.bits + int(header_bits)
