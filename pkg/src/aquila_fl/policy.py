"""Quantization-level selection and the upload-skip criterion.

Three level policies are supported:

  aquila        per-device, per-round optimal level. Minimizes the skip-induced
                model-deviation bound, which reduces to choosing the lattice
                granularity closest to ||v||_2 / (R * sqrt(d)) and gives
                b = floor(log2(R * sqrt(d) / ||v||_2 + 1)), always >= 1.
  fixed:<b>     constant level b for every device and round. "fixed:32-full"
                additionally disables skipping (full-participation reference).
  adaquantfl:<b0>  global-loss-driven baseline, b = floor(sqrt(f0 / fk) * b0),
                clamped into [1, 32] because the raw rule grows without bound
                as the loss decreases.

The skip rule compares the energy a device would inject into the model
against the server's recent movement: device m skips the upload when

    ||dq||_2^2 + ||eps||_2^2  <=  (beta / alpha^2) * ||theta_k - theta_{k-1}||_2^2

with beta >= 0 a tuning factor and alpha the server learning rate. Larger
beta means fewer uploads. The rule is evaluated on the already-quantized
innovation, after the level for the round has been chosen.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

from .errors import DegenerateInput, NumericError, PolicyError
from .numerics import Vector, norm2, norm2_sq, norm_inf
from .quantizer import MAX_BITS, QuantizationError, QuantizedInnovation, decode, granularity

log = logging.getLogger(__name__)

LEVEL_POLICY_KINDS = ("aquila", "fixed", "adaquantfl")


@dataclass(frozen=True)
class LevelPolicy:
    """Which level rule to use; `param` is b for fixed, b0 for adaquantfl."""

    kind: str
    param: int | None = None
    cap: int = MAX_BITS
    force_upload: bool = False  # fixed:32-full disables the skip rule

    def __post_init__(self):
        if self.kind not in LEVEL_POLICY_KINDS:
            raise PolicyError(f"unknown level policy kind {self.kind!r}")
        if self.kind in ("fixed", "adaquantfl"):
            if self.param is None or not 1 <= self.param <= MAX_BITS:
                raise PolicyError(
                    f"{self.kind} policy needs a level in [1, {MAX_BITS}], got {self.param}")
        if not 1 <= self.cap <= MAX_BITS:
            raise PolicyError(f"cap must be in [1, {MAX_BITS}], got {self.cap}")


@dataclass(frozen=True)
class SkipPolicy:
    """Parameters of the upload-skip test."""

    beta: float
    alpha: float

    def __post_init__(self):
        if not (self.beta >= 0.0 and math.isfinite(self.beta)):
            raise PolicyError(f"beta must be finite and >= 0, got {self.beta}")
        if not (self.alpha > 0.0 and math.isfinite(self.alpha)):
            raise PolicyError(f"alpha must be finite and > 0, got {self.alpha}")

    @property
    def threshold_factor(self) -> float:
        return self.beta / (self.alpha * self.alpha)


def parse_level_policy(text: str) -> LevelPolicy:
    """Parse a config token: "aquila", "fixed:<b>", "fixed:32-full", "adaquantfl:<b0>"."""
    token = text.strip()
    if token == "aquila":
        return LevelPolicy("aquila")
    for kind in ("fixed", "adaquantfl"):
        prefix = kind + ":"
        if token.startswith(prefix):
            arg = token[len(prefix):]
            force = False
            if arg.endswith("-full"):
                arg, force = arg[: -len("-full")], True
            try:
                level = int(arg)
            except ValueError:
                raise PolicyError(f"bad level in policy token {text!r}") from None
            return LevelPolicy(kind, level, force_upload=force)
    raise PolicyError(f"unknown level policy {text!r}")


def policy_name(p: LevelPolicy) -> str:
    if p.kind == "aquila":
        return "aquila"
    suffix = "-full" if p.force_upload else ""
    return f"{p.kind}:{p.param}{suffix}"


def aquila_level(innovation: Vector, cap: int = MAX_BITS) -> int:
    """Optimal per-round quantization level for one device.

    Zero innovation gets the smallest legal level, 1. Otherwise the ratio
    R * sqrt(d) / ||v||_2 is >= 1 (norm inequality), so the result is >= 1;
    the max() below only guards the equality case against float round-off.
    """
    n2 = norm2(innovation)
    if n2 == 0.0:
        return 1
    r = norm_inf(innovation)
    ratio = r * math.sqrt(innovation.size) / n2
    level = int(math.floor(math.log2(ratio + 1.0)))
    return max(1, min(cap, level))


def optimal_tau(innovation: Vector) -> float:
    """Continuous-relaxation optimum of the lattice granularity, in (0, 1]."""
    r = norm_inf(innovation)
    if r == 0.0:
        raise DegenerateInput("optimal granularity is undefined for a zero innovation")
    return min(1.0, norm2(innovation) / (r * math.sqrt(innovation.size)))


def deviation_objective(innovation: Vector, bits: int) -> float:
    """Skip-induced deviation proxy (||v||_2 - tau * R * sqrt(d))^2.

    This is the quantity the aquila level rule minimizes over integer bits;
    it doubles as the brute-force oracle target in tests.
    """
    if bits < 1:
        raise PolicyError(f"bits must be >= 1, got {bits}")
    tau = granularity(min(bits, MAX_BITS)) if bits <= MAX_BITS else 1.0 / (2.0 ** bits - 1.0)
    gap = norm2(innovation) - tau * norm_inf(innovation) * math.sqrt(innovation.size)
    return gap * gap


def adaquantfl_level(f0: float, fk: float, b0: int, cap: int = MAX_BITS) -> int:
    """Loss-ratio level rule, clamped into [1, cap]."""
    if not (f0 > 0.0 and fk > 0.0 and math.isfinite(f0) and math.isfinite(fk)):
        raise NumericError(f"losses must be finite and positive, got f0={f0}, fk={fk}")
    if not 1 <= b0 <= MAX_BITS:
        raise PolicyError(f"b0 must be in [1, {MAX_BITS}], got {b0}")
    raw = math.floor(math.sqrt(f0 / fk) * b0)
    if raw > cap:
        log.debug("adaquantfl level %d capped to %d", raw, cap)
    return max(1, min(cap, raw))


def should_skip(dq: QuantizedInnovation, err: QuantizationError,
                theta_diff_sq: float, p: SkipPolicy) -> bool:
    """True when the quantized update is too small to be worth uploading."""
    lhs = norm2_sq(decode(dq)) + norm2_sq(err.epsilon)
    return lhs <= p.threshold_factor * theta_diff_sq
