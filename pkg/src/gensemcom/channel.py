"""Slow-fading channel reduced to its Shannon capacity."""
from __future__ import annotations

import math
from dataclasses import dataclass

DEFAULT_BANDWIDTH_HZ = 1e6


class InfeasibleChannelError(ValueError):
    """Raised when a positive rate must cross a zero-capacity channel."""


def db_to_linear(snr_db: float) -> float:
    return 10.0 ** (snr_db / 10.0)


def linear_to_db(snr: float) -> float:
    return 10.0 * math.log10(snr) if snr > 0 else -math.inf


@dataclass(frozen=True)
class ChannelState:
    snr_linear: float
    bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ

    def __post_init__(self):
        if not self.snr_linear >= 0 or not math.isfinite(self.snr_linear):
            raise ValueError("snr must be finite and non-negative")
        if not self.bandwidth_hz > 0:
            raise ValueError("bandwidth must be positive")

    @classmethod
    def from_db(cls, snr_db: float, bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ) -> "ChannelState":
        return cls(db_to_linear(snr_db), bandwidth_hz)

    @property
    def snr_db(self) -> float:
        return linear_to_db(self.snr_linear)


def capacity(ch: ChannelState) -> float:
    """Bits per second, B * log2(1 + snr)."""
    return ch.bandwidth_hz * math.log2(1.0 + ch.snr_linear)


def latency(rate_bits: float, ch: ChannelState) -> float:
    """Seconds needed to push ``rate_bits`` through the channel at capacity."""
    if rate_bits < 0:
        raise ValueError("rate must be non-negative")
    if rate_bits == 0:
        return 0.0
    c = capacity(ch)
    if c == 0:
        raise InfeasibleChannelError(f"{rate_bits} bits cannot cross a zero-capacity channel")
    return rate_bits / c


def bit_budget(ch: ChannelState, t_max: float) -> float:
    if t_max < 0:
        raise ValueError("t_max must be non-negative")
    return capacity(ch) * t_max
