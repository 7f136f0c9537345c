"""Byte-oriented range coder with carry propagation.

The coder keeps a 64-bit ``range`` register normalized to at least 2**56,
which leaves room for 30-bit frequency totals. The encoder's carry handling
follows the classic cache/pending-0xFF scheme; the flush emits the shortest
byte string that identifies the final interval, and the decoder pads the
stream with zero bytes.

Stream layout is pinned by golden tests: the always-zero leading cache byte
is dropped and trailing zero bytes are stripped.
"""
from __future__ import annotations

from typing import List

STATE_BITS = 64
MASK = (1 << STATE_BITS) - 1
RANGE_BOTTOM = 1 << (STATE_BITS - 8)
_TOP_SHIFT = STATE_BITS - 8
_CARRY_LIMIT = 0xFF << _TOP_SHIFT


class CorruptStreamError(ValueError):
    """Raised when a bitstream cannot have been produced by the matching encoder."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK
        self._cache = 0
        self._pending = 1
        self._out = bytearray()
        self._finished = False

    def _shift_low(self) -> None:
        low = self.low
        if low < _CARRY_LIMIT or low > MASK:
            carry = low >> STATE_BITS
            byte = self._cache
            while True:
                self._out.append((byte + carry) & 0xFF)
                byte = 0xFF
                self._pending -= 1
                if self._pending == 0:
                    break
            self._cache = (low >> _TOP_SHIFT) & 0xFF
        self._pending += 1
        self.low = (low << 8) & MASK

    def encode(self, cum: int, freq: int, total: int) -> None:
        """Narrow the interval to [cum, cum + freq) out of ``total``."""
        r = self.range // total
        self.low += r * cum
        self.range = r * freq
        while self.range < RANGE_BOTTOM:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value: int, nbits: int) -> None:
        """Uniformly coded literal, ``nbits <= 16`` at a time."""
        while nbits > 0:
            take = min(16, nbits)
            nbits -= take
            self.encode((value >> nbits) & ((1 << take) - 1), 1, 1 << take)

    def finish(self) -> bytes:
        if self._finished:
            raise RuntimeError("encoder already finished")
        self._finished = True
        # pick the value in [low, low + range) with the most trailing zeros
        top = self.low + self.range - 1
        for shift in range(STATE_BITS + 1, -1, -1):
            value = ((self.low + (1 << shift) - 1) >> shift) << shift
            if value <= top:
                break
        self.low = value
        for _ in range(STATE_BITS // 8 + 1):
            self._shift_low()
        out = bytes(self._out)
        if out[0] != 0:
            raise AssertionError("leading cache byte must be zero")
        return out[1:].rstrip(b"\x00")


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self.range = MASK
        self.code = 0
        for _ in range(STATE_BITS // 8):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        pos = self._pos
        self._pos += 1
        return self._data[pos] if pos < len(self._data) else 0

    def decode_target(self, total: int) -> int:
        self._r = self.range // total
        target = self.code // self._r
        if target >= total:
            raise CorruptStreamError("code value outside the coding interval")
        return target

    def consume(self, cum: int, freq: int) -> None:
        r = self._r
        self.code -= r * cum
        self.range = r * freq
        if self.code >= self.range or self.code < 0:
            raise CorruptStreamError("code value outside the coding interval")
        while self.range < RANGE_BOTTOM:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next_byte()) & MASK

    def decode_bits(self, nbits: int) -> int:
        value = 0
        while nbits > 0:
            take = min(16, nbits)
            nbits -= take
            sym = self.decode_target(1 << take)
            self.consume(sym, 1)
            value = (value << take) | sym
        return value


class AdaptiveFrequencyModel:
    """Order-0 adaptive model over ``size`` symbols, Laplace-initialized."""

    def __init__(self, size: int, increment: int = 1):
        if size < 1:
            raise ValueError("alphabet size must be positive")
        self.freq: List[int] = [1] * size
        self.total = size
        self.increment = increment
        # Fenwick tree over freq for O(log n) cumulative lookups
        self._tree = [0] * (size + 1)
        for i in range(size):
            self._add(i, 1)

    def _add(self, i: int, delta: int) -> None:
        i += 1
        while i < len(self._tree):
            self._tree[i] += delta
            i += i & -i

    def cumulative(self, symbol: int) -> int:
        s, i = 0, symbol
        while i > 0:
            s += self._tree[i]
            i -= i & -i
        return s

    def find(self, target: int) -> int:
        """Symbol whose cumulative interval contains ``target``."""
        pos, rem = 0, target
        step = 1 << (len(self._tree).bit_length())
        while step:
            nxt = pos + step
            if nxt < len(self._tree) and self._tree[nxt] <= rem:
                pos = nxt
                rem -= self._tree[nxt]
            step >>= 1
        return pos

    def update(self, symbol: int) -> None:
        self.freq[symbol] += self.increment
        self.total += self.increment
        self._add(symbol, self.increment)

    def encode(self, encoder: RangeEncoder, symbol: int) -> None:
        encoder.encode(self.cumulative(symbol), self.freq[symbol], self.total)
        self.update(symbol)

    def decode(self, decoder: RangeDecoder) -> int:
        target = decoder.decode_target(self.total)
        symbol = self.find(target)
        decoder.consume(self.cumulative(symbol), self.freq[symbol])
        self.update(symbol)
        return symbol
