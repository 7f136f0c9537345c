"""Quantization, conditional-Gaussian entropy coding and the payload container.

Feature elements are coded with per-element discretized Gaussian models
whose scales come from the transmitted side information, so encoder and
decoder build bit-identical frequency tables.

Model for one element with scale ``theta``: symbols k in [-K, K] with
K = ceil(8 * theta) take the Gaussian mass of [k - 0.5, k + 0.5]; one escape
symbol takes both tails and is followed by the raw 32-bit value. Masses are
mapped to integer frequencies out of 2**30 with every symbol getting at
least one count, which is where the 2**-30 probability floor comes from.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import gammaln, ndtr

from .gsm import GRID_STEP, hyper_latent, scale_from_latent
from .rangecoder import (AdaptiveFrequencyModel, CorruptStreamError, RangeDecoder,
                         RangeEncoder)
from .semantic import FilterSet, MaskBitstream, element_mask, encode_mask

FREQ_BITS = 30
FREQ_TOTAL = 1 << FREQ_BITS
P_FLOOR = 2.0 ** -FREQ_BITS
ESCAPE_BITS = 32
CHECK_BITS = 16
SUPPORT_SIGMAS = 8
MAX_SUPPORT = 1 << 20


@dataclass(frozen=True)
class FeatureBitstream:
    data: bytes
    bit_count: int


@dataclass(frozen=True)
class SideInfoBitstream:
    data: bytes
    bit_count: int


@dataclass(frozen=True)
class RateReport:
    feature_bits: int
    side_bits: int
    mask_bits: int
    total_bits: int
    ideal_feature_bits: float
    ideal_side_bits: float
    include_mask: bool = False


def quantize(features: np.ndarray) -> np.ndarray:
    """Unit-step rounding with ties away from zero."""
    features = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise ValueError("cannot quantize non-finite features")
    q = np.sign(features) * np.floor(np.abs(features) + 0.5)
    if np.any(np.abs(q) > 2 ** 31 - 1):
        raise OverflowError("quantized value exceeds the int32 range")
    return q.astype(np.int32)


def support(theta) -> np.ndarray:
    return np.minimum(np.ceil(SUPPORT_SIGMAS * np.asarray(theta, dtype=np.float64)),
                      MAX_SUPPORT).astype(np.int64)


def gaussian_mass(k, theta) -> np.ndarray:
    """Unclamped N(0, theta^2) mass of [k - 0.5, k + 0.5]."""
    k = np.abs(np.asarray(k, dtype=np.float64))
    theta = np.asarray(theta, dtype=np.float64)
    # upper-tail differences keep precision far from the mode
    return ndtr(-(k - 0.5) / theta) - ndtr(-(k + 0.5) / theta)


def conditional_pmf(k, theta):
    """P(k | theta) of the unit-step quantized Gaussian, floored at 2**-30."""
    p = np.maximum(gaussian_mass(k, theta), P_FLOOR)
    return float(p) if np.ndim(p) == 0 else p


def ideal_codelength(q: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Per-element information content in bits under the coding model.

    In-support symbols cost -log2 P(k); escaped ones cost the escape
    symbol plus the raw 32-bit value. The 16-bit stream checksum is not
    included.
    """
    q = np.asarray(q)
    theta = np.asarray(theta, dtype=np.float64)
    kmax = support(theta)
    inside = np.abs(q) <= kmax
    bits = -np.log2(np.maximum(gaussian_mass(q, theta), P_FLOOR))
    if not inside.all():
        tail = 2.0 * ndtr(-(kmax + 0.5) / theta)
        escape = -np.log2(np.maximum(tail, P_FLOOR)) + ESCAPE_BITS
        bits = np.where(inside, bits, escape)
    return bits


class _TableCache:
    """Integer cumulative-frequency tables, one per distinct scale value."""

    def __init__(self):
        self._tables: Dict[float, Tuple[int, list]] = {}

    def get(self, theta: float) -> Tuple[int, list]:
        entry = self._tables.get(theta)
        if entry is None:
            entry = self._tables[theta] = self._build(theta)
        return entry

    @staticmethod
    def _build(theta: float) -> Tuple[int, list]:
        kmax = int(support(theta))
        n = 2 * kmax + 2
        spare = FREQ_TOTAL - n
        edges = (np.arange(n) - kmax - 0.5) / theta
        low_tail = ndtr(-(kmax + 0.5) / theta)
        mass_below = np.maximum(ndtr(edges) - low_tail, 0.0)
        cum = np.arange(n, dtype=np.int64) + np.floor(mass_below * spare).astype(np.int64)
        cum[0] = 0
        cum = np.maximum.accumulate(cum)  # guard against rounding inversions
        table = cum.tolist() + [FREQ_TOTAL]
        for i in range(n):
            if table[i + 1] <= table[i]:
                raise AssertionError(f"degenerate frequency table for theta={theta}")
        return kmax, table


def _coding_order(q: np.ndarray, theta: np.ndarray, selection) -> Tuple[np.ndarray, np.ndarray]:
    mask = element_mask(selection, theta.shape)
    return q[mask], theta[mask]


def encode_features(q: np.ndarray, theta: np.ndarray, selection) -> FeatureBitstream:
    """Arithmetic-code the elements of ``q`` inside the selection, row-major (i, j, c)."""
    q = np.asarray(q)
    theta = np.asarray(theta, dtype=np.float64)
    if q.shape != theta.shape:
        raise ValueError(f"shape mismatch: q {q.shape} vs theta {theta.shape}")
    values, scales = _coding_order(q, theta, selection)
    data = _encode_symbols(values.tolist(), scales.tolist())
    return FeatureBitstream(data, 8 * len(data))


def _check_value(values) -> int:
    return zlib.crc32(np.asarray(values, dtype="<i8").tobytes()) & ((1 << CHECK_BITS) - 1)


def _encode_symbols(values, scales, cache: Optional[_TableCache] = None) -> bytes:
    if not values:
        return b""
    cache = cache or _TableCache()
    enc = RangeEncoder()
    for k, theta in zip(values, scales):
        kmax, table = cache.get(theta)
        if -kmax <= k <= kmax:
            idx = k + kmax
            enc.encode(table[idx], table[idx + 1] - table[idx], FREQ_TOTAL)
        else:
            idx = 2 * kmax + 1
            enc.encode(table[idx], table[idx + 1] - table[idx], FREQ_TOTAL)
            enc.encode_bits(k & 0xFFFFFFFF, ESCAPE_BITS)
    # a range-coded stream of fixed symbol count has almost no redundancy;
    # the trailing checksum is what turns corruption into an error
    enc.encode_bits(_check_value(values), CHECK_BITS)
    return enc.finish()


def decode_features(stream: FeatureBitstream, theta: np.ndarray, selection) -> np.ndarray:
    """Inverse of :func:`encode_features`; elements outside the selection are 0."""
    from bisect import bisect_right

    theta = np.asarray(theta, dtype=np.float64)
    mask = element_mask(selection, theta.shape)
    scales = theta[mask].tolist()
    cache = _TableCache()
    if not scales:
        if stream.data:
            raise CorruptStreamError("non-empty feature stream for an empty selection")
        return np.zeros(theta.shape, dtype=np.int32)
    dec = RangeDecoder(stream.data)
    values = []
    for t in scales:
        kmax, table = cache.get(t)
        target = dec.decode_target(FREQ_TOTAL)
        idx = bisect_right(table, target) - 1
        dec.consume(table[idx], table[idx + 1] - table[idx])
        if idx == 2 * kmax + 1:
            raw = dec.decode_bits(ESCAPE_BITS)
            k = raw - (1 << 32) if raw >= 1 << 31 else raw
            if -kmax <= k <= kmax:
                raise CorruptStreamError("escape used for an in-support value")
        else:
            k = idx - kmax
        values.append(k)
    if dec.decode_bits(CHECK_BITS) != _check_value(values):
        raise CorruptStreamError("feature stream checksum mismatch")
    # every valid stream is the unique output of the encoder for its symbols
    if _encode_symbols(values, scales, cache) != stream.data:
        raise CorruptStreamError("feature stream does not match its decoded content")
    q = np.zeros(theta.shape, dtype=np.int32)
    q[mask] = np.array(values, dtype=np.int64)
    return q


_SIDE_HEADER = struct.Struct("<HHHhH")
SIDE_HEADER_BITS = 8 * _SIDE_HEADER.size


def encode_latent(latent: np.ndarray) -> SideInfoBitstream:
    """Adaptive order-0 coding of integer hyper-latent indices."""
    latent = np.asarray(latent, dtype=np.int64)
    if latent.ndim != 3:
        raise ValueError("latent must be 3-D")
    lo = int(latent.min()) if latent.size else 0
    hi = int(latent.max()) if latent.size else 0
    if not (-32768 <= lo and hi - lo < 65535 and max(latent.shape, default=0) < 65536):
        raise ValueError("latent does not fit the side-info header")
    size = hi - lo + 1
    header = _SIDE_HEADER.pack(*latent.shape, lo, size)
    enc = RangeEncoder()
    model = AdaptiveFrequencyModel(size)
    symbols = (latent.ravel() - lo).tolist()
    for s in symbols:
        model.encode(enc, s)
    enc.encode_bits(_check_value(symbols), CHECK_BITS)
    data = header + enc.finish()
    return SideInfoBitstream(data, 8 * len(data))


def decode_latent(stream: SideInfoBitstream) -> np.ndarray:
    data = stream.data
    if len(data) < _SIDE_HEADER.size:
        raise CorruptStreamError("side-info stream shorter than its header")
    w, h, c, lo, size = _SIDE_HEADER.unpack_from(data)
    if size < 1:
        raise CorruptStreamError("side-info alphabet is empty")
    body = data[_SIDE_HEADER.size:]
    dec = RangeDecoder(body)
    model = AdaptiveFrequencyModel(size)
    symbols = [model.decode(dec) for _ in range(w * h * c)]
    if dec.decode_bits(CHECK_BITS) != _check_value(symbols):
        raise CorruptStreamError("side-info checksum mismatch")
    check = RangeEncoder()
    model = AdaptiveFrequencyModel(size)
    for s in symbols:
        model.encode(check, s)
    check.encode_bits(_check_value(symbols), CHECK_BITS)
    if check.finish() != body:
        raise CorruptStreamError("side-info stream does not match its decoded content")
    return (np.array(symbols, dtype=np.int64) + lo).reshape(w, h, c).astype(np.int32)


def encode_side_info(theta: np.ndarray, tile: int = 1, step: float = GRID_STEP) -> SideInfoBitstream:
    """Quantize log2(theta) on the grid (per tile) and code the indices."""
    return encode_latent(hyper_latent(theta, tile, step))


def decode_side_info(stream: SideInfoBitstream, shape: Tuple[int, int, int], tile: int = 1,
                     step: float = GRID_STEP) -> np.ndarray:
    """Return the grid-quantized scale field both ends code features with."""
    return scale_from_latent(decode_latent(stream), shape, tile, step)


def ideal_latent_bits(latent: np.ndarray) -> float:
    """Exact code length of the adaptive model, excluding header and flush.

    The Laplace-initialized counts make this order-independent:
    log2 of (A + n - 1)! / (A - 1)! over prod_s n_s!.
    """
    latent = np.asarray(latent).ravel()
    if latent.size == 0:
        return 0.0
    _, counts = np.unique(latent, return_counts=True)
    size = int(latent.max() - latent.min()) + 1
    nats = gammaln(size + latent.size) - gammaln(size) - gammaln(counts + 1).sum()
    return float(nats / math.log(2))


def measure_rate(q: np.ndarray, theta: np.ndarray, selection, latent: Optional[np.ndarray] = None,
                 include_mask: bool = False) -> RateReport:
    """Actual and ideal bit counts for one coded image.

    ``latent`` is the transmitted hyper latent; by default it is taken to be
    the per-element grid indices of ``theta``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if latent is None:
        latent = hyper_latent(theta, 1)
    feat = encode_features(q, theta, selection)
    side = encode_latent(latent)
    mask_bits = encode_mask(selection).bit_count if isinstance(selection, FilterSet) else 0
    values, scales = _coding_order(np.asarray(q), theta, selection)
    ideal_feat = float(ideal_codelength(values, scales).sum())
    ideal_side = ideal_latent_bits(latent) + SIDE_HEADER_BITS + CHECK_BITS
    total = feat.bit_count + side.bit_count + (mask_bits if include_mask else 0)
    return RateReport(feat.bit_count, side.bit_count, mask_bits, total, ideal_feat,
                      ideal_side, include_mask)


# -- payload container -------------------------------------------------------

PAYLOAD_MAGIC = b"GVSC"
PAYLOAD_VERSION = 1
FLAG_MASK_COUNTED = 0x01
_BASIS_CODES = {"dct": 0, "haar": 1}
_HEADER = struct.Struct("<4sBBHHHHHBBBHddff")


class PayloadError(ValueError):
    """Raised for malformed or corrupted payload containers."""


@dataclass(frozen=True)
class PayloadHeader:
    image_size: Tuple[int, int]
    feature_shape: Tuple[int, int, int]
    block_size: int
    scale_window: int
    basis: str
    profile_id: int
    shrink_ratio: float
    gain: float
    alpha: float
    grid_step: float = GRID_STEP
    mask_counted: bool = False
    prompt: str = ""


@dataclass(frozen=True)
class Payload:
    header: PayloadHeader
    side_info: SideInfoBitstream
    mask: MaskBitstream
    features: FeatureBitstream
    data: bytes = field(repr=False, default=b"")

    @property
    def rate_bits(self) -> int:
        """B_y + B_s, plus B_P when the header says the mask is counted."""
        total = self.features.bit_count + self.side_info.bit_count
        return total + (self.mask.bit_count if self.header.mask_counted else 0)

    def accounting(self) -> Dict[str, int]:
        sections = 8 * (4 + 4) * 3 + 8 * 4  # length + CRC per section, mask bit count
        streams = (self.features.bit_count + self.side_info.bit_count
                   + 8 * len(self.mask.data))
        header = 8 * len(self.data) - sections - streams
        return {"header_bits": header, "section_overhead_bits": sections,
                "feature_bits": self.features.bit_count, "side_bits": self.side_info.bit_count,
                "mask_bits": self.mask.bit_count, "mask_padding_bits": 8 * len(self.mask.data)
                - self.mask.bit_count, "total_bits": 8 * len(self.data)}


def _section(data: bytes, prefix: bytes = b"") -> bytes:
    body = prefix + data
    return struct.pack("<I", len(body)) + body + struct.pack("<I", zlib.crc32(body))


def pack_payload(header: PayloadHeader, side_info: SideInfoBitstream, mask: MaskBitstream,
                 features: FeatureBitstream) -> Payload:
    prompt = header.prompt.encode("utf-8")
    if len(prompt) > 65535:
        raise ValueError("prompt too long")
    flags = FLAG_MASK_COUNTED if header.mask_counted else 0
    head = _HEADER.pack(PAYLOAD_MAGIC, PAYLOAD_VERSION, flags, *header.image_size,
                        *header.feature_shape, header.block_size, header.scale_window,
                        _BASIS_CODES[header.basis], header.profile_id, header.shrink_ratio,
                        header.gain, header.alpha, header.grid_step)
    head += struct.pack("<H", len(prompt)) + prompt
    data = (head + _section(side_info.data)
            + _section(mask.data, struct.pack("<I", mask.bit_count)) + _section(features.data))
    return Payload(header, side_info, mask, features, data)


def unpack_payload(data: bytes) -> Payload:
    if len(data) < _HEADER.size + 2 or data[:4] != PAYLOAD_MAGIC:
        raise PayloadError("not a GVSC payload")
    (_, version, flags, w, h, wy, hy, cy, block, window, basis, pid, ratio, gain, alpha,
     step) = _HEADER.unpack_from(data)
    if version != PAYLOAD_VERSION:
        raise PayloadError(f"unsupported payload version {version}")
    pos = _HEADER.size
    (plen,) = struct.unpack_from("<H", data, pos)
    pos += 2
    try:
        prompt = data[pos:pos + plen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise PayloadError("prompt is not valid UTF-8") from exc
    pos += plen
    sections = []
    for name in ("side-info", "mask", "features"):
        if pos + 4 > len(data):
            raise PayloadError(f"truncated {name} section")
        (length,) = struct.unpack_from("<I", data, pos)
        body = data[pos + 4:pos + 4 + length]
        if len(body) != length or pos + 8 + length > len(data):
            raise PayloadError(f"truncated {name} section")
        (crc,) = struct.unpack_from("<I", data, pos + 4 + length)
        if zlib.crc32(body) != crc:
            raise PayloadError(f"CRC mismatch in {name} section")
        sections.append(body)
        pos += 8 + length
    if pos != len(data):
        raise PayloadError("trailing bytes after payload")
    names = {v: k for k, v in _BASIS_CODES.items()}
    if basis not in names:
        raise PayloadError(f"unknown basis code {basis}")
    header = PayloadHeader((w, h), (wy, hy, cy), block, window, names[basis], pid, ratio, gain,
                           float(alpha), float(step), bool(flags & FLAG_MASK_COUNTED), prompt)
    side_raw, mask_raw, feat_raw = sections
    if len(mask_raw) < 4:
        raise PayloadError("mask section too short")
    (mask_bits,) = struct.unpack_from("<I", mask_raw)
    return Payload(header, SideInfoBitstream(side_raw, 8 * len(side_raw)),
                   MaskBitstream(mask_raw[4:], mask_bits),
                   FeatureBitstream(feat_raw, 8 * len(feat_raw)), bytes(data))
