"""Semantic importance, threshold filtering and run-length coding of the mask."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .tensorio import load_tensor, save_tensor


class MaskDecodeError(ValueError):
    """Raised for truncated or inconsistent mask bitstreams."""


@dataclass(frozen=True)
class ClassModel:
    """Backbone feature maps plus a linear classification head.

    ``feature_maps`` has shape (W_f, H_f, C_f); ``weights`` has one row of
    length C_f per label.
    """

    feature_maps: np.ndarray
    weights: np.ndarray
    labels: Tuple[str, ...]

    def __post_init__(self):
        f = np.asarray(self.feature_maps, dtype=np.float64)
        w = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "feature_maps", f)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "labels", tuple(self.labels))
        if f.ndim != 3:
            raise ValueError(f"feature maps must be (W_f, H_f, C_f), got {f.shape}")
        if not self.labels:
            raise ValueError("class model has no labels")
        if w.shape != (len(self.labels), f.shape[2]):
            raise ValueError(f"weights shape {w.shape} does not match "
                             f"{len(self.labels)} labels x {f.shape[2]} maps")

    @classmethod
    def load(cls, maps_path: Union[str, Path], weights_path: Union[str, Path]) -> "ClassModel":
        maps = load_tensor(maps_path)
        labels, rows = [], []
        for line in Path(weights_path).read_text(encoding="utf-8").splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            label, *values = line.split(",")
            labels.append(label.strip())
            rows.append([float(v) for v in values])
        return cls(maps, np.array(rows), labels)

    def save(self, maps_path: Union[str, Path], weights_path: Union[str, Path]) -> None:
        save_tensor(maps_path, self.feature_maps.astype(np.float32))
        lines = [",".join([label] + [repr(float(v)) for v in row])
                 for label, row in zip(self.labels, self.weights)]
        Path(weights_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class FilterSet:
    """Channel-complete selection: a spatial mask repeated over all channels."""

    mask: np.ndarray
    channels: int

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise ValueError(f"spatial mask must be 2-D, got {mask.shape}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (*self.mask.shape, self.channels)

    @property
    def size(self) -> int:
        """|P|, the number of selected feature elements."""
        return int(self.mask.sum()) * self.channels

    def element_mask(self) -> np.ndarray:
        return np.broadcast_to(self.mask[:, :, None], self.shape)

    def indices(self) -> np.ndarray:
        return np.argwhere(self.element_mask())

    @classmethod
    def full(cls, shape: Tuple[int, int, int]) -> "FilterSet":
        return cls(np.ones(shape[:2], bool), shape[2])

    @classmethod
    def empty(cls, shape: Tuple[int, int, int]) -> "FilterSet":
        return cls(np.zeros(shape[:2], bool), shape[2])

    def __eq__(self, other):
        return (isinstance(other, FilterSet) and self.channels == other.channels
                and np.array_equal(self.mask, other.mask))

    def __hash__(self):
        return hash((self.mask.shape, self.mask.tobytes(), self.channels))


def element_mask(selection, shape: Tuple[int, int, int]) -> np.ndarray:
    """Boolean (W, H, C) array for a FilterSet or an explicit element mask."""
    if isinstance(selection, FilterSet):
        if selection.shape != tuple(shape):
            raise ValueError(f"filter set shape {selection.shape} does not match {tuple(shape)}")
        return selection.element_mask()
    mask = np.asarray(selection, dtype=bool)
    if mask.shape != tuple(shape):
        raise ValueError(f"selection shape {mask.shape} does not match {tuple(shape)}")
    return mask


def class_scores(model: ClassModel) -> List[Tuple[str, float, float]]:
    """(label, S_k, P_k) for every class; P is the softmax of S."""
    map_sums = model.feature_maps.sum(axis=(0, 1))
    scores = model.weights @ map_sums
    shifted = np.exp(scores - scores.max())
    probs = shifted / shifted.sum()
    return [(label, float(s), float(p)) for label, s, p in zip(model.labels, scores, probs)]


def class_importance(model: ClassModel, k: int) -> np.ndarray:
    if not 0 <= k < len(model.labels):
        raise IndexError(f"class index {k} out of range for {len(model.labels)} classes")
    return model.feature_maps @ model.weights[k]


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def minmax_normalize(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("importance contains non-finite values")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def normalize_upsample(raw: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """Min-max normalize to [0, 1] then bilinearly resize to ``target``."""
    norm = minmax_normalize(raw)
    rows = _interp_matrix(norm.shape[0], target[0])
    cols = _interp_matrix(norm.shape[1], target[1])
    return np.clip(rows @ norm @ cols.T, 0.0, 1.0)


def select_importance(model: ClassModel, target: Tuple[int, int]) -> Tuple[np.ndarray, str]:
    probs = np.array([p for _, _, p in class_scores(model)])
    k = int(np.argmax(probs))  # first maximum wins ties
    return normalize_upsample(class_importance(model, k), target), model.labels[k]


def saliency_surrogate(features: np.ndarray) -> np.ndarray:
    energy = np.sum(np.asarray(features, dtype=np.float64) ** 2, axis=2)
    return minmax_normalize(energy)


def build_filter_set(importance: np.ndarray, alpha: float, channels: int) -> FilterSet:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return FilterSet(np.asarray(importance) >= alpha, channels)


def apply_filter(features: np.ndarray, selection) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    return np.where(element_mask(selection, features.shape), features, 0.0)


# -- run-length coding of the spatial mask ---------------------------------

@dataclass(frozen=True)
class MaskBitstream:
    data: bytes
    bit_count: int


def mask_runs(mask: np.ndarray) -> Tuple[int, np.ndarray]:
    """First value and run lengths of the row-major flattened mask."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return 0, np.zeros(0, dtype=np.int64)
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], edges, [flat.size]])
    return int(flat[0]), np.diff(bounds)


def gamma_length(n: np.ndarray) -> np.ndarray:
    n = np.asarray(n, dtype=np.int64)
    return 2 * (np.floor(np.log2(n)).astype(np.int64)) + 1


def _gamma_bits(runs: np.ndarray) -> np.ndarray:
    nbits = np.floor(np.log2(runs)).astype(np.int64)
    lengths = 2 * nbits + 1
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    bits = np.zeros(int(lengths.sum()), dtype=np.uint8)
    for b in range(int(nbits.max()) + 1 if runs.size else 0):
        sel = nbits >= b
        pos = starts[sel] + 2 * nbits[sel] - b
        bits[pos] = (runs[sel] >> b) & 1
    return bits


def encode_mask(selection: Union[FilterSet, np.ndarray]) -> MaskBitstream:
    """u16 width, u16 height, first-bit flag, then Elias-gamma run lengths."""
    mask = selection.mask if isinstance(selection, FilterSet) else np.asarray(selection, bool)
    w, h = mask.shape
    if not (1 <= w < 65536 and 1 <= h < 65536):
        raise ValueError(f"mask dims {mask.shape} do not fit the 16-bit header")
    first, runs = mask_runs(mask)
    header = np.unpackbits(np.frombuffer(struct.pack(">HH", w, h), dtype=np.uint8))
    bits = np.concatenate([header, [first], _gamma_bits(runs)]).astype(np.uint8)
    return MaskBitstream(np.packbits(bits).tobytes(), int(bits.size))


def decode_mask(stream: MaskBitstream, channels: int = 1) -> FilterSet:
    data, bit_count = stream.data, stream.bit_count
    if bit_count < 33 or len(data) * 8 < bit_count or len(data) != -(-bit_count // 8):
        raise MaskDecodeError("mask stream is truncated")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if bits[bit_count:].any():
        raise MaskDecodeError("non-zero padding after mask stream")
    bits = bits[:bit_count]
    w, h = struct.unpack(">HH", np.packbits(bits[:32]).tobytes())
    if w == 0 or h == 0:
        raise MaskDecodeError("mask header has zero dimension")
    first = int(bits[32])
    body = bits[33:]
    total = w * h
    # next_one[p]: index of the first set bit at or after p
    n = body.size
    idx = np.where(body == 1, np.arange(n), n)
    next_one = np.minimum.accumulate(idx[::-1])[::-1] if n else idx
    starts = []
    p = 0
    while p < n:
        q = int(next_one[p])
        if q >= n:
            raise MaskDecodeError("mask stream ended inside an Elias-gamma code")
        starts.append(p)
        p += 2 * (q - p) + 1
    if p != n:
        raise MaskDecodeError("mask stream ended inside an Elias-gamma code")
    starts = np.array(starts, dtype=np.int64)
    zeros = next_one[starts] - starts if starts.size else starts
    if starts.size == 0 or zeros.max() > 31:
        raise MaskDecodeError("malformed run-length body")
    runs = np.zeros(starts.size, dtype=np.int64)
    for b in range(int(zeros.max()) + 1):
        sel = zeros >= b
        runs[sel] = (runs[sel] << 1) | body[starts[sel] + zeros[sel] + b]
    if runs.sum() != total:
        raise MaskDecodeError(f"runs cover {runs.sum()} pixels, header declares {total}")
    values = (np.arange(runs.size) + first) % 2
    flat = np.repeat(values.astype(bool), runs)
    return FilterSet(flat.reshape(w, h), channels)
