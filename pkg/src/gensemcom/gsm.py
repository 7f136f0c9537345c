"""Feature-domain statistics: GSM sampling, the analytic coder, scale fields.

Feature tensors are plain float64 arrays of shape (W_y, H_y, C_y) and scale
fields are arrays of the same shape holding per-element standard deviations.
The learned encoder/decoder pair is replaced by a gain-scaled orthonormal
block transform, and the hyper prior by a windowed RMS scale estimate whose
tile-averaged, log-quantized version plays the role of the hyper latent.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import uniform_filter

THETA_FLOOR = 1e-3
BETA_EPS = 1e-6
GRID_STEP = 0.25
# Feature gain of the reference coder; unit-step quantization at this gain
# gives 40 dB on 16 synthetic scenes (seed 0), see calibrate_profile_table
# and the calibrate-profiles CLI command.
DEFAULT_GAIN = 0.1129974

BASES = ("dct", "haar")


@dataclass(frozen=True)
class ExtractorConfig:
    block_size: int = 8
    scale_window: int = 3
    basis: str = "dct"
    gain: float = DEFAULT_GAIN

    def __post_init__(self):
        b = self.block_size
        if b < 1 or b & (b - 1):
            raise ValueError(f"block_size must be a power of two, got {b}")
        if self.scale_window < 1 or self.scale_window % 2 == 0:
            raise ValueError(f"scale_window must be odd and positive, got {self.scale_window}")
        if self.basis not in BASES:
            raise ValueError(f"unknown basis {self.basis!r}; choose from {BASES}")
        if not self.gain > 0:
            raise ValueError("gain must be positive")

    @property
    def channels(self) -> int:
        return 3 * self.block_size ** 2

    def feature_shape(self, width: int, height: int) -> Tuple[int, int, int]:
        b = self.block_size
        return (-(-width // b), -(-height // b), self.channels)


@dataclass(frozen=True)
class CoderProfile:
    """One rate-distortion operating point of the source coder.

    ``shrink_ratio`` multiplies reference features before unit-step
    quantization, so smaller ratios mean coarser effective quantization.
    """

    id: int
    shrink_ratio: float
    nominal_psnr: float
    description: str = ""

    def __post_init__(self):
        if not 0 < self.shrink_ratio <= 1:
            raise ValueError(f"profile {self.id}: shrink ratio must lie in (0, 1]")

    @property
    def is_reference(self) -> bool:
        return self.shrink_ratio == 1.0


class ProfileTable(Sequence[CoderProfile]):
    """Coder profiles ordered by nominal PSNR, best first."""

    def __init__(self, profiles: Sequence[CoderProfile]):
        profiles = sorted(profiles, key=lambda p: (-p.nominal_psnr, p.id))
        if not profiles:
            raise ValueError("profile table is empty")
        ids = [p.id for p in profiles]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate profile ids")
        if sum(p.is_reference for p in profiles) > 1:
            raise ValueError("at most one profile may have shrink ratio 1")
        self._profiles = list(profiles)

    def __getitem__(self, index):
        return self._profiles[index]

    def __len__(self) -> int:
        return len(self._profiles)

    def __iter__(self) -> Iterator[CoderProfile]:
        return iter(self._profiles)

    def by_id(self, profile_id: int) -> CoderProfile:
        for p in self._profiles:
            if p.id == profile_id:
                return p
        raise KeyError(f"no profile with id {profile_id}")

    @property
    def reference(self) -> CoderProfile:
        for p in self._profiles:
            if p.is_reference:
                return p
        raise LookupError("profile table has no reference profile (shrink ratio 1)")

    @classmethod
    def parse(cls, text: str) -> "ProfileTable":
        profiles = []
        for row in csv.reader(line for line in text.splitlines()
                              if line.strip() and not line.lstrip().startswith("#")):
            if row[0].strip() == "id":
                continue
            if len(row) < 3:
                raise ValueError(f"bad profile line {row!r}")
            profiles.append(CoderProfile(int(row[0]), float(row[1]), float(row[2]),
                                         ",".join(row[3:]).strip()))
        return cls(profiles)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ProfileTable":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "ProfileTable":
        text = resources.files("gensemcom").joinpath("data/profiles.csv").read_text("utf-8")
        return cls.parse(text)

    def dumps(self) -> str:
        lines = ["id,r,nominal_psnr_db,description"]
        lines += [f"{p.id},{p.shrink_ratio:.6f},{p.nominal_psnr:.2f},{p.description}"
                  for p in self._profiles]
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def basis_matrix(size: int, basis: str = "dct") -> np.ndarray:
    """Orthonormal 1-D analysis matrix; rows are basis functions."""
    if basis == "dct":
        n = np.arange(size)
        a = np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / (2 * size))
        a *= np.sqrt(2.0 / size)
        a[0] /= np.sqrt(2.0)
        return a
    if basis == "haar":
        a = np.array([[1.0]])
        while a.shape[0] < size:
            k = a.shape[0]
            a = np.vstack([np.kron(a, [1.0, 1.0]), np.kron(np.eye(k), [1.0, -1.0])]) / np.sqrt(2.0)
        return a
    raise ValueError(f"unknown basis {basis!r}")


def sample_gsm_features(theta: np.ndarray, seed: int) -> np.ndarray:
    """Draw y = theta * u with u i.i.d. standard normal."""
    theta = check_scale_field(theta)
    rng = np.random.default_rng(seed)
    return theta * rng.standard_normal(theta.shape)


def pad_image(image: np.ndarray, block_size: int) -> np.ndarray:
    w, h = image.shape[:2]
    pw, ph = -w % block_size, -h % block_size
    if pw or ph:
        image = np.pad(image, ((0, pw), (0, ph), (0, 0)), mode="symmetric")
    return image


def extract_features(image: np.ndarray, cfg: ExtractorConfig = ExtractorConfig()) -> np.ndarray:
    """Blockwise orthonormal transform of an RGB image, scaled by ``cfg.gain``.

    Block (i, j) of the (padded) image lands at spatial position (i, j);
    channel ``c = color * b**2 + u * b + v`` holds basis coefficient (u, v).
    Non-divisible sizes are padded by reflection; pass the original size to
    :func:`reconstruct_image` to crop it off again.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (W, H, 3) image, got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    b = cfg.block_size
    x = pad_image(image, b)
    wy, hy = x.shape[0] // b, x.shape[1] // b
    a = basis_matrix(b, cfg.basis)
    blocks = x.reshape(wy, b, hy, b, 3)
    coef = np.einsum("um,vn,imjnc->ijcuv", a, a, blocks, optimize=True)
    return cfg.gain * coef.reshape(wy, hy, cfg.channels)


def reconstruct_image(features: np.ndarray, cfg: ExtractorConfig = ExtractorConfig(),
                      size: Optional[Tuple[int, int]] = None, clamp: bool = True) -> np.ndarray:
    """Inverse of :func:`extract_features`, optionally cropped and clamped to [0, 255]."""
    features = np.asarray(features, dtype=np.float64)
    b = cfg.block_size
    if features.ndim != 3 or features.shape[2] != cfg.channels:
        raise ValueError(f"features of shape {features.shape} do not match "
                         f"{cfg.channels} channels for block size {b}")
    wy, hy = features.shape[:2]
    a = basis_matrix(b, cfg.basis)
    coef = features.reshape(wy, hy, 3, b, b) / cfg.gain
    blocks = np.einsum("um,vn,ijcuv->imjnc", a, a, coef, optimize=True)
    image = blocks.reshape(wy * b, hy * b, 3)
    if size is not None:
        w, h = size
        if w > image.shape[0] or h > image.shape[1]:
            raise ValueError(f"crop size {size} exceeds reconstructed size {image.shape[:2]}")
        image = image[:w, :h]
    return np.clip(image, 0.0, 255.0) if clamp else image


def check_scale_field(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("scale field contains non-finite values")
    if np.any(theta < THETA_FLOOR * (1 - 1e-12)):
        raise ValueError(f"scale field values must be >= {THETA_FLOOR}")
    return theta


def estimate_scale_field(features: np.ndarray, window: int = 3) -> np.ndarray:
    """Per-element RMS over a window x window spatial neighbourhood, floored."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    features = np.asarray(features, dtype=np.float64)
    power = uniform_filter(features ** 2, size=(window, window, 1), mode="reflect")
    return np.maximum(np.sqrt(np.maximum(power, 0.0)), THETA_FLOOR)


def apply_coder_profile(theta_r: np.ndarray, profile: Union[CoderProfile, float]) -> np.ndarray:
    ratio = profile.shrink_ratio if isinstance(profile, CoderProfile) else float(profile)
    return np.maximum(ratio * np.asarray(theta_r, dtype=np.float64), THETA_FLOOR)


def compute_scaling_field(theta_c: np.ndarray, theta_r: np.ndarray,
                          eps: float = BETA_EPS) -> Tuple[np.ndarray, bool]:
    """Return (beta, clamped) with beta = theta_c / theta_r limited to [eps, 1].

    ``clamped`` reports whether any ratio exceeded one before clamping.
    """
    theta_c = np.asarray(theta_c, dtype=np.float64)
    theta_r = np.asarray(theta_r, dtype=np.float64)
    if theta_c.shape != theta_r.shape:
        raise ValueError(f"shape mismatch {theta_c.shape} vs {theta_r.shape}")
    ratio = theta_c / theta_r
    clamped = bool(np.any(ratio > 1.0))
    return np.clip(ratio, eps, 1.0), clamped


def hyper_latent(theta: np.ndarray, tile: int, step: float = GRID_STEP) -> np.ndarray:
    """Log-grid indices of the tile-RMS scale field (the transmitted side info).

    Spatial tiles of ``tile x tile`` positions share one index per channel;
    edge tiles may be partial.
    """
    theta = np.asarray(theta, dtype=np.float64)
    wy, hy, cy = theta.shape
    tw, th = -(-wy // tile), -(-hy // tile)
    padded = np.full((tw * tile, th * tile, cy), np.nan)
    padded[:wy, :hy] = theta ** 2
    power = np.nanmean(padded.reshape(tw, tile, th, tile, cy), axis=(1, 3))
    log_scale = 0.5 * np.log2(power) / step
    return (np.sign(log_scale) * np.floor(np.abs(log_scale) + 0.5)).astype(np.int32)


def scale_from_latent(indices: np.ndarray, shape: Tuple[int, int, int], tile: int,
                      step: float = GRID_STEP) -> np.ndarray:
    """Expand hyper-latent indices back to a full-resolution, floored scale field."""
    theta = np.exp2(np.asarray(indices, dtype=np.float64) * step)
    theta = np.repeat(np.repeat(theta, tile, axis=0), tile, axis=1)
    wy, hy, cy = shape
    if theta.shape[0] < wy or theta.shape[1] < hy or theta.shape[2] != cy:
        raise ValueError(f"latent of shape {indices.shape} cannot cover {shape}")
    return np.maximum(theta[:wy, :hy], THETA_FLOOR)


def grid_quantize(theta: np.ndarray, step: float = GRID_STEP) -> np.ndarray:
    """Round log2(theta) to the side-info grid; e.g. 1.19 -> 2**0.25."""
    return np.maximum(np.exp2(np.round(np.log2(theta) / step) * step), THETA_FLOOR)


def psnr(x: np.ndarray, x_hat: np.ndarray, cap: float = 100.0) -> float:
    mse = float(np.mean((np.asarray(x, float) - np.asarray(x_hat, float)) ** 2))
    if mse == 0:
        return cap
    return min(cap, 10.0 * math.log10(255.0 ** 2 / mse))


def calibrate_profile_table(images: List[np.ndarray], targets_db: Sequence[float] = None,
                            cfg: ExtractorConfig = ExtractorConfig()) -> Tuple[float, ProfileTable]:
    """Fit the reference gain and shrink ratios to target mean PSNRs.

    The first target (highest PSNR) defines the reference gain; every other
    profile's ratio is found by bisection on the measured mean PSNR of
    full-image coding (no filtering) over ``images``.
    Returns ``(gain, table)``.
    """
    if targets_db is None:
        targets_db = np.linspace(40.0, 27.0, 19)
    targets_db = sorted(targets_db, reverse=True)
    base = [extract_features(img, ExtractorConfig(cfg.block_size, cfg.scale_window, cfg.basis, 1.0))
            for img in images]
    unit = ExtractorConfig(cfg.block_size, cfg.scale_window, cfg.basis, 1.0)

    def mean_psnr(step_gain: float) -> float:
        values = []
        for img, y in zip(images, base):
            q = np.sign(y * step_gain) * np.floor(np.abs(y * step_gain) + 0.5)
            x_hat = reconstruct_image(q / step_gain, unit, size=img.shape[:2])
            values.append(psnr(img, x_hat))
        return float(np.mean(values))

    def solve(target: float) -> float:
        lo, hi = 1e-4, 64.0  # PSNR increases with gain
        for _ in range(80):
            mid = math.sqrt(lo * hi)
            if mean_psnr(mid) < target:
                lo = mid
            else:
                hi = mid
            if hi / lo < 1 + 1e-6:
                break
        return math.sqrt(lo * hi)

    gain = solve(targets_db[0])
    profiles = [CoderProfile(0, 1.0, targets_db[0], "reference")]
    for k, target in enumerate(targets_db[1:], 1):
        ratio = solve(target) / gain
        profiles.append(CoderProfile(k, min(ratio, 1.0), round(mean_psnr(ratio * gain), 2),
                                     f"surrogate coder {k}"))
    profiles[0] = CoderProfile(0, 1.0, round(mean_psnr(gain), 2), "reference")
    return gain, ProfileTable(profiles)
