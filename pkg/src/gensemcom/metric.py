"""GVIF visual-fidelity metric and mask PSNR.

Features pass through an additive Gaussian "visual noise" channel of
variance gamma2. The reference information of element (i, j, c) is
0.5 * log2(1 + theta^2 / gamma2); a transmitted element keeps
0.5 * log2(1 + (beta * theta)^2 / gamma2), while a generated one carries
nothing about the reference and contributes zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Union

import numpy as np

from .gsm import (CoderProfile, ExtractorConfig, apply_coder_profile, compute_scaling_field,
                  estimate_scale_field, extract_features)
from .semantic import (ClassModel, FilterSet, build_filter_set, element_mask,
                       saliency_surrogate, select_importance)

DEFAULT_GAMMA2 = 0.1
PSNR_CAP_DB = 100.0

CSV_HEADER = "image_id,profile_id,alpha,gvif,numerator_bits,denominator_bits,mask_psnr_db,rate_bits"


class DegenerateInputError(ValueError):
    """Raised when the reference information is zero and GVIF is undefined."""


@dataclass(frozen=True)
class HvsParams:
    gamma2: float = DEFAULT_GAMMA2

    def __post_init__(self):
        if not self.gamma2 > 0:
            raise ValueError("gamma2 must be positive")


@dataclass(frozen=True)
class GvifReport:
    numerator_bits: float
    denominator_bits: float
    value: float
    channel_numerator_bits: np.ndarray = field(repr=False)
    channel_denominator_bits: np.ndarray = field(repr=False)
    beta_clamped: bool = False
    selected_elements: int = 0

    @property
    def mean_channel_numerator_bits(self) -> float:
        return float(np.mean(self.channel_numerator_bits))

    @property
    def mean_channel_denominator_bits(self) -> float:
        return float(np.mean(self.channel_denominator_bits))

    def to_dict(self) -> Dict[str, object]:
        return {"gvif": self.value, "numerator_bits": self.numerator_bits,
                "denominator_bits": self.denominator_bits,
                "mean_channel_numerator_bits": self.mean_channel_numerator_bits,
                "mean_channel_denominator_bits": self.mean_channel_denominator_bits,
                "selected_elements": self.selected_elements,
                "beta_clamped": self.beta_clamped}


def _info_terms(theta: np.ndarray, gamma2: float) -> np.ndarray:
    # 0.5 * log2(1 + theta^2 / gamma2), accurate for tiny ratios
    return 0.5 * np.log1p(np.square(theta) / gamma2) / math.log(2)


def reference_information(theta_r: np.ndarray, hvs: HvsParams = HvsParams()) -> float:
    return float(_info_terms(np.asarray(theta_r, dtype=np.float64), hvs.gamma2).sum())


def distorted_information(theta_r: np.ndarray, beta: np.ndarray, selection,
                          hvs: HvsParams = HvsParams()) -> float:
    theta_r = np.asarray(theta_r, dtype=np.float64)
    beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), theta_r.shape)
    mask = element_mask(selection, theta_r.shape)
    return float(_info_terms(beta[mask] * theta_r[mask], hvs.gamma2).sum())


def gvif(theta_r: np.ndarray, beta: np.ndarray, selection, hvs: HvsParams = HvsParams(),
         beta_clamped: bool = False) -> GvifReport:
    """Ratio of information kept on the selection to the full reference information."""
    theta_r = np.asarray(theta_r, dtype=np.float64)
    beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), theta_r.shape)
    if theta_r.ndim != 3:
        raise ValueError(f"scale field must be 3-D, got {theta_r.shape}")
    if np.any(beta < 0) or not np.all(np.isfinite(beta)):
        raise ValueError("scaling field must be finite and non-negative")
    mask = element_mask(selection, theta_r.shape)
    ref = _info_terms(theta_r, hvs.gamma2)
    kept = np.where(mask, _info_terms(beta * theta_r, hvs.gamma2), 0.0)
    denominator = float(ref.sum())
    if not denominator > 0:
        raise DegenerateInputError("reference information is zero; GVIF is undefined")
    numerator = float(kept.sum())
    return GvifReport(numerator, denominator, numerator / denominator,
                      kept.sum(axis=(0, 1)), ref.sum(axis=(0, 1)), beta_clamped,
                      int(mask.sum()))


def image_importance(features: np.ndarray, class_model: Optional[ClassModel] = None) -> np.ndarray:
    """Importance on the feature grid: CAM when a class model is given, else saliency."""
    if class_model is None:
        return saliency_surrogate(features)
    return select_importance(class_model, features.shape[:2])[0]


def gvif_for_image(image: np.ndarray, profile: Union[CoderProfile, float], alpha: float,
                   cfg: ExtractorConfig = ExtractorConfig(), hvs: HvsParams = HvsParams(),
                   class_model: Optional[ClassModel] = None) -> GvifReport:
    """GVIF of one image coded with ``profile`` and filtered at ``alpha``.

    The reference scale field comes from the reference (r = 1) coder, the
    coded one from the profile's shrinkage, and beta is their ratio.
    """
    features = extract_features(image, cfg)
    theta_r = estimate_scale_field(features, cfg.scale_window)
    theta_c = apply_coder_profile(theta_r, profile)
    beta, clamped = compute_scaling_field(theta_c, theta_r)
    importance = image_importance(features, class_model)
    selection = build_filter_set(importance, alpha, features.shape[2])
    return gvif(theta_r, beta, selection, hvs, clamped)


def upsample_mask(selection: Union[FilterSet, np.ndarray], block_size: int,
                  size: Optional[tuple] = None) -> np.ndarray:
    """Nearest-neighbour expansion of the feature-grid mask to pixels."""
    mask = selection.mask if isinstance(selection, FilterSet) else np.asarray(selection, bool)
    pixels = np.repeat(np.repeat(mask, block_size, axis=0), block_size, axis=1)
    if size is not None:
        pixels = pixels[:size[0], :size[1]]
    return pixels


def mask_psnr(x: np.ndarray, x_hat: np.ndarray, mask: np.ndarray, cap: float = PSNR_CAP_DB) -> float:
    """PSNR over the pixels where ``mask`` is set (all color channels)."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if x.shape != x_hat.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {x_hat.shape}")
    if mask.shape != x.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {x.shape[:2]}")
    if not mask.any():
        raise ValueError("mask PSNR needs a non-empty mask")
    mse = float(np.mean(np.square(x[mask] - x_hat[mask])))
    if mse == 0:
        return cap
    return min(cap, 10.0 * math.log10(255.0 ** 2 / mse))


def format_key_values(values: Dict[str, object]) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def csv_row(image_id: str, profile_id: int, alpha: float, report: GvifReport,
            mask_psnr_db: Optional[float], rate_bits: Optional[float]) -> str:
    def fmt(v):
        return "" if v is None else repr(float(v))
    return ",".join([image_id, str(profile_id), repr(float(alpha)), repr(report.value),
                     repr(report.numerator_bits), repr(report.denominator_bits),
                     fmt(mask_psnr_db), fmt(rate_bits)])
