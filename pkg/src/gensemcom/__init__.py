"""Hybrid generative semantic communication simulator built around the GVIF metric."""

__version__ = "0.1.0"

from .channel import ChannelState, bit_budget, capacity, latency
from .codec import (conditional_pmf, decode_features, decode_side_info, encode_features,
                    encode_side_info, measure_rate, quantize)
from .gsm import (CoderProfile, ExtractorConfig, ProfileTable, apply_coder_profile,
                  compute_scaling_field, estimate_scale_field, extract_features,
                  reconstruct_image, sample_gsm_features)
from .metric import (GvifReport, HvsParams, distorted_information, gvif, gvif_for_image,
                     mask_psnr, reference_information)
from .optimizer import (EvalOracle, OptimizerConfig, estimate_gradient, optimize_threshold,
                        penalty_objective, select_profile)
from .pipeline import (decode_payload, encode_image, run_snr_sweep, surrogate_generate,
                       validate_generation_independence)
from .semantic import (ClassModel, FilterSet, build_filter_set, decode_mask, encode_mask)

__all__ = [
    "ChannelState", "bit_budget", "capacity", "latency",
    "conditional_pmf", "decode_features", "decode_side_info", "encode_features",
    "encode_side_info", "measure_rate", "quantize",
    "CoderProfile", "ExtractorConfig", "ProfileTable", "apply_coder_profile",
    "compute_scaling_field", "estimate_scale_field", "extract_features", "reconstruct_image",
    "sample_gsm_features",
    "GvifReport", "HvsParams", "distorted_information", "gvif", "gvif_for_image", "mask_psnr",
    "reference_information",
    "EvalOracle", "OptimizerConfig", "estimate_gradient", "optimize_threshold",
    "penalty_objective", "select_profile",
    "decode_payload", "encode_image", "run_snr_sweep", "surrogate_generate",
    "validate_generation_independence",
    "ClassModel", "FilterSet", "build_filter_set", "decode_mask", "encode_mask",
]
