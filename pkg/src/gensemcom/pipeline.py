"""End-to-end coding, the generation surrogate, dataset evaluation and sweeps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .channel import ChannelState, capacity
from .codec import (CHECK_BITS, SIDE_HEADER_BITS, Payload, PayloadHeader, decode_features,
                    decode_latent, encode_features, encode_latent, ideal_codelength, ideal_latent_bits,
                    pack_payload, quantize, unpack_payload)
from .gsm import (CoderProfile, ExtractorConfig, apply_coder_profile,
                  compute_scaling_field, estimate_scale_field, extract_features, hyper_latent,
                  reconstruct_image, scale_from_latent)
from .metric import (HvsParams, _info_terms, gvif, image_importance, mask_psnr, upsample_mask)
from .optimizer import (EvalOracle, NoFeasibleProfileError, OptimizerConfig, select_profile)
from .semantic import (ClassModel, FilterSet, apply_filter, build_filter_set, decode_mask,
                       element_mask, encode_mask)
from .tensorio import load_ppm


@dataclass
class Sample:
    image_id: str
    image: np.ndarray
    class_model: Optional[ClassModel] = None


def load_dataset(directory: Union[str, Path]) -> List[Sample]:
    """Read ``*.ppm``/``*.pgm`` images with optional ``<stem>.cam.gvtf`` + ``<stem>.weights.txt``."""
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
    if not paths:
        raise FileNotFoundError(f"no .ppm/.pgm images in {directory}")
    samples = []
    for path in paths:
        maps = directory / f"{path.stem}.cam.gvtf"
        weights = directory / f"{path.stem}.weights.txt"
        model = ClassModel.load(maps, weights) if maps.exists() and weights.exists() else None
        samples.append(Sample(path.stem, load_ppm(path), model))
    return samples


def samples_from_scenes(scenes) -> List[Sample]:
    return [Sample(s.image_id, s.image, s.class_model) for s in scenes]


# -- single-image coding -----------------------------------------------------

def encode_image(image: np.ndarray, profile: CoderProfile, alpha: float,
                 cfg: ExtractorConfig = ExtractorConfig(), prompt: str = "",
                 class_model: Optional[ClassModel] = None, include_mask: bool = False) -> Payload:
    """Extract, filter, quantize and entropy-code one image.

    The coded features are r * y quantized with unit step; their scales are
    r times the transmitted (grid-quantized) reference scales.
    """
    image = np.asarray(image, dtype=np.float64)
    features = extract_features(image, cfg)
    theta_r = estimate_scale_field(features, cfg.scale_window)
    selection = build_filter_set(image_importance(features, class_model), alpha, features.shape[2])
    latent = hyper_latent(theta_r, cfg.scale_window)
    theta_c = apply_coder_profile(scale_from_latent(latent, features.shape, cfg.scale_window),
                                  profile)
    q = quantize(profile.shrink_ratio * apply_filter(features, selection))
    header = PayloadHeader(image.shape[:2], features.shape, cfg.block_size, cfg.scale_window,
                           cfg.basis, profile.id, profile.shrink_ratio, cfg.gain, float(alpha),
                           mask_counted=include_mask, prompt=prompt)
    return pack_payload(header, encode_latent(latent), encode_mask(selection),
                        encode_features(q, theta_c, selection))


def surrogate_generate(decoded: np.ndarray, selection, theta: np.ndarray, seed: int) -> np.ndarray:
    """Keep decoded values on the selection, draw fresh theta * u elsewhere.

    ``theta`` must be in the same units as ``decoded``. Generated elements
    share no randomness with the source, so they are independent of it.
    """
    decoded = np.asarray(decoded, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if decoded.shape != theta.shape:
        raise ValueError(f"shape mismatch {decoded.shape} vs {theta.shape}")
    mask = element_mask(selection, decoded.shape)
    fresh = theta * np.random.default_rng(seed).standard_normal(decoded.shape)
    return np.where(mask, decoded, fresh)


@dataclass
class DecodeResult:
    x_hat: np.ndarray
    x_tilde: np.ndarray
    filter_set: FilterSet
    quantized: np.ndarray
    theta: np.ndarray
    header: PayloadHeader


def decode_payload(payload: Union[bytes, Payload], seed: int = 0) -> DecodeResult:
    """Decode side info, mask and features, then complete the image.

    ``x_hat`` reconstructs the anchored features with zeros elsewhere;
    ``x_tilde`` fills the unselected elements with surrogate samples.
    """
    if not isinstance(payload, Payload):
        payload = unpack_payload(payload)
    h = payload.header
    cfg = ExtractorConfig(h.block_size, h.scale_window, h.basis, h.gain)
    shape = tuple(h.feature_shape)
    latent = decode_latent(payload.side_info)
    theta_c = apply_coder_profile(scale_from_latent(latent, shape, h.scale_window, h.grid_step),
                                  h.shrink_ratio)
    selection = decode_mask(payload.mask, shape[2])
    if selection.shape != shape:
        raise ValueError(f"mask shape {selection.shape} does not match features {shape}")
    q = decode_features(payload.features, theta_c, selection)
    x_hat = reconstruct_image(q / h.shrink_ratio, cfg, size=h.image_size)
    completed = surrogate_generate(q, selection, theta_c, seed)
    x_tilde = reconstruct_image(completed / h.shrink_ratio, cfg, size=h.image_size)
    return DecodeResult(x_hat, x_tilde, selection, q, theta_c, h)


# -- dataset evaluation ------------------------------------------------------

@dataclass
class ImageAnalysis:
    """Profile-independent quantities of one image."""

    image_id: str
    image: np.ndarray
    features: np.ndarray
    theta_r: np.ndarray
    theta_hat: np.ndarray
    latent: np.ndarray
    importance: np.ndarray
    side_bits: float
    reference_bits: float
    order: np.ndarray = field(repr=False)
    sorted_importance: np.ndarray = field(repr=False)

    def count_selected(self, alpha: float) -> int:
        """Number of spatial positions with importance >= alpha."""
        return len(self.sorted_importance) - int(np.searchsorted(self.sorted_importance, alpha,
                                                                 side="left"))


def analyze_image(sample: Sample, cfg: ExtractorConfig, hvs: HvsParams) -> ImageAnalysis:
    features = extract_features(sample.image, cfg)
    theta_r = estimate_scale_field(features, cfg.scale_window)
    latent = hyper_latent(theta_r, cfg.scale_window)
    theta_hat = scale_from_latent(latent, features.shape, cfg.scale_window)
    importance = image_importance(features, sample.class_model)
    flat = importance.ravel()
    order = np.argsort(-flat, kind="stable")
    side_bits = ideal_latent_bits(latent) + SIDE_HEADER_BITS + CHECK_BITS
    reference_bits = float(_info_terms(theta_r, hvs.gamma2).sum())
    return ImageAnalysis(sample.image_id, sample.image, features, theta_r, theta_hat, latent,
                         importance, side_bits, reference_bits, order, np.sort(flat))


class DatasetOracle:
    """Fast per-image GVIF and rate as functions of (profile, alpha).

    For each (image, profile) the per-position GVIF numerators and ideal
    feature bits are summed over channels, sorted by decreasing importance
    and accumulated, so evaluating a threshold is a binary search. Bits are
    ideal code lengths of side info plus selected features; the mask is
    added only with ``include_mask``.
    """

    def __init__(self, samples: Sequence[Sample], cfg: ExtractorConfig = ExtractorConfig(),
                 hvs: HvsParams = HvsParams(), include_mask: bool = False):
        if not samples:
            raise ValueError("dataset is empty")
        self.samples = list(samples)
        self.cfg, self.hvs, self.include_mask = cfg, hvs, include_mask
        self.analyses = [analyze_image(s, cfg, hvs) for s in self.samples]
        self._cache: Dict[Tuple[float, int], Tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.analyses)

    def _profile_terms(self, a: ImageAnalysis, ratio: float):
        theta_c = apply_coder_profile(a.theta_r, ratio)
        beta, _ = compute_scaling_field(theta_c, a.theta_r)
        info = _info_terms(beta * a.theta_r, self.hvs.gamma2).sum(axis=2)
        coded_scale = apply_coder_profile(a.theta_hat, ratio)
        bits = ideal_codelength(quantize(ratio * a.features), coded_scale).sum(axis=2)
        return info, bits

    def _cumulative(self, index: int, ratio: float):
        key = (ratio, index)
        if key not in self._cache:
            a = self.analyses[index]
            info, bits = self._profile_terms(a, ratio)
            cum_info = np.concatenate([[0.0], np.cumsum(info.ravel()[a.order])])
            cum_bits = np.concatenate([[0.0], np.cumsum(bits.ravel()[a.order])])
            self._cache[key] = (cum_info, cum_bits)
        return self._cache[key]

    @staticmethod
    def _ratio(profile) -> float:
        return profile.shrink_ratio if isinstance(profile, CoderProfile) else float(profile)

    def gvif(self, profile, alpha: float, indices=None) -> np.ndarray:
        ratio = self._ratio(profile)
        idx = range(len(self)) if indices is None else indices
        out = []
        for i in idx:
            a = self.analyses[i]
            cum_info, _ = self._cumulative(i, ratio)
            out.append(cum_info[a.count_selected(alpha)] / a.reference_bits)
        return np.array(out)

    def bits(self, profile, alpha: float, indices=None) -> np.ndarray:
        ratio = self._ratio(profile)
        idx = range(len(self)) if indices is None else indices
        out = []
        for i in idx:
            a = self.analyses[i]
            _, cum_bits = self._cumulative(i, ratio)
            total = a.side_bits + cum_bits[a.count_selected(alpha)]
            if self.include_mask:
                total += encode_mask(self.filter_set(i, alpha)).bit_count
            out.append(total)
        return np.array(out)

    def eval_oracle(self) -> EvalOracle:
        return EvalOracle(self.gvif, self.bits, len(self))

    def filter_set(self, index: int, alpha: float) -> FilterSet:
        a = self.analyses[index]
        return build_filter_set(a.importance, max(alpha, 0.0), a.features.shape[2])

    # brute-force counterparts, used to cross-check the cumulative tables
    def direct_gvif(self, profile, alpha: float, index: int) -> float:
        a = self.analyses[index]
        beta, clamped = compute_scaling_field(apply_coder_profile(a.theta_r, self._ratio(profile)),
                                              a.theta_r)
        return gvif(a.theta_r, beta, self.filter_set(index, alpha), self.hvs, clamped).value

    def direct_bits(self, profile, alpha: float, index: int) -> float:
        a = self.analyses[index]
        ratio = self._ratio(profile)
        mask = self.filter_set(index, alpha).element_mask()
        q = quantize(ratio * a.features)
        feat = ideal_codelength(q[mask], apply_coder_profile(a.theta_hat, ratio)[mask]).sum()
        return float(a.side_bits + feat)

    def mask_psnr(self, profile, alpha: float, index: int) -> Optional[float]:
        """PSNR of the anchored reconstruction over the selected pixels."""
        a = self.analyses[index]
        selection = self.filter_set(index, alpha)
        if not selection.mask.any():
            return None
        ratio = self._ratio(profile)
        q = quantize(ratio * apply_filter(a.features, selection))
        x_hat = reconstruct_image(q / ratio, self.cfg, size=a.image.shape[:2])
        pixels = upsample_mask(selection, self.cfg.block_size, a.image.shape[:2])
        return mask_psnr(a.image, x_hat, pixels)

    def mean_mask_psnr(self, profile, alpha: float) -> float:
        values = [v for v in (self.mask_psnr(profile, alpha, i) for i in range(len(self)))
                  if v is not None]
        return float(np.mean(values)) if values else math.nan


# -- sweeps ------------------------------------------------------------------

SWEEP_COLUMNS = ("snr_db", "profile_id", "alpha", "mean_gvif", "mean_bits", "latency_s",
                 "mean_mask_psnr_db", "scheme", "feasible")


@dataclass(frozen=True)
class SweepRow:
    snr_db: float
    profile_id: Optional[int]
    alpha: float
    mean_gvif: float
    mean_bits: float
    latency_s: float
    mean_mask_psnr_db: float
    scheme: str = "adaptive"
    feasible: bool = True

    def csv(self) -> str:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, bool):
                return str(int(v))
            if isinstance(v, float):
                return "" if math.isnan(v) else f"{v:.10g}"
            return str(v)
        return ",".join(fmt(getattr(self, c)) for c in SWEEP_COLUMNS)


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    return "\n".join([",".join(SWEEP_COLUMNS)] + [r.csv() for r in rows]) + "\n"


def _cell_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _infeasible_row(snr_db: float, scheme: str) -> SweepRow:
    return SweepRow(snr_db, None, math.nan, 0.0, math.nan, math.nan, math.nan, scheme, False)


def _evaluated_row(oracle: DatasetOracle, snr_db, profile, alpha, ch, scheme) -> SweepRow:
    bits = float(np.mean(oracle.bits(profile, alpha)))
    return SweepRow(snr_db, profile.id, float(alpha), float(np.mean(oracle.gvif(profile, alpha))),
                    bits, bits / capacity(ch), oracle.mean_mask_psnr(profile, alpha), scheme, True)


def baseline_choice(oracle: DatasetOracle, profiles: Sequence[CoderProfile], ch: ChannelState,
                    cfg: OptimizerConfig) -> Optional[CoderProfile]:
    """Best admissible profile that fits the budget with no filtering (alpha = 0)."""
    budget = capacity(ch) * cfg.t_max
    best = None
    for p in profiles:
        if cfg.d0 is not None and p.nominal_psnr < cfg.d0:
            continue
        if np.mean(oracle.bits(p, 0.0)) > budget:
            continue
        v = float(np.mean(oracle.gvif(p, 0.0)))
        if best is None or v > best[1]:
            best = (p, v)
    return None if best is None else best[0]


def run_snr_sweep(oracle: DatasetOracle, snr_grid_db: Sequence[float],
                  profiles: Sequence[CoderProfile], cfg: OptimizerConfig = OptimizerConfig(),
                  bandwidth_hz: float = 1e6, baseline: bool = True) -> List[SweepRow]:
    """Optimize (profile, alpha) at every SNR; optionally add the alpha = 0 scheme.

    Cells where no profile fits are reported with ``feasible = 0`` and GVIF 0.
    """
    rows = []
    for k, snr_db in enumerate(snr_grid_db):
        ch = ChannelState.from_db(snr_db, bandwidth_hz)
        cell_cfg = replace(cfg, seed=_cell_seed(cfg.seed, k))
        try:
            sel = select_profile(profiles, oracle.eval_oracle(), ch, cell_cfg)
            rows.append(_evaluated_row(oracle, snr_db, sel.profile, sel.alpha, ch, "adaptive"))
        except NoFeasibleProfileError:
            rows.append(_infeasible_row(snr_db, "adaptive"))
        if baseline:
            choice = baseline_choice(oracle, profiles, ch, cfg)
            if choice is None:
                rows.append(_infeasible_row(snr_db, "baseline"))
            else:
                rows.append(_evaluated_row(oracle, snr_db, choice, 0.0, ch, "baseline"))
    return rows


def gvif_grid(oracle: DatasetOracle, profiles: Sequence[CoderProfile],
              alphas: Sequence[float]) -> np.ndarray:
    """Mean GVIF for every (profile, alpha) pair, shape (len(profiles), len(alphas))."""
    return np.array([[float(np.mean(oracle.gvif(p, a))) for a in alphas] for p in profiles])


# -- generation independence -------------------------------------------------

@dataclass
class IndependenceReport:
    correlation_map: np.ndarray
    inside_r: Optional[float]
    inside_r_continuous: Optional[float]
    outside_r: Optional[float]
    outside_pooled_r: Optional[float]
    n_samples: int
    inside_pairs: int
    outside_pairs: int

    def to_dict(self) -> Dict[str, object]:
        d = {"n_samples": self.n_samples, "inside_pairs": self.inside_pairs,
             "outside_pairs": self.outside_pairs}
        if self.inside_pairs:
            d["inside_r"] = self.inside_r
            d["inside_r_continuous"] = self.inside_r_continuous
        if self.outside_pairs:
            d["outside_r"] = self.outside_r
            d["outside_pooled_r"] = self.outside_pooled_r
        return d


class _Moments:
    """Streaming paired sums for Pearson correlation."""

    def __init__(self, shape):
        self.n = 0
        self.sx, self.sy, self.sxx, self.syy, self.sxy = (np.zeros(shape) for _ in range(5))

    def add(self, x, y):
        self.n += 1
        self.sx += x
        self.sy += y
        self.sxx += x * x
        self.syy += y * y
        self.sxy += x * y

    @staticmethod
    def _r(n, sx, sy, sxx, syy, sxy):
        with np.errstate(invalid="ignore", divide="ignore"):
            cov = sxy - sx * sy / n
            vx = sxx - sx * sx / n
            vy = syy - sy * sy / n
            return cov / np.sqrt(vx * vy)

    def elementwise(self) -> np.ndarray:
        return self._r(self.n, self.sx, self.sy, self.sxx, self.syy, self.sxy)

    def pooled(self, mask, axes=None) -> np.ndarray:
        def total(a):
            return np.where(mask, a, 0.0).sum(axis=axes)
        n = self.n * np.asarray(mask).sum(axis=axes)
        return self._r(n, total(self.sx), total(self.sy), total(self.sxx), total(self.syy),
                       total(self.sxy))


def validate_generation_independence(theta: np.ndarray, selection, n_samples: int,
                                     seed: int = 0) -> IndependenceReport:
    """Correlate true and generated features over repeated source draws.

    Each draw samples source features from ``theta``, quantizes them, and
    runs the generation surrogate with an unrelated seed. Inside the
    selection the pair is (decoded, generated); the continuous source is
    reported separately. Outside it is (source, generated).
    """
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    theta = np.asarray(theta, dtype=np.float64)
    mask = element_mask(selection, theta.shape)
    anchored = _Moments(theta.shape)
    continuous = _Moments(theta.shape)
    seeds = np.random.SeedSequence(seed).generate_state(2 * n_samples)
    for k in range(n_samples):
        source = theta * np.random.default_rng(seeds[2 * k]).standard_normal(theta.shape)
        decoded = quantize(source).astype(np.float64)
        generated = surrogate_generate(decoded, mask, theta, int(seeds[2 * k + 1]))
        anchored.add(np.where(mask, decoded, source), generated)
        continuous.add(source, generated)
    # per-position map pooled over channels and draws
    corr_map = np.where(mask[:, :, 0], anchored.pooled(mask, axes=2),
                        anchored.pooled(~mask, axes=2))
    inside_pairs = int(mask.sum()) * n_samples
    outside_pairs = int((~mask).sum()) * n_samples
    inside_r = inside_cont = outside_r = outside_pooled = None
    if inside_pairs:
        inside_r = float(anchored.pooled(mask))
        inside_cont = float(continuous.pooled(mask))
    if outside_pairs:
        outside_r = float(np.nanmean(anchored.elementwise()[~mask]))
        outside_pooled = float(anchored.pooled(~mask))
    return IndependenceReport(corr_map, inside_r, inside_cont, outside_r, outside_pooled,
                              n_samples, inside_pairs, outside_pairs)
