"""Penalized zero-order search for the filtering threshold and profile choice.

For one coder profile the threshold minimizes

    L(alpha) = -G(alpha) + p * max(0, K(alpha))**2,

with G the mean GVIF over a batch and K the mean bit count minus the
channel's bit budget C * T_max. Gradients come from a two-point estimator
with one random scalar perturbation per iteration; iterates are projected
onto [0, alpha_th]. Profiles whose nominal PSNR meets the distortion bound
are each optimized and the one with the largest expected GVIF wins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .channel import ChannelState, InfeasibleChannelError, capacity
from .gsm import CoderProfile


class NoFeasibleProfileError(RuntimeError):
    """No profile satisfies the distortion bound or the latency budget."""

    def __init__(self, message: str, outcomes: Sequence["ProfileOutcome"] = ()):
        super().__init__(message)
        self.outcomes = list(outcomes)


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings of the threshold search.

    ``penalty`` multiplies the squared budget excess; with
    ``normalize_penalty`` the excess is measured in units of the bit budget
    C * T_max, so the same value works across channels.
    """

    penalty: float = 100.0
    normalize_penalty: bool = True
    smoothing: float = 0.01
    step: float = 0.3
    step_decay: float = 0.0
    alpha_th: float = 0.8
    alpha0: float = 0.5
    t_max: float = 0.02
    d0: Optional[float] = None
    batch_size: int = 8
    tol: float = 1e-3
    patience: int = 5
    max_iters: int = 200
    feasibility_tol: float = 0.01
    backtracking: int = 20
    estimator: str = "zo"
    seed: int = 0

    def __post_init__(self):
        for name in ("smoothing", "step", "tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.penalty < 0 or self.step_decay < 0 or self.feasibility_tol < 0:
            raise ValueError("penalty, step_decay and feasibility_tol must be non-negative")
        if not 0 <= self.alpha_th <= 1:
            raise ValueError("alpha_th must lie in [0, 1]")
        if not 0 <= self.alpha0 <= self.alpha_th:
            raise ValueError("alpha0 must lie in [0, alpha_th]")
        if self.t_max < 0:
            raise ValueError("t_max must be non-negative")
        if self.backtracking < 0:
            raise ValueError("backtracking must be non-negative")
        if self.batch_size < 1 or self.patience < 1 or self.max_iters < 1:
            raise ValueError("batch_size, patience and max_iters must be >= 1")
        if self.estimator not in ("zo", "exact"):
            raise ValueError("estimator must be 'zo' or 'exact'")


SampleFn = Callable[[CoderProfile, float, np.ndarray], np.ndarray]


class EvalOracle:
    """Per-sample GVIF and bit counts of a dataset as functions of (profile, alpha).

    ``gvif`` and ``bits`` take (profile, alpha, indices) and return one value
    per index. The optional ``*_grad`` callables give d/dalpha and are only
    used by the exact-gradient estimator.
    """

    def __init__(self, gvif: SampleFn, bits: SampleFn, size: int,
                 gvif_grad: Optional[SampleFn] = None, bits_grad: Optional[SampleFn] = None):
        if size < 1:
            raise ValueError("dataset is empty")
        self._gvif, self._bits = gvif, bits
        self._gvif_grad, self._bits_grad = gvif_grad, bits_grad
        self.size = size

    @classmethod
    def analytic(cls, gvif: Callable[[CoderProfile, float], float],
                 bits: Callable[[CoderProfile, float], float], size: int = 1,
                 gvif_grad=None, bits_grad=None) -> "EvalOracle":
        """Oracle whose samples all follow the same closed-form curves."""
        def lift(fn):
            if fn is None:
                return None
            return lambda profile, alpha, idx: np.full(len(idx), float(fn(profile, alpha)))
        return cls(lift(gvif), lift(bits), size, lift(gvif_grad), lift(bits_grad))

    def _indices(self, indices) -> np.ndarray:
        return np.arange(self.size) if indices is None else np.asarray(indices)

    def mean_gvif(self, profile, alpha: float, indices=None) -> float:
        return float(np.mean(self._gvif(profile, alpha, self._indices(indices))))

    def mean_bits(self, profile, alpha: float, indices=None) -> float:
        return float(np.mean(self._bits(profile, alpha, self._indices(indices))))

    def gradients(self, profile, alpha: float, indices=None) -> Tuple[float, float]:
        if self._gvif_grad is None or self._bits_grad is None:
            raise ValueError("oracle has no analytic derivatives")
        idx = self._indices(indices)
        return (float(np.mean(self._gvif_grad(profile, alpha, idx))),
                float(np.mean(self._bits_grad(profile, alpha, idx))))


def effective_penalty(cap: float, cfg: OptimizerConfig) -> float:
    """Penalty per squared excess bit."""
    if not cfg.normalize_penalty:
        return cfg.penalty
    budget = cap * cfg.t_max
    if budget <= 0:
        raise InfeasibleChannelError("zero bit budget; the penalty cannot be normalized")
    return cfg.penalty / budget ** 2


def penalty_objective(alpha: float, mean_gvif: float, mean_bits: float, cap: float,
                      cfg: OptimizerConfig) -> float:
    if not cap > 0:
        raise InfeasibleChannelError("channel capacity is zero")
    excess = mean_bits - cap * cfg.t_max
    return -mean_gvif + effective_penalty(cap, cfg) * max(0.0, excess) ** 2


def zo_estimates(f: Callable[[np.ndarray], np.ndarray], alpha: float, smoothing: float,
                 m: np.ndarray) -> np.ndarray:
    """Two-point estimates (f(alpha + nu m) - f(alpha)) m / nu, one per perturbation."""
    m = np.asarray(m, dtype=np.float64)
    return (f(alpha + smoothing * m) - f(alpha)) * m / smoothing


@dataclass(frozen=True)
class GradientEstimate:
    grad_objective: float
    grad_gvif: float
    grad_bits: float
    gvif: float
    bits: float
    excess: float
    objective: float


def estimate_gradient(alpha: float, batch: np.ndarray, profile, oracle: EvalOracle,
                      cfg: OptimizerConfig, cap: float,
                      rng: np.random.Generator) -> GradientEstimate:
    """Batch estimate of dL/dalpha with one shared uniform perturbation."""
    gvif = oracle.mean_gvif(profile, alpha, batch)
    bits = oracle.mean_bits(profile, alpha, batch)
    if cfg.estimator == "exact":
        grad_g, grad_b = oracle.gradients(profile, alpha, batch)
    else:
        m = rng.uniform(-1.0, 1.0)
        shifted = alpha + cfg.smoothing * m
        grad_g = (oracle.mean_gvif(profile, shifted, batch) - gvif) * m / cfg.smoothing
        grad_b = (oracle.mean_bits(profile, shifted, batch) - bits) * m / cfg.smoothing
    excess = bits - cap * cfg.t_max
    p = effective_penalty(cap, cfg)
    grad = -grad_g + 2.0 * p * max(0.0, excess) * grad_b
    objective = -gvif + p * max(0.0, excess) ** 2
    return GradientEstimate(grad, grad_g, grad_b, gvif, bits, excess, objective)


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    alpha: float
    gvif: float
    excess_bits: float
    objective: float


@dataclass
class ThresholdResult:
    alpha: float
    trace: List[TraceEntry]
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.trace)


def _channel_capacity(ch) -> float:
    cap = capacity(ch) if isinstance(ch, ChannelState) else float(ch)
    if not cap > 0:
        raise InfeasibleChannelError("channel capacity is zero; no rate can meet the budget")
    return cap


def _project(alpha: float, cfg: OptimizerConfig) -> float:
    return min(max(alpha, 0.0), cfg.alpha_th)


def _batch_objective(alpha, batch, profile, oracle, cfg, cap) -> float:
    return penalty_objective(alpha, oracle.mean_gvif(profile, alpha, batch),
                             oracle.mean_bits(profile, alpha, batch), cap, cfg)


def optimize_threshold(profile, oracle: EvalOracle, ch, cfg: OptimizerConfig = OptimizerConfig()
                       ) -> ThresholdResult:
    """Projected penalized gradient descent on alpha.

    ``ch`` is a ChannelState or a capacity in bits/s. With
    ``cfg.backtracking > 0`` a step that raises the batch objective is halved
    up to that many times (and dropped if it never improves), which keeps
    stiff penalty regions from making the iterates oscillate. Stops once
    ``patience`` consecutive updates move alpha by less than ``tol``; a
    single small move is not enough because a near-zero perturbation
    produces one by chance.
    """
    cap = _channel_capacity(ch)
    pid = getattr(profile, "id", 0)
    rng = np.random.default_rng([cfg.seed, pid])
    alpha = cfg.alpha0
    trace: List[TraceEntry] = []
    quiet = 0
    for t in range(cfg.max_iters):
        if oracle.size <= cfg.batch_size:
            batch = np.arange(oracle.size)
        else:
            batch = np.sort(rng.choice(oracle.size, cfg.batch_size, replace=False))
        est = estimate_gradient(alpha, batch, profile, oracle, cfg, cap, rng)
        trace.append(TraceEntry(t, alpha, est.gvif, est.excess, est.objective))
        step = cfg.step / (1.0 + t) ** cfg.step_decay
        new_alpha = _project(alpha - step * est.grad_objective, cfg)
        # halve the step until the batch objective does not increase
        for _ in range(cfg.backtracking):
            if new_alpha == alpha or _batch_objective(new_alpha, batch, profile, oracle, cfg,
                                                      cap) <= est.objective:
                break
            step /= 2
            new_alpha = _project(alpha - step * est.grad_objective, cfg)
        else:
            if cfg.backtracking:
                new_alpha = alpha
        quiet = quiet + 1 if abs(new_alpha - alpha) < cfg.tol else 0
        alpha = new_alpha
        if quiet >= cfg.patience:
            return ThresholdResult(alpha, trace, True)
    return ThresholdResult(alpha, trace, False)


@dataclass(frozen=True)
class ProfileOutcome:
    profile_id: int
    alpha_star: float
    expected_gvif: float
    expected_bits: float
    iterations: int
    feasible: bool
    converged: bool = True
    reason: str = ""


@dataclass
class Selection:
    profile: CoderProfile
    alpha: float
    outcomes: List[ProfileOutcome] = field(default_factory=list)

    @property
    def outcome(self) -> ProfileOutcome:
        return next(o for o in self.outcomes if o.profile_id == self.profile.id)


REPORT_COLUMNS = ("profile_id", "alpha_star", "expected_gvif", "expected_bits", "iterations",
                  "feasible")


def report_csv(outcomes: Sequence[ProfileOutcome]) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for o in outcomes:
        lines.append(f"{o.profile_id},{o.alpha_star!r},{o.expected_gvif!r},{o.expected_bits!r},"
                     f"{o.iterations},{int(o.feasible)}")
    return "\n".join(lines) + "\n"


def select_profile(profiles: Sequence[CoderProfile], oracle: EvalOracle, ch,
                   cfg: OptimizerConfig = OptimizerConfig()) -> Selection:
    """Optimize alpha per admissible profile and keep the best expected GVIF.

    Admissible profiles have nominal PSNR >= ``cfg.d0``; a profile's result
    only counts if its expected bit count at alpha* fits the budget (within
    ``feasibility_tol``, since the penalty leaves a small excess). Ties in
    expected GVIF go to the lower-rate profile.
    """
    cap = _channel_capacity(ch)
    budget = cap * cfg.t_max
    outcomes: List[ProfileOutcome] = []
    candidates = []
    for profile in profiles:
        if cfg.d0 is not None and profile.nominal_psnr < cfg.d0:
            outcomes.append(ProfileOutcome(profile.id, math.nan, math.nan, math.nan, 0, False,
                                           False, "distortion"))
            continue
        result = optimize_threshold(profile, oracle, cap, cfg)
        gvif = oracle.mean_gvif(profile, result.alpha)
        bits = oracle.mean_bits(profile, result.alpha)
        fits = bits <= budget * (1.0 + cfg.feasibility_tol)
        outcome = ProfileOutcome(profile.id, result.alpha, gvif, bits, result.iterations, fits,
                                 result.converged, "" if fits else "latency")
        outcomes.append(outcome)
        if fits:
            candidates.append((profile, outcome))
    if all(o.reason == "distortion" for o in outcomes):
        raise NoFeasibleProfileError(f"no profile meets the distortion bound D0 = {cfg.d0} dB",
                                     outcomes)
    if not candidates:
        raise NoFeasibleProfileError(
            f"no profile meets the latency budget of {budget:.6g} bits "
            f"(T_max = {cfg.t_max} s) under D0 = {cfg.d0} dB", outcomes)
    best_profile, best = candidates[0]
    for profile, outcome in candidates[1:]:
        better = outcome.expected_gvif > best.expected_gvif + 1e-12
        tie = abs(outcome.expected_gvif - best.expected_gvif) <= 1e-12
        cheaper = (outcome.expected_bits, profile.shrink_ratio) < (best.expected_bits,
                                                                   best_profile.shrink_ratio)
        if better or (tie and cheaper):
            best_profile, best = profile, outcome
    return Selection(best_profile, best.alpha_star, outcomes)


def grid_search(profiles: Sequence[CoderProfile], oracle: EvalOracle, ch,
                cfg: OptimizerConfig = OptimizerConfig(), points: int = 101
                ) -> Tuple[CoderProfile, float, float]:
    """Exhaustive (profile, alpha) search under the hard budget constraint.

    Returns (profile, alpha, expected GVIF); alpha ranges over an even grid
    on [0, alpha_th].
    """
    cap = _channel_capacity(ch)
    budget = cap * cfg.t_max
    best = None
    for profile in profiles:
        if cfg.d0 is not None and profile.nominal_psnr < cfg.d0:
            continue
        for alpha in np.linspace(0.0, cfg.alpha_th, points):
            if oracle.mean_bits(profile, alpha) > budget:
                continue
            v = oracle.mean_gvif(profile, alpha)
            if best is None or v > best[2] + 1e-12:
                best = (profile, float(alpha), v)
    if best is None:
        raise NoFeasibleProfileError("grid search found no feasible (profile, alpha)")
    return best
