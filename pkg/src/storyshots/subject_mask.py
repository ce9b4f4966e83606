"""Per-frame subject localization.

The clean latent is estimated from the noisy one and the predicted noise,
scored per patch by a pluggable segmenter, then thresholded with Otsu's
method over a 256-bin histogram. The default segmenter is a deterministic
stub that scores patches by the normalized energy of a designated latent
channel; a real zero-shot segmenter would plug in at the same seam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, DimensionError, ScheduleRangeError

OTSU_BINS = 256


@dataclass
class NoiseSchedule:
    """Cumulative schedule parameter per timestep: alphas[t] for t in [0, T]."""

    alphas: np.ndarray
    total_steps: int

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if self.alphas.shape != (self.total_steps + 1,):
            raise ConfigError(
                f"schedule needs {self.total_steps + 1} entries, got {self.alphas.shape}"
            )
        if abs(self.alphas[0] - 1.0) > 1e-6:
            raise ConfigError("schedule must start at 1.0")
        if (self.alphas <= 0).any():
            raise ConfigError("schedule must be strictly positive")
        if (np.diff(self.alphas) > 1e-12).any():
            raise ConfigError("schedule must be nonincreasing")

    @classmethod
    def geometric(cls, total_steps: int, alpha_min: float = 0.02) -> "NoiseSchedule":
        t = np.arange(total_steps + 1, dtype=np.float64) / total_steps
        return cls(alpha_min**t, total_steps)

    def alpha(self, t: int) -> float:
        if not 0 <= t <= self.total_steps:
            raise ScheduleRangeError(
                f"timestep {t} outside schedule [0, {self.total_steps}]"
            )
        return float(self.alphas[t])


@dataclass
class SubjectMaskSet:
    """Boolean subject masks per (shot, frame, patch), with the saliency and
    thresholds that produced them kept for audit."""

    masks: np.ndarray  # bool (S, F, P)
    thresholds: np.ndarray  # float (S, F)
    saliency: np.ndarray  # float (S, F, P)
    fallback: np.ndarray = field(default=None)  # bool (S, F)

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.fallback is None:
            self.fallback = np.zeros(self.masks.shape[:2], dtype=bool)

    @classmethod
    def from_saliency(cls, saliency: np.ndarray) -> "SubjectMaskSet":
        saliency = np.asarray(saliency)
        if saliency.ndim != 3:
            raise DimensionError(f"expected (S,F,P) saliency, got {saliency.shape}")
        shots, frames, _ = saliency.shape
        thresholds = np.zeros((shots, frames))
        fallback = np.zeros((shots, frames), dtype=bool)
        masks = np.zeros(saliency.shape, dtype=bool)
        for s in range(shots):
            for f in range(frames):
                thr, fb = otsu_threshold(saliency[s, f])
                thresholds[s, f] = thr
                fallback[s, f] = fb
                masks[s, f] = saliency[s, f] > thr
        return cls(masks, thresholds, saliency, fallback)


def estimate_x0(x: np.ndarray, e_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Invert one forward-noising step: (x - sqrt(1 - a_t) * e_t) / sqrt(a_t)."""
    x = np.asarray(x)
    e_t = np.asarray(e_t)
    if x.shape != e_t.shape:
        raise DimensionError(f"x shape {x.shape} != noise shape {e_t.shape}")
    a = sched.alpha(t)
    x0 = (x.astype(np.float64) - math.sqrt(1.0 - a) * e_t.astype(np.float64)) / math.sqrt(a)
    return x0.astype(tc.F32)


# --- segmenter seam -------------------------------------------------------

SEGMENTERS: dict = {}


def register_segmenter(name: str):
    def deco(fn):
        SEGMENTERS[name] = fn
        return fn

    return deco


@register_segmenter("channel_energy")
def channel_energy_segmenter(x0_hat: np.ndarray, prompt_subject: str, channel: int = 0):
    """Stub segmenter: normalized squared magnitude of one latent channel."""
    energy = np.asarray(x0_hat, dtype=np.float64)[:, channel] ** 2
    peak = energy.max()
    if peak == 0.0:
        return np.zeros_like(energy, dtype=tc.F32)
    return (energy / peak).astype(tc.F32)


def saliency(x0_hat: np.ndarray, prompt_subject: str, extractor: str = "channel_energy", **kwargs) -> np.ndarray:
    """Per-patch subject score in [0, 1] via a name-registered segmenter."""
    try:
        fn = SEGMENTERS[extractor]
    except KeyError:
        raise ConfigError(f"unknown segmenter {extractor!r}; registered: {sorted(SEGMENTERS)}")
    return fn(np.asarray(x0_hat), prompt_subject, **kwargs)


# --- Otsu thresholding ----------------------------------------------------

def otsu_threshold(scores: np.ndarray):
    """Histogram-based Otsu threshold over [min, max] with 256 bins.

    Returns (threshold, fallback). Candidate thresholds are the interior bin
    edges; the one maximizing between-class variance wins, ties breaking
    toward the lower threshold. Constant scores trigger the degenerate
    fallback: threshold = max(scores), full-false mask, fallback flag set.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size < 2:
        raise DimensionError(f"otsu_threshold needs >= 2 scores, got {scores.size}")
    lo = scores.min()
    hi = scores.max()
    if hi == lo:
        return float(hi), True
    edges = np.linspace(lo, hi, OTSU_BINS + 1)
    candidates = edges[1:]  # 256 upper bin edges
    order = np.sort(scores)
    csum = np.cumsum(order)
    total = scores.size
    total_sum = csum[-1]
    best_var = -1.0
    best_thr = float(candidates[0])
    for c in candidates:
        n0 = int(np.searchsorted(order, c, side="right"))
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = csum[n0 - 1] / n0
        mu1 = (total_sum - csum[n0 - 1]) / n1
        var = n0 * n1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_var = var
            best_thr = float(c)
    return best_thr, False
