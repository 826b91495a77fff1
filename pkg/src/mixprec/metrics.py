"""Comparison metrics used as sensitivity scores: SSIM and SQNR.

SSIM here uses a single window spanning the whole image and population
(1/N) statistics. The textbook formula has no stabilizing constants and
divides by zero on constant images, so stabilizers c1/c2 are added with
the usual (0.01*L)^2 / (0.03*L)^2 defaults; setting both to zero recovers
the unstabilized form.

SQNR is reported in decibels, 10*log10(signal energy / error energy),
capped so the zero-noise case stays finite and sortable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ParameterError, ShapeError, UndefinedMetricError
from .tensor_core import Tensor, l2_norm_sq

SSIM = "SSIM"
SQNR_DB = "SQNR_dB"

DEFAULT_SQNR_CAP_DB = 100.0


class MetricScore(NamedTuple):
    value: float
    kind: str


@dataclass(frozen=True)
class SsimWeights:
    """Component exponents and stabilizers for the similarity index."""

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    c1: float = 1e-4  # (0.01 * L)^2 at data range L = 1
    c2: float = 9e-4  # (0.03 * L)^2

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ParameterError("exponents must be nonnegative")
        if self.c1 < 0 or self.c2 < 0:
            raise ParameterError("stabilizers must be nonnegative")

    @classmethod
    def for_data_range(cls, data_range: float, alpha: float = 1.0, beta: float = 1.0, gamma: float = 1.0):
        l = max(float(data_range), 0.0)
        return cls(alpha=alpha, beta=beta, gamma=gamma, c1=(0.01 * l) ** 2, c2=(0.03 * l) ** 2)

    @classmethod
    def unstabilized(cls):
        return cls(c1=0.0, c2=0.0)


def _moments(x: np.ndarray, y: np.ndarray):
    mu_x = float(x.mean())
    mu_y = float(y.mean())
    var_x = float(((x - mu_x) ** 2).mean())
    var_y = float(((y - mu_y) ** 2).mean())
    cov = float(((x - mu_x) * (y - mu_y)).mean())
    return mu_x, mu_y, var_x, var_y, cov


def ssim_components(x: Tensor, y: Tensor, weights: SsimWeights | None = None):
    """Luminance, contrast, and structure terms over one full-image window."""
    w = weights or SsimWeights()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    mu_x, mu_y, var_x, var_y, cov = _moments(x, y)
    sd_x, sd_y = math.sqrt(var_x), math.sqrt(var_y)

    lum_den = mu_x * mu_x + mu_y * mu_y + w.c1
    con_den = var_x + var_y + w.c2
    str_den = sd_x * sd_y + w.c2 / 2
    if lum_den == 0 or con_den == 0 or str_den == 0:
        raise UndefinedMetricError(
            "similarity undefined: zero-mean or constant inputs with zero stabilizers"
        )
    lum = (2 * mu_x * mu_y + w.c1) / lum_den
    con = (2 * sd_x * sd_y + w.c2) / con_den
    struct = (cov + w.c2 / 2) / str_den
    return lum, con, struct


def ssim(x: Tensor, y: Tensor, weights: SsimWeights | None = None) -> MetricScore:
    """Structural similarity: l^alpha * c^beta * s^gamma over the full image."""
    w = weights or SsimWeights()
    lum, con, struct = ssim_components(x, y, w)
    value = (lum ** w.alpha) * (con ** w.beta) * (struct ** w.gamma)
    return MetricScore(value=float(value), kind=SSIM)


def sqnr_db(reference: Tensor, test: Tensor, cap_db: float = DEFAULT_SQNR_CAP_DB) -> MetricScore:
    """Signal-to-quantization-noise ratio in dB, capped at ``cap_db``."""
    if not math.isfinite(cap_db):
        raise ParameterError("cap_db must be finite")
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ShapeError(f"shape mismatch: {reference.shape} vs {test.shape}")
    signal = l2_norm_sq(reference)
    if signal == 0.0:
        raise UndefinedMetricError("reference signal is identically zero")
    noise = l2_norm_sq(reference - test)
    if noise == 0.0:
        return MetricScore(value=float(cap_db), kind=SQNR_DB)
    return MetricScore(value=float(min(cap_db, 10.0 * math.log10(signal / noise))), kind=SQNR_DB)
