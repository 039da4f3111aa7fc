"""Discrepancy metrics between an original image and a recovery.

Four metrics: psnr, ssim, l1, l2. The pixelwise metrics (psnr/l1/l2) can be
restricted to the masked region, which is the default for detection since
only the recovered pixels carry signal. SSIM is a single global window over
the full composite image: its mean/variance/covariance statistics need the
whole spatial context, so it takes no mask.

All accumulation happens in float64 (numpy pairwise summation), which keeps
results reproducible across platforms to well below the test tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import REGIONS, ImageBuffer, MaskBuffer, ValidationError


@dataclass(frozen=True)
class ScoringParams:
    """Region selection and the stabilizing constants.

    ssim_c1 / ssim_c2 default to (0.01 * MAX)^2 and (0.03 * MAX)^2, the
    standard stabilizers, resolved against the image's max_value at call
    time when left as None. psnr_cap replaces the infinity at MSE = 0 so
    scores stay finite and totally ordered.
    """

    region: str = "masked"
    psnr_cap: float = 100.0
    ssim_c1: Optional[float] = None
    ssim_c2: Optional[float] = None

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ValidationError(f"region must be one of {REGIONS}")
        if self.psnr_cap <= 0:
            raise ValidationError("psnr_cap must be positive")
        if self.ssim_c1 is not None and self.ssim_c1 <= 0:
            raise ValidationError("ssim_c1 must be positive")
        if self.ssim_c2 is not None and self.ssim_c2 <= 0:
            raise ValidationError("ssim_c2 must be positive")

    def c1_for(self, max_value: int) -> float:
        return self.ssim_c1 if self.ssim_c1 is not None else (0.01 * max_value) ** 2

    def c2_for(self, max_value: int) -> float:
        return self.ssim_c2 if self.ssim_c2 is not None else (0.03 * max_value) ** 2


DEFAULT_PARAMS = ScoringParams()


def _check_pair(a: ImageBuffer, b: ImageBuffer) -> None:
    if not a.shape_matches(b):
        raise ValidationError(
            f"image shapes differ: {a.height}x{a.width}x{a.channels} vs "
            f"{b.height}x{b.width}x{b.channels}"
        )
    if a.max_value != b.max_value:
        raise ValidationError("images have different max_value")


def _diff(a: ImageBuffer, b: ImageBuffer, mask: Optional[MaskBuffer],
          params: ScoringParams) -> np.ndarray:
    """Intensity differences over the selected pixel set, flattened."""
    _check_pair(a, b)
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    if params.region == "full":
        return d.reshape(-1)
    if mask is None:
        raise ValidationError("region=masked requires a mask")
    if not mask.matches(a):
        raise ValidationError("mask dimensions do not match images")
    sel = mask.bits.astype(bool)
    if not sel.any():
        raise ValidationError("region=masked requires at least one masked pixel")
    return d[sel].reshape(-1)


def mse(a: ImageBuffer, b: ImageBuffer, mask: Optional[MaskBuffer] = None,
        params: ScoringParams = DEFAULT_PARAMS) -> float:
    """Mean squared intensity difference over the selected pixel set."""
    d = _diff(a, b, mask, params)
    return float(np.mean(d * d))


def psnr(a: ImageBuffer, b: ImageBuffer, mask: Optional[MaskBuffer] = None,
         params: ScoringParams = DEFAULT_PARAMS) -> float:
    """Peak signal-to-noise ratio in dB, capped at params.psnr_cap."""
    err = mse(a, b, mask, params)
    if err == 0.0:
        return params.psnr_cap
    value = 10.0 * math.log10(a.max_value ** 2 / err)
    return min(value, params.psnr_cap)


def l1(a: ImageBuffer, b: ImageBuffer, mask: Optional[MaskBuffer] = None,
       params: ScoringParams = DEFAULT_PARAMS) -> float:
    """Mean absolute intensity difference over the selected pixel set."""
    return float(np.mean(np.abs(_diff(a, b, mask, params))))


def l2(a: ImageBuffer, b: ImageBuffer, mask: Optional[MaskBuffer] = None,
       params: ScoringParams = DEFAULT_PARAMS) -> float:
    """Mean squared intensity difference; identical to mse by definition."""
    return mse(a, b, mask, params)


def ssim(a: ImageBuffer, b: ImageBuffer,
         params: ScoringParams = DEFAULT_PARAMS) -> float:
    """Global single-window SSIM over all pixels and channels jointly.

    Population (1/N) variance and covariance; no sliding window. Result is
    in [-1, 1] with 1 for a perfect match.
    """
    _check_pair(a, b)
    x = a.data.astype(np.float64).reshape(-1)
    y = b.data.astype(np.float64).reshape(-1)
    c1 = params.c1_for(a.max_value)
    c2 = params.c2_for(a.max_value)
    mu_x = float(np.mean(x))
    mu_y = float(np.mean(y))
    var_x = float(np.mean((x - mu_x) ** 2))
    var_y = float(np.mean((y - mu_y) ** 2))
    cov = float(np.mean((x - mu_x) * (y - mu_y)))
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


METRIC_FUNCS = {"psnr": psnr, "l1": l1, "l2": l2}

# Lower delta must mean "more model-like". Recovery quality runs the other
# way for psnr/ssim (higher = better recovery), so those are negated.
METRIC_SIGN = {"psnr": -1.0, "ssim": -1.0, "l1": 1.0, "l2": 1.0}


def raw_metric(metric: str, original: ImageBuffer, recovered: ImageBuffer,
               mask: Optional[MaskBuffer], params: ScoringParams) -> float:
    """Dispatch one raw (unoriented) metric value."""
    if metric == "ssim":
        return ssim(original, recovered, params)
    try:
        fn = METRIC_FUNCS[metric]
    except KeyError:
        raise ValidationError(f"unknown metric {metric!r}") from None
    return fn(original, recovered, mask, params)
