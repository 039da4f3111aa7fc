"""Deterministic corruption-mask generation.

Two geometry families drive the ablations: half-image masks (genhalf) and
seeded random thick strokes (thick). rect and random_patch are extra
plumbing for ablations, not part of the studied pair. All stochastic kinds
draw from a Philox counter-based generator seeded from (kind, seed, w, h),
so identical specs always produce bit-identical masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import MASK_KINDS, MaskBuffer, ValidationError, make_rng, stable_seed

THICK_FRACTION_LO = 0.10
THICK_FRACTION_HI = 0.45


@dataclass(frozen=True)
class MaskSpec:
    """Mask request: kind, seed, advisory target fraction, geometry params."""

    kind: str
    seed: int = 0
    target_fraction: float = 0.25
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValidationError(f"kind must be one of {MASK_KINDS}, got {self.kind!r}")
        if not 0.0 < self.target_fraction < 1.0:
            raise ValidationError(
                f"target_fraction must be in (0, 1), got {self.target_fraction}"
            )


def generate_mask(spec: MaskSpec, width: int, height: int) -> MaskBuffer:
    """Generate a binary mask; 1 = masked/unknown, 0 = known.

    Every generated mask leaves at least one known pixel and masks at
    least one pixel.
    """
    if width < 8 or height < 8:
        raise ValidationError(f"dimensions must be >= 8, got {width}x{height}")
    if spec.kind == "genhalf":
        bits = _genhalf(width, height)
    elif spec.kind == "thick":
        bits = _thick(spec, width, height)
    elif spec.kind == "rect":
        bits = _rect(spec, width, height)
    else:
        bits = _random_patch(spec, width, height)
    n = int(bits.sum())
    if n == 0 or n == width * height:
        raise ValidationError("generated mask must be a proper nonempty subset")
    return MaskBuffer(width=width, height=height, bits=bits)


def masked_fraction(mask: MaskBuffer) -> float:
    """count(bits=1) / (w*h), exact rational reported as double."""
    return mask.count_masked() / (mask.width * mask.height)


def _genhalf(width: int, height: int) -> np.ndarray:
    # Right half of the columns: ceil(w/2) .. w-1. Which half is masked is
    # arbitrary; right is fixed here so runs are comparable.
    bits = np.zeros((height, width), dtype=np.uint8)
    bits[:, math.ceil(width / 2):] = 1
    return bits


def _brush_radius(width: int, height: int) -> int:
    # Stroke width (2r+1) must be at least 5% of min(w, h).
    target = 0.05 * min(width, height)
    return max(1, math.ceil((target - 1) / 2))


def _disk_offsets(radius: int) -> tuple[np.ndarray, np.ndarray]:
    dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    keep = dy * dy + dx * dx <= radius * radius
    return dy[keep], dx[keep]


def _thick(spec: MaskSpec, width: int, height: int) -> np.ndarray:
    rng = make_rng(stable_seed("mask-thick", spec.seed, width, height))
    target = min(max(spec.target_fraction, 0.12), 0.35)
    total = width * height
    bits = np.zeros((height, width), dtype=np.uint8)
    radius = _brush_radius(width, height)
    dy, dx = _disk_offsets(radius)
    step_len = max(2.0, 0.15 * min(width, height))
    count = 0

    def stamp(cy: float, cx: float) -> int:
        ys = np.clip(np.round(cy + dy).astype(int), 0, height - 1)
        xs = np.clip(np.round(cx + dx).astype(int), 0, width - 1)
        box = bits[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
        before = int(box.sum())
        bits[ys, xs] = 1
        return int(box.sum()) - before

    # Random walk of strokes, one disk stamp at a time; stop the instant the
    # target fraction is reached so the total stays inside the contract band.
    strokes = 0
    while count < target * total:
        strokes += 1
        if strokes > 10_000:
            raise ValidationError("thick mask generation failed to converge")
        y = rng.uniform(0, height)
        x = rng.uniform(0, width)
        for _ in range(int(rng.integers(4, 9))):
            angle = rng.uniform(0, 2 * math.pi)
            length = rng.uniform(0.4, 1.0) * step_len
            ny = y + length * math.sin(angle)
            nx = x + length * math.cos(angle)
            n_points = max(2, int(length))
            for t in np.linspace(0.0, 1.0, n_points):
                count += stamp(y + t * (ny - y), x + t * (nx - x))
                if count >= target * total:
                    return bits
            y, x = ny, nx
    return bits


def _rect(spec: MaskSpec, width: int, height: int) -> np.ndarray:
    f = spec.target_fraction
    side = math.sqrt(f)
    rw = max(1, round(width * side))
    rh = max(1, round(height * side))
    if rw >= width and rh >= height:
        raise ValidationError(
            f"rect target_fraction {f} would mask the whole {width}x{height} image"
        )
    cx = float(spec.params.get("cx", 0.5))
    cy = float(spec.params.get("cy", 0.5))
    x0 = round(cx * width - rw / 2)
    y0 = round(cy * height - rh / 2)
    if x0 < 0 or y0 < 0 or x0 + rw > width or y0 + rh > height:
        raise ValidationError(
            f"rect of {rw}x{rh} centered at ({cx}, {cy}) does not fit in {width}x{height}"
        )
    bits = np.zeros((height, width), dtype=np.uint8)
    bits[y0:y0 + rh, x0:x0 + rw] = 1
    return bits


def _random_patch(spec: MaskSpec, width: int, height: int) -> np.ndarray:
    rng = make_rng(stable_seed("mask-patch", spec.seed, width, height))
    target = spec.target_fraction
    total = width * height
    side = max(1, round(0.1 * min(width, height)))
    # Keep each patch small enough that stopping lands within +/- 0.05.
    while side > 1 and side * side > 0.04 * total:
        side -= 1
    bits = np.zeros((height, width), dtype=np.uint8)
    placed = 0
    count = 0
    attempts = 0
    while placed == 0 or count < (target - 0.04) * total:
        attempts += 1
        if attempts > 20_000:
            if abs(count / total - target) <= 0.05:
                break
            raise ValidationError(
                f"could not reach target_fraction {target} with disjoint patches"
            )
        y0 = int(rng.integers(0, height - side + 1))
        x0 = int(rng.integers(0, width - side + 1))
        region = bits[y0:y0 + side, x0:x0 + side]
        if region.any():
            continue
        region[:] = 1
        placed += 1
        count += side * side
    return bits
