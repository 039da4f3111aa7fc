"""End-to-end detection pipeline: corrupt, recover K times, score, threshold.

delta_score produces one ScoreRecord per image: a deterministic per-image
mask, K recoveries from the backend, per-sample raw metric values on the
composites, and delta = mean of the orientation-adjusted values (negated
psnr/ssim, raw l1/l2), so that lower delta always reads "more model-like".

An image is declared fake when delta <= tau. The threshold is calibrated on
fake scores as the smallest observed value that declares at least the target
fraction of the calibration set fake.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from .backend import RecoveryBackend, RecoveryRequest
from .core import (
    ImageBuffer,
    ManifestEntry,
    RunConfig,
    ScoreRecord,
    ValidationError,
    composite,
    image_from_png,
    stable_seed,
)
from .masks import MaskSpec, generate_mask
from .scoring import METRIC_SIGN, ScoringParams, raw_metric


@dataclass(frozen=True)
class Verdict:
    id: str
    delta: float
    tau: float
    label_hat: str

    def __post_init__(self):
        expected = "fake" if self.delta <= self.tau else "real"
        if self.label_hat != expected:
            raise ValidationError("label_hat must follow the delta <= tau rule")


@dataclass(frozen=True)
class CalibrationResult:
    metric: str
    tau: float
    n_calibration: int
    target_tpr: float = 0.95


def per_image_mask_seed(mask_seed: int, image_id: str) -> int:
    """Masks differ across images but a run is reproducible end to end."""
    return stable_seed("mask-seed", mask_seed, image_id)


def per_image_recovery_seed(mask_seed: int, image_id: str) -> int:
    return stable_seed("recovery-seed", mask_seed, image_id)


def delta_score(image: ImageBuffer, config: RunConfig, backend: RecoveryBackend,
                image_id: str = "", aggregate: str = "mean",
                prompt: Optional[str] = None) -> ScoreRecord:
    """Score one image through the corrupt/recover/compare pipeline.

    aggregate: "mean" (the estimator used everywhere) or "median" (kept
    behind this flag for robustness experiments only).
    """
    if aggregate not in ("mean", "median"):
        raise ValidationError(f"aggregate must be mean or median, got {aggregate!r}")
    spec = MaskSpec(
        kind=config.mask_kind,
        seed=per_image_mask_seed(config.mask_seed, image_id),
    )
    mask = generate_mask(spec, image.width, image.height)
    request = RecoveryRequest(
        image=image,
        mask=mask,
        num_samples=config.k,
        base_seed=per_image_recovery_seed(config.mask_seed, image_id),
        prompt=prompt,
        image_id=image_id,
    )
    response = backend.recover(request)
    params = ScoringParams(region=config.region)
    per_sample = []
    for sample in response.samples:
        merged = composite(image, mask, sample)
        per_sample.append(raw_metric(config.metric, image, merged, mask, params))
    sign = METRIC_SIGN[config.metric]
    oriented = [sign * v for v in per_sample]
    if aggregate == "mean":
        delta = sum(oriented) / len(oriented)
    else:
        delta = float(sorted(oriented)[len(oriented) // 2]) if len(oriented) % 2 \
            else float(sum(sorted(oriented)[len(oriented) // 2 - 1:len(oriented) // 2 + 1]) / 2)
    return ScoreRecord(
        id=image_id,
        metric=config.metric,
        per_sample=tuple(per_sample),
        delta=delta,
        k=config.k,
    )


def choose_k(sigma: float, delta_prob: float, gap: float, c: float = 4.0) -> int:
    """Number of recovery samples sufficient to separate the two means.

    max(1, ceil(c * sigma * ln(1/delta_prob) / gap^2)). The constant c
    defaults to 4, from the two-sided concentration bound; halving the gap
    quadruples the count.
    """
    if sigma <= 0 or gap <= 0 or c <= 0:
        raise ValidationError("sigma, gap and c must be positive")
    if not 0.0 < delta_prob < 1.0:
        raise ValidationError("delta_prob must be in (0, 1)")
    return max(1, math.ceil(c * sigma * math.log(1.0 / delta_prob) / (gap * gap)))


def calibrate_tau(fake_deltas: Sequence[float], target_tpr: float = 0.95,
                  metric: str = "psnr") -> CalibrationResult:
    """Pick tau as the ceil(target_tpr * n)-th smallest fake delta.

    With the delta <= tau rule this declares at least target_tpr of the
    calibration fakes fake, and is the smallest observed value doing so.
    """
    values = [float(v) for v in fake_deltas]
    if not values:
        raise ValidationError("calibration needs at least one fake delta")
    if not 0.0 < target_tpr <= 1.0:
        raise ValidationError("target_tpr must be in (0, 1]")
    n = len(values)
    rank = math.ceil(target_tpr * n)
    tau = sorted(values)[rank - 1]
    return CalibrationResult(metric=metric, tau=tau, n_calibration=n,
                             target_tpr=target_tpr)


def classify(delta: float, tau: float, image_id: str = "") -> Verdict:
    """Fake iff delta <= tau (ties count as fake, matching calibration)."""
    if not (math.isfinite(delta) and math.isfinite(tau)):
        raise ValidationError("delta and tau must be finite")
    label = "fake" if delta <= tau else "real"
    return Verdict(id=image_id, delta=float(delta), tau=float(tau), label_hat=label)


@dataclass(frozen=True)
class ImageFailure:
    id: str
    error: str
    kind: str = "error"


def run_detection(entries: Iterable[ManifestEntry], config: RunConfig,
                  backend: RecoveryBackend, images_root: Optional[Path] = None,
                  loader: Optional[Callable[[ManifestEntry], ImageBuffer]] = None,
                  use_prompts: bool = False,
                  ) -> tuple[list[ScoreRecord], list[ImageFailure]]:
    """Score every manifest entry with bounded parallelism.

    Recovery is unconditioned unless use_prompts is set, in which case each
    entry's prompt is forwarded to the backend. Per-image errors are
    recorded and the run continues; callers decide what a partial failure
    means. Results come back in completion order; records carry ids, so
    readers must not assume ordering.
    """
    entries = list(entries)

    def load(entry: ManifestEntry) -> ImageBuffer:
        if loader is not None:
            return loader(entry)
        path = Path(entry.path)
        if images_root is not None and not path.is_absolute():
            path = images_root / path
        return image_from_png(path)

    def work(entry: ManifestEntry) -> ScoreRecord:
        image = load(entry)
        return delta_score(image, config, backend, image_id=entry.id,
                           prompt=entry.prompt if use_prompts else None)

    records: list[ScoreRecord] = []
    failures: list[ImageFailure] = []
    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        futures = {pool.submit(work, e): e for e in entries}
        for fut in as_completed(futures):
            entry = futures[fut]
            try:
                records.append(fut.result())
            except Exception as exc:
                failures.append(ImageFailure(id=entry.id, error=f"{entry.id}: {exc}",
                                             kind=exc.__class__.__name__))
    return records, failures
