"""Shared domain types, manifest and score-record I/O, PNG raster I/O.

Images are kept as 8-bit integers end to end and only converted to floating
point inside scoring, so results do not depend on codec round-trips. All
types here are immutable after construction and safe to share across
concurrent workers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

LABELS = ("real", "fake")
METRICS = ("psnr", "ssim", "l1", "l2")
MASK_KINDS = ("thick", "genhalf", "rect", "random_patch")
REGIONS = ("masked", "full")


class ValidationError(ValueError):
    """A value violates one of the documented contracts."""


class ManifestError(ValidationError):
    """A manifest file is malformed or internally inconsistent."""


def stable_seed(*parts) -> int:
    """Derive a 64-bit seed from arbitrary parts, stable across processes.

    Python's builtin hash() is salted per process, so seeds derived from it
    would not reproduce across runs. blake2b over the repr of the parts does.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded Philox generator (64-bit counter-based, splittable)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@dataclass(frozen=True)
class ImageBuffer:
    """Decoded raster image: height x width x channels, 8-bit intensities.

    data is row-major uint8 with shape (height, width, channels) and is
    frozen after construction.
    """

    width: int
    height: int
    channels: int
    data: np.ndarray
    max_value: int = 255

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValidationError(f"channels must be 1 or 3, got {self.channels}")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image dimensions must be positive")
        arr = np.ascontiguousarray(self.data, dtype=np.uint8)
        if arr.shape != (self.height, self.width, self.channels):
            raise ValidationError(
                f"data shape {arr.shape} does not match "
                f"(h={self.height}, w={self.width}, c={self.channels})"
            )
        if not 1 <= self.max_value <= 255:
            raise ValidationError("max_value must be in [1, 255] for 8-bit data")
        if arr.max(initial=0) > self.max_value:
            raise ValidationError("intensity exceeds max_value")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr: np.ndarray, max_value: int = 255) -> "ImageBuffer":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValidationError(f"expected 2-D or 3-D array, got ndim={arr.ndim}")
        h, w, c = arr.shape
        return cls(width=w, height=h, channels=c, data=arr, max_value=max_value)

    def shape_matches(self, other: "ImageBuffer") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and self.channels == other.channels
        )


@dataclass(frozen=True)
class MaskBuffer:
    """Binary region selector: 1 = unknown/masked, 0 = known."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if arr.shape != (self.height, self.width):
            raise ValidationError(
                f"bits shape {arr.shape} does not match (h={self.height}, w={self.width})"
            )
        if not np.isin(arr, (0, 1)).all():
            raise ValidationError("mask bits must be strictly binary")
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "MaskBuffer":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ValidationError(f"expected 2-D mask array, got ndim={arr.ndim}")
        h, w = arr.shape
        return cls(width=w, height=h, bits=arr)

    def matches(self, image: ImageBuffer) -> bool:
        return self.width == image.width and self.height == image.height

    def count_masked(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class ManifestEntry:
    """One catalogued image: id, file path, ground-truth label, provenance."""

    id: str
    path: str
    label: str
    source_model: str
    prompt: Optional[str] = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValidationError(f"label must be one of {LABELS}, got {self.label!r}")
        if not self.id:
            raise ValidationError("entry id must be nonempty")


@dataclass(frozen=True)
class ScoreRecord:
    """Per-image discrepancy result: K raw metric values plus aggregated delta.

    per_sample holds the raw metric values; delta is the orientation-adjusted
    mean (negated for psnr/ssim so that lower always means more model-like).
    """

    id: str
    metric: str
    per_sample: tuple
    delta: float
    k: int

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValidationError(f"metric must be one of {METRICS}, got {self.metric!r}")
        per = tuple(float(v) for v in self.per_sample)
        if self.k < 1 or len(per) != self.k:
            raise ValidationError(
                f"per_sample length {len(per)} must equal k={self.k} >= 1"
            )
        object.__setattr__(self, "per_sample", per)


@dataclass(frozen=True)
class RunConfig:
    """Configuration for one detection run."""

    mask_kind: str = "genhalf"
    mask_seed: int = 0
    k: int = 3
    metric: str = "psnr"
    region: str = "masked"
    backend_endpoint: str = "builtin:mean-fill"
    tau: Optional[float] = None
    concurrency: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.concurrency < 1:
            raise ValidationError(f"concurrency must be >= 1, got {self.concurrency}")
        if self.mask_kind not in MASK_KINDS:
            raise ValidationError(f"mask_kind must be one of {MASK_KINDS}")
        if self.metric not in METRICS:
            raise ValidationError(f"metric must be one of {METRICS}")
        if self.region not in REGIONS:
            raise ValidationError(f"region must be one of {REGIONS}")


# ---------------------------------------------------------------------------
# Manifest I/O: one JSON record per line, UTF-8.
# ---------------------------------------------------------------------------

_MANIFEST_FIELDS = ("id", "path", "label", "source_model")


def load_manifest(path) -> list[ManifestEntry]:
    """Read a line-delimited manifest, preserving file order.

    Blank lines are skipped. Raises ManifestError naming the offending line
    number for malformed records and citing both lines for duplicate ids.
    """
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: not valid JSON ({exc.msg})") from exc
            if not isinstance(raw, dict):
                raise ManifestError(f"line {lineno}: record must be a JSON object")
            missing = [f for f in _MANIFEST_FIELDS if f not in raw]
            if missing:
                raise ManifestError(f"line {lineno}: missing fields {missing}")
            try:
                entry = ManifestEntry(
                    id=str(raw["id"]),
                    path=str(raw["path"]),
                    label=str(raw["label"]),
                    source_model=str(raw["source_model"]),
                    prompt=None if raw.get("prompt") is None else str(raw["prompt"]),
                )
            except ValidationError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from exc
            if entry.id in seen:
                raise ManifestError(
                    f"duplicate id {entry.id!r} on lines {seen[entry.id]} and {lineno}"
                )
            seen[entry.id] = lineno
            entries.append(entry)
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for entry in entries:
            rec = {
                "id": entry.id,
                "path": entry.path,
                "label": entry.label,
                "source_model": entry.source_model,
                "prompt": entry.prompt,
            }
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


# ---------------------------------------------------------------------------
# Score-record I/O: one JSON record per line, append-only.
# ---------------------------------------------------------------------------


def score_record_to_dict(record: ScoreRecord, extra: Optional[dict] = None) -> dict:
    rec = {
        "id": record.id,
        "metric": record.metric,
        "per_sample": list(record.per_sample),
        "delta": record.delta,
        "k": record.k,
    }
    if extra:
        rec.update(extra)
    return rec


def append_score_records(records: Iterable[ScoreRecord], path, extras=None) -> None:
    """Append records to a line-oriented score file.

    extras, when given, is a mapping id -> dict of additional keys to write
    on that record's line (e.g. verdict fields). Readers ignore unknown keys.
    """
    path = Path(path)
    extras = extras or {}
    with path.open("a", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(score_record_to_dict(record, extras.get(record.id))) + "\n")


def load_score_records(path) -> list[ScoreRecord]:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: not valid JSON ({exc.msg})") from exc
            records.append(
                ScoreRecord(
                    id=str(raw["id"]),
                    metric=str(raw["metric"]),
                    per_sample=tuple(raw["per_sample"]),
                    delta=float(raw["delta"]),
                    k=int(raw["k"]),
                )
            )
    return records


# ---------------------------------------------------------------------------
# PNG raster I/O. Grayscale and RGB only; alpha is rejected at load because
# the discrepancy metrics are defined over intensity channels only.
# ---------------------------------------------------------------------------


def image_from_png(path) -> ImageBuffer:
    path = Path(path)
    with Image.open(path) as im:
        mode = im.mode
        if mode == "P":
            if "transparency" in im.info:
                raise ValidationError(f"{path}: images with alpha are not supported")
            im = im.convert("RGB")
            mode = "RGB"
        if mode in ("RGBA", "LA", "PA"):
            raise ValidationError(f"{path}: images with alpha are not supported")
        if mode not in ("L", "RGB"):
            raise ValidationError(
                f"{path}: unsupported PNG mode {mode!r}; expected 8-bit L or RGB"
            )
        arr = np.asarray(im, dtype=np.uint8)
    return ImageBuffer.from_array(arr)


def image_to_png(image: ImageBuffer, path) -> None:
    path = Path(path)
    if image.channels == 1:
        pil = Image.fromarray(image.data[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(image.data, mode="RGB")
    pil.save(path, format="PNG")


def mask_from_png(path) -> MaskBuffer:
    """Read a 1-channel mask PNG where 255 = masked and 0 = known."""
    path = Path(path)
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValidationError(f"{path}: mask PNG must be 1-channel (mode L)")
        arr = np.asarray(im, dtype=np.uint8)
    if not np.isin(arr, (0, 255)).all():
        raise ValidationError(f"{path}: mask PNG values must be exactly 0 or 255")
    return MaskBuffer.from_array((arr == 255).astype(np.uint8))


def mask_to_png(mask: MaskBuffer, path) -> None:
    Image.fromarray((mask.bits * 255).astype(np.uint8), mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Compositing
# ---------------------------------------------------------------------------


def composite(original: ImageBuffer, mask: MaskBuffer, recovered: ImageBuffer) -> ImageBuffer:
    """Paste the recovered masked pixels over the original known pixels.

    Backends regenerate whole images and do not guarantee known-pixel
    preservation, so compositing is done here before scoring.
    """
    if not original.shape_matches(recovered):
        raise ValidationError("original and recovered images have different shapes")
    if not mask.matches(original):
        raise ValidationError("mask dimensions do not match image")
    sel = mask.bits[:, :, None].astype(bool)
    out = np.where(sel, recovered.data, original.data)
    return ImageBuffer.from_array(out, max_value=original.max_value)
