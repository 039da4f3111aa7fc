"""Recovery backends: given (image, mask), produce K recovered images.

Three families:
  * ``builtin:mean-fill``     -- masked pixels become the per-channel mean of
    the known pixels; the cheapest possible reference recovery.
  * ``builtin:oracle-noise``  -- a test double that recovers to the original
    plus Gaussian noise, with a smaller sigma for ids registered as fake.
    It manufactures a controllable recovery-quality gap between the two
    classes, so the full pipeline can be exercised end to end offline.
  * HTTP endpoints            -- POST {endpoint}/v1/inpaint with base64 PNGs;
    any server speaking the wire protocol below works, including the
    bundled inpainting sidecar and thin adapters over commercial APIs.

Wire protocol (HTTP/1.1 JSON):
  POST /v1/inpaint   body: image_png_b64, mask_png_b64 (1-channel PNG,
                     255=masked), num_samples, base_seed, prompt?, steps?,
                     guidance?  ->  {"samples": [png b64, ...], "backend_id"}
  GET  /v1/health    -> {"status": "ok"}

Sample i of a request always uses seed base_seed + i, so a batched request
and a per-sample fan-out are interchangeable.
"""

from __future__ import annotations

import base64
import io
import random
import time
import urllib.parse
from dataclasses import dataclass, field
from typing import Optional, Sequence

import httpx
import numpy as np

from .core import (
    ImageBuffer,
    MaskBuffer,
    ValidationError,
    image_from_png,
    make_rng,
    stable_seed,
)
from PIL import Image


class ConnectivityError(RuntimeError):
    """Endpoint unreachable or still failing after retries."""


class ProtocolError(RuntimeError):
    """Endpoint answered, but not in the expected shape."""


@dataclass(frozen=True)
class RecoveryRequest:
    """One recovery job: image + mask, K samples, deterministic seed fan-out.

    image_id is local plumbing so builtin test doubles can key behavior per
    image; it never goes on the wire.
    """

    image: ImageBuffer
    mask: MaskBuffer
    num_samples: int = 1
    base_seed: int = 0
    prompt: Optional[str] = None
    steps: Optional[int] = None
    guidance: Optional[float] = None
    image_id: Optional[str] = None

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValidationError(f"num_samples must be >= 1, got {self.num_samples}")
        if not self.mask.matches(self.image):
            raise ValidationError("mask dimensions do not match image")


@dataclass(frozen=True)
class RecoveryResponse:
    samples: tuple
    backend_id: str
    latency_ms: tuple

    def __post_init__(self):
        if len(self.samples) != len(self.latency_ms):
            raise ValidationError("one latency per sample required")


class RecoveryBackend:
    """Interface: health probe plus recover()."""

    backend_id = "abstract"

    def health(self) -> bool:
        return True

    def recover(self, request: RecoveryRequest) -> RecoveryResponse:
        raise NotImplementedError

    def _validate_sample(self, request: RecoveryRequest, sample: ImageBuffer) -> None:
        if not sample.shape_matches(request.image):
            raise ValidationError(
                f"backend {self.backend_id} returned a sample of wrong shape"
            )


class MeanFillBackend(RecoveryBackend):
    """Fill masked pixels with the per-channel mean of the known pixels."""

    backend_id = "builtin:mean-fill"

    def recover(self, request: RecoveryRequest) -> RecoveryResponse:
        img = request.image
        known = ~request.mask.bits.astype(bool)
        filled = img.data.astype(np.float64).copy()
        for c in range(img.channels):
            channel = img.data[:, :, c]
            mean = float(channel[known].mean()) if known.any() else img.max_value / 2
            filled[~known, c] = mean
        out = np.clip(np.rint(filled), 0, img.max_value).astype(np.uint8)
        samples = []
        latencies = []
        for _ in range(request.num_samples):
            t0 = time.perf_counter()
            sample = ImageBuffer.from_array(out, max_value=img.max_value)
            self._validate_sample(request, sample)
            samples.append(sample)
            latencies.append((time.perf_counter() - t0) * 1000.0)
        return RecoveryResponse(tuple(samples), self.backend_id, tuple(latencies))


class OracleNoiseBackend(RecoveryBackend):
    """Recover to the original plus seeded Gaussian noise.

    Ids in fake_ids get sigma_fake, everything else sigma_real, with
    sigma_real > sigma_fake >= 0: registered ids are recovered strictly
    better, which plants a known recovery-quality gap for pipeline tests.
    Expected PSNR gap between the classes is about 20*log10(sr/sf).
    """

    backend_id = "builtin:oracle-noise"

    def __init__(self, sigma_fake: float, sigma_real: float,
                 fake_ids: Optional[Sequence[str]] = None,
                 truth: Optional[ImageBuffer] = None):
        if not sigma_real > sigma_fake >= 0:
            raise ValidationError(
                f"need sigma_real > sigma_fake >= 0, got {sigma_fake}, {sigma_real}"
            )
        self.sigma_fake = float(sigma_fake)
        self.sigma_real = float(sigma_real)
        self.fake_ids = frozenset(fake_ids or ())
        self.truth = truth

    def recover(self, request: RecoveryRequest) -> RecoveryResponse:
        truth = self.truth if self.truth is not None else request.image
        self._validate_sample(request, truth)
        sigma = self.sigma_fake if request.image_id in self.fake_ids else self.sigma_real
        base = truth.data.astype(np.float64)
        samples = []
        latencies = []
        for i in range(request.num_samples):
            t0 = time.perf_counter()
            if sigma == 0.0:
                out = truth.data
            else:
                rng = make_rng(stable_seed("oracle-noise", request.base_seed + i))
                noisy = base + rng.normal(0.0, sigma, size=base.shape)
                out = np.clip(np.rint(noisy), 0, truth.max_value).astype(np.uint8)
            sample = ImageBuffer.from_array(out, max_value=truth.max_value)
            self._validate_sample(request, sample)
            samples.append(sample)
            latencies.append((time.perf_counter() - t0) * 1000.0)
        return RecoveryResponse(tuple(samples), self.backend_id, tuple(latencies))


def builtin_oracle_noise(truth: Optional[ImageBuffer], sigma_fake: float,
                         sigma_real: float, fake_ids: Sequence[str] = ()) -> OracleNoiseBackend:
    """Oracle-noise handle pinned to an explicit ground-truth image.

    With truth=None the backend recovers toward each request's own image,
    which is what manifest-driven runs want.
    """
    return OracleNoiseBackend(sigma_fake, sigma_real, fake_ids, truth=truth)


def _png_b64(array: np.ndarray, mode: str) -> str:
    buf = io.BytesIO()
    Image.fromarray(array, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def image_to_b64(image: ImageBuffer) -> str:
    if image.channels == 1:
        return _png_b64(image.data[:, :, 0], "L")
    return _png_b64(image.data, "RGB")


def mask_to_b64(mask: MaskBuffer) -> str:
    return _png_b64((mask.bits * 255).astype(np.uint8), "L")


def image_from_b64(payload: str) -> ImageBuffer:
    try:
        raw = base64.b64decode(payload, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except ValidationError:
        raise
    except Exception as exc:
        raise ProtocolError(f"sample is not a decodable PNG: {exc}") from exc
    return ImageBuffer.from_array(arr)


RETRYABLE_STATUSES = (429, 500, 502, 503, 504)


def post_json_with_retries(client: httpx.Client, url: str, body: dict,
                           retries: int = 3, backoff_base: float = 0.5) -> dict:
    """POST JSON, retrying transient failures with exponential backoff.

    Connection errors and 5xx / 429 responses are retried up to `retries`
    times (delays backoff_base * 2^n plus jitter), then ConnectivityError.
    Other non-200 statuses and non-JSON bodies raise ProtocolError at once.
    """
    last_exc: Optional[Exception] = None
    for attempt in range(retries + 1):
        if attempt > 0:
            delay = backoff_base * (2 ** (attempt - 1))
            time.sleep(delay * (1.0 + random.uniform(0.0, 0.25)))
        try:
            resp = client.post(url, json=body)
        except httpx.HTTPError as exc:
            last_exc = exc
            continue
        if resp.status_code in RETRYABLE_STATUSES:
            last_exc = ConnectivityError(f"{url} returned {resp.status_code}")
            continue
        if resp.status_code != 200:
            raise ProtocolError(f"{url} returned {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise ProtocolError(f"{url} returned non-JSON body") from exc
    raise ConnectivityError(f"{url} still failing after {retries} retries: {last_exc}")


class HttpBackend(RecoveryBackend):
    """Client for the /v1/inpaint wire protocol.

    Transient failures (connection errors, 5xx, 429) are retried up to
    `retries` times with exponential backoff (base 0.5 s, factor 2, jitter)
    before a ConnectivityError. Malformed responses are a ProtocolError and
    are not retried. Samples are fetched one request each so that retries
    and failures stay per-sample.
    """

    def __init__(self, endpoint: str, token: Optional[str] = None,
                 timeout: float = 120.0, retries: int = 3,
                 backoff_base: float = 0.5, client: Optional[httpx.Client] = None):
        self.endpoint = endpoint.rstrip("/")
        self.retries = retries
        self.backoff_base = backoff_base
        headers = {}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        self._healthy: Optional[bool] = None
        self.backend_id = self.endpoint

    def health(self) -> bool:
        try:
            resp = self._client.get(f"{self.endpoint}/v1/health")
            ok = resp.status_code == 200 and resp.json().get("status") == "ok"
        except Exception:
            ok = False
        self._healthy = ok
        return ok

    def _ensure_healthy(self) -> None:
        if self._healthy is None:
            self.health()
        if not self._healthy:
            raise ConnectivityError(f"endpoint {self.endpoint} failed health probe")

    def _post_with_retries(self, path: str, body: dict) -> dict:
        return post_json_with_retries(self._client, f"{self.endpoint}{path}", body,
                                      retries=self.retries,
                                      backoff_base=self.backoff_base)

    def recover(self, request: RecoveryRequest) -> RecoveryResponse:
        self._ensure_healthy()
        samples = []
        latencies = []
        backend_id = self.backend_id
        for i in range(request.num_samples):
            body = {
                "image_png_b64": image_to_b64(request.image),
                "mask_png_b64": mask_to_b64(request.mask),
                "num_samples": 1,
                "base_seed": request.base_seed + i,
            }
            if request.prompt is not None:
                body["prompt"] = request.prompt
            if request.steps is not None:
                body["steps"] = request.steps
            if request.guidance is not None:
                body["guidance"] = request.guidance
            t0 = time.perf_counter()
            payload = self._post_with_retries("/v1/inpaint", body)
            latencies.append((time.perf_counter() - t0) * 1000.0)
            if "samples" not in payload or not isinstance(payload["samples"], list):
                raise ProtocolError("response is missing the samples array")
            if len(payload["samples"]) != 1:
                raise ProtocolError(
                    f"asked for 1 sample, got {len(payload['samples'])}"
                )
            backend_id = str(payload.get("backend_id", backend_id))
            sample = image_from_b64(payload["samples"][0])
            self._validate_sample(request, sample)
            samples.append(sample)
        return RecoveryResponse(tuple(samples), backend_id, tuple(latencies))

    def close(self) -> None:
        self._client.close()


def parse_backend(endpoint: str, fake_ids: Sequence[str] = (),
                  token: Optional[str] = None, **http_kwargs) -> RecoveryBackend:
    """Build a backend handle from a RunConfig.backend_endpoint string.

    Recognized forms:
      builtin:mean-fill
      builtin:oracle-noise?sigma_fake=2&sigma_real=8
      http://host:port or https://host:port
    """
    if endpoint == "builtin:mean-fill":
        return MeanFillBackend()
    if endpoint.startswith("builtin:oracle-noise"):
        query = urllib.parse.urlparse(endpoint).query
        args = dict(urllib.parse.parse_qsl(query))
        try:
            sigma_fake = float(args.get("sigma_fake", 0.0))
            sigma_real = float(args.get("sigma_real", 8.0))
        except ValueError as exc:
            raise ValidationError(f"bad oracle-noise parameters in {endpoint!r}") from exc
        return OracleNoiseBackend(sigma_fake, sigma_real, fake_ids)
    if endpoint.startswith("http://") or endpoint.startswith("https://"):
        return HttpBackend(endpoint, token=token, **http_kwargs)
    raise ValidationError(f"unrecognized backend endpoint {endpoint!r}")
