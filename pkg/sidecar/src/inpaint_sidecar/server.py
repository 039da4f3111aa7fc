"""HTTP serving layer: /v1/inpaint, /v1/generate, /v1/caption, /v1/finetune.

The wire protocol is JSON over HTTP/1.1 with base64 PNG payloads:

  POST /v1/inpaint   {image_png_b64, mask_png_b64, num_samples, base_seed,
                      prompt?, steps?, guidance?}
                     -> {"samples": [png b64 ...], "backend_id": str}
  POST /v1/generate  {prompt, seed, width, height} -> {image_png_b64, backend_id}
  POST /v1/caption   {image_png_b64} -> {caption}
  POST /v1/finetune  {images_png_b64: [...], rank?, steps?, lr?, seed?}
                     -> adapter record (adapter_id, base_model_id, rank,
                        train_steps, dataset_fingerprint)
  GET  /v1/health    -> {"status": "ok"}

Sample i of an inpaint request is driven by seed base_seed + i, so batched
and fanned-out requests agree byte for byte in deterministic mode.

A fine-tuned adapter is served at /adapters/{adapter_id}/v1/... with the
same contract; pointing a client's endpoint base at that prefix switches it
to the aligned model with no protocol change. Malformed requests get 400
with the offending field named; model failures get 503 with Retry-After.
One fine-tune job runs at a time; inference stays available meanwhile.
"""

from __future__ import annotations

import base64
import io
import threading
from copy import deepcopy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image

from .data import tensor_to_uint8, uint8_to_tensor
from .model import (
    CHANNELS,
    IMAGE_SIZE,
    DiffusionSchedule,
    TinyUNet,
    TrainingDiverged,
    apply_lora,
    inpaint,
    load_lora_state,
    lora_state_dict,
    sample,
    train_denoiser,
)
from .registry import (
    AdapterRecord,
    AdapterRegistry,
    dataset_fingerprint,
    make_adapter_id,
)

DEFAULT_CHECKPOINT = Path(__file__).parent / "assets" / "toy_base.pt"


class RequestError(ValueError):
    """Maps to a 400 response naming the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


@dataclass
class SidecarConfig:
    model_id: str = "toy-diffusion-v1"
    checkpoint: Path = DEFAULT_CHECKPOINT
    adapter_dir: Path = Path("adapters")
    deterministic: bool = True
    timesteps: int = 100
    finetune_budget_seconds: float = 7200.0
    finetune_batch_size: int = 32


# ---------------------------------------------------------------------------
# Payload helpers
# ---------------------------------------------------------------------------


def decode_png_field(payload, field_name: str) -> np.ndarray:
    if not isinstance(payload, str):
        raise RequestError(field_name, "must be a base64 string")
    try:
        raw = base64.b64decode(payload, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            if im.mode not in ("L", "RGB"):
                raise RequestError(field_name,
                                   f"PNG mode {im.mode!r} unsupported; use L or RGB")
            return np.asarray(im, dtype=np.uint8)
    except RequestError:
        raise
    except Exception as exc:
        raise RequestError(field_name, f"not a decodable PNG ({exc})")


def encode_png(arr: np.ndarray) -> str:
    mode = "L" if arr.ndim == 2 or arr.shape[2] == 1 else "RGB"
    if mode == "L" and arr.ndim == 3:
        arr = arr[:, :, 0]
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def require_int(body: dict, field_name: str, default=None, minimum=None) -> int:
    value = body.get(field_name, default)
    if value is None:
        raise RequestError(field_name, "is required")
    if isinstance(value, bool) or not isinstance(value, int):
        raise RequestError(field_name, "must be an integer")
    if minimum is not None and value < minimum:
        raise RequestError(field_name, f"must be >= {minimum}")
    return value


# ---------------------------------------------------------------------------
# Model hosting
# ---------------------------------------------------------------------------


class ModelHost:
    """Owns the frozen base model, the adapter registry, and the locks."""

    def __init__(self, config: SidecarConfig):
        self.config = config
        self.schedule = DiffusionSchedule.linear(timesteps=config.timesteps)
        self.base_model = TinyUNet()
        state = torch.load(config.checkpoint, weights_only=True)
        self.base_model.load_state_dict(state)
        self.base_model.eval()
        self.registry = AdapterRegistry(config.adapter_dir)
        self._adapter_cache: dict[str, torch.nn.Module] = {}
        self._cache_lock = threading.RLock()
        self._train_lock = threading.Lock()
        if config.deterministic:
            torch.set_num_threads(1)

    def model_for(self, adapter_id: Optional[str]) -> Optional[torch.nn.Module]:
        """Base model for None, else the materialized adapter model."""
        if adapter_id is None:
            return self.base_model
        with self._cache_lock:
            if adapter_id in self._adapter_cache:
                return self._adapter_cache[adapter_id]
            found = self.registry.get(adapter_id)
            if found is None:
                return None
            record, state = found
            model = deepcopy(self.base_model)
            apply_lora(model, record.rank)
            load_lora_state(model, state)
            model.eval()
            self._adapter_cache[adapter_id] = model
            return model

    def finetune(self, payloads: list[bytes], images: torch.Tensor, rank: int,
                 steps: int, lr: float, seed: int) -> tuple[AdapterRecord, list[float]]:
        # One training job at a time; callers queue on the lock.
        with self._train_lock:
            model = deepcopy(self.base_model)
            params = apply_lora(model, rank)
            losses = train_denoiser(
                model, params, images, self.schedule, steps=steps, lr=lr,
                batch_size=self.config.finetune_batch_size, seed=seed,
                budget_seconds=self.config.finetune_budget_seconds)
            record = AdapterRecord(
                adapter_id=make_adapter_id(dataset_fingerprint(payloads), rank,
                                           steps, lr, seed),
                base_model_id=self.config.model_id,
                rank=rank,
                train_steps=len(losses),
                dataset_fingerprint=dataset_fingerprint(payloads),
            )
            self.registry.register(record, lora_state_dict(model))
            with self._cache_lock:
                model.eval()
                self._adapter_cache[record.adapter_id] = model
            return record, losses


# ---------------------------------------------------------------------------
# Request handling
# ---------------------------------------------------------------------------


def _decode_inpaint_request(body: dict) -> tuple[np.ndarray, np.ndarray, int, int]:
    image = decode_png_field(body.get("image_png_b64"), "image_png_b64")
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[0] != IMAGE_SIZE or image.shape[1] != IMAGE_SIZE:
        raise RequestError("image_png_b64",
                           f"toy model serves {IMAGE_SIZE}x{IMAGE_SIZE} images, "
                           f"got {image.shape[1]}x{image.shape[0]}")
    mask = decode_png_field(body.get("mask_png_b64"), "mask_png_b64")
    if mask.ndim != 2:
        raise RequestError("mask_png_b64", "must be a 1-channel PNG")
    if mask.shape != image.shape[:2]:
        raise RequestError("mask_png_b64", "dimensions do not match the image")
    if not np.isin(mask, (0, 255)).all():
        raise RequestError("mask_png_b64", "values must be exactly 0 or 255")
    num_samples = require_int(body, "num_samples", default=1, minimum=1)
    base_seed = require_int(body, "base_seed", default=0)
    if "prompt" in body and body["prompt"] is not None \
            and not isinstance(body["prompt"], str):
        raise RequestError("prompt", "must be a string")
    if "steps" in body and body["steps"] is not None:
        require_int(body, "steps", minimum=1)  # accepted as a hint, toy ignores
    return image, mask, num_samples, base_seed


def _run_inpaint(host: ModelHost, model: torch.nn.Module, body: dict) -> dict:
    image, mask, num_samples, base_seed = _decode_inpaint_request(body)
    grayscale = image.shape[2] == 1
    rgb = np.repeat(image, 3, axis=2) if grayscale else image
    known = uint8_to_tensor(rgb)[None]
    mask_t = torch.from_numpy((mask == 255).astype(np.float32))[None, None]
    samples = []
    # One reverse pass per sample: conv reductions are not bit-stable across
    # batch sizes, and sample i must be a function of seed base_seed+i only.
    for i in range(num_samples):
        generator = torch.Generator().manual_seed(base_seed + i)
        with torch.no_grad():
            recovered = inpaint(model, host.schedule, known, mask_t, [generator])
        arr = tensor_to_uint8(recovered[0])
        if grayscale:
            arr = np.round(arr.mean(axis=2)).astype(np.uint8)
        samples.append(encode_png(arr))
    return {"samples": samples, "backend_id": host.config.model_id}


def create_app(config: Optional[SidecarConfig] = None) -> FastAPI:
    config = config or SidecarConfig()
    host = ModelHost(config)
    app = FastAPI(title="inpaint-sidecar", version="0.1.0")
    app.state.host = host

    @app.exception_handler(RequestError)
    async def bad_request(request: Request, exc: RequestError):
        return JSONResponse(status_code=400,
                            content={"error": str(exc), "field": exc.field_name})

    @app.exception_handler(RuntimeError)
    async def model_failure(request: Request, exc: RuntimeError):
        if isinstance(exc, TrainingDiverged):
            return JSONResponse(status_code=500,
                                content={"error": f"training diverged: {exc}"})
        return JSONResponse(status_code=503, content={"error": str(exc)},
                            headers={"Retry-After": "5"})

    @app.get("/v1/health")
    async def health():
        return {"status": "ok"}

    @app.get("/adapters/{adapter_id}/v1/health")
    async def adapter_health(adapter_id: str):
        if host.model_for(adapter_id) is None:
            return JSONResponse(status_code=404,
                                content={"error": f"unknown adapter {adapter_id}"})
        return {"status": "ok"}

    @app.post("/v1/inpaint")
    def inpaint_route(body: dict):
        return _run_inpaint(host, host.base_model, body)

    @app.post("/adapters/{adapter_id}/v1/inpaint")
    def adapter_inpaint_route(adapter_id: str, body: dict):
        model = host.model_for(adapter_id)
        if model is None:
            return JSONResponse(status_code=404,
                                content={"error": f"unknown adapter {adapter_id}"})
        result = _run_inpaint(host, model, body)
        result["backend_id"] = f"{config.model_id}+{adapter_id}"
        return result

    @app.post("/v1/generate")
    def generate_route(body: dict):
        seed = require_int(body, "seed", default=0)
        width = require_int(body, "width", default=IMAGE_SIZE, minimum=1)
        height = require_int(body, "height", default=IMAGE_SIZE, minimum=1)
        if width != IMAGE_SIZE or height != IMAGE_SIZE:
            raise RequestError("width",
                               f"toy model generates {IMAGE_SIZE}x{IMAGE_SIZE} only")
        if "prompt" in body and body["prompt"] is not None \
                and not isinstance(body["prompt"], str):
            raise RequestError("prompt", "must be a string")
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            out = sample(host.base_model, host.schedule, 1, [generator])
        return {"image_png_b64": encode_png(tensor_to_uint8(out[0])),
                "backend_id": config.model_id}

    @app.post("/v1/caption")
    def caption_route(body: dict):
        image = decode_png_field(body.get("image_png_b64"), "image_png_b64")
        if image.ndim == 2:
            image = image[:, :, None]
        means = image.reshape(-1, image.shape[2]).mean(axis=0)
        rgb = tuple(int(round(v)) for v in (means if len(means) == 3 else [means[0]] * 3))
        smooth = float(np.abs(np.diff(image.astype(np.int16), axis=0)).mean())
        texture = "smooth" if smooth < 8 else "textured"
        return {"caption": f"{texture} toy scene, mean color rgb{rgb}"}

    @app.post("/v1/finetune")
    def finetune_route(body: dict):
        payload_list = body.get("images_png_b64")
        if not isinstance(payload_list, list):
            raise RequestError("images_png_b64", "must be a list of base64 PNGs")
        if len(payload_list) < 10:
            raise RequestError("images_png_b64",
                               f"need at least 10 images, got {len(payload_list)}")
        rank = require_int(body, "rank", default=4, minimum=1)
        steps = require_int(body, "steps", default=1000, minimum=0)
        lr = body.get("lr", 1e-4)
        if not isinstance(lr, (int, float)) or isinstance(lr, bool) or lr <= 0:
            raise RequestError("lr", "must be a positive number")
        seed = require_int(body, "seed", default=0)
        raw_payloads = []
        tensors = []
        for i, payload in enumerate(payload_list):
            arr = decode_png_field(payload, f"images_png_b64[{i}]")
            if arr.ndim == 2:
                arr = arr[:, :, None]
            if arr.shape[:2] != (IMAGE_SIZE, IMAGE_SIZE):
                raise RequestError(f"images_png_b64[{i}]",
                                   f"must be {IMAGE_SIZE}x{IMAGE_SIZE}")
            if arr.shape[2] == 1:
                arr = np.repeat(arr, 3, axis=2)
            raw_payloads.append(base64.b64decode(payload))
            tensors.append(uint8_to_tensor(arr))
        images = torch.stack(tensors)
        record, losses = host.finetune(raw_payloads, images, rank=rank,
                                       steps=steps, lr=float(lr), seed=seed)
        window = max(1, min(50, len(losses) // 4)) if losses else 1
        return {
            **record.to_dict(),
            "loss_first_window": float(np.mean(losses[:window])) if losses else None,
            "loss_last_window": float(np.mean(losses[-window:])) if losses else None,
        }

    return app


def build_default_app() -> FastAPI:
    return create_app(SidecarConfig())
