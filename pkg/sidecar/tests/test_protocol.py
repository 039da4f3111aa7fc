"""Wire-protocol conformance: golden schemas, determinism, error shapes."""

import base64
import io
import json
import threading
import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from conftest import right_half_mask

GOLDEN = Path(__file__).parent / "golden"
PAYLOAD_MARK = "<PNG_B64>"


def png_b64(arr: np.ndarray, mode=None) -> str:
    if mode is None:
        mode = "L" if arr.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def b64_pixels(payload: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(payload))) as im:
        return np.asarray(im, dtype=np.uint8)


def fixture_image(seed=0, size=32) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (size, size, 3), dtype=np.uint8)


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def elide_payloads(obj, keys=("image_png_b64", "mask_png_b64", "samples")):
    out = dict(obj)
    for key in keys:
        if key not in out:
            continue
        if isinstance(out[key], list):
            out[key] = [PAYLOAD_MARK for _ in out[key]]
        else:
            out[key] = PAYLOAD_MARK
    return out


def load_golden(name: str) -> tuple[dict, str]:
    raw = (GOLDEN / f"{name}.json").read_text(encoding="utf-8")
    return json.loads(raw), raw


def make_inpaint_body(image=None, mask=None, **overrides):
    body, _ = load_golden("inpaint_request")
    body["image_png_b64"] = png_b64(fixture_image() if image is None else image)
    body["mask_png_b64"] = png_b64(right_half_mask() if mask is None else mask)
    body.update(overrides)
    return body


class TestGoldenSchemas:
    def test_health_bitwise(self, client):
        resp = client.get("/v1/health")
        assert resp.status_code == 200
        _, raw = load_golden("health_response")
        assert canonical(resp.json()) == raw

    def test_inpaint_request_response_bitwise_excluding_payloads(self, client):
        body = make_inpaint_body()
        request_golden, raw_request = load_golden("inpaint_request")
        assert canonical(elide_payloads(body)) == raw_request
        resp = client.post("/v1/inpaint", json=body)
        assert resp.status_code == 200
        _, raw_response = load_golden("inpaint_response")
        assert canonical(elide_payloads(resp.json())) == raw_response

    def test_generate_request_response_bitwise_excluding_payloads(self, client):
        body, raw_request = load_golden("generate_request")
        assert canonical(body) == raw_request
        resp = client.post("/v1/generate", json=body)
        assert resp.status_code == 200
        _, raw_response = load_golden("generate_response")
        assert canonical(elide_payloads(resp.json())) == raw_response


class TestInpaintSemantics:
    def test_deterministic_byte_equality(self, client):
        body = make_inpaint_body(num_samples=1, base_seed=11)
        first = client.post("/v1/inpaint", json=body).json()
        second = client.post("/v1/inpaint", json=body).json()
        assert first["samples"] == second["samples"]

    def test_seed_fanout_matches_batched(self, client):
        batched = client.post("/v1/inpaint",
                              json=make_inpaint_body(num_samples=2,
                                                     base_seed=40)).json()
        single0 = client.post("/v1/inpaint",
                              json=make_inpaint_body(num_samples=1,
                                                     base_seed=40)).json()
        single1 = client.post("/v1/inpaint",
                              json=make_inpaint_body(num_samples=1,
                                                     base_seed=41)).json()
        assert batched["samples"][0] == single0["samples"][0]
        assert batched["samples"][1] == single1["samples"][0]

    def test_different_seeds_differ(self, client):
        a = client.post("/v1/inpaint",
                        json=make_inpaint_body(num_samples=1, base_seed=1)).json()
        b = client.post("/v1/inpaint",
                        json=make_inpaint_body(num_samples=1, base_seed=2)).json()
        assert a["samples"][0] != b["samples"][0]

    def test_all_zero_mask_returns_known_pixels_exactly(self, client):
        image = fixture_image(seed=5)
        mask = np.zeros((32, 32), dtype=np.uint8)
        resp = client.post("/v1/inpaint",
                           json=make_inpaint_body(image=image, mask=mask,
                                                  num_samples=1)).json()
        assert np.array_equal(b64_pixels(resp["samples"][0]), image)

    def test_known_region_preserved_under_real_mask(self, client):
        image = fixture_image(seed=6)
        mask = right_half_mask()
        resp = client.post("/v1/inpaint",
                           json=make_inpaint_body(image=image, mask=mask,
                                                  num_samples=1)).json()
        out = b64_pixels(resp["samples"][0])
        known = mask == 0
        assert np.array_equal(out[known], image[known])
        assert not np.array_equal(out[~known], image[~known])

    def test_grayscale_roundtrip(self, client):
        gray = np.asarray(fixture_image(seed=7)).mean(axis=2).astype(np.uint8)
        resp = client.post("/v1/inpaint",
                           json=make_inpaint_body(image=gray, num_samples=1))
        assert resp.status_code == 200
        out = b64_pixels(resp.json()["samples"][0])
        assert out.ndim == 2 and out.shape == (32, 32)


class TestInpaintValidation:
    @pytest.mark.parametrize("mutate,field", [
        (lambda b: b.pop("image_png_b64"), "image_png_b64"),
        (lambda b: b.update(image_png_b64="@@not-base64@@"), "image_png_b64"),
        (lambda b: b.update(num_samples=0), "num_samples"),
        (lambda b: b.update(num_samples="three"), "num_samples"),
        (lambda b: b.update(base_seed="x"), "base_seed"),
        (lambda b: b.update(prompt=17), "prompt"),
        (lambda b: b.update(steps=0), "steps"),
    ])
    def test_400_names_the_field(self, client, mutate, field):
        body = make_inpaint_body()
        mutate(body)
        resp = client.post("/v1/inpaint", json=body)
        assert resp.status_code == 400
        assert resp.json()["field"] == field
        assert field in resp.json()["error"]

    def test_wrong_image_size_rejected(self, client):
        resp = client.post("/v1/inpaint",
                           json=make_inpaint_body(image=fixture_image(size=16)))
        assert resp.status_code == 400
        assert resp.json()["field"] == "image_png_b64"

    def test_mask_dimension_mismatch_rejected(self, client):
        mask = np.zeros((16, 16), dtype=np.uint8)
        resp = client.post("/v1/inpaint", json=make_inpaint_body(mask=mask))
        assert resp.status_code == 400
        assert resp.json()["field"] == "mask_png_b64"

    def test_non_binary_mask_rejected(self, client):
        mask = np.full((32, 32), 128, dtype=np.uint8)
        resp = client.post("/v1/inpaint", json=make_inpaint_body(mask=mask))
        assert resp.status_code == 400
        assert resp.json()["field"] == "mask_png_b64"


class TestGenerate:
    def test_deterministic_and_32x32(self, client):
        body = {"prompt": "", "seed": 9, "width": 32, "height": 32}
        a = client.post("/v1/generate", json=body).json()
        b = client.post("/v1/generate", json=body).json()
        assert a["image_png_b64"] == b["image_png_b64"]
        assert b64_pixels(a["image_png_b64"]).shape == (32, 32, 3)

    def test_unsupported_size_rejected(self, client):
        resp = client.post("/v1/generate",
                           json={"prompt": "", "seed": 0, "width": 64, "height": 64})
        assert resp.status_code == 400
        assert resp.json()["field"] == "width"


class TestCaption:
    def test_deterministic_descriptive_caption(self, client):
        body = {"image_png_b64": png_b64(fixture_image(seed=3))}
        a = client.post("/v1/caption", json=body).json()
        b = client.post("/v1/caption", json=body).json()
        assert a == b
        assert "rgb" in a["caption"]

    def test_missing_image_rejected(self, client):
        resp = client.post("/v1/caption", json={})
        assert resp.status_code == 400
        assert resp.json()["field"] == "image_png_b64"


def finetune_body(n_images=12, steps=0, seed=0, family_seed=0, **overrides):
    rng = np.random.default_rng(family_seed)
    images = [png_b64(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
              for _ in range(n_images)]
    body = {"images_png_b64": images, "rank": 4, "steps": steps,
            "lr": 1e-3, "seed": seed}
    body.update(overrides)
    return body


class TestFinetune:
    def test_small_dataset_rejected(self, client):
        resp = client.post("/v1/finetune", json=finetune_body(n_images=9))
        assert resp.status_code == 400
        assert resp.json()["field"] == "images_png_b64"

    def test_bad_lr_rejected(self, client):
        resp = client.post("/v1/finetune", json=finetune_body(lr=-1.0))
        assert resp.status_code == 400
        assert resp.json()["field"] == "lr"

    def test_record_schema(self, client):
        resp = client.post("/v1/finetune", json=finetune_body(steps=0))
        assert resp.status_code == 200
        record = resp.json()
        assert set(record) >= {"adapter_id", "base_model_id", "rank",
                               "train_steps", "dataset_fingerprint"}
        assert record["base_model_id"] == "toy-diffusion-v1"
        assert record["rank"] == 4
        assert record["train_steps"] == 0
        assert len(record["dataset_fingerprint"]) == 64

    def test_steps_zero_adapter_is_identity(self, client):
        record = client.post("/v1/finetune",
                             json=finetune_body(steps=0, seed=123)).json()
        adapter_id = record["adapter_id"]
        body = make_inpaint_body(num_samples=1, base_seed=17)
        base = client.post("/v1/inpaint", json=body).json()
        adapted = client.post(f"/adapters/{adapter_id}/v1/inpaint", json=body).json()
        assert adapted["samples"] == base["samples"]
        assert adapted["backend_id"] == f"toy-diffusion-v1+{adapter_id}"

    def test_adapter_routes(self, client):
        record = client.post("/v1/finetune",
                             json=finetune_body(steps=0, seed=321)).json()
        ok = client.get(f"/adapters/{record['adapter_id']}/v1/health")
        assert ok.status_code == 200 and ok.json() == {"status": "ok"}
        missing = client.get("/adapters/ada-nope/v1/health")
        assert missing.status_code == 404
        gone = client.post("/adapters/ada-nope/v1/inpaint",
                           json=make_inpaint_body(num_samples=1))
        assert gone.status_code == 404

    def test_inference_serves_while_training(self, client):
        done = {}

        def train():
            done["record"] = client.post(
                "/v1/finetune", json=finetune_body(steps=10, seed=777)).json()

        t = threading.Thread(target=train)
        t.start()
        time.sleep(0.3)
        resp = client.post("/v1/inpaint", json=make_inpaint_body(num_samples=1))
        assert resp.status_code == 200
        t.join(timeout=120)
        assert "adapter_id" in done["record"]


class TestRealSocket:
    def test_uvicorn_serves_the_protocol(self, app):
        import socket

        import httpx
        import uvicorn

        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error")
        server = uvicorn.Server(config)
        thread = threading.Thread(target=server.run, daemon=True)
        thread.start()
        try:
            for _ in range(100):
                if server.started:
                    break
                time.sleep(0.05)
            assert server.started
            with httpx.Client(timeout=60.0) as http:
                health = http.get(f"http://127.0.0.1:{port}/v1/health")
                assert health.json() == {"status": "ok"}
                resp = http.post(f"http://127.0.0.1:{port}/v1/inpaint",
                                 json=make_inpaint_body(num_samples=1))
                assert resp.status_code == 200
                assert len(resp.json()["samples"]) == 1
        finally:
            server.should_exit = True
            thread.join(timeout=10)
