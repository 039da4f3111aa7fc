"""Sidecar fixtures: app + client over the bundled toy checkpoint."""

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient

from inpaint_sidecar.server import SidecarConfig, create_app


@pytest.fixture(scope="session")
def app(tmp_path_factory):
    config = SidecarConfig(adapter_dir=tmp_path_factory.mktemp("adapters"))
    return create_app(config)


@pytest.fixture(scope="session")
def client(app):
    with TestClient(app) as c:
        yield c


@pytest.fixture(scope="session")
def host(app):
    return app.state.host


def right_half_mask(size=32) -> np.ndarray:
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[:, size // 2:] = 255
    return mask


def masked_region_psnr(original: np.ndarray, recovered: np.ndarray,
                       mask255: np.ndarray) -> float:
    sel = mask255 == 255
    a = original.astype(np.float64)[sel]
    b = recovered.astype(np.float64)[sel]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 100.0
    return min(10.0 * np.log10(255.0**2 / mse), 100.0)
