"""Synthetic 32x32 image families for the toy model.

Three visually distinct distributions:
  * gradient_batch -- smooth linear color ramps; the base checkpoint's
    training world.
  * cosine_batch   -- low-frequency 2-D cosine fields; stands in for an
    unfamiliar target model's output distribution.
  * blocky_batch   -- piecewise-constant 4x4 color blocks; stands in for
    out-of-distribution "real" content.

All tensors are (n, 3, 32, 32) in [-1, 1] and fully determined by the
generator passed in.
"""

from __future__ import annotations

import numpy as np
import torch

from .model import IMAGE_SIZE


def _coords(size: int):
    ys = torch.linspace(0.0, 1.0, size)[:, None].expand(size, size)
    xs = torch.linspace(0.0, 1.0, size)[None, :].expand(size, size)
    return ys, xs


def gradient_batch(n: int, generator: torch.Generator,
                   size: int = IMAGE_SIZE) -> torch.Tensor:
    ys, xs = _coords(size)
    out = torch.empty(n, 3, size, size)
    for i in range(n):
        for c in range(3):
            a = torch.rand(1, generator=generator) * 2 - 1
            by = torch.rand(1, generator=generator) * 2 - 1
            bx = torch.rand(1, generator=generator) * 2 - 1
            field = a + by * (ys * 2 - 1) + bx * (xs * 2 - 1)
            out[i, c] = field
    return out.clamp(-1.0, 1.0)


def cosine_batch(n: int, generator: torch.Generator,
                 size: int = IMAGE_SIZE) -> torch.Tensor:
    ys, xs = _coords(size)
    out = torch.empty(n, 3, size, size)
    for i in range(n):
        fy = 1.0 + 2.0 * torch.rand(1, generator=generator)
        fx = 1.0 + 2.0 * torch.rand(1, generator=generator)
        phase = torch.rand(1, generator=generator) * 2 * torch.pi
        field = torch.cos(2 * torch.pi * (fy * ys + fx * xs) + phase)
        for c in range(3):
            gain = 0.5 + 0.5 * torch.rand(1, generator=generator)
            offset = (torch.rand(1, generator=generator) - 0.5) * 0.6
            out[i, c] = gain * field + offset
    return out.clamp(-1.0, 1.0)


def blocky_batch(n: int, generator: torch.Generator, size: int = IMAGE_SIZE,
                 block: int = 4) -> torch.Tensor:
    cells = size // block
    coarse = torch.rand(n, 3, cells, cells, generator=generator) * 2 - 1
    return coarse.repeat_interleave(block, dim=2).repeat_interleave(block, dim=3)


def tensor_to_uint8(x: torch.Tensor) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W, C) uint8."""
    arr = ((x.clamp(-1, 1) + 1.0) * 127.5).round().clamp(0, 255)
    return arr.permute(1, 2, 0).numpy().astype(np.uint8)


def uint8_to_tensor(arr: np.ndarray) -> torch.Tensor:
    """(H, W, C) uint8 -> (C, H, W) in [-1, 1]."""
    t = torch.from_numpy(arr.copy()).float()  # PIL arrays are read-only
    return (t / 127.5 - 1.0).permute(2, 0, 1)
