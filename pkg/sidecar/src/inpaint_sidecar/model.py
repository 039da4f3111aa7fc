"""Tiny unconditional diffusion model with low-rank conv adapters.

The toy model works on 32x32 images in [-1, 1]: a small two-level UNet
predicts the noise added by a linear-beta forward process. Inpainting runs
the reverse process while re-projecting the known pixels to their correctly
noised values at every step, so the generated content stays conditioned on
the known region.

Low-rank adapters wrap every 3x3/4x4 conv: delta_W = B @ A reshaped to the
kernel, with B zero-initialized so a fresh adapter is exactly the identity.
Base weights stay frozen during fine-tuning; only A/B tensors train.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

IMAGE_SIZE = 32
CHANNELS = 3


class TrainingDiverged(RuntimeError):
    """Loss went non-finite during training."""


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / (half - 1)
        )
        args = t.float()[:, None] * freqs[None, :]
        return torch.cat([args.sin(), args.cos()], dim=-1)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(8, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.time_proj = nn.Linear(time_dim, cout)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        return F.silu(self.norm2(self.conv2(h)))


class TinyUNet(nn.Module):
    """Two-level UNet noise predictor, ~250k parameters."""

    def __init__(self, channels: int = CHANNELS, base: int = 24, time_dim: int = 64):
        super().__init__()
        self.time_embed = SinusoidalTimeEmbedding(time_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.enc1 = ConvBlock(channels, base, time_dim)
        self.down1 = nn.Conv2d(base, base, 4, stride=2, padding=1)
        self.enc2 = ConvBlock(base, base * 2, time_dim)
        self.down2 = nn.Conv2d(base * 2, base * 2, 4, stride=2, padding=1)
        self.mid = ConvBlock(base * 2, base * 2, time_dim)
        self.up1 = nn.ConvTranspose2d(base * 2, base * 2, 4, stride=2, padding=1)
        self.dec1 = ConvBlock(base * 4, base, time_dim)
        self.up2 = nn.ConvTranspose2d(base, base, 4, stride=2, padding=1)
        self.dec2 = ConvBlock(base * 2, base, time_dim)
        self.out = nn.Conv2d(base, channels, 1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(self.time_embed(t))
        e1 = self.enc1(x, temb)
        e2 = self.enc2(self.down1(e1), temb)
        m = self.mid(self.down2(e2), temb)
        d1 = self.dec1(torch.cat([self.up1(m), e2], dim=1), temb)
        d2 = self.dec2(torch.cat([self.up2(d1), e1], dim=1), temb)
        return self.out(d2)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta forward process with precomputed cumulative products."""

    timesteps: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alphabars: torch.Tensor

    @classmethod
    def linear(cls, timesteps: int = 100, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "DiffusionSchedule":
        betas = torch.linspace(beta_start, beta_end, timesteps)
        alphas = 1.0 - betas
        return cls(timesteps=timesteps, betas=betas, alphas=alphas,
                   alphabars=torch.cumprod(alphas, dim=0))

    def q_sample(self, x0: torch.Tensor, t: torch.Tensor,
                 noise: torch.Tensor) -> torch.Tensor:
        ab = self.alphabars[t][:, None, None, None]
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def _stacked_noise(shape, generators: Sequence[torch.Generator]) -> torch.Tensor:
    """Per-sample noise from independent generators, stacked into a batch.

    Keeps each sample's noise stream a function of its own seed only, so a
    sample is byte-identical whether it is generated alone or in a batch.
    """
    per = [torch.randn(shape[1:], generator=g) for g in generators]
    return torch.stack(per, dim=0)


@torch.no_grad()
def reverse_step(model: nn.Module, schedule: DiffusionSchedule, x: torch.Tensor,
                 t: int, noise: torch.Tensor) -> torch.Tensor:
    batch_t = torch.full((x.shape[0],), t, dtype=torch.long)
    eps = model(x, batch_t)
    beta = schedule.betas[t]
    alpha = schedule.alphas[t]
    ab = schedule.alphabars[t]
    mean = (x - beta / (1.0 - ab).sqrt() * eps) / alpha.sqrt()
    if t == 0:
        return mean
    ab_prev = schedule.alphabars[t - 1]
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return mean + var.sqrt() * noise


@torch.no_grad()
def sample(model: nn.Module, schedule: DiffusionSchedule, n: int,
           generators: Sequence[torch.Generator],
           size: int = IMAGE_SIZE, channels: int = CHANNELS) -> torch.Tensor:
    """Unconditional ancestral sampling; one generator per batch item."""
    assert len(generators) == n
    model.eval()
    shape = (n, channels, size, size)
    x = _stacked_noise(shape, generators)
    for t in range(schedule.timesteps - 1, -1, -1):
        noise = _stacked_noise(shape, generators) if t > 0 else torch.zeros(shape)
        x = reverse_step(model, schedule, x, t, noise)
    return x.clamp(-1.0, 1.0)


@torch.no_grad()
def inpaint(model: nn.Module, schedule: DiffusionSchedule, known: torch.Tensor,
            mask: torch.Tensor,
            generators: Sequence[torch.Generator]) -> torch.Tensor:
    """Recover masked content conditioned on the known pixels.

    known: (B, C, H, W) in [-1, 1]; mask: (B, 1, H, W) with 1 = unknown.
    After every reverse step the known region is replaced by the original
    pixels noised to the matching timestep; the final step restores them
    exactly.
    """
    n = known.shape[0]
    assert len(generators) == n
    model.eval()
    shape = known.shape
    x = _stacked_noise(shape, generators)
    for t in range(schedule.timesteps - 1, -1, -1):
        noise = _stacked_noise(shape, generators) if t > 0 else torch.zeros(shape)
        x = reverse_step(model, schedule, x, t, noise)
        if t > 0:
            t_prev = torch.full((n,), t - 1, dtype=torch.long)
            known_noised = schedule.q_sample(known, t_prev,
                                             _stacked_noise(shape, generators))
            x = mask * x + (1.0 - mask) * known_noised
        else:
            x = mask * x + (1.0 - mask) * known
    return x.clamp(-1.0, 1.0)


# ---------------------------------------------------------------------------
# Low-rank adapters
# ---------------------------------------------------------------------------


class LoRAConv2d(nn.Module):
    """Frozen conv plus a trainable low-rank weight delta (B @ A)."""

    def __init__(self, conv: nn.Conv2d, rank: int, init_std: float = 0.01):
        super().__init__()
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.conv = conv
        for p in self.conv.parameters():
            p.requires_grad_(False)
        out_ch, in_ch, kh, kw = conv.weight.shape
        self.rank = rank
        self.lora_a = nn.Parameter(torch.randn(rank, in_ch * kh * kw) * init_std)
        self.lora_b = nn.Parameter(torch.zeros(out_ch, rank))

    def delta_weight(self) -> torch.Tensor:
        return (self.lora_b @ self.lora_a).view_as(self.conv.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        weight = self.conv.weight + self.delta_weight()
        return F.conv2d(x, weight, self.conv.bias, stride=self.conv.stride,
                        padding=self.conv.padding, dilation=self.conv.dilation,
                        groups=self.conv.groups)


def apply_lora(model: nn.Module, rank: int) -> list[nn.Parameter]:
    """Freeze the model and wrap every plain Conv2d; returns adapter params.

    Transposed convs are left untouched; the 3x3/4x4 convs carry almost all
    of the capacity. Fresh adapters are exact identities (B = 0), and after
    this call the adapter tensors are the only trainable parameters.
    """
    for p in model.parameters():
        p.requires_grad_(False)
    params: list[nn.Parameter] = []
    for module in list(model.modules()):
        for name, child in list(module.named_children()):
            if isinstance(child, nn.Conv2d) and not isinstance(child, LoRAConv2d):
                wrapped = LoRAConv2d(child, rank)
                setattr(module, name, wrapped)
                params.extend([wrapped.lora_a, wrapped.lora_b])
    return params


def lora_state_dict(model: nn.Module) -> dict:
    return {k: v for k, v in model.state_dict().items()
            if "lora_a" in k or "lora_b" in k}


def load_lora_state(model: nn.Module, state: dict) -> None:
    missing, unexpected = model.load_state_dict(state, strict=False)
    if unexpected:
        raise ValueError(f"unexpected adapter keys: {unexpected[:3]}")


def base_weight_checksum(model: nn.Module) -> str:
    """Hash of every non-adapter tensor; fine-tuning must not move these.

    Wrapping a conv shifts its state-dict key from x.weight to x.conv.weight,
    so keys are normalized back before hashing: the checksum is comparable
    across the plain and adapter-wrapped forms of the same weights.
    """
    import hashlib

    state = {}
    for key, tensor in model.state_dict().items():
        if "lora_a" in key or "lora_b" in key:
            continue
        norm = key.replace(".conv.weight", ".weight").replace(".conv.bias", ".bias")
        state[norm] = tensor
    h = hashlib.sha256()
    for key in sorted(state):
        h.update(key.encode())
        h.update(state[key].numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_denoiser(model: nn.Module, params, images: torch.Tensor,
                   schedule: DiffusionSchedule, steps: int, lr: float,
                   batch_size: int = 32, seed: int = 0,
                   budget_seconds: Optional[float] = None,
                   log_every: int = 50) -> list[float]:
    """Standard denoising objective over the given images.

    Optimizes exactly the tensors in `params` (pass adapter params for
    fine-tuning, model.parameters() for pretraining). Returns the per-step
    loss trace; raises TrainingDiverged on non-finite loss. Stops early if
    the wall-clock budget runs out, returning the steps completed so far.
    """
    generator = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(params, lr=lr)
    losses: list[float] = []
    started = time.monotonic()
    model.train()
    for step in range(steps):
        if budget_seconds is not None and time.monotonic() - started > budget_seconds:
            break
        idx = torch.randint(0, images.shape[0], (batch_size,), generator=generator)
        x0 = images[idx]
        t = torch.randint(0, schedule.timesteps, (batch_size,), generator=generator)
        noise = torch.randn(x0.shape, generator=generator)
        xt = schedule.q_sample(x0, t, noise)
        loss = F.mse_loss(model(xt, t), noise)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    return losses
