"""Reference inpainting/generation/fine-tuning endpoint server.

Serves a tiny unconditional diffusion model behind the detection toolkit's
wire protocol so the whole corrupt-and-recover loop, including low-rank
distribution alignment, runs on CPU with no external downloads.
"""

from .model import (
    DiffusionSchedule,
    LoRAConv2d,
    TinyUNet,
    apply_lora,
    base_weight_checksum,
    inpaint,
    sample,
    train_denoiser,
)
from .registry import AdapterRecord, AdapterRegistry
from .server import SidecarConfig, create_app

__version__ = "0.1.0"
