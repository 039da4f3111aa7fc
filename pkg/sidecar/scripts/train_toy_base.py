#!/usr/bin/env python3
"""Pretrain the bundled toy checkpoint on the gradient image family.

Regenerates src/inpaint_sidecar/assets/toy_base.pt deterministically; takes
a few minutes on CPU. The served base model is intentionally narrow: it
knows smooth color ramps and nothing else, which is what makes the
alignment experiments meaningful.

Usage: python scripts/train_toy_base.py [--steps 3000] [--out <path>]
"""

import argparse
from pathlib import Path

import torch

from inpaint_sidecar.data import gradient_batch
from inpaint_sidecar.model import DiffusionSchedule, TinyUNet, train_denoiser

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "inpaint_sidecar" \
    / "assets" / "toy_base.pt"


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=3000)
    parser.add_argument("--lr", type=float, default=2e-3)
    parser.add_argument("--n-train", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = parser.parse_args()

    torch.manual_seed(args.seed)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    generator = torch.Generator().manual_seed(args.seed)
    images = gradient_batch(args.n_train, generator)

    model = TinyUNet()
    n_params = sum(p.numel() for p in model.parameters())
    print(f"model parameters: {n_params}")
    schedule = DiffusionSchedule.linear()
    losses = train_denoiser(model, model.parameters(), images, schedule,
                            steps=args.steps, lr=args.lr, seed=args.seed)
    window = max(1, args.steps // 20)
    print(f"loss: first window {sum(losses[:window]) / window:.4f} "
          f"-> last window {sum(losses[-window:]) / window:.4f}")

    args.out.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), args.out)
    print(f"saved {args.out}")


if __name__ == "__main__":
    main()
