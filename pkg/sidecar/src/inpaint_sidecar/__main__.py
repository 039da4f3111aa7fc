"""Run the sidecar: python -m inpaint_sidecar [--port 8484] [--toy]"""

import argparse
from pathlib import Path

import uvicorn

from .server import DEFAULT_CHECKPOINT, SidecarConfig, create_app


def main():
    parser = argparse.ArgumentParser(description="inpainting sidecar server")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8484)
    parser.add_argument("--toy", action="store_true", default=True,
                        help="serve the bundled 32x32 toy checkpoint (default)")
    parser.add_argument("--checkpoint", type=Path, default=DEFAULT_CHECKPOINT)
    parser.add_argument("--adapter-dir", type=Path, default=Path("adapters"))
    parser.add_argument("--no-deterministic", action="store_true",
                        help="allow multithreaded sampling (faster, not byte-stable)")
    args = parser.parse_args()

    config = SidecarConfig(checkpoint=args.checkpoint,
                           adapter_dir=args.adapter_dir,
                           deterministic=not args.no_deterministic)
    uvicorn.run(create_app(config), host=args.host, port=args.port)


if __name__ == "__main__":
    main()
