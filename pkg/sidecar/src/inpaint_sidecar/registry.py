"""On-disk adapter store, keyed by adapter_id.

Each adapter is a pair of files: <id>.json (the record) and <id>.pt (the
low-rank tensors). Access is serialized with a lock so the single training
job and concurrent inference never see a half-written adapter.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch


@dataclass(frozen=True)
class AdapterRecord:
    adapter_id: str
    base_model_id: str
    rank: int
    train_steps: int
    dataset_fingerprint: str

    def to_dict(self) -> dict:
        return asdict(self)


def dataset_fingerprint(image_payloads: list[bytes]) -> str:
    """Order-independent hash of the training images."""
    digests = sorted(hashlib.sha256(p).hexdigest() for p in image_payloads)
    h = hashlib.sha256()
    for d in digests:
        h.update(d.encode())
    return h.hexdigest()


def make_adapter_id(fingerprint: str, rank: int, steps: int, lr: float,
                    seed: int) -> str:
    salt = hashlib.sha256(f"{fingerprint}:{rank}:{steps}:{lr}:{seed}".encode())
    return f"ada-{salt.hexdigest()[:12]}"


class AdapterRegistry:
    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()

    def register(self, record: AdapterRecord, state: dict) -> None:
        with self._lock:
            torch.save(state, self.directory / f"{record.adapter_id}.pt")
            (self.directory / f"{record.adapter_id}.json").write_text(
                json.dumps(record.to_dict(), indent=2) + "\n", encoding="utf-8")

    def get(self, adapter_id: str) -> Optional[tuple[AdapterRecord, dict]]:
        with self._lock:
            meta = self.directory / f"{adapter_id}.json"
            weights = self.directory / f"{adapter_id}.pt"
            if not meta.exists() or not weights.exists():
                return None
            record = AdapterRecord(**json.loads(meta.read_text(encoding="utf-8")))
            state = torch.load(weights, weights_only=True)
            return record, state

    def ids(self) -> list[str]:
        with self._lock:
            return sorted(p.stem for p in self.directory.glob("*.json"))
