"""Tensor container shared by base and adapter checkpoints.

A checkpoint is a directory with ``manifest.json`` and ``weights.bin``.
``weights.bin`` concatenates row-major little-endian float32 tensors; the
manifest lists each tensor's name, shape, byte offset and dtype (``"f32le"``)
along with free-form metadata (network spec, adapter config, ...).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch
from torch import Tensor, nn

from .adapters import AdapterConfig, adapter_state_dict, attach_adapters, load_adapter_state_dict
from .backbones import NetworkSpec, SegmentationUnet, build_network

__all__ = [
    "CheckpointError",
    "save_tensors",
    "load_tensors",
    "Checkpoint",
    "AdapterCheckpoint",
    "fingerprint",
]

FORMAT = "segadapt-container/1"
DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def fingerprint(tensors: Dict[str, Tensor]) -> str:
    """SHA-256 over names, shapes and float32 bytes, in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy(), dtype=DTYPE)
        h.update(name.encode())
        h.update(json.dumps(list(arr.shape)).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_tensors(path, tensors: Dict[str, Tensor], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy(), dtype=DTYPE)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw), "dtype": "f32le"})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "tensors": entries}
    manifest.update(meta or {})
    tmp = path / "weights.bin.tmp"
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path / "weights.bin")
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_tensors(path):
    """Return ``(tensors, manifest)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "weights.bin").read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"{path}: {e.strerror}: {e.filename}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown container format {manifest.get('format')!r}")
    tensors = {}
    for e in manifest["tensors"]:
        if e.get("dtype") != "f32le":
            raise CheckpointError(f"{e['name']}: unsupported dtype {e.get('dtype')}")
        n = int(np.prod(e["shape"], dtype=np.int64)) * DTYPE.itemsize
        start = int(e["offset"])
        if start + n > len(blob):
            raise CheckpointError(f"{path}: weights.bin too short for {e['name']}")
        arr = np.frombuffer(blob, dtype=DTYPE, count=n // DTYPE.itemsize, offset=start)
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    return tensors, manifest


@dataclass
class Checkpoint:
    """Full network weights plus the ``NetworkSpec`` needed to rebuild it."""

    spec: NetworkSpec
    tensors: Dict[str, Tensor]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: SegmentationUnet, **meta) -> "Checkpoint":
        tensors = {k: v.detach().clone() for k, v in net.state_dict().items()}
        return cls(net.spec, tensors, dict(meta))

    def build(self) -> SegmentationUnet:
        net = build_network(NetworkSpec.from_dict(self.spec.to_dict()))
        try:
            net.load_state_dict(self.tensors)
        except RuntimeError as e:
            raise CheckpointError(f"checkpoint does not match its network spec: {e}") from None
        return net

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.tensors)

    def save(self, path) -> Path:
        meta = {"kind": "base", "network": self.spec.to_dict(), "meta": self.meta}
        return save_tensors(path, self.tensors, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, manifest = load_tensors(path)
        if manifest.get("kind") != "base":
            raise CheckpointError(f"{path} is not a base checkpoint (kind={manifest.get('kind')!r})")
        return cls(NetworkSpec.from_dict(manifest["network"]), tensors, manifest.get("meta", {}))


@dataclass
class AdapterCheckpoint:
    """Adapter tensors for every convolution of one base network.

    ``base_fingerprint`` ties the adapter to the exact base weights it was
    trained against.
    """

    config: AdapterConfig
    spec: NetworkSpec
    tensors: Dict[str, Tensor]
    base_fingerprint: str
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: nn.Module, config: AdapterConfig, base: Checkpoint, seed: int = 0, **meta):
        return cls(config, base.spec, adapter_state_dict(net), base.fingerprint, seed, dict(meta))

    def check_base(self, base: Checkpoint) -> None:
        if base.spec.to_dict() != self.spec.to_dict():
            raise CheckpointError("adapter was built for a different network spec")
        if base.fingerprint != self.base_fingerprint:
            raise CheckpointError("adapter was trained against different base weights")

    def attach(self, base: Checkpoint) -> SegmentationUnet:
        """Rebuild ``base`` and attach these adapters to it."""
        self.check_base(base)
        net = base.build()
        attach_adapters(net, self.config, seed=self.seed)
        try:
            load_adapter_state_dict(net, self.tensors)
        except ValueError as e:
            raise CheckpointError(str(e)) from None
        return net

    def save(self, path) -> Path:
        meta = {
            "kind": "adapter",
            "method": self.config.method.value,
            "rank": self.config.rank,
            "alpha": float(self.config.alpha),
            "adapter": self.config.to_dict(),
            "network": self.spec.to_dict(),
            "base_fingerprint": self.base_fingerprint,
            "seed": self.seed,
            "meta": self.meta,
        }
        return save_tensors(path, self.tensors, meta)

    @classmethod
    def load(cls, path) -> "AdapterCheckpoint":
        tensors, manifest = load_tensors(path)
        if manifest.get("kind") != "adapter":
            raise CheckpointError(f"{path} is not an adapter checkpoint (kind={manifest.get('kind')!r})")
        return cls(
            AdapterConfig.from_dict(manifest["adapter"]),
            NetworkSpec.from_dict(manifest["network"]),
            tensors,
            manifest["base_fingerprint"],
            manifest.get("seed", 0),
            manifest.get("meta", {}),
        )
