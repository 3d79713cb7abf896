"""On-disk parameter container.

Layout::

    u64 LE   manifest length in bytes
    bytes    manifest, UTF-8 JSON
    bytes    payload: float32 LE tensors concatenated in manifest order
    u64 LE   checksum (BLAKE2b, 8-byte digest) over everything above

Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .exceptions import BundleError, ValidationError

_U64 = struct.Struct("<Q")
_F32 = np.dtype("<f4")


def _checksum(data: bytes) -> int:
    return _U64.unpack(hashlib.blake2b(data, digest_size=8).digest())[0]


@dataclass
class ModelBundle:
    kind: str
    manifest: dict = field(default_factory=dict)
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @classmethod
    def from_module(cls, module: nn.Module, kind: str | None = None, **metadata) -> "ModelBundle":
        kind = kind or getattr(module, "kind")
        tensors = OrderedDict((k, v.detach().cpu().numpy().astype(_F32, copy=True))
                              for k, v in module.state_dict().items())
        manifest = {"kind": kind, "config": dict(getattr(module, "config", {}))}
        manifest.update(metadata)
        return cls(kind, manifest, tensors)

    def build(self) -> nn.Module:
        from .blocks import MotionCompensationNet
        from .filters import IfNet, MifNet
        from .rfs import RfsNet

        factories = {"mif": MifNet, "if": IfNet, "rfs": RfsNet, "mc": MotionCompensationNet}
        if self.kind not in factories:
            raise BundleError(f"unknown network kind {self.kind!r}")
        module = factories[self.kind](**self.manifest.get("config", {}))
        self.load_into(module)
        return module.eval()

    def load_into(self, module: nn.Module) -> None:
        state = module.state_dict()
        if set(state) != set(self.tensors):
            missing = sorted(set(state) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(state))
            raise BundleError(f"tensor names differ from the network: missing {missing[:3]}, extra {extra[:3]}")
        new = OrderedDict()
        for k, ref in state.items():
            arr = self.tensors[k]
            if tuple(arr.shape) != tuple(ref.shape):
                raise BundleError(f"tensor {k}: shape {arr.shape} != network {tuple(ref.shape)}")
            new[k] = torch.from_numpy(np.array(arr, dtype=_F32)).to(ref.dtype)
        module.load_state_dict(new)

    def to_bytes(self) -> bytes:
        manifest = dict(self.manifest)
        manifest["kind"] = self.kind
        manifest["tensors"] = [[k, list(v.shape)] for k, v in self.tensors.items()]
        head = json.dumps(manifest, sort_keys=True).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(v, dtype=_F32).tobytes() for v in self.tensors.values())
        body = _U64.pack(len(head)) + head + payload
        return body + _U64.pack(_checksum(body))

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "ModelBundle":
        if len(data) < 16:
            raise BundleError(f"{source}: truncated bundle ({len(data)} bytes)")
        body, tail = data[:-8], data[-8:]
        if _U64.unpack(tail)[0] != _checksum(body):
            raise BundleError(f"{source}: checksum mismatch")
        (n,) = _U64.unpack(body[:8])
        try:
            manifest = json.loads(body[8:8 + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BundleError(f"{source}: bad manifest ({exc})") from None
        payload = body[8 + n:]
        tensors = OrderedDict()
        offset = 0
        for name, shape in manifest.pop("tensors", []):
            count = int(np.prod(shape, dtype=np.int64))
            end = offset + count * _F32.itemsize
            if end > len(payload):
                raise BundleError(f"{source}: payload too short for tensor {name}")
            tensors[name] = np.frombuffer(payload[offset:end], dtype=_F32).reshape(shape).copy()
            offset = end
        if offset != len(payload):
            raise BundleError(f"{source}: {len(payload) - offset} trailing payload bytes")
        return cls(manifest.get("kind", ""), manifest, tensors)

    def save(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "ModelBundle":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"model bundle {path} does not exist")
        return cls.from_bytes(path.read_bytes(), str(path))

    def equals(self, other: "ModelBundle") -> bool:
        """Bit-exact comparison of tensors and manifests."""
        return self.to_bytes() == other.to_bytes()

    def same_parameters(self, other: "ModelBundle") -> bool:
        """Bit-exact comparison of the tensors alone."""
        return (list(self.tensors) == list(other.tensors)
                and all(self.tensors[k].tobytes() == other.tensors[k].tobytes() for k in self.tensors))
