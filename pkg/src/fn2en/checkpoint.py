"""FN2E binary checkpoints: named float32 tensors plus a JSON architecture descriptor.

Layout (all integers little-endian)::

    b"FN2E" | u32 version=1 | u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f32 payload
    u32 descriptor length | UTF-8 descriptor
"""
from __future__ import annotations

import json
import struct
import warnings
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn import Network, TeacherNet, layer_param_shapes

MAGIC = b"FN2E"
VERSION = 1
STATE_PREFIX = "state/"


def write_checkpoint(path, tensors, descriptor):
    """Serialise ``{name: array}`` and a JSON-able descriptor."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    desc = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(desc)) + desc)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n, what):
        if n < 0 or self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path):
    """Return ``(tensors, descriptor)``; raises :class:`FormatError` on any corruption."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(blob, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: not an FN2E checkpoint (bad magic)")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        try:
            name = r.take(n, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: tensor name is not UTF-8") from exc
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        size = 1
        for d in dims:
            size *= d
        if size * 4 > len(blob) - r.pos:
            raise FormatError(f"{path}: dims {dims} of {name!r} overflow the remaining payload")
        tensors[name] = np.frombuffer(r.take(size * 4, name), dtype="<f4").reshape(dims).astype(np.float32)
    (n,) = r.unpack("<I", "descriptor length")
    try:
        descriptor = json.loads(r.take(n, "descriptor").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable architecture descriptor") from exc
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return tensors, descriptor


def save_network(net, path, provenance=None, extra=None):
    """Write ``net`` (and optional ``state/``-prefixed extras) to ``path``."""
    tensors = {name: t.data for name, t in net.params.items()}
    for name, arr in (extra or {}).items():
        tensors[STATE_PREFIX + name] = arr
    descriptor = {"network": net.descriptor(), "provenance": dict(provenance or {})}
    descriptor["provenance"].setdefault("arch_hash", net.architecture_hash())
    write_checkpoint(path, tensors, descriptor)


def load_network(path, trainable=True):
    """Return ``(network, provenance, extras)``.  Unknown tensors are ignored with a warning."""
    tensors, descriptor = read_checkpoint(path)
    if "network" not in descriptor:
        raise FormatError(f"{path}: descriptor lacks a network section")
    desc = descriptor["network"]
    expected = {f"{layer['name']}.{p}" for layer in desc["layers"] for p in layer_param_shapes(layer)}
    extras = {k[len(STATE_PREFIX):]: v for k, v in tensors.items() if k.startswith(STATE_PREFIX)}
    unknown = sorted(k for k in tensors if k not in expected and not k.startswith(STATE_PREFIX))
    if unknown:
        warnings.warn(f"{path}: ignoring unknown tensors {unknown}", stacklevel=2)
    net = Network.from_descriptor(desc, tensors, trainable=trainable)
    return net, descriptor.get("provenance", {}), extras


def load_teacher(path):
    net, _, _ = load_network(path, trainable=False)
    return TeacherNet(net)
