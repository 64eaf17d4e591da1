"""Binary checkpoint format for train states.

Layout (all integers little-endian):

    magic            4 bytes  b"FDST"
    version          u32      currently 1
    config echo      u32 length + UTF-8 JSON of the run config
    iteration        u64
    network count    u32
    per network:
        name         u32 length + UTF-8
        widths       u32 count + u32 each
        param count  u64
        params       f64[param count]
        adam state   u64 step; f64 lr, beta1, beta2, eps, weight_decay;
                     f64[param count] m; f64[param count] v
    checksum         u64 FNV-1a over every preceding byte

Round trips are bitwise lossless; loads reject bad magic, unknown versions,
truncation, and checksum mismatches.
"""

import json
import struct

import numpy as np

from .errors import CheckpointError
from .nets import AdamState

__all__ = ["MAGIC", "VERSION", "NetworkPayload", "save_checkpoint", "load_checkpoint"]

MAGIC = b"FDST"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


class NetworkPayload:
    """Name, layer widths, flat parameters, and optimizer state of one net."""

    def __init__(self, name: str, widths, params: np.ndarray, adam: AdamState):
        self.name = name
        self.widths = tuple(int(w) for w in widths)
        self.params = np.asarray(params, dtype="<f8")
        self.adam = adam


def _pack_array(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def save_checkpoint(path, config_dict: dict, iteration: int, networks) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    config_bytes = json.dumps(config_dict, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(config_bytes)))
    parts.append(config_bytes)
    parts.append(struct.pack("<Q", int(iteration)))
    parts.append(struct.pack("<I", len(networks)))
    for net in networks:
        name_bytes = net.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<I", len(net.widths)))
        parts.append(struct.pack(f"<{len(net.widths)}I", *net.widths))
        parts.append(struct.pack("<Q", net.params.size))
        parts.append(_pack_array(net.params))
        a = net.adam
        parts.append(struct.pack("<Q", a.step))
        parts.append(struct.pack("<5d", a.lr, a.beta1, a.beta2, a.eps, a.weight_decay))
        parts.append(_pack_array(a.m))
        parts.append(_pack_array(a.v))
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", fnv1a64(body)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(float)


def load_checkpoint(path):
    """Returns (config_dict, iteration, [NetworkPayload...])."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4 + 8:
        raise CheckpointError("truncated checkpoint file")
    body, checksum_bytes = data[:-8], data[-8:]
    expected = struct.unpack("<Q", checksum_bytes)[0]
    if fnv1a64(body) != expected:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    reader = _Reader(body)
    if reader.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (reader supports {VERSION})"
        )
    config_dict = json.loads(reader.take(reader.u32()).decode("utf-8"))
    iteration = reader.u64()
    networks = []
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        widths = tuple(reader.u32() for _ in range(reader.u32()))
        n_params = reader.u64()
        params = reader.f64s(n_params)
        step = reader.u64()
        lr, beta1, beta2, eps, weight_decay = struct.unpack("<5d", reader.take(40))
        m = reader.f64s(n_params)
        v = reader.f64s(n_params)
        adam = AdamState(
            m=m, v=v, step=step, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
            weight_decay=weight_decay,
        )
        networks.append(NetworkPayload(name, widths, params, adam))
    if reader.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return config_dict, iteration, networks
