"""Binary weights file: magic "A2GW", little-endian, float32 payloads.

Layout:
    magic           4 bytes  b"A2GW"
    version         u16      currently 1
    d, k, g         u32 each
    n_blocks        u32
    flags           u32      bit0 share_encoders, bit1 classifier_use_score,
                             bit2 angle_reference == "chain"
    n_records       u32
    records:        u16 name length, utf-8 name, u8 rank, rank * u32 dims,
                    prod(dims) * f32 payload (row-major)

Parameters come first in creation order, then running-statistic buffers
(names prefixed "buffers/"). Values are stored in 32-bit and widened back
to 64-bit on load, so load(save(w)) reproduces every value at float32
precision exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor
from .network import ModelWeights, NetworkConfig

MAGIC = b"A2GW"
VERSION = 1

FLAG_SHARE_ENCODERS = 1
FLAG_CLASSIFIER_SCORE = 2
FLAG_ANGLE_CHAIN = 4


class WeightsFormatError(Exception):
    pass


class VersionMismatch(WeightsFormatError):
    pass


def _flags(cfg: NetworkConfig) -> int:
    flags = 0
    if cfg.share_encoders:
        flags |= FLAG_SHARE_ENCODERS
    if cfg.classifier_use_score:
        flags |= FLAG_CLASSIFIER_SCORE
    if cfg.angle_reference == "chain":
        flags |= FLAG_ANGLE_CHAIN
    return flags


def _config_from(d, k, g, n_blocks, flags) -> NetworkConfig:
    return NetworkConfig(
        d=d, k=k, g=g, n_blocks=n_blocks,
        share_encoders=bool(flags & FLAG_SHARE_ENCODERS),
        classifier_use_score=bool(flags & FLAG_CLASSIFIER_SCORE),
        angle_reference="chain" if flags & FLAG_ANGLE_CHAIN else "nearest",
    )


def _write_record(out, name: str, arr: np.ndarray):
    encoded = name.encode("utf-8")
    out.append(struct.pack("<H", len(encoded)))
    out.append(encoded)
    out.append(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        out.append(struct.pack("<I", dim))
    out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_weights(path, weights: ModelWeights):
    cfg = weights.config
    out = [MAGIC,
           struct.pack("<H", VERSION),
           struct.pack("<IIIII", cfg.d, cfg.k, cfg.g, cfg.n_blocks, _flags(cfg)),
           struct.pack("<I", len(weights.params) + len(weights.buffers))]
    for name, p in weights.params.items():
        _write_record(out, name, p.data)
    for name, buf in weights.buffers.items():
        _write_record(out, f"buffers/{name}", buf)
    with open(path, "wb") as f:
        f.write(b"".join(out))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise WeightsFormatError("truncated weights file")
        chunk = self.blob[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionMismatch(f"unsupported weights version {version}, expected {VERSION}")
    d, k, g, n_blocks, flags = r.unpack("<IIIII")
    cfg = _config_from(d, k, g, n_blocks, flags)
    (n_records,) = r.unpack("<I")

    params: dict = {}
    buffers: dict = {}
    for _ in range(n_records):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = tuple(r.unpack("<" + "I" * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float64)
        arr = payload.reshape(dims)
        if name.startswith("buffers/"):
            buffers[name[len("buffers/"):]] = arr.copy()
        else:
            params[name] = Tensor(arr, requires_grad=True)
    if r.off != len(r.blob):
        raise WeightsFormatError(f"{len(r.blob) - r.off} trailing bytes")

    expected = ModelWeights.initialize(cfg, seed=0)
    if set(expected.params) != set(params) or set(expected.buffers) != set(buffers):
        missing = set(expected.params) ^ set(params)
        extra = set(expected.buffers) ^ set(buffers)
        raise WeightsFormatError(f"parameter records do not match config: {missing | extra}")
    for name, p in params.items():
        if p.data.shape != expected.params[name].data.shape:
            raise WeightsFormatError(f"shape of {name} is {p.data.shape}, "
                                     f"expected {expected.params[name].data.shape}")
    return ModelWeights(cfg, params, buffers)
