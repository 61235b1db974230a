"""Wire frames and exact payload accounting.

Binary layout, all little-endian. Every frame starts with a 16-byte common
header followed by a kind-specific extension, then the payload::

    common   u8 kind | u8 flags | u16 reserved | u32 round | u32 worker | u32 n
    FULL     u32 count                                  payload: count x f32
    CORE     u64 signature | u32 epoch | u32 count      payload: count x f32
    KV       u32 count                                  payload: count x (u32 index, f32 value)
    QUANT    u32 bucket | u32 count                     payload: ceil(count/bucket) x f32 scale,
                                                                 then packed codes

``flags`` carries the bit width for QUANT frames and is zero otherwise. A
quantised code is ``bits`` level bits (LSB first) followed by one sign bit;
codes are packed back to back, LSB first within each byte, and the code block
is zero-padded to a whole number of 32-bit words.

Payload is counted in 32-bit words; headers are excluded from the count.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

from slimdp.selection import INDEX_DTYPE, CoreSet

WORD_BYTES = 4
_COMMON = struct.Struct("<BBHIII")
_EXT = {
    1: struct.Struct("<I"),  # FULL
    2: struct.Struct("<QII"),  # CORE
    3: struct.Struct("<I"),  # KV
    4: struct.Struct("<II"),  # QUANT
}
_KV_DTYPE = np.dtype([("index", "<u4"), ("value", "<f4")])


class CodecError(ValueError):
    pass


class StaleCoreError(CodecError):
    pass


class Kind(enum.IntEnum):
    FULL = 1
    CORE = 2
    KV = 3
    QUANT = 4


@dataclass(frozen=True)
class QuantParams:
    bits: int = 8
    bucket: int = 512

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise CodecError(f"quantisation bits must lie in [1, 16], got {self.bits}")
        if self.bucket < 1:
            raise CodecError(f"bucket size must be >= 1, got {self.bucket}")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True, eq=False)
class SparseUpdate:
    indices: np.ndarray
    values: np.ndarray
    n: int

    def __len__(self) -> int:
        return self.indices.size

    def to_dense(self, fill: float = 0.0) -> np.ndarray:
        out = np.full(self.n, fill, dtype=np.float32)
        out[self.indices] = self.values
        return out


@dataclass(frozen=True)
class WireFrame:
    kind: Kind
    round: int
    worker: int
    n: int
    count: int
    payload: bytes
    signature: int = 0
    epoch: int = 0
    bucket: int = 0
    bits: int = 0

    @property
    def words(self) -> int:
        return payload_words(self)

    def header_bytes(self) -> bytes:
        flags = self.bits if self.kind is Kind.QUANT else 0
        head = _COMMON.pack(self.kind, flags, 0, self.round, self.worker, self.n)
        if self.kind is Kind.CORE:
            ext = _EXT[self.kind].pack(self.signature, self.epoch, self.count)
        elif self.kind is Kind.QUANT:
            ext = _EXT[self.kind].pack(self.bucket, self.count)
        else:
            ext = _EXT[self.kind].pack(self.count)
        return head + ext

    def to_bytes(self) -> bytes:
        return self.header_bytes() + self.payload

    @classmethod
    def from_bytes(cls, buf: bytes) -> WireFrame:
        if len(buf) < _COMMON.size:
            raise CodecError("truncated frame header")
        kind, flags, _, rnd, worker, n = _COMMON.unpack_from(buf)
        try:
            kind = Kind(kind)
        except ValueError:
            raise CodecError(f"unknown frame kind {kind}") from None
        ext = _EXT[kind]
        if len(buf) < _COMMON.size + ext.size:
            raise CodecError("truncated frame header")
        fields = ext.unpack_from(buf, _COMMON.size)
        payload = bytes(buf[_COMMON.size + ext.size :])
        if kind is Kind.CORE:
            sig, epoch, count = fields
            frame = cls(kind, rnd, worker, n, count, payload, signature=sig, epoch=epoch)
        elif kind is Kind.QUANT:
            bucket, count = fields
            frame = cls(kind, rnd, worker, n, count, payload, bucket=bucket, bits=flags)
        else:
            frame = cls(kind, rnd, worker, n, fields[0], payload)
        _check_payload(frame)
        return frame


def _quant_payload_bytes(count: int, bits: int, bucket: int) -> int:
    scales = math.ceil(count / bucket) if count else 0
    code_words = math.ceil(count * (bits + 1) / 32)
    return (scales + code_words) * WORD_BYTES


def _expected_payload_bytes(frame: WireFrame) -> int:
    if frame.kind in (Kind.FULL, Kind.CORE):
        return frame.count * WORD_BYTES
    if frame.kind is Kind.KV:
        return frame.count * 2 * WORD_BYTES
    return _quant_payload_bytes(frame.count, frame.bits, frame.bucket)


def _check_payload(frame: WireFrame) -> None:
    want = _expected_payload_bytes(frame)
    if len(frame.payload) != want:
        raise CodecError(
            f"{frame.kind.name} frame declares {frame.count} values "
            f"({want} payload bytes) but carries {len(frame.payload)}"
        )


def payload_words(frame: WireFrame) -> int:
    """Exact payload size in 32-bit words (header excluded)."""
    _check_payload(frame)
    return len(frame.payload) // WORD_BYTES


def _as_f32(values) -> np.ndarray:
    v = np.asarray(values)
    if v.ndim != 1:
        raise CodecError(f"expected a 1-d array, got shape {v.shape}")
    v = v.astype("<f4", copy=False)
    if not np.all(np.isfinite(v)):
        raise CodecError("non-finite value cannot be encoded")
    return v


def encode_full(values, round: int = 0, worker: int = 0) -> WireFrame:
    v = _as_f32(values)
    return WireFrame(Kind.FULL, round, worker, v.size, v.size, v.tobytes())


def decode_full(frame: WireFrame) -> np.ndarray:
    _expect(frame, Kind.FULL)
    return np.frombuffer(frame.payload, dtype="<f4", count=frame.count).astype(np.float32)


def encode_core(values_at_core, core: CoreSet, round: int = 0, worker: int = 0) -> WireFrame:
    """Values only, in ascending core-index order; keys travel as a signature."""
    v = _as_f32(values_at_core)
    if v.size != len(core):
        raise CodecError(f"{v.size} values for a core of {len(core)} indices")
    return WireFrame(
        Kind.CORE, round, worker, core.n, v.size, v.tobytes(), signature=core.signature, epoch=core.epoch
    )


def decode_core(frame: WireFrame, cached_core: CoreSet) -> SparseUpdate:
    _expect(frame, Kind.CORE)
    if frame.signature != cached_core.signature:
        raise StaleCoreError(
            f"stale core cache: frame signature {frame.signature:#018x}, cache {cached_core.signature:#018x}"
        )
    if frame.epoch != cached_core.epoch:
        raise StaleCoreError(f"stale core cache: frame epoch {frame.epoch}, cache epoch {cached_core.epoch}")
    if frame.count != len(cached_core) or frame.n != cached_core.n:
        raise CodecError("core frame length does not match the cached core")
    vals = np.frombuffer(frame.payload, dtype="<f4", count=frame.count).astype(np.float32)
    return SparseUpdate(cached_core.indices, vals, frame.n)


def encode_kv(sparse: SparseUpdate, round: int = 0, worker: int = 0) -> WireFrame:
    idx = np.asarray(sparse.indices)
    if idx.size:
        if idx.min() < 0 or idx.max() >= sparse.n:
            raise CodecError(f"index out of range [0, {sparse.n})")
        if np.any(np.diff(idx.astype(np.int64)) <= 0):
            raise CodecError("indices must be sorted and unique")
    vals = _as_f32(sparse.values)
    if vals.size != idx.size:
        raise CodecError(f"{idx.size} indices but {vals.size} values")
    rec = np.empty(idx.size, dtype=_KV_DTYPE)
    rec["index"] = idx
    rec["value"] = vals
    return WireFrame(Kind.KV, round, worker, sparse.n, idx.size, rec.tobytes())


def decode_kv(frame: WireFrame) -> SparseUpdate:
    _expect(frame, Kind.KV)
    _check_payload(frame)
    rec = np.frombuffer(frame.payload, dtype=_KV_DTYPE, count=frame.count)
    idx = rec["index"].astype(INDEX_DTYPE)
    if idx.size and (idx.max() >= frame.n or np.any(np.diff(idx.astype(np.int64)) <= 0)):
        raise CodecError("corrupt KV frame: indices unsorted, duplicated or out of range")
    return SparseUpdate(idx, rec["value"].astype(np.float32), frame.n)


def quant_encode(values, qp: QuantParams = QuantParams(), rng_seed=None, round: int = 0, worker: int = 0) -> WireFrame:
    """Bucketed stochastic quantisation with per-bucket max-magnitude scale.

    ``|v| / scale * s`` is rounded up with probability equal to its fractional
    part, so the decoded value is unbiased. ``rng_seed`` is an int or Generator.
    """
    v = _as_f32(values)
    count = v.size
    s = qp.levels
    pad = (-count) % qp.bucket
    mags = np.abs(np.concatenate([v, np.zeros(pad, dtype=np.float32)])).reshape(-1, qp.bucket)
    scales = mags.max(axis=1)
    safe = np.where(scales > 0, scales, 1.0).astype(np.float64)
    x = (mags.astype(np.float64) / safe[:, None] * s).ravel()[:count]
    lower = np.floor(x)
    u = np.random.default_rng(rng_seed).random(count)
    levels = (lower + (u < (x - lower))).astype(np.uint32)
    signs = (v < 0).astype(np.uint32) & (levels > 0)
    codes = levels | (signs << qp.bits)
    width = qp.bits + 1
    bitmat = np.empty((count, width), dtype=np.uint8)
    for j in range(width):
        bitmat[:, j] = (codes >> j) & 1
    packed = np.packbits(bitmat.ravel(), bitorder="little")
    code_bytes = math.ceil(count * width / 32) * WORD_BYTES
    packed = np.concatenate([packed, np.zeros(code_bytes - packed.size, dtype=np.uint8)])
    payload = scales.astype("<f4").tobytes() + packed.tobytes()
    return WireFrame(Kind.QUANT, round, worker, count, count, payload, bucket=qp.bucket, bits=qp.bits)


def quant_decode(frame: WireFrame) -> np.ndarray:
    _expect(frame, Kind.QUANT)
    if not 1 <= frame.bits <= 16 or frame.bucket < 1:
        raise CodecError(f"bad quantisation header: bits={frame.bits}, bucket={frame.bucket}")
    _check_payload(frame)
    count, width = frame.count, frame.bits + 1
    n_scales = math.ceil(count / frame.bucket) if count else 0
    scales = np.frombuffer(frame.payload, dtype="<f4", count=n_scales).astype(np.float64)
    raw = np.frombuffer(frame.payload, dtype=np.uint8, offset=n_scales * WORD_BYTES)
    bits = np.unpackbits(raw, bitorder="little")[: count * width].reshape(count, width)
    codes = np.zeros(count, dtype=np.uint32)
    for j in range(width):
        codes |= bits[:, j].astype(np.uint32) << j
    levels = codes & ((1 << frame.bits) - 1)
    sign = np.where(codes >> frame.bits, -1.0, 1.0)
    scale_per = np.repeat(scales, frame.bucket)[:count]
    return (sign * (levels / ((1 << frame.bits) - 1)) * scale_per).astype(np.float32)


def _expect(frame: WireFrame, kind: Kind) -> None:
    if frame.kind is not kind:
        raise CodecError(f"expected a {kind.name} frame, got {frame.kind.name}")
