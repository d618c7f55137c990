"""Checkpoint codec: seed + encoded mask + trained values.

Binary layout (little-endian; full field table in docs/checkpoint_format.md):

    "FZNT" | u16 version | u16 len + architecture descriptor | u8 scheme id
    | u8 frozen mode | u64 init seed | u32 q numerator | u32 q denominator
    | u8 mask codec | u32 mask bytes + payload
    | f32 kept weights (ascending flat index) | f32 biases
    | u32 epoch_of_best | f64 val_acc
    | u32 CRC32(reconstructed weight+bias bytes) | u32 CRC32(file prefix)

Frozen modes say how non-kept weights are rebuilt: 0 regenerates them from
the stored seed (freeze training), 1 sets them to zero (prune training),
2 means every weight is in the payload (dense or decayed-frozen training).
The mask is stored as whichever of (raw bitset | delta varint index list) is
smaller. decode(encode(x)) is bitwise exact in all modes.
"""

import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import nn
from .errors import (ChecksumError, CodecError, IntegrityError, ParameterError,
                     TruncatedError)
from .rng import RngStream
from .selection import FreezeMask, as_rate

MAGIC = b"FZNT"
VERSION = 1

SCHEME_IDS = {"xavier_normal": 0, "kaiming_uniform": 1, "pm_sigma": 2}
SCHEME_NAMES = {v: k for k, v in SCHEME_IDS.items()}
FROZEN_MODE_IDS = {"seed": 0, "zeros": 1, "dense": 2}
FROZEN_MODE_NAMES = {v: k for k, v in FROZEN_MODE_IDS.items()}

MASK_RAW = 0
MASK_VARINT = 1


def _encode_varint(x: int) -> bytes:
    out = bytearray()
    while True:
        b = x & 0x7F
        x >>= 7
        if x:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _decode_varint(buf: bytes, pos: int):
    shift = 0
    val = 0
    while True:
        if pos >= len(buf):
            raise TruncatedError("mask payload: varint runs past the end")
        b = buf[pos]
        pos += 1
        val |= (b & 0x7F) << shift
        if not b & 0x80:
            return val, pos
        shift += 7
        if shift > 63:
            raise CodecError("mask payload: varint wider than 64 bits")


def _mask_to_bytes(bits: np.ndarray):
    """Pick the smaller of raw bitset and delta-varint kept-index list."""
    raw = np.packbits(bits, bitorder="little").tobytes()
    idx = np.flatnonzero(bits)
    parts = [struct.pack("<I", len(idx))]
    prev = None
    for i in idx.tolist():
        parts.append(_encode_varint(i if prev is None else i - prev))
        prev = i
    varint = b"".join(parts)
    if len(varint) < len(raw):
        return MASK_VARINT, varint
    return MASK_RAW, raw


def _mask_from_bytes(codec: int, payload: bytes, n: int) -> np.ndarray:
    if codec == MASK_RAW:
        if len(payload) != (n + 7) // 8:
            raise CodecError(f"mask payload: raw bitset is {len(payload)} bytes, "
                             f"want {(n + 7) // 8}")
        return np.unpackbits(np.frombuffer(payload, np.uint8),
                             bitorder="little")[:n].astype(np.uint8)
    if codec == MASK_VARINT:
        if len(payload) < 4:
            raise TruncatedError("mask payload: missing index count")
        count = struct.unpack_from("<I", payload)[0]
        bits = np.zeros(n, np.uint8)
        pos = 4
        prev = None
        for _ in range(count):
            delta, pos = _decode_varint(payload, pos)
            i = delta if prev is None else prev + delta
            if not 0 <= i < n or (prev is not None and delta == 0):
                raise CodecError("mask payload: kept index out of order or range")
            bits[i] = 1
            prev = i
        if pos != len(payload):
            raise CodecError("mask payload: trailing bytes after index list")
        return bits
    raise CodecError(f"unknown mask codec {codec}")


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedError(f"{what}: need {n} bytes at offset {self.pos}, "
                                 f"file has {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def encode(snapshot: nn.ParamSet, mask: FreezeMask, seed: int, scheme: str,
           spec: nn.NetworkSpec, epoch_of_best: int = 0, val_acc: float = 0.0,
           frozen_mode: str = "seed") -> bytes:
    """Serialize a trained snapshot. In seed mode the frozen slots must still
    equal their seed-regenerated values; in zeros mode they must be 0."""
    if snapshot.dtype != np.float32:
        raise ParameterError("checkpoints store float32 parameters")
    if scheme not in SCHEME_IDS:
        raise ParameterError(f"unknown init scheme {scheme!r}")
    if frozen_mode not in FROZEN_MODE_IDS:
        raise ParameterError(f"unknown frozen mode {frozen_mode!r}")
    n = spec.weight_count
    if mask.bits.shape != (n,):
        raise ParameterError("mask does not match the architecture")

    frozen = mask.bits == 0
    if frozen_mode == "seed":
        regen = nn.init_params(spec, scheme, RngStream(seed, "init"))
        if not np.array_equal(snapshot.weights[frozen], regen.weights[frozen]):
            raise IntegrityError("frozen weights do not match seed regeneration; "
                                 "encode with frozen_mode='dense' instead")
    elif frozen_mode == "zeros":
        if snapshot.weights[frozen].any():
            raise IntegrityError("frozen weights are not all zero; "
                                 "encode with frozen_mode='dense' instead")

    descriptor = spec.to_descriptor().encode()
    codec, mask_payload = _mask_to_bytes(mask.bits)
    kept = snapshot.weights if frozen_mode == "dense" else snapshot.weights[mask.bits == 1]

    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    out += struct.pack("<H", len(descriptor)) + descriptor
    out += struct.pack("<BB", SCHEME_IDS[scheme], FROZEN_MODE_IDS[frozen_mode])
    out += struct.pack("<Q", seed)
    q = as_rate(mask.q)
    if q.numerator > 0xFFFFFFFF or q.denominator > 0xFFFFFFFF:
        raise ParameterError("freezing rate does not fit u32/u32")
    out += struct.pack("<II", q.numerator, q.denominator)
    out += struct.pack("<BI", codec, len(mask_payload)) + mask_payload
    out += kept.astype("<f4").tobytes()
    out += snapshot.biases.astype("<f4").tobytes()
    out += struct.pack("<Id", epoch_of_best, float(val_acc))
    out += struct.pack("<I", zlib.crc32(snapshot.weights.tobytes() +
                                        snapshot.biases.tobytes()))
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def decode(blob: bytes):
    """Returns (ParamSet, FreezeMask, metadata dict). Raises CodecError
    subclasses naming the failing section."""
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CodecError("magic: not a freezenet checkpoint")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CodecError(f"version: {version} unsupported (want {VERSION})")
    (dlen,) = r.unpack("<H", "descriptor length")
    descriptor = r.take(dlen, "architecture descriptor")
    scheme_id, frozen_id = r.unpack("<BB", "scheme/frozen-mode bytes")
    if scheme_id not in SCHEME_NAMES:
        raise CodecError(f"scheme id {scheme_id} unknown")
    if frozen_id not in FROZEN_MODE_NAMES:
        raise CodecError(f"frozen mode {frozen_id} unknown")
    (seed,) = r.unpack("<Q", "seed")
    q_num, q_den = r.unpack("<II", "freezing rate")
    if q_den == 0:
        raise CodecError("freezing rate: zero denominator")
    codec, mlen = r.unpack("<BI", "mask header")
    mask_payload = r.take(mlen, "mask payload")

    try:
        spec = nn.from_descriptor(descriptor.decode())
    except Exception as e:
        raise CodecError(f"architecture descriptor: {e}") from e
    n, nb = spec.weight_count, spec.bias_count
    q = Fraction(q_num, q_den)
    if not 0 <= q < 1:
        raise CodecError(f"freezing rate {q} out of [0, 1)")
    bits = _mask_from_bytes(codec, mask_payload, n)
    popcount = int(bits.sum())
    k = int((1 - q) * n)
    if popcount < k:
        raise CodecError(f"mask popcount {popcount} below k={k}")
    mask = FreezeMask(bits, q, k, popcount - k)

    frozen_mode = FROZEN_MODE_NAMES[frozen_id]
    stored = n if frozen_mode == "dense" else popcount
    kept = np.frombuffer(r.take(4 * stored, "weight payload"), "<f4")
    biases = np.frombuffer(r.take(4 * nb, "bias payload"), "<f4").copy()
    epoch_of_best, val_acc = r.unpack("<Id", "metadata")
    (param_crc,) = r.unpack("<I", "integrity checksum")
    (file_crc,) = r.unpack("<I", "file checksum")
    if r.pos != len(blob):
        raise CodecError(f"file checksum: {len(blob) - r.pos} trailing bytes")
    if zlib.crc32(blob[:-4]) != file_crc:
        raise ChecksumError("file checksum: CRC32 mismatch")

    if frozen_mode == "dense":
        weights = kept.copy()
    else:
        if frozen_mode == "seed":
            weights = nn.init_params(spec, SCHEME_NAMES[scheme_id],
                                     RngStream(seed, "init")).weights
        else:
            weights = np.zeros(n, np.float32)
        weights[bits == 1] = kept
    if zlib.crc32(weights.tobytes() + biases.tobytes()) != param_crc:
        raise IntegrityError("integrity checksum: reconstructed parameters do not "
                             "match what was encoded (seed/scheme/payload corrupt)")
    params = nn.ParamSet(spec, weights, biases)
    meta = {"seed": seed, "scheme": SCHEME_NAMES[scheme_id],
            "frozen_mode": frozen_mode, "epoch_of_best": epoch_of_best,
            "val_acc": val_acc}
    return params, mask, meta


@dataclass
class SizeReport:
    reported_kB: float          # headline storage-size convention, see below
    kept_params_kB: float       # (popcount + biases) * 4 / 1024
    payload_bytes: int          # float bytes actually stored in the file
    encoded_mask_bytes: int
    on_disk_bytes: int
    baseline_kB: float
    compression_factor: float


def reported_size_kb(spec: nn.NetworkSpec, q) -> float:
    """Headline size convention: a dense model counts every parameter once;
    a frozen one counts floor((1-q) * total-parameters) trainable slots plus
    all biases. Reported in binary kB (KiB) at 4 bytes per value."""
    q = as_rate(q)
    total = spec.param_count
    if q == 0:
        return total * 4 / 1024
    trainable = int((1 - q) * total)
    return (trainable + spec.bias_count) * 4 / 1024


def size_report(blob: bytes) -> SizeReport:
    params, mask, meta = decode(blob)
    spec = params.spec
    reported = reported_size_kb(spec, mask.q)
    baseline = spec.param_count * 4 / 1024
    stored = spec.weight_count if meta["frozen_mode"] == "dense" else mask.popcount
    r = _Reader(blob)
    r.take(4 + 2, "header")
    (dlen,) = r.unpack("<H", "descriptor length")
    r.take(dlen + 2 + 8 + 8, "fixed fields")
    _, mlen = r.unpack("<BI", "mask header")
    return SizeReport(
        reported_kB=reported,
        kept_params_kB=(mask.popcount + spec.bias_count) * 4 / 1024,
        payload_bytes=(stored + spec.bias_count) * 4,
        encoded_mask_bytes=mlen,
        on_disk_bytes=len(blob),
        baseline_kB=baseline,
        compression_factor=round(baseline, 1) / round(reported, 1),
    )
