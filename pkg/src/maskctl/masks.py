"""Scheduled attention masks over the joint token sequence.

``bits[a, b]`` is True when query token ``a`` may attend to key token ``b``.
All masks start from the region-isolation mask and OR in directional flows:

* ``rc_to_ri``  background rows    -> every image column
* ``pi_to_rc``  every text row     -> background columns
* ``pg_to_ri``  global-prompt rows -> every image column
* ``pi_to_pg``  every text row     -> global-prompt columns

The expansion mask adds every image row -> background columns on top of the
canonical focus mask.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np

from .errors import EmptyRow, FormatError, ShapeMismatch, UnknownPartialMask
from .layout import MembershipVectors

PARTIAL_MASKS = ("rc_to_ri", "pi_to_rc", "pg_to_ri", "pi_to_pg")

ISOLATION = "isolation"
FOCUS = "focus"
EXPANSION = "expansion"
ABLATION = "ablation"
FULL = "full"
CUSTOM = "custom"


@dataclass(frozen=True)
class AttentionMask:
    bits: np.ndarray = field(repr=False)
    kind: str
    dropped: frozenset[str] = frozenset()

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
            raise ShapeMismatch(f"mask must be square, got {bits.shape}")
        empty = np.flatnonzero(~bits.any(axis=1))
        if empty.size:
            raise EmptyRow(f"mask rows {empty[:8].tolist()} allow no keys")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def size(self) -> int:
        return self.bits.shape[0]

    @property
    def label(self) -> str:
        if self.kind == ABLATION:
            return "ablation:" + ",".join(sorted(self.dropped))
        return self.kind

    def __eq__(self, other):
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.bits, other.bits)

    __hash__ = None


def full_mask(size: int) -> AttentionMask:
    return AttentionMask(np.ones((size, size), dtype=bool), FULL)


def _outer(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return u[:, None] & v[None, :]


def isolation_bits(mv: MembershipVectors) -> np.ndarray:
    m = mv.m_joint.astype(np.int64)
    return (m.T @ m) > 0


def isolation_mask(mv: MembershipVectors) -> AttentionMask:
    return AttentionMask(isolation_bits(mv), ISOLATION)


def _check_drop(drop: Iterable[str]) -> frozenset[str]:
    drop = frozenset(drop)
    unknown = drop - set(PARTIAL_MASKS)
    if unknown:
        raise UnknownPartialMask(f"unknown partial masks {sorted(unknown)}; expected a subset of {PARTIAL_MASKS}")
    return drop


def focus_bits(mv: MembershipVectors, drop: Iterable[str] = ()) -> np.ndarray:
    drop = _check_drop(drop)
    L_T = mv.L_T
    ones_t = np.ones(mv.L_T, dtype=bool)
    ones_i = np.ones(mv.L_I, dtype=bool)
    m_pg, m_rc = mv.m_p[-1], mv.m_r[-1]

    bits = isolation_bits(mv)
    tt = bits[:L_T, :L_T]
    ti = bits[:L_T, L_T:]
    ii = bits[L_T:, L_T:]
    if "pi_to_pg" not in drop:
        tt |= _outer(ones_t, m_pg)
    if "pi_to_rc" not in drop:
        ti |= _outer(ones_t, m_rc)
    if "pg_to_ri" not in drop:
        ti |= _outer(m_pg, ones_i)
    if "rc_to_ri" not in drop:
        ii |= _outer(m_rc, ones_i)
    return bits


def focus_mask(mv: MembershipVectors, drop: Iterable[str] = ()) -> AttentionMask:
    drop = _check_drop(drop)
    kind = ABLATION if drop else FOCUS
    return AttentionMask(focus_bits(mv, drop), kind, drop)


def expansion_mask(mv: MembershipVectors) -> AttentionMask:
    bits = focus_bits(mv)
    bits[mv.L_T:, mv.L_T:] |= _outer(np.ones(mv.L_I, dtype=bool), mv.m_r[-1])
    return AttentionMask(bits, EXPANSION)


# -- portable bitmap dump ---------------------------------------------------

MASK_MAGIC = b"MCTLMASK"
MASK_VERSION = 1


def write_mask(mask: AttentionMask, fh: BinaryIO) -> None:
    """Header: magic, u32 version, u32 size, u16 label length, label bytes.

    Payload: row-major bits packed 8 per byte, least significant bit first.
    """
    label = mask.label.encode("utf-8")
    fh.write(MASK_MAGIC)
    fh.write(struct.pack("<IIH", MASK_VERSION, mask.size, len(label)))
    fh.write(label)
    fh.write(np.packbits(mask.bits.reshape(-1), bitorder="little").tobytes())


def read_mask(fh: BinaryIO) -> AttentionMask:
    if fh.read(len(MASK_MAGIC)) != MASK_MAGIC:
        raise FormatError("not a mask dump")
    head = fh.read(10)
    if len(head) != 10:
        raise FormatError("truncated mask header")
    version, size, label_len = struct.unpack("<IIH", head)
    if version != MASK_VERSION:
        raise FormatError(f"unsupported mask version {version}")
    label = fh.read(label_len).decode("utf-8")
    nbytes = (size * size + 7) // 8
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError("truncated mask payload")
    flat = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=size * size, bitorder="little")
    kind, _, rest = label.partition(":")
    dropped = frozenset(rest.split(",")) if rest else frozenset()
    return AttentionMask(flat.reshape(size, size).astype(bool), kind, dropped)


def mask_to_bytes(mask: AttentionMask) -> bytes:
    buf = io.BytesIO()
    write_mask(mask, buf)
    return buf.getvalue()


def mask_from_bytes(data: bytes) -> AttentionMask:
    return read_mask(io.BytesIO(data))
