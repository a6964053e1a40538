"""Wire format for timestamped V2X messages.

Frame layout (all multi-byte fields big-endian):

  +-------+---------+-------+-----------+-----+-----------+-----------+-------------+---------+----------+
  | magic | version | flags | source_id | seq | t1..t4    | e1..e4    | payload_len | payload | checksum |
  | 4 B   | 1 B     | 1 B   | 2 B       | 8 B | 4 x 8 B   | 4 x 8 B   | 4 B         | n B     | 4 B      |
  +-------+---------+-------+-----------+-----+-----------+-----------+-------------+---------+----------+

Header is 84 bytes; the CRC-32 trailer covers everything before it, so the
fixed per-frame overhead is 88 bytes.  Timestamps t1..t4 are nanoseconds
since the Unix epoch with 0 meaning "not yet stamped"; e1..e4 are the
sender-side clock offset estimates (value to ADD to the matching local
timestamp to map it onto reference time).  Offsets are always carried on
the wire and are meaningful only where the matching timestamp is nonzero.
"""

from __future__ import annotations

import random
import struct
import zlib
from dataclasses import dataclass, field

MAGIC = b"CV2X"
VERSION = 1
HEADER_LEN = 84
CHECKSUM_LEN = 4
FRAME_OVERHEAD = HEADER_LEN + CHECKSUM_LEN  # 88 bytes
MAX_PAYLOAD = 10_000_000

# flags bit 0: set by analysis replay tooling on handover-affected frames,
# always 0 on freshly sent frames.
FLAG_HANDOVER_AFFECTED = 0x01

_HEADER = struct.Struct(">4sBBHQqqqqqqqqI")
assert _HEADER.size == HEADER_LEN


class ProtocolError(ValueError):
    """Base class for frame encode/decode failures."""


class FrameSizeError(ProtocolError):
    """Payload or target frame size outside the allowed bounds."""


class MalformedFrameError(ProtocolError):
    """Frame too short, bad magic, bad version, or inconsistent length."""


class ChecksumError(ProtocolError):
    """Frame failed CRC-32 verification."""


@dataclass
class V2XMessage:
    """One application message as carried on the wire.

    ``checksum`` is filled in by the codec (computed on encode, verified on
    decode) and is excluded from equality so that round-tripping a message
    whose checksum was never set still compares equal.
    """

    source_id: int = 0
    seq: int = 0
    t1: int = 0
    t2: int = 0
    t3: int = 0
    t4: int = 0
    e1: int = 0
    e2: int = 0
    e3: int = 0
    e4: int = 0
    payload: bytes = b""
    flags: int = 0
    checksum: int = field(default=0, compare=False)

    def stamps(self) -> tuple[int, int, int, int]:
        return (self.t1, self.t2, self.t3, self.t4)


def compute_checksum(data: bytes) -> int:
    """CRC-32 (IEEE 802.3 polynomial, reflected, init/xorout all-ones)."""
    return zlib.crc32(data) & 0xFFFFFFFF


def encode(msg: V2XMessage) -> bytes:
    """Serialize a message to its wire frame.

    The checksum is computed here over header + payload and appended as the
    trailing 4 bytes; any value already in ``msg.checksum`` is ignored.
    """
    if len(msg.payload) > MAX_PAYLOAD:
        raise FrameSizeError(
            f"payload of {len(msg.payload)} bytes exceeds maximum {MAX_PAYLOAD}")
    if not 0 <= msg.source_id <= 0xFFFF:
        raise ProtocolError(f"source_id {msg.source_id} does not fit in 16 bits")
    if not 0 <= msg.seq <= 0xFFFFFFFFFFFFFFFF:
        raise ProtocolError(f"seq {msg.seq} does not fit in 64 bits")
    try:
        header = _HEADER.pack(
            MAGIC, VERSION, msg.flags, msg.source_id, msg.seq,
            msg.t1, msg.t2, msg.t3, msg.t4,
            msg.e1, msg.e2, msg.e3, msg.e4,
            len(msg.payload))
    except struct.error as exc:
        raise ProtocolError(f"field out of range: {exc}") from None
    body = header + msg.payload
    return body + compute_checksum(body).to_bytes(CHECKSUM_LEN, "big")


def decode(frame: bytes) -> V2XMessage:
    """Parse and verify a wire frame.

    Raises MalformedFrameError on framing problems (short frame, bad magic
    or version, length mismatch) and ChecksumError when the CRC-32 trailer
    does not match, which signals in-flight corruption.
    """
    if len(frame) < FRAME_OVERHEAD:
        raise MalformedFrameError(
            f"frame of {len(frame)} bytes is shorter than minimum {FRAME_OVERHEAD}")
    (magic, version, flags, source_id, seq,
     t1, t2, t3, t4, e1, e2, e3, e4, payload_len) = _HEADER.unpack(frame[:HEADER_LEN])
    if magic != MAGIC:
        raise MalformedFrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise MalformedFrameError(f"unsupported version {version}")
    if len(frame) != FRAME_OVERHEAD + payload_len:
        raise MalformedFrameError(
            f"frame length {len(frame)} does not match header payload_len {payload_len}")
    body = frame[:-CHECKSUM_LEN]
    received = int.from_bytes(frame[-CHECKSUM_LEN:], "big")
    expected = compute_checksum(body)
    if received != expected:
        raise ChecksumError(
            f"checksum mismatch: frame carries 0x{received:08X}, computed 0x{expected:08X}")
    return V2XMessage(
        source_id=source_id, seq=seq,
        t1=t1, t2=t2, t3=t3, t4=t4,
        e1=e1, e2=e2, e3=e3, e4=e4,
        payload=frame[HEADER_LEN:HEADER_LEN + payload_len],
        flags=flags, checksum=received)


def decode_unchecked(frame: bytes) -> V2XMessage | None:
    """Best-effort header parse without checksum verification.

    Used to salvage identifying fields (source, seq, stamps) from a frame
    that failed verification so the receiver can log it as corrupt.
    Returns None when even the header is unreadable.
    """
    if len(frame) < HEADER_LEN:
        return None
    try:
        (magic, version, flags, source_id, seq,
         t1, t2, t3, t4, e1, e2, e3, e4, payload_len) = _HEADER.unpack(frame[:HEADER_LEN])
    except struct.error:
        return None
    if magic != MAGIC:
        return None
    return V2XMessage(
        source_id=source_id, seq=seq,
        t1=t1, t2=t2, t3=t3, t4=t4,
        e1=e1, e2=e2, e3=e3, e4=e4,
        payload=frame[HEADER_LEN:HEADER_LEN + payload_len],
        flags=flags)


def make_padded_payload(target_frame_size: int, seed: int, seq: int) -> bytes:
    """Deterministic pseudorandom padding so a frame hits an exact size.

    Returns ``target_frame_size - 88`` bytes derived from (seed, seq); the
    same pair always yields the same bytes, different seqs yield different
    bytes with overwhelming probability.
    """
    if target_frame_size < FRAME_OVERHEAD:
        raise FrameSizeError(
            f"target frame size {target_frame_size} is below the {FRAME_OVERHEAD}-byte overhead")
    n = target_frame_size - FRAME_OVERHEAD
    if n == 0:
        return b""
    rng = random.Random(((seed & 0xFFFFFFFFFFFFFFFF) << 64) | (seq & 0xFFFFFFFFFFFFFFFF))
    return rng.randbytes(n)
