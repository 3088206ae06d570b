"""Binary wire format for federation messages, plus chunking and topics.

Envelope layout (all integers little-endian):

    magic "FGFL" | version u16 | kind u8 | flags u8 | round u32
    | experiment id (u16 length + UTF-8) | sender id (u16 length + UTF-8)
    | body CRC32 u32 | body length u32 | body bytes

``flags`` bit 0 marks a deflate-compressed body (off by default; the
checksum covers the bytes as transmitted). Parameter vectors travel as
raw little-endian IEEE-754 float32 so transport is lossless at 32 bits;
JSON is deliberately not used for payloads. Chunks wrap arbitrary byte
strings for brokers with payload caps:

    magic "FGCH" | version u16 | message id (16 bytes) | index u32
    | total u32 | payload length u32 | payload bytes
"""

from __future__ import annotations

import struct
import uuid
import zlib
from dataclasses import dataclass, field

import numpy as np

MESSAGE_MAGIC = b"FGFL"
CHUNK_MAGIC = b"FGCH"
PROTOCOL_VERSION = 1
FLAG_DEFLATE = 0x01

KIND_JOIN = "join"
KIND_JOIN_ACK = "join-ack"
KIND_GLOBAL_MODEL = "global-model"
KIND_LOCAL_UPDATE = "local-update"
KIND_ROUND_ABORT = "round-abort"
KIND_EXPERIMENT_END = "experiment-end"

_KIND_CODES = {
    KIND_JOIN: 1,
    KIND_JOIN_ACK: 2,
    KIND_GLOBAL_MODEL: 3,
    KIND_LOCAL_UPDATE: 4,
    KIND_ROUND_ABORT: 5,
    KIND_EXPERIMENT_END: 6,
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

ALGORITHM_CODES = {"fedavg": 1, "scaffold": 2}
_CODE_ALGORITHMS = {v: k for k, v in ALGORITHM_CODES.items()}


class WireError(ValueError):
    """Base class for wire-format violations."""


class TruncatedMessage(WireError):
    pass


class ChecksumMismatch(WireError):
    pass


class UnknownKind(WireError):
    pass


class UnknownVersion(WireError):
    pass


class BadTopic(WireError):
    pass


class MissingChunks(WireError):
    def __init__(self, message_id: bytes, missing: list[int], total: int):
        self.message_id = message_id
        self.missing = missing
        self.total = total
        super().__init__(
            f"message {message_id.hex()} incomplete: missing chunk indices {missing} of {total}"
        )


# ---------------------------------------------------------------------------
# payload types
# ---------------------------------------------------------------------------

class ModelPayload:
    """Flat parameter vector (float32 on the wire) with optional control variate."""

    def __init__(self, scheme_id: str, params: np.ndarray, control: np.ndarray | None = None):
        self.scheme_id = scheme_id
        self.params = np.ascontiguousarray(params, dtype=np.float32)
        self.control = None if control is None else np.ascontiguousarray(control, dtype=np.float32)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelPayload):
            return NotImplemented
        if self.scheme_id != other.scheme_id:
            return False
        if self.params.tobytes() != other.params.tobytes():
            return False
        if (self.control is None) != (other.control is None):
            return False
        return self.control is None or self.control.tobytes() == other.control.tobytes()

    def __repr__(self) -> str:  # pragma: no cover
        return f"ModelPayload(scheme={self.scheme_id!r}, n={self.params.size}, control={self.control is not None})"


@dataclass(frozen=True)
class JoinBody:
    scheme_id: str
    n_samples: int
    nonce: int = 0  # per-process token so an ack-lost retry is not a duplicate


@dataclass(frozen=True)
class JoinAckBody:
    client: str
    accepted: bool
    reason: str = ""


@dataclass(frozen=True)
class GlobalModelBody:
    payload: ModelPayload
    algorithm: str = "fedavg"
    local_lr: float = 0.0
    k_steps: int = 0
    participants: tuple[str, ...] = ()


@dataclass(frozen=True)
class LocalUpdateBody:
    payload: ModelPayload
    n_samples: int


@dataclass(frozen=True)
class RoundAbortBody:
    reason: str


@dataclass(frozen=True)
class ExperimentEndBody:
    status: str
    final_round: int


@dataclass(frozen=True)
class FederationMessage:
    kind: str
    experiment: str
    round: int
    sender: str
    body: object

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise UnknownKind(f"unknown message kind {self.kind!r}")


# ---------------------------------------------------------------------------
# primitive packers
# ---------------------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise WireError("string field exceeds u16 length prefix")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedMessage(
                f"needed {n} bytes at offset {self.pos}, only {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def f32_array(self) -> np.ndarray:
        count = self.u32()
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4", count=count).copy()

    def done(self) -> None:
        if self.pos != len(self.data):
            raise TruncatedMessage(f"{len(self.data) - self.pos} unexpected trailing bytes")


def _pack_f32_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return struct.pack("<I", arr.size) + arr.tobytes()


def _pack_model_payload(p: ModelPayload) -> bytes:
    out = [_pack_str(p.scheme_id), _pack_f32_array(p.params)]
    if p.control is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01")
        out.append(_pack_f32_array(p.control))
    return b"".join(out)


def _read_model_payload(r: _Reader) -> ModelPayload:
    scheme = r.string()
    params = r.f32_array()
    control = r.f32_array() if r.u8() else None
    return ModelPayload(scheme_id=scheme, params=params, control=control)


def _encode_body(msg: FederationMessage) -> bytes:
    b = msg.body
    kind = msg.kind
    if kind == KIND_JOIN:
        return _pack_str(b.scheme_id) + struct.pack("<IQ", b.n_samples, b.nonce)
    if kind == KIND_JOIN_ACK:
        return _pack_str(b.client) + bytes([1 if b.accepted else 0]) + _pack_str(b.reason)
    if kind == KIND_GLOBAL_MODEL:
        algo = ALGORITHM_CODES.get(b.algorithm)
        if algo is None:
            raise WireError(f"unknown algorithm tag {b.algorithm!r}")
        head = struct.pack("<Bd I", algo, b.local_lr, b.k_steps)
        parts = struct.pack("<H", len(b.participants)) + b"".join(
            _pack_str(p) for p in b.participants
        )
        return head + parts + _pack_model_payload(b.payload)
    if kind == KIND_LOCAL_UPDATE:
        return struct.pack("<I", b.n_samples) + _pack_model_payload(b.payload)
    if kind == KIND_ROUND_ABORT:
        return _pack_str(b.reason)
    if kind == KIND_EXPERIMENT_END:
        return _pack_str(b.status) + struct.pack("<I", b.final_round)
    raise UnknownKind(f"unknown message kind {kind!r}")


def _decode_body(kind: str, data: bytes):
    r = _Reader(data)
    if kind == KIND_JOIN:
        body = JoinBody(scheme_id=r.string(), n_samples=r.u32(), nonce=struct.unpack("<Q", r.take(8))[0])
    elif kind == KIND_JOIN_ACK:
        body = JoinAckBody(client=r.string(), accepted=bool(r.u8()), reason=r.string())
    elif kind == KIND_GLOBAL_MODEL:
        algo_code = r.u8()
        algo = _CODE_ALGORITHMS.get(algo_code)
        if algo is None:
            raise WireError(f"unknown algorithm code {algo_code}")
        local_lr = r.f64()
        k_steps = r.u32()
        participants = tuple(r.string() for _ in range(r.u16()))
        body = GlobalModelBody(
            payload=_read_model_payload(r),
            algorithm=algo,
            local_lr=local_lr,
            k_steps=k_steps,
            participants=participants,
        )
    elif kind == KIND_LOCAL_UPDATE:
        n_samples = r.u32()
        body = LocalUpdateBody(payload=_read_model_payload(r), n_samples=n_samples)
    elif kind == KIND_ROUND_ABORT:
        body = RoundAbortBody(reason=r.string())
    elif kind == KIND_EXPERIMENT_END:
        body = ExperimentEndBody(status=r.string(), final_round=r.u32())
    else:
        raise UnknownKind(f"unknown message kind {kind!r}")
    r.done()
    return body


# ---------------------------------------------------------------------------
# envelope encode/decode
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<HBBI")  # version, kind code, flags, round


def encode(msg: FederationMessage, compress: bool = False) -> bytes:
    """Serialize a message; decode(encode(m)) == m bitwise on all fields."""
    body = _encode_body(msg)
    flags = 0
    if compress:
        body = zlib.compress(body)
        flags |= FLAG_DEFLATE
    head = [
        MESSAGE_MAGIC,
        _HEADER.pack(PROTOCOL_VERSION, _KIND_CODES[msg.kind], flags, msg.round),
        _pack_str(msg.experiment),
        _pack_str(msg.sender),
        struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF),
        struct.pack("<I", len(body)),
        body,
    ]
    return b"".join(head)


def decode(data: bytes) -> FederationMessage:
    """Parse an envelope; checksum, truncation, and unknown kind/version
    raise distinct error types. Unknown versions are rejected before the
    body is parsed."""
    r = _Reader(data)
    if r.take(4) != MESSAGE_MAGIC:
        raise WireError("not an FGFL message (bad magic)")
    version, kind_code, flags, round_index = _HEADER.unpack(r.take(_HEADER.size))
    if version != PROTOCOL_VERSION:
        raise UnknownVersion(f"protocol version {version} unsupported")
    kind = _CODE_KINDS.get(kind_code)
    if kind is None:
        raise UnknownKind(f"unknown message kind code {kind_code}")
    experiment = r.string()
    sender = r.string()
    checksum = r.u32()
    body_len = r.u32()
    body = r.take(body_len)
    r.done()
    if zlib.crc32(body) & 0xFFFFFFFF != checksum:
        raise ChecksumMismatch(f"body checksum mismatch for kind {kind!r}")
    if flags & FLAG_DEFLATE:
        try:
            body = zlib.decompress(body)
        except zlib.error as exc:
            raise WireError(f"deflate body corrupt: {exc}") from exc
    return FederationMessage(
        kind=kind,
        experiment=experiment,
        round=round_index,
        sender=sender,
        body=_decode_body(kind, body),
    )


# ---------------------------------------------------------------------------
# chunking
# ---------------------------------------------------------------------------

MIN_CHUNK = 1024
DEFAULT_MAX_CHUNK = 128 * 1024

_CHUNK_HEAD = struct.Struct("<H16sIII")  # version, message id, index, total, length


@dataclass(frozen=True)
class Chunk:
    message_id: bytes
    index: int
    total: int
    payload: bytes

    def __post_init__(self):
        if len(self.message_id) != 16:
            raise WireError("chunk message id must be 16 bytes")
        if not 0 <= self.index < self.total:
            raise WireError(f"chunk index {self.index} outside [0, {self.total})")


def chunk_split(data: bytes, max_chunk: int = DEFAULT_MAX_CHUNK) -> list[Chunk]:
    """Slice ``data`` into chunks of at most ``max_chunk`` bytes."""
    if max_chunk < MIN_CHUNK:
        raise WireError(f"max_chunk must be >= {MIN_CHUNK}, got {max_chunk}")
    message_id = uuid.uuid4().bytes
    total = max(1, -(-len(data) // max_chunk))
    return [
        Chunk(
            message_id=message_id,
            index=i,
            total=total,
            payload=data[i * max_chunk : (i + 1) * max_chunk],
        )
        for i in range(total)
    ]


def chunk_join(chunks: list[Chunk]) -> bytes:
    """Reassemble; order-insensitive and duplicate-insensitive by index."""
    if not chunks:
        raise WireError("chunk_join: no chunks")
    message_id = chunks[0].message_id
    total = chunks[0].total
    by_index: dict[int, bytes] = {}
    for c in chunks:
        if c.message_id != message_id:
            raise WireError("chunk_join: mixed message ids")
        if c.total != total:
            raise WireError(f"chunk_join: inconsistent totals {c.total} vs {total}")
        prev = by_index.get(c.index)
        if prev is not None and prev != c.payload:
            raise WireError(f"chunk_join: conflicting duplicates at index {c.index}")
        by_index[c.index] = c.payload
    missing = [i for i in range(total) if i not in by_index]
    if missing:
        raise MissingChunks(message_id, missing, total)
    return b"".join(by_index[i] for i in range(total))


def encode_chunk(chunk: Chunk) -> bytes:
    return CHUNK_MAGIC + _CHUNK_HEAD.pack(
        PROTOCOL_VERSION, chunk.message_id, chunk.index, chunk.total, len(chunk.payload)
    ) + chunk.payload


def decode_chunk(data: bytes) -> Chunk:
    r = _Reader(data)
    if r.take(4) != CHUNK_MAGIC:
        raise WireError("not an FGCH chunk (bad magic)")
    version, message_id, index, total, length = _CHUNK_HEAD.unpack(r.take(_CHUNK_HEAD.size))
    if version != PROTOCOL_VERSION:
        raise UnknownVersion(f"chunk version {version} unsupported")
    payload = r.take(length)
    r.done()
    return Chunk(message_id=message_id, index=index, total=total, payload=payload)


class ChunkReassembler:
    """Buffers chunks per message id until each message completes.

    ``add`` returns the full byte string once every index has arrived.
    ``expire`` raises MissingChunks for partial messages older than the
    timeout, naming the missing indices.
    """

    def __init__(self, timeout: float = 30.0):
        self.timeout = timeout
        self._buffers: dict[bytes, dict[int, bytes]] = {}
        self._totals: dict[bytes, int] = {}
        self._first_seen: dict[bytes, float] = {}

    def add(self, chunk: Chunk, now: float = 0.0) -> bytes | None:
        mid = chunk.message_id
        buf = self._buffers.setdefault(mid, {})
        if mid not in self._totals:
            self._totals[mid] = chunk.total
            self._first_seen[mid] = now
        elif self._totals[mid] != chunk.total:
            raise WireError("reassembly: inconsistent chunk totals")
        buf.setdefault(chunk.index, chunk.payload)
        if len(buf) == self._totals[mid]:
            data = b"".join(buf[i] for i in range(self._totals[mid]))
            self._drop(mid)
            return data
        return None

    def expire(self, now: float) -> None:
        for mid in list(self._buffers):
            if now - self._first_seen[mid] > self.timeout:
                total = self._totals[mid]
                missing = [i for i in range(total) if i not in self._buffers[mid]]
                self._drop(mid)
                raise MissingChunks(mid, missing, total)

    def _drop(self, mid: bytes) -> None:
        self._buffers.pop(mid, None)
        self._totals.pop(mid, None)
        self._first_seen.pop(mid, None)


# ---------------------------------------------------------------------------
# topics
# ---------------------------------------------------------------------------

_IDENT_OK = frozenset("abcdefghijklmnopqrstuvwxyz0123456789-")


def _check_ident(name: str, value: str) -> str:
    if not value or not set(value) <= _IDENT_OK:
        raise BadTopic(f"{name} {value!r} must match [a-z0-9-]+")
    return value


def topic_for(kind: str, experiment: str, round_index: int | None = None, client: str | None = None) -> str:
    """Deterministic topic per message kind.

    join -> fl/<exp>/join; global-model -> fl/<exp>/round/<r>/global
    (published retained); local-update -> fl/<exp>/round/<r>/update/<client>;
    join-ack, round-abort and experiment-end ride fl/<exp>/control.
    """
    _check_ident("experiment id", experiment)
    if kind == KIND_JOIN:
        return f"fl/{experiment}/join"
    if kind in (KIND_JOIN_ACK, KIND_ROUND_ABORT, KIND_EXPERIMENT_END):
        return f"fl/{experiment}/control"
    if kind == KIND_GLOBAL_MODEL:
        if round_index is None:
            raise BadTopic("global-model topic needs a round index")
        return f"fl/{experiment}/round/{round_index}/global"
    if kind == KIND_LOCAL_UPDATE:
        if round_index is None or client is None:
            raise BadTopic("local-update topic needs a round index and client id")
        _check_ident("client id", client)
        return f"fl/{experiment}/round/{round_index}/update/{client}"
    raise UnknownKind(f"unknown message kind {kind!r}")


def topic_matches(pattern: str, topic: str) -> bool:
    """MQTT-style filter matching with single-level + and trailing #."""
    p_parts = pattern.split("/")
    t_parts = topic.split("/")
    for i, p in enumerate(p_parts):
        if p == "#":
            return i == len(p_parts) - 1
        if i >= len(t_parts):
            return False
        if p != "+" and p != t_parts[i]:
            return False
    return len(p_parts) == len(t_parts)
