"""Binary message protocol between limbs and server, plus its legality automaton.

Frame layout (all integers little-endian):

    offset  size  field
    0       4     magic "SPLT"
    4       2     protocol version (currently 1)
    6       2     message type tag
    8       8     session id
    16      4     payload length in bytes
    20      n     payload (per-type encoding below)
    20+n    4     CRC-32 (zlib) over header + payload

A frame is self-delimiting, so any byte stream of concatenated frames can be
cut apart with ``decode_frame``.  The CRC covers the header as well as the
payload: a flipped bit anywhere in the frame is detected at decode time.
Total frame size is capped at 64 MiB; both encoder and decoder enforce the
cap (the decoder before allocating anything).

Message semantics and the legal ordering are enforced by ``SessionState``,
which consumes the merged message sequence of a session in the order the
server processes it.  See PROTOCOL.md at the repository root for the
narrative version of both layers.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

MAGIC = b"SPLT"
VERSION = 1
MAX_FRAME_BYTES = 64 * 1024 * 1024

HEADER = struct.Struct("<4sHHQI")
TRAILER = struct.Struct("<I")

# Message type tags.
T_HELLO = 1
T_BATCH_META = 2
T_SMASHED = 3
T_SMASHED_GRAD = 4
T_LABELS = 5
T_HEAD_ACTS = 6
T_HEAD_GRAD = 7
T_METRICS = 8
T_END_EPOCH = 9
T_END_SESSION = 10

ROLE_LIMB = 0
ROLE_SERVER = 1

PHASE_TRAIN = 0
PHASE_EVAL_TRAIN = 1
PHASE_EVAL_TEST = 2

SPLIT_TRAIN = 0
SPLIT_TEST = 1

SERVER_INDEX = 0xFFFF

TOPOLOGY_IDS = {"vanilla": 0, "vertical": 1, "ushaped": 2}
TOPOLOGY_NAMES = {v: k for k, v in TOPOLOGY_IDS.items()}


class WireError(Exception):
    """Base for frame- and payload-level decode failures."""


class BadMagic(WireError):
    pass


class UnknownVersion(WireError):
    pass


class UnknownTag(WireError):
    pass


class LengthMismatch(WireError):
    pass


class BadChecksum(WireError):
    pass


class FrameTooLarge(WireError):
    pass


class ProtocolViolation(Exception):
    """A structurally valid message arrived where the protocol forbids it."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind}: {detail}" if detail else kind)


# ---------------------------------------------------------------------------
# Messages


class _Message:
    """Equality over dataclass fields with array-aware comparison."""

    tag: int = 0

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if not (isinstance(a, np.ndarray) and isinstance(b, np.ndarray)):
                    return False
                if a.shape != b.shape or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    def __hash__(self):  # pragma: no cover - messages are not hashed
        return id(self)


@dataclass(eq=False)
class Hello(_Message):
    role: int
    limb_index: int  # SERVER_INDEX for the server
    topology: int
    k: int
    config_digest: int

    tag = T_HELLO


@dataclass(eq=False)
class BatchMeta(_Message):
    phase: int
    epoch: int
    batch_index: int
    sample_ids: np.ndarray  # uint64 [batch_size]

    tag = T_BATCH_META

    @property
    def batch_size(self) -> int:
        return int(self.sample_ids.shape[0])


@dataclass(eq=False)
class _Tensor(_Message):
    """Common shape of the four activation/gradient messages.

    ``limb`` names the shard column the tensor belongs to: the producing limb
    for Smashed, the receiving limb for SmashedGrad, SERVER_INDEX for the
    head-side tensors that are not limb-specific.
    """

    phase: int
    epoch: int
    batch_index: int
    limb: int
    data: np.ndarray  # float32 [rows, cols]

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def cols(self) -> int:
        return int(self.data.shape[1])


@dataclass(eq=False)
class Smashed(_Tensor):
    tag = T_SMASHED


@dataclass(eq=False)
class SmashedGrad(_Tensor):
    tag = T_SMASHED_GRAD


@dataclass(eq=False)
class HeadActivations(_Tensor):
    tag = T_HEAD_ACTS


@dataclass(eq=False)
class HeadGrad(_Tensor):
    """Gradient w.r.t. the head input, plus that step's training loss.

    The loss rides along so the server's trace is complete in the u-shaped
    topology, where the loss is computed at limb 0.
    """

    loss: float = 0.0

    tag = T_HEAD_GRAD


@dataclass(eq=False)
class Labels(_Message):
    phase: int
    epoch: int
    batch_index: int
    labels: np.ndarray  # float32 [batch_size]

    tag = T_LABELS


@dataclass(eq=False)
class Metrics(_Message):
    epoch: int
    split: int  # SPLIT_TRAIN or SPLIT_TEST
    loss: float  # exact float32 value
    correct: int
    total: int

    tag = T_METRICS


@dataclass(eq=False)
class EndEpoch(_Message):
    """Epoch-close marker carrying the sender's parameter-group checksums."""

    epoch: int
    sender: int  # limb index or SERVER_INDEX
    groups: tuple  # ((name, checksum), ...)

    tag = T_END_EPOCH


@dataclass(eq=False)
class EndSession(_Message):
    epochs: int
    config_digest: int

    tag = T_END_SESSION


# ---------------------------------------------------------------------------
# Payload codecs

_HELLO = struct.Struct("<BHBHQ")
_BATCH_META = struct.Struct("<BII")
_TENSOR = struct.Struct("<BIIHII")
_LABELS = struct.Struct("<BIII")
_METRICS = struct.Struct("<IBfQQ")
_END_EPOCH = struct.Struct("<IHB")
_END_SESSION = struct.Struct("<IQ")


def _f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a).astype("<f4", copy=False).tobytes()


def _encode_payload(msg) -> bytes:
    if isinstance(msg, Hello):
        return _HELLO.pack(msg.role, msg.limb_index, msg.topology, msg.k, msg.config_digest)
    if isinstance(msg, BatchMeta):
        ids = np.ascontiguousarray(msg.sample_ids).astype("<u8", copy=False)
        return (
            _BATCH_META.pack(msg.phase, msg.epoch, msg.batch_index)
            + struct.pack("<I", ids.shape[0])
            + ids.tobytes()
        )
    if isinstance(msg, HeadGrad):
        return (
            _TENSOR.pack(msg.phase, msg.epoch, msg.batch_index, msg.limb, msg.rows, msg.cols)
            + struct.pack("<f", msg.loss)
            + _f32_bytes(msg.data)
        )
    if isinstance(msg, _Tensor):
        return (
            _TENSOR.pack(msg.phase, msg.epoch, msg.batch_index, msg.limb, msg.rows, msg.cols)
            + _f32_bytes(msg.data)
        )
    if isinstance(msg, Labels):
        return (
            _LABELS.pack(msg.phase, msg.epoch, msg.batch_index, msg.labels.shape[0])
            + _f32_bytes(msg.labels)
        )
    if isinstance(msg, Metrics):
        return _METRICS.pack(msg.epoch, msg.split, msg.loss, msg.correct, msg.total)
    if isinstance(msg, EndEpoch):
        out = [_END_EPOCH.pack(msg.epoch, msg.sender, len(msg.groups))]
        for name, checksum in msg.groups:
            raw = name.encode("ascii")
            out.append(struct.pack("<B", len(raw)))
            out.append(raw)
            out.append(struct.pack("<Q", checksum))
        return b"".join(out)
    if isinstance(msg, EndSession):
        return _END_SESSION.pack(msg.epochs, msg.config_digest)
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def _need(payload: bytes, n: int, what: str) -> None:
    if len(payload) < n:
        raise LengthMismatch(f"{what}: payload has {len(payload)} bytes, need {n}")


def _decode_tensor(cls, payload: bytes):
    _need(payload, _TENSOR.size, cls.__name__)
    phase, epoch, batch_index, limb, rows, cols = _TENSOR.unpack_from(payload)
    body = payload[_TENSOR.size :]
    if len(body) != rows * cols * 4:
        raise LengthMismatch(
            f"{cls.__name__}: {rows}x{cols} needs {rows * cols * 4} data bytes, got {len(body)}"
        )
    data = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)
    return cls(phase, epoch, batch_index, limb, data)


def _decode_payload(tag: int, payload: bytes):
    if tag == T_HELLO:
        if len(payload) != _HELLO.size:
            raise LengthMismatch(f"Hello: expected {_HELLO.size} bytes, got {len(payload)}")
        return Hello(*_HELLO.unpack(payload))
    if tag == T_BATCH_META:
        _need(payload, _BATCH_META.size + 4, "BatchMeta")
        phase, epoch, batch_index = _BATCH_META.unpack_from(payload)
        (count,) = struct.unpack_from("<I", payload, _BATCH_META.size)
        body = payload[_BATCH_META.size + 4 :]
        if len(body) != count * 8:
            raise LengthMismatch(f"BatchMeta: {count} ids need {count * 8} bytes, got {len(body)}")
        ids = np.frombuffer(body, dtype="<u8").astype(np.uint64)
        return BatchMeta(phase, epoch, batch_index, ids)
    if tag == T_SMASHED:
        return _decode_tensor(Smashed, payload)
    if tag == T_SMASHED_GRAD:
        return _decode_tensor(SmashedGrad, payload)
    if tag == T_HEAD_ACTS:
        return _decode_tensor(HeadActivations, payload)
    if tag == T_HEAD_GRAD:
        _need(payload, _TENSOR.size + 4, "HeadGrad")
        phase, epoch, batch_index, limb, rows, cols = _TENSOR.unpack_from(payload)
        (loss,) = struct.unpack_from("<f", payload, _TENSOR.size)
        body = payload[_TENSOR.size + 4 :]
        if len(body) != rows * cols * 4:
            raise LengthMismatch(
                f"HeadGrad: {rows}x{cols} needs {rows * cols * 4} data bytes, got {len(body)}"
            )
        data = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)
        return HeadGrad(phase, epoch, batch_index, limb, data, float(np.float32(loss)))
    if tag == T_LABELS:
        _need(payload, _LABELS.size, "Labels")
        phase, epoch, batch_index, count = _LABELS.unpack_from(payload)
        body = payload[_LABELS.size :]
        if len(body) != count * 4:
            raise LengthMismatch(f"Labels: {count} labels need {count * 4} bytes, got {len(body)}")
        labels = np.frombuffer(body, dtype="<f4").astype(np.float32)
        return Labels(phase, epoch, batch_index, labels)
    if tag == T_METRICS:
        if len(payload) != _METRICS.size:
            raise LengthMismatch(f"Metrics: expected {_METRICS.size} bytes, got {len(payload)}")
        epoch, split, loss, correct, total = _METRICS.unpack(payload)
        return Metrics(epoch, split, float(np.float32(loss)), correct, total)
    if tag == T_END_EPOCH:
        _need(payload, _END_EPOCH.size, "EndEpoch")
        epoch, sender, count = _END_EPOCH.unpack_from(payload)
        off = _END_EPOCH.size
        groups = []
        for _ in range(count):
            _need(payload, off + 1, "EndEpoch group")
            (nlen,) = struct.unpack_from("<B", payload, off)
            off += 1
            _need(payload, off + nlen + 8, "EndEpoch group")
            name = payload[off : off + nlen].decode("ascii")
            off += nlen
            (checksum,) = struct.unpack_from("<Q", payload, off)
            off += 8
            groups.append((name, checksum))
        if off != len(payload):
            raise LengthMismatch(f"EndEpoch: {len(payload) - off} trailing bytes")
        return EndEpoch(epoch, sender, tuple(groups))
    if tag == T_END_SESSION:
        if len(payload) != _END_SESSION.size:
            raise LengthMismatch(
                f"EndSession: expected {_END_SESSION.size} bytes, got {len(payload)}"
            )
        return EndSession(*_END_SESSION.unpack(payload))
    raise UnknownTag(f"message tag {tag}")


@dataclass(frozen=True)
class Frame:
    version: int
    msg_type: int
    session_id: int
    payload: bytes


def encode_frame(session_id: int, msg) -> bytes:
    """Encode a message into one wire frame."""
    payload = _encode_payload(msg)
    total = HEADER.size + len(payload) + TRAILER.size
    if total > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"frame of {total} bytes exceeds {MAX_FRAME_BYTES}")
    header = HEADER.pack(MAGIC, VERSION, msg.tag, session_id, len(payload))
    crc = zlib.crc32(payload, zlib.crc32(header)) & 0xFFFFFFFF
    return header + payload + TRAILER.pack(crc)


def decode_frame(buf, offset: int = 0) -> tuple[Frame, int]:
    """Decode one frame from ``buf`` at ``offset``.

    Returns (frame, offset after the frame).  Checks run strictly in order:
    header length, magic, version, declared size against the cap, available
    bytes, CRC.
    """
    view = memoryview(buf)[offset:]
    if len(view) < HEADER.size:
        raise LengthMismatch(f"truncated header: {len(view)} of {HEADER.size} bytes")
    magic, version, msg_type, session_id, payload_len = HEADER.unpack_from(view)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise UnknownVersion(f"version {version}")
    total = HEADER.size + payload_len + TRAILER.size
    if total > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"declared frame of {total} bytes exceeds {MAX_FRAME_BYTES}")
    if len(view) < total:
        raise LengthMismatch(f"truncated frame: {len(view)} of {total} bytes")
    payload = bytes(view[HEADER.size : HEADER.size + payload_len])
    (crc_stored,) = TRAILER.unpack_from(view, HEADER.size + payload_len)
    crc = zlib.crc32(payload, zlib.crc32(bytes(view[: HEADER.size]))) & 0xFFFFFFFF
    if crc != crc_stored:
        raise BadChecksum(f"crc {crc_stored:#010x} != computed {crc:#010x}")
    return Frame(version, msg_type, session_id, payload), offset + total


def decode_message(frame: Frame):
    return _decode_payload(frame.msg_type, frame.payload)


def encode_message(session_id: int, msg) -> bytes:
    return encode_frame(session_id, msg)


def decode(buf, offset: int = 0):
    """Convenience: decode one frame and its message.  Returns (msg, next_offset)."""
    frame, end = decode_frame(buf, offset)
    return decode_message(frame), end


# ---------------------------------------------------------------------------
# Session legality automaton


def expected_group_names(topology: str, k: int, sender: int) -> tuple[str, ...]:
    """Parameter groups a party reports at EndEpoch, in pinned order.

    Group names are canonical across topologies: limb_i for the shard layers,
    "hidden" and "head" for the server-side stack, wherever those layers
    physically live.
    """
    if sender == SERVER_INDEX:
        return ("hidden",) if topology == "ushaped" else ("hidden", "head")
    if topology == "ushaped" and sender == 0:
        return (f"limb_{sender}", "head")
    return (f"limb_{sender}",)


class SessionState:
    """Validates the merged message sequence of one training session.

    Messages are fed in the order the server processes them (its poll order
    is ascending limb index, which makes that order deterministic).  Any
    illegal message raises ProtocolViolation and poisons the state; the
    automaton itself never crashes on structurally valid messages.

    Within a step the k Smashed messages may arrive in any limb order, as may
    the k SmashedGrad messages; everything else is strictly ordered.
    """

    def __init__(self, topology: str, k: int, config_digest: Optional[int] = None):
        if topology not in TOPOLOGY_IDS:
            raise ValueError(f"unknown topology {topology!r}")
        if k < 1 or (topology == "vanilla" and k != 1):
            raise ValueError(f"bad k={k} for topology {topology}")
        self.topology = topology
        self.k = k
        self.config_digest = config_digest
        self.phase = "handshake"
        self.epoch = 0
        self.batch_index = 0
        self.train_batches = 0
        self.eval_split = SPLIT_TRAIN
        self.eval_batches = 0
        self.region = PHASE_TRAIN
        self.batch_size = 0
        self.smashed_cols: Optional[int] = None
        self.head_cols: Optional[int] = None
        self.pending_limbs = 0  # bitmask of limbs not yet heard from this step
        self.hello_limbs = 0
        self.hello_server = False
        self.end_epoch_next = 0  # SERVER_INDEX+1 encodes "server still pending"
        self.closed = False
        self.dead = False

    def _all_limbs_mask(self) -> int:
        return (1 << self.k) - 1

    def _fail(self, kind: str, detail: str = ""):
        self.dead = True
        raise ProtocolViolation(kind, detail)

    # -- handshake -----------------------------------------------------------

    def _feed_hello(self, msg: Hello):
        if self.phase != "handshake":
            self._fail("hello-after-handshake", f"phase={self.phase}")
        if msg.topology != TOPOLOGY_IDS[self.topology]:
            self._fail("topology-mismatch", f"{msg.topology} != {TOPOLOGY_IDS[self.topology]}")
        if msg.k != self.k:
            self._fail("k-mismatch", f"{msg.k} != {self.k}")
        if self.config_digest is None:
            self.config_digest = msg.config_digest
        elif msg.config_digest != self.config_digest:
            self._fail(
                "digest-mismatch",
                f"{msg.config_digest:#018x} != {self.config_digest:#018x}",
            )
        if msg.role == ROLE_SERVER:
            if msg.limb_index != SERVER_INDEX:
                self._fail("bad-hello", f"server hello with limb_index {msg.limb_index}")
            if self.hello_server:
                self._fail("duplicate-hello", "server")
            self.hello_server = True
        elif msg.role == ROLE_LIMB:
            if not 0 <= msg.limb_index < self.k:
                self._fail("bad-hello", f"limb_index {msg.limb_index} out of range")
            bit = 1 << msg.limb_index
            if self.hello_limbs & bit:
                self._fail("duplicate-hello", f"limb {msg.limb_index}")
            self.hello_limbs |= bit
        else:
            self._fail("bad-hello", f"unknown role {msg.role}")
        if self.hello_server and self.hello_limbs == self._all_limbs_mask():
            self.phase = "await_batch"

    # -- step plumbing ---------------------------------------------------------

    def _check_step_fields(self, msg, expect_phase: int):
        if msg.phase != expect_phase:
            self._fail("phase-mismatch", f"{type(msg).__name__} phase {msg.phase} != {expect_phase}")
        if msg.epoch != self.epoch:
            self._fail("epoch-mismatch", f"{type(msg).__name__} epoch {msg.epoch} != {self.epoch}")
        if msg.batch_index != self.batch_index:
            self._fail(
                "batch-index-mismatch",
                f"{type(msg).__name__} batch {msg.batch_index} != {self.batch_index}",
            )

    def _current_phase_value(self) -> int:
        if self.region == PHASE_TRAIN:
            return PHASE_TRAIN
        return PHASE_EVAL_TRAIN if self.eval_split == SPLIT_TRAIN else PHASE_EVAL_TEST

    def _feed_batch_meta(self, msg: BatchMeta):
        if self.phase not in ("await_batch", "eval"):
            self._fail("unexpected-message", f"BatchMeta in phase {self.phase}")
        if msg.batch_size == 0:
            self._fail("empty-batch", "BatchMeta with zero sample ids")
        if self.phase == "await_batch":
            if msg.phase == PHASE_TRAIN:
                if msg.epoch != self.epoch or msg.batch_index != self.train_batches:
                    self._fail(
                        "batch-sequence",
                        f"train batch {msg.epoch}/{msg.batch_index}, "
                        f"expected {self.epoch}/{self.train_batches}",
                    )
                self.region = PHASE_TRAIN
            elif msg.phase == PHASE_EVAL_TRAIN:
                if self.train_batches == 0:
                    self._fail("batch-sequence", "eval before any training batch")
                if msg.epoch != self.epoch or msg.batch_index != 0:
                    self._fail(
                        "batch-sequence",
                        f"eval_train batch {msg.epoch}/{msg.batch_index}, "
                        f"expected {self.epoch}/0",
                    )
                self.region = PHASE_EVAL_TRAIN
                self.eval_split = SPLIT_TRAIN
                self.eval_batches = 0
            else:
                self._fail("batch-sequence", "eval_test batch outside evaluation region")
        else:  # phase == "eval": continue current eval pass or switch after metrics
            want = self._current_phase_value()
            if msg.phase != want:
                self._fail(
                    "batch-sequence",
                    f"eval batch phase {msg.phase}, expected {want}",
                )
            if msg.epoch != self.epoch or msg.batch_index != self.eval_batches:
                self._fail(
                    "batch-sequence",
                    f"eval batch {msg.epoch}/{msg.batch_index}, "
                    f"expected {self.epoch}/{self.eval_batches}",
                )
            self.region = want
        self.batch_index = msg.batch_index
        self.batch_size = msg.batch_size
        self.pending_limbs = self._all_limbs_mask()
        self.phase = "await_smashed"

    def _feed_smashed(self, msg: Smashed):
        if self.phase != "await_smashed":
            self._fail("unexpected-message", f"Smashed in phase {self.phase}")
        self._check_step_fields(msg, self._current_phase_value())
        if not 0 <= msg.limb < self.k:
            self._fail("bad-limb-index", f"Smashed from limb {msg.limb}")
        bit = 1 << msg.limb
        if not self.pending_limbs & bit:
            self._fail("duplicate-limb", f"second Smashed from limb {msg.limb}")
        if msg.rows != self.batch_size:
            self._fail("rows-mismatch", f"Smashed rows {msg.rows} != batch {self.batch_size}")
        if self.smashed_cols is None:
            self.smashed_cols = msg.cols
        elif msg.cols != self.smashed_cols:
            self._fail("cols-mismatch", f"Smashed cols {msg.cols} != {self.smashed_cols}")
        self.pending_limbs &= ~bit
        if self.pending_limbs == 0:
            if self.topology == "ushaped":
                self.phase = "await_head_acts"
            else:
                self.phase = "await_labels"

    def _feed_labels(self, msg: Labels):
        if self.topology == "ushaped":
            self._fail("labels-forbidden", "Labels message in u-shaped topology")
        if self.phase != "await_labels":
            self._fail("unexpected-message", f"Labels in phase {self.phase}")
        self._check_step_fields(msg, self._current_phase_value())
        if msg.labels.shape[0] != self.batch_size:
            self._fail(
                "rows-mismatch", f"Labels count {msg.labels.shape[0]} != batch {self.batch_size}"
            )
        self._finish_forward()

    def _feed_head_acts(self, msg: HeadActivations):
        if self.topology != "ushaped":
            self._fail("head-forbidden", "HeadActivations outside u-shaped topology")
        if self.phase != "await_head_acts":
            self._fail("unexpected-message", f"HeadActivations in phase {self.phase}")
        self._check_step_fields(msg, self._current_phase_value())
        if msg.limb != SERVER_INDEX:
            self._fail("bad-limb-index", f"HeadActivations with limb {msg.limb}")
        if msg.rows != self.batch_size:
            self._fail(
                "rows-mismatch", f"HeadActivations rows {msg.rows} != batch {self.batch_size}"
            )
        if self.head_cols is None:
            self.head_cols = msg.cols
        elif msg.cols != self.head_cols:
            self._fail("cols-mismatch", f"HeadActivations cols {msg.cols} != {self.head_cols}")
        if self.region == PHASE_TRAIN:
            self.phase = "await_head_grad"
        else:
            self._finish_eval_step()

    def _feed_head_grad(self, msg: HeadGrad):
        if self.topology != "ushaped":
            self._fail("head-forbidden", "HeadGrad outside u-shaped topology")
        if self.phase != "await_head_grad":
            self._fail("unexpected-message", f"HeadGrad in phase {self.phase}")
        self._check_step_fields(msg, PHASE_TRAIN)
        if msg.limb != 0:
            self._fail("bad-limb-index", f"HeadGrad from limb {msg.limb}")
        if msg.rows != self.batch_size or msg.cols != self.head_cols:
            self._fail(
                "rows-mismatch",
                f"HeadGrad {msg.rows}x{msg.cols}, expected {self.batch_size}x{self.head_cols}",
            )
        self.phase = "backward"
        self.pending_limbs = self._all_limbs_mask()

    def _finish_forward(self):
        """Forward half of the step is complete (vanilla/vertical path)."""
        if self.region == PHASE_TRAIN:
            self.phase = "backward"
            self.pending_limbs = self._all_limbs_mask()
        else:
            self._finish_eval_step()

    def _finish_eval_step(self):
        self.eval_batches += 1
        self.phase = "eval"

    def _feed_smashed_grad(self, msg: SmashedGrad):
        if self.phase != "backward":
            self._fail("unexpected-message", f"SmashedGrad in phase {self.phase}")
        self._check_step_fields(msg, PHASE_TRAIN)
        if not 0 <= msg.limb < self.k:
            self._fail("bad-limb-index", f"SmashedGrad for limb {msg.limb}")
        bit = 1 << msg.limb
        if not self.pending_limbs & bit:
            self._fail("duplicate-limb", f"second SmashedGrad for limb {msg.limb}")
        if msg.rows != self.batch_size or msg.cols != self.smashed_cols:
            self._fail(
                "rows-mismatch",
                f"SmashedGrad {msg.rows}x{msg.cols}, "
                f"expected {self.batch_size}x{self.smashed_cols}",
            )
        self.pending_limbs &= ~bit
        if self.pending_limbs == 0:
            self.train_batches += 1
            self.batch_index = 0
            self.phase = "await_batch"

    def _feed_metrics(self, msg: Metrics):
        if self.phase != "eval":
            self._fail("unexpected-message", f"Metrics in phase {self.phase}")
        if self.eval_batches == 0:
            self._fail("batch-sequence", "Metrics before any evaluation batch")
        if msg.epoch != self.epoch:
            self._fail("epoch-mismatch", f"Metrics epoch {msg.epoch} != {self.epoch}")
        if msg.split != self.eval_split:
            self._fail("split-mismatch", f"Metrics split {msg.split} != {self.eval_split}")
        if msg.total == 0 or msg.correct > msg.total:
            self._fail("bad-metrics", f"correct={msg.correct} total={msg.total}")
        if self.eval_split == SPLIT_TRAIN:
            self.eval_split = SPLIT_TEST
            self.eval_batches = 0
            self.region = PHASE_EVAL_TEST
        else:
            self.phase = "end_epoch"
            self.end_epoch_next = SERVER_INDEX + 1

    def _feed_end_epoch(self, msg: EndEpoch):
        if self.phase != "end_epoch":
            self._fail("unexpected-message", f"EndEpoch in phase {self.phase}")
        if msg.epoch != self.epoch:
            self._fail("epoch-mismatch", f"EndEpoch epoch {msg.epoch} != {self.epoch}")
        if self.end_epoch_next == SERVER_INDEX + 1:
            expected_sender = SERVER_INDEX
        else:
            expected_sender = self.end_epoch_next
        if msg.sender != expected_sender:
            self._fail(
                "end-epoch-order",
                f"EndEpoch from {msg.sender}, expected {expected_sender}",
            )
        want = expected_group_names(self.topology, self.k, msg.sender)
        got = tuple(name for name, _ in msg.groups)
        if got != want:
            self._fail("bad-groups", f"EndEpoch groups {got}, expected {want}")
        if msg.sender == SERVER_INDEX:
            self.end_epoch_next = 0
        else:
            self.end_epoch_next = msg.sender + 1
            if self.end_epoch_next == self.k:
                self.epoch += 1
                self.train_batches = 0
                self.batch_index = 0
                self.region = PHASE_TRAIN
                self.phase = "await_batch"

    def _feed_end_session(self, msg: EndSession):
        if self.phase != "await_batch" or self.train_batches != 0 or self.epoch == 0:
            self._fail("unexpected-message", f"EndSession in phase {self.phase}")
        if msg.epochs != self.epoch:
            self._fail("epoch-mismatch", f"EndSession epochs {msg.epochs} != {self.epoch}")
        if self.config_digest is not None and msg.config_digest != self.config_digest:
            self._fail("digest-mismatch", f"EndSession digest {msg.config_digest:#018x}")
        self.closed = True
        self.phase = "closed"

    def feed(self, msg) -> None:
        """Advance the automaton by one message; raises ProtocolViolation."""
        if self.dead:
            self._fail("session-dead", "message after a protocol violation")
        if self.closed:
            self._fail("session-closed", f"{type(msg).__name__} after EndSession")
        if isinstance(msg, Hello):
            self._feed_hello(msg)
        elif self.phase == "handshake":
            self._fail("handshake-incomplete", f"{type(msg).__name__} before all hellos")
        elif isinstance(msg, BatchMeta):
            self._feed_batch_meta(msg)
        elif isinstance(msg, Smashed):
            self._feed_smashed(msg)
        elif isinstance(msg, Labels):
            self._feed_labels(msg)
        elif isinstance(msg, HeadActivations):
            self._feed_head_acts(msg)
        elif isinstance(msg, HeadGrad):
            self._feed_head_grad(msg)
        elif isinstance(msg, SmashedGrad):
            self._feed_smashed_grad(msg)
        elif isinstance(msg, Metrics):
            self._feed_metrics(msg)
        elif isinstance(msg, EndEpoch):
            self._feed_end_epoch(msg)
        elif isinstance(msg, EndSession):
            self._feed_end_session(msg)
        else:
            self._fail("unexpected-message", f"unknown message {type(msg).__name__}")

    def feed_all(self, messages) -> None:
        for msg in messages:
            self.feed(msg)
