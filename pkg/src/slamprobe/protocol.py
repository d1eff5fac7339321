"""Length-prefixed binary message framing between host and algorithm.

Wire format (little-endian), identical in both directions:

    length  u32   byte count of type + payload (so always >= 1)
    type    u8
    payload length - 1 bytes

Message types:

    0x01 INIT      host -> algo   JSON sensor table
    0x02 READY     algo -> host   empty
    0x03 FRAME     host -> algo   u32 sensor_id, u64 timestamp_ns,
                                  u32 payload_len, payload
                                  (payload encodings as in the dataset file)
    0x04 ESTIMATE  algo -> host   u64 timestamp_ns, 3 x f64 translation,
                                  4 x f64 quaternion wxyz,
                                  u8 status (0=Ok, 1=Lost, 2=NoEstimate)
    0x05 EVENT     algo -> host   UTF-8 JSON object
    0x06 SHUTDOWN  host -> algo   empty

The streaming decoder never raises anything but :class:`ProtocolError`
on malformed input, and reports the offset of the first bad byte, so a
misbehaving child can be diagnosed rather than crash the host.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator, Optional

from .errors import ProtocolError

MSG_INIT = 0x01
MSG_READY = 0x02
MSG_FRAME = 0x03
MSG_ESTIMATE = 0x04
MSG_EVENT = 0x05
MSG_SHUTDOWN = 0x06

KNOWN_TYPES = frozenset(
    (MSG_INIT, MSG_READY, MSG_FRAME, MSG_ESTIMATE, MSG_EVENT, MSG_SHUTDOWN)
)

# Generous cap; a legitimate frame payload is far smaller. Anything above
# is treated as a framing error instead of an allocation request.
MAX_MESSAGE_BYTES = 64 * 1024 * 1024

STATUS_OK = 0
STATUS_LOST = 1
STATUS_NO_ESTIMATE = 2


@dataclass(frozen=True)
class WireMessage:
    msg_type: int
    payload: bytes


def encode_message(msg_type: int, payload: bytes = b"") -> bytes:
    if msg_type not in KNOWN_TYPES:
        raise ProtocolError(f"refusing to encode unknown message type {msg_type:#x}")
    if 1 + len(payload) > MAX_MESSAGE_BYTES:
        raise ProtocolError(f"message payload of {len(payload)} bytes exceeds cap")
    return struct.pack("<IB", 1 + len(payload), msg_type) + payload


class StreamDecoder:
    """Incremental decoder over an arbitrary chunking of the byte stream."""

    def __init__(self):
        self._buffer = bytearray()
        self._offset = 0  # stream offset of buffer[0]

    def feed(self, data: bytes) -> list[WireMessage]:
        self._buffer.extend(data)
        messages = []
        while True:
            msg = self._try_decode()
            if msg is None:
                return messages
            messages.append(msg)

    def _try_decode(self) -> Optional[WireMessage]:
        if len(self._buffer) < 4:
            return None
        (length,) = struct.unpack_from("<I", self._buffer)
        if length < 1:
            raise ProtocolError("message length field is zero", self._offset)
        if length > MAX_MESSAGE_BYTES:
            raise ProtocolError(
                f"message length {length} exceeds the {MAX_MESSAGE_BYTES} byte cap",
                self._offset,
            )
        if len(self._buffer) < 4 + length:
            return None
        msg_type = self._buffer[4]
        if msg_type not in KNOWN_TYPES:
            raise ProtocolError(
                f"unknown message type {msg_type:#x}", self._offset + 4
            )
        payload = bytes(self._buffer[5 : 4 + length])
        del self._buffer[: 4 + length]
        self._offset += 4 + length
        return WireMessage(msg_type, payload)

    def finish(self) -> None:
        """Signal end of stream; leftover bytes are a truncated message."""
        if self._buffer:
            raise ProtocolError(
                f"stream ended inside a message ({len(self._buffer)} byte(s) pending)",
                self._offset,
            )

    @property
    def offset(self) -> int:
        return self._offset


def write_message(stream: BinaryIO, msg_type: int, payload: bytes = b"") -> None:
    stream.write(encode_message(msg_type, payload))
    stream.flush()


def read_message(stream: BinaryIO) -> Optional[WireMessage]:
    """Blocking single-message read; None on clean EOF at a boundary."""
    head = stream.read(4)
    if not head:
        return None
    if len(head) < 4:
        raise ProtocolError("stream ended inside a length prefix")
    (length,) = struct.unpack("<I", head)
    if length < 1 or length > MAX_MESSAGE_BYTES:
        raise ProtocolError(f"invalid message length {length}")
    body = stream.read(length)
    if len(body) < length:
        raise ProtocolError("stream ended inside a message body")
    msg_type = body[0]
    if msg_type not in KNOWN_TYPES:
        raise ProtocolError(f"unknown message type {msg_type:#x}")
    return WireMessage(msg_type, body[1:])


def iter_messages(stream: BinaryIO) -> Iterator[WireMessage]:
    while True:
        msg = read_message(stream)
        if msg is None:
            return
        yield msg


# ---------------------------------------------------------------------------
# Typed payloads
# ---------------------------------------------------------------------------

_ESTIMATE = struct.Struct("<Q3d4dB")


def encode_estimate(
    timestamp_ns: int,
    translation: tuple[float, float, float],
    rotation: tuple[float, float, float, float],
    status: int,
) -> bytes:
    return _ESTIMATE.pack(timestamp_ns, *translation, *rotation, status)


def decode_estimate(payload: bytes):
    if len(payload) != _ESTIMATE.size:
        raise ProtocolError(
            f"ESTIMATE payload is {len(payload)} bytes, expected {_ESTIMATE.size}"
        )
    values = _ESTIMATE.unpack(payload)
    timestamp_ns = values[0]
    translation = values[1:4]
    rotation = values[4:8]
    status = values[8]
    if status not in (STATUS_OK, STATUS_LOST, STATUS_NO_ESTIMATE):
        raise ProtocolError(f"unknown estimate status {status}")
    return timestamp_ns, translation, rotation, status


def encode_frame_payload(sensor_id: int, timestamp_ns: int, body: bytes) -> bytes:
    return struct.pack("<IQI", sensor_id, timestamp_ns, len(body)) + body


def decode_frame_payload(payload: bytes) -> tuple[int, int, bytes]:
    if len(payload) < 16:
        raise ProtocolError(f"FRAME payload of {len(payload)} bytes lacks its header")
    sensor_id, timestamp_ns, body_len = struct.unpack_from("<IQI", payload)
    body = payload[16:]
    if len(body) != body_len:
        raise ProtocolError(
            f"FRAME declares {body_len} payload bytes but carries {len(body)}"
        )
    return sensor_id, timestamp_ns, body
