"""DNP3m application-layer framing.

Every frame on the wire is::

    [direction (1 byte)] [total length (1 byte)] [payload (total length - 2 bytes)]

``direction`` is ``0x00`` for a request and ``0x01`` for a response, and the
length byte counts the whole frame including the two header bytes, so a single
frame carries at most 253 payload bytes.

Longer messages are split into frames. A full frame (length 255) means "more
follows"; the message ends with the first frame shorter than 255 bytes. When a
body is an exact positive multiple of 253 bytes an empty terminal frame is
appended.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

HEADER_SIZE = 2
MAX_FRAME_SIZE = 255
MAX_PAYLOAD = MAX_FRAME_SIZE - HEADER_SIZE


class FrameError(ValueError):
    """Base class for framing errors."""


class PayloadTooLarge(FrameError):
    pass


class Truncated(FrameError):
    pass


class BadDirection(FrameError):
    pass


class BadLength(FrameError):
    pass


class MixedDirection(FrameError):
    pass


class IncompleteMessage(FrameError):
    pass


class Direction(enum.IntEnum):
    REQUEST = 0x00
    RESPONSE = 0x01


@dataclass(frozen=True)
class Frame:
    direction: Direction
    payload: bytes = b""

    @property
    def total_length(self) -> int:
        return len(self.payload) + HEADER_SIZE

    @property
    def is_full(self) -> bool:
        return self.total_length == MAX_FRAME_SIZE


@dataclass(frozen=True)
class Message:
    direction: Direction
    body: bytes = b""


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(
            f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}"
        )
    return bytes((int(frame.direction), frame.total_length)) + bytes(frame.payload)


def decode_frame(data: bytes) -> tuple[Frame, bytes]:
    """Decode one frame from the front of ``data``.

    Returns the frame and whatever bytes follow it. Only the declared
    ``total_length`` bytes are consumed.
    """
    if len(data) < HEADER_SIZE:
        raise Truncated(f"need at least {HEADER_SIZE} bytes, got {len(data)}")
    direction_byte, total = data[0], data[1]
    if direction_byte not in (Direction.REQUEST, Direction.RESPONSE):
        raise BadDirection(f"direction byte 0x{direction_byte:02x}")
    if total < HEADER_SIZE:
        raise BadLength(f"length byte {total} is smaller than the header")
    if len(data) < total:
        raise Truncated(f"frame declares {total} bytes, only {len(data)} available")
    frame = Frame(Direction(direction_byte), bytes(data[HEADER_SIZE:total]))
    return frame, bytes(data[total:])


def fragment(message: Message) -> list[Frame]:
    body = bytes(message.body)
    frames = [
        Frame(message.direction, body[i : i + MAX_PAYLOAD])
        for i in range(0, len(body), MAX_PAYLOAD)
    ]
    if not frames or frames[-1].is_full:
        frames.append(Frame(message.direction, b""))
    return frames


def reassemble(frames: list[Frame]) -> Message:
    if not frames:
        raise IncompleteMessage("no frames")
    direction = frames[0].direction
    for i, frame in enumerate(frames):
        if frame.direction != direction:
            raise MixedDirection(f"frame {i} has direction {frame.direction.name}")
        if not frame.is_full and i != len(frames) - 1:
            raise FrameError(f"frame {i} terminates the message but more frames follow")
    if frames[-1].is_full:
        raise IncompleteMessage("stream ends on a full frame")
    return Message(direction, b"".join(f.payload for f in frames))


def encode_message(message: Message) -> list[bytes]:
    return [encode_frame(f) for f in fragment(message)]


class MessageAssembler:
    """Incremental counterpart of :func:`reassemble` for frames arriving one at a time."""

    def __init__(self) -> None:
        self._pending: list[Frame] = []

    def push(self, frame: Frame) -> Message | None:
        if self._pending and frame.direction != self._pending[0].direction:
            self._pending = []
            raise MixedDirection("direction changed mid-message")
        self._pending.append(frame)
        if frame.is_full:
            return None
        frames, self._pending = self._pending, []
        return reassemble(frames)


class StreamDecoder:
    """Split a TCP byte stream into frames, holding back partial frames."""

    def __init__(self) -> None:
        self._buffer = b""

    def feed(self, data: bytes) -> list[Frame]:
        self._buffer += data
        frames = []
        while len(self._buffer) >= HEADER_SIZE:
            try:
                frame, self._buffer = decode_frame(self._buffer)
            except Truncated:
                break
            frames.append(frame)
        return frames

    @property
    def pending(self) -> int:
        return len(self._buffer)
