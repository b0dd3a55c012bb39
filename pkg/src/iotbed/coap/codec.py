"""CoAP PDU codec for the option subset the testbed speaks.

Wire layout (4-byte fixed header, then token, delta-encoded options, and an
0xFF-prefixed payload):

    0                   1                   2                   3
    |Ver|T|  TKL  |     Code      |          Message ID           |
    |  Token (TKL bytes) ...
    |  Options (delta encoded) ...
    |0xFF|  Payload ...

The decoder is total: any byte string either yields a message or raises
:class:`MalformedPdu`. Option and payload sizes are capped so hostile
inputs cannot force unbounded allocation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

MAX_TOKEN_LENGTH = 8
MAX_OPTION_LENGTH = 64 * 1024
MAX_PAYLOAD_LENGTH = 64 * 1024


class CoapError(Exception):
    pass


class InvalidMessage(CoapError):
    """Encoding was asked for a message that violates the model invariants."""


class MalformedPdu(CoapError):
    """Input bytes do not parse as a supported CoAP PDU."""


class MessageType(IntEnum):
    CON = 0
    NON = 1
    ACK = 2
    RST = 3


class Code(IntEnum):
    EMPTY = 0x00
    GET = 0x01
    POST = 0x02
    PUT = 0x03
    DELETE = 0x04
    CREATED = 0x41       # 2.01
    DELETED = 0x42       # 2.02
    CHANGED = 0x44       # 2.04
    CONTENT = 0x45       # 2.05
    BAD_REQUEST = 0x80   # 4.00
    UNAUTHORIZED = 0x81  # 4.01
    NOT_FOUND = 0x84     # 4.04

    @property
    def dotted(self) -> str:
        return f"{self.value >> 5}.{self.value & 0x1F:02d}"

    def is_request(self) -> bool:
        return 0x01 <= self.value <= 0x1F

    def is_response(self) -> bool:
        return self.value >= 0x40


class OptionNumber(IntEnum):
    OBSERVE = 6
    URI_PATH = 11
    CONTENT_FORMAT = 12
    URI_QUERY = 15


SUPPORTED_OPTIONS = frozenset(int(n) for n in OptionNumber)

CONTENT_FORMAT_JSON = 50


@dataclass
class CoapMessage:
    """Decoded CoAP PDU. Options are (number, raw value) pairs kept sorted
    ascending by number; equal numbers keep insertion order (repeatable
    options such as Uri-Path)."""

    mtype: MessageType
    code: Code
    message_id: int
    token: bytes = b""
    options: list[tuple[int, bytes]] = field(default_factory=list)
    payload: bytes = b""
    version: int = 1

    def option_values(self, number: int) -> list[bytes]:
        return [v for n, v in self.options if n == number]

    def uri_path(self) -> str:
        return "/" + "/".join(self.uri_path_segments())

    def uri_path_segments(self) -> list[str]:
        return [v.decode("utf-8", "replace") for v in self.option_values(OptionNumber.URI_PATH)]

    def uri_queries(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for raw in self.option_values(OptionNumber.URI_QUERY):
            text = raw.decode("utf-8", "replace")
            key, _, value = text.partition("=")
            out[key] = value
        return out

    def observe(self) -> int | None:
        values = self.option_values(OptionNumber.OBSERVE)
        if not values:
            return None
        return int.from_bytes(values[0], "big")


def _check(msg: CoapMessage) -> None:
    if msg.version != 1:
        raise InvalidMessage(f"unsupported version {msg.version}")
    if len(msg.token) > MAX_TOKEN_LENGTH:
        raise InvalidMessage(f"token too long: {len(msg.token)}")
    if not 0 <= msg.message_id <= 0xFFFF:
        raise InvalidMessage(f"message id out of range: {msg.message_id}")
    last = 0
    for number, value in msg.options:
        if number not in SUPPORTED_OPTIONS:
            raise InvalidMessage(f"unsupported option number {number}")
        if number < last:
            raise InvalidMessage("options not sorted ascending")
        if len(value) > MAX_OPTION_LENGTH:
            raise InvalidMessage("option value too long")
        last = number
    if len(msg.payload) > MAX_PAYLOAD_LENGTH:
        raise InvalidMessage("payload too long")


def _encode_extended(value: int) -> tuple[int, bytes]:
    """Split an option delta or length into its 4-bit nibble + extension."""
    if value < 13:
        return value, b""
    if value < 13 + 256:
        return 13, bytes([value - 13])
    return 14, (value - 269).to_bytes(2, "big")


def encode(msg: CoapMessage) -> bytes:
    _check(msg)
    out = bytearray()
    out.append((msg.version << 6) | (int(msg.mtype) << 4) | len(msg.token))
    out.append(int(msg.code))
    out += msg.message_id.to_bytes(2, "big")
    out += msg.token
    previous = 0
    for number, value in msg.options:
        delta_nib, delta_ext = _encode_extended(number - previous)
        len_nib, len_ext = _encode_extended(len(value))
        out.append((delta_nib << 4) | len_nib)
        out += delta_ext
        out += len_ext
        out += value
        previous = number
    if msg.payload:
        out.append(0xFF)
        out += msg.payload
    return bytes(out)


def _decode_extended(nibble: int, data: bytes, pos: int) -> tuple[int, int]:
    if nibble < 13:
        return nibble, pos
    if nibble == 13:
        if pos >= len(data):
            raise MalformedPdu("truncated option extension")
        return data[pos] + 13, pos + 1
    if nibble == 14:
        if pos + 2 > len(data):
            raise MalformedPdu("truncated option extension")
        return int.from_bytes(data[pos:pos + 2], "big") + 269, pos + 2
    raise MalformedPdu("reserved option nibble 15")


def decode(data: bytes) -> CoapMessage:
    if len(data) < 4:
        raise MalformedPdu("short header")
    first = data[0]
    version = first >> 6
    if version != 1:
        raise MalformedPdu(f"unsupported version {version}")
    mtype = MessageType((first >> 4) & 0x3)
    token_length = first & 0x0F
    if token_length > MAX_TOKEN_LENGTH:
        raise MalformedPdu(f"bad token length {token_length}")
    try:
        code = Code(data[1])
    except ValueError as exc:
        raise MalformedPdu(f"unsupported code 0x{data[1]:02x}") from exc
    message_id = int.from_bytes(data[2:4], "big")
    pos = 4
    if pos + token_length > len(data):
        raise MalformedPdu("truncated token")
    token = data[pos:pos + token_length]
    pos += token_length

    options: list[tuple[int, bytes]] = []
    number = 0
    payload = b""
    while pos < len(data):
        byte = data[pos]
        pos += 1
        if byte == 0xFF:
            if pos >= len(data):
                raise MalformedPdu("payload marker with empty payload")
            payload = data[pos:]
            if len(payload) > MAX_PAYLOAD_LENGTH:
                raise MalformedPdu("payload too long")
            break
        delta, pos = _decode_extended(byte >> 4, data, pos)
        length, pos = _decode_extended(byte & 0x0F, data, pos)
        if length > MAX_OPTION_LENGTH:
            raise MalformedPdu("option value too long")
        number += delta
        if number not in SUPPORTED_OPTIONS:
            raise MalformedPdu(f"unsupported option number {number}")
        if pos + length > len(data):
            raise MalformedPdu("option value overruns pdu")
        options.append((number, data[pos:pos + length]))
        pos += length

    return CoapMessage(
        mtype=mtype,
        code=code,
        message_id=message_id,
        token=token,
        options=options,
        payload=payload,
    )


def path_options(path: str) -> list[tuple[int, bytes]]:
    """Uri-Path options for a /seg/seg path, ready to splice into a message."""
    return [(int(OptionNumber.URI_PATH), seg.encode()) for seg in path.strip("/").split("/") if seg]


def query_options(queries: dict[str, object]) -> list[tuple[int, bytes]]:
    return [(int(OptionNumber.URI_QUERY), f"{k}={v}".encode()) for k, v in queries.items()]
