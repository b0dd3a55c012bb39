"""CoAP subset: codec plus reliable request/response messaging."""

from .codec import (
    CONTENT_FORMAT_JSON,
    CoapError,
    CoapMessage,
    Code,
    InvalidMessage,
    MalformedPdu,
    MessageType,
    OptionNumber,
    decode,
    encode,
    path_options,
    query_options,
)
from .messaging import (
    ACK_BACKOFF,
    ACK_TIMEOUT,
    EXCHANGE_LIFETIME,
    MAX_RETRANSMIT,
    CoapEndpoint,
    PendingRequest,
    Timeout,
)

__all__ = [
    "ACK_BACKOFF",
    "ACK_TIMEOUT",
    "CONTENT_FORMAT_JSON",
    "CoapEndpoint",
    "CoapError",
    "CoapMessage",
    "Code",
    "EXCHANGE_LIFETIME",
    "InvalidMessage",
    "MAX_RETRANSMIT",
    "MalformedPdu",
    "MessageType",
    "OptionNumber",
    "PendingRequest",
    "Timeout",
    "decode",
    "encode",
    "path_options",
    "query_options",
]
