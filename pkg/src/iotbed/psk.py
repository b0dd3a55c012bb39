"""Pre-shared-key secured datagram sessions.

A deliberately small stand-in for DTLS-PSK that keeps the security contract
(PSK authentication, AES-128 confidentiality and integrity, anti-replay)
while dropping the wire ceremony:

* 1-RTT handshake: ClientHello{random, psk_id} / ServerHello{random,
  session_id, transcript MAC keyed by the PSK},
* directional AES-128-GCM keys derived with HKDF-SHA256 over
  (psk_key, client_random || server_random),
* records laid out as session_id (8 bytes) || seq (6 bytes, big endian)
  || ciphertext, with the header authenticated as AAD,
* a 64-entry sliding replay window per receive direction.

Handshake PDUs carry a leading type byte below 0x10; session ids are
assigned with a first byte of at least 0x10, so the two traffic classes
are distinguishable without extra framing and records stay bit-exact.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import random
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .clock import Scheduler
from .transport import Address, TransportError

logger = logging.getLogger(__name__)

PSK_KEY_LENGTH = 16
SESSION_ID_LENGTH = 8
SEQ_LENGTH = 6
HEADER_LENGTH = SESSION_ID_LENGTH + SEQ_LENGTH
MAX_SEQ = 2 ** 48 - 1
REPLAY_WINDOW = 64
KEY_LABEL = b"iotbed-psk-v1"

MSG_CLIENT_HELLO = 0x01
MSG_SERVER_HELLO = 0x02
MSG_ALERT = 0x03

ALERT_UNKNOWN_PSK_ID = 1

HANDSHAKE_TIMEOUT = 2.0
HANDSHAKE_BACKOFF = 1.5
HANDSHAKE_ATTEMPTS = 4


class PskError(Exception):
    pass


class UnknownPskId(PskError):
    pass


class AuthFailure(PskError):
    pass


class HandshakeTimeout(PskError):
    pass


class IntegrityError(PskError):
    pass


class ReplayError(PskError):
    pass


class UnknownSession(PskError):
    pass


class SequenceExhausted(PskError):
    pass


@dataclass(frozen=True)
class PskIdentity:
    psk_id: str
    psk_key: bytes

    def __post_init__(self):
        if len(self.psk_key) != PSK_KEY_LENGTH:
            raise ValueError(f"psk_key must be {PSK_KEY_LENGTH} bytes")
        if not (0 < len(self.psk_id) <= 64 and self.psk_id.isprintable()):
            raise ValueError("psk_id must be a printable string of at most 64 chars")


def _hkdf(key: bytes, salt: bytes, info: bytes, length: int) -> bytes:
    """HMAC-SHA256 extract-and-expand."""
    prk = hmac.new(salt, key, hashlib.sha256).digest()
    out = b""
    block = b""
    counter = 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([counter]), hashlib.sha256).digest()
        out += block
        counter += 1
    return out[:length]


def derive_keys(psk_key: bytes, client_random: bytes, server_random: bytes) -> tuple[bytes, bytes]:
    """Directional AES-128 keys: (client_to_server, server_to_client)."""
    material = _hkdf(psk_key, client_random + server_random, KEY_LABEL, 32)
    return material[:16], material[16:]


def transcript_mac(psk_key: bytes, client_random: bytes, server_random: bytes,
                   session_id: bytes, psk_id: str) -> bytes:
    transcript = client_random + server_random + session_id + psk_id.encode()
    return hmac.new(psk_key, transcript, hashlib.sha256).digest()


class _ReplayWindow:
    """DTLS-style sliding bitmap over the last REPLAY_WINDOW sequence numbers."""

    __slots__ = ("top", "bitmap")

    def __init__(self):
        self.top = -1          # highest sequence accepted so far
        self.bitmap = 0

    def check(self, seq: int) -> None:
        if seq > self.top:
            return
        offset = self.top - seq
        if offset >= REPLAY_WINDOW:
            raise ReplayError(f"seq {seq} too far behind window top {self.top}")
        if self.bitmap & (1 << offset):
            raise ReplayError(f"seq {seq} already accepted")

    def accept(self, seq: int) -> None:
        if seq > self.top:
            shift = seq - self.top
            self.bitmap = ((self.bitmap << shift) | 1) & ((1 << REPLAY_WINDOW) - 1)
            self.top = seq
        else:
            self.bitmap |= 1 << (self.top - seq)


class SecureSession:
    """Established keys plus send/receive state for one peer pair.

    The same object is used on both ends; ``is_client`` picks which
    directional key seals and which opens.
    """

    def __init__(self, session_id: bytes, psk_id: str, c2s_key: bytes, s2c_key: bytes,
                 is_client: bool):
        self.session_id = session_id
        self.psk_id = psk_id
        self.is_client = is_client
        self._seal_aead = AESGCM(c2s_key if is_client else s2c_key)
        self._open_aead = AESGCM(s2c_key if is_client else c2s_key)
        self.send_seq = 0
        self.recv_window = _ReplayWindow()
        self.confirmed = is_client  # server side confirms on first valid record

    @staticmethod
    def _nonce(seq: int) -> bytes:
        return b"\x00" * 6 + seq.to_bytes(SEQ_LENGTH, "big")

    def seal(self, plaintext: bytes) -> bytes:
        if self.send_seq > MAX_SEQ:
            raise SequenceExhausted("48-bit send sequence exhausted")
        seq = self.send_seq
        self.send_seq += 1
        header = self.session_id + seq.to_bytes(SEQ_LENGTH, "big")
        ciphertext = self._seal_aead.encrypt(self._nonce(seq), plaintext, header)
        return header + ciphertext

    def open(self, record: bytes) -> bytes:
        if len(record) < HEADER_LENGTH + 16:
            raise IntegrityError("record too short")
        if record[:SESSION_ID_LENGTH] != self.session_id:
            raise UnknownSession("record for a different session")
        seq = int.from_bytes(record[SESSION_ID_LENGTH:HEADER_LENGTH], "big")
        self.recv_window.check(seq)
        header = record[:HEADER_LENGTH]
        try:
            plaintext = self._open_aead.decrypt(self._nonce(seq), record[HEADER_LENGTH:], header)
        except InvalidTag as exc:
            raise IntegrityError("record failed authentication") from exc
        self.recv_window.accept(seq)
        self.confirmed = True
        return plaintext


def perform_handshake(identity: PskIdentity, client_random: bytes, server_random: bytes,
                      session_id: bytes) -> tuple[SecureSession, SecureSession]:
    """Derive both sides of a session in one step. Used by tests and by
    in-process shortcuts; the networked path goes through the channels below."""
    c2s, s2c = derive_keys(identity.psk_key, client_random, server_random)
    client = SecureSession(session_id, identity.psk_id, c2s, s2c, is_client=True)
    server = SecureSession(session_id, identity.psk_id, c2s, s2c, is_client=False)
    return client, server


# ----------------------------------------------------------------------
# channel layer: socket-shaped wrappers that seal/open transparently


def _encode_client_hello(client_random: bytes, psk_id: str) -> bytes:
    ident = psk_id.encode()
    return bytes([MSG_CLIENT_HELLO, len(ident)]) + ident + client_random


def _encode_server_hello(server_random: bytes, session_id: bytes, mac: bytes) -> bytes:
    return bytes([MSG_SERVER_HELLO]) + server_random + session_id + mac


class SecureServerChannel:
    """Server side: accepts handshakes, demultiplexes records by session id,
    and presents plain ``sendto``/``on_datagram`` to the layer above."""

    def __init__(self, scheduler: Scheduler, sock, keys: dict[str, bytes],
                 rng: random.Random | None = None):
        self.scheduler = scheduler
        self.sock = sock
        self.keys = dict(keys)
        self.rng = rng or random.Random()
        self.receive_callback = None
        self.session_established = None   # fn(psk_id, address), optional
        self._by_id: dict[bytes, SecureSession] = {}
        self._by_addr: dict[Address, SecureSession] = {}
        self._addr_by_id: dict[bytes, Address] = {}
        self.stats = {"handshakes": 0, "unknown_psk": 0, "integrity_errors": 0,
                      "replays": 0, "unknown_session": 0}
        sock.on_datagram(self._on_datagram)

    def add_key(self, psk_id: str, psk_key: bytes) -> None:
        self.keys[psk_id] = psk_key

    def on_datagram(self, callback) -> None:
        self.receive_callback = callback

    def sendto(self, data: bytes, dest: Address) -> None:
        session = self._by_addr.get(dest)
        if session is None:
            raise TransportError(f"no secure session with {dest}")
        self.sock.sendto(session.seal(data), dest)

    def close(self) -> None:
        self.sock.close()

    def session_for(self, address: Address) -> SecureSession | None:
        return self._by_addr.get(address)

    def _new_session_id(self) -> bytes:
        while True:
            raw = bytearray(self.rng.randbytes(SESSION_ID_LENGTH))
            raw[0] |= 0x10  # keep clear of handshake type bytes
            sid = bytes(raw)
            if sid not in self._by_id:
                return sid

    def _on_datagram(self, data: bytes, source: Address) -> None:
        if not data:
            return
        if data[0] < 0x10:
            self._handle_handshake(data, source)
        else:
            self._handle_record(data, source)

    def _handle_handshake(self, data: bytes, source: Address) -> None:
        if data[0] != MSG_CLIENT_HELLO or len(data) < 2:
            return
        ident_len = data[1]
        if len(data) != 2 + ident_len + 32:
            return
        psk_id = data[2:2 + ident_len].decode("utf-8", "replace")
        client_random = data[2 + ident_len:]
        key = self.keys.get(psk_id)
        if key is None:
            self.stats["unknown_psk"] += 1
            self.sock.sendto(bytes([MSG_ALERT, ALERT_UNKNOWN_PSK_ID]), source)
            return
        # a retransmitted hello for an existing pending session re-sends the
        # same ServerHello so both sides converge on one key set
        existing = self._by_addr.get(source)
        if existing is not None and not existing.confirmed and \
                getattr(existing, "_client_random", None) == client_random:
            self.sock.sendto(existing._server_hello, source)
            return
        server_random = self.rng.randbytes(32)
        session_id = self._new_session_id()
        c2s, s2c = derive_keys(key, client_random, server_random)
        session = SecureSession(session_id, psk_id, c2s, s2c, is_client=False)
        session._client_random = client_random
        mac = transcript_mac(key, client_random, server_random, session_id, psk_id)
        session._server_hello = _encode_server_hello(server_random, session_id, mac)
        self._evict_address(source)
        self._by_id[session_id] = session
        self._by_addr[source] = session
        self._addr_by_id[session_id] = source
        self.stats["handshakes"] += 1
        self.sock.sendto(session._server_hello, source)

    def _handle_record(self, data: bytes, source: Address) -> None:
        if len(data) < HEADER_LENGTH:
            return
        session = self._by_id.get(data[:SESSION_ID_LENGTH])
        if session is None:
            self.stats["unknown_session"] += 1
            return
        first_record = not session.confirmed
        try:
            plaintext = session.open(data)
        except ReplayError:
            self.stats["replays"] += 1
            return
        except IntegrityError:
            self.stats["integrity_errors"] += 1
            if first_record:
                # the peer never proved key possession; drop the half-open session
                self._drop_session(session)
            return
        if first_record and self.session_established is not None:
            self.session_established(session.psk_id, source)
        # the peer may have moved (reboot with a new source port)
        if self._by_addr.get(source) is not session:
            self._evict_address(source)
            old_addr = self._addr_by_id.get(session.session_id)
            if old_addr is not None:
                self._by_addr.pop(old_addr, None)
            self._by_addr[source] = session
            self._addr_by_id[session.session_id] = source
        if self.receive_callback is not None:
            self.receive_callback(plaintext, source)

    def _evict_address(self, address: Address) -> None:
        old = self._by_addr.pop(address, None)
        if old is not None:
            self._by_id.pop(old.session_id, None)
            self._addr_by_id.pop(old.session_id, None)

    def _drop_session(self, session: SecureSession) -> None:
        self._by_id.pop(session.session_id, None)
        addr = self._addr_by_id.pop(session.session_id, None)
        if addr is not None:
            self._by_addr.pop(addr, None)


class SecureClientChannel:
    """Client side: one session to one server. ``connect`` runs the
    handshake (with retransmission) and calls back on completion."""

    def __init__(self, scheduler: Scheduler, sock, server: Address, identity: PskIdentity,
                 rng: random.Random | None = None):
        self.scheduler = scheduler
        self.sock = sock
        self.server = server
        self.identity = identity
        self.rng = rng or random.Random()
        self.receive_callback = None
        self.session: SecureSession | None = None
        self._client_random: bytes | None = None
        self._connect_callback = None
        self._retry_timer = None
        self._attempts = 0
        sock.on_datagram(self._on_datagram)

    def on_datagram(self, callback) -> None:
        self.receive_callback = callback

    def connect(self, callback) -> None:
        """callback(error_or_none) fires once the handshake settles."""
        self._connect_callback = callback
        self._client_random = self.rng.randbytes(32)
        self._attempts = 0
        self._send_hello(HANDSHAKE_TIMEOUT)

    def _send_hello(self, timeout: float) -> None:
        if self.session is not None:
            return
        if self._attempts >= HANDSHAKE_ATTEMPTS:
            self._settle(HandshakeTimeout(f"server {self.server} not answering"))
            return
        self._attempts += 1
        try:
            self.sock.sendto(_encode_client_hello(self._client_random, self.identity.psk_id),
                             self.server)
        except TransportError as exc:
            self._settle(exc)
            return
        self._retry_timer = self.scheduler.call_later(
            timeout, self._send_hello, timeout * HANDSHAKE_BACKOFF)

    def _settle(self, error: Exception | None) -> None:
        if self._retry_timer is not None:
            self._retry_timer.cancel()
            self._retry_timer = None
        callback, self._connect_callback = self._connect_callback, None
        if callback is not None:
            callback(error)

    def sendto(self, data: bytes, dest: Address | None = None) -> None:
        if self.session is None:
            raise TransportError("secure session not established")
        self.sock.sendto(self.session.seal(data), dest or self.server)

    def close(self) -> None:
        if self._retry_timer is not None:
            self._retry_timer.cancel()
        self.sock.close()

    def _on_datagram(self, data: bytes, source: Address) -> None:
        if not data:
            return
        if data[0] < 0x10:
            self._handle_handshake(data)
            return
        if self.session is None:
            return
        try:
            plaintext = self.session.open(data)
        except PskError:
            return
        if self.receive_callback is not None:
            self.receive_callback(plaintext, source)

    def _handle_handshake(self, data: bytes) -> None:
        if self.session is not None or self._client_random is None:
            return
        if data[0] == MSG_ALERT:
            self._settle(UnknownPskId(f"server rejected psk_id {self.identity.psk_id!r}"))
            return
        if data[0] != MSG_SERVER_HELLO or len(data) != 1 + 32 + SESSION_ID_LENGTH + 32:
            return
        server_random = data[1:33]
        session_id = data[33:33 + SESSION_ID_LENGTH]
        mac = data[33 + SESSION_ID_LENGTH:]
        expected = transcript_mac(self.identity.psk_key, self._client_random,
                                  server_random, session_id, self.identity.psk_id)
        if not hmac.compare_digest(mac, expected):
            self._settle(AuthFailure("server transcript MAC mismatch"))
            return
        c2s, s2c = derive_keys(self.identity.psk_key, self._client_random, server_random)
        self.session = SecureSession(session_id, self.identity.psk_id, c2s, s2c, is_client=True)
        self._settle(None)
