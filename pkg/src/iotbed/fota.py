"""Firmware packaging, the image store, per-target update pushes, and
the device-side download/update state machine.

Image layout (all integers little-endian):

    magic "EGG!" | u8 version_len | version utf-8 | u32 length | u32 crc32 | payload

The CRC covers the payload; the magic is re-checked by the simulated
secondary boot loader before the new version is committed, so a device
can only ever run a fully verified image.
"""

from __future__ import annotations

import logging
import os
import struct
import zlib

from .clock import Scheduler
from . import coap
from .coap import Code
from . import lwm2m
from .lwm2m import (Lwm2mClient, Lwm2mServer, ObjectModel, Resource,
                    OBJ_FIRMWARE, OBJ_DEVICE, RES_DEV_FIRMWARE_VERSION,
                    RES_FW_PACKAGE_URI, RES_FW_UPDATE, RES_FW_STATE,
                    RES_FW_RESULT, RES_FW_VERSION)

log = logging.getLogger(__name__)

MAGIC = b"EGG!"
CHUNK_SIZE = 512

# firmware object state (/5/0/3)
STATE_IDLE = 0
STATE_DOWNLOADING = 1
STATE_DOWNLOADED = 2
STATE_UPDATING = 3

# firmware object result (/5/0/5)
RESULT_NONE = 0
RESULT_SUCCESS = 1
RESULT_INTEGRITY_FAILURE = 2
RESULT_CONNECTION_LOST = 3

RESULT_NAMES = {RESULT_NONE: "NONE", RESULT_SUCCESS: "SUCCESS",
                RESULT_INTEGRITY_FAILURE: "INTEGRITY_FAILURE",
                RESULT_CONNECTION_LOST: "CONNECTION_LOST"}

SBL_DELAY = 0.5           # simulated boot-loader flash time
POLL_INTERVAL = 2.0
PUSH_DEADLINE = 180.0


class FotaError(Exception):
    pass


class BadMagic(FotaError):
    pass


class CrcMismatch(FotaError):
    pass


class Truncated(FotaError):
    pass


# ----------------------------------------------------------------------
# image codec

def build_image(payload: bytes, version: str) -> bytes:
    if not payload:
        raise FotaError("empty payload")
    version_bytes = version.encode("utf-8")
    if not 1 <= len(version_bytes) <= 255:
        raise FotaError("version must encode to 1..255 bytes")
    header = MAGIC + bytes([len(version_bytes)]) + version_bytes
    header += struct.pack("<II", len(payload), zlib.crc32(payload) & 0xFFFFFFFF)
    return header + payload


def verify_image(image: bytes) -> str:
    """Check magic, length, and CRC; return the embedded version."""
    if len(image) < 5:
        raise Truncated("image shorter than fixed header")
    if image[:4] != MAGIC:
        raise BadMagic(f"magic {image[:4]!r}")
    vlen = image[4]
    base = 5 + vlen + 8
    if len(image) < base:
        raise Truncated("header cut short")
    version = image[5:5 + vlen].decode("utf-8", "replace")
    length, crc = struct.unpack_from("<II", image, 5 + vlen)
    payload = image[base:]
    if len(payload) != length:
        raise Truncated(f"payload {len(payload)} bytes, header says {length}")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CrcMismatch("payload crc mismatch")
    return version


# ----------------------------------------------------------------------
# image store

class ImageStore:
    """Directory of verified images keyed by version."""

    def __init__(self, root: str | None = None) -> None:
        self.root = root
        self._images: dict[str, bytes] = {}
        if root is not None:
            os.makedirs(root, exist_ok=True)
            for name in os.listdir(root):
                if name.endswith(".img"):
                    with open(os.path.join(root, name), "rb") as fh:
                        data = fh.read()
                    try:
                        self._images[verify_image(data)] = data
                    except FotaError as exc:
                        log.warning("skipping stored image %s: %s", name, exc)

    def add(self, image: bytes) -> str:
        version = verify_image(image)
        self._images[version] = image
        if self.root is not None:
            with open(os.path.join(self.root, f"{version}.img"), "wb") as fh:
                fh.write(image)
        return version

    def add_unchecked(self, version: str, image: bytes) -> None:
        """Store bytes without verification (corruption testing)."""
        self._images[version] = image

    def get(self, version: str) -> bytes | None:
        return self._images.get(version)

    def versions(self) -> list[str]:
        return sorted(self._images)


# ----------------------------------------------------------------------
# server side: pushing updates

class UpdatePush:
    """Tracks one push across its targets."""

    def __init__(self, version: str, targets: list[str]) -> None:
        self.version = version
        self.targets = list(targets)
        self.results: dict[str, str] = {}
        self.detail: dict[str, str] = {}
        self.on_complete = None

    @property
    def done(self) -> bool:
        return len(self.results) == len(self.targets)

    def _record(self, endpoint: str, result: str, detail: str = "") -> None:
        if endpoint in self.results:
            return
        self.results[endpoint] = result
        self.detail[endpoint] = detail
        if self.done and self.on_complete is not None:
            self.on_complete(self)

    def summary(self) -> dict:
        return {"version": self.version,
                "results": {ep: self.results.get(ep, "PENDING") for ep in self.targets}}


class UpdateManager:
    """Drives per-target update sessions and serves image chunks."""

    def __init__(self, scheduler: Scheduler, server: Lwm2mServer, store: ImageStore,
                 poll_interval: float = POLL_INTERVAL,
                 deadline: float = PUSH_DEADLINE) -> None:
        self.scheduler = scheduler
        self.server = server
        self.store = store
        self.poll_interval = poll_interval
        self.deadline = deadline
        self.pushes: list[UpdatePush] = []
        server.firmware_handler = self._serve_chunk

    def _serve_chunk(self, segments: list[str], queries: dict[str, str]):
        if len(segments) != 1:
            return Code.NOT_FOUND, b""
        image = self.store.get(segments[0])
        if image is None:
            return Code.NOT_FOUND, b""
        try:
            off = int(queries.get("off", "0"))
            length = int(queries.get("len", str(CHUNK_SIZE)))
        except ValueError:
            return Code.BAD_REQUEST, b""
        if off < 0 or length <= 0:
            return Code.BAD_REQUEST, b""
        return Code.CONTENT, image[off:off + length]

    def push_update(self, targets: list[str], version: str) -> UpdatePush:
        """Start an update session per registered target."""
        if self.store.get(version) is None:
            raise FotaError(f"no image stored for version {version}")
        push = UpdatePush(version, targets)
        self.pushes.append(push)
        for endpoint in targets:
            try:
                self.server.registry.lookup(endpoint)
            except lwm2m.NotRegistered:
                push._record(endpoint, "NOT_REGISTERED")
                continue
            _Session(self, push, endpoint).begin()
        return push


class _Session:
    def __init__(self, manager: UpdateManager, push: UpdatePush, endpoint: str) -> None:
        self.manager = manager
        self.push = push
        self.endpoint = endpoint
        self.scheduler = manager.scheduler
        self.server = manager.server
        self.deadline_at = self.scheduler.now() + manager.deadline
        self.finished = False

    def _finish(self, result: str, detail: str = "") -> None:
        if self.finished:
            return
        self.finished = True
        self.push._record(self.endpoint, result, detail)

    def _expired(self) -> bool:
        if self.scheduler.now() >= self.deadline_at:
            self._finish("CONNECTION_LOST", "deadline exceeded")
            return True
        return False

    def begin(self) -> None:
        path = f"/{OBJ_DEVICE}/0/{RES_DEV_FIRMWARE_VERSION}"
        self.server.read(self.endpoint, path, on_done=self._on_version)

    def _on_version(self, err, response) -> None:
        if err is None and response is not None:
            version = _record_value(response.payload)
            if version == self.push.version:
                self._finish("SUCCESS", "already running this version")
                return
        self._write_uri()

    def _write_uri(self) -> None:
        if self._expired():
            return
        uri = f"/fw/{self.push.version}"
        path = f"/{OBJ_FIRMWARE}/0/{RES_FW_PACKAGE_URI}"
        try:
            self.server.write(self.endpoint, path, uri, on_done=self._on_uri_written)
        except lwm2m.NotRegistered:
            self._finish("CONNECTION_LOST", "target deregistered")

    def _on_uri_written(self, err, response) -> None:
        if err is not None:
            self._finish("CONNECTION_LOST", f"uri write failed: {err}")
            return
        self._schedule_poll()

    def _schedule_poll(self) -> None:
        if not self._expired():
            self.scheduler.call_later(self.manager.poll_interval, self._poll_state)

    def _poll_state(self) -> None:
        if self.finished or self._expired():
            return
        path = f"/{OBJ_FIRMWARE}/0/{RES_FW_STATE}"
        try:
            self.server.read(self.endpoint, path, on_done=self._on_state)
        except lwm2m.NotRegistered:
            self._schedule_poll()

    def _on_state(self, err, response) -> None:
        if self.finished:
            return
        if err is not None:
            self._schedule_poll()
            return
        state = _record_value(response.payload)
        if state == STATE_DOWNLOADED:
            self._execute_update()
        elif state == STATE_IDLE:
            self._check_result()
        else:
            self._schedule_poll()

    def _check_result(self) -> None:
        path = f"/{OBJ_FIRMWARE}/0/{RES_FW_RESULT}"
        try:
            self.server.read(self.endpoint, path, on_done=self._on_result)
        except lwm2m.NotRegistered:
            self._schedule_poll()

    def _on_result(self, err, response) -> None:
        if self.finished:
            return
        if err is None:
            result = _record_value(response.payload)
            if result == RESULT_INTEGRITY_FAILURE:
                self._finish("INTEGRITY_FAILURE", "device rejected image")
                return
            if result == RESULT_CONNECTION_LOST:
                self._finish("CONNECTION_LOST", "device lost the transfer")
                return
        self._schedule_poll()

    def _execute_update(self) -> None:
        path = f"/{OBJ_FIRMWARE}/0/{RES_FW_UPDATE}"
        try:
            self.server.execute(self.endpoint, path, on_done=self._on_update_executed)
        except lwm2m.NotRegistered:
            self._finish("CONNECTION_LOST", "target deregistered")

    def _on_update_executed(self, err, response) -> None:
        if err is not None:
            self._finish("CONNECTION_LOST", f"update execute failed: {err}")
            return
        self._await_reregistration()

    def _await_reregistration(self) -> None:
        if self.finished or self._expired():
            return
        self.scheduler.call_later(self.manager.poll_interval, self._check_version)

    def _check_version(self) -> None:
        if self.finished or self._expired():
            return
        path = f"/{OBJ_DEVICE}/0/{RES_DEV_FIRMWARE_VERSION}"
        try:
            self.server.read(self.endpoint, path, on_done=self._on_final_version)
        except lwm2m.NotRegistered:
            self._await_reregistration()
            return

    def _on_final_version(self, err, response) -> None:
        if self.finished:
            return
        if err is None and response is not None:
            version = _record_value(response.payload)
            if version == self.push.version:
                self._finish("SUCCESS")
                return
            result_path_check = self._check_result_after_reboot()
            if result_path_check:
                return
        self._await_reregistration()

    def _check_result_after_reboot(self) -> bool:
        # device came back on the old version: surface why if it knows
        path = f"/{OBJ_FIRMWARE}/0/{RES_FW_RESULT}"
        try:
            self.server.read(self.endpoint, path, on_done=self._on_result)
            return True
        except lwm2m.NotRegistered:
            return False


def _record_value(payload: bytes):
    import json
    try:
        records = json.loads(payload.decode("utf-8"))
        return records[0]["v"]
    except (ValueError, KeyError, IndexError, TypeError):
        return None


# ----------------------------------------------------------------------
# client side: download and apply

class FirmwareUpdater:
    """Device-side state machine behind the firmware object."""

    def __init__(self, client: Lwm2mClient, version: str) -> None:
        self.client = client
        self.version = version
        self.state = STATE_IDLE
        self.result = RESULT_NONE
        self.staged: bytes | None = None
        self.staged_version: str | None = None
        self._buffer = bytearray()
        self._uri_version: str | None = None
        client.on_stopped.append(self._on_client_stopped)

    def _on_client_stopped(self) -> None:
        # no partial download survives a power cycle
        if self.state in (STATE_DOWNLOADING, STATE_UPDATING):
            self.state = STATE_IDLE
            self._buffer.clear()
            self._uri_version = None

    def _model_set(self, resource: int, value) -> None:
        try:
            self.client.model.set_value(OBJ_FIRMWARE, 0, resource, value)
        except lwm2m.PathNotFound:
            pass

    def _set_state(self, state: int) -> None:
        self.state = state
        self._model_set(RES_FW_STATE, state)

    def _set_result(self, result: int) -> None:
        self.result = result
        self._model_set(RES_FW_RESULT, result)

    # --- download -----------------------------------------------------

    def start_download(self, uri: str) -> None:
        if self.state != STATE_IDLE:
            return
        parts = [p for p in str(uri).split("/") if p]
        if len(parts) != 2 or parts[0] != "fw":
            self._set_result(RESULT_INTEGRITY_FAILURE)
            return
        self._uri_version = parts[1]
        self._buffer.clear()
        self._set_result(RESULT_NONE)
        self._set_state(STATE_DOWNLOADING)
        self._fetch_chunk(0)

    def _fetch_chunk(self, offset: int) -> None:
        if self.state != STATE_DOWNLOADING or self.client.endpoint is None:
            return
        message = coap.CoapMessage(
            mtype=coap.MessageType.CON, code=Code.GET, message_id=0,
            options=sorted(
                coap.path_options(f"/fw/{self._uri_version}")
                + coap.query_options({"off": str(offset), "len": str(CHUNK_SIZE)}),
                key=lambda o: o[0]),
        )
        try:
            self.client.endpoint.send_request(
                self.client._server_addr(), message,
                on_response=lambda p: self._on_chunk(offset, p))
        except Exception:
            self._abort(RESULT_CONNECTION_LOST)

    def _on_chunk(self, offset: int, pending) -> None:
        if self.state != STATE_DOWNLOADING:
            return
        if pending.error is not None or pending.response is None:
            self._abort(RESULT_CONNECTION_LOST)
            return
        if pending.response.code != Code.CONTENT:
            self._abort(RESULT_CONNECTION_LOST)
            return
        chunk = pending.response.payload
        self._buffer.extend(chunk)
        if len(chunk) == CHUNK_SIZE:
            self._fetch_chunk(offset + CHUNK_SIZE)
            return
        self._finish_download()

    def _finish_download(self) -> None:
        image = bytes(self._buffer)
        self._buffer.clear()
        try:
            version = verify_image(image)
        except FotaError as exc:
            log.info("%s: downloaded image rejected: %s", self.client.endpoint_name, exc)
            self._abort(RESULT_INTEGRITY_FAILURE)
            return
        self.staged = image
        self.staged_version = version
        self._set_state(STATE_DOWNLOADED)

    def _abort(self, result: int) -> None:
        self.staged = None
        self.staged_version = None
        self._buffer.clear()
        self._set_state(STATE_IDLE)
        self._set_result(result)

    # --- apply --------------------------------------------------------

    def apply(self) -> None:
        """Execute target of /5/0/2: hand the staged image to the SBL."""
        if self.state != STATE_DOWNLOADED or self.staged is None:
            return
        self._set_state(STATE_UPDATING)
        self.client.scheduler.call_later(SBL_DELAY, self._boot_loader)

    def _boot_loader(self) -> None:
        staged, version = self.staged, self.staged_version
        self.staged = None
        self.staged_version = None
        try:
            if staged is None:
                raise Truncated("nothing staged")
            verify_image(staged)
        except FotaError as exc:
            log.info("%s: boot loader rejected image: %s",
                     self.client.endpoint_name, exc)
            self._set_state(STATE_IDLE)
            self._set_result(RESULT_INTEGRITY_FAILURE)
            self.client.reboot()
            return
        self.version = version
        try:
            self.client.model.set_value(OBJ_DEVICE, 0, RES_DEV_FIRMWARE_VERSION, version)
        except lwm2m.PathNotFound:
            pass
        self._model_set(RES_FW_VERSION, version)
        self._set_state(STATE_IDLE)
        self._set_result(RESULT_SUCCESS)
        self.client.reboot()


def attach_firmware_object(model: ObjectModel, updater: FirmwareUpdater) -> None:
    model.add_instance(OBJ_FIRMWARE, 0, {
        RES_FW_PACKAGE_URI: Resource(value="", writable=True,
                                     on_write=updater.start_download),
        RES_FW_UPDATE: Resource(readable=False, executable=True,
                                on_execute=updater.apply),
        RES_FW_STATE: Resource(value=STATE_IDLE),
        RES_FW_RESULT: Resource(value=RESULT_NONE),
        RES_FW_VERSION: Resource(value=updater.version),
    })
