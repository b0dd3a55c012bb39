"""Object/resource model and the fixed catalog of known object types.

Paths follow the usual /object/instance/resource addressing. The catalog
is closed: registrations advertising object ids outside it are rejected,
except for ids explicitly flagged as extensions (wristband beacon relay,
per-appliance power channels).
"""

from __future__ import annotations

from dataclasses import dataclass, field


class ModelError(Exception):
    pass


class PathNotFound(ModelError):
    pass


class NotWritable(ModelError):
    pass


class NotExecutable(ModelError):
    pass


class BadLinkFormat(ModelError):
    pass


class UnknownObject(ModelError):
    pass


# common reusable resource ids
RES_VALUE = 5700
RES_UNITS = 5701
RES_COLOUR = 5706
RES_MULTISTATE_INPUT = 5547
RES_ON_OFF = 5850

# Device object (3)
OBJ_DEVICE = 3
RES_DEV_SERIAL = 2
RES_DEV_FIRMWARE_VERSION = 3
RES_DEV_REBOOT = 4
RES_DEV_FACTORY_RESET = 5
RES_DEV_CURRENT_TIME = 13

# Firmware update object (5)
OBJ_FIRMWARE = 5
RES_FW_PACKAGE_URI = 1
RES_FW_UPDATE = 2
RES_FW_STATE = 3
RES_FW_RESULT = 5
RES_FW_VERSION = 7

# Location object (6)
OBJ_LOCATION = 6
RES_LOC_LATITUDE = 0
RES_LOC_LONGITUDE = 1

# Connectivity monitoring object (4)
OBJ_CONNECTIVITY = 4
RES_CONN_RSSI = 2
RES_CONN_IP = 4

OBJ_ILLUMINANCE = 3301
OBJ_TEMPERATURE = 3303
OBJ_HUMIDITY = 3304
OBJ_RGB_LED = 3311
OBJ_LOUDNESS = 3324
OBJ_DUST = 3325
OBJ_PROXIMITY = 3330
OBJ_BUZZER = 3338
OBJ_GESTURE = 3348
OBJ_POWER = 3305
OBJ_WRISTBAND_RSSI = 27000

CORE_OBJECTS = {0, 1, 2, 3, 4, 5, 6, 7}


@dataclass(frozen=True)
class CatalogEntry:
    object_id: int
    name: str
    unit: str
    value_resource: int | None    # resource observed for telemetry, None for actuators
    extension: bool = False


IPSO_CATALOG: dict[int, CatalogEntry] = {
    entry.object_id: entry
    for entry in [
        CatalogEntry(OBJ_ILLUMINANCE, "illuminance", "uW/cm2", RES_VALUE),
        CatalogEntry(OBJ_TEMPERATURE, "temperature", "Cel", RES_VALUE),
        CatalogEntry(OBJ_HUMIDITY, "humidity", "%", RES_VALUE),
        CatalogEntry(OBJ_RGB_LED, "rgb_led", "", None),
        CatalogEntry(OBJ_LOUDNESS, "loudness", "dB SPL", RES_VALUE),
        CatalogEntry(OBJ_DUST, "dust", "mg/mm3", RES_VALUE),
        CatalogEntry(OBJ_PROXIMITY, "proximity", "cm", RES_VALUE),
        CatalogEntry(OBJ_BUZZER, "buzzer", "", None),
        CatalogEntry(OBJ_GESTURE, "gesture", "", RES_MULTISTATE_INPUT),
        CatalogEntry(OBJ_POWER, "power", "W", RES_VALUE, extension=True),
        CatalogEntry(OBJ_WRISTBAND_RSSI, "wristband_rssi", "dBm", RES_VALUE, extension=True),
    ]
}


def is_known_object(object_id: int) -> bool:
    return object_id in IPSO_CATALOG or object_id in CORE_OBJECTS


def unit_for(object_id: int) -> str:
    entry = IPSO_CATALOG.get(object_id)
    return entry.unit if entry else ""


def value_resource_for(object_id: int) -> int | None:
    entry = IPSO_CATALOG.get(object_id)
    return entry.value_resource if entry else None


def parse_path(path: str) -> tuple[int, ...]:
    parts = [p for p in path.strip().strip("/").split("/") if p]
    if not 1 <= len(parts) <= 3:
        raise PathNotFound(f"bad path {path!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise PathNotFound(f"bad path {path!r}") from exc


def parse_links(payload: str) -> list[tuple[int, int]]:
    """Parse a link-format registration payload, "</3303/0>,</3304/0>",
    into (object_id, instance_id) pairs."""
    links: list[tuple[int, int]] = []
    payload = payload.strip()
    if not payload:
        return links
    for item in payload.split(","):
        item = item.strip()
        if not (item.startswith("<") and item.endswith(">")):
            raise BadLinkFormat(f"bad link item {item!r}")
        parts = [p for p in item[1:-1].strip("/").split("/") if p]
        if len(parts) != 2:
            raise BadLinkFormat(f"link must be /object/instance: {item!r}")
        try:
            links.append((int(parts[0]), int(parts[1])))
        except ValueError as exc:
            raise BadLinkFormat(f"non-numeric link {item!r}") from exc
    return links


def format_links(links: list[tuple[int, int]]) -> str:
    return ",".join(f"</{obj}/{inst}>" for obj, inst in links)


@dataclass
class Resource:
    value: object = None
    readable: bool = True
    writable: bool = False
    executable: bool = False
    on_write: object = None      # fn(value), side effect hook
    on_execute: object = None    # fn(), side effect hook


@dataclass
class ObjectModel:
    """Per-client tree of object instances and their resources."""

    objects: dict[int, dict[int, dict[int, Resource]]] = field(default_factory=dict)

    def add_instance(self, object_id: int, instance_id: int,
                     resources: dict[int, Resource]) -> None:
        self.objects.setdefault(object_id, {})[instance_id] = resources

    def remove_instance(self, object_id: int, instance_id: int) -> None:
        self.objects.get(object_id, {}).pop(instance_id, None)

    def links(self) -> list[tuple[int, int]]:
        return [(obj, inst) for obj, instances in self.objects.items() for inst in instances]

    def resource(self, object_id: int, instance_id: int, resource_id: int) -> Resource:
        try:
            return self.objects[object_id][instance_id][resource_id]
        except KeyError:
            raise PathNotFound(f"/{object_id}/{instance_id}/{resource_id}") from None

    def has_path(self, path: str) -> bool:
        try:
            ids = parse_path(path)
        except PathNotFound:
            return False
        if len(ids) == 1:
            return ids[0] in self.objects
        if len(ids) == 2:
            return ids[1] in self.objects.get(ids[0], {})
        try:
            self.resource(*ids)
            return True
        except PathNotFound:
            return False

    def read(self, object_id: int, instance_id: int, resource_id: int):
        res = self.resource(object_id, instance_id, resource_id)
        if not res.readable:
            raise PathNotFound(f"/{object_id}/{instance_id}/{resource_id} not readable")
        return res.value

    def set_value(self, object_id: int, instance_id: int, resource_id: int, value) -> None:
        """Internal state update (sensor sampling); bypasses writability."""
        self.resource(object_id, instance_id, resource_id).value = value

    def write(self, object_id: int, instance_id: int, resource_id: int, value) -> None:
        res = self.resource(object_id, instance_id, resource_id)
        if not res.writable:
            raise NotWritable(f"/{object_id}/{instance_id}/{resource_id}")
        res.value = value
        if res.on_write is not None:
            res.on_write(value)

    def execute(self, object_id: int, instance_id: int, resource_id: int) -> None:
        res = self.resource(object_id, instance_id, resource_id)
        if not res.executable:
            raise NotExecutable(f"/{object_id}/{instance_id}/{resource_id}")
        if res.on_execute is not None:
            res.on_execute()
