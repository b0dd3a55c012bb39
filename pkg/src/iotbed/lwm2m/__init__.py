"""Lightweight device-management layer: object model, registration
registry, server-side operations, and the device client."""

from .model import (
    IPSO_CATALOG, CORE_OBJECTS, CatalogEntry, ObjectModel, Resource,
    ModelError, PathNotFound, NotWritable, NotExecutable, BadLinkFormat,
    UnknownObject, parse_path, parse_links, format_links, is_known_object,
    unit_for, value_resource_for,
    OBJ_ILLUMINANCE, OBJ_TEMPERATURE, OBJ_HUMIDITY, OBJ_RGB_LED, OBJ_LOUDNESS,
    OBJ_DUST, OBJ_PROXIMITY, OBJ_BUZZER, OBJ_GESTURE, OBJ_POWER,
    OBJ_WRISTBAND_RSSI, OBJ_DEVICE, OBJ_FIRMWARE, OBJ_LOCATION, OBJ_CONNECTIVITY,
    RES_VALUE, RES_UNITS, RES_COLOUR, RES_MULTISTATE_INPUT, RES_ON_OFF,
    RES_DEV_REBOOT, RES_DEV_FACTORY_RESET, RES_DEV_CURRENT_TIME,
    RES_FW_PACKAGE_URI, RES_FW_UPDATE, RES_FW_STATE, RES_FW_RESULT, RES_FW_VERSION,
)
from .registry import (RegistrationRegistry, Registration, NotRegistered,
                       RegistryError, DEFAULT_LIFETIME)
from .server import Lwm2mServer, Observation, TIME_SYNC_TOLERANCE
from .client import Lwm2mClient, install_device_object

__all__ = [
    "IPSO_CATALOG", "CORE_OBJECTS", "CatalogEntry", "ObjectModel", "Resource",
    "ModelError", "PathNotFound", "NotWritable", "NotExecutable", "BadLinkFormat",
    "UnknownObject", "parse_path", "parse_links", "format_links", "is_known_object",
    "unit_for", "value_resource_for",
    "RegistrationRegistry", "Registration", "NotRegistered", "RegistryError",
    "DEFAULT_LIFETIME", "Lwm2mServer", "Observation", "TIME_SYNC_TOLERANCE",
    "Lwm2mClient", "install_device_object",
]
