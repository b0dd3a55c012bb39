"""iotbed: a self-contained indoor IoT telemetry testbed.

Secured CoAP/LWM2M data collection, simulated device fleets, a pub/sub
ingestion pipeline with pseudonymization, time-series storage, firmware
update orchestration, and presence/comfort/quality analytics, all runnable
on a virtual clock for deterministic experiments or on the wall clock for
live operation.
"""

__version__ = "0.1.0"

SCHEMA_VERSION = "iotbed/1"
