"""Map aggregation service: state transitions, durable log, TCP server and client."""

from .client import MapClient, parse_addr
from .server import MapServer, MapService, start_background
from .state import (
    IngestReport,
    MapConfig,
    MapState,
    apply_batch,
    recover,
    restore,
    snapshot,
)

__all__ = [
    "IngestReport",
    "MapClient",
    "MapConfig",
    "MapServer",
    "MapService",
    "MapState",
    "apply_batch",
    "parse_addr",
    "recover",
    "restore",
    "snapshot",
    "start_background",
]
