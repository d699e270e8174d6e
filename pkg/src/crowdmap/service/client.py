"""Blocking client for the map service protocol."""

from __future__ import annotations

import json
import socket
from typing import Sequence, Tuple

from ..errors import InputDomainError, ServiceError
from ..onboard import LandmarkObservation, observation_to_json


def parse_addr(addr: str) -> Tuple[str, int]:
    """Split ``host:port``; an empty host means localhost."""
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise InputDomainError(f"address must be host:port, got {addr!r}")
    try:
        number = int(port)
    except ValueError:
        raise InputDomainError(f"bad port in {addr!r}") from None
    if not 0 <= number <= 65535:
        raise InputDomainError(f"port out of range in {addr!r}")
    return (host.strip("[]") or "127.0.0.1"), number


class MapClient:
    def __init__(self, host: str, port: int, timeout: float = 60.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._rfile = self._sock.makefile("rb")

    @classmethod
    def connect(cls, addr: str, timeout: float = 60.0) -> "MapClient":
        return cls(*parse_addr(addr), timeout=timeout)

    def close(self):
        self._rfile.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request_raw(self, line: str) -> dict:
        self._sock.sendall(line.encode("utf-8") + b"\n")
        raw = self._rfile.readline()
        if not raw:
            raise ServiceError("connection closed before a response arrived")
        response = json.loads(raw)
        if response.get("status") != "ok":
            raise ServiceError(f"{response.get('error', 'error')}: {response.get('message', '')}")
        return response

    def ping(self) -> int:
        return self.request_raw('{"type": "ping"}')["revision"]

    def ingest(self, observations: Sequence[LandmarkObservation]) -> dict:
        body = ", ".join(observation_to_json(o) for o in observations)
        return self.request_raw(f'{{"type": "ingest", "observations": [{body}]}}')["report"]

    def snapshot(self) -> dict:
        return self.request_raw('{"type": "snapshot"}')["state"]

    def snapshot_text(self) -> str:
        """The snapshot in the service's canonical text form."""
        return json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"), allow_nan=False)
