"""Long-running map service: durable single-writer ingestion behind a JSON-lines TCP protocol.

Requests and responses are one JSON object per line::

    {"type": "ping"}                          -> {"status": "ok", "revision": r}
    {"type": "ingest", "observations": [...]} -> {"status": "ok", "report": {...}}
    {"type": "snapshot"}                      -> {"status": "ok", "state": {...}}

Failures answer ``{"status": "error", "error": <kind>, "message": <text>}``.
A connection gets exactly one response per request, in request order.
"""

from __future__ import annotations

import json
import logging
import os
import socketserver
import threading
from pathlib import Path
from typing import Optional, Sequence, Tuple

from ..errors import RecordParseError
from ..geometry import Point
from ..onboard import LandmarkObservation, SignDescriptor, observation_from_dict
from .state import (
    IngestReport,
    MapConfig,
    MapState,
    apply_batch,
    batch_record,
    config_record,
    recover,
    seed_landmark,
    seed_record,
    snapshot,
    state_to_dict,
)

logger = logging.getLogger(__name__)

DEFAULT_SNAPSHOT_EVERY = 50


def snapshot_path_for(log_path) -> Path:
    return Path(str(log_path) + ".snapshot")


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path.parent, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


class MapService:
    """The map plus its durable log.

    Ingests are serialized by one lock. A batch is applied to a copy of the
    state, appended to the log and fsync'd, and only then published; readers
    always see a complete published state and never take the lock.
    """

    def __init__(
        self,
        log_path,
        seeds: Sequence[Tuple[SignDescriptor, Optional[Point]]] = (),
        config: Optional[MapConfig] = None,
        snapshot_every: int = DEFAULT_SNAPSHOT_EVERY,
    ):
        self.log_path = Path(log_path)
        self.snapshot_path = snapshot_path_for(self.log_path)
        self.snapshot_every = snapshot_every
        self._lock = threading.Lock()

        state = recover(self.log_path, self.snapshot_path)
        if not self.log_path.exists() or self.log_path.stat().st_size == 0:
            state = MapState(config=config or MapConfig())
            records = [config_record(state.config)]
            for desc, pos in seeds:
                lm_id = seed_landmark(state, desc, pos)
                records.append(seed_record(state.landmarks[lm_id]))
            self._append(records)
            _fsync_dir(self.log_path)
            logger.info("new map log %s with %d seeded landmarks", self.log_path, len(seeds))
        else:
            if config is not None and config != state.config:
                logger.warning("log %s was created with %s; keeping it over %s", self.log_path, state.config, config)
            if seeds:
                logger.info("log %s exists, seed file ignored", self.log_path)
            logger.info("recovered revision %d with %d landmarks", state.revision, len(state.landmarks))
        self._state = state
        self._published_text: Tuple[int, Optional[str]] = (-1, None)

    @property
    def state(self) -> MapState:
        return self._state

    @property
    def revision(self) -> int:
        return self._state.revision

    def _append(self, records: Sequence[str]) -> int:
        data = "".join(r + "\n" for r in records).encode("utf-8")
        with open(self.log_path, "ab") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
            return fh.tell()

    def _write_snapshot(self, state: MapState, log_offset: int) -> None:
        tmp = self.snapshot_path.with_name(self.snapshot_path.name + ".tmp")
        payload = json.dumps({"log_offset": log_offset, "state": state_to_dict(state)}, allow_nan=False)
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.snapshot_path)
        _fsync_dir(self.snapshot_path)

    def ingest(self, observations: Sequence) -> IngestReport:
        """Apply one batch durably; accepts observations or their dict records.

        The whole batch is parsed before anything is applied, so a bad record
        rejects the batch without side effects.
        """
        batch = [o if isinstance(o, LandmarkObservation) else observation_from_dict(o) for o in observations]
        if not batch:
            raise ValueError("ingest batch must not be empty")
        with self._lock:
            new_state, report = apply_batch(self._state, batch)
            offset = self._append([batch_record(report.revision, batch)])
            self._state = new_state
            if self.snapshot_every and new_state.revision % self.snapshot_every == 0:
                try:
                    self._write_snapshot(new_state, offset)
                except OSError as exc:
                    # the log alone is enough to recover
                    logger.warning("could not write snapshot %s: %s", self.snapshot_path, exc)
        logger.debug("revision %d: %d matched, %d unmatched", report.revision, report.matched, report.unmatched)
        return report

    def snapshot_text(self) -> str:
        state = self._state
        revision, text = self._published_text
        if revision != state.revision or text is None:
            text = snapshot(state)
            self._published_text = (state.revision, text)
        return text

    def handle_message(self, raw) -> str:
        """Answer one request line with one response line (without newline)."""
        try:
            request = json.loads(raw)
            if not isinstance(request, dict):
                raise RecordParseError("request must be a JSON object")
        except ValueError as exc:
            return _error("parse", f"malformed request: {exc}")
        kind = request.get("type")
        try:
            if kind == "ping":
                return json.dumps({"status": "ok", "revision": self.revision})
            if kind == "snapshot":
                text = self.snapshot_text()
                return f'{{"status": "ok", "state": {text}}}'
            if kind == "ingest":
                records = request.get("observations")
                if not isinstance(records, list):
                    raise RecordParseError("ingest needs an 'observations' list")
                report = self.ingest(records)
                return json.dumps({"status": "ok", "report": report.to_dict()})
        except RecordParseError as exc:
            return _error("parse", str(exc))
        except ValueError as exc:
            return _error("invalid", str(exc))
        except OSError as exc:
            logger.error("could not persist batch: %s", exc)
            return _error("io", f"batch not persisted: {exc}")
        return _error("invalid", f"unknown request type {kind!r}")


def _error(kind: str, message: str) -> str:
    return json.dumps({"status": "error", "error": kind, "message": message})


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        service: MapService = self.server.service
        while True:
            try:
                raw = self.rfile.readline()
            except ConnectionError:
                return
            if not raw:
                return
            if not raw.strip():
                continue
            response = service.handle_message(raw)
            try:
                self.wfile.write(response.encode("utf-8") + b"\n")
                self.wfile.flush()
            except (BrokenPipeError, ConnectionError):
                return


class MapServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: Tuple[str, int], service: MapService):
        super().__init__(address, _Handler)
        self.service = service


def start_background(service: MapService, host: str = "127.0.0.1", port: int = 0) -> Tuple[MapServer, threading.Thread]:
    """Serve on a daemon thread; returns the server (see ``server_address``) and the thread."""
    server = MapServer((host, port), service)
    thread = threading.Thread(target=server.serve_forever, name="crowdmap-server", daemon=True)
    thread.start()
    return server, thread
