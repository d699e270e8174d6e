"""Map state, batch ingestion, snapshots, and log-based recovery.

The append-only log is the source of truth. Each line is one JSON record:

``{"kind": "config", ...}``
    Matching gate and triangulation settings; first record of a log.
``{"kind": "seed", "id": ..., "sign_class": ..., "text_payload": ..., "east": ..., "north": ...}``
    A manually registered landmark.
``{"kind": "batch", "revision": r, "observations": [...]}``
    One acknowledged ingest; applying it yields revision ``r``.

Replaying the records in order through :func:`apply_batch` reproduces the
state bit for bit, because triangulation is deterministic and independent
of observation order.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from ..errors import CrowdmapError, InsufficientDataError, RecordParseError
from ..matching import DEFAULT_GATE_RADIUS, MapLandmark, match_observation, register_landmark
from ..onboard import LandmarkObservation, SignDescriptor, observation_from_dict, observation_to_json
from ..triangulate import DEFAULT_RANGE_SCALE, OBJECTIVES, LandmarkEstimate, triangulate_observations

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MapConfig:
    gate_radius: float = DEFAULT_GATE_RADIUS
    objective: str = "heading"
    range_scale: float = DEFAULT_RANGE_SCALE

    def __post_init__(self):
        if not self.gate_radius > 0:
            raise ValueError(f"gate_radius must be positive, got {self.gate_radius}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")

    def to_dict(self) -> dict:
        return {"gate_radius": self.gate_radius, "objective": self.objective, "range_scale": self.range_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "MapConfig":
        return cls(float(d["gate_radius"]), str(d["objective"]), float(d["range_scale"]))


@dataclass
class MapState:
    config: MapConfig = field(default_factory=MapConfig)
    landmarks: Dict[int, MapLandmark] = field(default_factory=dict)
    unmatched_pool: List[LandmarkObservation] = field(default_factory=list)
    revision: int = 0


@dataclass(frozen=True)
class IngestReport:
    matched: int
    unmatched: int
    updated_landmark_ids: Tuple[int, ...]
    revision: int

    def to_dict(self) -> dict:
        return {
            "matched": self.matched,
            "unmatched": self.unmatched,
            "updated_landmark_ids": list(self.updated_landmark_ids),
            "revision": self.revision,
        }


def retriangulate(observations: Sequence[LandmarkObservation], config: MapConfig) -> Optional[LandmarkEstimate]:
    """Estimate over all observations, or None when they do not determine one."""
    try:
        return triangulate_observations(observations, config.objective, config.range_scale)
    except InsufficientDataError:
        return None
    except CrowdmapError as exc:
        logger.warning("triangulation over %d observations failed: %s", len(observations), exc)
        return None


def seed_landmark(state: MapState, descriptor: SignDescriptor, position: Optional[Sequence[float]]) -> int:
    return register_landmark(descriptor, position, state.landmarks)


def apply_batch(state: MapState, batch: Sequence[LandmarkObservation]) -> Tuple[MapState, IngestReport]:
    """Return the state after ``batch`` without mutating ``state``.

    Every observation is matched against the landmarks as they were before
    the batch; all touched landmarks are then re-triangulated over their
    full observation lists.
    """
    if not batch:
        raise ValueError("ingest batch must not be empty")
    assignments = [match_observation(obs, state.landmarks, state.config.gate_radius) for obs in batch]

    additions: Dict[int, List[LandmarkObservation]] = {}
    unmatched = []
    for obs, lm_id in zip(batch, assignments):
        if lm_id is None:
            unmatched.append(obs)
        else:
            additions.setdefault(lm_id, []).append(obs)

    landmarks = dict(state.landmarks)
    updated = []
    for lm_id in sorted(additions):
        old = landmarks[lm_id]
        observations = old.observations + additions[lm_id]
        estimate = old.estimate
        if len(observations) >= 2:
            estimate = retriangulate(observations, state.config)
            updated.append(lm_id)
        landmarks[lm_id] = replace(old, observations=observations, estimate=estimate)

    new_state = MapState(
        config=state.config,
        landmarks=landmarks,
        unmatched_pool=state.unmatched_pool + unmatched,
        revision=state.revision + 1,
    )
    report = IngestReport(len(batch) - len(unmatched), len(unmatched), tuple(updated), new_state.revision)
    return new_state, report


# -- snapshots -------------------------------------------------------------------


def _obs_dict(obs: LandmarkObservation) -> dict:
    return {
        "vehicle_id": obs.vehicle_id,
        "passing_id": obs.passing_id,
        "timestamp": obs.timestamp,
        "anchor_e": obs.line.anchor[0],
        "anchor_n": obs.line.anchor[1],
        "dir_e": obs.line.direction[0],
        "dir_n": obs.line.direction[1],
        "sign_class": obs.descriptor.sign_class,
        "text_payload": obs.descriptor.text_payload,
    }


def state_to_dict(state: MapState) -> dict:
    landmarks = []
    for lm_id in sorted(state.landmarks):
        lm = state.landmarks[lm_id]
        landmarks.append(
            {
                "id": lm.id,
                "sign_class": lm.descriptor.sign_class,
                "text_payload": lm.descriptor.text_payload,
                "seed": None if lm.seed_position is None else list(lm.seed_position),
                "estimate": None if lm.estimate is None else lm.estimate.to_dict(),
                "observations": [_obs_dict(o) for o in lm.observations],
            }
        )
    return {
        "revision": state.revision,
        "config": state.config.to_dict(),
        "landmarks": landmarks,
        "unmatched": [_obs_dict(o) for o in state.unmatched_pool],
    }


def state_from_dict(d: dict) -> MapState:
    landmarks = {}
    for item in d["landmarks"]:
        seed = item["seed"]
        lm = MapLandmark(
            id=int(item["id"]),
            descriptor=SignDescriptor(item["sign_class"], item["text_payload"]),
            seed_position=None if seed is None else (float(seed[0]), float(seed[1])),
            estimate=None if item["estimate"] is None else LandmarkEstimate.from_dict(item["estimate"]),
            observations=[observation_from_dict(o) for o in item["observations"]],
        )
        landmarks[lm.id] = lm
    return MapState(
        config=MapConfig.from_dict(d["config"]),
        landmarks=landmarks,
        unmatched_pool=[observation_from_dict(o) for o in d["unmatched"]],
        revision=int(d["revision"]),
    )


def snapshot(state: MapState) -> str:
    """Canonical JSON text of the whole state."""
    return json.dumps(state_to_dict(state), sort_keys=True, separators=(",", ":"), allow_nan=False)


def restore(text: str) -> MapState:
    return state_from_dict(json.loads(text))


# -- log records -------------------------------------------------------------------


def config_record(config: MapConfig) -> str:
    return json.dumps({"kind": "config", **config.to_dict()}, sort_keys=True)


def seed_record(lm: MapLandmark) -> str:
    pos = lm.seed_position
    return json.dumps(
        {
            "kind": "seed",
            "id": lm.id,
            "sign_class": lm.descriptor.sign_class,
            "text_payload": lm.descriptor.text_payload,
            "east": None if pos is None else pos[0],
            "north": None if pos is None else pos[1],
        },
        sort_keys=True,
    )


def batch_record(revision: int, batch: Sequence[LandmarkObservation]) -> str:
    body = ", ".join(observation_to_json(o) for o in batch)
    return f'{{"kind": "batch", "revision": {revision}, "observations": [{body}]}}'


def apply_record(state: MapState, record: dict) -> MapState:
    kind = record.get("kind")
    if kind == "config":
        if state.landmarks or state.revision:
            raise RecordParseError("config record after state changes")
        return MapState(config=MapConfig.from_dict(record))
    if kind == "seed":
        pos = None if record["east"] is None else (float(record["east"]), float(record["north"]))
        new_id = seed_landmark(state, SignDescriptor(record["sign_class"], record["text_payload"]), pos)
        if new_id != record["id"]:
            raise RecordParseError(f"seed id {record['id']} replayed as {new_id}")
        return state
    if kind == "batch":
        batch = [observation_from_dict(o) for o in record["observations"]]
        new_state, report = apply_batch(state, batch)
        if report.revision != record["revision"]:
            raise RecordParseError(f"batch revision {record['revision']} replayed as {report.revision}")
        return new_state
    raise RecordParseError(f"unknown log record kind {kind!r}")


def _replay(state: MapState, fh, start: int) -> Tuple[MapState, int, bool]:
    """Apply records from byte ``start``; returns (state, valid_end, clean)."""
    fh.seek(start)
    valid_end = start
    while True:
        raw = fh.readline()
        if not raw:
            return state, valid_end, True
        if not raw.endswith(b"\n"):
            logger.warning("log: torn record at byte %d (%d bytes without newline)", valid_end, len(raw))
            return state, valid_end, False
        if raw.strip():
            try:
                state = apply_record(state, json.loads(raw))
            except (ValueError, KeyError, TypeError, CrowdmapError) as exc:
                logger.warning("log: corrupt record at byte %d: %s", valid_end, exc)
                return state, valid_end, False
        valid_end += len(raw)


def _load_snapshot(snapshot_path: Path, log_size: int) -> Optional[Tuple[MapState, int]]:
    try:
        payload = json.loads(snapshot_path.read_text(encoding="utf-8"))
        offset = int(payload["log_offset"])
        if offset > log_size:
            logger.warning("snapshot %s points past the end of the log, ignoring it", snapshot_path)
            return None
        return state_from_dict(payload["state"]), offset
    except FileNotFoundError:
        return None
    except (ValueError, KeyError, TypeError, CrowdmapError) as exc:
        logger.warning("snapshot %s unreadable (%s), replaying the full log", snapshot_path, exc)
        return None


def recover(log_path, snapshot_path=None, truncate: bool = True) -> MapState:
    """Rebuild the state from the log, optionally starting from a snapshot.

    A torn or corrupt record ends the replay: the longest valid prefix is
    kept and, if ``truncate`` is set, the file is cut back to it.
    """
    log_path = Path(log_path)
    if not log_path.exists():
        return MapState()
    size = log_path.stat().st_size
    start_state, start = MapState(), 0
    if snapshot_path is not None:
        loaded = _load_snapshot(Path(snapshot_path), size)
        if loaded is not None:
            start_state, start = loaded

    with open(log_path, "rb") as fh:
        state, valid_end, clean = _replay(start_state, fh, start)
        if not clean and start > 0:
            # the snapshot may hide an inconsistency; fall back to a full replay
            logger.warning("replay after snapshot failed, replaying from the start")
            state, valid_end, clean = _replay(MapState(), fh, 0)
    if not clean:
        logger.warning("log %s: keeping %d of %d bytes", log_path, valid_end, size)
        if truncate:
            with open(log_path, "r+b") as fh:
                fh.truncate(valid_end)
                fh.flush()
                os.fsync(fh.fileno())
    return state
