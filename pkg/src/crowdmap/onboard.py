"""Per-vehicle geolocalization: GNSS fix + sign detection -> world projection line."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, List, Optional

from .errors import InputDomainError, RecordParseError
from .geometry import CameraIntrinsics, Pose, ProjectionLine, RigidTransform, pixel_to_ray

logger = logging.getLogger(__name__)

OBSERVATION_KEYS = (
    "vehicle_id",
    "passing_id",
    "timestamp",
    "anchor_e",
    "anchor_n",
    "dir_e",
    "dir_n",
    "sign_class",
    "text_payload",
)


@dataclass(frozen=True, order=True)
class SignDescriptor:
    sign_class: str
    text_payload: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.sign_class, str) or not self.sign_class:
            raise InputDomainError("sign_class must be a nonempty string")
        if self.text_payload is not None and not isinstance(self.text_payload, str):
            raise InputDomainError("text_payload must be a string or None")

    def label(self) -> str:
        if self.text_payload is None:
            return self.sign_class
        return f"{self.sign_class}:{self.text_payload}"


@dataclass(frozen=True)
class GnssObservation:
    pose: Pose
    timestamp: float = 0.0


@dataclass(frozen=True)
class DetectionRecord:
    u: float
    v: float
    descriptor: SignDescriptor


@dataclass(frozen=True)
class LandmarkObservation:
    line: ProjectionLine
    descriptor: SignDescriptor
    vehicle_id: str
    passing_id: str
    timestamp: float = 0.0

    @property
    def camera_position(self):
        # the line anchor is the estimated camera center
        return self.line.anchor


@dataclass(frozen=True)
class RigConfig:
    """Extrinsic and intrinsic calibration of one vehicle.

    ``t_vehicle_from_gnss`` maps receiver-frame points into the vehicle
    frame (i.e. it is the receiver's pose in the vehicle frame); likewise
    for ``t_vehicle_from_camera``.
    """

    intrinsics: CameraIntrinsics
    t_vehicle_from_gnss: RigidTransform = field(default_factory=RigidTransform)
    t_vehicle_from_camera: RigidTransform = field(default_factory=RigidTransform)


def estimate_vehicle_state(z: GnssObservation, rig: RigConfig) -> Pose:
    return z.pose.compose(rig.t_vehicle_from_gnss.inverse())


def estimate_camera_state(vehicle: Pose, rig: RigConfig) -> Pose:
    return vehicle.compose(rig.t_vehicle_from_camera)


def build_observation(
    z: GnssObservation,
    det: DetectionRecord,
    rig: RigConfig,
    vehicle_id: str,
    passing_id: str,
) -> LandmarkObservation:
    camera = estimate_camera_state(estimate_vehicle_state(z, rig), rig)
    line = pixel_to_ray(camera, rig.intrinsics, det.u)
    return LandmarkObservation(line, det.descriptor, str(vehicle_id), str(passing_id), float(z.timestamp))


class OnboardPipeline:
    """Onboard geolocalization block of one vehicle.

    Observations accumulate in a local queue and leave the vehicle only on
    :meth:`flush`. A failing sink (connection loss) leaves the queue intact
    so a later flush can retry.
    """

    def __init__(self, vehicle_id: str, rig: RigConfig):
        self.vehicle_id = vehicle_id
        self.rig = rig
        self._queue: List[LandmarkObservation] = []

    def __len__(self):
        return len(self._queue)

    @property
    def pending(self) -> List[LandmarkObservation]:
        return list(self._queue)

    def process(self, z: GnssObservation, detections: Iterable[DetectionRecord], passing_id: str) -> List[LandmarkObservation]:
        made = [build_observation(z, det, self.rig, self.vehicle_id, passing_id) for det in detections]
        self._queue.extend(made)
        return made

    def flush(self, sink: Callable[[List[LandmarkObservation]], object]) -> int:
        if not self._queue:
            return 0
        batch = list(self._queue)
        try:
            sink(batch)
        except (OSError, ConnectionError) as exc:
            logger.warning("vehicle %s: upload failed (%s), keeping %d observations", self.vehicle_id, exc, len(batch))
            return 0
        del self._queue[: len(batch)]
        return len(batch)


# -- observation batch files -------------------------------------------------


def _fmt_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise InputDomainError(f"cannot serialize non-finite value {x!r}")
    # 17 significant digits round-trips every double exactly
    return "%#.17g" % x


def observation_to_json(obs: LandmarkObservation) -> str:
    """One observation as a single-line JSON object, keys in fixed order."""
    payload = "null" if obs.descriptor.text_payload is None else json.dumps(obs.descriptor.text_payload)
    return (
        "{"
        f'"vehicle_id": {json.dumps(obs.vehicle_id)}, '
        f'"passing_id": {json.dumps(obs.passing_id)}, '
        f'"timestamp": {_fmt_float(obs.timestamp)}, '
        f'"anchor_e": {_fmt_float(obs.line.anchor[0])}, '
        f'"anchor_n": {_fmt_float(obs.line.anchor[1])}, '
        f'"dir_e": {_fmt_float(obs.line.direction[0])}, '
        f'"dir_n": {_fmt_float(obs.line.direction[1])}, '
        f'"sign_class": {json.dumps(obs.descriptor.sign_class)}, '
        f'"text_payload": {payload}'
        "}"
    )


def _number(record: dict, key: str) -> float:
    value = record[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise RecordParseError(f"field {key!r} must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise RecordParseError(f"field {key!r} is not finite")
    return value


def _identifier(record: dict, key: str) -> str:
    value = record[key]
    if isinstance(value, bool) or not isinstance(value, (str, int)):
        raise RecordParseError(f"field {key!r} must be a string identifier, got {value!r}")
    return str(value)


def observation_from_dict(record) -> LandmarkObservation:
    if not isinstance(record, dict):
        raise RecordParseError(f"observation record must be an object, got {type(record).__name__}")
    missing = [k for k in OBSERVATION_KEYS if k not in record]
    if missing:
        raise RecordParseError(f"observation record missing keys {missing}")
    text = record["text_payload"]
    if text is not None and not isinstance(text, str):
        raise RecordParseError("text_payload must be a string or null")
    try:
        descriptor = SignDescriptor(record["sign_class"], text)
        direction = (_number(record, "dir_e"), _number(record, "dir_n"))
        if abs(math.hypot(*direction) - 1.0) > 1e-6:
            raise RecordParseError(f"direction {direction} is not a unit vector")
        line = ProjectionLine((_number(record, "anchor_e"), _number(record, "anchor_n")), direction)
    except RecordParseError:
        raise
    except ValueError as exc:
        raise RecordParseError(str(exc)) from exc
    return LandmarkObservation(
        line,
        descriptor,
        _identifier(record, "vehicle_id"),
        _identifier(record, "passing_id"),
        _number(record, "timestamp"),
    )


def observation_from_json(text: str) -> LandmarkObservation:
    try:
        record = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RecordParseError(f"invalid JSON: {exc}") from exc
    return observation_from_dict(record)


def write_observations(path, observations: Iterable[LandmarkObservation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obs in observations:
            fh.write(observation_to_json(obs))
            fh.write("\n")


def iter_observations(path) -> Iterator[LandmarkObservation]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                yield observation_from_json(raw)
            except RecordParseError as exc:
                raise RecordParseError(f"{Path(path).name}:{lineno}: {exc}") from exc


def read_observations(path) -> List[LandmarkObservation]:
    return list(iter_observations(path))
