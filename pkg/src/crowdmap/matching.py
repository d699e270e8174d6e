"""Server-side association of observations with map landmarks."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .errors import ConfigError, InputDomainError
from .geometry import Point, orthogonal_distance
from .onboard import LandmarkObservation, SignDescriptor
from .triangulate import LandmarkEstimate

logger = logging.getLogger(__name__)

DEFAULT_GATE_RADIUS = 20.0


@dataclass
class MapLandmark:
    """A landmark of the map and every observation associated with it.

    ``seed_position`` is the position given at registration; once the
    landmark has been triangulated, ``estimate`` takes precedence for gating.
    """

    id: int
    descriptor: SignDescriptor
    seed_position: Optional[Point] = None
    estimate: Optional[LandmarkEstimate] = None
    observations: List[LandmarkObservation] = field(default_factory=list)

    @property
    def reference_position(self) -> Optional[Point]:
        if self.estimate is not None:
            return self.estimate.position
        return self.seed_position

    @property
    def initialized(self) -> bool:
        return self.reference_position is not None


def _as_iterable(landmarks: Union[Mapping[int, MapLandmark], Iterable[MapLandmark]]) -> Iterable[MapLandmark]:
    if isinstance(landmarks, Mapping):
        return landmarks.values()
    return landmarks


def match_observation(
    obs: LandmarkObservation,
    landmarks: Union[Mapping[int, MapLandmark], Iterable[MapLandmark]],
    gate_radius: float = DEFAULT_GATE_RADIUS,
) -> Optional[int]:
    """Id of the closest same-descriptor landmark within ``gate_radius`` of the line, else None."""
    if not gate_radius > 0:
        raise InputDomainError(f"gate_radius must be positive, got {gate_radius}")
    candidates = []
    for lm in _as_iterable(landmarks):
        if lm.descriptor != obs.descriptor or not lm.initialized:
            continue
        dist = orthogonal_distance(lm.reference_position, obs.line)
        if dist <= gate_radius:
            candidates.append((dist, lm.id))
    if not candidates:
        return None
    candidates.sort()
    if len(candidates) > 1 and candidates[1][0] == candidates[0][0]:
        logger.warning(
            "observation %s/%s equidistant from several %s landmarks, chose id %s",
            obs.vehicle_id, obs.passing_id, obs.descriptor.label(), candidates[0][1],
        )
    return candidates[0][1]


def register_landmark(
    descriptor: SignDescriptor,
    initial_position: Optional[Sequence[float]],
    landmarks: Dict[int, MapLandmark],
) -> int:
    new_id = max(landmarks) + 1 if landmarks else 0
    seed = None if initial_position is None else (float(initial_position[0]), float(initial_position[1]))
    landmarks[new_id] = MapLandmark(new_id, descriptor, seed)
    return new_id


SIGN_TABLE_HEADER = ["sign_class", "text_payload", "east", "north"]


def read_sign_table(path) -> List[Tuple[SignDescriptor, Point]]:
    """Read ``sign_class,text_payload,east,north`` CSV rows in file order.

    An empty ``text_payload`` means no payload. Used for landmark seed files
    and for groundtruth, where the first row is the reference sign.
    """
    out = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SIGN_TABLE_HEADER:
            raise ConfigError(f"{path}: header must be {','.join(SIGN_TABLE_HEADER)}, got {reader.fieldnames}")
        for row in reader:
            try:
                pos = (float(row["east"]), float(row["north"]))
                desc = SignDescriptor(row["sign_class"], row["text_payload"] or None)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}: line {reader.line_num}: {exc}") from exc
            out.append((desc, pos))
    if not out:
        raise ConfigError(f"{path}: no sign rows")
    return out


def write_sign_table(path, signs: Sequence[Tuple[SignDescriptor, Point]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIGN_TABLE_HEADER)
        for desc, pos in signs:
            w.writerow([desc.sign_class, desc.text_payload or "", repr(pos[0]), repr(pos[1])])
