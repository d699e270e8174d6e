"""Planar frame algebra on the East/North plane.

Conventions used everywhere in the package:

* East is +x, North is +y.
* Headings and bearings are compass angles: radians measured clockwise
  from North, wrapped to (-pi, pi].
* A body frame (vehicle, receiver, camera) has its +y axis pointing
  forward along the heading and its +x axis pointing to the right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

from .errors import DegenerateGeometryError, InputDomainError

Point = Tuple[float, float]

TWO_PI = 2.0 * math.pi


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.remainder(angle, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


def rotate(vec: Sequence[float], angle: float) -> Point:
    # clockwise rotation, matching compass headings
    c, s = math.cos(angle), math.sin(angle)
    x, y = vec[0], vec[1]
    return (c * x + s * y, -s * x + c * y)


def heading_to_direction(heading: float) -> Point:
    return (math.sin(heading), math.cos(heading))


def bearing(origin: Sequence[float], target: Sequence[float]) -> float:
    """Compass bearing of ``target`` seen from ``origin``."""
    de = target[0] - origin[0]
    dn = target[1] - origin[1]
    if de == 0.0 and dn == 0.0:
        raise DegenerateGeometryError("bearing undefined between coincident points")
    return math.atan2(de, dn)


@dataclass(frozen=True)
class RigidTransform:
    """Planar rigid transform ``p -> R(rotation) p + translation``."""

    translation: Point = (0.0, 0.0)
    rotation: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))
        object.__setattr__(self, "rotation", wrap_angle(float(self.rotation)))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, p: Sequence[float]) -> Point:
        x, y = rotate(p, self.rotation)
        return (x + self.translation[0], y + self.translation[1])

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``: (self * other)(p) == self(other(p))."""
        return RigidTransform(self.apply(other.translation), self.rotation + other.rotation)

    def inverse(self) -> "RigidTransform":
        tx, ty = rotate(self.translation, -self.rotation)
        return RigidTransform((-tx, -ty), -self.rotation)


@dataclass(frozen=True)
class Pose:
    """World pose of a body frame: position in meters, compass heading in radians."""

    east: float
    north: float
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "east", float(self.east))
        object.__setattr__(self, "north", float(self.north))
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    @property
    def position(self) -> Point:
        return (self.east, self.north)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_transform(cls, t: RigidTransform) -> "Pose":
        return cls(t.translation[0], t.translation[1], t.rotation)

    def as_transform(self) -> RigidTransform:
        return RigidTransform((self.east, self.north), self.heading)

    def compose(self, other: Union["Pose", RigidTransform]) -> "Pose":
        if isinstance(other, Pose):
            offset, rotation = (other.east, other.north), other.heading
        else:
            offset, rotation = other.translation, other.rotation
        x, y = rotate(offset, self.heading)
        return Pose(x + self.east, y + self.north, self.heading + rotation)

    def inverse(self) -> "Pose":
        return Pose.from_transform(self.as_transform().inverse())


def compose(a, b):
    return a.compose(b)


def invert(a):
    return a.inverse()


def transform_point(t: Union[RigidTransform, Pose], p: Sequence[float]) -> Point:
    if isinstance(t, Pose):
        t = t.as_transform()
    return t.apply(p)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Horizontal slice of the pinhole matrix K."""

    focal: float
    principal: float
    image_width: float

    def __post_init__(self):
        if not self.focal > 0:
            raise InputDomainError(f"focal must be positive, got {self.focal}")
        if not self.image_width > 0:
            raise InputDomainError(f"image_width must be positive, got {self.image_width}")
        if not 0 <= self.principal <= self.image_width:
            raise InputDomainError(
                f"principal point {self.principal} outside [0, {self.image_width}]"
            )

    def pixel_angle(self, u: float) -> float:
        """Angle of pixel column ``u`` relative to the optical axis (clockwise positive)."""
        return math.atan((u - self.principal) / self.focal)


@dataclass(frozen=True)
class ProjectionLine:
    """Infinite line through ``anchor`` with unit ``direction``.

    ``anchor`` is the camera center (point A); ``anchor + direction`` is a
    second point B on the line.
    """

    anchor: Point
    direction: Point

    def __post_init__(self):
        de, dn = float(self.direction[0]), float(self.direction[1])
        norm = math.hypot(de, dn)
        if not norm > 0 or not math.isfinite(norm):
            raise DegenerateGeometryError("projection line direction must be a finite nonzero vector")
        # leave near-unit vectors untouched so parse/serialize round trips are bit exact
        if abs(norm - 1.0) > 1e-13:
            de, dn = de / norm, dn / norm
        object.__setattr__(self, "anchor", (float(self.anchor[0]), float(self.anchor[1])))
        object.__setattr__(self, "direction", (de, dn))

    @classmethod
    def from_heading(cls, anchor: Sequence[float], heading: float) -> "ProjectionLine":
        return cls((anchor[0], anchor[1]), heading_to_direction(heading))

    @property
    def heading(self) -> float:
        return math.atan2(self.direction[0], self.direction[1])

    @property
    def normal(self) -> Point:
        # direction rotated a quarter turn counter-clockwise
        return (-self.direction[1], self.direction[0])

    @property
    def point_b(self) -> Point:
        return (self.anchor[0] + self.direction[0], self.anchor[1] + self.direction[1])

    def transformed(self, t: Union[RigidTransform, Pose]) -> "ProjectionLine":
        if isinstance(t, Pose):
            t = t.as_transform()
        return ProjectionLine(t.apply(self.anchor), rotate(self.direction, t.rotation))

    def translated(self, offset: Sequence[float]) -> "ProjectionLine":
        return ProjectionLine((self.anchor[0] + offset[0], self.anchor[1] + offset[1]), self.direction)


def pixel_to_ray(camera: Pose, k: CameraIntrinsics, u: float) -> ProjectionLine:
    """Back-project pixel column ``u`` into a world projection line."""
    if not 0 <= u <= k.image_width:
        raise InputDomainError(f"pixel u={u} outside [0, {k.image_width}]")
    return ProjectionLine.from_heading(camera.position, camera.heading + k.pixel_angle(u))


def orthogonal_distance(p: Sequence[float], line: ProjectionLine) -> float:
    de, dn = line.direction
    return abs(de * (p[1] - line.anchor[1]) - dn * (p[0] - line.anchor[0]))


def signed_heading_residual(p: Sequence[float], line: ProjectionLine, camera_pos: Sequence[float]) -> float:
    """Wrapped difference between the bearing camera->p and the line heading."""
    return wrap_angle(bearing(camera_pos, p) - line.heading)


def heading_residual(p: Sequence[float], line: ProjectionLine, camera_pos: Sequence[float]) -> float:
    return abs(signed_heading_residual(p, line, camera_pos))
