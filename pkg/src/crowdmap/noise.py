"""Synthetic scenes and sensor noise for the North-East plane simulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NotVisibleError
from .geometry import CameraIntrinsics, Point, Pose, RigidTransform, bearing, wrap_angle
from .onboard import (
    DetectionRecord,
    GnssObservation,
    LandmarkObservation,
    RigConfig,
    SignDescriptor,
    build_observation,
)


@dataclass(frozen=True)
class NoiseParams:
    gnss_pos_sigma: float = 5.0
    gnss_heading_sigma: float = 0.35
    pixel_sigma: float = 5.0
    passing_bias_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("gnss_pos_sigma", "gnss_heading_sigma", "pixel_sigma", "passing_bias_sigma"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigError(f"{name} must be a finite value >= 0, got {value}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")

    @classmethod
    def noiseless(cls, seed: int = 0) -> "NoiseParams":
        return cls(0.0, 0.0, 0.0, 0.0, seed)


@dataclass(frozen=True)
class SignSpec:
    position: Point
    descriptor: SignDescriptor


DEFAULT_INTRINSICS = CameraIntrinsics(focal=800.0, principal=512.0, image_width=1024.0)
DEFAULT_RIG = RigConfig(
    intrinsics=DEFAULT_INTRINSICS,
    t_vehicle_from_gnss=RigidTransform((0.0, -0.5), 0.0),
    t_vehicle_from_camera=RigidTransform((0.0, 1.5), 0.0),
)


@dataclass(frozen=True)
class Scenario:
    """A straight road, the signs along it, and how vehicles drive it.

    Vehicle poses of one passing are ``poses_per_passing`` points evenly
    spaced from ``road_start`` to ``road_end`` (both included), heading
    along the road. ``lateral_jitter`` shifts a whole passing sideways by a
    Gaussian amount; ``max_range`` is the detector's reach in meters.
    """

    signs: Tuple[SignSpec, ...]
    passing_count: int = 100
    poses_per_passing: int = 5
    road_start: Point = (0.0, 0.0)
    road_end: Point = (0.0, 60.0)
    rig: RigConfig = DEFAULT_RIG
    max_range: float = 100.0
    lateral_jitter: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "signs", tuple(self.signs))
        if self.passing_count < 1:
            raise ConfigError("passing_count must be >= 1")
        if self.poses_per_passing < 1:
            raise ConfigError("poses_per_passing must be >= 1")
        if self.road_start == self.road_end:
            raise ConfigError("road_start and road_end must differ")
        if not self.max_range > 0:
            raise ConfigError("max_range must be positive")
        if self.lateral_jitter < 0:
            raise ConfigError("lateral_jitter must be >= 0")

    @property
    def road_heading(self) -> float:
        return bearing(self.road_start, self.road_end)

    def nominal_poses(self) -> List[Pose]:
        n = self.poses_per_passing
        (e0, n0), (e1, n1) = self.road_start, self.road_end
        heading = self.road_heading
        poses = []
        for i in range(n):
            t = i / (n - 1) if n > 1 else 0.0
            poses.append(Pose(e0 + t * (e1 - e0), n0 + t * (n1 - n0), heading))
        return poses


DEFAULT_SCENARIO_FILE = Path(__file__).parent / "data" / "default.cfg"


def default_scenario(**overrides) -> Tuple[Scenario, NoiseParams]:
    """The packaged default scene and noise, with Scenario fields overridden."""
    scenario, params = load_scenario(DEFAULT_SCENARIO_FILE)
    return replace(scenario, **overrides), params


def project_landmark(camera: Pose, k: CameraIntrinsics, sign: Sequence[float]) -> float:
    """True pixel column of ``sign`` in a camera at ``camera``."""
    de = sign[0] - camera.east
    dn = sign[1] - camera.north
    if de == 0.0 and dn == 0.0:
        raise NotVisibleError("sign coincides with the camera center")
    relative = wrap_angle(math.atan2(de, dn) - camera.heading)
    if not math.cos(relative) > 0:
        raise NotVisibleError("sign is behind the camera")
    u = k.principal + k.focal * math.tan(relative)
    if not 0 <= u <= k.image_width:
        raise NotVisibleError(f"sign projects to u={u:.1f}, outside the image")
    return u


def perturb_gnss(
    true_state: Pose,
    params: NoiseParams,
    rng: np.random.Generator,
    bias: Sequence[float] = (0.0, 0.0),
    timestamp: float = 0.0,
) -> GnssObservation:
    de, dn = rng.normal(0.0, params.gnss_pos_sigma, size=2)
    dh = rng.normal(0.0, params.gnss_heading_sigma)
    pose = Pose(
        true_state.east + de + bias[0],
        true_state.north + dn + bias[1],
        true_state.heading + dh,
    )
    return GnssObservation(pose, timestamp)


def perturb_pixel(u_true: float, params: NoiseParams, rng: np.random.Generator, image_width: float) -> float:
    u = u_true + rng.normal(0.0, params.pixel_sigma)
    return min(max(u, 0.0), float(image_width))


def passing_rng(seed: int, passing_index: int) -> np.random.Generator:
    """Independent generator per passing, derived from the base seed."""
    return np.random.default_rng([int(seed), int(passing_index)])


def generate_passing_by_sign(
    s: Scenario,
    passing_index: int,
    params: NoiseParams,
    rng: Optional[np.random.Generator] = None,
) -> Dict[int, List[LandmarkObservation]]:
    """Observations of one passing, keyed by index into ``s.signs``.

    Random draws per passing: bias (2), lateral shift (1), then per pose the
    GNSS noise (3) followed by one pixel draw per visible sign.
    """
    if not 0 <= passing_index < s.passing_count:
        raise ConfigError(f"passing_index {passing_index} outside [0, {s.passing_count})")
    if rng is None:
        rng = passing_rng(params.seed, passing_index)
    bias = rng.normal(0.0, params.passing_bias_sigma, size=2)
    shift = rng.normal(0.0, s.lateral_jitter)
    right = (math.cos(s.road_heading), -math.sin(s.road_heading))
    rig = s.rig
    vehicle_id = f"vehicle-{passing_index:04d}"
    passing_id = str(passing_index)

    out: Dict[int, List[LandmarkObservation]] = {i: [] for i in range(len(s.signs))}
    for pose_index, nominal in enumerate(s.nominal_poses()):
        vehicle = Pose(nominal.east + shift * right[0], nominal.north + shift * right[1], nominal.heading)
        receiver = vehicle.compose(rig.t_vehicle_from_gnss)
        camera = vehicle.compose(rig.t_vehicle_from_camera)
        timestamp = 1000.0 * passing_index + pose_index
        z = perturb_gnss(receiver, params, rng, bias=bias, timestamp=timestamp)
        for sign_index, sign in enumerate(s.signs):
            if math.dist(camera.position, sign.position) > s.max_range:
                continue
            try:
                u_true = project_landmark(camera, rig.intrinsics, sign.position)
            except NotVisibleError:
                continue
            u = perturb_pixel(u_true, params, rng, rig.intrinsics.image_width)
            det = DetectionRecord(u, 0.5 * rig.intrinsics.image_width, sign.descriptor)
            out[sign_index].append(build_observation(z, det, rig, vehicle_id, passing_id))
    return out


def generate_passing(
    s: Scenario,
    passing_index: int,
    params: NoiseParams,
    rng: Optional[np.random.Generator] = None,
) -> List[LandmarkObservation]:
    by_sign = generate_passing_by_sign(s, passing_index, params, rng)
    # pose-major order, as the vehicle would emit them
    return sorted((o for obs in by_sign.values() for o in obs), key=lambda o: o.timestamp)


# -- scenario files ------------------------------------------------------------

_FLOAT_KEYS = {
    "max_range",
    "lateral_jitter",
    "focal",
    "principal",
    "image_width",
    "gnss_pos_sigma",
    "gnss_heading_sigma",
    "pixel_sigma",
    "passing_bias_sigma",
}
_INT_KEYS = {"passing_count", "poses_per_passing", "seed"}
_VECTOR_KEYS = {"road_start": 2, "road_end": 2, "gnss_offset": 3, "camera_offset": 3}


def _floats(text: str, count: int, key: str) -> Tuple[float, ...]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != count:
        raise ConfigError(f"{key}: expected {count} comma-separated numbers, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def parse_scenario(text: str) -> Tuple[Scenario, NoiseParams]:
    """Parse the flat ``key = value`` scenario format.

    ``sign = east, north, class[, text]`` may repeat; every other key may
    appear once. Blank lines and ``#`` comments are ignored.
    """
    values: Dict[str, str] = {}
    signs: List[SignSpec] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key == "sign":
            parts = [p.strip() for p in value.split(",")]
            if len(parts) not in (3, 4):
                raise ConfigError(f"line {lineno}: sign needs 'east, north, class[, text]'")
            try:
                pos = (float(parts[0]), float(parts[1]))
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from exc
            signs.append(SignSpec(pos, SignDescriptor(parts[2], parts[3] if len(parts) == 4 else None)))
            continue
        if key not in _FLOAT_KEYS | _INT_KEYS | set(_VECTOR_KEYS):
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value

    if not signs:
        raise ConfigError("scenario defines no sign")

    def get_float(key, default):
        if key not in values:
            return default
        try:
            return float(values[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc

    def get_int(key, default):
        if key not in values:
            return default
        try:
            return int(values[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc

    def get_vec(key, default):
        if key not in values:
            return default
        return _floats(values[key], _VECTOR_KEYS[key], key)

    base = Scenario(signs=tuple(signs))
    k = base.rig.intrinsics
    gx, gy, gr = get_vec("gnss_offset", (*base.rig.t_vehicle_from_gnss.translation, base.rig.t_vehicle_from_gnss.rotation))
    cx, cy, cr = get_vec("camera_offset", (*base.rig.t_vehicle_from_camera.translation, base.rig.t_vehicle_from_camera.rotation))
    rig = RigConfig(
        intrinsics=CameraIntrinsics(
            get_float("focal", k.focal), get_float("principal", k.principal), get_float("image_width", k.image_width)
        ),
        t_vehicle_from_gnss=RigidTransform((gx, gy), gr),
        t_vehicle_from_camera=RigidTransform((cx, cy), cr),
    )
    scenario = Scenario(
        signs=tuple(signs),
        passing_count=get_int("passing_count", base.passing_count),
        poses_per_passing=get_int("poses_per_passing", base.poses_per_passing),
        road_start=get_vec("road_start", base.road_start),
        road_end=get_vec("road_end", base.road_end),
        rig=rig,
        max_range=get_float("max_range", base.max_range),
        lateral_jitter=get_float("lateral_jitter", base.lateral_jitter),
    )
    defaults = NoiseParams()
    params = NoiseParams(
        gnss_pos_sigma=get_float("gnss_pos_sigma", defaults.gnss_pos_sigma),
        gnss_heading_sigma=get_float("gnss_heading_sigma", defaults.gnss_heading_sigma),
        pixel_sigma=get_float("pixel_sigma", defaults.pixel_sigma),
        passing_bias_sigma=get_float("passing_bias_sigma", defaults.passing_bias_sigma),
        seed=get_int("seed", defaults.seed),
    )
    return scenario, params


def load_scenario(path) -> Tuple[Scenario, NoiseParams]:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def format_scenario(s: Scenario, params: NoiseParams) -> str:
    g = s.rig.t_vehicle_from_gnss
    c = s.rig.t_vehicle_from_camera
    k = s.rig.intrinsics
    lines = [
        f"passing_count = {s.passing_count}",
        f"poses_per_passing = {s.poses_per_passing}",
        f"road_start = {s.road_start[0]!r}, {s.road_start[1]!r}",
        f"road_end = {s.road_end[0]!r}, {s.road_end[1]!r}",
        f"max_range = {s.max_range!r}",
        f"lateral_jitter = {s.lateral_jitter!r}",
        f"focal = {k.focal!r}",
        f"principal = {k.principal!r}",
        f"image_width = {k.image_width!r}",
        f"gnss_offset = {g.translation[0]!r}, {g.translation[1]!r}, {g.rotation!r}",
        f"camera_offset = {c.translation[0]!r}, {c.translation[1]!r}, {c.rotation!r}",
        f"gnss_pos_sigma = {params.gnss_pos_sigma!r}",
        f"gnss_heading_sigma = {params.gnss_heading_sigma!r}",
        f"pixel_sigma = {params.pixel_sigma!r}",
        f"passing_bias_sigma = {params.passing_bias_sigma!r}",
        f"seed = {params.seed}",
    ]
    for sign in s.signs:
        parts = [repr(sign.position[0]), repr(sign.position[1]), sign.descriptor.sign_class]
        if sign.descriptor.text_payload is not None:
            parts.append(sign.descriptor.text_payload)
        lines.append("sign = " + ", ".join(parts))
    return "\n".join(lines) + "\n"
