"""Convergence studies: single-passing vs. cumulative estimates, superposition, permutations."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, CrowdmapError
from .geometry import Point
from .noise import NoiseParams, Scenario, SignSpec, default_scenario, generate_passing_by_sign
from .onboard import LandmarkObservation, SignDescriptor
from .triangulate import DEFAULT_RANGE_SCALE, LandmarkEstimate, triangulate_arrays

logger = logging.getLogger(__name__)

CURVE_HEADER = (
    "passing",
    "single_e",
    "single_n",
    "single_dist",
    "collab_e",
    "collab_n",
    "collab_dist",
    "sigma_e",
    "sigma_n",
)
PERMUTATION_HEADER = ("passing", "collab_dist", "single_dist", "single_count")


def _dist(e: Optional[float], n: Optional[float]) -> Optional[float]:
    if e is None or n is None:
        return None
    return math.hypot(e, n)


@dataclass(frozen=True)
class ErrorCurvePoint:
    """Signed estimate-minus-truth errors after one passing.

    Absent entries (no estimate possible) are None. ``passing_index`` counts
    from 1.
    """

    passing_index: int
    single_err_e: Optional[float] = None
    single_err_n: Optional[float] = None
    collab_err_e: Optional[float] = None
    collab_err_n: Optional[float] = None
    sigma_e: Optional[float] = None
    sigma_n: Optional[float] = None

    @property
    def single_err_dist(self) -> Optional[float]:
        return _dist(self.single_err_e, self.single_err_n)

    @property
    def collab_err_dist(self) -> Optional[float]:
        return _dist(self.collab_err_e, self.collab_err_n)


@dataclass(frozen=True)
class PassingLines:
    """Projection lines of one landmark from one passing, as (m, 2) arrays."""

    anchors: np.ndarray
    directions: np.ndarray
    label: str = ""

    def __len__(self) -> int:
        return self.anchors.shape[0]

    @classmethod
    def from_observations(cls, observations: Sequence[LandmarkObservation], label: str = "") -> "PassingLines":
        anchors = np.array([o.line.anchor for o in observations], dtype=float).reshape(-1, 2)
        directions = np.array([o.line.direction for o in observations], dtype=float).reshape(-1, 2)
        return cls(anchors, directions, label)


def try_estimate(
    anchors: np.ndarray, directions: np.ndarray, objective: str = "heading", range_scale: float = DEFAULT_RANGE_SCALE
) -> Optional[LandmarkEstimate]:
    """Estimate, or None when the lines do not determine one."""
    try:
        return triangulate_arrays(anchors, directions, objective, range_scale)
    except CrowdmapError as exc:
        logger.debug("no estimate from %d lines: %s", anchors.shape[0], exc)
        return None


def _finite(x: float) -> Optional[float]:
    return x if math.isfinite(x) else None


def _errors(est: Optional[LandmarkEstimate], truth: Point) -> Tuple[Optional[float], Optional[float]]:
    if est is None:
        return None, None
    return est.position[0] - truth[0], est.position[1] - truth[1]


def convergence_curve(
    passings: Sequence[PassingLines],
    truth: Sequence[float],
    objective: str = "heading",
    range_scale: float = DEFAULT_RANGE_SCALE,
) -> List[ErrorCurvePoint]:
    """Error curve over ``passings`` taken in the given order."""
    points = []
    anchors: List[np.ndarray] = []
    directions: List[np.ndarray] = []
    for k, p in enumerate(passings, 1):
        anchors.append(p.anchors)
        directions.append(p.directions)
        single = try_estimate(p.anchors, p.directions, objective, range_scale)
        collab = try_estimate(np.concatenate(anchors), np.concatenate(directions), objective, range_scale)
        se, sn = _errors(single, truth)
        ce, cn = _errors(collab, truth)
        sigma = (None, None) if collab is None else tuple(_finite(v) for v in collab.deviations)
        points.append(ErrorCurvePoint(k, se, sn, ce, cn, sigma[0], sigma[1]))
    return points


def simulate_passings(s: Scenario, params: NoiseParams, sign_index: int = 0) -> List[PassingLines]:
    """Observations of one sign from every passing of the scenario."""
    if not 0 <= sign_index < len(s.signs):
        raise ConfigError(f"sign_index {sign_index} outside the {len(s.signs)} scenario signs")
    out = []
    for k in range(s.passing_count):
        obs = generate_passing_by_sign(s, k, params)[sign_index]
        out.append(PassingLines.from_observations(obs, str(k)))
    return out


def run_convergence(
    s: Scenario,
    params: NoiseParams,
    sign_index: int = 0,
    objective: str = "heading",
    range_scale: float = DEFAULT_RANGE_SCALE,
) -> List[ErrorCurvePoint]:
    """Simulate every passing and record single-passing and cumulative errors."""
    if not s.signs:
        raise ConfigError("scenario has no sign")
    passings = simulate_passings(s, params, sign_index)
    return convergence_curve(passings, s.signs[sign_index].position, objective, range_scale)


# -- superposition ---------------------------------------------------------------


def group_passings(observations: Sequence[LandmarkObservation]) -> Dict[SignDescriptor, List[List[LandmarkObservation]]]:
    """Observations split by sign, then by (vehicle_id, passing_id) in order of first timestamp."""
    grouped: Dict[SignDescriptor, Dict[Tuple[str, str], List[LandmarkObservation]]] = {}
    for obs in observations:
        grouped.setdefault(obs.descriptor, {}).setdefault((obs.vehicle_id, obs.passing_id), []).append(obs)
    out = {}
    for desc, passings in grouped.items():
        ordered = sorted(passings.items(), key=lambda kv: (min(o.timestamp for o in kv[1]), kv[0]))
        out[desc] = [obs for _, obs in ordered]
    return out


def superpose(
    observations: Sequence[LandmarkObservation],
    groundtruth: Sequence[Tuple[SignDescriptor, Point]],
) -> List[LandmarkObservation]:
    """Move every sign's observations onto the first ``groundtruth`` sign.

    Each sign's lines are translated by (reference - sign). The output holds
    one landmark, the reference, with passings relabeled "1".."L*n" sign by
    sign in ``groundtruth`` order.
    """
    if not groundtruth:
        raise ConfigError("groundtruth must list at least the reference sign")
    truth = dict(groundtruth)
    if len(truth) != len(groundtruth):
        raise ConfigError("groundtruth lists a sign more than once")
    by_sign = group_passings(observations)
    missing = sorted(d.label() for d in by_sign if d not in truth)
    if missing:
        raise ConfigError(f"no groundtruth for sign(s): {', '.join(missing)}")

    ref_desc, ref_pos = groundtruth[0]
    out = []
    counter = 0
    for desc, pos in groundtruth:
        shift = (ref_pos[0] - pos[0], ref_pos[1] - pos[1])
        for passing in by_sign.get(desc, []):
            counter += 1
            for obs in passing:
                out.append(replace(obs, line=obs.line.translated(shift), descriptor=ref_desc, passing_id=str(counter)))
    return out


# -- permutations ----------------------------------------------------------------


@dataclass(frozen=True)
class PermutationResult:
    """Per-index means over permutations; index i of each list is passing i+1.

    ``single_dist[i]`` averages the single-passing error of whichever
    passing landed at position i, over the ``single_count[i]`` permutations
    where it had an estimate. ``excluded`` counts passings (not
    permutations) without a single-passing estimate.
    """

    collab_dist: List[Optional[float]]
    single_dist: List[Optional[float]]
    single_count: List[int]
    single_mean: Optional[float]
    excluded: int
    n_perm: int


def permutation_average(
    passings: Sequence[PassingLines],
    truth: Sequence[float],
    n_perm: int,
    rng: np.random.Generator,
    objective: str = "heading",
    range_scale: float = DEFAULT_RANGE_SCALE,
    orders: Optional[Sequence[Sequence[int]]] = None,
) -> PermutationResult:
    """Average cumulative distance errors over shuffled passing orders.

    Orders are drawn from ``rng`` unless given explicitly in ``orders``.
    """
    if n_perm < 1:
        raise ValueError(f"n_perm must be >= 1, got {n_perm}")
    n = len(passings)
    if orders is None:
        orders = [rng.permutation(n) for _ in range(n_perm)]
    elif len(orders) != n_perm:
        raise ValueError(f"got {len(orders)} orders for n_perm={n_perm}")

    # single-passing errors do not depend on the order
    single = []
    for p in passings:
        est = try_estimate(p.anchors, p.directions, objective, range_scale)
        single.append(None if est is None else math.dist(est.position, truth))
    excluded = sum(1 for v in single if v is None)
    if excluded:
        logger.info("%d of %d passings have no single-passing estimate", excluded, n)

    collab_sum = np.zeros(n)
    collab_count = np.zeros(n, dtype=int)
    single_sum = np.zeros(n)
    single_count = np.zeros(n, dtype=int)
    for order in orders:
        order = [int(i) for i in order]
        if sorted(order) != list(range(n)):
            raise ValueError("each order must be a permutation of the passing indices")
        anchors = np.concatenate([passings[i].anchors for i in order])
        directions = np.concatenate([passings[i].directions for i in order])
        ends = np.cumsum([len(passings[i]) for i in order])
        for k, i in enumerate(order):
            est = try_estimate(anchors[: ends[k]], directions[: ends[k]], objective, range_scale)
            if est is not None:
                collab_sum[k] += math.dist(est.position, truth)
                collab_count[k] += 1
            if single[i] is not None:
                single_sum[k] += single[i]
                single_count[k] += 1

    def means(total, count):
        return [float(t / c) if c else None for t, c in zip(total, count)]

    valid = [v for v in single if v is not None]
    return PermutationResult(
        collab_dist=means(collab_sum, collab_count),
        single_dist=means(single_sum, single_count),
        single_count=[int(c) for c in single_count],
        single_mean=float(np.mean(valid)) if valid else None,
        excluded=excluded,
        n_perm=n_perm,
    )


# -- synthetic field data --------------------------------------------------------

FIELD_SIGN_COUNT = 10
FIELD_PASSINGS = 10
FIELD_SIGN_SPACING = 200.0
FIELD_FRAME_SPACING = 4.0


def synthetic_field_dataset(
    params: Optional[NoiseParams] = None,
    sign_count: int = FIELD_SIGN_COUNT,
    passing_count: int = FIELD_PASSINGS,
    frame_spacing: float = FIELD_FRAME_SPACING,
) -> Tuple[List[LandmarkObservation], List[Tuple[SignDescriptor, Point]]]:
    """Several signs along one long road, each seen on every passing.

    Signs sit on alternating sides of the road, ``FIELD_SIGN_SPACING`` apart,
    at the default scene's lateral offset. The detector range is cut so each
    sign is seen over the same stretch as in the default scene. Camera and
    noise come from the default scene; frames are ``frame_spacing`` meters
    apart. Returns the
    observations and the groundtruth list with the first sign as reference.
    """
    base, default_params = default_scenario()
    if params is None:
        params = default_params
    template = base.signs[0]
    start, end = base.road_start, base.road_end
    ahead = template.position[1] - end[1]
    lateral = template.position[0] - start[0]

    signs = []
    for i in range(sign_count):
        side = 1.0 if i % 2 == 0 else -1.0
        pos = (start[0] + side * lateral, template.position[1] + i * FIELD_SIGN_SPACING)
        signs.append(SignSpec(pos, SignDescriptor(template.descriptor.sign_class, f"field-{i + 1}")))
    road_end = (end[0], signs[-1].position[1] - ahead)
    length = road_end[1] - start[1]
    scenario = replace(
        base,
        signs=tuple(signs),
        passing_count=passing_count,
        poses_per_passing=int(round(length / frame_spacing)) + 1,
        road_end=road_end,
        max_range=math.hypot(lateral, template.position[1] - start[1]),
    )
    observations = []
    for k in range(passing_count):
        by_sign = generate_passing_by_sign(scenario, k, params)
        for i in range(sign_count):
            observations.extend(by_sign[i])
    return observations, [(s.descriptor, s.position) for s in signs]


# -- CSV output ------------------------------------------------------------------


def _cell(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _opt(text: str) -> Optional[float]:
    return None if text == "" else float(text)


def emit_curves(points: Sequence[ErrorCurvePoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for p in points:
            w.writerow(
                [
                    p.passing_index,
                    _cell(p.single_err_e),
                    _cell(p.single_err_n),
                    _cell(p.single_err_dist),
                    _cell(p.collab_err_e),
                    _cell(p.collab_err_n),
                    _cell(p.collab_err_dist),
                    _cell(p.sigma_e),
                    _cell(p.sigma_n),
                ]
            )


def parse_curves(path) -> List[ErrorCurvePoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CURVE_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            ErrorCurvePoint(
                int(row["passing"]),
                _opt(row["single_e"]),
                _opt(row["single_n"]),
                _opt(row["collab_e"]),
                _opt(row["collab_n"]),
                _opt(row["sigma_e"]),
                _opt(row["sigma_n"]),
            )
            for row in reader
        ]


def emit_permutation(result: PermutationResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PERMUTATION_HEADER)
        for i, (c, s, n) in enumerate(zip(result.collab_dist, result.single_dist, result.single_count), 1):
            w.writerow([i, _cell(c), _cell(s), n])


def passings_for(
    observations: Sequence[LandmarkObservation], descriptor: Optional[SignDescriptor] = None
) -> List[PassingLines]:
    """Passings of one sign (the only one, if ``descriptor`` is None)."""
    by_sign = group_passings(observations)
    if descriptor is None:
        if len(by_sign) != 1:
            raise ConfigError(f"expected observations of one sign, found {len(by_sign)}")
        descriptor = next(iter(by_sign))
    return [PassingLines.from_observations(p, p[0].passing_id) for p in by_sign.get(descriptor, [])]

