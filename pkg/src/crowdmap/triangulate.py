"""Least-squares landmark triangulation from projection lines.

Two objectives are available:

``orthogonal``
    Sum of squared orthogonal distances between the landmark and each line.
    Linear in the landmark position, solved in closed form.

``heading``
    Sum of squared wrapped differences between the bearing camera->landmark
    and each line heading. Solved by Gauss-Newton, warm-started from the
    orthogonal solution.

The orthogonal fit reports ``s^2 (J^T J)^-1`` with
``s^2 = sum(r^2) / (m - 2)``. The heading fit reports by default the
sandwich covariance ``A^-1 B A^-1``: ``A`` is the observed Hessian of half
the cost, ``B = m / (m - 2) * sum(r_j^2 J_j J_j^T)``. Noisy camera
positions make each heading residual depend on its own Jacobian, and the
Gauss-Newton form then understates the spread of the estimate;
``covariance="gauss-newton"`` selects it anyway. With only two
observations the residual variance is not identifiable; covariance and
deviations are then NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConvergenceError, DegenerateGeometryError, InsufficientDataError
from .geometry import TWO_PI, Point, ProjectionLine

CONDITION_LIMIT = 1e12
MAX_ITERATIONS = 100
STEP_TOLERANCE = 1e-9
COLLISION_RADIUS = 1e-6
# 5 m GNSS position noise over 0.35 rad heading noise
DEFAULT_RANGE_SCALE = 5.0 / 0.35

OBJECTIVES = ("orthogonal", "heading")
COVARIANCE_METHODS = ("sandwich", "gauss-newton")

_NAN_COV = ((math.nan, math.nan), (math.nan, math.nan))


@dataclass(frozen=True)
class LandmarkEstimate:
    position: Point
    covariance: Tuple[Tuple[float, float], Tuple[float, float]]
    deviations: Tuple[float, float]
    n_observations: int
    objective: str = "heading"
    residual_ss: float = 0.0
    iterations: int = 0
    covariance_method: str = "gauss-newton"

    @property
    def covariance_matrix(self) -> np.ndarray:
        return np.array(self.covariance, dtype=float)

    @property
    def has_covariance(self) -> bool:
        return all(math.isfinite(v) for row in self.covariance for v in row)

    def to_dict(self) -> dict:
        def num(x):
            return x if math.isfinite(x) else None

        return {
            "east": self.position[0],
            "north": self.position[1],
            "covariance": [[num(v) for v in row] for row in self.covariance],
            "sigma_e": num(self.deviations[0]),
            "sigma_n": num(self.deviations[1]),
            "n_observations": self.n_observations,
            "objective": self.objective,
            "residual_ss": self.residual_ss,
            "iterations": self.iterations,
            "covariance_method": self.covariance_method,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LandmarkEstimate":
        def num(x):
            return math.nan if x is None else float(x)

        cov = d["covariance"]
        return cls(
            position=(float(d["east"]), float(d["north"])),
            covariance=((num(cov[0][0]), num(cov[0][1])), (num(cov[1][0]), num(cov[1][1]))),
            deviations=(num(d["sigma_e"]), num(d["sigma_n"])),
            n_observations=int(d["n_observations"]),
            objective=str(d["objective"]),
            residual_ss=float(d["residual_ss"]),
            iterations=int(d["iterations"]),
            covariance_method=str(d["covariance_method"]),
        )


def _line_arrays(lines: Sequence[ProjectionLine]) -> Tuple[np.ndarray, np.ndarray]:
    anchors = np.array([ln.anchor for ln in lines], dtype=float).reshape(-1, 2)
    directions = np.array([ln.direction for ln in lines], dtype=float).reshape(-1, 2)
    return anchors, directions


def canonical_order(anchors: np.ndarray, directions: np.ndarray, cameras: Optional[np.ndarray] = None):
    """Reorder rows lexicographically by (anchor, direction[, camera]).

    Solving in this order makes every estimate a function of the observation
    set alone, bit for bit, whatever order the observations arrived in.
    """
    keys = [directions[:, 1], directions[:, 0], anchors[:, 1], anchors[:, 0]]
    if cameras is not None:
        keys = [cameras[:, 1], cameras[:, 0]] + keys
    idx = np.lexsort(keys)
    if cameras is None:
        return anchors[idx], directions[idx]
    return anchors[idx], directions[idx], cameras[idx]


def _condition_2x2(a: float, b: float, c: float) -> float:
    """2-norm condition number of the symmetric positive semi-definite ``[[a, b], [b, c]]``."""
    big = 0.5 * (a + c) + math.hypot(0.5 * (a - c), b)
    if not big > 0:
        return math.inf
    small = (a * c - b * b) / big
    return big / small if small > 0 else math.inf


def _check_condition(a: float, b: float, c: float, what: str) -> None:
    cond = _condition_2x2(a, b, c)
    if not math.isfinite(cond) or cond > CONDITION_LIMIT:
        raise DegenerateGeometryError(f"{what} is singular or ill-conditioned (condition number {cond:.3g})")


def _sum(v: np.ndarray) -> float:
    # np.sum rather than BLAS dot: its summation order depends only on the
    # length, never on memory alignment, so equal inputs give equal bits
    return float(np.sum(v))


def _gram(j0: np.ndarray, j1: np.ndarray, w: Optional[np.ndarray] = None) -> Tuple[float, float, float]:
    """Entries (a, b, c) of ``J^T diag(w) J`` for J with columns j0, j1."""
    if w is None:
        return _sum(j0 * j0), _sum(j0 * j1), _sum(j1 * j1)
    wj0 = w * j0
    return _sum(wj0 * j0), _sum(wj0 * j1), _sum(w * j1 * j1)


def _inverse_2x2(a: float, b: float, c: float) -> Tuple[float, float, float]:
    det = a * c - b * b
    return c / det, -b / det, a / det


def _as_matrix(a: float, b: float, c: float) -> np.ndarray:
    return np.array([[a, b], [b, c]])


def _deviations(cov: np.ndarray) -> np.ndarray:
    return np.sqrt(np.clip(np.diag(cov), 0.0, None))


def _columns(jacobian, residuals) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    jac = np.asarray(jacobian, dtype=float)
    res = np.asarray(residuals, dtype=float).ravel()
    if jac.ndim != 2 or jac.shape[1] != 2 or res.shape[0] != jac.shape[0]:
        raise ValueError(f"expected an (m, 2) jacobian and m residuals, got {jac.shape} and {res.shape}")
    if jac.shape[0] < 3:
        raise InsufficientDataError(f"covariance needs at least 3 residuals, got {jac.shape[0]}")
    return np.ascontiguousarray(jac[:, 0]), np.ascontiguousarray(jac[:, 1]), res


def _gauss_newton_cov(j0, j1, res) -> np.ndarray:
    a, b, c = _gram(j0, j1)
    _check_condition(a, b, c, "information matrix J^T J")
    s2 = _sum(res * res) / (len(res) - 2)
    ia, ib, ic = _inverse_2x2(a, b, c)
    return _as_matrix(s2 * ia, s2 * ib, s2 * ic)


def _sandwich_cov(j0, j1, res, h00, h01, h11) -> np.ndarray:
    m = len(res)
    a, b, c = _gram(j0, j1)
    ha, hb, hc = a + _sum(res * h00), b + _sum(res * h01), c + _sum(res * h11)
    if not (ha > 0 and ha * hc - hb * hb > 0):
        ha, hb, hc = a, b, c
    _check_condition(ha, hb, hc, "observed Hessian")
    ma, mb, mc = (v * (m / (m - 2)) for v in _gram(j0, j1, res * res))
    ia, ib, ic = _inverse_2x2(ha, hb, hc)
    # bread @ meat @ bread for symmetric 2x2 matrices
    ta, tb = ia * ma + ib * mb, ia * mb + ib * mc
    tc, td = ib * ma + ic * mb, ib * mb + ic * mc
    return _as_matrix(ta * ia + tb * ib, ta * ib + tb * ic, tc * ib + td * ic)


def estimate_covariance(jacobian, residuals) -> Tuple[np.ndarray, np.ndarray]:
    """Residual-scaled inverse information: returns (covariance, deviations)."""
    cov = _gauss_newton_cov(*_columns(jacobian, residuals))
    return cov, _deviations(cov)


def sandwich_covariance(jacobian, residuals, second) -> Tuple[np.ndarray, np.ndarray]:
    """Robust covariance ``A^-1 B A^-1`` from residual derivatives.

    ``second`` holds each residual's 2x2 Hessian, shape (m, 2, 2). Where the
    observed Hessian ``A`` is not positive definite (far from a minimum)
    ``J^T J`` stands in for it.
    """
    j0, j1, res = _columns(jacobian, residuals)
    h = np.asarray(second, dtype=float)
    sym = 0.5 * (h[:, 0, 1] + h[:, 1, 0])
    cov = _sandwich_cov(j0, j1, res, np.ascontiguousarray(h[:, 0, 0]), sym, np.ascontiguousarray(h[:, 1, 1]))
    return cov, _deviations(cov)


def _package(position, j0, j1, res, n, objective, iterations, hessians=None) -> LandmarkEstimate:
    method = "gauss-newton" if hessians is None else "sandwich"
    if n >= 3:
        if hessians is None:
            cov = _gauss_newton_cov(j0, j1, res)
        else:
            cov = _sandwich_cov(j0, j1, res, *hessians)
        dev = _deviations(cov)
        covariance = ((float(cov[0, 0]), float(cov[0, 1])), (float(cov[1, 0]), float(cov[1, 1])))
        deviations = (float(dev[0]), float(dev[1]))
    else:
        covariance, deviations = _NAN_COV, (math.nan, math.nan)
    return LandmarkEstimate(
        position=(float(position[0]), float(position[1])),
        covariance=covariance,
        deviations=deviations,
        n_observations=n,
        objective=objective,
        residual_ss=_sum(res * res),
        iterations=iterations,
        covariance_method=method,
    )


def triangulate_orthogonal_arrays(anchors: np.ndarray, directions: np.ndarray) -> LandmarkEstimate:
    """Closed-form fit on rows already in canonical order."""
    m = anchors.shape[0]
    if m < 2:
        raise InsufficientDataError(f"triangulation needs at least 2 lines, got {m}")
    n0 = -directions[:, 1]
    n1 = np.ascontiguousarray(directions[:, 0])
    a, b, c = _gram(n0, n1)
    _check_condition(a, b, c, "normal matrix (lines nearly parallel)")
    offsets = n0 * anchors[:, 0] + n1 * anchors[:, 1]
    g0, g1 = _sum(n0 * offsets), _sum(n1 * offsets)
    ia, ib, ic = _inverse_2x2(a, b, c)
    position = (ia * g0 + ib * g1, ib * g0 + ic * g1)
    residuals = n0 * position[0] + n1 * position[1] - offsets
    return _package(position, n0, n1, residuals, m, "orthogonal", 0)


def triangulate_orthogonal(observations: Sequence[ProjectionLine]) -> LandmarkEstimate:
    """Closed-form point minimizing the sum of squared orthogonal distances."""
    anchors, directions = _line_arrays(observations)
    anchors, directions = canonical_order(anchors, directions)
    return triangulate_orthogonal_arrays(anchors, directions)


def closest_approach_midpoint(a: ProjectionLine, b: ProjectionLine) -> Point:
    """Midpoint of the closest-approach points of two lines.

    For intersecting lines this is the intersection; for parallel lines the
    midpoint between ``a.anchor`` and its foot on ``b``.
    """
    da = np.array(a.direction)
    db = np.array(b.direction)
    pa = np.array(a.anchor)
    pb = np.array(b.anchor)
    cross = da[0] * db[1] - da[1] * db[0]
    if abs(cross) > 1e-12:
        w = pb - pa
        s = (w[0] * db[1] - w[1] * db[0]) / cross
        p = pa + s * da
        return (float(p[0]), float(p[1]))
    foot = pb + np.dot(pa - pb, db) * db
    mid = 0.5 * (pa + foot)
    return (float(mid[0]), float(mid[1]))


def _wrapped_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a - b`` wrapped to (-pi, pi], for inputs that are themselves in [-pi, pi]."""
    r = a - b
    r[r > np.pi] -= TWO_PI
    r[r <= -np.pi] += TWO_PI
    return r


def _heading_parts(x0: float, x1: float, cameras: np.ndarray, headings: np.ndarray, range_scale: float):
    """Residuals and the two Jacobian columns, as separate contiguous arrays."""
    dx = x0 - cameras[:, 0]
    dy = x1 - cameras[:, 1]
    rho2 = dx * dx + dy * dy
    if rho2.min() < COLLISION_RADIUS**2:
        raise DegenerateGeometryError("landmark iterate coincides with a camera position")
    r = _wrapped_difference(np.arctan2(dx, dy), headings)
    inv = 1.0 / rho2
    if range_scale == 0.0:
        return r, dy * inv, -dx * inv
    # r / sqrt(1 + s^2/rho^2): residual over its std when the camera position
    # is uncertain by s meters per radian of heading uncertainty
    lam2 = range_scale * range_scale
    denom = rho2 + lam2
    sqrt_w = np.sqrt(rho2 / denom)
    # d sqrt_w / d x = (lam2 / (rho^3 denom^1.5)) (dx, dy) = g * (dx, dy)
    g = r * lam2 * sqrt_w * inv / denom
    a = sqrt_w * inv
    return sqrt_w * r, a * dy + g * dx, g * dy - a * dx


def heading_terms(
    position, cameras: np.ndarray, headings: np.ndarray, range_scale: float = 0.0
) -> Tuple[np.ndarray, np.ndarray]:
    """Heading residuals and their Jacobian w.r.t. the landmark position.

    ``cameras`` is (m, 2), ``headings`` is (m,). Returns ``(r, J)`` with
    ``J`` of shape (m, 2). With ``range_scale == 0`` the residuals are the
    plain signed wrapped heading differences; otherwise each is divided by
    ``sqrt(1 + range_scale**2 / rho**2)``, rho being the camera-landmark range.
    """
    x = np.asarray(position, dtype=float)
    r, j0, j1 = _heading_parts(float(x[0]), float(x[1]), cameras, headings, range_scale)
    return r, np.column_stack((j0, j1))


def _heading_hessian_parts(x0: float, x1: float, cameras: np.ndarray, headings: np.ndarray, range_scale: float):
    """Entries (h00, h01, h11) of each residual's Hessian."""
    dx = x0 - cameras[:, 0]
    dy = x1 - cameras[:, 1]
    q = dx * dx + dy * dy
    if q.min() < COLLISION_RADIUS**2:
        raise DegenerateGeometryError("landmark iterate coincides with a camera position")
    q2 = q * q
    r00 = -2.0 * dx * dy / q2
    r01 = (dx * dx - dy * dy) / q2
    if range_scale == 0.0:
        return r00, r01, -r00
    r = _wrapped_difference(np.arctan2(dx, dy), headings)
    gr0, gr1 = dy / q, -dx / q
    lam2 = range_scale * range_scale
    denom = q + lam2
    s = np.sqrt(q / denom)
    # s as a function of q = rho^2, and its first two q-derivatives
    s1 = lam2 / (2.0 * np.sqrt(q) * denom**1.5)
    s2 = -lam2 * (4.0 * q + lam2) / (4.0 * q**1.5 * denom**2.5)
    gs0, gs1 = 2.0 * s1 * dx, 2.0 * s1 * dy
    diag, outer = 2.0 * s1, 4.0 * s2
    h00 = s * r00 + 2.0 * gs0 * gr0 + r * (diag + outer * dx * dx)
    h01 = s * r01 + gs0 * gr1 + gs1 * gr0 + r * outer * dx * dy
    h11 = -s * r00 + 2.0 * gs1 * gr1 + r * (diag + outer * dy * dy)
    return h00, h01, h11


def heading_second_derivatives(position, cameras: np.ndarray, headings: np.ndarray, range_scale: float = 0.0) -> np.ndarray:
    """Hessian of each residual of :func:`heading_terms`, shape (m, 2, 2)."""
    x = np.asarray(position, dtype=float)
    h00, h01, h11 = _heading_hessian_parts(float(x[0]), float(x[1]), cameras, headings, range_scale)
    out = np.empty((len(h00), 2, 2))
    out[:, 0, 0] = h00
    out[:, 0, 1] = out[:, 1, 0] = h01
    out[:, 1, 1] = h11
    return out


def triangulate_heading_arrays(
    anchors: np.ndarray,
    directions: np.ndarray,
    cameras: np.ndarray,
    init: Optional[Sequence[float]] = None,
    range_scale: float = DEFAULT_RANGE_SCALE,
    covariance: str = "sandwich",
) -> LandmarkEstimate:
    """Gauss-Newton heading fit on rows already in canonical order."""
    if not (range_scale >= 0 and math.isfinite(range_scale)):
        raise ValueError(f"range_scale must be finite and >= 0, got {range_scale}")
    if covariance not in COVARIANCE_METHODS:
        raise ValueError(f"unknown covariance method {covariance!r}, expected one of {COVARIANCE_METHODS}")

    def done(x, terms, iteration):
        hessians = None
        if covariance == "sandwich" and m >= 3:
            hessians = _heading_hessian_parts(x[0], x[1], cameras, headings, range_scale)
        r, j0, j1 = terms
        return _package(x, j0, j1, r, m, "heading", iteration, hessians)

    m = anchors.shape[0]
    if m < 2:
        raise InsufficientDataError(f"triangulation needs at least 2 observations, got {m}")
    headings = np.arctan2(directions[:, 0], directions[:, 1])

    if init is None:
        try:
            init = triangulate_orthogonal_arrays(anchors, directions).position
        except DegenerateGeometryError:
            init = closest_approach_midpoint(
                ProjectionLine(tuple(anchors[0]), tuple(directions[0])),
                ProjectionLine(tuple(anchors[1]), tuple(directions[1])),
            )
    x = (float(init[0]), float(init[1]))

    terms = _heading_parts(x[0], x[1], cameras, headings, range_scale)
    cost = _sum(terms[0] * terms[0])
    for iteration in range(1, MAX_ITERATIONS + 1):
        r, j0, j1 = terms
        a, b, c = _gram(j0, j1)
        _check_condition(a, b, c, "Gauss-Newton normal matrix")
        g0, g1 = _sum(j0 * r), _sum(j1 * r)
        ia, ib, ic = _inverse_2x2(a, b, c)
        step = (-(ia * g0 + ib * g1), -(ib * g0 + ic * g1))
        full_norm = math.hypot(step[0], step[1])

        # backtrack while the cost goes up; the undamped step is taken whenever it helps
        scale = 1.0
        for _ in range(40):
            candidate = (x[0] + scale * step[0], x[1] + scale * step[1])
            try:
                new_terms = _heading_parts(candidate[0], candidate[1], cameras, headings, range_scale)
            except DegenerateGeometryError:
                new_terms = None
            # tolerate increases at rounding level, or steps near convergence stall
            if new_terms is not None and _sum(new_terms[0] * new_terms[0]) <= cost * (1.0 + 1e-12) + 1e-300:
                break
            scale *= 0.5
        else:
            # no decrease representable along the step: x is a numerical minimum
            if full_norm < 1e-6:
                return done(x, terms, iteration)
            raise DegenerateGeometryError("Gauss-Newton step cannot decrease the heading cost")

        x = candidate
        terms = new_terms
        cost = _sum(terms[0] * terms[0])
        if full_norm < STEP_TOLERANCE:
            return done(x, terms, iteration)

    raise ConvergenceError(
        f"heading triangulation did not converge in {MAX_ITERATIONS} iterations",
        last_iterate=(float(x[0]), float(x[1])),
        iterations=MAX_ITERATIONS,
    )


def triangulate_heading(
    observations: Sequence[Tuple[ProjectionLine, Sequence[float]]],
    init: Optional[Sequence[float]] = None,
    range_scale: float = DEFAULT_RANGE_SCALE,
    covariance: str = "sandwich",
) -> LandmarkEstimate:
    """Gauss-Newton fit of the landmark position to the observed line headings.

    ``observations`` are ``(line, camera_position)`` pairs. ``init`` defaults
    to the orthogonal least-squares solution.

    ``range_scale`` (meters) is the ratio of camera-position noise to heading
    noise. Residuals are normalized by their standard deviation under that
    noise model, which removes the drift away from the cameras that plain
    heading least squares shows when camera positions are noisy. Pass 0 for
    the unweighted heading objective.

    ``covariance`` is "sandwich" or "gauss-newton" (see the module notes).
    """
    anchors, directions = _line_arrays([ln for ln, _ in observations])
    cameras = np.array([(c[0], c[1]) for _, c in observations], dtype=float).reshape(-1, 2)
    anchors, directions, cameras = canonical_order(anchors, directions, cameras)
    return triangulate_heading_arrays(anchors, directions, cameras, init, range_scale, covariance)


def triangulate_arrays(
    anchors,
    directions,
    objective: str = "heading",
    range_scale: float = DEFAULT_RANGE_SCALE,
    covariance: str = "sandwich",
) -> LandmarkEstimate:
    """Triangulate lines given as (m, 2) anchor and direction arrays.

    Cameras sit at the anchors. Directions must already be unit vectors.
    """
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 2)
    directions = np.asarray(directions, dtype=float).reshape(-1, 2)
    if anchors.shape != directions.shape:
        raise ValueError(f"anchors {anchors.shape} and directions {directions.shape} differ in shape")
    anchors, directions = canonical_order(anchors, directions)
    if objective == "orthogonal":
        return triangulate_orthogonal_arrays(anchors, directions)
    if objective == "heading":
        return triangulate_heading_arrays(anchors, directions, anchors, None, range_scale, covariance)
    raise ValueError(f"unknown objective {objective!r}, expected one of {OBJECTIVES}")


def triangulate_observations(
    observations,
    objective: str = "heading",
    range_scale: float = DEFAULT_RANGE_SCALE,
    covariance: str = "sandwich",
) -> LandmarkEstimate:
    """Triangulate :class:`~crowdmap.onboard.LandmarkObservation` objects.

    The camera position of each observation is its line anchor.
    """
    return triangulate_lines([o.line for o in observations], objective, range_scale, covariance)


def triangulate_lines(
    lines: Sequence[ProjectionLine],
    objective: str = "heading",
    range_scale: float = DEFAULT_RANGE_SCALE,
    covariance: str = "sandwich",
) -> LandmarkEstimate:
    anchors, directions = _line_arrays(lines)
    return triangulate_arrays(anchors, directions, objective, range_scale, covariance)
