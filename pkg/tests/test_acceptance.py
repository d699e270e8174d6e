"""Acceptance suite: one test (or group) per numbered criterion.

Each test records its measured values; the terminal summary prints one
PASS/FAIL line per criterion. Runtime bounds are asserted alongside the
numeric ones.
"""

import json
import math
import signal
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdmap.errors import ConvergenceError, DegenerateGeometryError
from crowdmap.experiments import (
    convergence_curve,
    passings_for,
    permutation_average,
    simulate_passings,
    superpose,
    synthetic_field_dataset,
)
from crowdmap.geometry import ProjectionLine, RigidTransform, wrap_angle
from crowdmap.matching import write_sign_table
from crowdmap.noise import NoiseParams, SignSpec, default_scenario, generate_passing, generate_passing_by_sign
from crowdmap.onboard import LandmarkObservation, SignDescriptor, observation_from_json, observation_to_json
from crowdmap.service import MapClient, MapConfig, MapService, apply_batch, recover, restore, snapshot, start_background
from crowdmap.service.server import snapshot_path_for
from crowdmap.triangulate import (
    DEFAULT_RANGE_SCALE,
    LandmarkEstimate,
    heading_terms,
    triangulate_arrays,
    triangulate_lines,
    triangulate_observations,
)

from conftest import close
from oracles import grid_argmin, heading_cost, orthogonal_cost, random_instance

pytestmark = pytest.mark.slow

EXTRA_SIGNS = (
    SignSpec((-30.0, 150.0), SignDescriptor("stop")),
    SignSpec((25.0, 70.0), SignDescriptor("yield")),
)


# -- 1 -------------------------------------------------------------------------


@pytest.mark.criterion(1)
def test_zero_noise_exactness(record, tmp_path):
    start = time.perf_counter()
    s, _ = default_scenario(passing_count=3)
    s = replace(s, signs=s.signs + EXTRA_SIGNS)
    params = NoiseParams.noiseless()
    by_sign = {i: [] for i in range(len(s.signs))}
    for k in range(s.passing_count):
        for i, obs in generate_passing_by_sign(s, k, params).items():
            by_sign[i].extend(obs)

    worst = 0.0
    for i, sign in enumerate(s.signs):
        assert len({o.line.direction for o in by_sign[i]}) >= 2
        for objective in ("orthogonal", "heading"):
            est = triangulate_observations(by_sign[i], objective)
            worst = max(worst, math.dist(est.position, sign.position))

    service = MapService(tmp_path / "log", [(sg.descriptor, sg.position) for sg in s.signs])
    service.ingest([o for obs in by_sign.values() for o in obs])
    for lm in service.state.landmarks.values():
        worst = max(worst, math.dist(lm.estimate.position, s.signs[lm.id].position))
    elapsed = time.perf_counter() - start
    record(f"max error {worst:.2e} m over {len(s.signs)} signs, 2 objectives + service, {elapsed:.2f} s")
    assert worst <= 1e-6
    assert elapsed < 1.0


# -- 2 -------------------------------------------------------------------------


@pytest.mark.criterion(2)
def test_grid_search_oracle_equivalence(record):
    start = time.perf_counter()
    worst = {"orthogonal": 0.0, "heading": 0.0, "heading (unweighted)": 0.0}
    for seed in range(20):
        truth, cams, dirs, heads = random_instance(np.random.default_rng(1000 + seed), m=50)
        cases = [
            ("orthogonal", triangulate_arrays(cams, dirs, "orthogonal"), lambda p: orthogonal_cost(p, cams, dirs)),
            ("heading", triangulate_arrays(cams, dirs, "heading"), lambda p: heading_cost(p, cams, heads, DEFAULT_RANGE_SCALE)),
            ("heading (unweighted)", triangulate_arrays(cams, dirs, "heading", 0.0), lambda p: heading_cost(p, cams, heads)),
        ]
        for name, est, cost in cases:
            oracle = grid_argmin(cost, truth, 10.0)
            worst[name] = max(worst[name], math.dist(est.position, oracle))
    elapsed = time.perf_counter() - start
    record(", ".join(f"{k} max {v * 100:.2f} cm" for k, v in worst.items()) + f", {elapsed:.1f} s")
    assert max(worst.values()) <= 0.02
    assert elapsed < 30.0


# -- 3 -------------------------------------------------------------------------


def loglog_slope(counts, values):
    return float(np.polyfit(np.log(counts), np.log(values), 1)[0])


@pytest.mark.criterion(3)
def test_sqrt_n_convergence(record):
    start = time.perf_counter()
    s, params = default_scenario()
    n = s.passing_count
    sigma = np.zeros((200, n, 2))
    counts = np.zeros((200, n))
    for seed in range(200):
        passings = simulate_passings(s, replace(params, seed=seed))
        counts[seed] = np.cumsum([len(p) for p in passings])
        for k, point in enumerate(convergence_curve(passings, s.signs[0].position)):
            sigma[seed, k] = (point.sigma_e, point.sigma_n)
    mean_count = counts.mean(axis=0)
    slope_e = loglog_slope(mean_count, sigma[:, :, 0].mean(axis=0))
    slope_n = loglog_slope(mean_count, sigma[:, :, 1].mean(axis=0))
    elapsed = time.perf_counter() - start
    record(f"slope sigma_E {slope_e:+.3f}, sigma_N {slope_n:+.3f}, {elapsed:.0f} s")
    assert abs(slope_e + 0.5) <= 0.1
    assert abs(slope_n + 0.5) <= 0.1
    assert elapsed < 300.0


# -- 4 -------------------------------------------------------------------------


@pytest.mark.criterion(4)
def test_two_sigma_coverage(record):
    start = time.perf_counter()
    s, params = default_scenario()
    truth = s.signs[0].position
    inside_e = inside_n = inside_both = 0
    samples = 500
    for i in range(samples):
        # seeds fixed before any result was looked at
        p = replace(params, seed=10000 + i)
        k = 1 + i % s.passing_count
        obs = [o for j in range(k) for o in generate_passing_by_sign(s, j, p)[0]]
        est = triangulate_observations(obs)
        ok_e = abs(est.position[0] - truth[0]) <= 2 * est.deviations[0]
        ok_n = abs(est.position[1] - truth[1]) <= 2 * est.deviations[1]
        inside_e += ok_e
        inside_n += ok_n
        inside_both += ok_e and ok_n
    elapsed = time.perf_counter() - start
    record(
        f"both axes {inside_both / samples:.3f}, east {inside_e / samples:.3f}, "
        f"north {inside_n / samples:.3f}, {elapsed:.0f} s"
    )
    assert inside_both / samples >= 0.90
    assert inside_e / samples >= 0.90 and inside_n / samples >= 0.90
    assert elapsed < 300.0


# -- 5 -------------------------------------------------------------------------


@pytest.mark.criterion(5)
def test_collaborative_beats_single_passing(record):
    start = time.perf_counter()
    observations, groundtruth = synthetic_field_dataset()
    merged = superpose(observations, groundtruth)
    desc, truth = groundtruth[0]
    passings = passings_for(merged, desc)
    assert len(passings) == 100
    result = permutation_average(passings, truth, 1000, np.random.default_rng(2024))
    at_2, at_100 = result.collab_dist[1], result.collab_dist[99]
    elapsed = time.perf_counter() - start
    record(
        f"collab@100 {at_100:.2f} m, collab@2 {at_2:.2f} m, single mean {result.single_mean:.2f} m "
        f"({result.excluded} passings without estimate), {elapsed:.0f} s"
    )
    assert at_100 < result.single_mean
    assert at_100 < at_2
    assert elapsed < 600.0


# -- 6 -------------------------------------------------------------------------


@pytest.mark.criterion(6)
def test_offline_online_equivalence(record, tmp_path):
    start = time.perf_counter()
    s, params = default_scenario(passing_count=10)
    signs = (s.signs[0],) + tuple(
        SignSpec(sg.position, SignDescriptor(sg.descriptor.sign_class, "unique")) for sg in EXTRA_SIGNS
    )
    s = replace(s, signs=signs)
    observations = [o for k in range(s.passing_count) for o in generate_passing(s, k, params)]
    offline = {
        i: triangulate_observations([o for o in observations if o.descriptor == sg.descriptor]).position
        for i, sg in enumerate(signs)
    }
    # distinct descriptors plus a wide gate make association independent of batch order
    config = MapConfig(gate_radius=1000.0)
    rng = np.random.default_rng(6)
    worst = 0.0
    for trial in range(10):
        order = rng.permutation(len(observations))
        cuts = np.sort(rng.choice(np.arange(1, len(observations)), size=9, replace=False))
        batches = [[observations[j] for j in part] for part in np.split(order, cuts)]
        service = MapService(tmp_path / f"log{trial}", [(sg.descriptor, sg.position) for sg in signs], config)
        server, _ = start_background(service)
        try:
            with MapClient(*server.server_address[:2]) as client:
                for b in batches:
                    client.ingest(b)
                state = client.snapshot()
        finally:
            server.shutdown()
            server.server_close()
        assert state["revision"] == 10
        for lm in state["landmarks"]:
            pos = (lm["estimate"]["east"], lm["estimate"]["north"])
            worst = max(worst, math.dist(pos, offline[lm["id"]]))
    elapsed = time.perf_counter() - start
    record(f"max online/offline gap {worst:.1e} m over 10 orders, {elapsed:.1f} s")
    assert worst <= 1e-9
    assert elapsed < 60.0


# -- 7 -------------------------------------------------------------------------


def spawn_server(log, seeds):
    proc = subprocess.Popen(
        [sys.executable, "-m", "crowdmap", "serve", "--addr", "127.0.0.1:0", "--log", str(log),
         "--landmarks", str(seeds), "--gate", "1000", "--snapshot-every", "3"],
        stdout=subprocess.PIPE,
        text=True,
    )
    banner = proc.stdout.readline().split()
    return proc, banner[-1]


@pytest.mark.criterion(7)
def test_crash_recovery(record, tmp_path):
    start = time.perf_counter()
    s, params = default_scenario(passing_count=12)
    batches = [generate_passing(s, k, params) for k in range(s.passing_count)]
    seeds = tmp_path / "seeds.csv"
    write_sign_table(seeds, [(sg.descriptor, sg.position) for sg in s.signs])

    checked = 0
    for kill_after in (1, 4, 7):
        log = tmp_path / f"map{kill_after}.log"
        proc, addr = spawn_server(log, seeds)
        try:
            with MapClient.connect(addr) as client:
                for b in batches[:kill_after]:
                    client.ingest(b)
                acked = client.snapshot_text()
                # one more request in flight when the process dies
                client._sock.sendall(
                    (json.dumps({"type": "ingest", "observations": [json.loads(observation_to_json(o)) for o in batches[kill_after]]}) + "\n").encode()
                )
                proc.send_signal(signal.SIGKILL)
        finally:
            proc.kill()
            proc.wait(timeout=10)

        for snap in (snapshot_path_for(log), None):
            state = recover(log, snap, truncate=False)
            assert state.revision in (kill_after, kill_after + 1)
            if state.revision == kill_after:
                assert snapshot(state) == acked
            else:
                # the in-flight batch reached the disk before the kill
                expected, _ = apply_batch(restore(acked), batches[kill_after])
                assert snapshot(state) == snapshot(expected)
            checked += 1

        # a clean log replays to exactly the last acknowledged state
        state = recover(log)
        trimmed = MapService(log)
        assert trimmed.revision == state.revision
        assert trimmed.snapshot_text() == snapshot(state)
    elapsed = time.perf_counter() - start
    record(f"{checked} recoveries bit-equal to the last acknowledged snapshot, {elapsed:.1f} s")
    assert elapsed < 60.0


# -- 8 -------------------------------------------------------------------------

CASES = 1000
exhaustive = settings(max_examples=CASES, deadline=None, derandomize=True)


def run_counted(body, strategies):
    """Run ``body`` under hypothesis and return how many cases it completed."""
    count = [0]

    @exhaustive
    @given(st.tuples(*strategies))
    def wrapper(args):
        body(*args)
        count[0] += 1

    wrapper()
    return count[0]


@pytest.mark.criterion(8)
def test_property_gradient_matches_finite_differences(record):
    def body(seed, range_scale):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-50, 50, 2)
        m = 6
        offsets = rng.uniform(5, 80, m)
        angles = rng.uniform(-math.pi, math.pi, m)
        cams = x[None, :] - np.column_stack((offsets * np.sin(angles), offsets * np.cos(angles)))
        headings = angles + rng.uniform(-1.0, 1.0, m)
        r, jac = heading_terms(x, cams, headings, range_scale)
        h = 1e-5
        num = np.zeros_like(jac)
        for j in range(2):
            dx = np.zeros(2)
            dx[j] = h
            num[:, j] = (heading_terms(x + dx, cams, headings, range_scale)[0] - heading_terms(x - dx, cams, headings, range_scale)[0]) / (2 * h)
        rel = np.linalg.norm(num - jac) / np.linalg.norm(jac)
        assert rel < 1e-5
        # gradient of the summed objective
        grad = 2 * jac.T @ r
        cost = lambda p: float(np.sum(heading_terms(p, cams, headings, range_scale)[0] ** 2))
        num_grad = np.array([(cost(x + d) - cost(x - d)) / (2 * h) for d in (np.array([h, 0]), np.array([0, h]))])
        assert np.linalg.norm(num_grad - grad) <= 1e-5 * np.linalg.norm(grad) + 1e-12

    n = run_counted(body, (st.integers(0, 2**32 - 1), st.sampled_from([0.0, DEFAULT_RANGE_SCALE])))
    record(f"gradient: {n} cases")
    assert n >= CASES


@pytest.mark.criterion(8)
def test_property_rigid_equivariance(record):
    def body(seed, rotation, tx, ty, objective):
        rng = np.random.default_rng(seed)
        _, cams, dirs, _ = random_instance(rng, m=8, heading_sigma=0.1)
        t = RigidTransform((tx, ty), rotation)
        lines = [ProjectionLine(c, d) for c, d in zip(cams, dirs)]
        before = triangulate_lines(lines, objective).position
        after = triangulate_lines([ln.transformed(t) for ln in lines], objective).position
        assert close(after, t.apply(before), 1e-8 * (1 + math.hypot(tx, ty)))

    n = run_counted(
        body,
        (
            st.integers(0, 2**32 - 1),
            st.floats(-math.pi, math.pi),
            st.floats(-1e3, 1e3),
            st.floats(-1e3, 1e3),
            st.sampled_from(["orthogonal", "heading"]),
        ),
    )
    record(f"rigid equivariance: {n} cases")
    assert n >= CASES


@pytest.mark.criterion(8)
def test_property_order_invariance(record):
    def body(seed, objective):
        rng = np.random.default_rng(seed)
        _, cams, dirs, _ = random_instance(rng, m=10, heading_sigma=0.1)
        perm = rng.permutation(10)
        assert triangulate_arrays(cams, dirs, objective) == triangulate_arrays(cams[perm], dirs[perm], objective)

    n = run_counted(body, (st.integers(0, 2**32 - 1), st.sampled_from(["orthogonal", "heading"])))
    record(f"order invariance: {n} cases")
    assert n >= CASES


@pytest.mark.criterion(8)
def test_property_angle_wrapping(record):
    def body(x):
        w = wrap_angle(x)
        assert -math.pi < w <= math.pi
        assert abs(math.remainder(w - x, 2 * math.pi)) <= 1e-12 * max(1.0, abs(x))
        assert wrap_angle(w) == w

    n = run_counted(body, (st.floats(-1e6, 1e6, allow_nan=False),))
    record(f"angle wrapping: {n} cases")
    assert n >= CASES


@pytest.mark.criterion(8)
def test_property_serialization_round_trip(record):
    def body(e, n, theta, cls, payload, ts, seed):
        obs = LandmarkObservation(ProjectionLine.from_heading((e, n), theta), SignDescriptor(cls, payload), "v", "p", ts)
        assert observation_from_json(observation_to_json(obs)) == obs
        rng = np.random.default_rng(seed)
        _, cams, dirs, _ = random_instance(rng, m=int(rng.integers(2, 6)), heading_sigma=0.1)
        try:
            est = triangulate_arrays(cams, dirs)
        except (ConvergenceError, DegenerateGeometryError):
            # two or three noisy lines can leave the heading cost without a minimum away from the cameras
            est = triangulate_arrays(cams, dirs, "orthogonal")
        assert LandmarkEstimate.from_dict(json.loads(json.dumps(est.to_dict()))).to_dict() == est.to_dict()

    n = run_counted(
        body,
        (
            st.floats(-1e7, 1e7),
            st.floats(-1e7, 1e7),
            st.floats(-10, 10),
            st.text(min_size=1, max_size=6),
            st.one_of(st.none(), st.text(max_size=6)),
            st.floats(0, 1e9),
            st.integers(0, 2**32 - 1),
        ),
    )
    record(f"serialization: {n} cases")
    assert n >= CASES


@pytest.mark.criterion(8)
def test_snapshot_round_trip_cases(record, tmp_path):
    # map snapshots are the other serialized form; checked on real states
    s, params = default_scenario(passing_count=4)
    state = MapService(tmp_path / "log", [(sg.descriptor, sg.position) for sg in s.signs]).state
    for k in range(s.passing_count):
        state, _ = apply_batch(state, generate_passing(s, k, params))
        text = snapshot(state)
        assert snapshot(restore(text)) == text
    record("snapshot restore byte-identical")
