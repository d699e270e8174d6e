import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from crowdmap.errors import InputDomainError, RecordParseError
from crowdmap.geometry import CameraIntrinsics, Pose, ProjectionLine, RigidTransform, orthogonal_distance
from crowdmap.noise import project_landmark
from crowdmap.onboard import (
    OBSERVATION_KEYS,
    DetectionRecord,
    GnssObservation,
    LandmarkObservation,
    OnboardPipeline,
    RigConfig,
    SignDescriptor,
    build_observation,
    estimate_camera_state,
    estimate_vehicle_state,
    observation_from_dict,
    observation_from_json,
    observation_to_json,
    read_observations,
    write_observations,
)

from conftest import close

K = CameraIntrinsics(800, 512, 1024)
STOP = SignDescriptor("stop")


def rig(gnss=RigidTransform(), camera=RigidTransform()):
    return RigConfig(K, gnss, camera)


def test_vehicle_state_identity_rig():
    pose = estimate_vehicle_state(GnssObservation(Pose(10, 20, 0.1)), rig())
    assert (pose.east, pose.north, pose.heading) == (10, 20, 0.1)


def test_vehicle_state_receiver_behind_center():
    r = rig(gnss=RigidTransform((0, -1), 0))
    pose = estimate_vehicle_state(GnssObservation(Pose(0, 0, 0)), r)
    assert close(pose.position, (0, 1), 1e-15) and pose.heading == 0


@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.floats(-4, 4), st.floats(-3, 3), st.floats(-3, 3), st.floats(-4, 4))
def test_vehicle_state_round_trip(e, n, h, gx, gy, gr):
    r = rig(gnss=RigidTransform((gx, gy), gr))
    z = GnssObservation(Pose(e, n, h))
    back = estimate_vehicle_state(z, r).compose(r.t_vehicle_from_gnss)
    assert close(back.position, z.pose.position, 1e-9)
    assert abs(math.remainder(back.heading - z.pose.heading, 2 * math.pi)) < 1e-12


def test_camera_state_examples():
    assert estimate_camera_state(Pose(1, 2, 0.3), rig()) == Pose(1, 2, 0.3)
    cam = estimate_camera_state(Pose(0, 0, 0), rig(camera=RigidTransform((0, 2), 0)))
    assert close(cam.position, (0, 2), 1e-15)
    cam = estimate_camera_state(Pose(1, 1, math.pi / 2), rig(camera=RigidTransform((0, 2), 0)))
    assert close(cam.position, (3, 1), 1e-12) and cam.heading == pytest.approx(math.pi / 2)


def test_build_observation_identity_rig_principal_point():
    obs = build_observation(GnssObservation(Pose(0, 0, 0), 3.0), DetectionRecord(512, 300, STOP), rig(), "v1", "p1")
    assert obs.line.anchor == (0, 0)
    assert close(obs.line.direction, (0, 1), 1e-15)
    assert (obs.vehicle_id, obs.passing_id, obs.timestamp, obs.descriptor) == ("v1", "p1", 3.0, STOP)


def test_build_observation_noiseless_passes_through_sign():
    r = rig(RigidTransform((0.3, -0.8), 0.01), RigidTransform((-0.2, 1.9), -0.02))
    vehicle = Pose(100, -40, 0.7)
    sign = (140.0, 10.0)
    receiver = vehicle.compose(r.t_vehicle_from_gnss)
    camera = vehicle.compose(r.t_vehicle_from_camera)
    u = project_landmark(camera, K, sign)
    obs = build_observation(GnssObservation(receiver), DetectionRecord(u, 0, STOP), r, "v", "p")
    assert orthogonal_distance(sign, obs.line) < 1e-9


def test_build_observation_translation_equivariance():
    r = rig(RigidTransform((0.5, -1), 0.2), RigidTransform((0, 1.5), -0.1))
    det = DetectionRecord(300.0, 0, STOP)
    a = build_observation(GnssObservation(Pose(10, 20, 0.4)), det, r, "v", "p")
    b = build_observation(GnssObservation(Pose(15, 20, 0.4)), det, r, "v", "p")
    assert b.line.anchor[0] - a.line.anchor[0] == pytest.approx(5.0, abs=1e-12)
    assert b.line.anchor[1] == pytest.approx(a.line.anchor[1], abs=1e-12)
    assert b.line.direction == a.line.direction


def test_build_observation_rejects_out_of_image():
    with pytest.raises(InputDomainError):
        build_observation(GnssObservation(Pose(0, 0, 0)), DetectionRecord(2000, 0, STOP), rig(), "v", "p")


def test_descriptor_validation():
    with pytest.raises(InputDomainError):
        SignDescriptor("")
    assert SignDescriptor("speed_limit", "50").label() == "speed_limit:50"
    assert STOP.label() == "stop"


def test_pipeline_queue_survives_failed_upload():
    pipe = OnboardPipeline("veh", rig())
    pipe.process(GnssObservation(Pose(0, 0, 0)), [DetectionRecord(500, 0, STOP), DetectionRecord(520, 0, STOP)], "p0")
    assert len(pipe) == 2

    def offline(batch):
        raise ConnectionError("no network")

    assert pipe.flush(offline) == 0
    assert len(pipe) == 2
    received = []
    assert pipe.flush(received.extend) == 2
    assert len(pipe) == 0 and len(received) == 2
    assert pipe.flush(received.extend) == 0


def test_json_fixed_keys_and_precision():
    obs = LandmarkObservation(ProjectionLine((1 / 3, -2.5e6), (0.6, 0.8)), SignDescriptor("yield", "x"), "v", "7", 0.1)
    text = observation_to_json(obs)
    assert "\n" not in text
    assert tuple(json.loads(text)) == OBSERVATION_KEYS
    assert "0.33333333333333331" in text
    assert observation_from_json(text) == obs


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.pop("anchor_e"),
        lambda d: d.update(anchor_e="1.0"),
        lambda d: d.update(dir_e=0.0, dir_n=0.0),
        lambda d: d.update(dir_e=2.0),
        lambda d: d.update(sign_class=""),
        lambda d: d.update(text_payload=5),
        lambda d: d.update(timestamp=True),
        lambda d: d.update(vehicle_id=None),
    ],
)
def test_malformed_records_rejected(mutate):
    d = json.loads(observation_to_json(LandmarkObservation(ProjectionLine((0, 0), (0, 1)), STOP, "v", "p", 0)))
    mutate(d)
    with pytest.raises(RecordParseError):
        observation_from_dict(d)


def test_non_json_rejected():
    with pytest.raises(RecordParseError):
        observation_from_json("{not json")
    with pytest.raises(RecordParseError):
        observation_from_dict([1, 2])


def test_file_round_trip(tmp_path):
    obs = [
        LandmarkObservation(ProjectionLine((i * 0.1, -i), (math.sin(i), math.cos(i))), STOP, "v", str(i), float(i))
        for i in range(5)
    ]
    path = tmp_path / "obs.jsonl"
    write_observations(path, obs)
    assert read_observations(path) == obs
    path.write_text(path.read_text() + "garbage\n")
    with pytest.raises(RecordParseError, match="obs.jsonl:6"):
        read_observations(path)


finite = st.floats(-1e7, 1e7, allow_nan=False)


@given(
    finite,
    finite,
    st.floats(-10, 10),
    st.text(min_size=1, max_size=8),
    st.one_of(st.none(), st.text(max_size=8)),
    st.text(max_size=8),
    st.text(max_size=8),
    st.floats(0, 1e9),
)
def test_serialization_round_trip_property(e, n, theta, cls, payload, vid, pid, ts):
    obs = LandmarkObservation(ProjectionLine.from_heading((e, n), theta), SignDescriptor(cls, payload), vid, pid, ts)
    assert observation_from_json(observation_to_json(obs)) == obs
