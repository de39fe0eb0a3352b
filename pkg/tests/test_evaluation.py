import json
import math
from pathlib import Path

import numpy as np
import pytest

from skelforecast import quaternion as quat
from skelforecast.autodiff import DimensionError
from skelforecast.data import ACTIONS, MotionSequence
from skelforecast.evaluation import (
    MT19937,
    EvalConfig,
    ProtocolError,
    RunningAverage,
    ZeroVelocity,
    baseline_running_average,
    baseline_zero_velocity,
    draw_samples,
    euler_distance,
    frame_errors,
    mt19937_randint,
    run_protocol,
)
from skelforecast.skeleton import chain_skeleton
from skelforecast.synthetic import sinusoid_sequence

FIXTURE = Path(__file__).parent / "fixtures" / "mt19937_1234567890.json"


# -------------------------------------------------------------------- prng


def test_mt19937_reference_seed():
    assert MT19937(5489).next_uint32() == 3499211612


def test_mt19937_matches_fixture():
    ref = json.loads(FIXTURE.read_text())
    stream = MT19937(ref["seed"])
    assert [stream.next_uint32() for _ in ref["raw_uint32"]] == ref["raw_uint32"]
    stream = MT19937(ref["seed"])
    for low, high, value in ref["bounded"]:
        assert mt19937_randint(stream, low, high) == value


def test_randint_single_value_consumes_nothing():
    a, b = MT19937(1), MT19937(1)
    assert all(a.randint(0, 1) == 0 for _ in range(10))
    assert a.next_uint32() == b.next_uint32()


def test_randint_wide_range_uses_two_words():
    a, b = MT19937(3), MT19937(3)
    v = a.randint(0, 2**40)
    assert 0 <= v < 2**40
    b.next_uint32(), b.next_uint32()
    assert a.next_uint32() == b.next_uint32()


def test_randint_empty_range():
    with pytest.raises(ValueError):
        MT19937(0).randint(5, 5)


# ------------------------------------------------------------------ metric


def _euler_loop(pred, target, order):
    """Distance from explicit per-channel loops over the Euler decomposition."""
    ep, et = quat.quat_to_euler(pred, order), quat.quat_to_euler(target, order)
    out = []
    for t in range(ep.shape[0]):
        s = 0.0
        for j in range(ep.shape[1]):
            for c in range(3):
                s += (ep[t, j, c] - et[t, j, c]) ** 2
        out.append(math.sqrt(s))
    return sum(out) / len(out)


def test_metric_identical_is_zero():
    rng = np.random.default_rng(0)
    q = quat.normalize(rng.normal(size=(10, 5, 4)))
    assert euler_distance(q, q) == 0.0


def test_metric_single_channel_difference():
    target = quat.identity((1, 2))
    pred = target.copy()
    pred[0, 1] = quat.euler_to_quat([0.3, 0.0, 0.0], "xyz")
    assert abs(euler_distance(pred, target) - 0.3) < 1e-12


@pytest.mark.parametrize("case", range(100))
def test_metric_matches_loop(case):
    rng = np.random.default_rng(case)
    T, J = rng.integers(1, 8), rng.integers(1, 6)
    a = quat.normalize(rng.normal(size=(T, J, 4)))
    b = quat.normalize(rng.normal(size=(T, J, 4)))
    assert abs(euler_distance(a, b) - _euler_loop(a, b, "xyz")) < 1e-12


def test_metric_excluded_joint_and_threshold():
    rng = np.random.default_rng(1)
    target = quat.normalize(rng.normal(size=(6, 3, 4)))
    pred = target.copy()
    pred[:, 0] = quat.normalize(rng.normal(size=(6, 4)))
    assert np.all(frame_errors(pred, target, exclude_joints=(0,)) == 0)
    # a static target channel carries no signal and is dropped
    still = np.repeat(target[:1], 6, axis=0)
    assert np.all(frame_errors(pred, still, std_threshold=1e-4) == 0)


def test_metric_shape_mismatch():
    with pytest.raises(DimensionError):
        frame_errors(np.zeros((2, 3, 4)), np.zeros((2, 2, 4)))


# --------------------------------------------------------------- baselines


def test_zero_velocity_constant_seed():
    rng = np.random.default_rng(2)
    pose = quat.normalize(rng.normal(size=(3, 4)))
    seed = np.repeat(pose[None], 32, axis=0)
    out = baseline_zero_velocity(seed, 10)
    assert out.shape == (10, 3, 4)
    assert np.array_equal(out, np.repeat(pose[None], 10, axis=0))
    first = ZeroVelocity("first")(np.stack([seed, seed + 0]), 4)
    assert first.shape == (2, 4, 3, 4)


def test_running_average_two_frames():
    a = quat.axis_angle_quat(2, 0.2)
    b = quat.axis_angle_quat(2, 0.4)
    seed = np.stack([quat.identity(), a, b])[:, None]
    expected = quat.normalize((a + b) / 2)
    out = baseline_running_average(seed, 3, k=2)
    np.testing.assert_allclose(out[:, 0], np.repeat(expected[None], 3, axis=0), atol=1e-15)
    np.testing.assert_allclose(out[0, 0], quat.axis_angle_quat(2, 0.3), atol=1e-15)


def test_running_average_rejects_long_window():
    with pytest.raises(ValueError):
        baseline_running_average(quat.identity((3, 2)), 5, k=4)


def test_baselines_under_linear_drift():
    rate = 0.05
    seq = np.stack([quat.axis_angle_quat(0, rate * t) for t in range(42)])[:, None]
    seed, target = seq[:32], seq[32:]
    zero = frame_errors(baseline_zero_velocity(seed, 10), target)
    avg4 = frame_errors(baseline_running_average(seed, 10, k=4), target)
    assert np.all(np.diff(zero) > 0)
    np.testing.assert_allclose(zero, rate * np.arange(1, 11), atol=1e-12)
    assert zero[1] <= avg4[1]


# ---------------------------------------------------------------- protocol


def _test_set(frames=220, joints=3, actions=ACTIONS):
    sk = chain_skeleton(joints)
    out = []
    for i, action in enumerate(actions):
        for trial in (1, 2):
            seq = sinusoid_sequence(sk, frames + 7 * trial, seed=10 * i + trial)
            out.append(MotionSequence(5, action, trial, 25.0, seq.frames, mirror_map=sk.mirror))
    return out


def test_protocol_layout():
    report = run_protocol(ZeroVelocity(), _test_set())
    assert report.actions == sorted(ACTIONS)
    assert len(report.rows) == 15 * 4
    assert {h for _, h, _, _ in report.rows} == {80, 160, 320, 400}
    assert "walking" in report.to_table()


def test_protocol_is_deterministic():
    data = _test_set()
    a = run_protocol(RunningAverage(2), data).to_csv()
    b = run_protocol(RunningAverage(2), _test_set()).to_csv()
    assert a == b


def test_protocol_draws_follow_the_stream():
    data = _test_set(actions=("walking",))
    samples = draw_samples(data, EvalConfig())["walking"]
    assert len(samples) == 8
    stream = MT19937(1234567890)
    for i, s in enumerate(samples):
        seq = data[i % 2]
        assert s.sequence == seq.key
        assert s.target_start == stream.randint(16, seq.num_frames - 150) + 50
        assert np.array_equal(s.seed, seq.frames[s.target_start - 32 : s.target_start])
        assert np.array_equal(s.target, seq.frames[s.target_start : s.target_start + 10])


def test_zero_velocity_on_constant_sequence():
    pose = quat.normalize(np.random.default_rng(3).normal(size=(3, 4)))
    data = [MotionSequence(5, "walking", t, 25.0, np.repeat(pose[None], 300, axis=0)) for t in (1, 2)]
    report = run_protocol(ZeroVelocity(), data, EvalConfig(std_threshold=None))
    assert all(v == 0.0 for *_, v in report.rows)


def test_protocol_rejects_short_sequence():
    data = _test_set(frames=150, actions=("walking",))
    with pytest.raises(ProtocolError, match="too short"):
        run_protocol(ZeroVelocity(), data)


def test_horizon_must_be_whole_frames():
    with pytest.raises(ValueError):
        EvalConfig(horizons_ms=(90,)).horizon_frames


def test_report_merge_and_lookup():
    data = _test_set(actions=("walking", "eating"))
    report = run_protocol(ZeroVelocity(), data).merge(run_protocol(RunningAverage(4), data))
    assert report.models == ["zero-velocity", "running-average-4"]
    assert report.value("eating", 400, "running-average-4") >= 0
