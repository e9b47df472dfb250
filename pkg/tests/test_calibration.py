import math

import numpy as np
import pytest

from dashkv import calibration
from dashkv.calibration import (
    CalibrationParams,
    ContractViolationError,
    MomentumStore,
    VoteThresholdMode,
)
from dashkv.numerics import DimensionError, DomainError


def test_vote_count_example():
    """A key close in three of four heads gets three votes."""
    raw = np.array([[10], [50], [12], [9]])
    np.testing.assert_array_equal(calibration.vote_count(raw, 20), [3])


def test_vote_count_strict():
    """A zero threshold gives no votes."""
    raw = np.zeros((3, 5))
    assert not calibration.vote_count(raw, 0).any()


def test_vote_count_loop(rng):
    """Votes equal a plain double loop count."""
    raw = rng.integers(0, 64, size=(8, 100))
    expected = [
        sum(1 for h in range(8) if raw[h, n] < 30) for n in range(100)
    ]
    np.testing.assert_array_equal(calibration.vote_count(raw, 30), expected)


def test_spatial_correction():
    """Consensus discount scales with the vote fraction."""
    params = CalibrationParams(beta_spatial=1.0, num_heads=4)
    np.testing.assert_allclose(
        calibration.spatial_correction([3, 0, 4], params), [-0.75, 0.0, -1.0]
    )
    params = CalibrationParams(beta_spatial=2.5, num_heads=4)
    assert calibration.spatial_correction([0], params)[0] == 0.0
    assert calibration.spatial_correction([4], params)[0] == -2.5


def test_temporal_correction():
    """Momentum discount is gamma times the sigmoid of prior attention."""
    params = CalibrationParams(gamma_temporal=1.0)
    assert calibration.temporal_correction([0.0], params)[0] == -0.5
    params = CalibrationParams(gamma_temporal=2.0)
    expected = -2.0 / (1.0 + math.exp(-1.0))
    assert calibration.temporal_correction([1.0], params)[0] == pytest.approx(
        expected, rel=1e-12
    )
    params = CalibrationParams(gamma_temporal=0.0)
    assert not calibration.temporal_correction([0.3, 1.0], params).any()


def test_calibrate():
    """Calibrated distance adds both corrections."""
    np.testing.assert_array_equal(
        calibration.calibrate([5, 5], [-1.0, 0.0], [0.0, -0.5]), [4.0, 4.5]
    )
    np.testing.assert_array_equal(
        calibration.calibrate([3, 1], [0.0, 0.0], [0.0, 0.0]), [3.0, 1.0]
    )
    with pytest.raises(DimensionError):
        calibration.calibrate([1, 2], [0.0], [0.0, 0.0])


def test_calibrate_loop(rng):
    """Calibration equals an elementwise loop."""
    raw = rng.integers(0, 32, size=50)
    spatial = rng.normal(size=50)
    temporal = rng.normal(size=50)
    expected = [raw[i] + spatial[i] + temporal[i] for i in range(50)]
    np.testing.assert_allclose(
        calibration.calibrate(raw, spatial, temporal), expected
    )


def test_update_momentum():
    """The store holds the head mean of the latest probabilities."""
    store = MomentumStore()
    calibration.update_momentum(store, 0, [[0.7, 0.3]])
    np.testing.assert_allclose(store[0], [0.7, 0.3])
    calibration.update_momentum(store, 0, [[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(store[0], [0.5, 0.5])


def test_update_momentum_loop(rng):
    """Head mean matches a loop over heads."""
    probs = rng.random(size=(4, 9))
    probs /= probs.sum(axis=1, keepdims=True)
    store = calibration.update_momentum(MomentumStore(), 2, probs)
    expected = [sum(probs[h, n] for h in range(4)) / 4 for n in range(9)]
    np.testing.assert_allclose(store[2], expected)


def test_update_momentum_contract():
    """Rows must be probability distributions."""
    with pytest.raises(ContractViolationError):
        calibration.update_momentum(MomentumStore(), 0, [[0.5, 0.4]])
    with pytest.raises(ContractViolationError):
        calibration.update_momentum(MomentumStore(), 0, [[1.5, -0.5]])


def test_momentum_previous():
    """Layer 0 has no momentum, later keys read as zero attention."""
    store = MomentumStore()
    store.set(0, [0.6, 0.4])
    assert store.previous(0, 2) is None
    assert store.previous(2, 2) is None
    np.testing.assert_array_equal(store.previous(1, 3), [0.6, 0.4, 0.0])
    np.testing.assert_array_equal(store.previous(1, 1), [0.6])


def test_vote_threshold_modes():
    """Absolute thresholds are used as is, percentiles per step."""
    raw = np.arange(1, 101).reshape(1, 100)
    params = CalibrationParams(t_vote=25.0)
    assert params.vote_threshold(raw) == 25.0
    params = CalibrationParams(t_vote=7.0, t_vote_mode='absolute')
    assert params.t_vote_mode == VoteThresholdMode.ABSOLUTE
    assert params.vote_threshold(raw) == 7.0


def test_params_validation():
    """Negative strengths and empty head counts are rejected."""
    with pytest.raises(DomainError):
        CalibrationParams(beta_spatial=-1.0)
    with pytest.raises(DomainError):
        CalibrationParams(num_heads=0)
    params = CalibrationParams()
    params.beta_spatial = -0.2
    params.project()
    assert params.beta_spatial == 0.0


def test_step_corrections(rng):
    """Step corrections combine votes and momentum."""
    raw = rng.integers(0, 16, size=(2, 10))
    params = CalibrationParams(
        beta_spatial=1.0,
        gamma_temporal=1.0,
        t_vote=8.0,
        t_vote_mode='absolute',
        num_heads=2,
    )
    corr = calibration.step_corrections(raw, params)
    np.testing.assert_array_equal(corr.votes, (raw < 8).sum(axis=0))
    np.testing.assert_allclose(corr.delta_spatial, -corr.votes / 2)
    assert corr.momentum is None
    assert not corr.delta_temporal.any()

    prev = np.full(10, 0.1)
    corr = calibration.step_corrections(raw, params, prev)
    np.testing.assert_allclose(corr.delta_temporal, -corr.momentum)
    with pytest.raises(DimensionError):
        calibration.step_corrections(raw, params, np.zeros(3))


def test_votes_grow_with_consensus():
    """More heads agreeing on a key means more votes and a larger discount."""
    # Key j is close in exactly j of the four heads
    raw = np.array([[0 if h < j else 40 for j in range(5)] for h in range(4)])
    params = CalibrationParams(
        beta_spatial=1.5, t_vote=20.0, t_vote_mode='absolute', num_heads=4
    )
    corr = calibration.step_corrections(raw, params)
    np.testing.assert_array_equal(corr.votes, [0, 1, 2, 3, 4])
    assert np.all(np.diff(corr.delta_spatial) < 0)


def test_corrections_are_bounded(rng):
    """Each correction stays within its strength whatever the inputs."""
    params = CalibrationParams(
        beta_spatial=0.8, gamma_temporal=1.7, num_heads=6
    )
    for _ in range(50):
        raw = rng.integers(0, 256, size=(6, 200))
        prev = rng.random(200)
        corr = calibration.step_corrections(raw, params, prev)
        assert np.all(corr.delta_spatial <= 0)
        assert np.all(corr.delta_spatial >= -params.beta_spatial)
        assert np.all(corr.delta_temporal < 0)
        assert np.all(corr.delta_temporal > -params.gamma_temporal)


def test_disabled_calibration_keeps_raw_distances(rng):
    """Zero strengths return the raw distances untouched."""
    raw = rng.integers(0, 128, size=(3, 40)).astype(np.uint8)
    params = CalibrationParams(
        beta_spatial=0.0, gamma_temporal=0.0, num_heads=3
    )
    for prev in (None, rng.random(40)):
        distances = calibration.calibrated_distances(raw, params, prev)
        assert distances.dtype == np.uint8
        np.testing.assert_array_equal(distances, raw)
    # No previous layer leaves the temporal strength unused
    params = CalibrationParams(beta_spatial=0.0, num_heads=3)
    np.testing.assert_array_equal(
        calibration.calibrated_distances(raw, params), raw
    )


def test_calibrated_distances(rng):
    """Active corrections are added to every head's raw row."""
    raw = rng.integers(0, 64, size=(2, 30))
    prev = rng.random(30)
    params = CalibrationParams(
        beta_spatial=0.5, gamma_temporal=0.25, num_heads=2
    )
    corr = calibration.step_corrections(raw, params, prev)
    distances = calibration.calibrated_distances(raw, params, prev)
    np.testing.assert_allclose(
        distances, raw + corr.delta_spatial + corr.delta_temporal
    )
