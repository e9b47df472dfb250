import dataclasses

import numpy as np
import pytest

from dashkv import encoders, hashing
from dashkv.encoders import KeyEncoderParams, QueryEncoderParams
from dashkv.numerics import DimensionError, finite_diff_check

D = 6
NBITS = 5
HIDDEN = 7


@pytest.fixture
def query_params(rng):
    params = QueryEncoderParams.init(D, NBITS, rng, hidden=HIDDEN)
    # Move off unit gain so every path carries gradient
    params.ln_gain[:] = rng.normal(1.0, 0.3, size=HIDDEN)
    params.ln_bias[:] = rng.normal(0.0, 0.3, size=HIDDEN)
    return params


def test_beta_schedule():
    """Tanh sharpness anneals from 1 to 10 over 9000 steps."""
    assert encoders.beta_schedule(0) == 1.0
    assert encoders.beta_schedule(4500) == 5.5
    assert encoders.beta_schedule(9000) == 10.0
    assert encoders.beta_schedule(10**6) == 10.0


def test_query_logits_order(query_params, rng):
    """The query MLP applies its stages in a fixed order."""
    stages = []
    encoders.query_logits(rng.normal(size=D), query_params, stages)
    assert stages == [
        'matmul', 'layer_norm', 'gelu', 'matmul', 'gelu', 'matmul'
    ]


def test_encode_shapes(query_params, rng):
    """Single vectors and batches give matching codes."""
    key_params = KeyEncoderParams.init(D, NBITS, rng)
    q = rng.normal(size=(3, D))
    codes = encoders.query_codes(q, query_params)
    assert codes.shape == (3, 1)
    assert encoders.query_encode(q[1], query_params) == hashing.BitCode(
        NBITS, codes[1]
    )
    k = rng.normal(size=(4, D))
    codes = encoders.key_codes(k, key_params)
    assert encoders.key_encode(k[2], key_params) == hashing.BitCode(
        NBITS, codes[2]
    )


def test_encode_dimension_errors(query_params, rng):
    """Inputs of the wrong dimension are rejected."""
    key_params = KeyEncoderParams.init(D, NBITS, rng)
    with pytest.raises(DimensionError):
        encoders.query_encode(np.ones(D + 1), query_params)
    with pytest.raises(DimensionError):
        encoders.key_encode_relaxed(np.ones(D - 1), key_params, 0)
    with pytest.raises(DimensionError):
        encoders.key_encode(np.ones((2, D)), key_params)


def test_relaxed_approaches_sign(query_params, rng):
    """Late in training the relaxed code is close to the binary code."""
    q = rng.normal(size=(20, D))
    relaxed = encoders.query_encode_relaxed(q, query_params, 10**6)
    signs = hashing.unpack_signs(encoders.query_codes(q, query_params), NBITS)
    logits = encoders.query_logits(q, query_params)
    confident = np.abs(logits) > 0.5
    np.testing.assert_allclose(relaxed[confident], signs[confident], atol=0.01)
    assert np.all(np.abs(relaxed) <= 1.0)


def test_signs_agree_at_every_step(query_params, rng):
    """Annealing sharpens the relaxed codes without flipping a sign."""
    key_params = KeyEncoderParams.init(D, NBITS, rng)
    q = rng.normal(size=(30, D))
    k = rng.normal(size=(30, D))
    q_signs = hashing.unpack_signs(encoders.query_codes(q, query_params), NBITS)
    k_signs = hashing.unpack_signs(encoders.key_codes(k, key_params), NBITS)
    previous = None
    for step in (0, 10, 1000, 4500, 9000, 10**6):
        hq = encoders.query_encode_relaxed(q, query_params, step)
        hk = encoders.key_encode_relaxed(k, key_params, step)
        np.testing.assert_array_equal(np.sign(hq), q_signs)
        np.testing.assert_array_equal(np.sign(hk), k_signs)
        if previous is not None:
            assert np.all(np.abs(hq) >= previous)
        previous = np.abs(hq)


def test_query_param_shapes():
    """Shapes that do not chain are rejected."""
    with pytest.raises(DimensionError):
        QueryEncoderParams(
            np.zeros((4, 3)),
            np.ones(3),
            np.zeros(3),
            np.zeros((3, 2)),
            np.zeros((3, 5)),
        )


@pytest.mark.parametrize('field', ['w1', 'ln_gain', 'ln_bias', 'w2', 'w3'])
def test_query_backward(query_params, rng, field):
    """Query MLP gradients pass the finite difference check."""
    q = rng.normal(size=(4, D))
    weight = rng.normal(size=(4, NBITS))
    step = 300

    def loss(x):
        params = dataclasses.replace(query_params, **{field: x})
        return float(
            (encoders.query_encode_relaxed(q, params, step) * weight).sum()
        )

    fwd = encoders.query_forward(q, query_params, step)
    grads = encoders.query_encode_backward(weight, fwd, query_params)
    report = finite_diff_check(
        loss, getattr(query_params, field), getattr(grads, field)
    )
    assert report.max_relative_error < 1e-4


def test_key_backward(rng):
    """Key projection gradient passes the finite difference check."""
    params = KeyEncoderParams.init(D, NBITS, rng)
    k = rng.normal(size=(5, D))
    weight = rng.normal(size=(5, NBITS))
    step = 700

    def loss(x):
        relaxed = encoders.key_encode_relaxed(k, KeyEncoderParams(x), step)
        return float((relaxed * weight).sum())

    relaxed = encoders.key_encode_relaxed(k, params, step)
    grads = encoders.key_encode_backward(
        weight, k, relaxed, encoders.beta_schedule(step)
    )
    report = finite_diff_check(loss, params.wk, grads.wk)
    assert report.max_relative_error < 1e-4


def test_params_helpers(query_params):
    """Copies are independent and accumulate adds in place."""
    copy = query_params.copy()
    copy.w1[0, 0] += 1.0
    assert copy.w1[0, 0] != query_params.w1[0, 0]
    zeros = query_params.zeros_like()
    assert all(not m.any() for m in zeros.matrices())
    zeros.accumulate(query_params, 2.0)
    np.testing.assert_allclose(zeros.w3, 2.0 * query_params.w3)
    assert query_params.d == D
    assert query_params.length_bits == NBITS
