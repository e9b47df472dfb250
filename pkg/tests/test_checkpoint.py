import io

import numpy as np
import pytest

import conftest
from dashkv import attention, calibration, checkpoint
from dashkv.checkpoint import CheckpointError, LayerParams


def _assert_heads_equal(a, b):
    assert a.symmetric == b.symmetric
    assert (a.query is None) == (b.query is None)
    if a.query is not None:
        for x, y in zip(a.query.matrices(), b.query.matrices()):
            np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(a.key.wk, b.key.wk)
    for x, y in zip(a.residual.matrices(), b.residual.matrices()):
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize('symmetric', [False, True])
def test_head_round_trip(rng, symmetric):
    """A head and its calibration are restored exactly."""
    head = attention.HeadParams.init(
        6, 10, rng, symmetric=symmetric, hidden=7, residual_width=3
    )
    calib = calibration.CalibrationParams(
        beta_spatial=0.25,
        gamma_temporal=1.5,
        t_vote=3.0,
        t_vote_mode='absolute',
        num_heads=4,
    )
    stream = io.BytesIO()
    checkpoint.write_head(stream, head, calib, 5, 2)
    stream.seek(0)
    restored, restored_calib, layer, index = checkpoint.read_head(stream)
    assert (layer, index) == (5, 2)
    assert restored_calib == calib
    _assert_heads_equal(head, restored)


def test_bad_checkpoints(rng):
    """Bad magic, truncation and trailing bytes are reported."""
    head = attention.HeadParams.init(4, 8, rng, hidden=5, residual_width=2)
    stream = io.BytesIO()
    checkpoint.write_head(
        stream, head, calibration.CalibrationParams(), 0, 0
    )
    data = stream.getvalue()
    with pytest.raises(CheckpointError, match='magic'):
        checkpoint.read_head(io.BytesIO(b'XXXX' + data[4:]))
    with pytest.raises(CheckpointError, match='truncated'):
        checkpoint.read_head(io.BytesIO(data[:-3]))
    with pytest.raises(CheckpointError, match='truncated'):
        checkpoint.read_head(io.BytesIO(data[:10]))
    with pytest.raises(CheckpointError, match='trailing'):
        checkpoint.read_head(io.BytesIO(data + b'\0'))


def test_layer_round_trip(rng):
    """Every head of a layer is written and read back."""
    directory = conftest.TMP_DIR / 'checkpoints'
    heads = [
        attention.HeadParams.init(4, 8, rng, hidden=5, residual_width=2)
        for _ in range(3)
    ]
    calib = calibration.CalibrationParams(beta_spatial=0.5, num_heads=3)
    paths = checkpoint.save_layer(directory, LayerParams(7, heads, calib))
    assert [p.name for p in paths] == [
        checkpoint.checkpoint_name(7, h) for h in range(3)
    ]
    loaded = checkpoint.load_layer(directory, 7)
    assert loaded.layer == 7
    assert loaded.num_heads == 3
    assert loaded.calib == calib
    for head, restored in zip(heads, loaded.heads):
        _assert_heads_equal(head, restored)
    stack = checkpoint.load_stack(directory, [7])
    assert list(stack) == [7]


def test_missing_layer():
    """A layer without checkpoints is missing."""
    directory = conftest.TMP_DIR / 'no_checkpoints'
    directory.mkdir(exist_ok=True)
    with pytest.raises(FileNotFoundError):
        checkpoint.load_layer(directory, 0)


def test_checkpoint_name():
    """Names sort by layer then head."""
    assert checkpoint.checkpoint_name(3, 1) == 'layer003_head01.dkvp'


def test_layer_copy(rng):
    """Copies do not share arrays."""
    heads = [attention.HeadParams.init(4, 8, rng, residual_width=2)]
    params = LayerParams(0, heads, calibration.CalibrationParams())
    copy = params.copy()
    copy.heads[0].key.wk[0, 0] += 1.0
    copy.calib.beta_spatial = 3.0
    assert copy.heads[0].key.wk[0, 0] != params.heads[0].key.wk[0, 0]
    assert params.calib.beta_spatial == 1.0
