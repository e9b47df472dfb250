import dataclasses
import io

import numpy as np
import pytest

import conftest
from dashkv import traces
from dashkv.numerics import DomainError, softmax
from dashkv.traces import AttentionTrace, SyntheticConfig, TraceFormatError


def test_trace_shapes(tiny_traces):
    """One trace per (layer, head), teacher logits causally masked."""
    config = conftest.TINY
    assert sorted(tiny_traces) == list(range(config.n_layers))
    for layer, group in tiny_traces.items():
        assert [t.head for t in group] == list(range(config.n_heads))
        for trace in group:
            assert trace.layer == layer
            assert trace.q.shape == (config.n_queries, config.d)
            assert trace.k.shape == (config.seq_len, config.d)
            assert trace.v.shape == (config.seq_len, config.d)
            trace.check()
            lengths = np.isfinite(trace.teacher_logits).sum(axis=1)
            first = config.seq_len - config.n_queries + 1
            np.testing.assert_array_equal(
                lengths, np.arange(first, config.seq_len + 1)
            )


def test_generation_is_deterministic():
    """Same seeds give byte-identical files, whatever the worker count."""
    first = conftest.TMP_DIR / 'traces_a'
    second = conftest.TMP_DIR / 'traces_b'
    paths = traces.save_traces(
        first, traces.generate_traces(conftest.TINY, workers=1)
    )
    traces.save_traces(
        second, traces.generate_traces(conftest.TINY, workers=3)
    )
    assert len(paths) == conftest.TINY.n_layers * conftest.TINY.n_heads
    for path in paths:
        assert path.read_bytes() == (second / path.name).read_bytes()


def test_sample_seed_changes_tokens():
    """A new sample seed draws new tokens from the same structure."""
    config = dataclasses.replace(conftest.TINY, n_layers=1)
    held_out = dataclasses.replace(config, sample_seed=1)
    a = traces.generate_traces(config, workers=1)[0]
    b = traces.generate_traces(held_out, workers=1)[0]
    assert not np.allclose(a.k, b.k)


def test_trace_file_round_trip(tiny_traces):
    """Files are read back exactly, the layer loader orders heads."""
    directory = conftest.TMP_DIR / 'traces_round_trip'
    traces.save_traces(
        directory, [t for group in tiny_traces.values() for t in group]
    )
    assert traces.trace_layers(directory) == [0, 1]
    loaded = traces.load_layer_traces(directory, 1)
    for trace, original in zip(loaded, tiny_traces[1]):
        assert (trace.layer, trace.head) == (original.layer, original.head)
        np.testing.assert_array_equal(trace.k, original.k)
        np.testing.assert_array_equal(
            trace.teacher_logits, original.teacher_logits
        )
    with pytest.raises(FileNotFoundError):
        traces.load_layer_traces(directory, 9)


def test_missing_head_trace(tiny_traces):
    """Head indices must start at zero."""
    directory = conftest.TMP_DIR / 'traces_missing_head'
    traces.save_traces(directory, tiny_traces[0][1:])
    with pytest.raises(TraceFormatError):
        traces.load_layer_traces(directory, 0)


def test_bad_trace_files(tiny_traces):
    """Bad magic, truncation and trailing data are rejected."""
    stream = io.BytesIO()
    tiny_traces[0][0].write(stream)
    data = stream.getvalue()
    with pytest.raises(TraceFormatError, match='magic'):
        AttentionTrace.read(io.BytesIO(b'ABCD' + data[4:]))
    with pytest.raises(TraceFormatError, match='truncated'):
        AttentionTrace.read(io.BytesIO(data[:-8]))
    with pytest.raises(TraceFormatError, match='trailing'):
        AttentionTrace.read(io.BytesIO(data + b'x'))


def test_trace_check(rng):
    """Inconsistent logits and shapes are detected."""
    q = rng.normal(size=(2, 4))
    k = rng.normal(size=(5, 4))
    v = rng.normal(size=(5, 4))
    trace = AttentionTrace.from_qkv(0, 0, q, k, v)
    trace.check()
    expected = q @ k.T / 2.0
    assert trace.teacher_logits[0, 3] == pytest.approx(expected[0, 3])
    assert trace.teacher_logits[0, 4] == -np.inf

    tampered = dataclasses.replace(
        trace, teacher_logits=trace.teacher_logits + 1
    )
    with pytest.raises(TraceFormatError, match='differ'):
        tampered.check()
    unmasked = dataclasses.replace(trace, teacher_logits=expected)
    with pytest.raises(TraceFormatError, match='masked'):
        unmasked.check()
    short_values = dataclasses.replace(trace, v=v[:3])
    with pytest.raises(TraceFormatError, match='shapes'):
        short_values.check()


def test_synthetic_config_validation():
    """Counts and ranges are checked."""
    with pytest.raises(DomainError):
        SyntheticConfig(n_heads=0)
    with pytest.raises(DomainError):
        SyntheticConfig(seq_len=10, n_queries=11)
    with pytest.raises(DomainError):
        SyntheticConfig(layer_drift=-0.1)


def test_sinks_attract_attention():
    """Boosted leading tokens take a larger share of the attention."""
    config = SyntheticConfig(n_layers=1, seq_len=256, n_queries=16)
    flat = dataclasses.replace(config, sink_boost=0.0)

    def sink_mass(synthetic):
        shares = [
            softmax(trace.teacher_logits)[:, : synthetic.n_sink_tokens].sum(
                axis=1
            )
            for trace in traces.generate_traces(synthetic, workers=1)
        ]
        return float(np.mean(shares))

    assert sink_mass(config) > 2.0 * sink_mass(flat)


def test_single_cluster_without_sinks_is_flat():
    """Without clusters or sinks, attention is close to uniform."""
    config = SyntheticConfig(
        n_layers=1,
        n_heads=1,
        seq_len=128,
        n_queries=8,
        n_clusters=1,
        sink_boost=0.0,
    )
    trace = traces.generate_traces(config, workers=1)[0]
    probs = softmax(trace.teacher_logits)
    lengths = np.isfinite(trace.teacher_logits).sum(axis=1)
    assert np.all(probs.max(axis=1) < 3.0 / lengths)


def test_layer_drift():
    """Drift rotates the keys of later layers."""
    still = SyntheticConfig(n_layers=2, d=8, seq_len=64, layer_drift=0.0)
    moving = dataclasses.replace(still, layer_drift=0.5)
    np.testing.assert_allclose(traces.layer_rotation(still, 1), np.eye(8))
    rotation = traces.layer_rotation(moving, 1)
    np.testing.assert_allclose(rotation @ rotation.T, np.eye(8), atol=1e-12)
    assert not np.allclose(rotation, np.eye(8))

    cov_still = traces.key_covariance(
        traces.by_layer(traces.generate_traces(still, workers=1))[1]
    )
    cov_moving = traces.key_covariance(
        traces.by_layer(traces.generate_traces(moving, workers=1))[1]
    )
    assert not np.allclose(cov_still, cov_moving)
    # layer 0 is never rotated
    first_still = traces.generate_traces(still, workers=1)[0]
    first_moving = traces.generate_traces(moving, workers=1)[0]
    np.testing.assert_allclose(first_still.k, first_moving.k)


def test_stack_couplings():
    """Couplings are seeded, gains decay with depth."""
    config = SyntheticConfig(n_layers=3, n_heads=2, d=4)
    couplings = traces.StackCouplings.derive(config, coupling=0.5)
    again = traces.StackCouplings.derive(config, coupling=0.5)
    assert len(couplings.c_q) == 3
    assert len(couplings.c_k[0]) == 2
    assert couplings.c_q[1][0].shape == (4, 4)
    np.testing.assert_array_equal(couplings.c_k[2][1], again.c_k[2][1])
    assert couplings.gains == pytest.approx([5.0, 3.0, 1.0 + 4.0 / 3.0])
    flat = traces.StackCouplings.derive(config, early_boost=0.0)
    assert flat.gains == pytest.approx([1.0, 1.0, 1.0])
