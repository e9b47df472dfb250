import dataclasses

import numpy as np
import pytest

import conftest
from dashkv import attention, experiments, metrics, traces, training
from dashkv.experiments import (
    BenchConfig,
    ConfigurationError,
    EvalConfig,
    LayerMode,
    StackConfig,
    Variant,
)

EXACT = EvalConfig(p1=100.0, p2=100.0, n_sink=2, n_local=3, k=5)

SMALL = training.TrainConfig(
    code_bits=8, hidden=6, residual_width=5, check_progress=False
)


def _params(tiny_traces, layer):
    group = tiny_traces[layer]
    return training.init_layer(layer, len(group), group[0].d, SMALL)


def test_variant_flags():
    """Only learned variants need a checkpoint."""
    assert Variant('asymmetric').trained
    assert Variant.SYMMETRIC.trained
    assert not Variant.NAIVE_LSH.trained
    assert not Variant.STREAMING.trained


def test_held_out():
    """Held-out traces keep the structure seed."""
    config = experiments.held_out(conftest.TINY)
    assert config.seed == conftest.TINY.seed
    assert config.sample_seed == conftest.TINY.sample_seed + 1


def test_exact_tiers_match_full_attention(tiny_traces):
    """With every candidate in the full tier, attention is exact."""
    record = experiments.run_variant_eval(
        Variant.ASYMMETRIC,
        tiny_traces[1],
        _params(tiny_traces, 1),
        EXACT,
        tiny_traces[0],
    )
    assert record.kl_to_full < 1e-6
    assert record.layer == 1
    assert record.seq_len == conftest.TINY.seq_len
    assert record.k == 5
    assert record.code_bytes_per_key == 8
    assert record.dense_bytes_per_key == 2 * conftest.TINY.d


def test_naive_lsh_eval(tiny_traces):
    """The naive variant builds its own projection."""
    config = dataclasses.replace(EXACT, p1=10.0, p2=50.0, code_bits=64)
    record = experiments.run_variant_eval(
        'naive_lsh', tiny_traces[0], None, config
    )
    assert record.variant == 'naive_lsh'
    assert 0.0 <= record.recall_at_k <= 1.0
    assert record.kl_to_full >= 0.0
    assert record.mean_latency_per_token_s > 0.0


def test_streaming_eval(tiny_traces):
    """Streaming keeps the prior set only and stores no codes."""
    record = experiments.run_variant_eval(
        Variant.STREAMING, tiny_traces[0], None, EXACT
    )
    assert record.code_bytes_per_key == 0
    assert record.kl_to_full > 0.0
    assert 0.0 <= record.recall_at_k <= 1.0


def _expected_recall(layer_traces, config, rank):
    """Recall over the keys outside the prior set, ranked by ``rank``."""
    n_q, n_k = layer_traces[0].teacher_logits.shape
    recalls = []
    for i in range(n_q):
        n = n_k - n_q + i + 1
        prior = set(attention.build_prior_set(n, config.policy()).tolist())
        rest = np.array([j for j in range(n) if j not in prior])
        k = min(config.k, rest.size)
        for h, trace in enumerate(layer_traces):
            logits = trace.teacher_logits[i, rest]
            truth = rest[np.argsort(-logits, kind='stable')][:k]
            found = rank(h, i, n, rest)[:k]
            recalls.append(len(set(truth) & set(found)) / k)
    return float(np.mean(recalls))


def test_streaming_recall_ignores_prior_keys(tiny_traces):
    """Streaming ranks the non-prior keys most recent first."""
    config = dataclasses.replace(EXACT, p1=10.0, p2=50.0)
    record = experiments.run_variant_eval(
        Variant.STREAMING, tiny_traces[0], None, config
    )
    expected = _expected_recall(
        tiny_traces[0], config, lambda h, i, n, rest: rest[::-1]
    )
    assert record.recall_at_k == pytest.approx(expected)
    assert record.recall_at_k < 1.0


def test_hashed_recall_ranks_by_distance(tiny_traces):
    """Recall compares raw Hamming order against teacher order."""
    config = dataclasses.replace(EXACT, p1=10.0, p2=50.0, code_bits=16)
    layer_traces = tiny_traces[0]
    params = experiments.naive_lsh_params(
        len(layer_traces), conftest.TINY.d, 16, seed=config.seed
    )

    def rank(h, i, n, rest):
        wk = params.heads[h].key.wk
        trace = layer_traces[h]
        q_bits = trace.q[i] @ wk >= 0
        k_bits = trace.k[rest] @ wk >= 0
        distances = (q_bits != k_bits).sum(axis=1)
        return rest[np.argsort(distances, kind='stable')]

    record = experiments.run_variant_eval(
        Variant.NAIVE_LSH, layer_traces, params, config
    )
    assert record.recall_at_k == pytest.approx(
        _expected_recall(layer_traces, config, rank)
    )


def test_trained_variant_needs_params(tiny_traces):
    """Learned variants without parameters are a configuration error."""
    with pytest.raises(ConfigurationError):
        experiments.run_variant_eval(
            Variant.SYMMETRIC, tiny_traces[0], None, EXACT
        )
    params = _params(tiny_traces, 0)
    params.heads.pop()
    with pytest.raises(ConfigurationError):
        experiments.run_variant_eval(
            Variant.ASYMMETRIC, tiny_traces[0], params, EXACT
        )


def test_naive_lsh_params(rng):
    """Symmetric random heads, calibration switched off."""
    params = experiments.naive_lsh_params(3, 8, 16, seed=1, layer=2)
    assert params.layer == 2
    assert params.num_heads == 3
    assert all(head.symmetric for head in params.heads)
    assert params.calib.beta_spatial == 0.0
    assert params.calib.gamma_temporal == 0.0
    assert params.heads[0].key.wk.shape == (8, 16)
    assert not np.array_equal(params.heads[0].key.wk, params.heads[1].key.wk)
    projection = rng.normal(size=(8, 4))
    shared = experiments.naive_lsh_params(2, 8, 4, projection=projection)
    np.testing.assert_array_equal(shared.heads[1].key.wk, projection)


def test_load_params_missing():
    """A missing checkpoint is a configuration error."""
    directory = conftest.TMP_DIR / 'no_checkpoints'
    directory.mkdir(exist_ok=True)
    with pytest.raises(ConfigurationError):
        experiments.load_params(directory, 0)


def test_train_stack(tiny_traces):
    """Every layer is trained."""
    config = dataclasses.replace(SMALL, steps=2)
    results = experiments.train_stack(tiny_traces, config, workers=2)
    assert sorted(results) == [0, 1]
    assert results[1].params.layer == 1
    assert len(results[0].curve) == 2


def test_bench_config_validation():
    """Lengths must ascend and at least three trials are needed."""
    with pytest.raises(ConfigurationError):
        BenchConfig(seq_lens=(8, 4))
    with pytest.raises(ConfigurationError):
        BenchConfig(seq_lens=(0, 4))
    with pytest.raises(ConfigurationError):
        BenchConfig(trials=2)
    with pytest.raises(ConfigurationError):
        BenchConfig(heads=0)


def test_latency_bench():
    """One row per length and method."""
    config = BenchConfig(
        seq_lens=(64, 128), trials=3, warmup=1, d=8, code_bits=16
    )
    rows = experiments.latency_bench(config)
    assert [(r['seq_len'], r['method']) for r in rows] == [
        (64, 'dense'),
        (64, 'hashed'),
        (128, 'dense'),
        (128, 'hashed'),
    ]
    for row in rows:
        assert set(row) == set(metrics.LATENCY_FIELDS)
        assert row['median_s'] > 0.0
        assert row['spread_s'] >= 0.0
        assert row['trials'] == 3


def test_loglog_slope():
    """Power laws are recovered."""
    lengths = [1000, 2000, 4000, 8000]
    assert experiments.loglog_slope(
        lengths, [3e-9 * n for n in lengths]
    ) == pytest.approx(1.0)
    assert experiments.loglog_slope(
        lengths, [1e-12 * n * n for n in lengths]
    ) == pytest.approx(2.0)


def test_stack_presets():
    """Named stack layouts."""
    assert StackConfig.none(3).hashed_layers == []
    assert StackConfig.single(4, 2).modes == (
        LayerMode.FULL,
        LayerMode.FULL,
        LayerMode.HASHED,
        LayerMode.FULL,
    )
    assert StackConfig.even_middle(10, 3, 7).hashed_layers == [4, 6]
    assert StackConfig.sandwich(12, keep=5).hashed_layers == [5, 6]
    assert StackConfig.sandwich(8, keep=5).hashed_layers == []
    with pytest.raises(ConfigurationError):
        StackConfig.from_hashed(4, [4])


def test_full_stack_has_no_distortion(tiny_traces):
    """Without hashed layers the stack equals its reference."""
    couplings = traces.StackCouplings.derive(conftest.TINY)
    distortion = experiments.stack_distortion(
        tiny_traces, StackConfig.none(2), {}, couplings, EXACT
    )
    assert distortion == 0.0


def test_exact_hashed_layer_has_no_distortion(tiny_traces):
    """A hashed layer with every key in the full tier changes nothing."""
    couplings = traces.StackCouplings.derive(conftest.TINY)
    params = {0: _params(tiny_traces, 0), 1: _params(tiny_traces, 1)}
    probs, reference = experiments.run_stack(
        tiny_traces, StackConfig.single(2, 0), params, couplings, EXACT
    )
    np.testing.assert_allclose(probs, reference, atol=1e-9)
    rows = experiments.layer_sensitivity(
        tiny_traces, params, couplings, EXACT
    )
    assert [row['replaced_layer'] for row in rows] == [0, 1]
    for row in rows:
        assert row['distortion'] < 1e-6


def test_stack_errors(tiny_traces):
    """Hashed layers need parameters, the stack needs every layer."""
    couplings = traces.StackCouplings.derive(conftest.TINY)
    with pytest.raises(ConfigurationError):
        experiments.run_stack(
            tiny_traces, StackConfig.single(2, 1), {}, couplings, EXACT
        )
    with pytest.raises(ConfigurationError):
        experiments.run_stack(
            tiny_traces, StackConfig.none(3), {}, couplings, EXACT
        )
    with pytest.raises(ConfigurationError):
        experiments.layer_sensitivity(tiny_traces, {}, couplings, EXACT)


def test_code_length_sweep(tiny_traces):
    """One row per code length, compression follows the code length."""
    config = dataclasses.replace(SMALL, steps=1)
    eval_config = dataclasses.replace(EXACT, p1=10.0, p2=50.0)
    rows = experiments.code_length_sweep(
        [8, 64],
        tiny_traces[0],
        tiny_traces[0],
        config,
        eval_config,
    )
    assert [row['code_bits'] for row in rows] == [8, 64]
    assert rows[0]['compression_ratio'] == rows[1]['compression_ratio']
    assert rows[0]['code_bytes_per_key'] == 8
    for row in rows:
        assert set(row) == set(metrics.CODE_LENGTH_FIELDS)


def _smoke(seed):
    return traces.SyntheticConfig(
        seed=seed, n_layers=4, n_heads=2, d=32, seq_len=512
    )


def _smoke_train(seed, **changes):
    config = training.TrainConfig(
        seed=seed,
        steps=200,
        code_bits=16,
        hidden=64,
        residual_width=32,
        check_progress=False,
    )
    return dataclasses.replace(config, **changes)


def _mostly(flags):
    return sum(flags) >= len(flags) - 1


@pytest.mark.slow
def test_variant_ordering():
    """Asymmetric beats symmetric, which beats naive LSH, on held out data."""
    recall_order, kl_order = [], []
    for seed in range(5):
        synthetic = _smoke(seed)
        train = traces.by_layer(traces.generate_traces(synthetic))
        held = traces.by_layer(
            traces.generate_traces(experiments.held_out(synthetic))
        )
        config = EvalConfig(seed=seed)
        records = {}
        for variant, symmetric in (
            (Variant.ASYMMETRIC, False),
            (Variant.SYMMETRIC, True),
        ):
            params = training.train_layer(
                train[2],
                _smoke_train(seed, symmetric=symmetric),
                policy=config.policy(),
                prev_traces=train[1],
            ).params
            records[variant] = experiments.run_variant_eval(
                variant, held[2], params, config, held[1]
            )
        records[Variant.NAIVE_LSH] = experiments.run_variant_eval(
            Variant.NAIVE_LSH, held[2], None, config, held[1]
        )
        asym, sym, naive = (
            records[v]
            for v in (Variant.ASYMMETRIC, Variant.SYMMETRIC, Variant.NAIVE_LSH)
        )
        recall_order.append(
            asym.recall_at_k > sym.recall_at_k > naive.recall_at_k
        )
        kl_order.append(asym.kl_to_full < sym.kl_to_full < naive.kl_to_full)
    assert _mostly(recall_order)
    assert _mostly(kl_order)


@pytest.mark.slow
def test_distilled_residual_extrapolates():
    """Distillation inflates less than MSE and beats a zero residual."""
    flatter, better = [], []
    for seed in range(5):
        rows = experiments.objective_ablation(
            _smoke(seed),
            _smoke_train(seed, train_seq_len=512, eval_seq_len=2048),
            EvalConfig(seed=seed),
            layer=1,
        )
        arms = {row['arm']: row for row in rows}
        assert list(arms) == ['pure_hash', 'mse', 'distill']
        flatter.append(arms['distill']['inflation'] < arms['mse']['inflation'])
        better.append(arms['distill']['eval_kl'] < arms['pure_hash']['eval_kl'])
    assert _mostly(flatter)
    assert _mostly(better)


@pytest.mark.slow
def test_encoders_do_not_transfer_across_layers():
    """A middle layer's encoders lose recall on the first and last layers."""
    for seed in range(5):
        synthetic = dataclasses.replace(_smoke(seed), n_queries=32)
        rows = experiments.cross_layer_transfer(
            14, [1, 27], synthetic, _smoke_train(seed), EvalConfig(seed=seed)
        )
        assert [row['target'] for row in rows] == [1, 27]
        for row in rows:
            assert row['own_recall'] > row['transferred_recall']


@pytest.mark.slow
def test_first_layer_is_most_sensitive():
    """Hashing layer 0 distorts the stack most, sandwich beats even layers."""
    sensitive, sandwich_wins = [], []
    for seed in range(5):
        synthetic = _smoke(seed)
        stack = traces.by_layer(traces.generate_traces(synthetic))
        config = EvalConfig(seed=seed)
        params = {
            j: result.params
            for j, result in experiments.train_stack(
                stack, _smoke_train(seed), policy=config.policy()
            ).items()
        }
        couplings = traces.StackCouplings.derive(synthetic)
        rows = experiments.layer_sensitivity(stack, params, couplings, config)
        distortion = [row['distortion'] for row in rows]
        sensitive.append(distortion[0] >= 2 * np.median(distortion[1:-1]))
        sandwich, even = (
            experiments.stack_distortion(
                stack, preset, params, couplings, config
            )
            for preset in (
                StackConfig.sandwich(4, keep=1),
                StackConfig.even_middle(4, 0, 2),
            )
        )
        sandwich_wins.append(sandwich <= even)
    assert _mostly(sensitive)
    assert _mostly(sandwich_wins)


@pytest.mark.slow
def test_hashed_scan_scaling():
    """The hashed pass grows linearly and is far cheaper than dense."""
    config = BenchConfig(
        seq_lens=(4096, 8192, 16384, 32768, 65536), trials=7, warmup=3
    )
    rows = experiments.latency_bench(config)
    hashed = [r for r in rows if r['method'] == 'hashed']
    dense = [r for r in rows if r['method'] == 'dense']
    slope = experiments.loglog_slope(
        [r['seq_len'] for r in hashed], [r['median_s'] for r in hashed]
    )
    assert 0.8 <= slope <= 1.2
    assert hashed[-1]['median_s'] < 0.25 * dense[-1]['median_s']


def test_prior_policy_from_eval_config():
    """The evaluation windows become the prior set policy."""
    assert EXACT.policy() == attention.PriorPolicy(2, 3)
