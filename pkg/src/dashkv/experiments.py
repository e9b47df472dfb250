"""Evaluation, benchmarks and layer studies built on the attention traces."""

from __future__ import annotations

import concurrent.futures
import dataclasses
import enum
import logging
import math
import time
from typing import TYPE_CHECKING, Any

import numpy as np

from . import (
    attention,
    calibration,
    checkpoint,
    encoders,
    hashing,
    metrics,
    options,
    traces,
    training,
)
from .numerics import softmax

if TYPE_CHECKING:
    from collections.abc import Callable, Mapping, Sequence
    from os import PathLike

    import numpy.typing as npt

    from .checkpoint import LayerParams
    from .numerics import RealMatrix
    from .traces import AttentionTrace

# Largest acceptable interquartile range relative to the median
STABILITY_GATE = 0.2

logger = logging.getLogger(__name__)


class ConfigurationError(Exception):
    """Missing or inconsistent experiment inputs."""


class Variant(str, enum.Enum):
    """Retrieval variants compared by :func:`run_variant_eval`."""

    # Random Gaussian projection shared by queries and keys, untrained
    NAIVE_LSH = 'naive_lsh'
    # One trained projection shared by queries and keys
    SYMMETRIC = 'symmetric'
    # Trained query MLP and key projection
    ASYMMETRIC = 'asymmetric'
    # Sink and local window only, everything else evicted
    STREAMING = 'streaming'

    @property
    def trained(self) -> bool:
        """True if the variant needs a checkpoint."""
        return self in {Variant.SYMMETRIC, Variant.ASYMMETRIC}


@dataclasses.dataclass
class EvalConfig(options.Options):
    """Evaluation settings."""

    # Full tier percentile
    p1: float = 10.0
    # Hash tier percentile
    p2: float = 50.0
    # Recall cutoff, 0 picks it from the cache size
    k: int = 0
    n_sink: int = 4
    n_local: int = 8
    # Seed of the naive projection
    seed: int = 0
    # Code length of the naive projection
    code_bits: int = 16

    def policy(self) -> attention.PriorPolicy:
        """Prior set policy for these settings."""
        return attention.PriorPolicy(self.n_sink, self.n_local)


@dataclasses.dataclass
class BenchConfig(options.Options):
    """Latency benchmark settings."""

    seq_lens: tuple[int, ...] = (4096, 8192, 16384)
    # Timed repetitions per sequence length and method
    trials: int = 5
    # Untimed repetitions before timing
    warmup: int = 10
    # Heads scored per token
    heads: int = 4
    d: int = 128
    code_bits: int = 128
    seed: int = 0
    p1: float = 10.0
    p2: float = 50.0
    # Count cross-head votes in the hashed pass
    calibration: bool = False

    def __post_init__(self) -> None:
        """Validate the sweep."""
        self.seq_lens = tuple(int(n) for n in self.seq_lens)
        if not self.seq_lens or any(n <= 0 for n in self.seq_lens):
            raise ConfigurationError('sequence lengths must be positive')
        if list(self.seq_lens) != sorted(self.seq_lens):
            raise ConfigurationError('sequence lengths must be ascending')
        if self.trials < 3:  # noqa: PLR2004
            raise ConfigurationError('at least 3 trials are needed')
        if self.heads < 1:
            raise ConfigurationError('at least one head is needed')


def held_out(config: traces.SyntheticConfig) -> traces.SyntheticConfig:
    """Same structure, fresh token samples."""
    return dataclasses.replace(config, sample_seed=config.sample_seed + 1)


def load_params(directory: str | PathLike[str], layer: int) -> LayerParams:
    """Checkpoints of one layer.

    Raises:
        ConfigurationError: the checkpoints are missing.
    """
    try:
        return checkpoint.load_layer(directory, layer)
    except FileNotFoundError as error:
        raise ConfigurationError(
            f'missing checkpoint for layer {layer}: {error}'
        ) from error


def naive_lsh_params(
    num_heads: int,
    d: int,
    code_bits: int,
    seed: int = 0,
    layer: int = 0,
    projection: RealMatrix | None = None,
) -> LayerParams:
    """Untrained sign random projection heads with calibration disabled."""
    rng = np.random.default_rng([seed, 3, layer])
    heads = []
    for _ in range(num_heads):
        wk = (
            rng.normal(size=(d, code_bits))
            if projection is None
            else np.array(projection, dtype=np.float64)
        )
        heads.append(
            attention.HeadParams(
                None,
                encoders.KeyEncoderParams(wk),
                attention.ResidualParams.zeros(wk.shape[1]),
                symmetric=True,
            )
        )
    calib = calibration.CalibrationParams(
        beta_spatial=0.0, gamma_temporal=0.0, num_heads=num_heads
    )
    return checkpoint.LayerParams(layer, heads, calib)


def _rank_candidates(
    scores: RealMatrix,
    candidates: npt.NDArray[np.int64],
    *,
    descending: bool = False,
) -> npt.NDArray[np.int64]:
    order = hashing.ranking(scores[candidates], descending=descending)
    return candidates[order]


def _prior_only(logits: RealMatrix, prior: npt.NDArray[np.int64]) -> RealMatrix:
    kept = np.full_like(logits, -np.inf)
    kept[prior] = logits[prior]
    return softmax(kept)


def run_variant_eval(
    variant: Variant | str,
    layer_traces: Sequence[AttentionTrace],
    params: LayerParams | None,
    config: EvalConfig,
    prev_traces: Sequence[AttentionTrace] | None = None,
) -> metrics.MetricsRecord:
    """Recall@k, KL to full attention and latency of one variant.

    Every query row of ``layer_traces`` is decoded against its causal
    key prefix. Recall is scored over the keys outside the prior set,
    which every variant keeps anyway: the true top k of those keys by
    teacher logit against their order by calibrated distance. Streaming
    has no distances and ranks them most recent first.

    Raises:
        ConfigurationError: a trained variant has no parameters.
    """
    variant = Variant(variant)
    layer = layer_traces[0].layer
    n_heads = len(layer_traces)
    d = layer_traces[0].d
    if variant.trained and params is None:
        raise ConfigurationError(f'variant {variant.value} needs a checkpoint')
    if variant == Variant.NAIVE_LSH and params is None:
        params = naive_lsh_params(
            n_heads, d, config.code_bits, config.seed, layer
        )
    if params is not None and params.num_heads != n_heads:
        raise ConfigurationError(
            f'{params.num_heads} head parameters for {n_heads} heads'
        )
    prev_attention = (
        None
        if prev_traces is None or layer == 0
        else training.previous_layer_attention(prev_traces)
    )
    policy = config.policy()
    queries = np.stack([t.q for t in layer_traces])
    keys = np.stack([t.k for t in layer_traces])
    values = np.stack([t.v for t in layer_traces])
    n_q, n_k = layer_traces[0].teacher_logits.shape
    words = (
        []
        if params is None or variant == Variant.STREAMING
        else [head.key_codes(k) for head, k in zip(params.heads, keys)]
    )

    recalls, kls, seconds = [], [], []
    k_used = 0
    for i in range(n_q):
        n = n_k - n_q + i + 1
        prior = attention.build_prior_set(n, policy)
        rest = np.setdiff1d(np.arange(n), prior)
        teacher = [t.teacher_logits[i, :n] for t in layer_traces]
        k_used = min(config.k or metrics.desk_k(n), rest.size)
        if variant == Variant.STREAMING:
            start = time.perf_counter()
            probs = [_prior_only(logits, prior) for logits in teacher]
            seconds.append(time.perf_counter() - start)
            rankings = [rest[::-1]] * n_heads
        else:
            assert params is not None
            banks = [
                hashing.CodeBank.from_words(head.length_bits, w[:n])
                for head, w in zip(params.heads, words)
            ]
            store = None
            if prev_attention is not None:
                store = calibration.MomentumStore()
                store.set(layer - 1, prev_attention[i, :n])
            start = time.perf_counter()
            result = attention.mixed_precision_attention(
                queries[:, i],
                keys[:, :n],
                values[:, :n],
                params.heads,
                params.calib,
                policy,
                config.p1,
                config.p2,
                layer=layer,
                store=store,
                banks=banks,
            )
            seconds.append(time.perf_counter() - start)
            probs = list(result.probs)
            rankings = [_rank_candidates(df, rest) for df in result.d_final]
        for h in range(n_heads):
            if k_used:
                truth = _rank_candidates(teacher[h], rest, descending=True)
                recalls.append(
                    metrics.recall_at_k(rankings[h], truth, k_used)
                )
            kls.append(
                metrics.kl_divergence_metric(probs[h], softmax(teacher[h]))
            )

    if params is None or variant == Variant.STREAMING:
        code_bytes, dense_bytes = 0, metrics.DENSE_BYTES_PER_VALUE * d
    else:
        code_bytes, dense_bytes, _ = metrics.memory_footprint(
            params.heads[0].length_bits, d
        )
    record = metrics.MetricsRecord(
        variant=variant.value,
        layer=layer,
        seq_len=n_k,
        k=k_used,
        recall_at_k=float(np.mean(recalls)) if recalls else 1.0,
        kl_to_full=float(np.mean(kls)),
        mean_latency_per_token_s=float(np.mean(seconds)),
        code_bytes_per_key=code_bytes,
        dense_bytes_per_key=dense_bytes,
    )
    logger.info(
        '%s layer %d: recall@%d=%.4f kl=%.4g',
        record.variant,
        layer,
        record.k,
        record.recall_at_k,
        record.kl_to_full,
    )
    return record


def train_stack(
    traces_by_layer: Mapping[int, Sequence[AttentionTrace]],
    config: training.TrainConfig,
    objective: training.Objective = training.Objective.DISTILL,
    *,
    weights: training.LossWeights | None = None,
    policy: attention.PriorPolicy | None = None,
    workers: int | None = None,
) -> dict[int, training.TrainResult]:
    """Train every layer independently, in parallel."""
    workers = options.max_workers() if workers is None else workers

    def train_one(layer: int) -> training.TrainResult:
        return training.train_layer(
            traces_by_layer[layer],
            config,
            objective,
            weights=weights,
            policy=policy,
            prev_traces=traces_by_layer.get(layer - 1),
        )

    layers = sorted(traces_by_layer)
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return dict(zip(layers, pool.map(train_one, layers)))


def _time_calls(fn: Callable[[], Any], trials: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(trials):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return samples


def _random_words(
    rng: np.random.Generator, shape: tuple[int, ...], length_bits: int
) -> npt.NDArray[np.uint64]:
    nwords = hashing.word_count(length_bits)
    words = rng.integers(
        0,
        np.iinfo(np.uint64).max,
        size=(*shape, nwords),
        dtype=np.uint64,
        endpoint=True,
    )
    tail = length_bits % hashing.WORD_BITS
    if tail:
        words[..., -1] &= np.uint64((1 << tail) - 1)
    return words


def _bench_length(
    n: int, config: BenchConfig, rng: np.random.Generator
) -> list[dict[str, Any]]:
    heads = config.heads
    # Cached keys are single precision, like a served KV cache
    keys = rng.standard_normal((heads, n, config.d), dtype=np.float32)
    q = rng.standard_normal((heads, config.d), dtype=np.float32)
    scale = np.float32(1.0 / math.sqrt(config.d))
    bank_words = _random_words(rng, (heads, n), config.code_bits)
    query_words = _random_words(rng, (heads,), config.code_bits)
    calib = calibration.CalibrationParams(
        beta_spatial=1.0 if config.calibration else 0.0,
        gamma_temporal=0.0,
        num_heads=heads,
    )

    def dense() -> list[RealMatrix]:
        return [k @ qh * scale for k, qh in zip(keys, q)]

    def hashed() -> tuple[tuple[npt.NDArray[np.intp], ...], ...]:
        raw = hashing.hamming_rows(query_words, bank_words)
        d_final = calibration.calibrated_distances(raw, calib)
        bounds = np.array(
            [
                attention.compute_thresholds(row, config.p1, config.p2)
                for row in d_final
            ],
            dtype=d_final.dtype,
        )
        return (
            np.nonzero(d_final <= bounds[:, :1]),
            np.nonzero(d_final <= bounds[:, 1:]),
        )

    rows = []
    for method, fn in (('dense', dense), ('hashed', hashed)):
        samples = _time_calls(fn, config.trials, config.warmup)
        median, spread = metrics.median_spread(samples)
        if spread > STABILITY_GATE * median:
            logger.warning(
                '%s at N=%d is unstable: median %.3g s, spread %.3g s',
                method,
                n,
                median,
                spread,
            )
        rows.append({
            'seq_len': n,
            'method': method,
            'median_s': median,
            'spread_s': spread,
            'trials': config.trials,
        })
    return rows


def latency_bench(config: BenchConfig) -> list[dict[str, Any]]:
    """Per token cost of a dense score pass against the hashed filter.

    Both passes cover every head of one layer. The hashed filter is the
    Hamming scan of all heads, calibration, thresholds and the gather of
    the full and hash tier indices. Runs single threaded.

    Returns:
        Rows with the columns of :data:`metrics.LATENCY_FIELDS`.
    """
    rng = np.random.default_rng(config.seed)
    rows = []
    for n in config.seq_lens:
        rows.extend(_bench_length(n, config, rng))
    return rows


def loglog_slope(seq_lens: Sequence[int], seconds: Sequence[float]) -> float:
    """Least squares slope of ``log(seconds)`` against ``log(seq_len)``."""
    slope, _ = np.polyfit(np.log(seq_lens), np.log(seconds), 1)
    return float(slope)


class LayerMode(str, enum.Enum):
    """How a layer of the stack computes attention."""

    FULL = 'full'
    HASHED = 'hashed'


@dataclasses.dataclass(frozen=True)
class StackConfig:
    """Per layer attention mode of a stack."""

    modes: tuple[LayerMode, ...]

    @classmethod
    def none(cls, n_layers: int) -> StackConfig:
        """Every layer full precision."""
        return cls((LayerMode.FULL,) * n_layers)

    @classmethod
    def single(cls, n_layers: int, layer: int) -> StackConfig:
        """Only ``layer`` hashed."""
        return cls.from_hashed(n_layers, [layer])

    @classmethod
    def even_middle(cls, n_layers: int, start: int, stop: int) -> StackConfig:
        """Even layers in ``[start, stop]`` hashed."""
        return cls.from_hashed(
            n_layers, [j for j in range(start, stop + 1) if j % 2 == 0]
        )

    @classmethod
    def sandwich(cls, n_layers: int, keep: int = 5) -> StackConfig:
        """First and last ``keep`` layers full, everything between hashed."""
        return cls.from_hashed(n_layers, range(keep, n_layers - keep))

    @classmethod
    def from_hashed(cls, n_layers: int, hashed: Sequence[int]) -> StackConfig:
        """Stack with exactly the given layers hashed."""
        hashed = set(hashed)
        if any(not 0 <= j < n_layers for j in hashed):
            raise ConfigurationError(f'hashed layers out of range: {hashed}')
        return cls(
            tuple(
                LayerMode.HASHED if j in hashed else LayerMode.FULL
                for j in range(n_layers)
            )
        )

    @property
    def hashed_layers(self) -> list[int]:
        """Indices of hashed layers."""
        return [j for j, m in enumerate(self.modes) if m == LayerMode.HASHED]


def _full_layer(
    q: RealMatrix, k: RealMatrix, v: RealMatrix
) -> tuple[RealMatrix, RealMatrix]:
    probs = softmax(attention.full_attention_logits(q, k, q.shape[1]))
    return probs, probs @ v


def run_stack(
    traces_by_layer: Mapping[int, Sequence[AttentionTrace]],
    stack: StackConfig,
    params_by_layer: Mapping[int, LayerParams],
    couplings: traces.StackCouplings,
    config: EvalConfig,
) -> tuple[RealMatrix, RealMatrix]:
    """Final layer attention of ``stack`` and of the all-full stack.

    Returns:
        Two ``(H, n_q, n_k)`` probability arrays, the stack's and the
        reference's, zero outside each row's causal prefix.

    Raises:
        ConfigurationError: a hashed layer has no parameters or traces.
    """
    layers = sorted(traces_by_layer)
    if layers != list(range(len(stack.modes))):
        raise ConfigurationError('stack modes and trace layers disagree')
    for j in stack.hashed_layers:
        if j not in params_by_layer:
            raise ConfigurationError(f'missing checkpoint for layer {j}')
    policy = config.policy()
    first = traces_by_layer[0][0]
    n_q, n_k = first.teacher_logits.shape
    error = np.zeros((n_q, first.d))
    prev_mean = None
    probs = reference = np.zeros(0)
    for j in layers:
        layer_traces = traces_by_layer[j]
        reference = np.zeros((len(layer_traces), n_q, n_k))
        probs = np.zeros_like(reference)
        drift = np.zeros_like(error)
        qs, ks, out_refs = [], [], []
        for h, trace in enumerate(layer_traces):
            reference[h], out_ref = _full_layer(trace.q, trace.k, trace.v)
            out_refs.append(out_ref)
            q = trace.q + error @ couplings.c_q[j][h]
            k = trace.k.copy()
            k[n_k - n_q :] += error @ couplings.c_k[j][h]
            qs.append(q)
            ks.append(k)
            if stack.modes[j] == LayerMode.FULL:
                probs[h], out = _full_layer(q, k, trace.v)
                drift += out - out_ref
        if stack.modes[j] == LayerMode.HASHED:
            params = params_by_layer[j]
            values = np.stack([t.v for t in layer_traces])
            words = [
                head.key_codes(k) for head, k in zip(params.heads, ks)
            ]
            keys = np.stack(ks)
            outs = np.zeros((len(layer_traces), n_q, first.d))
            for i in range(n_q):
                n = n_k - n_q + i + 1
                store = calibration.MomentumStore()
                if prev_mean is not None:
                    store.set(j - 1, prev_mean[i, :n])
                result = attention.mixed_precision_attention(
                    np.stack([q[i] for q in qs]),
                    keys[:, :n],
                    values[:, :n],
                    params.heads,
                    params.calib,
                    policy,
                    config.p1,
                    config.p2,
                    layer=j,
                    store=store,
                    banks=[
                        hashing.CodeBank.from_words(head.length_bits, w[:n])
                        for head, w in zip(params.heads, words)
                    ],
                )
                probs[:, i, :n] = result.probs
                outs[:, i] = result.output
            drift += (outs - np.stack(out_refs)).sum(axis=0)
        error = error + couplings.gains[j] * drift / len(layer_traces)
        prev_mean = probs.mean(axis=0)
    return probs, reference


def stack_distortion(
    traces_by_layer: Mapping[int, Sequence[AttentionTrace]],
    stack: StackConfig,
    params_by_layer: Mapping[int, LayerParams],
    couplings: traces.StackCouplings,
    config: EvalConfig,
) -> float:
    """Mean KL of the final layer attention against the all-full stack."""
    probs, reference = run_stack(
        traces_by_layer, stack, params_by_layer, couplings, config
    )
    n_q, n_k = probs.shape[1:]
    kls = [
        metrics.kl_divergence_metric(
            probs[h, i, : n_k - n_q + i + 1],
            reference[h, i, : n_k - n_q + i + 1],
        )
        for h in range(probs.shape[0])
        for i in range(n_q)
    ]
    return float(np.mean(kls))


def layer_sensitivity(
    traces_by_layer: Mapping[int, Sequence[AttentionTrace]],
    params_by_layer: Mapping[int, LayerParams],
    couplings: traces.StackCouplings,
    config: EvalConfig,
    layers: Sequence[int] | None = None,
) -> list[dict[str, Any]]:
    """End-of-stack distortion when one layer at a time is hashed.

    Returns:
        Rows with the columns of :data:`metrics.SENSITIVITY_FIELDS`.

    Raises:
        ConfigurationError: a replaced layer has no checkpoint.
    """
    n_layers = len(traces_by_layer)
    layers = range(n_layers) if layers is None else layers
    rows = []
    for j in layers:
        if j not in params_by_layer:
            raise ConfigurationError(f'missing checkpoint for layer {j}')
        distortion = stack_distortion(
            traces_by_layer,
            StackConfig.single(n_layers, j),
            params_by_layer,
            couplings,
            config,
        )
        logger.info('replacing layer %d: distortion %.4g', j, distortion)
        rows.append({'replaced_layer': j, 'distortion': distortion})
    return rows


def code_length_sweep(
    code_bits: Sequence[int],
    train_traces: Sequence[AttentionTrace],
    eval_traces: Sequence[AttentionTrace],
    train_config: training.TrainConfig,
    eval_config: EvalConfig,
    *,
    weights: training.LossWeights | None = None,
    prev_train: Sequence[AttentionTrace] | None = None,
    prev_eval: Sequence[AttentionTrace] | None = None,
) -> list[dict[str, Any]]:
    """Train and evaluate the asymmetric model at several code lengths.

    Returns:
        Rows with the columns of :data:`metrics.CODE_LENGTH_FIELDS`.
    """
    rows = []
    for nbits in code_bits:
        config = dataclasses.replace(train_config, code_bits=nbits)
        result = training.train_layer(
            train_traces,
            config,
            weights=weights,
            policy=eval_config.policy(),
            prev_traces=prev_train,
        )
        record = run_variant_eval(
            Variant.ASYMMETRIC,
            eval_traces,
            result.params,
            eval_config,
            prev_eval,
        )
        _, _, ratio = metrics.memory_footprint(nbits, eval_traces[0].d)
        rows.append({
            'code_bits': nbits,
            'recall_at_k': record.recall_at_k,
            'kl_to_full': record.kl_to_full,
            'mean_latency_per_token_s': record.mean_latency_per_token_s,
            'code_bytes_per_key': record.code_bytes_per_key,
            'compression_ratio': ratio,
        })
    return rows


def _layer_traces(
    config: traces.SyntheticConfig, layer: int
) -> tuple[list[AttentionTrace], list[AttentionTrace] | None]:
    grouped = traces.by_layer(
        traces.generate_traces(dataclasses.replace(config, n_layers=layer + 1))
    )
    return grouped[layer], grouped.get(layer - 1)


def objective_ablation(
    synthetic: traces.SyntheticConfig,
    train_config: training.TrainConfig,
    eval_config: EvalConfig,
    *,
    layer: int = 0,
    weights: training.LossWeights | None = None,
) -> list[dict[str, Any]]:
    """Compare zero residual, MSE residual and distilled residual.

    Each arm trains at ``train_seq_len`` and is evaluated on held-out
    traces at ``train_seq_len`` and at ``eval_seq_len``.

    Returns:
        Rows with keys arm, train_kl, eval_kl and inflation.
    """
    n_queries = min(synthetic.n_queries, train_config.train_seq_len)
    short = dataclasses.replace(
        synthetic, seq_len=train_config.train_seq_len, n_queries=n_queries
    )
    long = dataclasses.replace(short, seq_len=train_config.eval_seq_len)
    train_traces, prev_train = _layer_traces(short, layer)
    short_eval, prev_short = _layer_traces(held_out(short), layer)
    long_eval, prev_long = _layer_traces(held_out(long), layer)
    arms = (
        (
            'pure_hash',
            training.Objective.DISTILL,
            dataclasses.replace(train_config, train_residual=False),
        ),
        ('mse', training.Objective.MSE, train_config),
        ('distill', training.Objective.DISTILL, train_config),
    )
    rows = []
    for arm, objective, config in arms:
        params = training.train_layer(
            train_traces,
            dataclasses.replace(config, check_progress=False),
            objective,
            weights=weights,
            policy=eval_config.policy(),
            prev_traces=prev_train,
        ).params
        train_kl = run_variant_eval(
            Variant.ASYMMETRIC, short_eval, params, eval_config, prev_short
        ).kl_to_full
        eval_kl = run_variant_eval(
            Variant.ASYMMETRIC, long_eval, params, eval_config, prev_long
        ).kl_to_full
        rows.append({
            'arm': arm,
            'train_kl': train_kl,
            'eval_kl': eval_kl,
            'inflation': eval_kl / train_kl if train_kl > 0 else math.inf,
        })
    return rows


def cross_layer_transfer(
    source_layer: int,
    target_layers: Sequence[int],
    synthetic: traces.SyntheticConfig,
    train_config: training.TrainConfig,
    eval_config: EvalConfig,
    *,
    weights: training.LossWeights | None = None,
) -> list[dict[str, Any]]:
    """Recall of each target layer's own encoders against transferred ones.

    Returns:
        Rows with keys target, own_recall and transferred_recall.
    """
    n_layers = max(source_layer, *target_layers) + 1
    config = dataclasses.replace(synthetic, n_layers=n_layers)
    train = traces.by_layer(traces.generate_traces(config))
    evaluation = traces.by_layer(traces.generate_traces(held_out(config)))
    policy = eval_config.policy()

    def fit(layer: int) -> LayerParams:
        return training.train_layer(
            train[layer],
            train_config,
            weights=weights,
            policy=policy,
            prev_traces=train.get(layer - 1),
        ).params

    source = fit(source_layer)
    rows = []
    for target in target_layers:
        own = run_variant_eval(
            Variant.ASYMMETRIC,
            evaluation[target],
            fit(target),
            eval_config,
            evaluation.get(target - 1),
        )
        moved = run_variant_eval(
            Variant.ASYMMETRIC,
            evaluation[target],
            dataclasses.replace(source.copy(), layer=target),
            eval_config,
            evaluation.get(target - 1),
        )
        rows.append({
            'target': target,
            'own_recall': own.recall_at_k,
            'transferred_recall': moved.recall_at_k,
        })
    return rows
