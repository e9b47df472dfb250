"""Layer-wise distillation training.

Every layer is trained on its own attention traces, independently of the
other layers. The trained student scores a query row over its causal key
prefix the way inference does, except that everything is relaxed:

* codes are ``tanh(beta * x)`` instead of ``sign(x)``,
* the tier of a non-prior key is a soft gate on its calibrated relaxed
  distance ``D`` against the step's thresholds ``t1`` and ``t2``::

      S = w_full * exact + (1 - w_full) * hash + log(w_keep)
      w_full = sigmoid((t1 - D) / tau_g),  w_keep = sigmoid((t2 - D) / tau_g)

  where ``hash = <h_q, h_k> / l + delta(h_q, h_k)``,
* prior keys always get the exact logit.

The tiered scores are the logits decoding would use. They reach
:func:`distill_loss` multiplied by ``tau_s``, so its student temperature
brings them back to logits and the loss compares the decoded attention
with the tempered teacher.

A fresh layer starts from :func:`align_layer` unless ``align`` is off.

Thresholds and vote counts are computed once per step from the current
parameters and then held fixed (a :class:`StepContext`), so gradients do
not flow through the percentile selection.

The optimizer is plain SGD with a fixed learning rate. Calibration
strengths are clamped to ``>= 0`` after each update.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import logging
import math
import pathlib
from typing import TYPE_CHECKING

import numpy as np
from scipy import linalg

from . import attention, calibration, encoders, hashing, options
from .checkpoint import LayerParams
from .numerics import (
    DegenerateInputError,
    DimensionError,
    DomainError,
    log_softmax,
    sigmoid,
    softmax,
)

if TYPE_CHECKING:
    from collections.abc import Sequence
    from os import PathLike

    import numpy.typing as npt

    from .numerics import RealMatrix
    from .traces import AttentionTrace

LOSS_FIELDS = (
    'step',
    'l_distill',
    'l_bal',
    'l_quant',
    'l_total',
    'beta_anneal',
)

# Number of query rows used to record the loss curve
_CURVE_ROWS = 16
# Ridge strength of the query alignment, relative to the mean feature energy
_ALIGN_RIDGE = 0.1

logger = logging.getLogger(__name__)


class TrainingError(Exception):
    """Training diverged."""

    def __init__(self, step: int, message: str) -> None:
        """Record the failing step."""
        super().__init__(f'step {step}: {message}')
        self.step = step


class Objective(str, enum.Enum):
    """Training objective for the score head."""

    # KL divergence to the teacher distribution
    DISTILL = 'distill'
    # Mean squared error against the teacher logits
    MSE = 'mse'


@dataclasses.dataclass
class LossWeights(options.Options):
    """Coefficients of the auxiliary losses and the softmax temperatures."""

    # Weight of the bit balance loss
    alpha_balance: float = 0.1
    # Weight of the quantization loss
    beta_quant: float = 0.1
    # Temperature applied to teacher logits
    tau_teacher: float = 1.0
    # Temperature applied to student scores
    tau_student: float = 0.05

    def __post_init__(self) -> None:
        """Validate ranges."""
        if self.alpha_balance < 0 or self.beta_quant < 0:
            raise DomainError('loss weights must be nonnegative')
        if self.tau_teacher <= 0 or self.tau_student <= 0:
            raise DomainError('temperatures must be positive')


@dataclasses.dataclass
class TrainConfig(options.Options):
    """Training run settings."""

    # Number of SGD steps
    steps: int = 200
    learning_rate: float = 1e-2
    seed: int = 0
    # Query rows sampled per step
    batch: int = 4
    # Sequence length of training traces
    train_seq_len: int = 3000
    # Longest sequence length used for evaluation
    eval_seq_len: int = 32000
    # Code length l
    code_bits: int = 16
    # Query MLP hidden width
    hidden: int = encoders.HIDDEN_WIDTH
    # Residual MLP hidden width
    residual_width: int = attention.RESIDUAL_WIDTH
    # Share the key projection between queries and keys
    symmetric: bool = False
    # Update the residual MLP (a zero residual stays zero when False)
    train_residual: bool = True
    # Update beta_spatial and gamma_temporal
    train_calibration: bool = True
    # Anneal the tanh sharpness with the global step
    anneal: bool = True
    # Softness of the tier gates, in bits
    gate_temperature: float = 1.0
    # Percentiles used for the training gates
    p1: float = 10.0
    p2: float = 50.0
    # Loss curve sampling interval in steps
    record_every: int = 10
    # Debug log interval in steps
    log_every: int = 50
    # Fail when the final loss is not below the initial loss
    check_progress: bool = True
    # Start fresh layers from the data, see align_layer
    align: bool = True

    def __post_init__(self) -> None:
        """Validate ranges."""
        if self.steps < 0 or self.batch < 1:
            raise DomainError('steps must be >= 0 and batch >= 1')
        if self.learning_rate < 0:
            raise DomainError('learning rate must be nonnegative')
        if self.code_bits < 1:
            raise DomainError('code length must be positive')
        if self.gate_temperature <= 0:
            raise DomainError('gate temperature must be positive')
        if not 0 <= self.p1 <= self.p2 <= 100:  # noqa: PLR2004
            raise DomainError('need 0 <= p1 <= p2 <= 100')
        self.record_every = max(1, self.record_every)
        self.log_every = max(1, self.log_every)


def distill_loss(
    student_scores: npt.ArrayLike,
    teacher_logits: npt.ArrayLike,
    weights: LossWeights,
) -> tuple[float, RealMatrix]:
    """Mean over rows of ``KL(softmax(s / tau_s) || softmax(t / tau_t))``.

    Positions equal to -inf are masked and must coincide in both
    matrices.

    Returns:
        The loss and its gradient w.r.t. ``student_scores``.

    Raises:
        DimensionError: shapes or masks differ.
    """
    student = np.atleast_2d(np.asarray(student_scores, dtype=np.float64))
    teacher = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    if student.shape != teacher.shape:
        raise DimensionError(
            f'student {student.shape} and teacher {teacher.shape} differ'
        )
    valid = np.isfinite(teacher)
    if np.any(np.isfinite(student) != valid):
        raise DimensionError('student and teacher masks differ')
    log_p = log_softmax(student, weights.tau_student)
    log_q = log_softmax(teacher, weights.tau_teacher)
    p = np.exp(log_p)
    diff = np.zeros_like(student)
    np.subtract(log_p, log_q, out=diff, where=valid)
    kl_rows = (p * diff).sum(axis=1)
    rows = student.shape[0]
    grad = p * (diff - kl_rows[:, np.newaxis]) / (weights.tau_student * rows)
    return float(kl_rows.mean()), grad


def _balance_term(h: RealMatrix) -> tuple[float, RealMatrix]:
    mean = h.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        return 0.0, np.zeros_like(h)
    return norm, np.broadcast_to(mean / (norm * len(h)), h.shape).copy()


def _check_batches(hq: RealMatrix, hk: RealMatrix) -> None:
    if hq.size == 0 or hk.size == 0:
        raise DegenerateInputError('empty code batch')


def bit_balance_loss(
    hq_relaxed: npt.ArrayLike, hk_relaxed: npt.ArrayLike
) -> tuple[float, tuple[RealMatrix, RealMatrix]]:
    """``||mean(h_q)|| + ||mean(h_k)||`` over the batch dimension.

    Raises:
        DegenerateInputError: a batch is empty.
    """
    hq = np.atleast_2d(np.asarray(hq_relaxed, dtype=np.float64))
    hk = np.atleast_2d(np.asarray(hk_relaxed, dtype=np.float64))
    _check_batches(hq, hk)
    loss_q, grad_q = _balance_term(hq)
    loss_k, grad_k = _balance_term(hk)
    return loss_q + loss_k, (grad_q, grad_k)


def _quant_term(h: RealMatrix) -> tuple[float, RealMatrix]:
    gap = np.abs(h) - 1.0
    return float((gap * gap).mean()), 2.0 * gap * np.sign(h) / h.size


def quantization_loss(
    hq_relaxed: npt.ArrayLike, hk_relaxed: npt.ArrayLike
) -> tuple[float, tuple[RealMatrix, RealMatrix]]:
    """``E[(|h_q| - 1)^2] + E[(|h_k| - 1)^2]``.

    Raises:
        DegenerateInputError: a batch is empty.
    """
    hq = np.atleast_2d(np.asarray(hq_relaxed, dtype=np.float64))
    hk = np.atleast_2d(np.asarray(hk_relaxed, dtype=np.float64))
    _check_batches(hq, hk)
    loss_q, grad_q = _quant_term(hq)
    loss_k, grad_k = _quant_term(hk)
    return loss_q + loss_k, (grad_q, grad_k)


def total_loss(
    l_distill: float, l_bal: float, l_quant: float, weights: LossWeights
) -> float:
    """``L_distill + alpha * L_bal + beta * L_quant``."""
    return (
        l_distill
        + weights.alpha_balance * l_bal
        + weights.beta_quant * l_quant
    )


def mse_residual_loss(
    student_scores: npt.ArrayLike, teacher_logits: npt.ArrayLike
) -> tuple[float, RealMatrix]:
    """Mean squared difference over positions where the teacher is finite.

    Raises:
        DimensionError: shapes differ.
        DegenerateInputError: every position is masked.
    """
    student = np.asarray(student_scores, dtype=np.float64)
    teacher = np.asarray(teacher_logits, dtype=np.float64)
    if student.shape != teacher.shape:
        raise DimensionError(
            f'student {student.shape} and teacher {teacher.shape} differ'
        )
    valid = np.isfinite(teacher)
    count = int(valid.sum())
    if count == 0:
        raise DegenerateInputError('no unmasked positions')
    diff = np.zeros_like(student)
    np.subtract(student, teacher, out=diff, where=valid)
    return float((diff * diff).sum() / count), 2.0 * diff / count


@dataclasses.dataclass(frozen=True)
class StepContext:
    """Inputs of one training step that are held fixed for backward."""

    # Global step, selects beta
    step: int
    # (H, R, d) query rows per head
    queries: RealMatrix
    # (H, n_k, d) all keys per head
    keys: RealMatrix
    # (H, R, n_k) teacher logits, -inf outside the causal prefix
    teacher: RealMatrix
    # (R, n_k) causal prefix membership
    valid: npt.NDArray[np.bool_]
    # (R, n_k) prior set membership
    prior: npt.NDArray[np.bool_]
    # (R,) prefix lengths
    lengths: npt.NDArray[np.int64]
    # (R, n_k) cross-head votes
    votes: RealMatrix
    # (R, n_k) sigmoid of previous layer attention, or None
    momentum: RealMatrix | None
    # (H, R) gate thresholds
    t1: RealMatrix
    t2: RealMatrix


@dataclasses.dataclass
class LossBreakdown:
    """Loss components of one evaluation, averaged over heads."""

    l_distill: float
    l_bal: float
    l_quant: float
    l_total: float


@dataclasses.dataclass
class LayerGrads:
    """Gradients for a :class:`LayerParams`."""

    heads: list[attention.HeadParams]
    beta_spatial: float
    gamma_temporal: float


@dataclasses.dataclass
class _HeadForward:
    qfwd: encoders.QueryForward | None
    beta: float
    hq: RealMatrix
    hk: RealMatrix
    d_final: RealMatrix
    w_full: RealMatrix
    w_keep: RealMatrix
    exact: RealMatrix
    hash_score: RealMatrix
    residuals: list[attention.ResidualForward]
    scores: RealMatrix


def previous_layer_attention(traces: Sequence[AttentionTrace]) -> RealMatrix:
    """Head-averaged teacher attention of a layer, ``(n_q, n_k)``."""
    return np.mean([softmax(t.teacher_logits) for t in traces], axis=0)


def _check_layer(traces: Sequence[AttentionTrace]) -> None:
    if not traces:
        raise DegenerateInputError('no traces')
    first = traces[0]
    for trace in traces:
        if trace.layer != first.layer:
            raise DomainError('traces come from different layers')
        if trace.teacher_logits.shape != first.teacher_logits.shape:
            raise DimensionError('traces of one layer differ in shape')


def _relaxed_codes(
    head: attention.HeadParams, queries: RealMatrix, keys: RealMatrix, step: int
) -> tuple[encoders.QueryForward | None, RealMatrix, RealMatrix]:
    if head.symmetric or head.query is None:
        qfwd = None
        hq = encoders.key_encode_relaxed(queries, head.key, step)
    else:
        qfwd = encoders.query_forward(queries, head.query, step)
        hq = qfwd.out
    return qfwd, hq, encoders.key_encode_relaxed(keys, head.key, step)


def _calibrated(
    inner: RealMatrix,
    length_bits: int,
    votes: RealMatrix,
    momentum: RealMatrix | None,
    calib: calibration.CalibrationParams,
) -> RealMatrix:
    d_final = (length_bits - inner) / 2.0
    d_final = d_final - calib.beta_spatial * votes / calib.num_heads
    if momentum is not None:
        d_final = d_final - calib.gamma_temporal * momentum
    return d_final


def build_context(
    traces: Sequence[AttentionTrace],
    rows: npt.ArrayLike,
    params: LayerParams,
    policy: attention.PriorPolicy,
    p1: float,
    p2: float,
    step: int,
    prev_attention: RealMatrix | None = None,
) -> StepContext:
    """Freeze votes, prior sets and gate thresholds for a batch of rows.

    Args:
        traces: One trace per head of the layer.
        rows: Query row indices.
        params: Current layer parameters.
        policy: Prior set policy.
        p1: Full tier percentile.
        p2: Hash tier percentile.
        step: Global step.
        prev_attention: ``(n_q, n_k)`` previous layer attention, if any.
    """
    _check_layer(traces)
    rows = np.asarray(rows, dtype=np.int64)
    queries = np.stack([t.q[rows] for t in traces])
    keys = np.stack([t.k for t in traces])
    teacher = np.stack([t.teacher_logits[rows] for t in traces])
    valid = np.isfinite(teacher[0])
    lengths = valid.sum(axis=1).astype(np.int64)
    n_rows, n_keys = valid.shape

    prior = np.zeros_like(valid)
    for r, length in enumerate(lengths):
        prior[r, attention.build_prior_set(int(length), policy)] = True

    n_heads = len(params.heads)
    raw = np.zeros((n_heads, n_rows, n_keys))
    for h, head in enumerate(params.heads):
        key_words = head.key_codes(keys[h])
        for r, query_words in enumerate(head.query_codes(queries[h])):
            raw[h, r] = hashing.hamming_rows(query_words, key_words)
    votes = np.zeros((n_rows, n_keys))
    for r, length in enumerate(lengths):
        prefix = raw[:, r, :length]
        t_vote = params.calib.vote_threshold(prefix)
        votes[r, :length] = calibration.vote_count(prefix, t_vote)

    momentum = None
    if prev_attention is not None:
        momentum = np.where(valid, sigmoid(prev_attention[rows]), 0.0)

    t1 = np.zeros((n_heads, n_rows))
    t2 = np.zeros((n_heads, n_rows))
    candidates = valid & ~prior
    for h, head in enumerate(params.heads):
        _, hq, hk = _relaxed_codes(head, queries[h], keys[h], step)
        d_final = _calibrated(
            hq @ hk.T, head.length_bits, votes, momentum, params.calib
        )
        for r in range(n_rows):
            if candidates[r].any():
                t1[h, r], t2[h, r] = attention.compute_thresholds(
                    d_final[r, candidates[r]], p1, p2
                )
    return StepContext(
        step,
        queries,
        keys,
        teacher,
        valid,
        prior,
        lengths,
        votes,
        momentum,
        t1,
        t2,
    )


def _forward_head(
    head: attention.HeadParams,
    h: int,
    ctx: StepContext,
    calib: calibration.CalibrationParams,
    gate_temperature: float,
) -> _HeadForward:
    qfwd, hq, hk = _relaxed_codes(head, ctx.queries[h], ctx.keys[h], ctx.step)
    nbits = head.length_bits
    inner = hq @ hk.T
    d_final = _calibrated(inner, nbits, ctx.votes, ctx.momentum, calib)
    x_full = (ctx.t1[h][:, np.newaxis] - d_final) / gate_temperature
    x_keep = (ctx.t2[h][:, np.newaxis] - d_final) / gate_temperature
    w_full = sigmoid(x_full)
    w_keep = sigmoid(x_keep)
    log_keep = -np.logaddexp(0.0, -x_keep)

    residuals = []
    delta = np.zeros_like(inner)
    for r, length in enumerate(ctx.lengths):
        fwd = attention.residual_forward(hq[r], hk[:length], head.residual)
        residuals.append(fwd)
        delta[r, :length] = fwd.out
    hash_score = inner / nbits + delta
    exact = np.where(ctx.valid, ctx.teacher[h], 0.0)
    gated = w_full * exact + (1.0 - w_full) * hash_score + log_keep
    scores = np.where(ctx.prior, exact, gated)
    scores = np.where(ctx.valid, scores, -np.inf)
    return _HeadForward(
        qfwd,
        encoders.beta_schedule(ctx.step),
        hq,
        hk,
        d_final,
        w_full,
        w_keep,
        exact,
        hash_score,
        residuals,
        scores,
    )


def _backward_head(
    grad_scores: RealMatrix,
    grad_hq: RealMatrix,
    grad_hk: RealMatrix,
    fwd: _HeadForward,
    head: attention.HeadParams,
    h: int,
    ctx: StepContext,
    calib: calibration.CalibrationParams,
    gate_temperature: float,
) -> tuple[attention.HeadParams, float, float]:
    nbits = head.length_bits
    g = np.where(ctx.valid & ~ctx.prior, grad_scores, 0.0)
    g_hash = g * (1.0 - fwd.w_full)
    g_d_final = -(
        g * (fwd.exact - fwd.hash_score) * fwd.w_full * (1.0 - fwd.w_full)
        + g * (1.0 - fwd.w_keep)
    ) / gate_temperature
    grad_beta_spatial = -float((g_d_final * ctx.votes).sum()) / calib.num_heads
    grad_gamma = (
        0.0
        if ctx.momentum is None
        else -float((g_d_final * ctx.momentum).sum())
    )

    g_inner = g_hash / nbits - g_d_final / 2.0
    grad_hq = grad_hq + g_inner @ fwd.hk
    grad_hk = grad_hk + g_inner.T @ fwd.hq
    grad_residual = head.residual.zeros_like()
    for r, length in enumerate(ctx.lengths):
        grads, g_q, g_k = attention.residual_backward(
            g_hash[r, :length], fwd.residuals[r], head.residual
        )
        grad_residual.accumulate(grads)
        grad_hq[r] += g_q
        grad_hk[:length] += g_k

    grad_key = encoders.key_encode_backward(
        grad_hk, ctx.keys[h], fwd.hk, fwd.beta
    )
    grad_query = None
    if fwd.qfwd is None:
        grad_key.accumulate(
            encoders.key_encode_backward(
                grad_hq, ctx.queries[h], fwd.hq, fwd.beta
            )
        )
    else:
        assert head.query is not None
        grad_query = encoders.query_encode_backward(
            grad_hq, fwd.qfwd, head.query
        )
    grads = attention.HeadParams(
        grad_query, grad_key, grad_residual, head.symmetric
    )
    return grads, grad_beta_spatial, grad_gamma


def _head_losses(
    fwd: _HeadForward,
    teacher: RealMatrix,
    weights: LossWeights,
    objective: Objective,
) -> tuple[tuple[float, float, float], tuple[RealMatrix, ...]]:
    if objective == Objective.MSE:
        l_main, g_scores = mse_residual_loss(fwd.scores, teacher)
    else:
        # Back to logits under the student temperature
        l_main, g_scores = distill_loss(
            fwd.scores * weights.tau_student, teacher, weights
        )
        g_scores = g_scores * weights.tau_student
    l_bal, (gb_q, gb_k) = bit_balance_loss(fwd.hq, fwd.hk)
    l_quant, (gq_q, gq_k) = quantization_loss(fwd.hq, fwd.hk)
    grad_hq = weights.alpha_balance * gb_q + weights.beta_quant * gq_q
    grad_hk = weights.alpha_balance * gb_k + weights.beta_quant * gq_k
    return (l_main, l_bal, l_quant), (g_scores, grad_hq, grad_hk)


def _breakdown(
    parts: list[tuple[float, float, float]], weights: LossWeights
) -> LossBreakdown:
    l_distill, l_bal, l_quant = (float(x) for x in np.mean(parts, axis=0))
    return LossBreakdown(
        l_distill,
        l_bal,
        l_quant,
        total_loss(l_distill, l_bal, l_quant, weights),
    )


def layer_loss(
    params: LayerParams,
    ctx: StepContext,
    weights: LossWeights,
    objective: Objective = Objective.DISTILL,
    gate_temperature: float = 1.0,
) -> LossBreakdown:
    """Student loss of a layer on a frozen step context."""
    parts = []
    for h, head in enumerate(params.heads):
        fwd = _forward_head(head, h, ctx, params.calib, gate_temperature)
        losses, _ = _head_losses(fwd, ctx.teacher[h], weights, objective)
        parts.append(losses)
    return _breakdown(parts, weights)


def layer_loss_and_grad(
    params: LayerParams,
    ctx: StepContext,
    weights: LossWeights,
    objective: Objective = Objective.DISTILL,
    gate_temperature: float = 1.0,
) -> tuple[LossBreakdown, LayerGrads]:
    """Loss and gradients w.r.t. every trainable parameter of the layer."""
    n_heads = len(params.heads)
    parts = []
    head_grads = []
    grad_beta_spatial = 0.0
    grad_gamma = 0.0
    for h, head in enumerate(params.heads):
        fwd = _forward_head(head, h, ctx, params.calib, gate_temperature)
        losses, (g_scores, g_hq, g_hk) = _head_losses(
            fwd, ctx.teacher[h], weights, objective
        )
        parts.append(losses)
        grads, g_beta, g_gamma = _backward_head(
            g_scores / n_heads,
            g_hq / n_heads,
            g_hk / n_heads,
            fwd,
            head,
            h,
            ctx,
            params.calib,
            gate_temperature,
        )
        head_grads.append(grads)
        grad_beta_spatial += g_beta
        grad_gamma += g_gamma
    return _breakdown(parts, weights), LayerGrads(
        head_grads, grad_beta_spatial, grad_gamma
    )


@dataclasses.dataclass
class LossRecord:
    """One row of the loss curve."""

    step: int
    l_distill: float
    l_bal: float
    l_quant: float
    l_total: float
    beta_anneal: float


@dataclasses.dataclass
class TrainResult:
    """Trained layer and its loss curve."""

    params: LayerParams
    curve: list[LossRecord]


def init_layer(
    layer: int,
    num_heads: int,
    d: int,
    config: TrainConfig,
    calib: calibration.CalibrationParams | None = None,
) -> LayerParams:
    """Freshly initialized parameters for every head of a layer."""
    rng = np.random.default_rng([config.seed, layer])
    heads = []
    for _ in range(num_heads):
        head = attention.HeadParams.init(
            d,
            config.code_bits,
            rng,
            symmetric=config.symmetric,
            hidden=config.hidden,
            residual_width=config.residual_width,
        )
        if not config.train_residual:
            head.residual = attention.ResidualParams.zeros(
                config.code_bits, config.residual_width
            )
        heads.append(head)
    if calib is None:
        calib = calibration.CalibrationParams(num_heads=num_heads)
    else:
        calib = dataclasses.replace(calib, num_heads=num_heads)
    return LayerParams(layer, heads, calib)


def attended_keys(
    trace: AttentionTrace, policy: attention.PriorPolicy
) -> RealMatrix:
    """Teacher weighted mean of each query row's non-prior keys."""
    out = np.zeros((trace.n_q, trace.d))
    for i, logits in enumerate(trace.teacher_logits):
        n = int(np.isfinite(logits).sum())
        row = logits[:n].copy()
        prior = attention.build_prior_set(n, policy)
        if prior.size < n:
            row[prior] = -np.inf
        out[i] = softmax(row) @ trace.k[:n]
    return out


def align_layer(
    params: LayerParams,
    traces: Sequence[AttentionTrace],
    policy: attention.PriorPolicy,
) -> None:
    """Data dependent start for the encoders of a fresh layer, in place.

    Key projections drop the direction of the mean key. Every key shares
    it and it only shifts a query's logits by a constant, but it would
    otherwise dominate every key code. The output layer of each query MLP
    is then fit by ridge regression so that a query's code predicts the
    key code of what the teacher attends to outside the prior set.
    """
    for head, trace in zip(params.heads, traces):
        mean = trace.k.mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm > 0:
            unit = mean / norm
            head.key.wk -= np.outer(unit, unit @ head.key.wk)
        if head.query is None:
            continue
        target = encoders.key_logits(attended_keys(trace, policy), head.key)
        features = encoders.query_forward(trace.q, head.query, 0).h2
        gram = features.T @ features
        ridge = _ALIGN_RIDGE * float(np.trace(gram)) / len(gram)
        if ridge > 0:
            head.query.w3[...] = linalg.solve(
                gram + ridge * np.eye(len(gram)),
                features.T @ target,
                assume_a='pos',
            )
    logger.debug('layer %d: encoders aligned to the traces', params.layer)


def sgd_update(
    params: LayerParams,
    grads: LayerGrads,
    learning_rate: float,
    *,
    train_residual: bool = True,
    train_calibration: bool = True,
) -> None:
    """In place ``theta -= learning_rate * grad``, then clamp strengths."""
    for head, grad in zip(params.heads, grads.heads):
        if head.query is not None and grad.query is not None:
            head.query.accumulate(grad.query, -learning_rate)
        head.key.accumulate(grad.key, -learning_rate)
        if train_residual:
            head.residual.accumulate(grad.residual, -learning_rate)
    if train_calibration:
        params.calib.beta_spatial -= learning_rate * grads.beta_spatial
        params.calib.gamma_temporal -= learning_rate * grads.gamma_temporal
        params.calib.project()


def train_layer(
    traces: Sequence[AttentionTrace],
    config: TrainConfig,
    objective: Objective = Objective.DISTILL,
    *,
    weights: LossWeights | None = None,
    policy: attention.PriorPolicy | None = None,
    calib: calibration.CalibrationParams | None = None,
    prev_traces: Sequence[AttentionTrace] | None = None,
    init: LayerParams | None = None,
) -> TrainResult:
    """Train every head of one layer on its traces.

    Args:
        traces: One trace per head, all from the same layer.
        config: Training settings.
        objective: Distillation or MSE score objective.
        weights: Loss weights and temperatures.
        policy: Prior set policy used for the gates.
        calib: Initial calibration settings.
        prev_traces: Traces of the previous layer, used for momentum.
        init: Starting parameters. Initialized from the seed if omitted.

    Raises:
        TrainingError: the loss became non-finite, or did not decrease
            while ``config.check_progress`` is set.
    """
    _check_layer(traces)
    weights = LossWeights() if weights is None else weights
    policy = attention.PriorPolicy() if policy is None else policy
    layer = traces[0].layer
    n_q = traces[0].q.shape[0]
    if init is None:
        params = init_layer(layer, len(traces), traces[0].d, config, calib)
        if config.align:
            align_layer(params, traces, policy)
    else:
        params = init.copy()
    prev_attention = (
        None if prev_traces is None else previous_layer_attention(prev_traces)
    )
    rng = np.random.default_rng([config.seed, layer, 1])
    curve_rows = np.arange(n_q)
    if n_q > _CURVE_ROWS:
        curve_rows = np.sort(rng.choice(n_q, size=_CURVE_ROWS, replace=False))

    def record(step: int) -> LossRecord:
        global_step = step if config.anneal else 0
        ctx = build_context(
            traces,
            curve_rows,
            params,
            policy,
            config.p1,
            config.p2,
            global_step,
            prev_attention,
        )
        loss = layer_loss(
            params, ctx, weights, objective, config.gate_temperature
        )
        return LossRecord(
            step,
            loss.l_distill,
            loss.l_bal,
            loss.l_quant,
            loss.l_total,
            encoders.beta_schedule(global_step),
        )

    curve = [record(0)]
    for step in range(config.steps):
        global_step = step if config.anneal else 0
        rows = rng.integers(0, n_q, size=config.batch)
        ctx = build_context(
            traces,
            rows,
            params,
            policy,
            config.p1,
            config.p2,
            global_step,
            prev_attention,
        )
        loss, grads = layer_loss_and_grad(
            params, ctx, weights, objective, config.gate_temperature
        )
        if not math.isfinite(loss.l_total):
            raise TrainingError(step, f'loss is {loss.l_total}')
        sgd_update(
            params,
            grads,
            config.learning_rate,
            train_residual=config.train_residual,
            train_calibration=config.train_calibration,
        )
        if step % config.log_every == 0:
            logger.debug(
                'layer %d step %d: distill=%.6g bal=%.6g quant=%.6g',
                layer,
                step,
                loss.l_distill,
                loss.l_bal,
                loss.l_quant,
            )
        if (step + 1) % config.record_every == 0 and step + 1 < config.steps:
            curve.append(record(step + 1))
    if config.steps:
        curve.append(record(config.steps))

    initial, final = curve[0].l_total, curve[-1].l_total
    if not math.isfinite(final):
        raise TrainingError(config.steps, f'final loss is {final}')
    logger.info(
        'layer %d trained: loss %.6g -> %.6g', layer, initial, final
    )
    if config.steps and config.learning_rate > 0 and final >= initial:
        if config.check_progress:
            raise TrainingError(
                config.steps, f'loss did not decrease ({initial} -> {final})'
            )
        logger.warning('layer %d: loss did not decrease', layer)
    return TrainResult(params, curve)


def write_loss_csv(
    path: str | PathLike[str], curve: Sequence[LossRecord]
) -> None:
    """Write a loss curve with the columns of :data:`LOSS_FIELDS`."""
    with pathlib.Path(path).open('w', newline='', encoding='utf-8') as stream:
        writer = csv.DictWriter(stream, fieldnames=LOSS_FIELDS)
        writer.writeheader()
        for record in curve:
            writer.writerow(dataclasses.asdict(record))


def read_loss_csv(path: str | PathLike[str]) -> list[LossRecord]:
    """Inverse of :func:`write_loss_csv`."""
    with pathlib.Path(path).open(newline='', encoding='utf-8') as stream:
        return [
            LossRecord(
                int(row['step']),
                *(float(row[name]) for name in LOSS_FIELDS[1:]),
            )
            for row in csv.DictReader(stream)
        ]
