"""Training objectives: label-smoothed CE plus intra- and cross-modal KL terms.

KL terms are computed in log space as sum(exp(la) * (la - lb)) per token,
summed over the vocabulary, averaged over non-pad tokens. That matches the
CE granularity, so the alpha/beta weights are scale-comparable. Label
smoothing applies to CE only; consistency terms compare the raw model
distributions.

The composite objective assembles one training-stage loss:
  ce                      per task (teacher-forced pass 1)
  + alpha * intra         bidirectional KL between two dropout passes
  + beta  * cross         directed KL between a paired-input pass and pass 1

Cross pairings: an ST batch pairs the text pass f(x, y) against the speech
pass f(s, y); an ASR batch pairs the speech pass f(s, x) against the copied
text-to-same-text pass f(x, x); a text-only batch pairs f(x, y) against the
copied f(y, y). Each task draws its dropout streams from a fixed spawn
layout, so toggling alpha/beta or adding tasks never changes another
term's masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .batching import TaskBatch
from .model import ModelConfig, ModelParams, decode_logprobs, encode
from .tensor import ShapeError, Tensor

TASK_ORDER = ("mt", "asr", "st")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class ConsistencyConfig:
    alpha: float = 0.0
    beta: float = 0.0
    label_smoothing: float = 0.1
    frozen_reference: bool = False  # stop-gradient on the cross reference pass

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise LossError("alpha and beta must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise LossError(f"label_smoothing {self.label_smoothing} outside [0, 1)")


@dataclass
class LossParts:
    ce: float
    intra: float
    cross: float
    total: float
    token_count: int


def _check_rows(name: str, logp: Tensor, mask: np.ndarray) -> int:
    if logp.ndim != 2:
        raise ShapeError(f"{name}: expected [tokens, vocab], got {logp.shape}")
    if mask.shape != (logp.shape[0],):
        raise ShapeError(f"{name}: mask {mask.shape} vs {logp.shape[0]} rows")
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise LossError(f"{name}: no non-pad tokens")
    return n_valid


def ce_label_smooth(logp: Tensor, targets: np.ndarray, mask: np.ndarray,
                    eps: float) -> tuple[Tensor, int]:
    """Mean over non-pad tokens of -sum_v q_v log p_v, q = (1-eps)*onehot + eps/V."""
    n_valid = _check_rows("ce_label_smooth", logp, mask)
    if not 0.0 <= eps < 1.0:
        raise LossError(f"label smoothing {eps} outside [0, 1)")
    n, v = logp.shape
    if targets.shape != (n,):
        raise ShapeError(f"ce_label_smooth: targets {targets.shape} vs {n} rows")
    rows = np.nonzero(mask)[0]
    tgt = targets[rows]
    if tgt.min(initial=0) < 0 or tgt.max(initial=0) >= v:
        raise LossError("ce_label_smooth: target id outside the vocabulary")
    q = np.zeros((n, v))
    q[rows] = eps / v
    q[rows, tgt] += 1.0 - eps
    loss = T.scale(T.reduce_sum(T.multiply(logp, T.constant(q))), -1.0 / n_valid)
    return loss, n_valid


def _masked_mean_kl(lp_a: Tensor, lp_b: Tensor, mask: np.ndarray, n_valid: int) -> Tensor:
    """Per-token KL(a||b) = sum exp(la) * (la - lb), averaged over valid rows."""
    pa = T.softmax(lp_a, axis=-1)
    diff = T.add(lp_a, T.scale(lp_b, -1.0))
    per_token = T.reduce_sum(T.multiply(pa, diff), axis=-1)
    keep = T.constant(mask.astype(np.float64))
    return T.scale(T.reduce_sum(T.multiply(per_token, keep)), 1.0 / n_valid)


def bikl(lp_a: Tensor, lp_b: Tensor, mask: np.ndarray) -> Tensor:
    """Symmetrized KL between two log-distribution tensors of equal shape."""
    if lp_a.shape != lp_b.shape:
        raise ShapeError(f"bikl: {lp_a.shape} vs {lp_b.shape}")
    n_valid = _check_rows("bikl", lp_a, mask)
    ab = _masked_mean_kl(lp_a, lp_b, mask, n_valid)
    ba = _masked_mean_kl(lp_b, lp_a, mask, n_valid)
    return T.scale(T.add(ab, ba), 0.5)


def crosskl(lp_ref: Tensor, lp_other: Tensor, mask: np.ndarray,
            frozen_reference: bool = False) -> Tensor:
    """Directed KL(ref || other); both sides must teacher-force the same targets."""
    if lp_ref.shape != lp_other.shape:
        raise ShapeError(
            f"crosskl: {lp_ref.shape} vs {lp_other.shape}; "
            "the two passes must be teacher-forced on the same target sequence"
        )
    n_valid = _check_rows("crosskl", lp_ref, mask)
    if frozen_reference:
        lp_ref = lp_ref.detach()
    return _masked_mean_kl(lp_ref, lp_other, mask, n_valid)


def _flatten(logp: Tensor) -> Tensor:
    b, t, v = logp.shape
    return T.reshape(logp, (b * t, v))


def _task_views(batch: TaskBatch):
    tgt = batch.target
    return tgt.dec_out.reshape(-1), tgt.mask.reshape(-1)


def composite_objective(
    params: ModelParams,
    cfg: ModelConfig,
    batches: dict[str, TaskBatch],
    cc: ConsistencyConfig,
    rng: np.random.Generator,
) -> tuple[Tensor, LossParts]:
    """Assemble one stage's loss over the given task batches.

    Returns the differentiable total plus a float breakdown. Every pass
    consumes its own child stream from a fixed 3-streams-per-task layout.
    """
    unknown = set(batches) - set(TASK_ORDER)
    if unknown:
        raise LossError(f"unknown tasks {sorted(unknown)}; expected subset of {TASK_ORDER}")
    if not batches:
        raise LossError("composite_objective: no task batches")
    streams = {}
    children = rng.spawn(3 * len(TASK_ORDER))
    for i, task in enumerate(TASK_ORDER):
        streams[task] = children[3 * i: 3 * i + 3]

    drop = cfg.dropout_p > 0
    ce_sum: Tensor | None = None
    intra_sum: Tensor | None = None
    cross_sum: Tensor | None = None
    token_count = 0
    first_pass: dict[str, Tensor] = {}

    def acc(total, piece):
        return piece if total is None else T.add(total, piece)

    for task in TASK_ORDER:
        batch = batches.get(task)
        if batch is None:
            continue
        s1, s2, _ = streams[task]
        src = batch.frames if task in ("asr", "st") else batch.src_text
        if src is None:
            raise LossError(f"task {task!r} batch lacks its input modality")
        targets, mask = _task_views(batch)
        lp1 = _flatten(decode_logprobs(
            params, cfg, encode(params, cfg, src, s1 if drop else None),
            batch.target, s1 if drop else None,
        ))
        first_pass[task] = lp1
        ce_t, n_tok = ce_label_smooth(lp1, targets, mask, cc.label_smoothing)
        token_count += n_tok
        ce_sum = acc(ce_sum, ce_t)
        if cc.alpha > 0:
            lp2 = _flatten(decode_logprobs(
                params, cfg, encode(params, cfg, src, s2 if drop else None),
                batch.target, s2 if drop else None,
            ))
            intra_sum = acc(intra_sum, bikl(lp1, lp2, mask))

    if cc.beta > 0:
        paired = False
        if "st" in batches:
            batch = batches["st"]
            if batch.src_text is None:
                raise LossError("cross-modal term needs the ST batch's transcriptions")
            s3 = streams["st"][2]
            _, mask = _task_views(batch)
            lp_text = _flatten(decode_logprobs(
                params, cfg, encode(params, cfg, batch.src_text, s3 if drop else None),
                batch.target, s3 if drop else None,
            ))
            cross_sum = acc(cross_sum, crosskl(
                lp_text, first_pass["st"], mask, cc.frozen_reference))
            paired = True
        if "asr" in batches:
            batch = batches["asr"]
            if batch.src_text is None:
                raise LossError("cross-modal term needs the ASR batch's transcriptions")
            s3 = streams["asr"][2]
            _, mask = _task_views(batch)
            lp_copy = _flatten(decode_logprobs(
                params, cfg, encode(params, cfg, batch.src_text, s3 if drop else None),
                batch.target, s3 if drop else None,
            ))
            cross_sum = acc(cross_sum, crosskl(
                first_pass["asr"], lp_copy, mask, cc.frozen_reference))
            paired = True
        if not paired:
            if "mt" not in batches or batches["mt"].tgt_text is None:
                raise LossError("beta > 0 but no task provides a cross-consistency pair")
            batch = batches["mt"]
            s3 = streams["mt"][2]
            _, mask = _task_views(batch)
            lp_copy = _flatten(decode_logprobs(
                params, cfg, encode(params, cfg, batch.tgt_text, s3 if drop else None),
                batch.target, s3 if drop else None,
            ))
            cross_sum = acc(cross_sum, crosskl(
                first_pass["mt"], lp_copy, mask, cc.frozen_reference))

    total = ce_sum
    if intra_sum is not None:
        total = T.add(total, T.scale(intra_sum, cc.alpha))
    if cross_sum is not None:
        total = T.add(total, T.scale(cross_sum, cc.beta))
    parts = LossParts(
        ce=ce_sum.item(),
        intra=0.0 if intra_sum is None else intra_sum.item(),
        cross=0.0 if cross_sum is None else cross_sum.item(),
        total=total.item(),
        token_count=token_count,
    )
    return total, parts
