"""Training objectives: smoothed task loss, soft-label KD loss, stage mix.

All three return scalars averaged over non-pad target tokens, so values are
comparable across batch shapes.  The KD term is KL(teacher || student) per
token; since the teacher entropy does not depend on the student, its
gradient equals that of the soft-label cross-entropy -sum p_T log p_S.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError, ShapeError
from .tensor import Tensor, log_softmax_rows, mul, reshape, tensor_sum

__all__ = [
    "LossBreakdown",
    "label_smoothed_ce",
    "kd_soft_label_loss",
    "stage_objective",
    "FORMULATIONS",
]

FORMULATIONS = ("convex", "additive")


@dataclass
class LossBreakdown:
    """Scalar summary of one objective evaluation.

    ``tensor`` is the mixed loss still attached to the tape; the float
    fields are detached copies for logging.
    """

    task_loss: float
    kd_loss: float
    mixed: float
    mix_weight: float
    token_count: int
    tensor: Tensor


def _flatten_logits(logits: Tensor, targets: np.ndarray) -> tuple[Tensor, np.ndarray]:
    if logits.data.ndim == 3:
        b, t, v = logits.shape
        return reshape(logits, (b * t, v)), targets.reshape(-1)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-d or 3-d, got shape {logits.shape}")
    return logits, targets.reshape(-1)


def _token_weights(targets: np.ndarray, pad_id: int, dtype) -> tuple[np.ndarray, int]:
    weights = (targets != pad_id).astype(dtype)
    count = int(weights.sum())
    if count == 0:
        raise DataError("all targets are padding; nothing to average over")
    return weights, count


def label_smoothed_ce(
    logits: Tensor,
    targets: np.ndarray,
    epsilon: float = 0.1,
    pad_id: int = 0,
) -> Tensor:
    """Cross-entropy against a smoothed target distribution.

    The true class keeps mass ``1 - epsilon``; every other non-pad class
    receives ``epsilon / (V - 1)``; the pad class gets nothing, so its
    logit only participates through the softmax normalizer.  The result is
    the mean over non-pad target positions.  ``epsilon = 0`` is exact
    negative log-likelihood.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ContractError(f"epsilon must lie in [0, 1), got {epsilon}")
    logits, targets = _flatten_logits(logits, targets)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {n}")
    if targets.min() < 0 or targets.max() >= v:
        raise ContractError(f"target ids must lie in [0, {v})")
    weights, count = _token_weights(targets, pad_id, logits.data.dtype)

    q = np.full((n, v), epsilon / (v - 1), dtype=logits.data.dtype)
    q[:, pad_id] = 0.0
    q[np.arange(n), targets] = 1.0 - epsilon
    q *= weights[:, None]

    log_probs = log_softmax_rows(logits)
    total = tensor_sum(mul(log_probs, Tensor(q)))
    return mul(total, Tensor(np.asarray(-1.0 / count, dtype=logits.data.dtype)))


def kd_soft_label_loss(
    student_logits: Tensor,
    teacher_logits: Tensor | np.ndarray,
    pad_mask: np.ndarray | None = None,
) -> Tensor:
    """Mean per-token KL(P_teacher || P_student) from raw logits.

    The teacher distribution is a constant: passing a teacher tensor that
    requires gradients is a contract violation, because distillation must
    never update the teacher.  ``pad_mask`` (True at pad positions) drops
    padded tokens from the average.
    """
    if isinstance(teacher_logits, Tensor):
        if teacher_logits.requires_grad:
            raise ContractError("teacher logits must not require gradients")
        teacher_data = teacher_logits.data
    else:
        teacher_data = np.asarray(teacher_logits)
    if student_logits.shape != teacher_data.shape:
        raise ShapeError(
            f"student logits {student_logits.shape} and teacher logits "
            f"{teacher_data.shape} must match"
        )
    dtype = student_logits.data.dtype

    flat_t = teacher_data.reshape(-1, teacher_data.shape[-1]).astype(dtype, copy=False)
    shifted = flat_t - flat_t.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p_t = e / e.sum(axis=-1, keepdims=True)

    if pad_mask is not None:
        keep = (~pad_mask.reshape(-1)).astype(dtype)
    else:
        keep = np.ones(p_t.shape[0], dtype=dtype)
    count = int(keep.sum())
    if count == 0:
        raise DataError("all tokens are padding; nothing to average over")

    # Teacher entropy term, constant w.r.t. the student.
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p_t > 0, p_t * np.log(np.where(p_t > 0, p_t, 1.0)), 0.0)
    entropy_side = float((plogp.sum(axis=-1) * keep).sum()) / count

    flat_s = reshape(student_logits, p_t.shape) if student_logits.data.ndim == 3 else student_logits
    log_p_s = log_softmax_rows(flat_s)
    weighted_t = p_t * keep[:, None]
    cross = tensor_sum(mul(log_p_s, Tensor(weighted_t)))
    neg_cross = mul(cross, Tensor(np.asarray(-1.0 / count, dtype=dtype)))
    return neg_cross + float(entropy_side)


def stage_objective(
    student_logits: Tensor,
    teacher_logits: Tensor | np.ndarray | None,
    targets: np.ndarray,
    mix_weight: float = 0.5,
    formulation: str = "convex",
    epsilon: float = 0.1,
    pad_id: int = 0,
) -> LossBreakdown:
    """Combine task and distillation terms for one training stage.

    ``convex`` computes ``w * kd + (1 - w) * task`` and is the default;
    ``additive`` computes ``task + w * kd``.  Without a teacher the
    objective is the pure task loss and ``mix_weight`` is recorded as 0.
    """
    if formulation not in FORMULATIONS:
        raise ContractError(f"formulation must be one of {FORMULATIONS}, got {formulation!r}")
    if not 0.0 <= mix_weight <= 1.0:
        raise ContractError(f"mix_weight must lie in [0, 1], got {mix_weight}")

    flat_targets = targets.reshape(-1)
    _, count = _token_weights(flat_targets, pad_id, np.float64)
    task = label_smoothed_ce(student_logits, targets, epsilon=epsilon, pad_id=pad_id)

    if teacher_logits is None:
        return LossBreakdown(
            task_loss=float(task.data),
            kd_loss=0.0,
            mixed=float(task.data),
            mix_weight=0.0,
            token_count=count,
            tensor=task,
        )

    pad_mask = (flat_targets == pad_id)
    kd = kd_soft_label_loss(student_logits, teacher_logits, pad_mask=pad_mask)
    if formulation == "convex":
        mixed = mix_weight * kd + (1.0 - mix_weight) * task
    else:
        mixed = task + mix_weight * kd
    return LossBreakdown(
        task_loss=float(task.data),
        kd_loss=float(kd.data),
        mixed=float(mixed.data),
        mix_weight=mix_weight,
        token_count=count,
        tensor=mixed,
    )
