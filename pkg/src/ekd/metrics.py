"""Corpus BLEU, teacher-student gap reports, and FLOPs estimates."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import ContractError, DataError
from .model import ModelConfig

__all__ = [
    "bleu",
    "GapReport",
    "gap_report",
    "flops_estimate",
    "distill_flops_estimate",
]


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    hypotheses: Sequence[str],
    references: Sequence[str],
    max_n: int = 4,
    smoothing: str = "exp",
) -> float:
    """Corpus BLEU in [0, 100] with clipped n-gram precision.

    Text is compared case-sensitively on whitespace tokens (inputs are
    expected to be detokenized already).  Orders longer than every
    hypothesis are skipped rather than scored as zero, so ``bleu(h, h)``
    is exactly 100 for any non-empty corpus.

    ``smoothing="exp"`` replaces a zero match count at order n by
    ``1 / 2**k`` where k counts the zero orders seen so far; this is the
    usual exponential fallback and keeps tiny corpora scoreable.
    ``smoothing="none"`` leaves zeros alone, in which case any zero
    precision collapses the geometric mean to 0.
    """
    if len(hypotheses) != len(references):
        raise ContractError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not hypotheses:
        raise DataError("bleu needs at least one sentence pair")
    if smoothing not in ("exp", "none"):
        raise ContractError(f"smoothing must be 'exp' or 'none', got {smoothing!r}")
    if max_n < 1:
        raise ContractError(f"max_n must be positive, got {max_n}")

    matches = [0] * (max_n + 1)
    totals = [0] * (max_n + 1)
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h_toks = hyp.split()
        r_toks = ref.split()
        hyp_len += len(h_toks)
        ref_len += len(r_toks)
        for n in range(1, max_n + 1):
            h_counts = _ngrams(h_toks, n)
            if not h_counts:
                continue
            r_counts = _ngrams(r_toks, n)
            totals[n] += sum(h_counts.values())
            matches[n] += sum(min(c, r_counts[g]) for g, c in h_counts.items())

    if hyp_len == 0:
        return 0.0

    log_sum = 0.0
    orders = 0
    smooth = 1.0
    for n in range(1, max_n + 1):
        if totals[n] == 0:
            continue
        orders += 1
        if matches[n] > 0:
            p_n = matches[n] / totals[n]
        elif smoothing == "exp":
            smooth *= 2.0
            p_n = 1.0 / (smooth * totals[n])
        else:
            return 0.0
        log_sum += math.log(p_n)
    if orders == 0:
        return 0.0
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_sum / orders)


@dataclass(frozen=True)
class GapReport:
    """Teacher-student quality gap, absolute points and percent of teacher."""

    teacher: float
    student: float
    absolute: float
    percent: float

    def formatted(self) -> str:
        return (
            f"teacher={self.teacher:.2f} student={self.student:.2f} "
            f"gap={self.absolute:.2f} ({self.percent:.2f}%)"
        )


def gap_report(student_metric: float, teacher_metric: float) -> GapReport:
    """Absolute and relative gap; the teacher score anchors the percentage."""
    if teacher_metric <= 0:
        raise ContractError(f"teacher metric must be positive, got {teacher_metric}")
    absolute = teacher_metric - student_metric
    return GapReport(
        teacher=teacher_metric,
        student=student_metric,
        absolute=absolute,
        percent=100.0 * absolute / teacher_metric,
    )


def forward_flops_per_token(config: ModelConfig) -> float:
    """Closed-form multiply-add cost of one token's forward pass.

    Counts projection and feed-forward matmuls at 2 FLOPs per
    multiply-add: 8d^2 per self-attention, 4d^2 for the cross-attention
    query/output path, 4df per feed-forward, plus the output projection
    onto the vocabulary.  Sequence-length-dependent attention score terms
    are excluded; at the depths this package targets they are second
    order, and the estimate is used for capacity comparisons, not billing.
    """
    d, f = config.embed_dim, config.ffn_dim
    enc_layer = 8 * d * d + 4 * d * f
    dec_layer = 12 * d * d + 4 * d * f
    out_proj = 2 * d * config.vocab_size
    return float(config.layers * (enc_layer + dec_layer) + out_proj)


def flops_estimate(config: ModelConfig, total_tokens: int, mode: str = "forward") -> float:
    """Total estimated FLOPs for running ``total_tokens`` through the model.

    ``train`` is exactly three forward passes per token (one forward, two
    for the backward sweep).
    """
    if mode not in ("forward", "train"):
        raise ContractError(f"mode must be 'forward' or 'train', got {mode!r}")
    if total_tokens < 0:
        raise ContractError(f"total_tokens must be non-negative, got {total_tokens}")
    config.validate()
    per_token = forward_flops_per_token(config)
    factor = 3.0 if mode == "train" else 1.0
    return per_token * total_tokens * factor


def distill_flops_estimate(
    student_config: ModelConfig,
    teacher_config: ModelConfig,
    total_tokens: int,
) -> float:
    """Distillation cost: student training plus the frozen teacher's forward."""
    return flops_estimate(student_config, total_tokens, "train") + flops_estimate(
        teacher_config, total_tokens, "forward"
    )
