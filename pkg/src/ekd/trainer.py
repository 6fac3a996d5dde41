"""One distillation (or plain training) stage over a frozen teacher.

Everything random is a pure function of (seed, epoch, step): batch order,
dropout masks, nothing else.  That makes resumed training bit-identical to
uninterrupted training, without persisting generator state in checkpoints.

Batch composition is computed once per stage (length-sorted, budget-sliced)
and only the visiting order is reshuffled each epoch.  Because the teacher
is frozen and composition is fixed, teacher logits are computed once per
batch and cached for all epochs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoding import greedy_decode_batch
from .errors import ContractError
from .losses import stage_objective
from .metrics import bleu
from .model import TransformerModel, forward_batch
from .optim import AdamHyper, AdamState, adam_step
from .tensor import Tape, backward
from .text import BOS_ID, PAD_ID, TokenizedBatch, Vocabulary, batch_by_tokens, decode

__all__ = [
    "StageConfig",
    "StageData",
    "LogRow",
    "TrainResult",
    "train_stage",
    "write_metrics",
    "METRIC_FIELDS",
]

METRIC_FIELDS = ("step", "epoch", "stage", "lr", "task_loss", "kd_loss", "valid_bleu")


@dataclass
class StageConfig:
    epochs: int
    seed: int = 1
    stage_label: str = "stage1"
    mix_weight: float = 0.5
    formulation: str = "convex"
    label_smoothing: float = 0.1
    dropout: float | None = None  # None keeps the model's built-in rate
    max_tokens: int = 4096
    max_decode_len: int = 64
    keep_best: bool = True
    hyper: AdamHyper = field(default_factory=AdamHyper)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ContractError(f"epochs must be non-negative, got {self.epochs}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class StageData:
    """Encoded sentence pairs; ``valid`` enables per-epoch BLEU tracking."""

    train: Sequence[tuple[np.ndarray, np.ndarray]]
    valid: Sequence[tuple[np.ndarray, np.ndarray]] | None = None
    vocab: Vocabulary | None = None


@dataclass
class LogRow:
    step: int
    epoch: int
    stage: str
    lr: float
    task_loss: float
    kd_loss: float
    valid_bleu: float | None = None


@dataclass
class TrainResult:
    model: TransformerModel
    state: AdamState
    log: list[LogRow]
    best_bleu: float | None
    best_epoch: int | None


def _decoder_input(tgt_ids: np.ndarray) -> np.ndarray:
    """Shift targets right and prepend bos; pads shift along harmlessly."""
    shifted = np.empty_like(tgt_ids)
    shifted[:, 0] = BOS_ID
    shifted[:, 1:] = tgt_ids[:, :-1]
    return shifted


def _validation_bleu(model: TransformerModel, data: StageData, cfg: StageConfig) -> float:
    if data.vocab is None:
        raise ContractError("validation BLEU needs a vocabulary to detokenize with")
    model.eval()
    sources = [src for src, _ in data.valid]
    hyps = greedy_decode_batch(model, sources, max_len=cfg.max_decode_len)
    hyp_text = [decode(h.tokens, data.vocab) for h in hyps]
    ref_text = [decode(tgt, data.vocab) for _, tgt in data.valid]
    return bleu(hyp_text, ref_text)


def train_stage(
    student: TransformerModel,
    teacher: TransformerModel | None,
    data: StageData,
    cfg: StageConfig,
    state: AdamState | None = None,
) -> TrainResult:
    """Train ``student`` for ``cfg.epochs`` epochs, distilling when a teacher is given.

    The teacher runs in eval mode and is never written to.  When ``state``
    carries a nonzero step the schedule fast-forwards past already-trained
    steps, which is how checkpoint resume stays bit-identical.  With
    validation data present, the parameters from the best-BLEU epoch (ties
    favor the earlier epoch) are restored before returning.
    """
    cfg.validate()
    if state is None:
        state = AdamState(hyper=cfg.hyper)
    if teacher is not None:
        if (
            teacher.vocab_hash is not None
            and student.vocab_hash is not None
            and teacher.vocab_hash != student.vocab_hash
        ):
            raise ContractError(
                "teacher and student were built against different vocabularies: "
                f"{teacher.vocab_hash[:12]} vs {student.vocab_hash[:12]}"
            )
        if teacher.config.vocab_size != student.config.vocab_size:
            raise ContractError(
                f"teacher vocab {teacher.config.vocab_size} != student vocab "
                f"{student.config.vocab_size}"
            )
        teacher.eval()
    if cfg.dropout is not None and cfg.dropout != student.config.dropout:
        student.config = replace(student.config, dropout=cfg.dropout)

    log: list[LogRow] = []
    best_bleu: float | None = None
    best_epoch: int | None = None
    best_params: dict[str, np.ndarray] | None = None
    if cfg.epochs == 0:
        return TrainResult(student, state, log, best_bleu, best_epoch)

    batches = batch_by_tokens(data.train, cfg.max_tokens, seed=[cfg.seed, 0])
    params = student.parameters
    param_list = list(params.values())

    teacher_logits: list[np.ndarray | None] = [None] * len(batches)
    if teacher is not None:
        for i, b in enumerate(batches):
            teacher_logits[i] = forward_batch(teacher, b.src_ids, _decoder_input(b.tgt_ids), b.src_pad).data

    steps_per_epoch = len(batches)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(steps_per_epoch)
        for j, batch_idx in enumerate(order):
            pos = epoch * steps_per_epoch + j
            if pos < state.step:
                continue
            batch = batches[batch_idx]
            student.train()
            student.reseed_dropout([cfg.seed, 11, pos])
            tgt_in = _decoder_input(batch.tgt_ids)
            with Tape() as tape:
                logits = forward_batch(student, batch.src_ids, tgt_in, batch.src_pad)
                breakdown = stage_objective(
                    logits,
                    teacher_logits[batch_idx],
                    batch.tgt_ids,
                    mix_weight=cfg.mix_weight,
                    formulation=cfg.formulation,
                    epsilon=cfg.label_smoothing,
                    pad_id=PAD_ID,
                )
            backward(breakdown.tensor, params=param_list)
            lr = adam_step(params, {n: p.grad for n, p in params.items()}, state)
            for p in param_list:
                p.zero_grad()
            tape.clear()
            log.append(
                LogRow(
                    step=state.step,
                    epoch=epoch,
                    stage=cfg.stage_label,
                    lr=lr,
                    task_loss=breakdown.task_loss,
                    kd_loss=breakdown.kd_loss,
                )
            )
        if data.valid is not None and log and log[-1].epoch == epoch:
            vb = _validation_bleu(student, data, cfg)
            log[-1].valid_bleu = vb
            if best_bleu is None or vb > best_bleu:
                best_bleu = vb
                best_epoch = epoch
                if cfg.keep_best:
                    best_params = {n: p.data.copy() for n, p in params.items()}

    if best_params is not None:
        for n, p in params.items():
            p.data = best_params[n]
    student.eval()
    return TrainResult(student, state, log, best_bleu, best_epoch)


def write_metrics(rows: Sequence[LogRow], path: str | Path) -> Path:
    """CSV metric log; ``valid_bleu`` is blank on steps without validation."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for r in rows:
            writer.writerow(
                [
                    r.step,
                    r.epoch,
                    r.stage,
                    f"{r.lr:.10g}",
                    f"{r.task_loss:.6f}",
                    f"{r.kd_loss:.6f}",
                    "" if r.valid_bleu is None else f"{r.valid_bleu:.4f}",
                ]
            )
    return path
