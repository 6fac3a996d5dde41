"""Greedy and beam-search decoding, batched across sentences.

Beam steps select the top ``beam_size`` candidates by cumulative log
probability; candidates that end in eos retire to the finished pool and
stop occupying the active beam.  With ``beam_size=1`` this is exactly
greedy decoding.  Final ranking divides the cumulative score by
``length ** length_penalty``.

The encoder runs once per sentence chunk; each decoding step re-runs the
decoder over the whole prefix, which is simple and fast enough at the
scales this package targets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .model import TransformerModel, decode_logits, encode
from .tensor import Tensor
from .text import BOS_ID, EOS_ID, PAD_ID

__all__ = [
    "Hypothesis",
    "greedy_decode",
    "greedy_decode_batch",
    "beam_search",
    "beam_search_batch",
    "DEFAULT_SENTENCES_PER_CALL",
]

DEFAULT_SENTENCES_PER_CALL = 128


@dataclass
class Hypothesis:
    """One decoded candidate: generated ids (bos excluded), raw and normalized score."""

    tokens: tuple[int, ...]
    score: float
    norm_score: float


def _norm(score: float, length: int, penalty: float) -> float:
    return score / (length ** penalty) if penalty != 0.0 else score


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _pad_rows(rows: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    return ids, ids == PAD_ID


def _check_args(model: TransformerModel, max_len: int, beam_size: int) -> None:
    if model.training:
        raise ContractError("decoding requires eval mode")
    if max_len < 1:
        raise ContractError(f"max_len must be positive, got {max_len}")
    if max_len >= model.config.max_positions:
        raise ContractError(
            f"max_len {max_len} does not fit max_positions {model.config.max_positions}"
        )
    if beam_size < 1:
        raise ContractError(f"beam_size must be positive, got {beam_size}")


def _step_logprobs(
    model: TransformerModel,
    enc_data: np.ndarray,
    src_pad: np.ndarray,
    sent_idx: np.ndarray,
    prefixes: np.ndarray,
    banned: Sequence[int],
) -> np.ndarray:
    """Next-token log-probabilities for a stack of prefixes."""
    enc_slice = Tensor(enc_data[sent_idx])
    pad_slice = src_pad[sent_idx]
    logits = decode_logits(model, enc_slice, pad_slice, prefixes).data[:, -1, :]
    logp = _log_softmax_np(logits.astype(np.float64))
    for b in banned:
        logp[:, b] = -np.inf
    return logp


def beam_search_batch(
    model: TransformerModel,
    sources: Sequence[Sequence[int]],
    beam_size: int = 5,
    max_len: int = 64,
    length_penalty: float = 1.0,
    banned: Sequence[int] = (PAD_ID, BOS_ID),
    sentences_per_call: int = DEFAULT_SENTENCES_PER_CALL,
) -> list[Hypothesis]:
    """Best hypothesis per source sentence, decoded in chunks."""
    _check_args(model, max_len, beam_size)
    results: list[Hypothesis] = []
    for start in range(0, len(sources), sentences_per_call):
        chunk = sources[start : start + sentences_per_call]
        results.extend(
            _beam_chunk(model, chunk, beam_size, max_len, length_penalty, banned)
        )
    return results


def _beam_chunk(model, chunk, beam_size, max_len, length_penalty, banned):
    src_ids, src_pad = _pad_rows([np.asarray(s, dtype=np.int64) for s in chunk])
    enc_data = encode(model, src_ids, src_pad).data
    n = len(chunk)
    actives: list[list[tuple[tuple[int, ...], float]]] = [[((), 0.0)] for _ in range(n)]
    finished: list[list[Hypothesis]] = [[] for _ in range(n)]

    for t in range(1, max_len + 1):
        rows, sent_idx = [], []
        for i in range(n):
            if not actives[i]:
                continue
            for tokens, _ in actives[i]:
                rows.append(np.asarray((BOS_ID,) + tokens, dtype=np.int64))
                sent_idx.append(i)
        if not rows:
            break
        prefixes = np.stack(rows)
        logp = _step_logprobs(model, enc_data, src_pad, np.asarray(sent_idx), prefixes, banned)

        row = 0
        for i in range(n):
            hyps = actives[i]
            if not hyps:
                continue
            scores = np.asarray([s for _, s in hyps])[:, None] + logp[row : row + len(hyps)]
            row += len(hyps)
            flat = scores.reshape(-1)
            k = min(beam_size, flat.size)
            top = np.argpartition(-flat, k - 1)[:k]
            top = top[np.argsort(-flat[top], kind="stable")]
            vocab = scores.shape[1]
            new_active: list[tuple[tuple[int, ...], float]] = []
            for cand in top:
                h_idx, w = divmod(int(cand), vocab)
                sc = float(flat[cand])
                if not np.isfinite(sc):
                    continue
                tokens = hyps[h_idx][0] + (w,)
                if w == EOS_ID:
                    finished[i].append(
                        Hypothesis(tokens, sc, _norm(sc, len(tokens), length_penalty))
                    )
                elif t == max_len:
                    finished[i].append(
                        Hypothesis(tokens, sc, _norm(sc, len(tokens), length_penalty))
                    )
                else:
                    new_active.append((tokens, sc))
            actives[i] = new_active if t < max_len else []

    out = []
    for i in range(n):
        if not finished[i]:
            raise ContractError("beam search produced no hypotheses; max_len too small?")
        out.append(max(finished[i], key=lambda h: (h.norm_score, -len(h.tokens))))
    return out


def beam_search(
    model: TransformerModel,
    src_tokens: Sequence[int],
    beam_size: int = 5,
    max_len: int = 64,
    length_penalty: float = 1.0,
    banned: Sequence[int] = (PAD_ID, BOS_ID),
) -> list[Hypothesis]:
    """All finished hypotheses for one sentence, best normalized score first."""
    _check_args(model, max_len, beam_size)
    src_ids, src_pad = _pad_rows([np.asarray(src_tokens, dtype=np.int64)])
    enc_data = encode(model, src_ids, src_pad).data
    actives: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[Hypothesis] = []
    for t in range(1, max_len + 1):
        if not actives:
            break
        prefixes = np.stack([np.asarray((BOS_ID,) + tk, dtype=np.int64) for tk, _ in actives])
        logp = _step_logprobs(
            model, enc_data, src_pad, np.zeros(len(actives), dtype=np.int64), prefixes, banned
        )
        scores = np.asarray([s for _, s in actives])[:, None] + logp
        flat = scores.reshape(-1)
        k = min(beam_size, flat.size)
        top = np.argpartition(-flat, k - 1)[:k]
        top = top[np.argsort(-flat[top], kind="stable")]
        vocab = scores.shape[1]
        new_active = []
        for cand in top:
            h_idx, w = divmod(int(cand), vocab)
            sc = float(flat[cand])
            if not np.isfinite(sc):
                continue
            tokens = actives[h_idx][0] + (w,)
            if w == EOS_ID or t == max_len:
                finished.append(Hypothesis(tokens, sc, _norm(sc, len(tokens), length_penalty)))
            else:
                new_active.append((tokens, sc))
        actives = new_active if t < max_len else []
    finished.sort(key=lambda h: (-h.norm_score, len(h.tokens)))
    return finished


def greedy_decode_batch(
    model: TransformerModel,
    sources: Sequence[Sequence[int]],
    max_len: int = 64,
    length_penalty: float = 1.0,
    banned: Sequence[int] = (PAD_ID, BOS_ID),
    sentences_per_call: int = DEFAULT_SENTENCES_PER_CALL,
) -> list[Hypothesis]:
    """Argmax decoding for many sentences; stops each row at its first eos."""
    _check_args(model, max_len, beam_size=1)
    results: list[Hypothesis] = []
    for start in range(0, len(sources), sentences_per_call):
        chunk = sources[start : start + sentences_per_call]
        src_ids, src_pad = _pad_rows([np.asarray(s, dtype=np.int64) for s in chunk])
        enc_data = encode(model, src_ids, src_pad).data
        n = len(chunk)
        prefix = np.full((n, 1), BOS_ID, dtype=np.int64)
        scores = np.zeros(n)
        alive = np.ones(n, dtype=bool)
        tokens: list[list[int]] = [[] for _ in range(n)]
        for t in range(1, max_len + 1):
            logp = _step_logprobs(
                model, enc_data, src_pad, np.arange(n), prefix, banned
            )
            nxt = logp.argmax(axis=-1)
            for i in range(n):
                if not alive[i]:
                    continue
                w = int(nxt[i])
                tokens[i].append(w)
                scores[i] += logp[i, w]
                if w == EOS_ID:
                    alive[i] = False
            if not alive.any():
                break
            step_col = np.where(alive, nxt, PAD_ID).astype(np.int64)
            prefix = np.concatenate([prefix, step_col[:, None]], axis=1)
        for i in range(n):
            tk = tuple(tokens[i])
            results.append(
                Hypothesis(tk, float(scores[i]), _norm(float(scores[i]), len(tk), length_penalty))
            )
    return results


def greedy_decode(
    model: TransformerModel,
    src_tokens: Sequence[int],
    max_len: int = 64,
    length_penalty: float = 1.0,
    banned: Sequence[int] = (PAD_ID, BOS_ID),
) -> Hypothesis:
    return greedy_decode_batch(
        model, [src_tokens], max_len=max_len, length_penalty=length_penalty, banned=banned
    )[0]
