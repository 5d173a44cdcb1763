"""Beam-search decoding of code sequences with confidence scores.

A hypothesis finishes at EOS, at 20 emitted codes, or when the decoder's
token budget (max_tgt_len) fills up.  Ranking uses the length-normalized
log-probability with penalty ((5+len)/6)^alpha; the reported score is the
geometric-mean token probability, a length-insensitive value in (0,1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .textprep import BOS_ID, EOS_ID, PAD_ID, TokenizerModel, TrainingPair, token_is_word_final
from .textprep import decode as decode_tokens
from .textprep import encode as encode_text
from .transformer import TransformerModel, Tensor, decode_logits, encode_source

MAX_CODES = 20
DEFAULT_BEAM_WIDTH = 4
DEFAULT_ALPHA = 0.6


@dataclass(frozen=True)
class Prediction:
    id: str
    codes: tuple[str, ...]
    score: float

    def __post_init__(self) -> None:
        if not 0.0 < self.score <= 1.0:
            raise ValidationError(f"prediction score must be in (0, 1], got {self.score}")
        if len(self.codes) > MAX_CODES:
            raise ValidationError(f"prediction exceeds {MAX_CODES} codes")


def length_penalty(n_tokens: int, alpha: float) -> float:
    return ((5.0 + n_tokens) / 6.0) ** alpha


def prediction_score(token_logprobs: list[float]) -> float:
    """Geometric-mean token probability: exp(mean log p), in (0,1]."""
    if not token_logprobs:
        raise ValidationError("cannot score an empty hypothesis")
    return float(math.exp(sum(token_logprobs) / len(token_logprobs)))


def _log_softmax_last(model: TransformerModel, memory_data: np.ndarray,
                      src_bias: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """(n, vocab) float64 log-probabilities of the next token; PAD at -inf."""
    logits = decode_logits(model, Tensor(memory_data), src_bias, ids, train=False)
    last = logits.data[:, -1, :].astype(np.float64)
    shifted = last - last.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp[:, PAD_ID] = -np.inf
    return logp


@dataclass
class _Hyp:
    ids: tuple[int, ...]          # decoder input, starts with BOS
    logps: tuple[float, ...]      # per emitted token, aligned with ids[1:]
    n_codes: int

    def penalized(self, alpha: float) -> float:
        return sum(self.logps) / length_penalty(len(self.logps), alpha)


def beam_search(
    model: TransformerModel,
    tokenizer: TokenizerModel,
    src_ids: np.ndarray,
    side_idx: np.ndarray,
    beam_width: int = DEFAULT_BEAM_WIDTH,
    alpha: float = DEFAULT_ALPHA,
    record_id: str = "",
    max_codes: int = MAX_CODES,
) -> list[Prediction]:
    """Ranked finished hypotheses for one record.

    Returns up to beam_width predictions; fewer only when the search space
    is exhausted.  Ties break toward the lexicographically smaller token
    sequence, so results are deterministic.
    """
    if beam_width < 1:
        raise ValidationError(f"beam_width must be >= 1, got {beam_width}")
    src_ids = np.asarray(src_ids)
    side_idx = np.asarray(side_idx)
    memory, src_bias = encode_source(model, src_ids[None, :], side_idx[None, :], train=False)
    max_len = model.config.max_tgt_len

    active = [_Hyp(ids=(BOS_ID,), logps=(), n_codes=0)]
    finished: list[_Hyp] = []
    while active:
        n = len(active)
        ids_batch = np.array([h.ids for h in active], dtype=np.int64)
        mem = np.repeat(memory.data, n, axis=0)
        bias = np.repeat(src_bias, n, axis=0)
        logp = _log_softmax_last(model, mem, bias, ids_batch)

        candidates: list[_Hyp] = []
        for i, hyp in enumerate(active):
            for tok in range(logp.shape[1]):
                if tok == PAD_ID:
                    continue
                cand = _Hyp(
                    ids=hyp.ids + (tok,),
                    logps=hyp.logps + (float(logp[i, tok]),),
                    n_codes=hyp.n_codes + (1 if token_is_word_final(tokenizer, tok) else 0),
                )
                candidates.append(cand)
        candidates.sort(key=lambda h: (-h.penalized(alpha), h.ids))
        next_active: list[_Hyp] = []
        for cand in candidates[:beam_width]:
            done = (
                cand.ids[-1] == EOS_ID
                or cand.n_codes >= max_codes
                or len(cand.ids) >= max_len
            )
            if done:
                finished.append(cand)
            else:
                next_active.append(cand)
        active = next_active

    finished.sort(key=lambda h: (-h.penalized(alpha), h.ids))
    out = []
    for hyp in finished[:beam_width]:
        text = decode_tokens(tokenizer, list(hyp.ids[1:]))
        codes = tuple(text.split()) if text else ()
        out.append(Prediction(id=record_id, codes=codes, score=prediction_score(list(hyp.logps))))
    return out


def greedy_decode(
    model: TransformerModel,
    tokenizer: TokenizerModel,
    src_ids: np.ndarray,
    side_idx: np.ndarray,
    record_ids: list[str] | None = None,
    max_codes: int = MAX_CODES,
) -> list[Prediction]:
    """Batched argmax decoding; per record it equals beam_search(width=1)."""
    src_ids = np.asarray(src_ids)
    side_idx = np.asarray(side_idx)
    batch = src_ids.shape[0]
    if record_ids is None:
        record_ids = [""] * batch
    memory, src_bias = encode_source(model, src_ids, side_idx, train=False)
    max_len = model.config.max_tgt_len

    ids = np.full((batch, 1), BOS_ID, dtype=np.int64)
    logp_sums = [[] for _ in range(batch)]
    n_codes = np.zeros(batch, dtype=np.int64)
    done = np.zeros(batch, dtype=bool)
    while not done.all() and ids.shape[1] < max_len:
        logp = _log_softmax_last(model, memory.data, src_bias, ids)
        nxt = logp.argmax(axis=-1)
        nxt[done] = PAD_ID
        for r in range(batch):
            if done[r]:
                continue
            tok = int(nxt[r])
            logp_sums[r].append(float(logp[r, tok]))
            if token_is_word_final(tokenizer, tok):
                n_codes[r] += 1
            if tok == EOS_ID or n_codes[r] >= max_codes:
                done[r] = True
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
        done |= ids.shape[1] >= max_len

    out = []
    for r in range(batch):
        row = [int(t) for t in ids[r, 1:] if t != PAD_ID]
        text = decode_tokens(tokenizer, row)
        codes = tuple(text.split()) if text else ()
        out.append(Prediction(id=record_ids[r], codes=codes, score=prediction_score(logp_sums[r])))
    return out


def predict_pairs(
    model: TransformerModel,
    src_tok: TokenizerModel,
    tgt_tok: TokenizerModel,
    pairs: list[TrainingPair],
    beam_width: int = DEFAULT_BEAM_WIDTH,
    alpha: float = DEFAULT_ALPHA,
) -> list[Prediction]:
    """Top beam hypothesis for each (source text, side variables) record."""
    cfg = model.config
    out = []
    for pair in pairs:
        src = np.asarray(
            encode_text(src_tok, pair.source_text, max_len=cfg.max_src_len, record_id=pair.id),
            dtype=np.int64,
        )
        side = np.asarray(pair.side.as_tuple(), dtype=np.int64)
        ranked = beam_search(
            model, tgt_tok, src, side,
            beam_width=beam_width, alpha=alpha, record_id=pair.id,
        )
        if not ranked:
            raise ValidationError(f"record {pair.id}: beam search returned no hypothesis")
        out.append(ranked[0])
    return out


def write_predictions(path: str, predictions: list[Prediction]) -> None:
    """Tab-separated rows: id, space-joined codes, score with 6 decimals."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in predictions:
            fh.write(f"{p.id}\t{' '.join(p.codes)}\t{p.score:.6f}\n")


def read_predictions(path: str) -> list[Prediction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValidationError(f"prediction file {path}: line {line_no} has {len(parts)} fields, want 3")
            rid, codes_text, score_text = parts
            try:
                score = float(score_text)
            except ValueError:
                raise ValidationError(f"prediction file {path}: line {line_no}: bad score {score_text!r}")
            codes = tuple(codes_text.split()) if codes_text else ()
            out.append(Prediction(id=rid, codes=codes, score=score))
    return out
