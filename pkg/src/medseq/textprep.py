"""Text standardization, backward line concatenation, and BPE tokenization.

Certificate lines join from line 6 down to line 1 so that codes a human
coder shifted onto the previous line land in the same flat target sequence.
Source text and target code strings each get their own subword model.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field

from .errors import ConfigError, ValidationError
from .records import Certificate, Icd10Code, N_LINES, SideVariables

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")
WORD_END = "</w>"

_WHITESPACE_RUN = re.compile(r"\s+")


def standardize(text: str) -> str:
    """Lowercase, collapse every whitespace run to one space, strip ends."""
    return _WHITESPACE_RUN.sub(" ", text.lower()).strip()


@dataclass(frozen=True)
class TrainingPair:
    """One (source text, target code sequence) example with its conditions."""

    source_text: str
    target_codes: tuple[Icd10Code, ...]
    side: SideVariables
    id: str


def concat_backward(cert: Certificate) -> TrainingPair:
    """Join present lines 6..1 with ', ', standardize, flatten codes 6..1."""
    parts = [cert.lines[i] for i in range(N_LINES - 1, -1, -1) if cert.lines[i]]
    codes = [c for i in range(N_LINES - 1, -1, -1) for c in cert.gold_code_lines[i]]
    return TrainingPair(
        source_text=standardize(", ".join(parts)),
        target_codes=tuple(codes),
        side=cert.side,
        id=cert.id,
    )


# ----------------------------------------------------------------------
# Byte pair encoding
# ----------------------------------------------------------------------


@dataclass
class TokenizerModel:
    """Learned BPE merges plus the dense token->id vocabulary.

    Ids 0..3 are the reserved PAD/BOS/EOS/UNK tokens; the remaining ids
    cover the initial alphabet (sorted) followed by merge products in
    learned order. `exhausted` flags a training run that ran out of
    repeating pairs before reaching the requested vocabulary size.
    """

    merges: tuple[tuple[str, str], ...]
    vocab: dict[str, int]
    exhausted: bool = False
    _ranks: dict[tuple[str, str], int] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )
    _id_to_token: dict[int, str] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )
    _word_cache: dict[str, tuple[int, ...]] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )

    def __post_init__(self):
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._id_to_token = {i: t for t, i in self.vocab.items()}

    @property
    def size(self) -> int:
        return len(self.vocab)


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word) + (WORD_END,)


def _apply_merge(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    """Merge all left-to-right non-overlapping occurrences of `pair`."""
    out: list[str] = []
    i = 0
    n = len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(pair[0] + pair[1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def _pair_counts(word_freqs: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for symbols, freq in word_freqs.items():
        for a, b in zip(symbols, symbols[1:]):
            counts[(a, b)] += freq
    return counts


def bpe_train(corpus: list[str], target_vocab_size: int) -> TokenizerModel:
    """Learn merges by repeatedly fusing the most frequent adjacent pair.

    Ties break toward the lexicographically smallest pair. Training stops at
    the target vocabulary size, or earlier (with `exhausted` set) once no
    adjacent pair occurs twice.
    """
    if not corpus:
        raise ValidationError("cannot train a tokenizer on an empty corpus")

    raw_freqs: Counter = Counter()
    for line in corpus:
        raw_freqs.update(line.split())
    if not raw_freqs:
        raise ValidationError("tokenizer corpus contains no words")

    alphabet = sorted({ch for word in raw_freqs for ch in word} | {WORD_END})
    vocab: dict[str, int] = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
    for sym in alphabet:
        vocab[sym] = len(vocab)
    if target_vocab_size <= len(vocab):
        raise ConfigError(
            f"target_vocab_size {target_vocab_size} must exceed alphabet "
            f"plus reserved tokens ({len(vocab)})"
        )

    word_freqs = {_word_symbols(w): f for w, f in raw_freqs.items()}
    merges: list[tuple[str, str]] = []
    exhausted = False
    while len(vocab) < target_vocab_size:
        counts = _pair_counts(word_freqs)
        best_freq = max(counts.values()) if counts else 0
        if best_freq < 2:
            exhausted = True
            break
        best = min(pair for pair, freq in counts.items() if freq == best_freq)
        merges.append(best)
        word_freqs = {_apply_merge(sym, best): f for sym, f in word_freqs.items()}
        merged = best[0] + best[1]
        if merged not in vocab:
            vocab[merged] = len(vocab)

    return TokenizerModel(merges=tuple(merges), vocab=vocab, exhausted=exhausted)


def _segment_word(model: TokenizerModel, word: str) -> tuple[int, ...]:
    cached = model._word_cache.get(word)
    if cached is not None:
        return cached
    symbols = _word_symbols(word)
    while len(symbols) > 1:
        ranked = [
            (model._ranks[p], p)
            for p in set(zip(symbols, symbols[1:]))
            if p in model._ranks
        ]
        if not ranked:
            break
        symbols = _apply_merge(symbols, min(ranked)[1])
    ids = tuple(model.vocab.get(sym, UNK_ID) for sym in symbols)
    model._word_cache[word] = ids
    return ids


def encode(
    model: TokenizerModel,
    text: str,
    max_len: int | None = None,
    record_id: str | None = None,
) -> list[int]:
    """Tokenize standardized text; characters outside the alphabet map to UNK.

    Sequences longer than `max_len` are rejected, not truncated.
    """
    ids: list[int] = []
    for word in text.split():
        ids.extend(_segment_word(model, word))
    if max_len is not None and len(ids) > max_len:
        who = f" (record {record_id})" if record_id else ""
        raise ValidationError(
            f"encoded sequence length {len(ids)} exceeds limit {max_len}{who}"
        )
    return ids


def decode(model: TokenizerModel, ids: list[int]) -> str:
    """Invert encode; reserved PAD/BOS/EOS ids are skipped."""
    parts: list[str] = []
    for i in ids:
        token = model._id_to_token.get(i)
        if token is None:
            raise ValidationError(f"unknown token id {i} (vocab size {model.size})")
        if i in (PAD_ID, BOS_ID, EOS_ID):
            continue
        parts.append(token)
    return "".join(parts).replace(WORD_END, " ").rstrip(" ")


def token_is_word_final(model: TokenizerModel, token_id: int) -> bool:
    """True when the token closes a word (carries the boundary marker)."""
    token = model._id_to_token.get(token_id, "")
    return token.endswith(WORD_END)


# ----------------------------------------------------------------------
# Serialization: versioned text format, bit-exact on reload
# ----------------------------------------------------------------------

_FORMAT_HEADER = "medseq-tokenizer v1"


def tokenizer_dumps(model: TokenizerModel) -> str:
    lines = [
        _FORMAT_HEADER,
        f"vocab_size {len(model.vocab)}",
        f"exhausted {int(model.exhausted)}",
        "reserved " + " ".join(RESERVED_TOKENS),
        f"merges {len(model.merges)}",
    ]
    for left, right in model.merges:
        lines.append(f"{json.dumps(left)}\t{json.dumps(right)}")
    lines.append(f"vocab {len(model.vocab)}")
    for token, idx in sorted(model.vocab.items(), key=lambda kv: (kv[1], kv[0])):
        lines.append(f"{json.dumps(token)}\t{idx}")
    return "\n".join(lines) + "\n"


def tokenizer_loads(text: str) -> TokenizerModel:
    lines = text.splitlines()
    if not lines or lines[0] != _FORMAT_HEADER:
        raise ValidationError("not a medseq tokenizer file")
    exhausted = bool(int(lines[2].split()[1]))
    n_merges = int(lines[4].split()[1])
    merges = []
    for raw in lines[5 : 5 + n_merges]:
        left, right = raw.split("\t")
        merges.append((json.loads(left), json.loads(right)))
    vocab_header = lines[5 + n_merges]
    n_vocab = int(vocab_header.split()[1])
    vocab: dict[str, int] = {}
    for raw in lines[6 + n_merges : 6 + n_merges + n_vocab]:
        token, idx = raw.split("\t")
        vocab[json.loads(token)] = int(idx)
    return TokenizerModel(merges=tuple(merges), vocab=vocab, exhausted=exhausted)


def save_tokenizer(model: TokenizerModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(tokenizer_dumps(model))


def load_tokenizer(path) -> TokenizerModel:
    with open(path, "r", encoding="utf-8") as fh:
        return tokenizer_loads(fh.read())


def tokenizer_fingerprint(model: TokenizerModel) -> str:
    """Content hash used by checkpoints to pin their tokenizers."""
    return hashlib.sha256(tokenizer_dumps(model).encode("utf-8")).hexdigest()
