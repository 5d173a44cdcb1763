"""Conditional Transformer encoder-decoder.

Standard pre-norm architecture with one twist: four categorical side
variables (age bucket, year, gender, origin) are embedded and summed, and
the sum is broadcast-added to every position of the embedded source
sequence.  The decoder sees the conditioning only through cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, ValidationError
from .tensor import (
    DropoutSource,
    Tensor,
    add,
    cross_entropy,
    dropout,
    embedding_lookup,
    layer_norm,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    transpose,
)
from .textprep import PAD_ID

_MASK_BIAS = -1e9  # large negative logit bias; float32-safe


@dataclass(frozen=True)
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    hidden_size: int = 64
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    n_heads: int = 4
    ffn_size: int = 256
    layer_postprocess_dropout: float = 0.1
    attention_dropout: float = 0.1
    relu_dropout: float = 0.1
    max_src_len: int = 128
    max_tgt_len: int = 21
    side_cardinalities: tuple[int, ...] = (25, 6, 2, 2)
    label_smoothing: float = 0.1
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.hidden_size <= 0 or self.hidden_size % 2 != 0:
            raise ConfigError(f"hidden_size must be a positive even integer, got {self.hidden_size}")
        if self.hidden_size % self.n_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}"
            )
        if min(self.n_layers_enc, self.n_layers_dec, self.n_heads, self.ffn_size) < 1:
            raise ConfigError("layer, head and ffn counts must be >= 1")
        for name in ("layer_postprocess_dropout", "attention_dropout", "relu_dropout", "label_smoothing"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if min(self.src_vocab_size, self.tgt_vocab_size) <= 4:
            raise ConfigError("vocab sizes must exceed the 4 reserved ids")
        if self.max_src_len < 1 or self.max_tgt_len < 2:
            raise ConfigError("max lengths too small")
        if any(c < 1 for c in self.side_cardinalities):
            raise ConfigError(f"side cardinalities must be positive, got {self.side_cardinalities}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["side_cardinalities"] = list(self.side_cardinalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["side_cardinalities"] = tuple(d["side_cardinalities"])
        return cls(**d)


@dataclass
class TransformerModel:
    config: ModelConfig
    parameters: dict[str, Tensor]
    # Sinusoidal tables; derived from config, never trained or checkpointed.
    pos_src: np.ndarray
    pos_tgt: np.ndarray


def sinusoid_table(max_len: int, hidden: int, dtype: np.dtype) -> np.ndarray:
    """pe[p, 2i] = sin(p / 10000^(2i/h)), pe[p, 2i+1] = cos of the same."""
    positions = np.arange(max_len, dtype=np.float64)[:, None]
    exponents = np.arange(0, hidden, 2, dtype=np.float64) / hidden
    angles = positions / np.power(10000.0, exponents)[None, :]
    table = np.zeros((max_len, hidden), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table.astype(dtype)


def _parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) in the fixed construction order.

    The order fixes the RNG draw order, which makes init deterministic.
    """
    h, f = cfg.hidden_size, cfg.ffn_size
    out: list[tuple[str, tuple[int, ...], str]] = [
        ("src_embed", (cfg.src_vocab_size, h), "embed"),
        ("tgt_embed", (cfg.tgt_vocab_size, h), "embed"),
    ]
    for i, card in enumerate(cfg.side_cardinalities):
        out.append((f"side_embed_{i}", (card, h), "embed"))

    def norm(prefix: str) -> list[tuple[str, tuple[int, ...], str]]:
        return [(f"{prefix}.gain", (h,), "ones"), (f"{prefix}.bias", (h,), "zeros")]

    def attn(prefix: str) -> list[tuple[str, tuple[int, ...], str]]:
        return [(f"{prefix}.{w}", (h, h), "glorot") for w in ("wq", "wk", "wv", "wo")]

    def ffn(prefix: str) -> list[tuple[str, tuple[int, ...], str]]:
        return [
            (f"{prefix}.w1", (h, f), "glorot"),
            (f"{prefix}.b1", (f,), "zeros"),
            (f"{prefix}.w2", (f, h), "glorot"),
            (f"{prefix}.b2", (h,), "zeros"),
        ]

    for i in range(cfg.n_layers_enc):
        out += norm(f"enc{i}.attn_norm") + attn(f"enc{i}.attn")
        out += norm(f"enc{i}.ffn_norm") + ffn(f"enc{i}.ffn")
    out += norm("enc.final_norm")
    for i in range(cfg.n_layers_dec):
        out += norm(f"dec{i}.self_norm") + attn(f"dec{i}.self_attn")
        out += norm(f"dec{i}.cross_norm") + attn(f"dec{i}.cross_attn")
        out += norm(f"dec{i}.ffn_norm") + ffn(f"dec{i}.ffn")
    out += norm("dec.final_norm")
    return out


def init_model(cfg: ModelConfig, seed: int) -> TransformerModel:
    """Deterministic init: one generator, fixed draw order over parameters."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    params: dict[str, Tensor] = {}
    for name, shape, kind in _parameter_shapes(cfg):
        if kind == "embed":
            arr = rng.normal(0.0, cfg.hidden_size ** -0.5, size=shape)
        elif kind == "glorot":
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dt))
    return TransformerModel(
        config=cfg,
        parameters=params,
        pos_src=sinusoid_table(cfg.max_src_len, cfg.hidden_size, dt),
        pos_tgt=sinusoid_table(cfg.max_tgt_len, cfg.hidden_size, dt),
    )


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    embeddings: (src_vocab + tgt_vocab + sum(side_cards)) * h
    attention sublayer: 4h^2 weights + 2h norm
    ffn sublayer: 2hf + f + h weights/biases + 2h norm
    encoder: n_enc * (attn + ffn) + 2h final norm
    decoder: n_dec * (2*attn + ffn) + 2h final norm
    The output projection is the transposed target embedding, so it adds 0.
    """
    h, f = cfg.hidden_size, cfg.ffn_size
    embed = (cfg.src_vocab_size + cfg.tgt_vocab_size + sum(cfg.side_cardinalities)) * h
    attn = 4 * h * h + 2 * h
    ffn = 2 * h * f + f + h + 2 * h
    enc = cfg.n_layers_enc * (attn + ffn) + 2 * h
    dec = cfg.n_layers_dec * (2 * attn + ffn) + 2 * h
    return embed + enc + dec


def _check_side(cfg: ModelConfig, side_idx: np.ndarray) -> None:
    if side_idx.ndim != 2 or side_idx.shape[1] != len(cfg.side_cardinalities):
        raise ValidationError(
            f"side variables must be (batch, {len(cfg.side_cardinalities)}), got {side_idx.shape}"
        )
    for j, card in enumerate(cfg.side_cardinalities):
        col = side_idx[:, j]
        if col.size and (col.min() < 0 or col.max() >= card):
            raise ValidationError(f"side variable {j} outside [0, {card})")


def _pad_bias(ids: np.ndarray, dtype: np.dtype) -> np.ndarray:
    """(batch, 1, 1, len) additive bias hiding PAD keys from attention."""
    return np.where(ids == PAD_ID, _MASK_BIAS, 0.0).astype(dtype)[:, None, None, :]


def _causal_bias(length: int, dtype: np.dtype) -> np.ndarray:
    """(1, 1, len, len) additive bias hiding future positions."""
    upper = np.triu(np.full((length, length), _MASK_BIAS), k=1)
    return upper.astype(dtype)[None, None, :, :]


def _attention(
    params: dict[str, Tensor],
    prefix: str,
    x_q: Tensor,
    x_kv: Tensor,
    bias: np.ndarray,
    cfg: ModelConfig,
    train: bool,
    source: DropoutSource | None,
) -> Tensor:
    batch, t_q = x_q.shape[0], x_q.shape[1]
    t_k = x_kv.shape[1]
    heads, dim = cfg.n_heads, cfg.hidden_size // cfg.n_heads

    def heads_first(t: Tensor, length: int) -> Tensor:
        return transpose(reshape(t, (batch, length, heads, dim)), (0, 2, 1, 3))

    q = heads_first(matmul(x_q, params[f"{prefix}.wq"]), t_q)
    k = heads_first(matmul(x_kv, params[f"{prefix}.wk"]), t_k)
    v = heads_first(matmul(x_kv, params[f"{prefix}.wv"]), t_k)
    q = mul(q, float(dim) ** -0.5)
    scores = add(matmul(q, transpose(k, (0, 1, 3, 2))), Tensor(bias))
    weights = dropout(softmax(scores), cfg.attention_dropout, train, source)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (batch, t_q, cfg.hidden_size))
    return matmul(ctx, params[f"{prefix}.wo"])


def _ffn(
    params: dict[str, Tensor],
    prefix: str,
    x: Tensor,
    cfg: ModelConfig,
    train: bool,
    source: DropoutSource | None,
) -> Tensor:
    h = relu(add(matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    h = dropout(h, cfg.relu_dropout, train, source)
    return add(matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _normed(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def embed_source(
    model: TransformerModel,
    src_ids: np.ndarray,
    side_idx: np.ndarray,
    train: bool = False,
    source: DropoutSource | None = None,
) -> Tensor:
    """Token embedding * sqrt(h) + positions + broadcast side-variable sum.

    The side sum lands after the positional term; addition commutes, so the
    ordering is cosmetic.
    """
    cfg = model.config
    params = model.parameters
    src_ids = np.asarray(src_ids)
    side_idx = np.asarray(side_idx)
    if src_ids.ndim != 2:
        raise ValidationError(f"src_ids must be (batch, len), got {src_ids.shape}")
    if src_ids.shape[1] > cfg.max_src_len:
        raise ValidationError(f"source length {src_ids.shape[1]} exceeds max {cfg.max_src_len}")
    _check_side(cfg, side_idx)
    x = mul(embedding_lookup(params["src_embed"], src_ids), float(cfg.hidden_size) ** 0.5)
    x = add(x, Tensor(model.pos_src[: src_ids.shape[1]]))
    cond = embedding_lookup(params["side_embed_0"], side_idx[:, 0])
    for j in range(1, len(cfg.side_cardinalities)):
        cond = add(cond, embedding_lookup(params[f"side_embed_{j}"], side_idx[:, j]))
    x = add(x, reshape(cond, (side_idx.shape[0], 1, cfg.hidden_size)))
    return dropout(x, cfg.layer_postprocess_dropout, train, source)


def encode_source(
    model: TransformerModel,
    src_ids: np.ndarray,
    side_idx: np.ndarray,
    train: bool = False,
    source: DropoutSource | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Run the encoder stack; returns (memory, source padding bias)."""
    cfg = model.config
    params = model.parameters
    src_ids = np.asarray(src_ids)
    x = embed_source(model, src_ids, side_idx, train, source)
    src_bias = _pad_bias(src_ids, cfg.np_dtype)
    for i in range(cfg.n_layers_enc):
        y = _normed(params, f"enc{i}.attn_norm", x)
        y = _attention(params, f"enc{i}.attn", y, y, src_bias, cfg, train, source)
        x = add(x, dropout(y, cfg.layer_postprocess_dropout, train, source))
        y = _ffn(params, f"enc{i}.ffn", _normed(params, f"enc{i}.ffn_norm", x), cfg, train, source)
        x = add(x, dropout(y, cfg.layer_postprocess_dropout, train, source))
    return _normed(params, "enc.final_norm", x), src_bias


def decode_logits(
    model: TransformerModel,
    memory: Tensor,
    src_bias: np.ndarray,
    tgt_in_ids: np.ndarray,
    train: bool = False,
    source: DropoutSource | None = None,
) -> Tensor:
    """Decoder stack over a (batch, len) target prefix; returns logits."""
    cfg = model.config
    params = model.parameters
    tgt_in_ids = np.asarray(tgt_in_ids)
    if tgt_in_ids.ndim != 2:
        raise ValidationError(f"tgt_in_ids must be (batch, len), got {tgt_in_ids.shape}")
    batch, t = tgt_in_ids.shape
    if t > cfg.max_tgt_len:
        raise ValidationError(f"target length {t} exceeds max {cfg.max_tgt_len}")
    x = mul(embedding_lookup(params["tgt_embed"], tgt_in_ids), float(cfg.hidden_size) ** 0.5)
    x = add(x, Tensor(model.pos_tgt[:t]))
    x = dropout(x, cfg.layer_postprocess_dropout, train, source)
    self_bias = _causal_bias(t, cfg.np_dtype) + _pad_bias(tgt_in_ids, cfg.np_dtype)
    for i in range(cfg.n_layers_dec):
        y = _normed(params, f"dec{i}.self_norm", x)
        y = _attention(params, f"dec{i}.self_attn", y, y, self_bias, cfg, train, source)
        x = add(x, dropout(y, cfg.layer_postprocess_dropout, train, source))
        y = _normed(params, f"dec{i}.cross_norm", x)
        y = _attention(params, f"dec{i}.cross_attn", y, memory, src_bias, cfg, train, source)
        x = add(x, dropout(y, cfg.layer_postprocess_dropout, train, source))
        y = _ffn(params, f"dec{i}.ffn", _normed(params, f"dec{i}.ffn_norm", x), cfg, train, source)
        x = add(x, dropout(y, cfg.layer_postprocess_dropout, train, source))
    x = _normed(params, "dec.final_norm", x)
    return matmul(x, transpose(params["tgt_embed"], (1, 0)))


def forward(
    model: TransformerModel,
    src_ids: np.ndarray,
    side_idx: np.ndarray,
    tgt_in_ids: np.ndarray,
    train: bool = False,
    source: DropoutSource | None = None,
) -> Tensor:
    memory, src_bias = encode_source(model, src_ids, side_idx, train, source)
    return decode_logits(model, memory, src_bias, tgt_in_ids, train, source)


def sequence_loss(
    model: TransformerModel,
    src_ids: np.ndarray,
    side_idx: np.ndarray,
    tgt_ids: np.ndarray,
    train: bool = False,
    source: DropoutSource | None = None,
    label_smoothing: float | None = None,
) -> Tensor:
    """Teacher-forced mean cross-entropy over non-PAD target tokens.

    ``tgt_ids`` rows are BOS, tokens, EOS, PAD...; the decoder reads the
    row minus its last column and predicts the row minus its first.
    """
    tgt_ids = np.asarray(tgt_ids)
    if tgt_ids.ndim != 2 or tgt_ids.shape[0] == 0:
        raise ValidationError(f"target batch must be nonempty (batch, len), got {tgt_ids.shape}")
    if tgt_ids.shape[1] < 2:
        raise ValidationError("target rows need at least BOS and one more token")
    eps = model.config.label_smoothing if label_smoothing is None else label_smoothing
    dec_in = tgt_ids[:, :-1]
    targets = tgt_ids[:, 1:]
    logits = forward(model, src_ids, side_idx, dec_in, train, source)
    batch, t, vocab = logits.shape
    flat = reshape(logits, (batch * t, vocab))
    return cross_entropy(flat, targets.reshape(-1), ignore_id=PAD_ID, label_smoothing=eps)
