"""Transformer encoder-decoder shared by a text path and a conv speech frontend.

Both modalities feed the same encoder stack, decoder stack, and output
projection; only the entry differs (token embeddings vs two strided 1-D
convolutions over feature frames). Decoding is conditioned on a language
tag placed as the first decoder input. Layers are pre-norm with a final
layer norm on each stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .batching import FrameBatch, TargetBatch, TextBatch, make_target_batch
from .corpus import Vocab
from .tensor import NEG_FILL, ShapeError, Tensor

N_RESERVED = 5  # pad, bos, eos, <src>, <tgt>


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    frame_dim: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ffn: int = 128
    dropout_p: float = 0.1
    max_positions: int = 256
    conv_kernel: int = 5
    conv_stride: int = 2
    conv_padding: int = 2
    conv_layers: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.vocab_size <= N_RESERVED:
            raise ModelError("vocab must contain pad/bos/eos and the language tags")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ModelError(f"dropout_p {self.dropout_p} outside [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def conv_out_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def frontend_out_length(cfg: ModelConfig, length: int) -> int:
    for _ in range(cfg.conv_layers):
        length = conv_out_length(length, cfg.conv_kernel, cfg.conv_stride, cfg.conv_padding)
    return length


class ModelParams:
    """Named learnable tensors; iteration order is creation order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def clear_grads(self) -> None:
        for p in self.tensors.values():
            p.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams({k: T.parameter(v.data.copy()) for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for p in self.tensors.values())


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Deterministic init: scaled-uniform matrices, zero biases, unit LN gains."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    tensors: dict[str, Tensor] = {}

    def uniform(name, shape, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = T.parameter(rng.uniform(-limit, limit, size=shape))

    def zeros(name, shape):
        tensors[name] = T.parameter(np.zeros(shape))

    def ln(prefix):
        tensors[f"{prefix}.g"] = T.parameter(np.ones(cfg.d_model))
        zeros(f"{prefix}.b", (cfg.d_model,))

    d, f, k = cfg.d_model, cfg.d_ffn, cfg.conv_kernel
    for i in range(cfg.conv_layers):
        cin = cfg.frame_dim if i == 0 else d
        uniform(f"conv.{i}.w", (k, cin, d), k * cin, k * d)
        zeros(f"conv.{i}.b", (d,))
    uniform("embed.tok", (cfg.vocab_size, d), cfg.vocab_size, d)

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            uniform(f"{prefix}.{w}", (d, d), d, d)

    for i in range(cfg.n_enc_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.attn")
        ln(f"enc.{i}.ln2")
        uniform(f"enc.{i}.ffn.w1", (d, f), d, f)
        uniform(f"enc.{i}.ffn.w2", (f, d), f, d)
    ln("enc.ln")
    for i in range(cfg.n_dec_layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.attn")
        ln(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3")
        uniform(f"dec.{i}.ffn.w1", (d, f), d, f)
        uniform(f"dec.{i}.ffn.w2", (f, d), f, d)
    ln("dec.ln")
    uniform("out.w", (d, cfg.vocab_size), d, cfg.vocab_size)
    return ModelParams(tensors)


@dataclass
class EncoderOutput:
    states: Tensor      # [B, T, d_model]
    mask: np.ndarray    # [B, T] bool, True = valid position


_POS_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_table(max_positions: int, d_model: int) -> np.ndarray:
    key = (max_positions, d_model)
    pe = _POS_CACHE.get(key)
    if pe is None:
        pos = np.arange(max_positions)[:, None]
        dim = np.arange(0, d_model, 2)[None, :]
        angle = pos / np.power(10000.0, dim / d_model)
        pe = np.zeros((max_positions, d_model))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle)
        _POS_CACHE[key] = pe
    return pe


def _with_positions(cfg: ModelConfig, h: Tensor, rng) -> Tensor:
    b, t, d = h.shape
    if t > cfg.max_positions:
        raise ModelError(f"sequence length {t} exceeds max_positions {cfg.max_positions}")
    pe = positional_table(cfg.max_positions, cfg.d_model)
    h = T.add(h, T.constant(np.broadcast_to(pe[:t], (b, t, d))))
    if rng is not None and cfg.dropout_p > 0:
        h = T.dropout(h, cfg.dropout_p, rng)
    return h


def _split_heads(x: Tensor, b: int, t: int, nh: int, dh: int) -> Tensor:
    x = T.reshape(x, (b, t, nh, dh))
    x = T.transpose(x, 1, 2)
    return T.reshape(x, (b * nh, t, dh))


def _attention(p: ModelParams, prefix: str, cfg: ModelConfig,
               x_q: Tensor, x_kv: Tensor, blocked: np.ndarray, rng) -> Tensor:
    """Multi-head attention with heads folded into the batch axis."""
    b, tq, d = x_q.shape
    tk = x_kv.shape[1]
    nh = cfg.n_heads
    dh = d // nh
    q = _split_heads(T.matmul(x_q, p[f"{prefix}.wq"]), b, tq, nh, dh)
    k = _split_heads(T.matmul(x_kv, p[f"{prefix}.wk"]), b, tk, nh, dh)
    v = _split_heads(T.matmul(x_kv, p[f"{prefix}.wv"]), b, tk, nh, dh)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    blocked_h = np.broadcast_to(blocked[:, None], (b, nh, tq, tk)).reshape(b * nh, tq, tk)
    scores = T.masked_fill(scores, blocked_h, NEG_FILL)
    attn = T.softmax(scores, axis=-1)
    if rng is not None and cfg.dropout_p > 0:
        attn = T.dropout(attn, cfg.dropout_p, rng)
    ctx = T.matmul(attn, v)  # [b*nh, tq, dh]
    ctx = T.reshape(T.transpose(T.reshape(ctx, (b, nh, tq, dh)), 1, 2), (b, tq, d))
    return T.matmul(ctx, p[f"{prefix}.wo"])


def _ffn(p: ModelParams, prefix: str, h: Tensor) -> Tensor:
    return T.matmul(T.relu(T.matmul(h, p[f"{prefix}.w1"])), p[f"{prefix}.w2"])


def _residual_dropout(cfg: ModelConfig, h: Tensor, rng) -> Tensor:
    if rng is not None and cfg.dropout_p > 0:
        return T.dropout(h, cfg.dropout_p, rng)
    return h


def _ln(p: ModelParams, prefix: str, h: Tensor) -> Tensor:
    return T.layer_norm(h, p[f"{prefix}.g"], p[f"{prefix}.b"])


def speech_frontend(p: ModelParams, cfg: ModelConfig, batch: FrameBatch):
    """Two strided conv+relu layers; returns states and the subsampled mask."""
    lengths = batch.mask.sum(axis=1)
    if lengths.min() < cfg.conv_kernel:
        raise ModelError(
            f"speech input of {int(lengths.min())} frames is shorter than "
            f"the kernel ({cfg.conv_kernel})"
        )
    h = T.constant(batch.frames)
    for i in range(cfg.conv_layers):
        h = T.conv1d(h, p[f"conv.{i}.w"], p[f"conv.{i}.b"],
                     stride=cfg.conv_stride, padding=cfg.conv_padding)
        h = T.relu(h)
        lengths = np.array([
            conv_out_length(int(n), cfg.conv_kernel, cfg.conv_stride, cfg.conv_padding)
            for n in lengths
        ])
        # zero positions past each item's true length so the next layer sees
        # exactly the zero padding a solo (unbatched) run would see
        b, t_out, d = h.shape
        mask = np.arange(t_out)[None, :] < lengths[:, None]
        h = T.masked_fill(h, np.broadcast_to(~mask[:, :, None], (b, t_out, d)), 0.0)
    return h, mask


def _encoder_stack(p: ModelParams, cfg: ModelConfig, h: Tensor,
                   valid: np.ndarray, rng) -> Tensor:
    b, t, _ = h.shape
    blocked = np.broadcast_to(~valid[:, None, :], (b, t, t))
    for i in range(cfg.n_enc_layers):
        x = _ln(p, f"enc.{i}.ln1", h)
        a = _attention(p, f"enc.{i}.attn", cfg, x, x, blocked, rng)
        h = T.add(h, _residual_dropout(cfg, a, rng))
        fo = _ffn(p, f"enc.{i}.ffn", _ln(p, f"enc.{i}.ln2", h))
        h = T.add(h, _residual_dropout(cfg, fo, rng))
    return _ln(p, "enc.ln", h)


def encode(p: ModelParams, cfg: ModelConfig, src: TextBatch | FrameBatch,
           rng: np.random.Generator | None = None) -> EncoderOutput:
    """Run the shared encoder over a text or speech batch (rng=None: eval mode)."""
    if isinstance(src, TextBatch):
        if src.tokens.size == 0:
            raise ModelError("empty text input")
        if src.tokens.min() < 0 or src.tokens.max() >= cfg.vocab_size:
            raise ModelError(
                f"unknown token id {int(src.tokens.max())} for vocab of {cfg.vocab_size}"
            )
        h = T.scale(T.embedding_lookup(p["embed.tok"], src.tokens), math.sqrt(cfg.d_model))
        mask = src.mask
    elif isinstance(src, FrameBatch):
        h, mask = speech_frontend(p, cfg, src)
    else:
        raise ModelError(f"unsupported encoder input {type(src).__name__}")
    h = _with_positions(cfg, h, rng)
    states = _encoder_stack(p, cfg, h, mask, rng)
    return EncoderOutput(states=states, mask=mask)


def decode_logprobs(p: ModelParams, cfg: ModelConfig, enc: EncoderOutput,
                    target: TargetBatch, rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced next-token log-probabilities, one row per target position."""
    b, t = target.dec_in.shape
    if t > cfg.max_positions:
        raise ModelError(f"target length {t} exceeds max_positions {cfg.max_positions}")
    if target.dec_in.min() < 0 or target.dec_in.max() >= cfg.vocab_size:
        raise ModelError("unknown token id in decoder input")
    h = T.scale(T.embedding_lookup(p["embed.tok"], target.dec_in), math.sqrt(cfg.d_model))
    h = _with_positions(cfg, h, rng)
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)
    self_blocked = causal[None] | ~target.mask[:, None, :]
    ts = enc.states.shape[1]
    cross_blocked = np.broadcast_to(~enc.mask[:, None, :], (b, t, ts))
    for i in range(cfg.n_dec_layers):
        x = _ln(p, f"dec.{i}.ln1", h)
        a = _attention(p, f"dec.{i}.attn", cfg, x, x, self_blocked, rng)
        h = T.add(h, _residual_dropout(cfg, a, rng))
        c = _attention(p, f"dec.{i}.cross", cfg, _ln(p, f"dec.{i}.ln2", h),
                       enc.states, cross_blocked, rng)
        h = T.add(h, _residual_dropout(cfg, c, rng))
        fo = _ffn(p, f"dec.{i}.ffn", _ln(p, f"dec.{i}.ln3", h))
        h = T.add(h, _residual_dropout(cfg, fo, rng))
    h = _ln(p, "dec.ln", h)
    logits = T.matmul(h, p["out.w"])
    return T.log_softmax(logits, axis=-1)


def forward_teacher_forced(p: ModelParams, cfg: ModelConfig, enc: EncoderOutput,
                           targets: list[np.ndarray], lang_tag: int, vocab: Vocab,
                           rng: np.random.Generator | None = None) -> Tensor:
    """Convenience wrapper: build the tag-prefixed teacher-forcing batch and decode."""
    batch = make_target_batch(targets, lang_tag, vocab)
    return decode_logprobs(p, cfg, enc, batch, rng)


def pooled_representation(enc: EncoderOutput) -> Tensor:
    """Elementwise max over valid time positions; [B, d_model]."""
    if not enc.mask.any(axis=1).all():
        raise ModelError("pooled_representation: an item has no valid positions")
    b, t, d = enc.states.shape
    blocked = np.broadcast_to(~enc.mask[:, :, None], (b, t, d))
    guarded = T.masked_fill(enc.states, blocked, -1e30)
    return T.max_over_axis(guarded, axis=1)
