"""Desk-scale encoder-decoder Transformer.

The encoder is a pre-norm Transformer stack over feature frames with a
configurable self-attention mask.  Under a block-diagonal mask every block
is encoded independently, which makes the output of an all-zero block a
constant that can be precomputed (the silence cache).

The decoder runs incrementally against a :class:`DecoderKVCache`.  All
decoder reductions are written as contiguous row-wise sums so that a row's
result does not depend on how many other rows share the call; this keeps
batched verification in the speculative decoder bit-identical to stepwise
greedy decoding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from fractions import Fraction
from functools import cached_property

import numpy as np

from ._binary import fnv1a64, tensor_table_bytes
from .errors import (
    CapacityError,
    ConfigError,
    ShapeError,
    StaleCacheError,
    UnsupportedMaskError,
)
from .masks import AttentionMaskSpec, MaskKind, build_mask, check_mask, count_attention_score_entries

F32 = np.float32
LN_EPS = F32(1e-5)
POS_ENCODINGS = ("absolute", "block")


@dataclass(frozen=True)
class ModelConfig:
    """Model hyperparameters.

    The last two vocabulary ids are reserved: ``vocab_size - 2`` is the
    start-of-transcript token and ``vocab_size - 1`` is end-of-transcript.
    ``pos_encoding="block"`` restarts encoder positions at every mask block,
    making block-diagonal encoding translation invariant across blocks.
    """

    d_model: int = 32
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    vocab_size: int = 64
    n_audio_frames: int = 60
    frames_per_second: Fraction = Fraction(2)
    seed: int = 0
    d_feat: int | None = None
    d_ff: int | None = None
    n_text_ctx: int = 64
    pos_encoding: str = "absolute"

    def __post_init__(self):
        fps = Fraction(self.frames_per_second)
        object.__setattr__(self, "frames_per_second", fps)
        if self.d_feat is None:
            object.__setattr__(self, "d_feat", self.d_model)
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers", "vocab_size",
                     "n_audio_frames", "d_feat", "d_ff", "n_text_ctx"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must leave room for at least one text token")
        if fps <= 0:
            raise ConfigError("frames_per_second must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        if self.pos_encoding not in POS_ENCODINGS:
            raise ConfigError(f"pos_encoding must be one of {POS_ENCODINGS}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def sot_id(self) -> int:
        return self.vocab_size - 2

    @property
    def eot_id(self) -> int:
        return self.vocab_size - 1

    @property
    def n_text_tokens(self) -> int:
        return self.vocab_size - 2

    @property
    def window_seconds(self) -> Fraction:
        return Fraction(self.n_audio_frames) / self.frames_per_second

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["frames_per_second"] = str(self.frames_per_second)
        d["seed"] = int(self.seed)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["frames_per_second"] = Fraction(d["frames_per_second"])
        return cls(**d)

    def to_json(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def tensor_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered ``(name, shape, role)`` for every parameter tensor.

    Matrices are stored ``(in, out)`` so that a linear layer is ``x @ W + b``.
    The output head is untied from the token embedding: a tied head on random
    weights makes every token predict itself.
    """
    d, ff, f = config.d_model, config.d_ff, config.d_feat
    out: list[tuple[str, tuple[int, ...], str]] = []

    def attn(prefix):
        for p in ("q", "k", "v", "o"):
            out.append((f"{prefix}.w{p}", (d, d), "matrix"))
            out.append((f"{prefix}.b{p}", (d,), "bias"))

    def ln(prefix):
        out.append((f"{prefix}.g", (d,), "ln_gain"))
        out.append((f"{prefix}.b", (d,), "ln_bias"))

    def mlp(prefix):
        out.append((f"{prefix}.w1", (d, ff), "matrix"))
        out.append((f"{prefix}.b1", (ff,), "bias"))
        out.append((f"{prefix}.w2", (ff, d), "matrix"))
        out.append((f"{prefix}.b2", (d,), "bias"))

    out.append(("enc.in.w", (f, d), "matrix"))
    out.append(("enc.in.b", (d,), "bias"))
    for i in range(config.n_enc_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.attn")
        ln(f"enc.{i}.ln2")
        mlp(f"enc.{i}.mlp")
    ln("enc.ln_post")
    out.append(("dec.tok_emb", (config.vocab_size, d), "embedding"))
    out.append(("dec.pos_emb", (config.n_text_ctx, d), "pos_embedding"))
    for i in range(config.n_dec_layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3")
        mlp(f"dec.{i}.mlp")
    ln("dec.ln_post")
    out.append(("dec.head", (d, config.vocab_size), "matrix"))
    return out


@dataclass(frozen=True, eq=False)
class ModelWeights:
    """Immutable parameter set; arrays are read-only float32."""

    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        frozen = {}
        for name, shape, _ in tensor_layout(self.config):
            if name not in self.tensors:
                raise ShapeError(f"missing tensor {name}")
            arr = np.array(self.tensors[name], dtype=F32, order="C", copy=True)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            arr.flags.writeable = False
            frozen[name] = arr
        extra = set(self.tensors) - set(frozen)
        if extra:
            raise ShapeError(f"unexpected tensors: {sorted(extra)}")
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @cached_property
    def fingerprint(self) -> int:
        """64-bit FNV-1a over the serialized tensor table."""
        return fnv1a64(tensor_table_bytes(self.tensors))

    @cached_property
    def _transposed(self) -> dict[str, np.ndarray]:
        # (out, in) copies for the row-wise decoder kernels
        return {n: np.ascontiguousarray(a.T) for n, a in self.tensors.items() if a.ndim == 2}

    def t(self, name: str) -> np.ndarray:
        return self._transposed[name]

    def replace(self, **tensors: np.ndarray) -> "ModelWeights":
        merged = dict(self.tensors)
        merged.update(tensors)
        return ModelWeights(self.config, merged)


_INIT_BOUNDS = {
    "bias": 0.1,
    "ln_gain": 0.1,
    "ln_bias": 0.1,
    "embedding": 1.0,
    "pos_embedding": 0.5,
}


def init_weights(config: ModelConfig) -> ModelWeights:
    """Draw every tensor from ``numpy.random.default_rng(config.seed)`` in layout order.

    Distributions per role: matrices U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    biases and layer-norm shifts U(-0.1, 0.1); layer-norm gains 1 + U(-0.1, 0.1);
    token embeddings U(-1, 1); decoder position embeddings U(-0.5, 0.5).
    """
    rng = np.random.default_rng(int(config.seed))
    tensors = {}
    for name, shape, role in tensor_layout(config):
        bound = 1.0 / math.sqrt(shape[0]) if role == "matrix" else _INIT_BOUNDS[role]
        arr = rng.uniform(-bound, bound, size=shape)
        if role == "ln_gain":
            arr += 1.0
        tensors[name] = arr.astype(F32)
    return ModelWeights(config, tensors)


# ---------------------------------------------------------------------------
# numeric kernels
# ---------------------------------------------------------------------------


def layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + LN_EPS) * gain + shift


_GELU_C = F32(math.sqrt(2.0 / math.pi))


def gelu(x: np.ndarray) -> np.ndarray:
    return F32(0.5) * x * (F32(1.0) + np.tanh(_GELU_C * (x + F32(0.044715) * x * x * x)))


def masked_softmax(scores: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis restricted to entries where ``mask`` is True.

    Masked entries get probability 0 and a row with no unmasked entry is all
    zeros.
    """
    if mask is None:
        m = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - m)
        return e / e.sum(axis=-1, keepdims=True)
    mask = np.broadcast_to(mask, scores.shape)
    neg = np.where(mask, scores, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0).astype(scores.dtype)
    e = np.where(mask, np.exp(np.where(mask, scores - m, 0)), 0).astype(scores.dtype)
    denom = e.sum(axis=-1, keepdims=True)
    return np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)


def sinusoidal_positions(positions: np.ndarray, d: int) -> np.ndarray:
    half = d // 2
    inv = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    out = np.zeros((len(ang), d))
    out[:, :half] = np.sin(ang)
    out[:, half : 2 * half] = np.cos(ang)
    return out.astype(F32)


def _rowlin(x: np.ndarray, w_t: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    # w_t is (out, in); each output is a contiguous reduction over `in`
    y = (x[..., None, :] * w_t).sum(axis=-1)
    return y if b is None else y + b


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EncoderOutput:
    hidden: np.ndarray
    mask: AttentionMaskSpec
    blocks_computed: int
    blocks_cached: int = 0
    attention_score_entries: int = 0

    def __post_init__(self):
        self.hidden.flags.writeable = False


def _encoder_stack(weights: ModelWeights, x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    cfg = weights.config
    n, h, hd = x.shape[0], cfg.n_heads, cfg.head_dim
    scale = F32(1.0 / math.sqrt(hd))
    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        y = layer_norm(x, weights[f"{p}.ln1.g"], weights[f"{p}.ln1.b"])
        q = (y @ weights[f"{p}.attn.wq"] + weights[f"{p}.attn.bq"]).reshape(n, h, hd).transpose(1, 0, 2)
        k = (y @ weights[f"{p}.attn.wk"] + weights[f"{p}.attn.bk"]).reshape(n, h, hd).transpose(1, 0, 2)
        v = (y @ weights[f"{p}.attn.wv"] + weights[f"{p}.attn.bv"]).reshape(n, h, hd).transpose(1, 0, 2)
        probs = masked_softmax((q @ k.transpose(0, 2, 1)) * scale, mask)
        att = (probs @ v).transpose(1, 0, 2).reshape(n, cfg.d_model)
        x = x + (att @ weights[f"{p}.attn.wo"] + weights[f"{p}.attn.bo"])
        y = layer_norm(x, weights[f"{p}.ln2.g"], weights[f"{p}.ln2.b"])
        y = gelu(y @ weights[f"{p}.mlp.w1"] + weights[f"{p}.mlp.b1"])
        x = x + (y @ weights[f"{p}.mlp.w2"] + weights[f"{p}.mlp.b2"])
    return layer_norm(x, weights["enc.ln_post.g"], weights["enc.ln_post.b"])


def _embed_frames(weights: ModelWeights, features: np.ndarray, positions: np.ndarray) -> np.ndarray:
    x = features @ weights["enc.in.w"] + weights["enc.in.b"]
    return x + sinusoidal_positions(positions, weights.config.d_model)


def _encode_block(weights: ModelWeights, block_features: np.ndarray, block_index: int) -> np.ndarray:
    size = block_features.shape[0]
    pos = np.arange(size)
    if weights.config.pos_encoding == "absolute":
        pos = pos + block_index * size
    return _encoder_stack(weights, _embed_frames(weights, block_features, pos), None)


def _check_features(weights: ModelWeights, features: np.ndarray) -> np.ndarray:
    cfg = weights.config
    features = np.asarray(features)
    if features.shape != (cfg.n_audio_frames, cfg.d_feat):
        raise ShapeError(f"features must have shape {(cfg.n_audio_frames, cfg.d_feat)}, got {features.shape}")
    return np.ascontiguousarray(features, dtype=F32)


def encode(weights: ModelWeights, features: np.ndarray, mask_spec: AttentionMaskSpec) -> EncoderOutput:
    """Run the encoder over a full ``(n_audio_frames, d_feat)`` window."""
    features = _check_features(weights, features)
    n = features.shape[0]
    check_mask(mask_spec, n)
    entries = count_attention_score_entries(mask_spec, n)
    if mask_spec.kind is MaskKind.BLOCK_DIAGONAL:
        b = mask_spec.block
        blocks = [_encode_block(weights, features[j * b : (j + 1) * b], j) for j in range(n // b)]
        return EncoderOutput(np.concatenate(blocks), mask_spec, len(blocks), 0, entries)
    x = _embed_frames(weights, features, np.arange(n))
    mask = None if mask_spec.kind is MaskKind.FULL else build_mask(mask_spec, n)
    return EncoderOutput(_encoder_stack(weights, x, mask), mask_spec, 1, 0, entries)


def encode_masked(weights: ModelWeights, features: np.ndarray, mask_spec: AttentionMaskSpec) -> np.ndarray:
    """Encode the whole window in one pass using the realized boolean mask.

    Equal (up to float rounding) to :func:`encode`; kept as an independent
    route for block-diagonal masks, which :func:`encode` runs block by block.
    """
    features = _check_features(weights, features)
    n = features.shape[0]
    x = _embed_frames(weights, features, _positions_for(weights.config, mask_spec, n))
    return _encoder_stack(weights, x, build_mask(mask_spec, n))


def _positions_for(cfg: ModelConfig, spec: AttentionMaskSpec, n: int) -> np.ndarray:
    pos = np.arange(n)
    if cfg.pos_encoding == "block" and spec.kind is MaskKind.BLOCK_DIAGONAL:
        pos = pos % spec.block
    return pos


@dataclass(frozen=True, eq=False)
class SilenceCache:
    """Encoder output of an all-zero block, one entry per block index."""

    mask: AttentionMaskSpec
    entries: dict[int, np.ndarray] = field(repr=False)
    fingerprint: int = 0

    @property
    def block_size(self) -> int:
        return self.mask.block


def build_silence_cache(weights: ModelWeights, mask_spec: AttentionMaskSpec) -> SilenceCache:
    if mask_spec.kind is not MaskKind.BLOCK_DIAGONAL:
        raise UnsupportedMaskError(
            f"silence caching needs a block-diagonal mask; {mask_spec.label} lets blocks see each other"
        )
    cfg = weights.config
    check_mask(mask_spec, cfg.n_audio_frames)
    zeros = np.zeros((mask_spec.block, cfg.d_feat), dtype=F32)
    entries = {}
    for j in range(cfg.n_audio_frames // mask_spec.block):
        block = _encode_block(weights, zeros, j)
        block.flags.writeable = False
        entries[j] = block
    return SilenceCache(mask_spec, entries, weights.fingerprint)


def encode_with_cache(
    weights: ModelWeights, features: np.ndarray, mask_spec: AttentionMaskSpec, cache: SilenceCache
) -> EncoderOutput:
    """Like :func:`encode`, but all-zero blocks are copied from ``cache``."""
    if cache.fingerprint != weights.fingerprint:
        raise StaleCacheError("silence cache was built for different weights")
    if cache.mask != mask_spec:
        raise StaleCacheError(f"silence cache was built for mask {cache.mask.label}, not {mask_spec.label}")
    features = _check_features(weights, features)
    b = mask_spec.block
    out, computed = [], 0
    for j in range(features.shape[0] // b):
        blk = features[j * b : (j + 1) * b]
        if np.any(blk):
            out.append(_encode_block(weights, blk, j))
            computed += 1
        else:
            out.append(cache.entries[j])
    n_blocks = len(out)
    return EncoderOutput(np.concatenate(out), mask_spec, computed, n_blocks - computed, computed * b * b)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


class DecoderKVCache:
    """Per-layer self-attention keys/values, updated in place.

    Positions ``< length`` are never rewritten; :meth:`truncate` only moves
    ``length`` back so later appends reuse the tail.
    """

    def __init__(self, n_layers: int, capacity: int, d_model: int):
        self.keys = np.zeros((n_layers, capacity, d_model), dtype=F32)
        self.values = np.zeros((n_layers, capacity, d_model), dtype=F32)
        self.length = 0
        self.last_hidden: np.ndarray | None = None
        self._cross_src: np.ndarray | None = None
        self._cross: tuple[np.ndarray, np.ndarray] | None = None

    @classmethod
    def for_config(cls, config: ModelConfig, capacity: int | None = None) -> "DecoderKVCache":
        return cls(config.n_dec_layers, config.n_text_ctx if capacity is None else capacity, config.d_model)

    @property
    def capacity(self) -> int:
        return self.keys.shape[1]

    def append(self, keys: np.ndarray, values: np.ndarray) -> None:
        """Write ``(n_layers, T, d_model)`` new positions after the current end."""
        t = keys.shape[1]
        if self.length + t > self.capacity:
            raise CapacityError(f"cache full: {self.length} + {t} > {self.capacity}")
        self.keys[:, self.length : self.length + t] = keys
        self.values[:, self.length : self.length + t] = values
        self.length += t

    def truncate(self, length: int) -> None:
        if not 0 <= length <= self.length:
            raise ValueError(f"cannot truncate cache of length {self.length} to {length}")
        self.length = length

    def copy(self) -> "DecoderKVCache":
        other = DecoderKVCache.__new__(DecoderKVCache)
        other.keys = self.keys.copy()
        other.values = self.values.copy()
        other.length = self.length
        other.last_hidden = None if self.last_hidden is None else self.last_hidden.copy()
        other._cross_src = self._cross_src
        other._cross = self._cross
        return other

    def cross(self, weights: ModelWeights, encoder_output: EncoderOutput) -> tuple[np.ndarray, np.ndarray]:
        """Cross-attention keys ``(L, H, N, hd)`` and transposed values ``(L, H, hd, N)``."""
        if self._cross_src is not encoder_output.hidden:
            self._cross = _cross_kv(weights, encoder_output.hidden)
            self._cross_src = encoder_output.hidden
        return self._cross


def _cross_kv(weights: ModelWeights, hidden: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cfg = weights.config
    n, h, hd = hidden.shape[0], cfg.n_heads, cfg.head_dim
    ks, vs = [], []
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}.cross"
        k = _rowlin(hidden, weights.t(f"{p}.wk"), weights[f"{p}.bk"]).reshape(n, h, hd)
        v = _rowlin(hidden, weights.t(f"{p}.wv"), weights[f"{p}.bv"]).reshape(n, h, hd)
        ks.append(np.ascontiguousarray(k.transpose(1, 0, 2)))
        vs.append(np.ascontiguousarray(v.transpose(1, 2, 0)))
    return np.stack(ks), np.stack(vs)


@dataclass
class DecoderPass:
    """Result of running new tokens through the decoder against a cache prefix."""

    logits: np.ndarray  # (B, T, vocab)
    hidden: np.ndarray  # (B, T, d_model), final layer after the output norm
    keys: np.ndarray  # (B, n_layers, T, d_model)
    values: np.ndarray


def decoder_pass(
    weights: ModelWeights, tokens: np.ndarray, cache: DecoderKVCache, encoder_output: EncoderOutput
) -> DecoderPass:
    """Run a ``(B, T)`` batch of token continuations without touching the cache.

    Every batch row attends to the shared cached prefix followed by its own
    tokens (causally).  Row results do not depend on the batch size.
    """
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ShapeError("tokens must be a (batch, time) array")
    nb, nt = tokens.shape
    start = cache.length
    if start + nt > min(cache.capacity, cfg.n_text_ctx):
        raise CapacityError(f"cache full: {start} + {nt} > {min(cache.capacity, cfg.n_text_ctx)}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("token id out of range")
    h, hd, d = cfg.n_heads, cfg.head_dim, cfg.d_model
    scale = F32(1.0 / math.sqrt(hd))
    cross_k, cross_v = cache.cross(weights, encoder_output)

    x = weights["dec.tok_emb"][tokens] + weights["dec.pos_emb"][start : start + nt]
    new_k = np.empty((nb, cfg.n_dec_layers, nt, d), dtype=F32)
    new_v = np.empty_like(new_k)
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}"
        y = layer_norm(x, weights[f"{p}.ln1.g"], weights[f"{p}.ln1.b"])
        q = _rowlin(y, weights.t(f"{p}.self.wq"), weights[f"{p}.self.bq"])
        k = _rowlin(y, weights.t(f"{p}.self.wk"), weights[f"{p}.self.bk"])
        v = _rowlin(y, weights.t(f"{p}.self.wv"), weights[f"{p}.self.bv"])
        new_k[:, i], new_v[:, i] = k, v
        att = np.empty((nb, nt, d), dtype=F32)
        for b in range(nb):
            keys = np.concatenate([cache.keys[i, :start], k[b]]).reshape(start + nt, h, hd)
            vals = np.concatenate([cache.values[i, :start], v[b]]).reshape(start + nt, h, hd)
            keys = np.ascontiguousarray(keys.transpose(1, 0, 2))
            vals = np.ascontiguousarray(vals.transpose(1, 2, 0))
            qb = q[b].reshape(nt, h, 1, hd)
            for t in range(nt):
                n_vis = start + t + 1
                s = (keys[:, :n_vis] * qb[t]).sum(axis=-1) * scale
                pr = masked_softmax(s)
                att[b, t] = (vals[:, :, :n_vis] * pr[:, None, :]).sum(axis=-1).reshape(d)
        x = x + _rowlin(att, weights.t(f"{p}.self.wo"), weights[f"{p}.self.bo"])

        y = layer_norm(x, weights[f"{p}.ln2.g"], weights[f"{p}.ln2.b"])
        qc = _rowlin(y, weights.t(f"{p}.cross.wq"), weights[f"{p}.cross.bq"]).reshape(nb, nt, h, 1, hd)
        s = (qc * cross_k[i]).sum(axis=-1) * scale
        pr = masked_softmax(s)
        att = (cross_v[i] * pr[..., None, :]).sum(axis=-1).reshape(nb, nt, d)
        x = x + _rowlin(att, weights.t(f"{p}.cross.wo"), weights[f"{p}.cross.bo"])

        y = layer_norm(x, weights[f"{p}.ln3.g"], weights[f"{p}.ln3.b"])
        y = gelu(_rowlin(y, weights.t(f"{p}.mlp.w1"), weights[f"{p}.mlp.b1"]))
        x = x + _rowlin(y, weights.t(f"{p}.mlp.w2"), weights[f"{p}.mlp.b2"])

    hidden = layer_norm(x, weights["dec.ln_post.g"], weights["dec.ln_post.b"])
    logits = _rowlin(hidden, weights.t("dec.head"))
    return DecoderPass(logits, hidden, new_k, new_v)


def decoder_forward(
    weights: ModelWeights, tokens, cache: DecoderKVCache, encoder_output: EncoderOutput
) -> np.ndarray:
    """Feed a single sequence of tokens, appending them to ``cache``; returns ``(T, vocab)`` logits."""
    tokens = np.atleast_1d(np.asarray(tokens, dtype=np.int64))
    res = decoder_pass(weights, tokens[None, :], cache, encoder_output)
    cache.append(res.keys[0], res.values[0])
    cache.last_hidden = res.hidden[0, -1].copy()
    return res.logits[0]


def decode_step(weights: ModelWeights, token_id: int, kv_cache: DecoderKVCache, encoder_output: EncoderOutput) -> np.ndarray:
    """Append one token to the cache and return next-token logits."""
    if kv_cache.length >= kv_cache.capacity:
        raise CapacityError(f"cache full at {kv_cache.length} positions")
    return decoder_forward(weights, [token_id], kv_cache, encoder_output)[0]


def decode_full(weights: ModelWeights, tokens, encoder_output: EncoderOutput) -> np.ndarray:
    """Logits for every position of ``tokens`` computed from an empty cache in one pass."""
    tokens = np.atleast_1d(np.asarray(tokens, dtype=np.int64))
    cache = DecoderKVCache.for_config(weights.config, max(len(tokens), 1))
    return decoder_pass(weights, tokens[None, :], cache, encoder_output).logits[0]


def greedy_decode(
    weights: ModelWeights,
    encoder_output: EncoderOutput,
    max_tokens: int,
    cache: DecoderKVCache | None = None,
) -> list[int]:
    """Argmax decoding from the start token.

    The returned sequence excludes the start token and includes the
    end-of-transcript token when one is produced.  ``np.argmax`` breaks ties
    toward the lowest id.
    """
    cfg = weights.config
    cache = DecoderKVCache.for_config(cfg) if cache is None else cache
    if max_tokens > cache.capacity - cache.length:
        raise CapacityError(f"max_tokens={max_tokens} exceeds free cache capacity {cache.capacity - cache.length}")
    out: list[int] = []
    token = cfg.sot_id
    while len(out) < max_tokens:
        nxt = int(np.argmax(decode_step(weights, token, cache, encoder_output)))
        out.append(nxt)
        if nxt == cfg.eot_id:
            break
        token = nxt
    return out
