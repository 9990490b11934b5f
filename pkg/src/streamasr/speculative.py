"""Lossless speculative decoding with a recurrent drafter.

A small gated recurrent cell, seeded from the target decoder's last hidden
state, beam-searches ``beam_width`` candidate continuations of
``beam_length`` tokens.  The target model scores every candidate in one
batched pass and keeps the longest prefix that agrees with its own argmax
choices, plus one bonus token.  Output equals :func:`greedy_decode` for
any drafter.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .model import (
    DecoderKVCache,
    EncoderOutput,
    ModelWeights,
    decode_step,
    decoder_pass,
)


@dataclass(frozen=True)
class DrafterConfig:
    vocab_size: int
    d_model: int
    hidden_size: int = 16
    beam_width: int = 4
    beam_length: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "hidden_size", "beam_width", "beam_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.beam_width > self.vocab_size:
            raise ConfigError("beam_width cannot exceed vocab_size")

    @property
    def verification_width(self) -> int:
        return self.beam_width * self.beam_length

    @classmethod
    def for_target(cls, target: ModelWeights, **kw) -> "DrafterConfig":
        return cls(vocab_size=target.config.vocab_size, d_model=target.config.d_model, **kw)


@dataclass(frozen=True, eq=False)
class DrafterWeights:
    config: DrafterConfig
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __getitem__(self, name):
        return self.tensors[name]


def init_drafter(config: DrafterConfig) -> DrafterWeights:
    """Random drafter; uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrices, zero biases."""
    rng = np.random.default_rng(config.seed)
    hs, d, v = config.hidden_size, config.d_model, config.vocab_size
    shapes = {
        "emb": (v, hs),
        "w_init": (d, hs),
        "w_gate": (2 * hs, hs),
        "w_cand": (2 * hs, hs),
        "w_out": (hs + d, v),
    }
    tensors = {}
    for name, shape in shapes.items():
        bound = 1.0 if name == "emb" else 1.0 / math.sqrt(shape[0])
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    tensors["b_init"] = np.zeros(hs)
    tensors["b_gate"] = np.zeros(hs)
    tensors["b_cand"] = np.zeros(hs)
    tensors["b_out"] = np.zeros(v)
    return DrafterWeights(config, tensors)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def drafter_initial_state(dw: DrafterWeights, target_hidden: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(target_hidden, dtype=np.float64) @ dw["w_init"] + dw["b_init"])


def drafter_step(dw: DrafterWeights, state: np.ndarray, tokens, target_hidden: np.ndarray):
    """Advance the cell by one input token; returns ``(new_state, log_probs)``."""
    inp = np.concatenate([state, dw["emb"][tokens]], axis=-1)
    gate = 1.0 / (1.0 + np.exp(-(inp @ dw["w_gate"] + dw["b_gate"])))
    cand = np.tanh(inp @ dw["w_cand"] + dw["b_cand"])
    new = (1.0 - gate) * state + gate * cand
    h = np.broadcast_to(np.asarray(target_hidden, dtype=np.float64), new.shape[:-1] + (len(target_hidden),))
    logits = np.concatenate([new, h], axis=-1) @ dw["w_out"] + dw["b_out"]
    return new, _log_softmax(logits)


@dataclass(frozen=True)
class DraftBeam:
    """``beam_width`` distinct candidate continuations of ``prefix_token``."""

    prefix_token: int
    candidates: np.ndarray  # (B, L) token ids
    scores: np.ndarray  # (B,) drafter log-probabilities, non-increasing


def draft(dw: DrafterWeights, target_hidden_state: np.ndarray, last_token: int) -> DraftBeam:
    """Beam search over the drafter; ties go to the lower beam index, then lower token id."""
    cfg = dw.config
    state = drafter_initial_state(dw, target_hidden_state)[None, :]
    seqs = np.zeros((1, 0), dtype=np.int64)
    scores = np.zeros(1)
    inputs = np.array([last_token])
    for _ in range(cfg.beam_length):
        state, logp = drafter_step(dw, state, inputs, target_hidden_state)
        total = scores[:, None] + logp
        beam_idx, tok_idx = np.divmod(np.arange(total.size), cfg.vocab_size)
        order = np.lexsort((tok_idx, beam_idx, -total.ravel()))[: cfg.beam_width]
        parent, inputs = beam_idx[order], tok_idx[order]
        seqs = np.column_stack([seqs[parent], inputs])
        scores = total.ravel()[order]
        state = state[parent]
    return DraftBeam(int(last_token), seqs, scores)


@dataclass
class VerifyResult:
    accepted: list[int]
    bonus: int
    beam_index: int
    target_passes: int


def verify(
    target: ModelWeights,
    kv_cache: DecoderKVCache,
    encoder_output: EncoderOutput,
    beam: DraftBeam,
    batched: bool = True,
) -> VerifyResult:
    """Accept the longest candidate prefix matching the target's greedy choices.

    On return ``kv_cache`` holds the prefix token and the accepted tokens,
    exactly as stepwise decoding would leave it; the bonus token is not yet
    fed.  ``batched=False`` is the step-by-step reference path.
    """
    if batched:
        return _verify_batched(target, kv_cache, encoder_output, beam)
    return _verify_sequential(target, kv_cache, encoder_output, beam)


def _verify_batched(target, cache, enc, beam):
    cands = beam.candidates
    n_beams, length = cands.shape
    tokens = np.column_stack([np.full(n_beams, beam.prefix_token), cands])
    start = cache.length
    res = decoder_pass(target, tokens, cache, enc)
    greedy = res.logits.argmax(axis=-1)
    agree = np.cumprod(cands == greedy[:, :length], axis=1).sum(axis=1)
    best = int(np.argmax(agree))
    n_acc = int(agree[best])
    cache.append(res.keys[best], res.values[best])
    cache.truncate(start + n_acc + 1)
    cache.last_hidden = res.hidden[best, n_acc].copy()
    return VerifyResult([int(t) for t in cands[best, :n_acc]], int(greedy[best, n_acc]), best, 1)


def _verify_sequential(target, cache, enc, beam):
    best, best_len, passes = 0, -1, 0
    for b, cand in enumerate(beam.candidates):
        trial = cache.copy()
        n_acc = 0
        token = beam.prefix_token
        for c in cand:
            passes += 1
            if int(np.argmax(decode_step(target, token, trial, enc))) != c:
                break
            n_acc += 1
            token = int(c)
        if n_acc > best_len:
            best, best_len = b, n_acc
    accepted = [int(t) for t in beam.candidates[best, :best_len]]
    logits = None
    for token in [beam.prefix_token] + accepted:
        logits = decode_step(target, token, cache, enc)
        passes += 1
    return VerifyResult(accepted, int(np.argmax(logits)), best, passes)


@dataclass
class AcceptanceStats:
    steps: int = 0
    accepted_tokens: int = 0
    target_passes: int = 0
    drafter_invocations: int = 0
    verification_width: int = 0

    @property
    def tokens_per_step(self) -> float:
        return self.accepted_tokens / self.steps if self.steps else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tokens_per_step"] = self.tokens_per_step
        return {k: d[k] for k in ("steps", "accepted_tokens", "tokens_per_step", "target_passes",
                                  "drafter_invocations", "verification_width")}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def speculative_decode(
    target: ModelWeights,
    drafter: DrafterWeights,
    encoder_output: EncoderOutput,
    max_tokens: int,
    batched: bool = True,
    cache: DecoderKVCache | None = None,
) -> tuple[list[int], AcceptanceStats]:
    """Draft-then-verify loop producing the same tokens as greedy decoding.

    The first token comes from a plain decode step of the start token (it
    counts as one step).  When fewer than ``beam_length + 1`` cache slots
    remain, single decode steps are used instead of verification.
    """
    cfg = target.config
    dcfg = drafter.config
    if dcfg.vocab_size != cfg.vocab_size or dcfg.d_model != cfg.d_model:
        raise ConfigError("drafter and target disagree on vocab_size or d_model")
    cache = DecoderKVCache.for_config(cfg) if cache is None else cache
    stats = AcceptanceStats(verification_width=dcfg.verification_width)
    out: list[int] = []
    if max_tokens <= 0:
        return out, stats

    out.append(int(np.argmax(decode_step(target, cfg.sot_id, cache, encoder_output))))
    stats.steps = stats.target_passes = 1
    limit = min(cache.capacity, cfg.n_text_ctx)
    while out[-1] != cfg.eot_id and len(out) < max_tokens:
        pending = out[-1]
        stats.steps += 1
        if limit - cache.length < dcfg.beam_length + 1:
            out.append(int(np.argmax(decode_step(target, pending, cache, encoder_output))))
            stats.target_passes += 1
            continue
        beam = draft(drafter, cache.last_hidden, pending)
        stats.drafter_invocations += dcfg.beam_length
        res = verify(target, cache, encoder_output, beam, batched=batched)
        stats.target_passes += res.target_passes
        for tok in res.accepted + [res.bonus]:
            out.append(tok)
            if tok == cfg.eot_id or len(out) == max_tokens:
                break
    cache.truncate(len(out))
    stats.accepted_tokens = len(out)
    return out, stats


def speedup_estimate(stats: AcceptanceStats, verification_overhead: float = 1.0, drafter_cost: float = 0.0) -> float:
    """Greedy time over speculative time, both in units of one single-token target pass.

    ``verification_overhead`` is the cost of one batched verification pass
    relative to a single-token pass; ``drafter_cost`` is the cost of one
    drafter cell invocation.  With no overheads this is ``tokens_per_step``.
    """
    spec = stats.steps * verification_overhead + stats.drafter_invocations * drafter_cost
    return stats.accepted_tokens / spec if spec else 0.0
