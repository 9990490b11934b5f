"""Transcriber implementations for :func:`streamasr.streaming.run_session`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .masks import AttentionMaskSpec, MaskKind
from .metrics import CorrectionStats, ReferenceTranscript
from .model import ModelWeights, build_silence_cache, encode, encode_with_cache, greedy_decode
from .streaming import Hypothesis

_EPS = 1e-9
CORRUPTIONS = ("sub", "del", "ins")
FILLER = "uh"


@dataclass(frozen=True)
class Corruption:
    invocation: int  # 1-based transcriber call
    word_index: int  # reference word that was corrupted
    kind: str


class ScriptedTranscriber:
    """Replays a reference transcript as the audio is revealed.

    Each call returns the reference words ending inside the window, with
    their true end times.  A corruption schedule is drawn once from
    ``seed``: when word ``i`` first becomes the newest visible word it is
    substituted, dropped, or followed by a filler word with probabilities
    ``p_sub``, ``p_del`` and ``p_ins``.  The corruption lasts one call.
    """

    def __init__(self, reference: ReferenceTranscript, duration: float,
                 p_sub: float = 0.0, p_del: float = 0.0, p_ins: float = 0.0, seed: int = 0):
        probs = (p_sub, p_del, p_ins)
        if min(probs) < 0 or sum(probs) > 1 + _EPS:
            raise ConfigError("corruption probabilities must be non-negative and sum to at most 1")
        self.reference = reference
        self.duration = float(duration)
        u = np.random.default_rng(seed).random(len(reference.words))
        edges = np.cumsum(probs)
        self.schedule: list[str | None] = [
            CORRUPTIONS[int(np.searchsorted(edges, x, side="right"))] if x < edges[-1] else None for x in u
        ]
        self.applied: list[Corruption] = []
        self.calls = 0
        self._newest = -1

    @property
    def counters(self) -> dict[str, int]:
        return {"invocations": self.calls}

    def applied_counts(self) -> dict[str, int]:
        return {k: sum(c.kind == k for c in self.applied) for k in CORRUPTIONS}

    def expected_corrections(self) -> CorrectionStats:
        """Corrections the applied schedule should produce.

        Restoring a dropped word is an insertion and removing a filler is a
        deletion, so those two kinds swap.
        """
        a = self.applied_counts()
        return CorrectionStats(deletions=a["ins"], substitutions=a["sub"], insertions=a["del"])

    def __call__(self, window: np.ndarray, window_start: float, window_end: float) -> Hypothesis:
        self.calls += 1
        visible = [i for i, w in enumerate(self.reference.words)
                   if window_start + _EPS < w.end <= window_end + _EPS]
        words = [self.reference.words[i].text for i in visible]
        ends = [self.reference.words[i].end for i in visible]
        if visible and visible[-1] > self._newest:
            i = visible[-1]
            kind = self.schedule[i]
            if kind == "sub":
                words[-1] = words[-1] + "x"
            elif kind == "del":
                words.pop()
                ends.pop()
            elif kind == "ins":
                words.append(FILLER)
                ends.append(ends[-1])
            if kind is not None:
                self.applied.append(Corruption(self.calls, i, kind))
            self._newest = i
        eot = window_end >= self.duration - _EPS
        return Hypothesis(words, ends, eot)


class ModelTranscriber:
    """Encoder plus greedy decoder over the toy model.

    Tokens below ``n_text_tokens`` map to ``token_words``; the start and
    end tokens are control symbols.  The model has no timing head, so word
    end times are spread evenly over the visible window.
    """

    def __init__(self, weights: ModelWeights, mask: AttentionMaskSpec, token_words: Sequence[str],
                 use_cache: bool = True, max_tokens: int | None = None):
        cfg = weights.config
        if len(token_words) != cfg.n_text_tokens:
            raise ConfigError(f"token_words needs {cfg.n_text_tokens} entries, got {len(token_words)}")
        self.weights = weights
        self.mask = mask
        self.token_words = list(token_words)
        self.max_tokens = max_tokens if max_tokens is not None else cfg.n_text_ctx - 1
        self.cache = None
        if use_cache and mask.kind is MaskKind.BLOCK_DIAGONAL:
            self.cache = build_silence_cache(weights, mask)
        self.counters = {"encoder_blocks_computed": 0, "encoder_blocks_cached": 0, "attention_score_entries": 0}

    def __call__(self, window: np.ndarray, window_start: float, window_end: float) -> Hypothesis:
        cfg = self.weights.config
        if window.shape != (cfg.n_audio_frames, cfg.d_feat):
            raise ShapeError(f"window shape {window.shape} does not match the model's "
                             f"{(cfg.n_audio_frames, cfg.d_feat)}")
        if self.cache is not None:
            enc = encode_with_cache(self.weights, window, self.mask, self.cache)
        else:
            enc = encode(self.weights, window, self.mask)
        self.counters["encoder_blocks_computed"] += enc.blocks_computed
        self.counters["encoder_blocks_cached"] += enc.blocks_cached
        self.counters["attention_score_entries"] += enc.attention_score_entries
        tokens = greedy_decode(self.weights, enc, self.max_tokens)
        eot = bool(tokens) and tokens[-1] == cfg.eot_id
        words = [self.token_words[t] for t in tokens if t < cfg.n_text_tokens]
        span = window_end - window_start
        ends = [window_start + span * (i + 1) / len(words) for i in range(len(words))]
        return Hypothesis(words, ends, eot)
