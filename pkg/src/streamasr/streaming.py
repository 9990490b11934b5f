"""Simulated real-time streaming sessions with LocalAgreement confirmation.

A session advances a simulated clock in steps of ``inference_interval``.
At every tick the transcriber sees the audio between the cursor and the
clock (zero-padded to the window length) and returns a word hypothesis.
Words that agree across the last ``n`` hypotheses are confirmed and the
cursor moves to the end of the last confirmed word; the rest are emitted as
hypothesis text.  After the audio runs out one more flush tick confirms
whatever is left.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from fractions import Fraction
from typing import NamedTuple, Protocol, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .metrics import HypothesisBuffer, normalize


class Hypothesis(NamedTuple):
    words: list[str]
    ends: list[float]  # absolute seconds, one per word
    eot: bool = False


class Transcriber(Protocol):
    def __call__(self, window: np.ndarray, window_start: float, window_end: float) -> Hypothesis: ...


@dataclass(frozen=True)
class AudioStream:
    frames: np.ndarray  # (n_frames, d_feat)
    frames_per_second: Fraction

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2:
            raise ShapeError(f"frames must be 2-D, got shape {frames.shape}")
        fps = Fraction(self.frames_per_second)
        if fps <= 0:
            raise ConfigError("frames_per_second must be positive")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "frames_per_second", fps)

    @property
    def total_duration(self) -> float:
        return float(len(self.frames) / self.frames_per_second)


@dataclass(frozen=True)
class ConfirmedWord:
    word: str
    end: float
    confirm_time: float


@dataclass(frozen=True)
class StreamCursor:
    audio_cursor: float = 0.0
    confirmed: tuple[ConfirmedWord, ...] = ()
    window_len: float = 30.0


def advance_cursor(cursor: StreamCursor, newly_confirmed: Sequence[tuple[str, float]],
                   confirm_time: float = 0.0) -> StreamCursor:
    """Append confirmed ``(word, end)`` pairs and move the cursor forward, never back."""
    if not newly_confirmed:
        return cursor
    added = tuple(ConfirmedWord(w, float(e), confirm_time) for w, e in newly_confirmed)
    return replace(
        cursor,
        audio_cursor=max(cursor.audio_cursor, added[-1].end),
        confirmed=cursor.confirmed + added,
    )


def _frame_at(t: float, fps: Fraction) -> int:
    # first frame starting at or after t; rounding absorbs float noise like 1.2 * 10
    return math.ceil(round(float(t) * float(fps), 6))


def window_frames(window_len: float, fps: Fraction) -> int:
    n = float(window_len) * float(fps)
    if abs(n - round(n)) > 1e-6 or round(n) < 1:
        raise ConfigError(f"window_len {window_len} s is not a whole number of frames at {fps} fps")
    return int(round(n))


def window_bounds(stream: AudioStream, cursor: StreamCursor, clock_now: float) -> tuple[int, int]:
    """Frame range ``[lo, hi)`` of real audio visible at ``clock_now``."""
    fps = stream.frames_per_second
    lo = min(_frame_at(cursor.audio_cursor, fps), len(stream.frames))
    end = min(clock_now, cursor.audio_cursor + cursor.window_len)
    hi = min(max(_frame_at(end, fps), lo), len(stream.frames))
    return lo, hi


def window_features(stream: AudioStream, cursor: StreamCursor, clock_now: float) -> np.ndarray:
    """Frames in ``[audio_cursor, min(clock_now, audio_cursor + window_len))`` then zero padding."""
    n = window_frames(cursor.window_len, stream.frames_per_second)
    lo, hi = window_bounds(stream, cursor, clock_now)
    out = np.zeros((n, stream.frames.shape[1]), dtype=np.float32)
    out[: hi - lo] = stream.frames[lo:hi]
    return out


def local_agreement(prev_hyp: Sequence[str], cur_hyp: Sequence[str]) -> list[str]:
    """Longest common prefix, comparing normalized words; returns the words of ``cur_hyp``."""
    n = 0
    for a, b in zip(prev_hyp, cur_hyp):
        if normalize(a) != normalize(b):
            break
        n += 1
    return list(cur_hyp[:n])


@dataclass(frozen=True)
class LocalAgreement:
    """Confirm the prefix shared by the last ``n`` hypotheses."""

    n: int = 2

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("agreement arity must be at least 1")

    def agree(self, history: Sequence[Sequence[str]]) -> list[str]:
        if len(history) < self.n:
            return []
        prefix = list(history[-1])
        for h in history[-self.n:-1]:
            prefix = local_agreement(h, prefix)
        return prefix


@dataclass(frozen=True)
class SessionConfig:
    inference_interval: float = 1.0
    window_len: float = 30.0
    processing_latency_model: float = 0.0

    def __post_init__(self):
        if not self.inference_interval > 0:
            raise ConfigError("inference_interval must be positive")
        if not self.window_len > 0:
            raise ConfigError("window_len must be positive")
        if not self.processing_latency_model >= 0:
            raise ConfigError("processing_latency_model must be non-negative")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "SessionConfig":
        known = {f.name for f in fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise ConfigError(f"line {lineno}: expected one of {sorted(known)} = <number>")
            try:
                kw[key] = float(value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {value.strip()!r} is not a number") from exc
        return cls(**kw)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SessionConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())


class EventKind(str, Enum):
    HYPOTHESIS = "hypothesis"
    CONFIRMED = "confirmed"


@dataclass(frozen=True)
class TranscriptEvent:
    word: str
    kind: EventKind
    emit_time: float
    word_index: int
    tick: int

    def to_dict(self) -> dict:
        return {"word": self.word, "kind": self.kind.value, "emit_time": self.emit_time,
                "word_index": self.word_index, "tick": self.tick}

    @classmethod
    def from_dict(cls, d: dict) -> "TranscriptEvent":
        return cls(d["word"], EventKind(d["kind"]), d["emit_time"], d["word_index"], d["tick"])


def events_to_jsonl(events: Sequence[TranscriptEvent]) -> str:
    return "".join(json.dumps(e.to_dict()) + "\n" for e in events)


def events_from_jsonl(text: str) -> list[TranscriptEvent]:
    return [TranscriptEvent.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


@dataclass
class SessionResult:
    events: list[TranscriptEvent]
    cursor: StreamCursor
    cursor_trace: list[tuple[int, float, float]]  # (tick, clock, audio_cursor)
    buffers: list[HypothesisBuffer]
    complete: bool = True
    error: str | None = None
    counters: dict[str, int] = field(default_factory=dict)

    @property
    def final_transcript(self) -> list[str]:
        return [c.word for c in self.cursor.confirmed]


def run_session(
    stream: AudioStream,
    transcriber: Transcriber,
    config: SessionConfig = SessionConfig(),
    policy: LocalAgreement = LocalAgreement(),
) -> SessionResult:
    """Run one simulated session.

    Regular ticks fire at ``k * inference_interval`` for ``k = 1..ceil(D/I)``;
    the flush tick follows one interval later, sees the whole remaining audio
    and confirms every word it returns.  Events from tick ``k`` carry
    ``emit_time = k * I + processing_latency_model``.  A transcriber exception
    stops the session and marks it incomplete.
    """
    interval = config.inference_interval
    duration = stream.total_duration
    n_regular = math.ceil(round(duration / interval, 9))
    cursor = StreamCursor(window_len=config.window_len)
    window_frames(config.window_len, stream.frames_per_second)

    events: list[TranscriptEvent] = []
    trace: list[tuple[int, float, float]] = []
    buffers: list[HypothesisBuffer] = []
    history: list[list[str]] = []
    result = SessionResult(events, cursor, trace, buffers)
    invocations = 0

    for k in range(1, n_regular + 2):
        flush = k == n_regular + 1
        clock = k * interval
        visible = duration if flush else min(clock, duration)
        window = window_features(stream, cursor, visible)
        start = cursor.audio_cursor
        end = max(start, min(visible, start + cursor.window_len))
        try:
            hyp = transcriber(window, start, end)
            words, ends = list(hyp.words), [float(e) for e in hyp.ends]
            if len(words) != len(ends):
                raise ValueError("transcriber returned mismatched words and end times")
        except Exception as exc:  # noqa: BLE001 - any transcriber failure aborts the session
            result.complete = False
            result.error = f"tick {k}: {type(exc).__name__}: {exc}"
            break
        invocations += 1

        history.append(words)
        agreed = len(words) if flush else len(policy.agree(history))
        emit = clock + config.processing_latency_model
        base = len(cursor.confirmed)
        for i in range(agreed):
            events.append(TranscriptEvent(words[i], EventKind.CONFIRMED, emit, base + i, k))
        cursor = advance_cursor(cursor, list(zip(words[:agreed], ends[:agreed])), emit)
        for i in range(agreed, len(words)):
            events.append(TranscriptEvent(words[i], EventKind.HYPOTHESIS, emit, base + i, k))
        # later hypotheses are relative to the new cursor, so drop the agreed prefix
        history = [h[agreed:] for h in history[-policy.n:]]

        buffers.append(HypothesisBuffer(
            words=[c.word for c in cursor.confirmed] + words[agreed:],
            n_confirmed=len(cursor.confirmed),
            ends=[c.end for c in cursor.confirmed] + ends[agreed:],
            horizon=end,
        ))
        trace.append((k, clock, cursor.audio_cursor))

    result.cursor = cursor
    result.counters = {"ticks": min(len(trace), n_regular), "invocations": invocations}
    result.counters.update(getattr(transcriber, "counters", {}))
    return result
