"""Streaming evaluation: confirmed-text WER, per-word latency and hypothesis corrections."""

from __future__ import annotations

import csv
import io
import json
import math
import string
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import UndefinedWERError

_PUNCT = string.punctuation
HISTOGRAM_WIDTH = 0.1

# backtrace preference on ties: diagonal (match/substitution), then insertion, then deletion
OP_MATCH, OP_SUB, OP_INS, OP_DEL = "match", "sub", "ins", "del"


def normalize(text: str | Sequence[str]) -> list[str]:
    """Lowercase, split on whitespace and strip punctuation from both ends of each word."""
    if not isinstance(text, str):
        text = " ".join(text)
    words = (w.strip(_PUNCT) for w in text.lower().split())
    return [w for w in words if w]


# ---------------------------------------------------------------------------
# alignment kernel
# ---------------------------------------------------------------------------


def edit_tables(refs: np.ndarray, hyps: np.ndarray) -> np.ndarray:
    """Unit-cost edit-distance tables for a batch of equal-length pairs.

    ``refs`` is ``(P, n)`` and ``hyps`` is ``(P, m)`` of integer word ids.
    Returns ``(P, n + 1, m + 1)`` where entry ``[p, i, j]`` is the distance
    between ``refs[p, :i]`` and ``hyps[p, :j]``.
    """
    P, n = refs.shape
    m = hyps.shape[1]
    D = np.empty((P, n + 1, m + 1), dtype=np.int32)
    D[:, :, 0] = np.arange(n + 1)
    D[:, 0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ne = refs[:, i - 1, None] != hyps
        for j in range(1, m + 1):
            D[:, i, j] = np.minimum(
                D[:, i - 1, j - 1] + ne[:, j - 1],
                np.minimum(D[:, i, j - 1], D[:, i - 1, j]) + 1,
            )
    return D


def edit_counts(refs: np.ndarray, hyps: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized backtrace of :func:`edit_tables`; returns ``(subs, dels, ins)`` per pair."""
    refs = np.asarray(refs, dtype=np.int64)
    hyps = np.asarray(hyps, dtype=np.int64)
    P, n = refs.shape
    m = hyps.shape[1]
    zero = np.zeros(P, dtype=np.int64)
    if n == 0 or m == 0:
        return zero, zero + n, zero + m
    D = edit_tables(refs, hyps)
    rows = np.arange(P)
    i = np.full(P, n)
    j = np.full(P, m)
    subs = np.zeros(P, dtype=np.int64)
    dels = np.zeros(P, dtype=np.int64)
    ins = np.zeros(P, dtype=np.int64)
    for _ in range(n + m):
        active = (i > 0) | (j > 0)
        if not active.any():
            break
        cur = D[rows, i, j]
        im1, jm1 = np.maximum(i - 1, 0), np.maximum(j - 1, 0)
        ne = refs[rows, im1] != hyps[rows, jm1]
        diag = (i > 0) & (j > 0) & (cur == D[rows, im1, jm1] + ne)
        step_ins = ~diag & (j > 0) & (cur == D[rows, i, jm1] + 1)
        step_del = active & ~diag & ~step_ins
        subs += diag & ne
        ins += step_ins
        dels += step_del
        i = i - (diag | step_del)
        j = j - (diag | step_ins)
    return subs, dels, ins


def _ids(*seqs: Sequence[str]) -> list[np.ndarray]:
    vocab: dict[str, int] = {}
    return [np.array([vocab.setdefault(w, len(vocab)) for w in s], dtype=np.int64) for s in seqs]


def alignment(reference: Sequence[str], hypothesis: Sequence[str]) -> list[tuple[str, int | None, int | None]]:
    """Minimal-edit alignment as ``(op, ref_index, hyp_index)`` triples in order.

    Uses the same tie-breaking as :func:`edit_counts`.
    """
    r, h = _ids(reference, hypothesis)
    D = edit_tables(r[None, :], h[None, :])[0]
    i, j = len(r), len(h)
    ops = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i, j] == D[i - 1, j - 1] + (r[i - 1] != h[j - 1]):
            ops.append((OP_MATCH if r[i - 1] == h[j - 1] else OP_SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif j > 0 and D[i, j] == D[i, j - 1] + 1:
            ops.append((OP_INS, None, j - 1))
            j -= 1
        else:
            ops.append((OP_DEL, i - 1, None))
            i -= 1
    return ops[::-1]


@dataclass(frozen=True)
class WERBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return self.errors / self.reference_length

    def to_dict(self) -> dict:
        return {"s": self.substitutions, "d": self.deletions, "i": self.insertions,
                "ref_len": self.reference_length, "value": self.wer}


def wer(reference: Sequence[str], hypothesis: Sequence[str]) -> WERBreakdown:
    """Word error rate of ``hypothesis`` against a non-empty ``reference`` word list."""
    if len(reference) == 0:
        raise UndefinedWERError("WER is undefined for an empty reference")
    r, h = _ids(reference, hypothesis)
    s, d, i = edit_counts(r[None, :], h[None, :])
    return WERBreakdown(int(s[0]), int(d[0]), int(i[0]), len(reference))


# ---------------------------------------------------------------------------
# reference transcripts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceWord:
    text: str
    start: float
    end: float


@dataclass(frozen=True)
class ReferenceTranscript:
    """Ground-truth words with start/end times in seconds."""

    words: tuple[ReferenceWord, ...]

    def __post_init__(self):
        words = tuple(w if isinstance(w, ReferenceWord) else ReferenceWord(*w) for w in self.words)
        object.__setattr__(self, "words", words)
        prev_end = -math.inf
        for w in words:
            if not w.start < w.end:
                raise ValueError(f"word {w.text!r} has start {w.start} >= end {w.end}")
            if w.start < prev_end:
                raise ValueError(f"word {w.text!r} overlaps the previous word")
            prev_end = w.end

    @property
    def texts(self) -> list[str]:
        return [w.text for w in self.words]

    def to_json(self) -> str:
        return json.dumps({"words": [asdict(w) for w in self.words]}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ReferenceTranscript":
        return cls(tuple(ReferenceWord(**w) for w in json.loads(text)["words"]))


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatencySample:
    session: str
    ref_index: int
    word: str
    gt_end: float
    first_emit: float

    @property
    def latency(self) -> float:
        return self.first_emit - self.gt_end

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latency"] = self.latency
        return d


def _sample_key(s: LatencySample):
    return (s.session, s.ref_index, s.word, s.gt_end, s.first_emit)


def histogram(values: Iterable[float], width: float = HISTOGRAM_WIDTH) -> list[dict]:
    """Contiguous fixed-width buckets covering all values; ``lo`` is each bucket's left edge."""
    idx = [math.floor(round(v / width, 9)) for v in values]
    if not idx:
        return []
    counts: dict[int, int] = {}
    for k in idx:
        counts[k] = counts.get(k, 0) + 1
    return [{"lo": round(k * width, 10), "count": counts.get(k, 0)} for k in range(min(idx), max(idx) + 1)]


@dataclass
class LatencySummary:
    stream: str
    samples: list[LatencySample]

    def __post_init__(self):
        self.samples = sorted(self.samples, key=_sample_key)

    @property
    def mean(self) -> float | None:
        if not self.samples:
            return None
        return math.fsum(s.latency for s in self.samples) / len(self.samples)

    def to_dict(self) -> dict:
        return {
            "stream": self.stream,
            "mean": self.mean,
            "samples": [s.to_dict() for s in self.samples],
            "histogram": histogram(s.latency for s in self.samples),
        }


@dataclass
class LatencyResult:
    hypothesis: LatencySummary
    confirmed: LatencySummary
    dropped_words: int


def final_transcript(events) -> list[str]:
    """Confirmed words ordered by their transcript position."""
    confirmed = {e.word_index: e.word for e in events if e.kind == "confirmed"}
    return [confirmed[i] for i in sorted(confirmed)]


def per_word_latency(events, reference: ReferenceTranscript, session: str = "") -> LatencyResult:
    """Latency of each reference word against its ground-truth end time.

    The final confirmed transcript is aligned to the reference by position;
    a reference word aligned to transcript slot ``j`` (match or substitution)
    is first emitted at the earliest event in slot ``j`` carrying the final
    word, and confirmed at that slot's confirmed event.  Deleted reference
    words are counted as dropped.
    """
    events = list(events)
    final = final_transcript(events)
    first_seen: dict[int, float] = {}
    confirmed_at: dict[int, float] = {}
    for e in events:
        if e.word_index < len(final) and e.word == final[e.word_index]:
            first_seen[e.word_index] = min(first_seen.get(e.word_index, math.inf), e.emit_time)
        if e.kind == "confirmed":
            confirmed_at[e.word_index] = e.emit_time
    ref_norm = [" ".join(normalize(w)) for w in reference.texts]
    hyp_norm = [" ".join(normalize(w)) for w in final]
    hyp_samples, conf_samples, dropped = [], [], 0
    for op, ri, hj in alignment(ref_norm, hyp_norm):
        if op == OP_DEL:
            dropped += 1
        elif op != OP_INS:
            rw = reference.words[ri]
            hyp_samples.append(LatencySample(session, ri, rw.text, rw.end, first_seen[hj]))
            conf_samples.append(LatencySample(session, ri, rw.text, rw.end, confirmed_at[hj]))
    return LatencyResult(LatencySummary("hypothesis", hyp_samples), LatencySummary("confirmed", conf_samples), dropped)


# ---------------------------------------------------------------------------
# corrections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HypothesisBuffer:
    """Transcript view after one tick: confirmed words followed by hypothesis words.

    ``ends`` are the per-word end times reported by the transcriber and
    ``horizon`` is the end of the audio it had seen.  Both are optional.
    """

    words: tuple[str, ...]
    n_confirmed: int
    ends: tuple[float, ...] | None = None
    horizon: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        if self.ends is not None:
            object.__setattr__(self, "ends", tuple(self.ends))
        if not 0 <= self.n_confirmed <= len(self.words):
            raise ValueError("n_confirmed out of range")


@dataclass
class CorrectionStats:
    deletions: int = 0
    substitutions: int = 0
    insertions: int = 0

    @property
    def total(self) -> int:
        return self.deletions + self.substitutions + self.insertions

    def __add__(self, other: "CorrectionStats") -> "CorrectionStats":
        return CorrectionStats(self.deletions + other.deletions, self.substitutions + other.substitutions,
                               self.insertions + other.insertions)

    def to_dict(self) -> dict:
        return {"del": self.deletions, "sub": self.substitutions, "ins": self.insertions, "total": self.total}


_EPS = 1e-9


def count_corrections(buffers: Sequence[HypothesisBuffer]) -> CorrectionStats:
    """Count revisions made to unconfirmed words between consecutive buffers.

    For each pair, the words left unconfirmed after the earlier buffer are
    aligned with the same slots of the later buffer.  When the later buffer
    carries end times and the earlier one a horizon, later words ending past
    that horizon are new audio, not revisions, and are left out.
    """
    stats = CorrectionStats()
    for prev, cur in zip(buffers, buffers[1:]):
        n = prev.n_confirmed
        old = list(prev.words[n:])
        new = list(cur.words[n:])
        if prev.horizon is not None and cur.ends is not None:
            keep = 0
            for e in cur.ends[n:]:
                if e > prev.horizon + _EPS:
                    break
                keep += 1
            new = new[:keep]
        if not old and not new:
            continue
        r, h = _ids(old, new)
        s, d, i = edit_counts(r[None, :], h[None, :])
        stats = stats + CorrectionStats(int(d[0]), int(s[0]), int(i[0]))
    return stats


# ---------------------------------------------------------------------------
# session reports
# ---------------------------------------------------------------------------

COUNTER_KEYS = ("ticks", "invocations", "encoder_blocks_computed", "encoder_blocks_cached", "attention_score_entries")


@dataclass
class SessionReport:
    label: str
    sessions: int
    wer: WERBreakdown
    hypothesis_latency: LatencySummary
    confirmed_latency: LatencySummary
    dropped_words: int
    corrections: CorrectionStats
    counters: dict[str, int] = field(default_factory=dict)
    partial: bool = False

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "sessions": self.sessions,
            "partial": self.partial,
            "wer": self.wer.to_dict(),
            "latency": [self.hypothesis_latency.to_dict(), self.confirmed_latency.to_dict()],
            "dropped_words": self.dropped_words,
            "corrections": self.corrections.to_dict(),
            "counters": {k: int(self.counters.get(k, 0)) for k in COUNTER_KEYS},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SessionReport":
        lat = {x["stream"]: x for x in d["latency"]}

        def summary(stream):
            return LatencySummary(stream, [
                LatencySample(s["session"], s["ref_index"], s["word"], s["gt_end"], s["first_emit"])
                for s in lat[stream]["samples"]
            ])

        w, c = d["wer"], d["corrections"]
        return cls(
            label=d["label"],
            sessions=d["sessions"],
            wer=WERBreakdown(w["s"], w["d"], w["i"], w["ref_len"]),
            hypothesis_latency=summary("hypothesis"),
            confirmed_latency=summary("confirmed"),
            dropped_words=d["dropped_words"],
            corrections=CorrectionStats(c["del"], c["sub"], c["ins"]),
            counters=dict(d["counters"]),
            partial=d["partial"],
        )

    def latency_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stream", "session", "ref_index", "word", "gt_end", "first_emit", "latency"])
        for summ in (self.hypothesis_latency, self.confirmed_latency):
            for s in summ.samples:
                w.writerow([summ.stream, s.session, s.ref_index, s.word, repr(s.gt_end), repr(s.first_emit),
                            repr(s.latency)])
        return buf.getvalue()


def session_report(session, reference: ReferenceTranscript, label: str = "", name: str = "") -> SessionReport:
    """Aggregate one finished streaming session into a :class:`SessionReport`.

    ``session`` is a :class:`~streamasr.streaming.SessionResult`.  An empty or
    aborted session is flagged ``partial``.
    """
    events = list(session.events)
    ref_words = normalize(reference.texts)
    hyp_words = normalize(final_transcript(events))
    lat = per_word_latency(events, reference, session=name)
    return SessionReport(
        label=label,
        sessions=1,
        wer=wer(ref_words, hyp_words),
        hypothesis_latency=lat.hypothesis,
        confirmed_latency=lat.confirmed,
        dropped_words=lat.dropped_words,
        corrections=count_corrections(session.buffers),
        counters={k: int(session.counters.get(k, 0)) for k in COUNTER_KEYS},
        partial=(not session.complete) or not events,
    )


def merge_reports(reports: Sequence[SessionReport]) -> SessionReport:
    """Order-independent merge: counts add up, latency samples are pooled."""
    if not reports:
        raise ValueError("nothing to merge")
    labels = sorted({r.label for r in reports})
    return SessionReport(
        label="+".join(labels),
        sessions=sum(r.sessions for r in reports),
        wer=WERBreakdown(
            sum(r.wer.substitutions for r in reports),
            sum(r.wer.deletions for r in reports),
            sum(r.wer.insertions for r in reports),
            sum(r.wer.reference_length for r in reports),
        ),
        hypothesis_latency=LatencySummary("hypothesis", [s for r in reports for s in r.hypothesis_latency.samples]),
        confirmed_latency=LatencySummary("confirmed", [s for r in reports for s in r.confirmed_latency.samples]),
        dropped_words=sum(r.dropped_words for r in reports),
        corrections=sum((r.corrections for r in reports), CorrectionStats()),
        counters={k: sum(int(r.counters.get(k, 0)) for r in reports) for k in COUNTER_KEYS},
        partial=any(r.partial for r in reports),
    )
