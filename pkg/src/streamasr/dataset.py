"""Synthetic streaming dataset: feature files, timed reference transcripts and a manifest.

Feature files (``WKFT``, little-endian)::

    b"WKFT" | u8 version | u32 n_frames | u32 d_feat | u32 fps_num | u32 fps_den | float32 frames

Speech frames carry a one-hot pattern for the word id plus Gaussian noise;
frames between words are exactly zero so silence caching can kick in.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from ._binary import Reader
from .errors import FormatError
from .metrics import ReferenceTranscript, ReferenceWord
from .streaming import AudioStream

MAGIC = b"WKFT"
VERSION = 1
MANIFEST = "manifest.json"

VOCAB = (
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
    "india", "juliet", "kilo", "lima", "mike", "november", "oscar", "papa",
    "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey", "xray",
    "yankee", "zulu", "red", "green", "blue", "amber", "north", "south",
)

WORD_DURATION = (0.2, 0.6)
WORD_GAP = (0.05, 0.2)


def features_bytes(frames: np.ndarray, fps: Fraction) -> bytes:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    n, d = frames.shape
    return MAGIC + struct.pack("<BIIII", VERSION, n, d, fps.numerator, fps.denominator) + frames.tobytes()


def parse_features(data: bytes) -> AudioStream:
    r = Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a WKFT feature file (bad magic)")
    version, n, d, num, den = r.unpack("BIIII")
    if version != VERSION:
        raise FormatError(f"unsupported WKFT version {version}")
    if den == 0 or num == 0:
        raise FormatError("frames_per_second must be positive")
    frames = r.floats(n * d).reshape(n, d)
    if not r.done():
        raise FormatError("trailing bytes after feature frames")
    return AudioStream(frames, Fraction(num, den))


@dataclass(frozen=True)
class Utterance:
    id: str
    stream: AudioStream
    reference: ReferenceTranscript


def synth_utterance(rng: np.random.Generator, n_words: int, fps: Fraction, d_feat: int,
                    noise: float, vocab=VOCAB) -> tuple[np.ndarray, ReferenceTranscript]:
    """Random word sequence with rounded-millisecond timings and matching frames."""
    ids = rng.integers(0, len(vocab), size=n_words)
    durs = rng.uniform(*WORD_DURATION, size=n_words)
    gaps = rng.uniform(*WORD_GAP, size=n_words + 1)
    words, t = [], 0.0
    for i in range(n_words):
        start = round(t + gaps[i], 3)
        end = round(start + durs[i], 3)
        words.append(ReferenceWord(vocab[ids[i]], start, end))
        t = end
    total = t + gaps[-1]
    n_frames = int(np.ceil(round(total * float(fps), 6)))
    centers = (np.arange(n_frames) + 0.5) / float(fps)
    frames = np.zeros((n_frames, d_feat), dtype=np.float32)
    for w, wid in zip(words, ids):
        sel = (centers >= w.start) & (centers < w.end)
        pattern = np.zeros(d_feat, dtype=np.float32)
        pattern[wid % d_feat] = 1.0
        frames[sel] = pattern + noise * rng.standard_normal((int(sel.sum()), d_feat)).astype(np.float32)
    return frames, ReferenceTranscript(tuple(words))


def synth_dataset(out: str | os.PathLike, seed: int, n_utterances: int, words_per_utterance: int,
                  frames_per_second: Fraction | int | str = 10, d_feat: int = 16, noise: float = 0.1) -> dict:
    """Write ``n_utterances`` synthetic utterances and a manifest under ``out``."""
    fps = Fraction(frames_per_second)
    if n_utterances < 0 or words_per_utterance < 1 or fps <= 0 or d_feat < 1 or noise < 0:
        raise ValueError("synth parameters must be positive (n_utterances may be 0)")
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for u in range(n_utterances):
        uid = f"utt{u:04d}"
        frames, ref = synth_utterance(rng, words_per_utterance, fps, d_feat, noise)
        (root / f"{uid}.wkft").write_bytes(features_bytes(frames, fps))
        (root / f"{uid}.json").write_text(ref.to_json() + "\n")
        entries.append({"id": uid, "features": f"{uid}.wkft", "reference": f"{uid}.json",
                        "n_frames": int(frames.shape[0])})
    manifest = {
        "seed": seed,
        "frames_per_second": str(fps),
        "d_feat": d_feat,
        "noise": noise,
        "vocab": list(VOCAB),
        "utterances": entries,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def load_manifest(root: str | os.PathLike) -> dict:
    path = Path(root) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    for key in ("frames_per_second", "d_feat", "vocab", "utterances"):
        if key not in manifest:
            raise FormatError(f"{path}: missing {key!r}")
    return manifest


def load_utterances(root: str | os.PathLike) -> list[Utterance]:
    """Read every utterance listed in the manifest and validate timings against audio length."""
    root = Path(root)
    manifest = load_manifest(root)
    fps = Fraction(manifest["frames_per_second"])
    out = []
    for e in manifest["utterances"]:
        stream = parse_features((root / e["features"]).read_bytes())
        if stream.frames_per_second != fps:
            raise FormatError(f"{e['features']}: frame rate {stream.frames_per_second} differs from manifest")
        try:
            ref = ReferenceTranscript.from_json((root / e["reference"]).read_text())
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{e['reference']}: {exc}") from exc
        if ref.words and ref.words[-1].end > stream.total_duration + 1e-9:
            raise FormatError(f"{e['id']}: reference runs past the end of the audio")
        out.append(Utterance(e["id"], stream, ref))
    return out
