import math
from fractions import Fraction

import numpy as np
import pytest

from _oracles import lcp
from streamasr.dataset import synth_utterance
from streamasr.errors import ConfigError
from streamasr.masks import AttentionMaskSpec
from streamasr.metrics import ReferenceTranscript, ReferenceWord, count_corrections, session_report
from streamasr.model import ModelConfig, init_weights
from streamasr.streaming import (
    AudioStream,
    EventKind,
    Hypothesis,
    LocalAgreement,
    SessionConfig,
    StreamCursor,
    advance_cursor,
    events_from_jsonl,
    events_to_jsonl,
    local_agreement,
    run_session,
    window_features,
)
from streamasr.transcribers import ModelTranscriber, ScriptedTranscriber

FPS = Fraction(10)


def _utt(seed, n_words=8, d_feat=8):
    rng = np.random.default_rng(seed)
    frames, ref = synth_utterance(rng, n_words, FPS, d_feat, 0.1)
    return AudioStream(frames, FPS), ref


@pytest.mark.parametrize("a,b,out", [
    (["a", "b", "c"], ["a", "b", "c"], ["a", "b", "c"]),
    (["a", "b"], ["x", "y"], []),
    (["a", "b", "c"], ["a", "b", "d", "e"], ["a", "b"]),
    ([], ["a"], []),
    (["Hello,"], ["hello"], ["hello"]),
])
def test_local_agreement(a, b, out):
    assert local_agreement(a, b) == out


def test_local_agreement_matches_prefix_scan():
    rng = np.random.default_rng(0)
    for _ in range(500):
        a = list(rng.choice(["p", "q"], size=rng.integers(0, 6)))
        b = list(rng.choice(["p", "q"], size=rng.integers(0, 6)))
        assert local_agreement(a, b) == lcp(a, b)


def test_policy_arity():
    assert LocalAgreement(2).agree([["a"]]) == []
    assert LocalAgreement(3).agree([["a", "b"], ["a", "c"], ["a", "b"]]) == ["a"]
    assert LocalAgreement(1).agree([["x", "y"]]) == ["x", "y"]
    with pytest.raises(ConfigError):
        LocalAgreement(0)


def test_advance_cursor():
    c = StreamCursor()
    assert advance_cursor(c, [("w", 1.2)]).audio_cursor == 1.2
    assert advance_cursor(c, []) is c
    c2 = advance_cursor(c, [("a", 1.0), ("b", 1.8)], confirm_time=2.0)
    assert c2.audio_cursor == 1.8 and [w.word for w in c2.confirmed] == ["a", "b"]
    back = advance_cursor(c2, [("c", 1.5)])
    assert back.audio_cursor == 1.8 and len(back.confirmed) == 3


def test_window_features_examples():
    frames = np.arange(1, 101, dtype=np.float32).reshape(100, 1)  # 10 s at 10 fps
    stream = AudioStream(frames, FPS)
    cur = StreamCursor(window_len=30.0)
    assert not window_features(stream, cur, 0.0).any()
    w = window_features(stream, cur, 10.0)
    assert w.shape == (300, 1)
    np.testing.assert_array_equal(w[:100], frames)
    assert not w[100:].any()
    w = window_features(stream, StreamCursor(2.5, (), 3.0), 4.0)
    np.testing.assert_array_equal(w[:15, 0], np.arange(26, 41))
    assert not w[15:].any()


def test_window_frame_count_is_constant():
    rng = np.random.default_rng(0)
    stream = AudioStream(rng.standard_normal((123, 3)), FPS)
    for _ in range(300):
        wl = float(rng.integers(1, 40)) / 2
        cur = StreamCursor(float(rng.uniform(0, 14)), (), wl)
        now = cur.audio_cursor + float(rng.uniform(0, 20))
        assert window_features(stream, cur, now).shape == (round(wl * 10), 3)


def test_session_config_validation_and_text_round_trip(tmp_path):
    cfg = SessionConfig(0.5, 6.0, 0.1)
    p = tmp_path / "s.cfg"
    p.write_text(cfg.to_text())
    assert SessionConfig.load(p) == cfg
    assert SessionConfig.from_text("# comment\ninference_interval = 2\n") == SessionConfig(2.0)
    for bad in ("inference_interval = 0", "processing_latency_model = -1", "foo = 1", "window_len = abc"):
        with pytest.raises(ConfigError):
            SessionConfig.from_text(bad)


class Fixed:
    def __init__(self, outputs):
        self.outputs = list(outputs)

    def __call__(self, window, start, end):
        words = self.outputs.pop(0) if self.outputs else []
        return Hypothesis(words, [start + 0.1 * (i + 1) for i in range(len(words))], False)


def _stream(seconds):
    return AudioStream(np.zeros((int(seconds * 10), 2)), FPS)


def test_empty_transcriber_confirms_nothing_until_flush():
    res = run_session(_stream(3.0), Fixed([]), SessionConfig(1.0, 30.0))
    assert res.events == [] and res.final_transcript == []
    assert all(c == 0.0 for _, _, c in res.cursor_trace)
    assert res.counters["invocations"] == 4 and res.counters["ticks"] == 3


def test_identical_hypotheses_confirm_at_second_tick():
    res = run_session(_stream(3.0), Fixed([["a", "b", "c"], ["a", "b", "c"]]), SessionConfig(1.0, 30.0))
    conf = [e for e in res.events if e.kind is EventKind.CONFIRMED]
    assert [e.word for e in conf] == ["a", "b", "c"] and {e.tick for e in conf} == {2}
    assert res.final_transcript == ["a", "b", "c"]


def test_flush_confirms_residual_hypotheses():
    res = run_session(_stream(2.0), Fixed([["a"], ["b"], ["b", "c"]]), SessionConfig(1.0, 30.0))
    assert res.final_transcript == ["b", "c"]
    assert res.events[-1].tick == 3 and res.events[-1].kind is EventKind.CONFIRMED


def test_transcriber_failure_marks_incomplete():
    class Boom(Fixed):
        def __call__(self, window, start, end):
            if not self.outputs:
                raise RuntimeError("boom")
            return super().__call__(window, start, end)

    res = run_session(_stream(5.0), Boom([["a"], ["a"]]), SessionConfig(1.0, 30.0))
    assert not res.complete and "boom" in res.error
    assert res.final_transcript == ["a"]
    assert session_report(res, ReferenceTranscript((ReferenceWord("a", 0, 1),))).partial


def test_tick_count_and_emit_times():
    for dur, interval in [(3.0, 1.0), (3.1, 1.0), (2.0, 0.3), (0.1, 0.5)]:
        stream = _stream(dur)
        res = run_session(stream, Fixed([["x"]] * 50), SessionConfig(interval, 30.0, 0.2))
        n = math.ceil(round(stream.total_duration / interval, 9))
        assert res.counters["ticks"] == n and res.counters["invocations"] == n + 1
        for e in res.events:
            assert e.emit_time == pytest.approx(e.tick * interval + 0.2)


def _check_invariants(res):
    times = [e.emit_time for e in res.events]
    assert times == sorted(times)
    confirmed = {}
    for e in res.events:
        assert e.word_index not in confirmed, "event touches a confirmed slot"
        if e.kind is EventKind.CONFIRMED:
            confirmed[e.word_index] = e.word
    cursors = [c for _, _, c in res.cursor_trace]
    assert cursors == sorted(cursors)
    prev = []
    for b in res.buffers:
        assert list(b.words[: len(prev)]) == prev
        prev = list(b.words[: b.n_confirmed])


@pytest.mark.parametrize("seed", range(6))
def test_noiseless_scripted_session(seed):
    stream, ref = _utt(seed)
    c, interval = 0.15, 0.5
    res = run_session(stream, ScriptedTranscriber(ref, stream.total_duration), SessionConfig(interval, 30.0, c))
    _check_invariants(res)
    rep = session_report(res, ref)
    assert rep.wer.errors == 0 and rep.corrections.total == 0
    for h, k in zip(rep.hypothesis_latency.samples, rep.confirmed_latency.samples):
        assert c - 1e-9 <= h.latency <= c + interval + 1e-9
        assert k.latency > h.latency


def test_agreement_soundness_in_noisy_sessions():
    for seed in range(10):
        stream, ref = _utt(seed, 12)
        tr = ScriptedTranscriber(ref, stream.total_duration, 0.3, 0.2, 0.2, seed=seed)
        res = run_session(stream, tr, SessionConfig(0.4, 30.0))
        _check_invariants(res)
        # every word confirmed before the flush appeared in two consecutive buffers at that slot
        flush_tick = res.cursor_trace[-1][0]
        for e in res.events:
            if e.kind is EventKind.CONFIRMED and e.tick < flush_tick:
                b_prev, b_cur = res.buffers[e.tick - 2], res.buffers[e.tick - 1]
                assert b_prev.words[e.word_index] == b_cur.words[e.word_index] == e.word


def test_mean_latency_for_uniform_word_ends():
    samples = []
    for seed in range(40):
        stream, ref = _utt(seed, 10)
        res = run_session(stream, ScriptedTranscriber(ref, stream.total_duration), SessionConfig(0.5, 30.0))
        samples += [s.latency for s in session_report(res, ref).hypothesis_latency.samples]
    assert all(0 <= s <= 0.5 + 1e-9 for s in samples)
    assert np.mean(samples) == pytest.approx(0.25, abs=0.03)


def test_corrections_match_injected_schedule():
    for seed in range(30):
        stream, ref = _utt(seed, 10)
        tr = ScriptedTranscriber(ref, stream.total_duration, 0.25, 0.25, 0.25, seed=seed)
        res = run_session(stream, tr, SessionConfig(0.5, 30.0))
        assert count_corrections(res.buffers) == tr.expected_corrections()
        assert session_report(res, ref).wer.errors == 0


def test_sub_every_word_restored_before_confirmation():
    stream, ref = _utt(3, 10)
    tr = ScriptedTranscriber(ref, stream.total_duration, p_sub=1.0)
    res = run_session(stream, tr, SessionConfig(0.5, 30.0))
    rep = session_report(res, ref)
    assert rep.wer.errors == 0
    assert rep.corrections.substitutions == tr.applied_counts()["sub"] > 0
    # words revealed together share a tick, so only the newest is corrupted
    assert rep.corrections.substitutions <= len(ref.words)


def test_event_log_is_deterministic_and_round_trips():
    stream, ref = _utt(1)
    logs = []
    for _ in range(2):
        tr = ScriptedTranscriber(ref, stream.total_duration, 0.2, 0.2, 0.2, seed=9)
        logs.append(events_to_jsonl(run_session(stream, tr, SessionConfig(0.7, 30.0, 0.05)).events))
    assert logs[0] == logs[1]
    events = events_from_jsonl(logs[0])
    assert events_to_jsonl(events) == logs[0]
    assert list(__import__("json").loads(logs[0].splitlines()[0])) == ["word", "kind", "emit_time", "word_index", "tick"]


def test_model_transcriber_cache_gives_identical_log():
    cfg = ModelConfig(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, vocab_size=20,
                      n_audio_frames=30, d_feat=8, frames_per_second=FPS, n_text_ctx=12, seed=2)
    w = init_weights(cfg)
    stream, ref = _utt(0, 6)
    words = [f"w{i}" for i in range(cfg.n_text_tokens)]
    runs = []
    for use_cache in (True, False):
        tr = ModelTranscriber(w, AttentionMaskSpec.block_diagonal(5), words, use_cache=use_cache)
        res = run_session(stream, tr, SessionConfig(1.0, float(cfg.window_seconds)))
        _check_invariants(res)
        runs.append((events_to_jsonl(res.events), dict(res.counters)))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1]["encoder_blocks_cached"] > 0 and runs[1][1]["encoder_blocks_cached"] == 0
    total = runs[0][1]["encoder_blocks_computed"] + runs[0][1]["encoder_blocks_cached"]
    assert total == runs[1][1]["encoder_blocks_computed"]


def test_scripted_probabilities_validated():
    _, ref = _utt(0)
    with pytest.raises(ConfigError):
        ScriptedTranscriber(ref, 10.0, 0.6, 0.6)
    with pytest.raises(ConfigError):
        ScriptedTranscriber(ref, 10.0, -0.1)
