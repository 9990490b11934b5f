import numpy as np
import pytest

from streamasr.errors import ConfigError
from streamasr.masks import AttentionMaskSpec
from streamasr.model import DecoderKVCache, ModelConfig, decode_step, encode, greedy_decode, init_weights
from streamasr.speculative import (
    AcceptanceStats,
    DraftBeam,
    DrafterConfig,
    draft,
    drafter_step,
    init_drafter,
    speculative_decode,
    speedup_estimate,
    verify,
)


def _setup(seed, vocab=20):
    cfg = ModelConfig(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=2, vocab_size=vocab,
                      n_audio_frames=8, d_feat=4, n_text_ctx=40, seed=seed)
    w = init_weights(cfg)
    feats = np.random.default_rng(seed).standard_normal((8, 4)).astype(np.float32)
    return w, encode(w, feats, AttentionMaskSpec.full())


def _naive_beam(dw, hidden, last, width, length):
    """Plain-Python beam search with the documented tie order."""
    state0 = np.tanh(hidden.astype(np.float64) @ dw["w_init"] + dw["b_init"])
    beams = [((), 0.0, state0, last)]
    for _ in range(length):
        pool = []
        for bi, (seq, score, st, inp) in enumerate(beams):
            new, logp = drafter_step(dw, st[None, :], np.array([inp]), hidden)
            for tok in range(dw.config.vocab_size):
                pool.append((-(score + logp[0, tok]), bi, tok, seq + (tok,), score + logp[0, tok], new[0]))
        pool.sort(key=lambda r: (r[0], r[1], r[2]))
        beams = [(r[3], r[4], r[5], r[2]) for r in pool[:width]]
    return [b[0] for b in beams], [b[1] for b in beams]


@pytest.mark.parametrize("seed", range(5))
def test_draft_matches_naive_beam_search(seed):
    w, _ = _setup(seed, vocab=12)
    dw = init_drafter(DrafterConfig(12, 16, hidden_size=8, beam_width=3, beam_length=3, seed=seed))
    hidden = np.random.default_rng(seed).standard_normal(16).astype(np.float32)
    beam = draft(dw, hidden, 5)
    seqs, scores = _naive_beam(dw, hidden, 5, 3, 3)
    assert [tuple(c) for c in beam.candidates] == seqs
    np.testing.assert_allclose(beam.scores, scores, rtol=1e-12)
    assert np.all(np.diff(beam.scores) <= 0)
    assert len(set(seqs)) == 3


def test_single_step_beam_is_exact_top_k():
    dw = init_drafter(DrafterConfig(15, 16, beam_width=5, beam_length=1, seed=2))
    hidden = np.ones(16, dtype=np.float32)
    beam = draft(dw, hidden, 0)
    _, logp = drafter_step(dw, np.tanh(hidden @ dw["w_init"])[None, :], np.array([0]), hidden)
    order = sorted(range(15), key=lambda t: (-logp[0, t], t))[:5]
    assert beam.candidates[:, 0].tolist() == order


@pytest.mark.parametrize("batched", [True, False])
def test_verify_accepts_longest_greedy_prefix(batched):
    w, enc = _setup(7)
    cfg = w.config
    greedy = greedy_decode(w, enc, 10)
    cache = DecoderKVCache.for_config(cfg)
    decode_step(w, cfg.sot_id, cache, enc)
    # candidates agreeing with greedy for 0, 2 and 4 tokens
    g = greedy[1:5]
    wrong = [(t + 1) % (cfg.vocab_size - 2) for t in g]
    cands = np.array([[wrong[0]] + g[1:], g[:2] + wrong[2:], g])
    beam = DraftBeam(greedy[0], cands, np.zeros(3))
    res = verify(w, cache, enc, beam, batched=batched)
    if cfg.eot_id in greedy[:6]:
        pytest.skip("greedy sequence ended too early for this seed")
    assert res.accepted == g and res.beam_index == 2
    assert res.bonus == greedy[5]
    assert cache.length == 1 + 1 + 4
    ref = DecoderKVCache.for_config(cfg)
    for t in [cfg.sot_id] + greedy[:5]:
        decode_step(w, t, ref, enc)
    np.testing.assert_array_equal(cache.keys[:, : cache.length], ref.keys[:, : ref.length])
    np.testing.assert_array_equal(cache.last_hidden, ref.last_hidden)


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("batched", [True, False])
def test_lossless(seed, batched):
    w, enc = _setup(seed)
    dw = init_drafter(DrafterConfig.for_target(w, seed=seed + 100))
    for max_tokens in (1, 7, 30):
        out, stats = speculative_decode(w, dw, enc, max_tokens, batched=batched)
        assert out == greedy_decode(w, enc, max_tokens)
        assert stats.accepted_tokens == len(out)
        assert 1 <= stats.tokens_per_step <= 5


def test_oracle_drafter_accepts_full_beams(monkeypatch):
    # a drafter whose top beam is the greedy continuation accepts L tokens plus the bonus each round
    import streamasr.speculative as spec

    w, enc = _setup(4)
    greedy = greedy_decode(w, enc, 30)
    assert len(greedy) == 30
    rounds = []

    def perfect_draft(dw, hidden, last):
        pos = len(rounds) * 5 + 1
        rounds.append(pos)
        cont = (greedy + [0] * 10)[pos : pos + 4]
        c = np.array([cont] + [[(t + 1) % 10 for t in cont]] * 3)
        return DraftBeam(last, c, np.zeros(4))

    monkeypatch.setattr(spec, "draft", perfect_draft)
    out, stats = speculative_decode(w, init_drafter(DrafterConfig.for_target(w)), enc, 30)
    assert out == greedy
    # first step is a plain decode; then 5 tokens per verification round
    assert stats.steps == 1 + 6 and stats.tokens_per_step == 30 / 7


def test_stats_schema_and_speedup():
    s = AcceptanceStats(steps=4, accepted_tokens=10, target_passes=4, drafter_invocations=12, verification_width=16)
    assert list(s.to_dict()) == ["steps", "accepted_tokens", "tokens_per_step", "target_passes",
                                 "drafter_invocations", "verification_width"]
    assert s.tokens_per_step == 2.5
    assert speedup_estimate(s) == 2.5
    assert speedup_estimate(s, verification_overhead=2.0) == 1.25
    assert speedup_estimate(s, drafter_cost=1 / 12) == 2.0
    assert DrafterConfig(20, 16).verification_width == 16


def test_drafter_config_validation():
    with pytest.raises(ConfigError):
        DrafterConfig(4, 16, beam_width=5)
    with pytest.raises(ConfigError):
        DrafterConfig(20, 16, beam_length=0)
    w, enc = _setup(0)
    with pytest.raises(ConfigError):
        speculative_decode(w, init_drafter(DrafterConfig(30, 16)), enc, 5)
