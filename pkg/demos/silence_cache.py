"""Silence caching with a block-diagonal mask.

Encodes a window that is mostly zero padding, with and without the cache,
and shows that the outputs match bit for bit while most blocks are skipped.
"""

import numpy as np

from streamasr.masks import AttentionMaskSpec
from streamasr.model import ModelConfig, build_silence_cache, encode, encode_with_cache, init_weights

cfg = ModelConfig(n_audio_frames=60, d_feat=16)
weights = init_weights(cfg)
spec = AttentionMaskSpec.block_diagonal(10)
cache = build_silence_cache(weights, spec)

rng = np.random.default_rng(0)
x = np.zeros((60, 16), dtype=np.float32)
x[:17] = rng.standard_normal((17, 16))  # only the first 1.7 blocks hold speech

plain = encode(weights, x, spec)
cached = encode_with_cache(weights, x, spec, cache)
print("bit-identical:", plain.hidden.tobytes() == cached.hidden.tobytes())
print("blocks computed:", cached.blocks_computed, "cached:", cached.blocks_cached)
print("score entries:", plain.attention_score_entries, "->", cached.attention_score_entries)
