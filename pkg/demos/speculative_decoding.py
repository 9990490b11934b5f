"""Speculative decoding with a small drafter and tree verification.

The output always equals plain greedy decoding; only the number of target
steps changes.
"""

import numpy as np

from streamasr.masks import AttentionMaskSpec
from streamasr.model import ModelConfig, encode, greedy_decode, init_weights
from streamasr.speculative import DrafterConfig, init_drafter, speculative_decode

cfg = ModelConfig(vocab_size=40, n_text_ctx=40, n_audio_frames=12, d_feat=8)
target = init_weights(cfg)
drafter = init_drafter(DrafterConfig.for_target(target, beam_width=4, beam_length=4, seed=9))
enc = encode(target, np.random.default_rng(3).standard_normal((12, 8)).astype(np.float32), AttentionMaskSpec.full())

greedy = greedy_decode(target, enc, 30)
spec, stats = speculative_decode(target, drafter, enc, 30)
print("identical to greedy:", spec == greedy, f"({len(spec)} tokens)")
print(f"target steps {stats.steps}, tokens/step {stats.tokens_per_step:.2f}, "
      f"verification width {stats.verification_width}")
