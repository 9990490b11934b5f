"""Attention masks and encoder FLOPs at full scale.

Prints the mask patterns for a small window, then the per-layer cost
breakdown of a 1500-frame, 32-layer encoder under several masks.
"""

from streamasr.masks import AttentionMaskSpec, build_mask, count_attention_score_entries, encoder_flops

for label in ("full", "d4", "c4"):
    spec = AttentionMaskSpec.parse(label)
    m = build_mask(spec, 8)
    print(f"{label}: {count_attention_score_entries(spec, 8)} visible entries")
    for row in m:
        print("   ", "".join("#" if v else "." for v in row))

dims = dict(seq_len=1500, d_model=1280, n_layers=32, d_ff=5120)
full = encoder_flops(AttentionMaskSpec.full(), **dims)
print(f"\n{'mask':>6} {'TFLOPs':>8} {'attention':>10} {'speedup':>8}")
for label in ("full", "d750", "d500", "d250"):
    spec = AttentionMaskSpec.parse(label)
    # in streaming only the newest block has fresh audio; the rest come from the cache
    f = encoder_flops(spec, blocks_computed=1, **dims) if label != "full" else full
    print(f"{label:>6} {f.total / 1e12:8.3f} {f.attention / f.total:10.1%} {full.total / f.total:8.2f}")
