"""Streaming speech recognition toolkit on a toy encoder-decoder.

Block-masked encoding with silence caching, KV-cached greedy and
speculative decoding, outlier-decomposed palettization, a simulated
LocalAgreement streaming engine and streaming evaluation metrics.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import StreamASRError
from .masks import AttentionMaskSpec, MaskKind, build_mask, count_attention_score_entries, encoder_flops
from .metrics import (
    CorrectionStats,
    HypothesisBuffer,
    ReferenceTranscript,
    ReferenceWord,
    SessionReport,
    WERBreakdown,
    count_corrections,
    merge_reports,
    normalize,
    per_word_latency,
    session_report,
    wer,
)
from .model import (
    DecoderKVCache,
    ModelConfig,
    ModelWeights,
    build_silence_cache,
    decode_full,
    decode_step,
    encode,
    encode_with_cache,
    greedy_decode,
    init_weights,
)
from .odmbp import (
    OutlierPolicy,
    allocate_bits,
    compress_checkpoint,
    compressed_forward,
    dequantize,
    palettize,
    split_outliers,
)
from .speculative import DrafterConfig, draft, init_drafter, speculative_decode, verify
from .streaming import (
    AudioStream,
    LocalAgreement,
    SessionConfig,
    StreamCursor,
    TranscriptEvent,
    advance_cursor,
    local_agreement,
    run_session,
    window_features,
)
from .transcribers import ModelTranscriber, ScriptedTranscriber

__version__ = "0.1.0"

__all__ = [
    "AttentionMaskSpec",
    "AudioStream",
    "CorrectionStats",
    "DecoderKVCache",
    "DrafterConfig",
    "HypothesisBuffer",
    "LocalAgreement",
    "MaskKind",
    "ModelConfig",
    "ModelTranscriber",
    "ModelWeights",
    "OutlierPolicy",
    "ReferenceTranscript",
    "ReferenceWord",
    "ScriptedTranscriber",
    "SessionConfig",
    "SessionReport",
    "StreamASRError",
    "StreamCursor",
    "TranscriptEvent",
    "WERBreakdown",
    "__version__",
    "advance_cursor",
    "allocate_bits",
    "build_mask",
    "build_silence_cache",
    "compress_checkpoint",
    "compressed_forward",
    "count_attention_score_entries",
    "count_corrections",
    "decode_full",
    "decode_step",
    "dequantize",
    "draft",
    "encode",
    "encode_with_cache",
    "encoder_flops",
    "greedy_decode",
    "init_drafter",
    "init_weights",
    "load_checkpoint",
    "local_agreement",
    "merge_reports",
    "normalize",
    "palettize",
    "per_word_latency",
    "run_session",
    "save_checkpoint",
    "session_report",
    "speculative_decode",
    "split_outliers",
    "verify",
    "wer",
    "window_features",
]
