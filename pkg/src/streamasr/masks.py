"""Encoder self-attention mask family and the compute accounting built on it."""

from __future__ import annotations

import enum
import re
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidMaskError


class MaskKind(str, enum.Enum):
    FULL = "full"
    BLOCK_CAUSAL = "block_causal"
    BLOCK_DIAGONAL = "block_diagonal"


@dataclass(frozen=True)
class AttentionMaskSpec:
    """Declarative self-attention mask.

    ``block`` is measured in frames and is ignored for ``FULL``.
    """

    kind: MaskKind = MaskKind.FULL
    block: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", MaskKind(self.kind))
        if self.kind is not MaskKind.FULL and (not isinstance(self.block, (int, np.integer)) or self.block < 1):
            raise InvalidMaskError(f"block must be a positive integer, got {self.block!r}")

    @classmethod
    def full(cls) -> "AttentionMaskSpec":
        return cls(MaskKind.FULL)

    @classmethod
    def block_diagonal(cls, block: int) -> "AttentionMaskSpec":
        return cls(MaskKind.BLOCK_DIAGONAL, block)

    @classmethod
    def block_causal(cls, block: int) -> "AttentionMaskSpec":
        return cls(MaskKind.BLOCK_CAUSAL, block)

    @classmethod
    def parse(cls, text: str) -> "AttentionMaskSpec":
        """Parse ``full``, ``d<block>`` or ``c<block>``."""
        text = text.strip().lower()
        if text in ("full", "original"):
            return cls.full()
        m = re.fullmatch(r"([dc])(\d+)", text)
        if not m or int(m.group(2)) < 1:
            raise InvalidMaskError(f"cannot parse mask {text!r}; expected full, d<block> or c<block>")
        kind = MaskKind.BLOCK_DIAGONAL if m.group(1) == "d" else MaskKind.BLOCK_CAUSAL
        return cls(kind, int(m.group(2)))

    @property
    def label(self) -> str:
        if self.kind is MaskKind.FULL:
            return "full"
        return ("d" if self.kind is MaskKind.BLOCK_DIAGONAL else "c") + str(self.block)

    def n_blocks(self, seq_len: int) -> int:
        check_mask(self, seq_len)
        return 1 if self.kind is MaskKind.FULL else seq_len // self.block


def check_mask(spec: AttentionMaskSpec, seq_len: int) -> None:
    if seq_len < 1:
        raise InvalidMaskError(f"seq_len must be positive, got {seq_len}")
    if spec.kind is not MaskKind.FULL and seq_len % spec.block:
        raise InvalidMaskError(f"block {spec.block} does not divide sequence length {seq_len}")


def build_mask(spec: AttentionMaskSpec, seq_len: int) -> np.ndarray:
    """Realize ``spec`` as a ``(seq_len, seq_len)`` boolean matrix; True means "may attend"."""
    check_mask(spec, seq_len)
    if spec.kind is MaskKind.FULL:
        return np.ones((seq_len, seq_len), dtype=bool)
    block_id = np.arange(seq_len) // spec.block
    if spec.kind is MaskKind.BLOCK_DIAGONAL:
        return block_id[:, None] == block_id[None, :]
    return block_id[None, :] <= block_id[:, None]


def count_attention_score_entries(spec: AttentionMaskSpec, seq_len: int) -> int:
    """Number of unmasked query/key pairs, computed in closed form."""
    check_mask(spec, seq_len)
    if spec.kind is MaskKind.FULL:
        return seq_len * seq_len
    k = seq_len // spec.block
    if spec.kind is MaskKind.BLOCK_DIAGONAL:
        return k * spec.block * spec.block
    return spec.block * spec.block * k * (k + 1) // 2


@dataclass(frozen=True)
class EncoderFlops:
    """Itemized forward-pass FLOPs of a pre-norm Transformer encoder stack.

    One multiply-add counts as 2 FLOPs.  Layer norms, softmax and
    activations are not counted.
    """

    frames_computed: int
    attention_score_entries: int
    projections: int
    feed_forward: int
    attention_scores: int
    attention_values: int

    @property
    def attention(self) -> int:
        return self.attention_scores + self.attention_values

    @property
    def non_attention(self) -> int:
        return self.projections + self.feed_forward

    @property
    def total(self) -> int:
        return self.attention + self.non_attention

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(attention=self.attention, non_attention=self.non_attention, total=self.total)
        return d


def encoder_flops(
    spec: AttentionMaskSpec,
    seq_len: int,
    d_model: int,
    n_layers: int,
    d_ff: int | None = None,
    blocks_computed: int | None = None,
) -> EncoderFlops:
    """FLOPs for one encoder pass, optionally with only ``blocks_computed`` blocks run.

    ``blocks_computed`` applies to block-diagonal masks, where the remaining
    blocks are served from a silence cache.  Per layer, the attention cost is
    ``entries * 2 * d_model`` for the score product and the same again for
    the value product (``d_model == heads * head_dim``).
    """
    d_ff = 4 * d_model if d_ff is None else d_ff
    entries = count_attention_score_entries(spec, seq_len)
    frames = seq_len
    if blocks_computed is not None:
        if spec.kind is not MaskKind.BLOCK_DIAGONAL:
            raise InvalidMaskError("blocks_computed only applies to block-diagonal masks")
        n_blocks = seq_len // spec.block
        if not 0 <= blocks_computed <= n_blocks:
            raise InvalidMaskError(f"blocks_computed must lie in [0, {n_blocks}]")
        frames = blocks_computed * spec.block
        entries = blocks_computed * spec.block * spec.block
    return EncoderFlops(
        frames_computed=frames,
        attention_score_entries=entries,
        projections=n_layers * 4 * 2 * frames * d_model * d_model,
        feed_forward=n_layers * 2 * 2 * frames * d_model * d_ff,
        attention_scores=n_layers * 2 * entries * d_model,
        attention_values=n_layers * 2 * entries * d_model,
    )
