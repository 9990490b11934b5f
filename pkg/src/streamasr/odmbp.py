"""Outlier-decomposed mixed-bit palettization (OD-MBP).

A weight matrix is split into a dense inlier part, palettized to a
``2**n_bits`` entry lookup table, and a sparse float outlier part stored as a
position bitmap plus values.  The forward pass is the sum of a dense
dequantized product and a sparse product.

Compressed checkpoints use the ``WKCQ`` container::

    b"WKCQ" | u8 version | u32 config_len | config JSON | u32 n_records | records

Each record is a tensor header (``u16`` name length, name, ``u8`` rank,
``u32`` dims) followed by ``u8 kind``.  Kind 0 is raw float32 data.  Kind 1
is ``u8 n_bits``, ``u8 precision`` (0 = float32), the LUT, the packed indices
(``n_bits`` per code, row-major, each row padded to a byte), the outlier
bitmap (row-major, padded to a byte at the end), ``u32 nnz`` and the outlier
values in position order.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ._binary import Reader, fnv1a64, tensor_header_bytes
from .checkpoint import checkpoint_bytes
from .errors import FormatError, InvalidTensorError, ShapeError
from .model import ModelConfig, ModelWeights, tensor_layout

F32 = np.float32
MAGIC = b"WKCQ"
VERSION = 1
PRECISION_F32 = 0
KMEANS_MAX_ITER = 50


@dataclass(frozen=True)
class OutlierPolicy:
    """Per-tensor outlier rule: ``|w - mean| > sigma_threshold * std`` (population std).

    ``max_outlier_fraction`` caps the sparse branch; if the rule selects more,
    only the largest deviations are kept.  ``seed`` drives k-means seeding.
    """

    sigma_threshold: float = 3.0
    max_outlier_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_threshold > 0:
            raise ValueError("sigma_threshold must be positive")
        if not 0 <= self.max_outlier_fraction <= 1:
            raise ValueError("max_outlier_fraction must lie in [0, 1]")


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------


def _as_rows(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 0:
        return 1, 1
    if len(shape) == 1:
        return 1, shape[0]
    return shape[0], int(np.prod(shape[1:]))


def pack_indices(indices: np.ndarray, n_bits: int) -> bytes:
    rows, cols = _as_rows(indices.shape)
    idx = indices.reshape(rows, cols).astype(np.uint8)
    shifts = np.arange(n_bits - 1, -1, -1, dtype=np.uint8)
    bits = ((idx[..., None] >> shifts) & 1).reshape(rows, cols * n_bits)
    return np.packbits(bits, axis=1).tobytes()


def packed_index_nbytes(shape: tuple[int, ...], n_bits: int) -> int:
    rows, cols = _as_rows(shape)
    return rows * ((cols * n_bits + 7) // 8)


def unpack_indices(data: bytes, shape: tuple[int, ...], n_bits: int) -> np.ndarray:
    rows, cols = _as_rows(shape)
    packed = np.frombuffer(data, dtype=np.uint8).reshape(rows, -1)
    bits = np.unpackbits(packed, axis=1, count=cols * n_bits).reshape(rows, cols, n_bits)
    weights = (1 << np.arange(n_bits - 1, -1, -1)).astype(np.uint16)
    return (bits.astype(np.uint16) @ weights).astype(np.uint8).reshape(shape)


# ---------------------------------------------------------------------------
# outlier split
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SparseOutliers:
    """Outlier weights: a row-major position bitmap plus values in position order."""

    shape: tuple[int, ...]
    bitmap: bytes
    values: np.ndarray = field(repr=False)

    @classmethod
    def from_mask(cls, mask: np.ndarray, dense: np.ndarray) -> "SparseOutliers":
        values = np.asarray(dense, dtype=F32)[mask].ravel()
        return cls(tuple(mask.shape), np.packbits(mask.ravel()).tobytes(), values)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nnz(self) -> int:
        return len(self.values)

    def mask(self) -> np.ndarray:
        bits = np.unpackbits(np.frombuffer(self.bitmap, dtype=np.uint8), count=self.size)
        return bits.astype(bool).reshape(self.shape)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=F32)
        out[self.mask()] = self.values
        return out


def split_outliers(W: np.ndarray, policy: OutlierPolicy = OutlierPolicy()):
    """Split ``W`` into ``(inlier_values, inlier_mask, SparseOutliers)``."""
    W = np.asarray(W, dtype=F32)
    if W.size == 0:
        raise InvalidTensorError("cannot split an empty tensor")
    if not np.all(np.isfinite(W)):
        raise InvalidTensorError("tensor contains NaN or Inf")
    w64 = W.astype(np.float64)
    mean = w64.mean()
    std = w64.std()
    dev = np.abs(w64 - mean)
    if std == 0:
        is_out = np.zeros(W.shape, dtype=bool)
    else:
        is_out = dev > policy.sigma_threshold * std
        cap = int(math.floor(policy.max_outlier_fraction * W.size))
        if is_out.sum() > cap:
            order = np.argsort(-dev.ravel(), kind="stable")[:cap]
            is_out = np.zeros(W.size, dtype=bool)
            is_out[order] = True
            is_out = is_out.reshape(W.shape)
    inlier_mask = ~is_out
    return W[inlier_mask], inlier_mask, SparseOutliers.from_mask(is_out, W)


# ---------------------------------------------------------------------------
# palettization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PalettizedTensor:
    """Lookup table of ``2**n_bits`` ascending centroids plus one code per position.

    ``radius`` is the largest distance from an inlier value to its centroid.
    """

    n_bits: int
    lut: np.ndarray
    indices: np.ndarray
    radius: float = 0.0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.indices.shape

    def packed(self) -> bytes:
        return pack_indices(self.indices, self.n_bits)


def _assign(values: np.ndarray, sorted_centroids: np.ndarray) -> np.ndarray:
    # exact midpoints go to the lower centroid
    mids = (sorted_centroids[:-1] + sorted_centroids[1:]) / 2.0
    return np.searchsorted(mids, values, side="left")


def _sse(values: np.ndarray, centroids: np.ndarray) -> float:
    c = np.sort(centroids)
    return float(np.sum((values - c[_assign(values, c)]) ** 2))


def _lloyd(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    c = np.sort(centroids)
    assign = _assign(values, c)
    for _ in range(KMEANS_MAX_ITER):
        counts = np.bincount(assign, minlength=len(c))
        sums = np.bincount(assign, weights=values, minlength=len(c))
        means = np.divide(sums, counts, out=c.copy(), where=counts > 0)
        c = np.sort(means.astype(F32).astype(np.float64))
        new = _assign(values, c)
        if np.array_equal(new, assign):
            break
        assign = new
    return c


def _seed_more(values: np.ndarray, centroids: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Extend ``centroids`` to ``k`` entries by D^2 sampling (k-means++ seeding)."""
    chosen = list(centroids)
    if chosen:
        d2 = np.min((values[:, None] - np.asarray(chosen)[None, :]) ** 2, axis=1)
    else:
        first = values[rng.integers(len(values))]
        chosen.append(first)
        d2 = (values - first) ** 2
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0:
            chosen.append(chosen[-1])
            continue
        pick = values[rng.choice(len(values), p=d2 / total)]
        chosen.append(pick)
        d2 = np.minimum(d2, (values - pick) ** 2)
    return np.asarray(chosen, dtype=np.float64)


def kmeans_levels(values: np.ndarray, max_bits: int, seed: int = 0) -> list[np.ndarray]:
    """Sorted float32-representable centroids for 1..max_bits bits.

    Level ``b`` starts from level ``b - 1``'s centroids plus newly seeded ones,
    so its squared error is never larger than level ``b - 1``'s.
    """
    values = np.asarray(values, dtype=F32).astype(np.float64).ravel()
    if values.size == 0:
        raise InvalidTensorError("palettize needs at least one value")
    rng = np.random.default_rng(seed)
    uniq = np.unique(values)
    levels = []
    prev = np.zeros(0)
    for b in range(1, max_bits + 1):
        k = 1 << b
        if len(uniq) <= k:
            c = np.concatenate([uniq, np.full(k - len(uniq), uniq[-1])])
        else:
            init = np.sort(_seed_more(values, prev, k, rng).astype(F32).astype(np.float64))
            c = _lloyd(values, init)
            init_sse = _sse(values, init)
            if _sse(values, c) > init_sse:
                c = init
        c = np.sort(c)
        levels.append(c)
        prev = c
    return levels


def _to_palettized(values, c, n_bits, shape, inlier_mask) -> PalettizedTensor:
    values = np.asarray(values, dtype=F32).astype(np.float64).ravel()
    lut = c.astype(F32)
    codes = _assign(values, lut.astype(np.float64))
    radius = float(np.max(np.abs(values - lut[codes].astype(np.float64)))) if values.size else 0.0
    if inlier_mask is None:
        indices = codes.astype(np.uint8).reshape(shape if shape is not None else values.shape)
    else:
        indices = np.zeros(inlier_mask.shape, dtype=np.uint8)
        indices[inlier_mask] = codes
    return PalettizedTensor(n_bits, lut, indices, radius)


def palettize(
    values: np.ndarray,
    n_bits: int,
    shape: tuple[int, ...] | None = None,
    inlier_mask: np.ndarray | None = None,
    seed: int = 0,
) -> PalettizedTensor:
    """1-D k-means palettization of ``values`` into ``2**n_bits`` centroids.

    With ``inlier_mask`` the codes are scattered into a tensor of that shape
    and every other position gets code 0.  Inputs with at most ``2**n_bits``
    distinct values are reproduced exactly.
    """
    if not 1 <= n_bits <= 8:
        raise ValueError("n_bits must lie in [1, 8]")
    c = kmeans_levels(values, n_bits, seed)[-1]
    return _to_palettized(values, c, n_bits, shape, inlier_mask)


def dequantize(p: PalettizedTensor) -> np.ndarray:
    if len(p.lut) != 1 << p.n_bits:
        raise FormatError(f"LUT has {len(p.lut)} entries, expected {1 << p.n_bits}")
    if p.indices.size and int(p.indices.max()) >= len(p.lut):
        raise FormatError("palette index out of range")
    return p.lut[p.indices]


def sparse_matvec(s: SparseOutliers, x: np.ndarray) -> np.ndarray:
    """``O @ x`` for the outlier-only matrix ``O`` (zeros at non-outlier positions)."""
    rows, cols = _as_rows(s.shape)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != cols:
        raise ShapeError(f"vector length {x.shape[0]} does not match inner dimension {cols}")
    pos = np.flatnonzero(s.mask().ravel())
    r, c = np.divmod(pos, cols)
    y = np.zeros((rows,) + x.shape[1:])
    contrib = s.values.astype(np.float64).reshape((-1,) + (1,) * (x.ndim - 1)) * x[c]
    np.add.at(y, r, contrib)
    return y


# ---------------------------------------------------------------------------
# compressed layers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CompressedLinear:
    inliers: PalettizedTensor
    outliers: SparseOutliers
    bias: np.ndarray | None = None
    original_fingerprint: int = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.inliers.shape

    def reconstruct(self) -> np.ndarray:
        """Dense matrix: dequantized inliers with outlier positions replaced."""
        out = dequantize(self.inliers)
        mask = self.outliers.mask()
        out[mask] = self.outliers.values
        return out


def compress_tensor(
    W: np.ndarray, n_bits: int, policy: OutlierPolicy = OutlierPolicy(), bias: np.ndarray | None = None
) -> CompressedLinear:
    W = np.asarray(W, dtype=F32)
    values, inlier_mask, outliers = split_outliers(W, policy)
    if values.size:
        inliers = palettize(values, n_bits, inlier_mask=inlier_mask, seed=policy.seed)
    else:
        inliers = PalettizedTensor(n_bits, np.zeros(1 << n_bits, dtype=F32), np.zeros(W.shape, dtype=np.uint8))
    fp = fnv1a64(np.ascontiguousarray(W, dtype="<f4").tobytes())
    return CompressedLinear(inliers, outliers, bias, fp)


def compressed_forward(layer: CompressedLinear, X: np.ndarray) -> np.ndarray:
    """``Y = dequant(inliers) @ X + outliers @ X + bias``; the two branches are position-disjoint."""
    X = np.asarray(X, dtype=np.float64)
    rows, cols = _as_rows(layer.shape)
    if X.shape[0] != cols:
        raise ShapeError(f"input length {X.shape[0]} does not match inner dimension {cols}")
    dense = dequantize(layer.inliers).astype(np.float64).reshape(rows, cols)
    dense[layer.outliers.mask().reshape(rows, cols)] = 0.0
    y = dense @ X + sparse_matvec(layer.outliers, X)
    if layer.bias is not None:
        b = np.asarray(layer.bias, dtype=np.float64)
        y = y + b.reshape((-1,) + (1,) * (X.ndim - 1))
    return y


def tensor_errors(W: np.ndarray, layer: CompressedLinear) -> tuple[float, float]:
    """``(max_abs_error, rel_frobenius_error)`` of the reconstruction."""
    W64 = np.asarray(W, dtype=np.float64)
    diff = layer.reconstruct().astype(np.float64) - W64
    norm = np.linalg.norm(W64)
    rel = float(np.linalg.norm(diff) / norm) if norm > 0 else float(np.linalg.norm(diff) > 0)
    return float(np.max(np.abs(diff))), rel


# ---------------------------------------------------------------------------
# checkpoint-level compression
# ---------------------------------------------------------------------------


def compressible_tensors(weights: ModelWeights, include_embeddings: bool = False) -> list[str]:
    roles = {"matrix", "embedding", "pos_embedding"} if include_embeddings else {"matrix"}
    return [name for name, _, role in tensor_layout(weights.config) if role in roles]


@dataclass
class BitAllocation:
    bits: dict[str, int]
    errors: dict[str, float]
    flagged: list[str]


def allocate_bits(
    weights: ModelWeights,
    target_rel_error: float,
    candidate_bits=range(1, 9),
    policy: OutlierPolicy = OutlierPolicy(),
    include_embeddings: bool = False,
) -> BitAllocation:
    """Smallest bit width per tensor whose relative Frobenius error meets the target.

    Errors are non-increasing in the bit width, so the scan stops at the
    first width that qualifies.  Tensors that never qualify get the largest
    candidate and are flagged.
    """
    cands = sorted(int(b) for b in candidate_bits)
    if not cands or cands[0] < 1 or cands[-1] > 8:
        raise ValueError("candidate bit widths must lie in [1, 8]")
    bits, errors, flagged = {}, {}, []
    for name in compressible_tensors(weights, include_embeddings):
        W = weights[name]
        values, inlier_mask, outliers = split_outliers(W, policy)
        levels = kmeans_levels(values, cands[-1], policy.seed) if values.size else None
        chosen = None
        for b in cands:
            if levels is None:
                err = 0.0
            else:
                inl = _to_palettized(values, levels[b - 1], b, None, inlier_mask)
                err = tensor_errors(W, CompressedLinear(inl, outliers))[1]
            if err <= target_rel_error:
                chosen = b
                errors[name] = err
                break
        if chosen is None:
            chosen = cands[-1]
            errors[name] = err
            flagged.append(name)
        bits[name] = chosen
    return BitAllocation(bits, errors, flagged)


def uniform_bits(weights: ModelWeights, n_bits: int, include_embeddings: bool = False) -> BitAllocation:
    names = compressible_tensors(weights, include_embeddings)
    return BitAllocation({n: n_bits for n in names}, {}, [])


@dataclass
class CompressedCheckpoint:
    config: ModelConfig
    records: dict[str, np.ndarray | CompressedLinear]

    def decompress(self) -> ModelWeights:
        tensors = {
            name: rec.reconstruct() if isinstance(rec, CompressedLinear) else rec
            for name, rec in self.records.items()
        }
        return ModelWeights(self.config, tensors)


def _record_bytes(name: str, rec) -> bytes:
    if isinstance(rec, CompressedLinear):
        shape = rec.shape
        pal, out = rec.inliers, rec.outliers
        return b"".join([
            tensor_header_bytes(name, shape),
            struct.pack("<BBB", 1, pal.n_bits, PRECISION_F32),
            np.ascontiguousarray(pal.lut, dtype="<f4").tobytes(),
            pal.packed(),
            out.bitmap,
            struct.pack("<I", out.nnz),
            np.ascontiguousarray(out.values, dtype="<f4").tobytes(),
        ])
    arr = np.asarray(rec)
    return tensor_header_bytes(name, arr.shape) + b"\x00" + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def compressed_checkpoint_bytes(ckpt: CompressedCheckpoint) -> bytes:
    cfg = ckpt.config.to_json()
    parts = [MAGIC, struct.pack("<BI", VERSION, len(cfg)), cfg, struct.pack("<I", len(ckpt.records))]
    parts += [_record_bytes(n, r) for n, r in ckpt.records.items()]
    return b"".join(parts)


def parse_compressed_checkpoint(data: bytes) -> CompressedCheckpoint:
    r = Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a WKCQ file (bad magic)")
    version, cfg_len = r.unpack("BI")
    if version != VERSION:
        raise FormatError(f"unsupported WKCQ version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(cfg_len)))
    except (ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"bad config block: {exc}") from exc
    (count,) = r.unpack("I")
    records = {}
    for _ in range(count):
        name, shape = r.tensor_header()
        size = int(np.prod(shape)) if shape else 1
        (kind,) = r.unpack("B")
        if kind == 0:
            records[name] = r.floats(size).reshape(shape)
            continue
        if kind != 1:
            raise FormatError(f"{name}: unknown record kind {kind}")
        n_bits, precision = r.unpack("BB")
        if not 1 <= n_bits <= 8 or precision != PRECISION_F32:
            raise FormatError(f"{name}: bad n_bits {n_bits} or precision tag {precision}")
        lut = r.floats(1 << n_bits)
        indices = unpack_indices(r.take(packed_index_nbytes(shape, n_bits)), shape, n_bits)
        bitmap = r.take((size + 7) // 8)
        (nnz,) = r.unpack("I")
        outliers = SparseOutliers(shape, bitmap, r.floats(nnz))
        if int(outliers.mask().sum()) != nnz:
            raise FormatError(f"{name}: bitmap popcount does not match nnz={nnz}")
        records[name] = CompressedLinear(PalettizedTensor(n_bits, lut, indices), outliers)
    if not r.done():
        raise FormatError("trailing bytes after records")
    return CompressedCheckpoint(config, records)


def save_compressed(ckpt: CompressedCheckpoint, path: str | os.PathLike) -> int:
    data = compressed_checkpoint_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_compressed(path: str | os.PathLike) -> CompressedCheckpoint:
    with open(path, "rb") as fh:
        return parse_compressed_checkpoint(fh.read())


@dataclass
class TensorReport:
    n_bits: int
    outlier_fraction: float
    max_abs_error: float
    rel_frobenius_error: float
    stored_bytes: int
    original_bytes: int
    lut_bytes: int
    index_bytes: int
    bitmap_bytes: int
    outlier_bytes: int
    header_bytes: int
    flagged: bool = False


@dataclass
class CompressionReport:
    tensors: dict[str, TensorReport]
    original_bytes: int
    compressed_bytes: int
    raw_record_bytes: int
    file_header_bytes: int

    @property
    def ratio(self) -> float:
        return self.original_bytes / self.compressed_bytes

    @property
    def matrix_original_bytes(self) -> int:
        return sum(t.original_bytes for t in self.tensors.values())

    @property
    def matrix_compressed_bytes(self) -> int:
        return sum(t.stored_bytes for t in self.tensors.values())

    def to_dict(self) -> dict:
        return {
            "tensors": {n: vars(t) for n, t in self.tensors.items()},
            "totals": {
                "original_bytes": self.original_bytes,
                "compressed_bytes": self.compressed_bytes,
                "ratio": self.ratio,
                "matrix_original_bytes": self.matrix_original_bytes,
                "matrix_compressed_bytes": self.matrix_compressed_bytes,
                "matrix_ratio": self.matrix_original_bytes / self.matrix_compressed_bytes,
                "raw_record_bytes": self.raw_record_bytes,
                "file_header_bytes": self.file_header_bytes,
            },
        }


def compress_checkpoint(
    weights: ModelWeights,
    policy: OutlierPolicy,
    allocation: BitAllocation | dict[str, int],
) -> tuple[CompressedCheckpoint, CompressionReport]:
    """Replace each tensor named in ``allocation`` by a :class:`CompressedLinear`.

    ``original_bytes`` is the size of the float32 ``WKCK`` checkpoint and
    ``compressed_bytes`` the exact size of the ``WKCQ`` serialization.
    """
    if isinstance(allocation, BitAllocation):
        bits, flagged = allocation.bits, set(allocation.flagged)
    else:
        bits, flagged = dict(allocation), set()
    records: dict = {}
    reports: dict[str, TensorReport] = {}
    raw_bytes = 0
    for name, arr in weights.tensors.items():
        if name not in bits:
            records[name] = arr
            raw_bytes += len(_record_bytes(name, arr))
            continue
        if arr.ndim != 2:
            raise ShapeError(f"{name} is not a matrix")
        layer = compress_tensor(arr, bits[name], policy)
        records[name] = layer
        max_err, rel_err = tensor_errors(arr, layer)
        n = 1 << layer.inliers.n_bits
        lut_b = 4 * n
        idx_b = packed_index_nbytes(arr.shape, layer.inliers.n_bits)
        bm_b = len(layer.outliers.bitmap)
        out_b = 4 * layer.outliers.nnz
        stored = len(_record_bytes(name, layer))
        reports[name] = TensorReport(
            n_bits=layer.inliers.n_bits,
            outlier_fraction=layer.outliers.nnz / arr.size,
            max_abs_error=max_err,
            rel_frobenius_error=rel_err,
            stored_bytes=stored,
            original_bytes=4 * arr.size,
            lut_bytes=lut_b,
            index_bytes=idx_b,
            bitmap_bytes=bm_b,
            outlier_bytes=out_b,
            header_bytes=stored - lut_b - idx_b - bm_b - out_b,
            flagged=name in flagged,
        )
    ckpt = CompressedCheckpoint(weights.config, records)
    header = 4 + 5 + len(weights.config.to_json()) + 4
    total = header + raw_bytes + sum(r.stored_bytes for r in reports.values())
    report = CompressionReport(reports, len(checkpoint_bytes(weights)), total, raw_bytes, header)
    return ckpt, report


def check_forward_equivalence(ckpt: CompressedCheckpoint, seed: int = 0, trials: int = 4) -> float:
    """Largest relative error of :func:`compressed_forward` against the reconstructed dense product."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for rec in ckpt.records.values():
        if not isinstance(rec, CompressedLinear):
            continue
        dense = rec.reconstruct().astype(np.float64)
        for _ in range(trials):
            x = rng.standard_normal(dense.shape[1])
            ref = dense @ x
            got = compressed_forward(rec, x)
            scale = max(np.max(np.abs(ref)), 1e-30)
            worst = max(worst, float(np.max(np.abs(got - ref)) / scale))
    return worst
