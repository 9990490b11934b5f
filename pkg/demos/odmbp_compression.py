"""Outlier-decomposed palettization of the toy checkpoint.

Compresses at several bit widths and reports size ratio and the relative
error of a forward pass through one compressed layer.
"""

import numpy as np

from streamasr.model import ModelConfig, init_weights
from streamasr.odmbp import OutlierPolicy, compress_checkpoint, compress_tensor, compressed_forward, uniform_bits

weights = init_weights(ModelConfig())
for bits in (8, 6, 4, 3):
    _, rep = compress_checkpoint(weights, OutlierPolicy(), uniform_bits(weights, bits))
    print(f"{bits} bits: {rep.original_bytes} -> {rep.compressed_bytes} bytes, ratio {rep.ratio:.2f}")

W = np.random.default_rng(0).standard_t(3, size=(256, 256)).astype(np.float32)
x = np.random.default_rng(1).standard_normal(256)
for bits in (8, 4, 2):
    layer = compress_tensor(W, bits)
    err = np.linalg.norm(compressed_forward(layer, x) - W @ x) / np.linalg.norm(W @ x)
    print(f"heavy-tailed layer, {bits} bits: {layer.outliers.nnz} outliers, forward rel err {err:.4f}")
