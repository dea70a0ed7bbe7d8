"""Aggregation of restoration features guided by the degradation map.

Full (all pixels against all pixels) single-head cross-attention: the
degradation map provides the queries, the intermediate restoration
features provide keys and values, so pixels that look alike in the map
pool their restorations.  A two-conv feedforward stack then restores
locality; a residual connection around it is on by default (``residual``
flag gives the literal no-residual composition).

Attention cost grows with (H*W)^2 * C, so this block must only run at the
bottleneck; the model configuration enforces a 4096-token ceiling.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .validation import DimensionError

MAX_ATTENTION_TOKENS = 4096


def attention_pool(
    deg_map: T.Tensor,
    x_int: T.Tensor,
    params: dict[str, T.Tensor],
    prefix: str = "rfa",
    scaled: bool = False,
) -> T.Tensor:
    """The raw cross-attention product, before the feedforward stack."""
    if deg_map.shape != x_int.shape:
        raise DimensionError(
            f"aggregate: map shape {deg_map.shape} and feature shape {x_int.shape} disagree"
        )
    if deg_map.data.ndim != 3:
        raise DimensionError(f"aggregate: expected H x W x C inputs, got {deg_map.shape}")
    h, w, c = x_int.shape
    q = T.matmul(T.reshape(deg_map, (h * w, c)), params[f"{prefix}.wq"])
    k = T.matmul(T.reshape(x_int, (h * w, c)), params[f"{prefix}.wk"])
    v = T.matmul(T.reshape(x_int, (h * w, c)), params[f"{prefix}.wv"])
    logits = T.matmul(q, T.transpose2d(k))
    if scaled:
        logits = T.scalar_mul(logits, 1.0 / np.sqrt(c))
    return T.reshape(T.matmul(T.softmax_lastdim(logits), v), (h, w, c))


def aggregate(
    deg_map: T.Tensor,
    x_int: T.Tensor,
    params: dict[str, T.Tensor],
    prefix: str = "rfa",
    residual: bool = True,
    scaled: bool = False,
) -> T.Tensor:
    """Map-guided pooling over all pixels followed by a convolutional FFN."""
    pooled = attention_pool(deg_map, x_int, params, prefix=prefix, scaled=scaled)
    ffn = T.conv2d(pooled, params[f"{prefix}.ffn1.w"], bias=params[f"{prefix}.ffn1.b"])
    ffn = T.conv2d(T.relu(ffn), params[f"{prefix}.ffn2.w"], bias=params[f"{prefix}.ffn2.b"])
    return T.add(ffn, pooled) if residual else ffn


def attention_rows(deg_map: T.Tensor, x_int: T.Tensor, params: dict[str, T.Tensor],
                   prefix: str = "rfa", scaled: bool = False) -> np.ndarray:
    """The softmax weights (HW x HW) for contract checks."""
    c = x_int.shape[-1]
    with T.no_grad():
        q = T.matmul(T.reshape(deg_map, (-1, c)), params[f"{prefix}.wq"])
        k = T.matmul(T.reshape(x_int, (-1, c)), params[f"{prefix}.wk"])
        logits = T.matmul(q, T.transpose2d(k))
        if scaled:
            logits = T.scalar_mul(logits, 1.0 / np.sqrt(c))
        return T.softmax_lastdim(logits).data
