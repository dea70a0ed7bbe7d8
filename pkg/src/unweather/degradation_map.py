"""Per-pixel degradation map via cross-attention against the prior tokens.

Image features query the prior: every pixel's map value is the convex
combination (softmax over the prior rows) of the projected prior rows, so
pixels "read out" how degraded they are from the descriptor embedding.

Dot products are not scaled by 1/sqrt(C) by default; a ``scaled`` flag
turns the conventional scaling on.  Attention is single-head.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .validation import DimensionError


def measure_degradation_map(
    x: T.Tensor,
    prior_emb: T.Tensor,
    params: dict[str, T.Tensor],
    prefix: str = "dmm",
    scaled: bool = False,
) -> T.Tensor:
    """Cross-attend H x W x C features against L x C prior tokens.

    Returns an H x W x C map whose pixels lie in the convex hull of the
    projected prior rows.
    """
    wq, wk, wv = params[f"{prefix}.wq"], params[f"{prefix}.wk"], params[f"{prefix}.wv"]
    if x.data.ndim != 3:
        raise DimensionError(f"degradation map: expected H x W x C features, got {x.shape}")
    h, w, c = x.shape
    if prior_emb.data.ndim != 2 or prior_emb.shape[1] != c or wq.shape != (c, c):
        raise DimensionError(
            f"degradation map: channel widths disagree (features {x.shape}, "
            f"prior {prior_emb.shape}, projection {wq.shape})"
        )
    q = T.matmul(T.reshape(x, (h * w, c)), wq)
    k = T.matmul(prior_emb, wk)
    v = T.matmul(prior_emb, wv)
    logits = T.matmul(q, T.transpose2d(k))
    if scaled:
        logits = T.scalar_mul(logits, 1.0 / np.sqrt(c))
    attn = T.softmax_lastdim(logits)
    return T.reshape(T.matmul(attn, v), (h, w, c))


def attention_rows(x: T.Tensor, prior_emb: T.Tensor, params: dict[str, T.Tensor],
                   prefix: str = "dmm", scaled: bool = False) -> np.ndarray:
    """The softmax weights (HW x L) for contract checks and inspection."""
    c = x.shape[-1]
    with T.no_grad():
        q = T.matmul(T.reshape(x, (-1, c)), params[f"{prefix}.wq"])
        k = T.matmul(prior_emb, params[f"{prefix}.wk"])
        logits = T.matmul(q, T.transpose2d(k))
        if scaled:
            logits = T.scalar_mul(logits, 1.0 / np.sqrt(c))
        return T.softmax_lastdim(logits).data
