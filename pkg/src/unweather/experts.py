"""Per-pixel sparse mixture of expert convolutions.

A bank of N trainable k x k x C x C convolution filters ("experts") is
scored per pixel from the degradation map, the top K experts are selected,
and only those are executed.  Dispatch groups pixels by expert so the
arithmetic is proportional to K, not N: one shared im2col pass (a memory
move), then one small matmul per expert over exactly the rows routed to
it.  The result is identical to masking a dense mixture to the selected
set; unselected filters never touch the output.

Selection is not differentiable; gradients flow through the selected
weights and filters only (straight-through over a fixed index set).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .validation import ConfigurationError, ContractError, DimensionError


@dataclass
class Selection:
    """Chosen experts per pixel: indices (H x W x K int) and their raw scores.

    Whole-image routing stores a single shared choice with spatial shape
    1 x 1 x K; :func:`expert_convolve` broadcasts it.
    """

    indices: np.ndarray
    weights: T.Tensor

    @property
    def top_k(self) -> int:
        return self.indices.shape[-1]


@dataclass
class FlopReport:
    """Exact multiply-accumulate counts for the sparse and dense paths."""

    sparse_macs: int
    dense_macs: int

    @property
    def ratio(self) -> float:
        return self.sparse_macs / self.dense_macs


def score_map(deg_map: T.Tensor, params: dict[str, T.Tensor], prefix: str = "score") -> T.Tensor:
    """Per-pixel selection scores: MLP C -> C (relu) -> N, softmax over N."""
    w1, b1 = params[f"{prefix}.w1"], params[f"{prefix}.b1"]
    w2, b2 = params[f"{prefix}.w2"], params[f"{prefix}.b2"]
    if deg_map.data.ndim != 3 or deg_map.shape[-1] != w1.shape[0]:
        raise DimensionError(
            f"score_map: map shape {deg_map.shape} incompatible with scorer width {w1.shape[0]}"
        )
    h, w, c = deg_map.shape
    n = w2.shape[1]
    flat = T.reshape(deg_map, (h * w, c))
    hidden = T.relu(T.add_lastdim(T.matmul(flat, w1), b1))
    logits = T.add_lastdim(T.matmul(hidden, w2), b2)
    return T.reshape(T.softmax_lastdim(logits), (h, w, n))


def pool_map(deg_map: T.Tensor) -> T.Tensor:
    """Mean over pixels, kept on the tape: H x W x C -> 1 x 1 x C."""
    h, w, c = deg_map.shape
    ones = T.Tensor(np.full((1, h * w), 1.0 / (h * w), dtype=deg_map.dtype))
    pooled = T.matmul(ones, T.reshape(deg_map, (h * w, c)))
    return T.reshape(pooled, (1, 1, c))


def select_topk(scores: T.Tensor, k: int, renormalize: bool = False) -> Selection:
    """Top-K scores per pixel; ties break to the lowest expert index.

    Weights are the raw softmax scores (they sum to < 1 when K < N) unless
    ``renormalize`` is set.
    """
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ConfigurationError(f"select_topk: K={k} out of range [1, {n}]")
    indices, weights = T.topk_lastdim(scores, k)
    if renormalize:
        weights = T.normalize_lastdim(weights)
    return Selection(indices=indices, weights=weights)


def _filter_geometry(filters: T.Tensor):
    if filters.data.ndim != 5 or filters.shape[1] != filters.shape[2]:
        raise DimensionError(
            f"expert filters: expected N x k x k x C x C, got {filters.shape}"
        )
    n, k, _, cin, cout = filters.shape
    if k % 2 == 0:
        raise ConfigurationError(f"expert filters: kernel size must be odd, got {k}")
    return n, k, cin, cout


def expert_convolve(x: T.Tensor, filters: T.Tensor, sel: Selection) -> T.Tensor:
    """Weighted sum of the selected experts' convolutions at every pixel.

    Arithmetic touches only routed (pixel, expert) pairs; the output is
    bitwise independent of unselected filters.
    """
    n_experts, k, cin, cout = _filter_geometry(filters)
    if x.data.ndim != 3 or x.shape[2] != cin:
        raise DimensionError(
            f"expert_convolve: input {x.shape} incompatible with filters {filters.shape}"
        )
    if x.dtype != filters.dtype:
        raise DimensionError(f"expert_convolve: dtypes {x.dtype} and {filters.dtype} disagree")
    idx = sel.indices
    if idx.min() < 0 or idx.max() >= n_experts:
        raise ContractError(
            f"expert_convolve: selection index out of range [0, {n_experts})"
        )
    h, w, _ = x.shape
    shared = idx.shape[:2] == (1, 1)
    if not shared and idx.shape[:2] != (h, w):
        raise DimensionError(
            f"expert_convolve: selection grid {idx.shape} does not match image {x.shape}"
        )
    top_k = idx.shape[-1]

    cols = T.im2col(x.data, k)  # (HW, k*k*C); data movement, not MACs
    fmat = filters.data.reshape(n_experts, k * k * cin, cout)
    wdata = sel.weights.data
    out = np.zeros((h * w, cout), dtype=x.data.dtype)
    groups = []  # (expert, pixel rows, slot, conv result) for the backward pass

    if shared:
        for slot in range(top_k):
            n = int(idx[0, 0, slot])
            e = cols @ fmat[n]
            out += wdata[0, 0, slot] * e
            groups.append((n, None, slot, e))
    else:
        flat_idx = idx.reshape(h * w, top_k)
        flat_w = wdata.reshape(h * w, top_k)
        for n in np.unique(flat_idx):
            pix, slot = np.nonzero(flat_idx == n)
            e = cols[pix] @ fmat[int(n)]
            out[pix] += flat_w[pix, slot, None] * e
            groups.append((int(n), pix, slot, e))

    result = T.Tensor(out.reshape(h, w, cout))

    def rule(g):
        gflat = g.reshape(h * w, cout)
        gcols = np.zeros_like(cols)
        gfilters = np.zeros_like(filters.data)
        gweights = np.zeros_like(wdata)
        if shared:
            for n, _, slot, e in groups:
                gweights[0, 0, slot] = float((gflat * e).sum())
                ge = wdata[0, 0, slot] * gflat
                gfilters[n] += (cols.T @ ge).reshape(k, k, cin, cout)
                gcols += ge @ fmat[n].T
        else:
            flat_w = wdata.reshape(h * w, top_k)
            gw_flat = gweights.reshape(h * w, top_k)
            for n, pix, slot, e in groups:
                gout_n = gflat[pix]
                gw_flat[pix, slot] = (gout_n * e).sum(axis=1)
                ge = gout_n * flat_w[pix, slot, None]
                gfilters[n] += (cols[pix].T @ ge).reshape(k, k, cin, cout)
                gcols[pix] += ge @ fmat[n].T
        gx = T.col2im(gcols, x.shape, k)
        return gx, gfilters, gweights

    return T.record(result, (x, filters, sel.weights), rule)


def dense_mixture(x: T.Tensor, filters: T.Tensor, scores: T.Tensor) -> T.Tensor:
    """Every expert executed and blended by its full score map (the dense path).

    Used for wall-clock comparison against the sparse dispatch and as the
    K = N reference; forward only.
    """
    n_experts, k, cin, cout = _filter_geometry(filters)
    h, w, _ = x.shape
    if scores.shape != (h, w, n_experts):
        raise DimensionError(
            f"dense_mixture: scores {scores.shape} do not match {h}x{w}x{n_experts}"
        )
    cols = T.im2col(x.data, k)
    all_out = cols @ filters.data.transpose(1, 2, 3, 0, 4).reshape(k * k * cin, n_experts * cout)
    all_out = all_out.reshape(h * w, n_experts, cout)
    blended = np.einsum("pnc,pn->pc", all_out, scores.data.reshape(h * w, n_experts))
    return T.Tensor(blended.reshape(h, w, cout))


def count_expert_flops(sel: Selection, filters: T.Tensor, spatial=None) -> FlopReport:
    """Exact MAC counts for the sparse dispatch and the hypothetical dense path."""
    n_experts, k, cin, cout = _filter_geometry(filters)
    if sel.indices.shape[:2] == (1, 1):
        if spatial is None:
            raise ContractError("count_expert_flops: whole-image selection needs the spatial size")
        h, w = spatial
    else:
        h, w = sel.indices.shape[:2]
    per_site = k * k * cin * cout
    sparse = h * w * sel.top_k * per_site
    dense = h * w * n_experts * per_site
    return FlopReport(sparse_macs=int(sparse), dense_macs=int(dense))
