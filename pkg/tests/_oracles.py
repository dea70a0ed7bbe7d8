"""Independent brute-force oracles shared by the test suite.

These stay deliberately naive (quadruple loops, per-pixel arithmetic) so
they share no code path with the vectorized implementations they check.
"""

import numpy as np


def conv2d_loop_oracle(x, f, stride=1):
    """Zero-'same'-padded convolution, one multiply at a time."""
    h, w, cin = x.shape
    k, _, _, cout = f.shape
    pad = (k - 1) // 2
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    out = np.zeros((ho, wo, cout), dtype=x.dtype)
    for i in range(ho):
        for j in range(wo):
            for di in range(k):
                for dj in range(k):
                    si = i * stride + di - pad
                    sj = j * stride + dj - pad
                    if 0 <= si < h and 0 <= sj < w:
                        out[i, j] += x[si, sj] @ f[di, dj]
    return out


def mixture_loop_oracle(x, filters, indices, weights):
    """Per-pixel weighted sum of selected experts' convolutions."""
    h, w, _ = x.shape
    n, k, _, _, cout = filters.shape
    pad = (k - 1) // 2
    out = np.zeros((h, w, cout))
    shared = indices.shape[:2] == (1, 1)
    for i in range(h):
        for j in range(w):
            si_, sj_ = (0, 0) if shared else (i, j)
            for slot in range(indices.shape[-1]):
                f = filters[indices[si_, sj_, slot]]
                acc = np.zeros(cout)
                for di in range(k):
                    for dj in range(k):
                        si, sj = i + di - pad, j + dj - pad
                        if 0 <= si < h and 0 <= sj < w:
                            acc += x[si, sj] @ f[di, dj]
                out[i, j] += weights[si_, sj_, slot] * acc
    return out
