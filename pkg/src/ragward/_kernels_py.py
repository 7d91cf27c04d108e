"""Pure-Python (numpy) kernel backend.

The compiled backend in ``_kernels.pyx`` implements the same four
functions with the same summation order, so results agree to within a
few ulps.  Within one backend, ``substitution_scores`` reproduces the
``pool`` + dot-product path exactly: HotFlip re-scoring and exhaustive
oracles must see bit-identical objectives.

All inputs are float64; token ids are int64.  The attention logit for
position t is (w . e_t) * scale, pooled with a max-shifted softmax.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def pool(E, w, scale, ids):
    """Pooled embedding and attention weights for a token sequence.

    Returns (h, alpha) where h = sum_t alpha_t * E[ids[t]] and alpha is
    the softmax of the scaled attention logits.
    """
    X = E[ids]
    s = (X @ w) * scale
    s = s - s.max()
    a = np.exp(s)
    a /= a.sum()
    h = a @ X
    return h, a


def grad_norms(E, w, scale, ids, q):
    """l2 norm of d(q . h)/d(e_t) for every position t.

    The gradient is alpha_t * q + c_t * w with
    c_t = alpha_t * ((q . e_t) - (q . h)) * scale, so the norm follows
    from ||q||, ||w||, and q . w without materializing the vectors.
    qh is accumulated as sum_t alpha_t (q . e_t), matching the compiled
    backend's order.
    """
    X = E[ids]
    s = (X @ w) * scale
    s = s - s.max()
    a = np.exp(s)
    a /= a.sum()
    qe = X @ q
    qh = a @ qe
    c = a * (qe - qh) * scale
    qq = q @ q
    ww = w @ w
    qw = q @ w
    sq = a * a * qq + 2.0 * a * c * qw + c * c * ww
    # guard tiny negatives from cancellation
    return np.sqrt(np.maximum(sq, 0.0))


def grad_at(E, w, scale, ids, q, pos):
    """Gradient vector d(q . h)/d(e_pos) at one position."""
    X = E[ids]
    s = (X @ w) * scale
    s = s - s.max()
    a = np.exp(s)
    a /= a.sum()
    qe = X @ q
    qh = a @ qe
    c = a[pos] * (qe[pos] - qh) * scale
    return a[pos] * q + c * w


def substitution_scores(E, w, scale, ids, pos, cand, q):
    """Exact objective q . h for each candidate token placed at pos.

    Deliberately re-encodes per candidate through the same pool path so
    scores are bit-identical to objective(ids-with-substitution).
    """
    work = np.array(ids, dtype=np.int64, copy=True)
    out = np.empty(len(cand), dtype=np.float64)
    for i, c in enumerate(cand):
        work[pos] = c
        h, _ = pool(E, w, scale, work)
        out[i] = np.dot(q, h)
    return out
