"""Independent reference implementations used as test oracles.

Everything here is deliberately written as straight-line scalar Python
(lists, math, explicit loops) so it shares no code path with the
package's vectorized kernels.  Tests compare package output against
these.
"""

from __future__ import annotations

import math


def reference_pool(E, w, scale, ids):
    """Scalar re-implementation of softmax attention pooling.

    Returns (h, alpha) as plain Python lists.
    """
    D = len(w)
    rows = [[float(E[t][d]) for d in range(D)] for t in ids]
    logits = [sum(r[d] * float(w[d]) for d in range(D)) * scale for r in rows]
    m = max(logits)
    exps = [math.exp(s - m) for s in logits]
    z = sum(exps)
    alpha = [e / z for e in exps]
    h = [sum(alpha[t] * rows[t][d] for t in range(len(ids))) for d in range(D)]
    return h, alpha


def reference_similarity(q, h):
    return sum(float(a) * float(b) for a, b in zip(q, h))


def fd_grad_norms(E, w, scale, ids, q, step=1e-5):
    """Central finite differences of sim = q . pool(...) per position.

    Perturbs each coordinate of each position's embedding row
    independently (repeated tokens get per-position gradients), so this
    is a true oracle for the analytic per-position formula.
    """
    D = len(w)
    T = len(ids)
    base = [[float(E[t][d]) for d in range(D)] for t in ids]

    def sim_of(rows):
        logits = [sum(r[d] * float(w[d]) for d in range(D)) * scale for r in rows]
        m = max(logits)
        exps = [math.exp(s - m) for s in logits]
        z = sum(exps)
        h = [sum(exps[t] / z * rows[t][d] for t in range(T)) for d in range(D)]
        return sum(float(q[d]) * h[d] for d in range(D))

    norms = []
    for t in range(T):
        sq = 0.0
        for d in range(D):
            rows = [list(r) for r in base]
            rows[t][d] = base[t][d] + step
            up = sim_of(rows)
            rows[t][d] = base[t][d] - step
            dn = sim_of(rows)
            g = (up - dn) / (2.0 * step)
            sq += g * g
        norms.append(math.sqrt(sq))
    return norms


def reference_grad_vectors(E, w, scale, ids, q):
    """Per-position gradient of q . h via the closed form, scalar loops."""
    D = len(w)
    T = len(ids)
    h, alpha = reference_pool(E, w, scale, ids)
    qe = [sum(float(q[d]) * float(E[t][d]) for d in range(D)) for t in ids]
    qh = sum(float(q[d]) * h[d] for d in range(D))
    out = []
    for t in range(T):
        c = alpha[t] * (qe[t] - qh) * scale
        out.append([alpha[t] * float(q[d]) + c * float(w[d]) for d in range(D)])
    return out


def straight_line_gmtp(query_ids, doc_ids, E, w, scale, mlm, n_key, m_lowest, tau):
    """The whole filtering flow for one (query, document) pair, re-derived.

    encode query -> per-position gradient norms -> strictly-above-mean
    prefilter -> sort by norm desc (index asc on ties) -> truncate to N
    (argmax fallback when nothing clears the mean) -> masked prob per
    key position -> mean of the M lowest -> keep iff strictly above tau.
    Returns (decision, p_score).
    """
    q, _ = reference_pool(E, w, scale, query_ids)
    grads = reference_grad_vectors(E, w, scale, doc_ids, q)
    norms = [math.sqrt(sum(g * g for g in vec)) for vec in grads]
    mean = sum(norms) / len(norms)
    above = [i for i in range(len(norms)) if norms[i] > mean]
    if above:
        above.sort(key=lambda i: (-norms[i], i))
        keys = above[:n_key]
    else:
        best = 0
        for i in range(1, len(norms)):
            if norms[i] > norms[best]:
                best = i
        keys = [best]
    probs = sorted(mlm.masked_prob(doc_ids, p) for p in keys)
    chosen = probs[:m_lowest]
    p_score = sum(chosen) / len(chosen)
    return ("keep" if p_score > tau else "filter"), p_score


def reference_ndcg(ranked_ids, qrels, k):
    """Direct formula evaluation, no shared code with the package."""
    gains = sorted((g for g in qrels.values() if g > 0), reverse=True)
    if not gains:
        return 0.0
    dcg = 0.0
    for rank, doc_id in enumerate(list(ranked_ids)[:k], start=1):
        g = qrels.get(doc_id, 0)
        if g > 0:
            dcg += g / math.log2(rank + 1)
    idcg = 0.0
    for rank, g in enumerate(gains[:k], start=1):
        idcg += g / math.log2(rank + 1)
    return dcg / idcg
