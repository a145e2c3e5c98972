"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or ``DCAP_PURE_PYTHON=1``.
Every function here has a twin in ``_ckernels.pyx`` with the same
signature; the test suite checks them against each other.
"""
import numpy as np


def scatter_add_rows(out, ids, src):
    np.add.at(out, ids, src)
    return out


def pair_expand(Z, X, left, right, outer):
    if outer:
        return Z[:, left, :] * X.sum(axis=2)[:, right, None]
    return Z[:, left, :] * X[:, right, :]


def pair_expand_backward(G, Z, X, left, right, outer):
    gZ = np.zeros_like(Z)
    gX = np.zeros_like(X)
    if outer:
        s = X.sum(axis=2)
        # gather-side products, then scatter with add.at along the field axis
        np.add.at(gZ, (slice(None), left), G * s[:, right, None])
        gs = np.einsum("bkd,bkd->bk", G, Z[:, left, :])
        acc = np.zeros(s.shape)
        np.add.at(acc, (slice(None), right), gs)
        gX += acc[:, :, None]
    else:
        np.add.at(gZ, (slice(None), left), G * X[:, right, :])
        np.add.at(gX, (slice(None), right), G * Z[:, left, :])
    return gZ, gX


def pool_bounds(m, n):
    i = np.arange(n)
    starts = (i * m) // n
    ends = -((-(i + 1) * m) // n)
    return starts.astype(np.int64), ends.astype(np.int64)


def pool_matrix(m, n):
    starts, ends = pool_bounds(m, n)
    W = np.zeros((n, m))
    for i, (s, e) in enumerate(zip(starts, ends)):
        W[i, s:e] = 1.0 / (e - s)
    return W


def adaptive_pool(P, n):
    return np.matmul(pool_matrix(P.shape[1], n), P)


def adaptive_pool_backward(G, m):
    return np.matmul(pool_matrix(m, G.shape[1]).T, G)


def rank_auc(scores, labels):
    """Mann-Whitney AUC with mid-ranks for tied scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    n = s.shape[0]
    # boundaries of runs of equal scores
    edges = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate(([0], edges))
    ends = np.concatenate((edges, [n]))
    mid = (starts + ends + 1) / 2.0  # average of 1-based ranks start+1..end
    ranks = np.empty(n)
    ranks[order] = np.repeat(mid, ends - starts)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = n - n_pos
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)
