"""Numba kernels for the boosted-tree surrogate.

Trees are depth-limited and stored in heap layout: node k has children
2k+1 / 2k+2, internal nodes carry (feature, threshold), leaves carry
feature = -1 and a value.  Split search walks presorted column orders, so
one tree fit costs O(depth * n * d) after a one-off O(n log n * d) sort
per fitted design matrix.
"""

import numpy as np
from numba import njit

# Splits must reduce squared error by more than this to be accepted, which
# turns constant-target nodes into leaves.
_MIN_GAIN = 1e-12


@njit(cache=True)
def fit_tree(X, sort_idx, resid, max_depth, min_leaf, feat_out, thr_out, val_out, train_pred):
    """Fit one least-squares regression tree on residuals.

    ``sort_idx[:, f]`` must hold row indices in ascending order of column f.
    Outputs are written into the preallocated heap arrays; ``train_pred``
    receives the fitted value for every training row.
    """
    n, d = X.shape
    n_nodes = feat_out.shape[0]
    feat_out[:] = -1
    thr_out[:] = 0.0
    val_out[:] = 0.0

    node_of = np.zeros(n, np.int64)
    tot_cnt = np.zeros(n_nodes, np.int64)
    tot_sum = np.zeros(n_nodes, np.float64)
    active = np.zeros(n_nodes, np.uint8)
    active[0] = 1
    tot_cnt[0] = n
    for i in range(n):
        tot_sum[0] += resid[i]

    best_gain = np.zeros(n_nodes, np.float64)
    best_f = np.zeros(n_nodes, np.int64)
    best_t = np.zeros(n_nodes, np.float64)
    lcnt = np.zeros(n_nodes, np.int64)
    lsum = np.zeros(n_nodes, np.float64)
    last_val = np.zeros(n_nodes, np.float64)
    started = np.zeros(n_nodes, np.uint8)

    for level in range(max_depth):
        first = (1 << level) - 1
        last = (1 << (level + 1)) - 2
        any_splittable = False
        for nd in range(first, last + 1):
            best_gain[nd] = _MIN_GAIN
            best_f[nd] = -1
            if active[nd] == 1 and tot_cnt[nd] >= 2 * min_leaf:
                any_splittable = True
        if not any_splittable:
            break

        for f in range(d):
            for nd in range(first, last + 1):
                lcnt[nd] = 0
                lsum[nd] = 0.0
                started[nd] = 0
            for pos in range(n):
                i = sort_idx[pos, f]
                nd = node_of[i]
                if nd < first or nd > last or active[nd] == 0:
                    continue
                v = X[i, f]
                if started[nd] == 1 and v != last_val[nd]:
                    cl = lcnt[nd]
                    cr = tot_cnt[nd] - cl
                    if cl >= min_leaf and cr >= min_leaf:
                        sl = lsum[nd]
                        sr = tot_sum[nd] - sl
                        gain = (sl * sl / cl + sr * sr / cr
                                - tot_sum[nd] * tot_sum[nd] / tot_cnt[nd])
                        if gain > best_gain[nd]:
                            best_gain[nd] = gain
                            best_f[nd] = f
                            best_t[nd] = 0.5 * (last_val[nd] + v)
                lcnt[nd] += 1
                lsum[nd] += resid[i]
                last_val[nd] = v
                started[nd] = 1

        for nd in range(first, last + 1):
            if active[nd] == 1 and best_f[nd] >= 0:
                feat_out[nd] = best_f[nd]
                thr_out[nd] = best_t[nd]
                active[2 * nd + 1] = 1
                active[2 * nd + 2] = 1
        for i in range(n):
            nd = node_of[i]
            if first <= nd <= last and feat_out[nd] >= 0:
                if X[i, feat_out[nd]] <= thr_out[nd]:
                    child = 2 * nd + 1
                else:
                    child = 2 * nd + 2
                node_of[i] = child
                tot_cnt[child] += 1
                tot_sum[child] += resid[i]

    for nd in range(n_nodes):
        if active[nd] == 1 and feat_out[nd] < 0 and tot_cnt[nd] > 0:
            val_out[nd] = tot_sum[nd] / tot_cnt[nd]
    for i in range(n):
        train_pred[i] = val_out[node_of[i]]


@njit(cache=True)
def predict_forest(X, feats, thrs, vals, shrinkage, base, out):
    """Accumulate base + shrinkage * sum of tree outputs into ``out``."""
    n = X.shape[0]
    n_trees = feats.shape[0]
    for i in range(n):
        acc = base
        for t in range(n_trees):
            nd = 0
            while feats[t, nd] >= 0:
                if X[i, feats[t, nd]] <= thrs[t, nd]:
                    nd = 2 * nd + 1
                else:
                    nd = 2 * nd + 2
            acc += shrinkage * vals[t, nd]
        out[i] = acc
