"""Histogram-based gradient boosting kernels.

Features are quantile-binned to uint8 codes once per fit; trees are grown
level-by-level inside a single jitted call with exact greedy split search
over bin boundaries.  Everything is deterministic: no subsampling, fixed
scan order, ties broken toward the first (feature, bin) encountered.
"""

from __future__ import annotations

import numpy as np
from numba import njit

MAX_BINS = 255
_BIN_SAMPLE = 4096  # rows used to place bin edges; keeps np.quantile cheap


@njit(cache=True)
def _grow_tree(codes, resid, n_bins, max_depth, min_leaf,
               feat, cut, val, kids, leaf_of):
    """Grow one regression tree in place; returns the number of nodes used.

    ``leaf_of`` receives each training row's final leaf id, so training
    predictions need no tree walk.
    """
    n = codes.shape[0]
    p = codes.shape[1]
    order = np.arange(n)
    starts = np.zeros(feat.shape[0], np.int64)
    ends = np.zeros(feat.shape[0], np.int64)
    depths = np.zeros(feat.shape[0], np.int64)
    ends[0] = n
    n_nodes = 1
    node = 0
    hist_s = np.zeros(n_bins, np.float64)
    hist_c = np.zeros(n_bins, np.int64)
    tmp = np.empty(n, np.int64)
    while node < n_nodes:
        s, e, d = starts[node], ends[node], depths[node]
        m = e - s
        tot = 0.0
        for i in range(s, e):
            tot += resid[order[i]]
        val[node] = tot / m
        feat[node] = -1
        if d < max_depth and m >= 2 * min_leaf:
            best_gain = 1e-12
            best_f = -1
            best_b = -1
            base = tot * tot / m
            for f in range(p):
                for b in range(n_bins):
                    hist_s[b] = 0.0
                    hist_c[b] = 0
                for i in range(s, e):
                    c = codes[order[i], f]
                    hist_s[c] += resid[order[i]]
                    hist_c[c] += 1
                sl = 0.0
                cl = 0
                for b in range(n_bins - 1):
                    sl += hist_s[b]
                    cl += hist_c[b]
                    cr = m - cl
                    if cl < min_leaf or cr < min_leaf:
                        continue
                    sr = tot - sl
                    gain = sl * sl / cl + sr * sr / cr - base
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_b = b
            if best_f >= 0:
                nl = 0
                for i in range(s, e):
                    if codes[order[i], best_f] <= best_b:
                        tmp[nl] = order[i]
                        nl += 1
                nr = nl
                for i in range(s, e):
                    if codes[order[i], best_f] > best_b:
                        tmp[nr] = order[i]
                        nr += 1
                for i in range(m):
                    order[s + i] = tmp[i]
                feat[node] = best_f
                cut[node] = best_b
                kids[node, 0] = n_nodes
                kids[node, 1] = n_nodes + 1
                starts[n_nodes] = s
                ends[n_nodes] = s + nl
                depths[n_nodes] = d + 1
                starts[n_nodes + 1] = s + nl
                ends[n_nodes + 1] = e
                depths[n_nodes + 1] = d + 1
                n_nodes += 2
        if feat[node] < 0:
            for i in range(s, e):
                leaf_of[order[i]] = node
        node += 1
    return n_nodes


@njit(cache=True)
def _boost_fit(codes, y, n_bins, n_trees, max_depth, learning_rate, min_leaf):
    n = codes.shape[0]
    base = 0.0
    for i in range(n):
        base += y[i]
    base /= n
    max_nodes = 2 ** (max_depth + 1) - 1
    feat = np.full((n_trees, max_nodes), -1, np.int64)
    cut = np.zeros((n_trees, max_nodes), np.int64)
    val = np.zeros((n_trees, max_nodes), np.float64)
    kids = np.full((n_trees, max_nodes, 2), -1, np.int64)
    train_mse = np.zeros(n_trees + 1, np.float64)

    pred = np.full(n, base)
    resid = np.empty(n, np.float64)
    leaf_of = np.empty(n, np.int64)
    mse = 0.0
    for i in range(n):
        mse += (y[i] - pred[i]) ** 2
    train_mse[0] = mse / n
    for t in range(n_trees):
        for i in range(n):
            resid[i] = y[i] - pred[i]
        _grow_tree(codes, resid, n_bins, max_depth, min_leaf,
                   feat[t], cut[t], val[t], kids[t], leaf_of)
        for i in range(n):
            pred[i] += learning_rate * val[t, leaf_of[i]]
        mse = 0.0
        for i in range(n):
            mse += (y[i] - pred[i]) ** 2
        train_mse[t + 1] = mse / n
    return base, feat, cut, val, kids, train_mse


@njit(cache=True)
def _boost_predict(codes, base, feat, cut, val, kids, learning_rate):
    n = codes.shape[0]
    n_trees = feat.shape[0]
    out = np.full(n, base)
    for t in range(n_trees):
        for i in range(n):
            node = 0
            while feat[t, node] >= 0:
                if codes[i, feat[t, node]] <= cut[t, node]:
                    node = kids[t, node, 0]
                else:
                    node = kids[t, node, 1]
            out[i] += learning_rate * val[t, node]
    return out


def bin_edges(x: np.ndarray, n_bins: int, rng: np.random.Generator) -> np.ndarray:
    """Per-feature quantile bin edges, (n_bins - 1, p)."""
    n = x.shape[0]
    if n > _BIN_SAMPLE:
        sub = x[rng.choice(n, _BIN_SAMPLE, replace=False)]
    else:
        sub = x
    qs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    return np.quantile(sub, qs, axis=0)


def bin_codes(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
    codes = np.empty(x.shape, dtype=np.uint8)
    for j in range(x.shape[1]):
        codes[:, j] = np.searchsorted(edges[:, j], x[:, j], side="left")
    return codes
