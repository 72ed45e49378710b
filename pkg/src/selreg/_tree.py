"""Compiled CART kernels shared by the tree, forest and boosting learners.

Trees are stored as flat arrays: ``feature[i] < 0`` marks a leaf whose
prediction is ``value[i]``; otherwise rows with ``x[feature] <= threshold``
go to ``left[i]`` and the rest to ``right[i]``.
"""

import numpy as np
from numba import njit


def presort(X, sample_ids) -> np.ndarray:
    """(d, n) row ids of the sample, stably sorted by each feature."""
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    order = np.argsort(X[sample_ids], axis=0, kind="stable")
    return np.ascontiguousarray(sample_ids[order].T)


@njit(cache=True)
def _best_split(X, y, sorted_ids, start, end, features, min_samples_leaf):
    m = end - start
    total = 0.0
    for i in range(start, end):
        total += y[sorted_ids[0, i]]
    mean = total / m
    centred_total = 0.0
    for i in range(start, end):
        centred_total += y[sorted_ids[0, i]] - mean
    base = centred_total * centred_total / m

    best_gain = 0.0
    best_feature = -1
    best_threshold = 0.0
    for f in features:
        row = sorted_ids[f]
        # node-centred targets keep the prefix sums well conditioned
        csum = 0.0
        for i in range(start, end - 1):
            csum += y[row[i]] - mean
            n_left = i - start + 1
            n_right = m - n_left
            if n_left < min_samples_leaf:
                continue
            if n_right < min_samples_leaf:
                break
            lo = X[row[i], f]
            hi = X[row[i + 1], f]
            if not lo < hi:
                continue
            rsum = centred_total - csum
            gain = csum * csum / n_left + rsum * rsum / n_right - base
            if best_feature < 0 or gain > best_gain + 1e-12 * abs(best_gain):
                best_gain = gain
                best_feature = f
                thr = 0.5 * (lo + hi)
                best_threshold = thr if thr < hi else lo
    return best_feature, best_threshold, best_gain


@njit(cache=True)
def build_tree(X, y, sorted_ids, max_depth, min_samples_leaf, n_sub_features, seed):
    """Greedy variance-reduction tree over a presorted sample.

    ``sorted_ids[f]`` lists the sample's row ids (repeats allowed, e.g. a
    bootstrap resample) in stable ascending order of feature ``f``; see
    ``presort``. It is reordered in place. ``max_depth < 0`` means
    unlimited. ``n_sub_features < d`` draws that many candidate features per
    split from a generator seeded with ``seed``.
    """
    np.random.seed(seed)
    d, n = sorted_ids.shape
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    n_samples = np.zeros(cap, dtype=np.int64)

    # one ordering of the sample per feature; every node owns the same
    # [start, end) window in each ordering
    goes_left = np.zeros(X.shape[0], dtype=np.bool_)
    scratch = np.empty(n, dtype=np.int64)

    all_features = np.arange(d)
    # stack of (node, start, end, depth)
    stack = np.empty((cap, 4), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        m = end - start
        s = 0.0
        ymin = np.inf
        ymax = -np.inf
        for i in range(start, end):
            v = y[sorted_ids[0, i]]
            s += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        value[node] = s / m
        n_samples[node] = m

        if (max_depth >= 0 and depth >= max_depth) or m < 2 * min_samples_leaf or ymin == ymax:
            continue
        if n_sub_features < d:
            features = np.sort(np.random.permutation(d)[:n_sub_features])
        else:
            features = all_features
        f, thr, gain = _best_split(X, y, sorted_ids, start, end, features, min_samples_leaf)
        if f < 0 or not gain > 0.0:
            continue

        n_left = 0
        for i in range(start, end):
            r = sorted_ids[f, i]
            goes_left[r] = X[r, f] <= thr
            if goes_left[r]:
                n_left += 1
        # stable partition of every ordering keeps each window sorted
        for g in range(d):
            a = 0
            b = n_left
            for i in range(start, end):
                r = sorted_ids[g, i]
                if goes_left[r]:
                    scratch[a] = r
                    a += 1
                else:
                    scratch[b] = r
                    b += 1
            for i in range(m):
                sorted_ids[g, start + i] = scratch[i]

        feature[node] = f
        threshold[node] = thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack[top, 0] = n_nodes + 1
        stack[top, 1] = start + n_left
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = n_nodes
        stack[top, 1] = start
        stack[top, 2] = start + n_left
        stack[top, 3] = depth + 1
        top += 1
        n_nodes += 2

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        n_samples[:n_nodes].copy(),
    )


@njit(cache=True)
def predict_tree(X, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out
