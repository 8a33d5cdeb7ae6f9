"""Compiled kernels for honest forest growing and out-of-bag aggregation.

One kernel grows a whole forest: for each tree, splits are chosen on the
structure half of the tree's subsample, leaf statistics are filled from the
disjoint estimation half, and out-of-bag sums are accumulated for units
outside the subsample.  The per-unit leaf statistics are (mean numerator,
mean denominator) pairs so that regression forests (denominator = 1) and
residual-on-residual causal forests share one code path; forest predictions
are ratios of aggregated leaf means.

All randomness inside the kernel (per-node feature subsets) comes from a
splitmix64 stream seeded per tree, so fits are reproducible for any worker
count and do not depend on unit order except through the data itself.
"""

import numpy as np
from numba import njit

LEAF = np.int32(-1)


@njit(cache=True, inline="always")
def _next_u64(state):
    state[0] = state[0] + np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _randint(state, k):
    return np.int64(_next_u64(state) % np.uint64(k))


@njit(cache=True)
def _choose_features(state, p, mtry, scratch):
    """Partial Fisher-Yates: first mtry entries of scratch are the chosen features."""
    for j in range(p):
        scratch[j] = j
    for j in range(mtry):
        k = j + _randint(state, p - j)
        scratch[j], scratch[k] = scratch[k], scratch[j]


@njit(cache=True)
def _grow_tree(X, u, v, buf, start, end, min_leaf, mtry, causal, state,
               feature, threshold, left, right, parent,
               stack, fscratch, vals, order, uu, vv):
    """Grow one tree on buf[start:end] (structure units); returns node count."""
    n_nodes = 1
    parent[0] = -1
    feature[0] = LEAF
    stack[0, 0] = 0
    stack[0, 1] = start
    stack[0, 2] = end
    top = 1
    p = X.shape[1]

    while top > 0:
        top -= 1
        node = np.int64(stack[top, 0])
        s = np.int64(stack[top, 1])
        e = np.int64(stack[top, 2])
        m = e - s
        if m < 2 * min_leaf:
            continue

        u_center = 0.0
        if not causal:
            tot = 0.0
            for k in range(s, e):
                tot += u[buf[k]]
            u_center = tot / m

        best_crit = 0.0
        best_f = -1
        best_cut = 0.0
        _choose_features(state, p, mtry, fscratch)
        for fj in range(mtry):
            f = fscratch[fj]
            for k in range(m):
                vals[k] = X[buf[s + k], f]
            ord_f = np.argsort(vals[:m])
            for k in range(m):
                order[k] = ord_f[k]
            total_u = 0.0
            total_v = 0.0
            for k in range(m):
                idx = buf[s + order[k]]
                uu[k] = u[idx] - u_center
                vv[k] = v[idx]
                total_u += uu[k]
                total_v += vv[k]
            su = 0.0
            sv = 0.0
            for k in range(1, m):
                su += uu[k - 1]
                sv += vv[k - 1]
                lo = vals[order[k - 1]]
                hi = vals[order[k]]
                if hi <= lo:
                    continue
                n_left = k
                n_right = m - k
                if n_left < min_leaf or n_right < min_leaf:
                    continue
                sv_r = total_v - sv
                if sv < 1e-12 or sv_r < 1e-12:
                    continue
                tau_l = su / sv
                tau_r = (total_u - su) / sv_r
                d = tau_l - tau_r
                crit = n_left * n_right * d * d
                if crit > best_crit:
                    best_crit = crit
                    best_f = f
                    best_cut = 0.5 * (lo + hi)

        if best_f < 0:
            continue

        # in-place partition of buf[s:e] on X[:, best_f] <= best_cut
        i = s
        j = e - 1
        while i <= j:
            if X[buf[i], best_f] <= best_cut:
                i += 1
            else:
                tmp = buf[i]
                buf[i] = buf[j]
                buf[j] = tmp
                j -= 1
        mid = i

        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = np.int32(best_f)
        threshold[node] = best_cut
        left[node] = np.int32(lc)
        right[node] = np.int32(rc)
        feature[lc] = LEAF
        feature[rc] = LEAF
        parent[lc] = np.int32(node)
        parent[rc] = np.int32(node)
        stack[top, 0] = lc
        stack[top, 1] = s
        stack[top, 2] = mid
        top += 1
        stack[top, 0] = rc
        stack[top, 1] = mid
        stack[top, 2] = e
        top += 1

    return n_nodes


@njit(cache=True, inline="always")
def _leaf_of(X, i, feature, threshold, left, right):
    node = 0
    while feature[node] != LEAF:
        if X[i, feature[node]] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@njit(cache=True)
def _fill_leaf_stats(X, u, v, est, n_nodes, feature, threshold, left, right, parent,
                     leaf_num, leaf_den, sum_u, sum_v, cnt):
    """Honest fill: per-node means over estimation units; empty leaves inherit."""
    for k in range(n_nodes):
        sum_u[k] = 0.0
        sum_v[k] = 0.0
        cnt[k] = 0
    for idx in range(est.shape[0]):
        i = est[idx]
        node = 0
        while True:
            sum_u[node] += u[i]
            sum_v[node] += v[i]
            cnt[node] += 1
            if feature[node] == LEAF:
                break
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
    for k in range(n_nodes):
        if feature[k] == LEAF:
            node = k
            while cnt[node] == 0 and parent[node] >= 0:
                node = parent[node]
            if cnt[node] > 0:
                leaf_num[k] = sum_u[node] / cnt[node]
                leaf_den[k] = sum_v[node] / cnt[node]
            else:
                leaf_num[k] = 0.0
                leaf_den[k] = 0.0


@njit(cache=True)
def grow_forest(X, u, v, plan, h, min_leaf, mtry, causal, tree_seeds, max_nodes,
                feature, threshold, left, right, parent, n_nodes,
                leaf_num, leaf_den, oob_num, oob_den, oob_cnt):
    """Grow all trees; fill honest leaf stats; accumulate out-of-bag sums.

    plan[t] holds the tree's subsample indices: the first h are structure
    units, the rest estimation units.  Outputs are preallocated 2-D arrays
    indexed by (tree, node) plus per-unit OOB accumulators.
    """
    n_trees, s_size = plan.shape
    n = X.shape[0]
    buf = np.empty(s_size, dtype=np.int64)
    stack = np.empty((max_nodes, 3), dtype=np.int64)
    fscratch = np.empty(X.shape[1], dtype=np.int64)
    vals = np.empty(h, dtype=np.float64)
    order = np.empty(h, dtype=np.int64)
    uu = np.empty(h, dtype=np.float64)
    vv = np.empty(h, dtype=np.float64)
    sum_u = np.empty(max_nodes, dtype=np.float64)
    sum_v = np.empty(max_nodes, dtype=np.float64)
    cnt = np.empty(max_nodes, dtype=np.int64)
    inbag = np.zeros(n, dtype=np.bool_)
    state = np.empty(1, dtype=np.uint64)

    for i in range(n):
        oob_num[i] = 0.0
        oob_den[i] = 0.0
        oob_cnt[i] = 0

    for t in range(n_trees):
        state[0] = tree_seeds[t]
        for k in range(h):
            buf[k] = plan[t, k]
        n_nodes[t] = _grow_tree(
            X, u, v, buf, 0, h, min_leaf, mtry, causal, state,
            feature[t], threshold[t], left[t], right[t], parent[t],
            stack, fscratch, vals, order, uu, vv,
        )
        _fill_leaf_stats(
            X, u, v, plan[t, h:], n_nodes[t],
            feature[t], threshold[t], left[t], right[t], parent[t],
            leaf_num[t], leaf_den[t], sum_u, sum_v, cnt,
        )
        for k in range(s_size):
            inbag[plan[t, k]] = True
        for i in range(n):
            if not inbag[i]:
                leaf = _leaf_of(X, i, feature[t], threshold[t], left[t], right[t])
                oob_num[i] += leaf_num[t, leaf]
                oob_den[i] += leaf_den[t, leaf]
                oob_cnt[i] += 1
        for k in range(s_size):
            inbag[plan[t, k]] = False


@njit(cache=True)
def predict_forest(X, feature, threshold, left, right, leaf_num, leaf_den, out_num, out_den):
    """Aggregate leaf means over all trees for arbitrary rows of X."""
    n = X.shape[0]
    n_trees = feature.shape[0]
    for i in range(n):
        out_num[i] = 0.0
        out_den[i] = 0.0
    for t in range(n_trees):
        for i in range(n):
            leaf = _leaf_of(X, i, feature[t], threshold[t], left[t], right[t])
            out_num[i] += leaf_num[t, leaf]
            out_den[i] += leaf_den[t, leaf]
