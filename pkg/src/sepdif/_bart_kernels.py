"""Compiled kernels for the probit sum-of-trees sampler and its replay.

The sampler is written as a per-iteration step function over preallocated
state arrays so the Python driver can snapshot kept draws without copying
whole fixed-size tree buffers.  Trees live in slot arrays with a free list;
``var`` is -2 for a free slot, -1 for a leaf, and the split column index
otherwise.  The latent residual variance is fixed at 1 (probit
identification); the sampler has no state for it and never updates it.

Prediction replays compact per-draw tree snapshots.  Because a prediction
batch shares one treatment value and one ability grid value across units,
each tree is traversed once per draw as a partition of the unit set: splits
on plain covariates partition units, splits on the treatment or ability
column route whole subsets per configuration.  Leaves reached by every
configuration accumulate into a shared base vector, which is what makes
grid-curve evaluation affordable.
"""

import math

import numpy as np
from numba import njit

SQRT2 = math.sqrt(2.0)
FREE = np.int32(-2)
LEAF = np.int32(-1)


@njit(cache=True, inline="always")
def _next_u64(state):
    state[0] = state[0] + np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _uniform(state):
    return (np.float64(_next_u64(state) >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)


@njit(cache=True, inline="always")
def _randint(state, k):
    return np.int64(_next_u64(state) % np.uint64(k))


@njit(cache=True, inline="always")
def _normal(state):
    u1 = _uniform(state)
    u2 = _uniform(state)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


@njit(cache=True, inline="always")
def _ndtri(p):
    """Inverse standard normal CDF (Acklam's rational approximation)."""
    if p < 0.02425:
        q = math.sqrt(-2.0 * math.log(p))
        return ((((((-7.784894002430293e-03 * q - 3.223964580411365e-01) * q
                    - 2.400758277161838e+00) * q - 2.549732539343734e+00) * q
                  + 4.374664141464968e+00) * q + 2.938163982698783e+00)
                / ((((7.784695709041462e-03 * q + 3.224671290700398e-01) * q
                     + 2.445134137142996e+00) * q + 3.754408661907416e+00) * q + 1.0))
    elif p <= 0.97575:
        q = p - 0.5
        r = q * q
        return ((((((-3.969683028665376e+01 * r + 2.209460984245205e+02) * r
                    - 2.759285104469687e+02) * r + 1.383577518672690e+02) * r
                  - 3.066479806614716e+01) * r + 2.506628277459239e+00) * q
                / (((((-5.447609879822406e+01 * r + 1.615858368580409e+02) * r
                      - 1.556989798598866e+02) * r + 6.680131188771972e+01) * r
                    - 1.328068155288572e+01) * r + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -((((((-7.784894002430293e-03 * q - 3.223964580411365e-01) * q
                     - 2.400758277161838e+00) * q - 2.549732539343734e+00) * q
                   + 4.374664141464968e+00) * q + 2.938163982698783e+00)
                 / ((((7.784695709041462e-03 * q + 3.224671290700398e-01) * q
                      + 2.445134137142996e+00) * q + 3.754408661907416e+00) * q + 1.0))


@njit(cache=True, inline="always")
def _phi(x):
    return 0.5 * math.erfc(-x / SQRT2)


@njit(cache=True, inline="always")
def _leaf_marginal(n, s, s2):
    """Log marginal of one leaf's residuals, dropping split-invariant terms."""
    denom = 1.0 + n * s2
    return -0.5 * math.log(denom) + s2 * s * s / (2.0 * denom)


@njit(cache=True, inline="always")
def _depth(parent, node):
    d = 0
    k = node
    while parent[k] >= 0:
        k = parent[k]
        d += 1
    return d


@njit(cache=True)
def draw_latents(y, f, z, offset, state):
    """Truncated-normal latent draw given the current fit; variance fixed at 1."""
    n = y.shape[0]
    for i in range(n):
        m = f[i] + offset
        u = _uniform(state)
        if y[i] == 1:
            q = (1.0 - u) * _phi(m)
            if q < 1e-300:
                q = 1e-300
            z[i] = m - _ndtri(q)
        else:
            q = u * _phi(-m)
            if q < 1e-300:
                q = 1e-300
            z[i] = m + _ndtri(q)


@njit(cache=True)
def tree_sweep(X, z, f, offset, var, cutv, leafval, left, right, parent,
               free_list, free_cnt, hw, leaf_of,
               cuts_flat, cuts_off, sigma_mu, prior_alpha, prior_beta,
               p_grow, p_prune, max_depth, max_nodes,
               cnt, ssum, ulist, uside, state, counters):
    """One backfitting pass: propose/accept a move and redraw leaf values per tree.

    The proposal target and rule are chosen from the tree structure alone, so
    the residual-stats sweep and the proposal partition share one pass over
    the units.
    """
    n = X.shape[0]
    n_trees = var.shape[0]
    P = cuts_off.shape[0] - 1
    s2 = sigma_mu * sigma_mu

    for t in range(n_trees):
        # leaf and nog counts from structure alone
        n_leaves = 0
        n_nogs = 0
        for k in range(hw[t]):
            if var[t, k] == LEAF:
                n_leaves += 1
            elif var[t, k] >= 0:
                if var[t, left[t, k]] == LEAF and var[t, right[t, k]] == LEAF:
                    n_nogs += 1

        u_kind = _uniform(state)
        kind = 0 if u_kind < p_grow else (1 if u_kind < p_grow + p_prune else 2)
        counters[kind, 0] += 1

        # choose the proposal target and rule before touching the data
        node = -1
        v = np.int64(0)
        c = 0.0
        watch1 = np.int32(-1)    # units of these leaves are partitioned by the
        watch2 = np.int32(-1)    # candidate rule during the stats sweep
        if kind == 0:
            need_new = 2 - free_cnt[t]
            if need_new < 0:
                need_new = 0
            if hw[t] + need_new <= max_nodes:
                pick = _randint(state, n_leaves)
                for k in range(hw[t]):
                    if var[t, k] == LEAF:
                        if pick == 0:
                            node = k
                            break
                        pick -= 1
                d = _depth(parent[t], node)
                v = np.int64(_randint(state, P))
                kv = cuts_off[v + 1] - cuts_off[v]
                if d < max_depth and kv > 0:
                    c = cuts_flat[cuts_off[v] + _randint(state, kv)]
                    watch1 = np.int32(node)
                else:
                    node = -1
        elif n_nogs > 0:
            pick = _randint(state, n_nogs)
            for k in range(hw[t]):
                if var[t, k] >= 0 and var[t, left[t, k]] == LEAF and var[t, right[t, k]] == LEAF:
                    if pick == 0:
                        node = k
                        break
                    pick -= 1
            if kind == 1:
                watch1 = left[t, node]
                watch2 = right[t, node]
            else:
                v = np.int64(_randint(state, P))
                kv = cuts_off[v + 1] - cuts_off[v]
                if kv > 0:
                    c = cuts_flat[cuts_off[v] + _randint(state, kv)]
                    watch1 = left[t, node]
                    watch2 = right[t, node]
                else:
                    node = -1

        # fused sweep: remove tree t from the fit, collect per-leaf residual
        # stats, and partition the watched units by the candidate rule
        for k in range(hw[t]):
            cnt[k] = 0
            ssum[k] = 0.0
        nl = 0
        sl = 0.0
        nu = 0
        for i in range(n):
            leaf = leaf_of[t, i]
            f[i] -= leafval[t, leaf]
            r = z[i] - offset - f[i]
            cnt[leaf] += 1
            ssum[leaf] += r
            if leaf == watch1 or leaf == watch2:
                go_left = X[i, v] <= c
                ulist[nu] = i
                uside[nu] = 1 if go_left else 0
                nu += 1
                if go_left:
                    nl += 1
                    sl += r

        if kind == 0 and node >= 0:
            # GROW: split the chosen leaf on the chosen rule
            nr = cnt[node] - nl
            sr = ssum[node] - sl
            if nl > 0 and nr > 0:
                d = _depth(parent[t], node)
                psd = prior_alpha * (1.0 + d) ** (-prior_beta)
                psd1 = prior_alpha * (2.0 + d) ** (-prior_beta)
                llr = (_leaf_marginal(nl, sl, s2) + _leaf_marginal(nr, sr, s2)
                       - _leaf_marginal(cnt[node], ssum[node], s2))
                # nog count after the grow
                pj = parent[t, node]
                is_nog_parent = False
                if pj >= 0:
                    sib = right[t, pj] if left[t, pj] == node else left[t, pj]
                    is_nog_parent = var[t, sib] == LEAF
                n_nogs_after = n_nogs + 1 - (1 if is_nog_parent else 0)
                log_a = (llr
                         + math.log(psd) + 2.0 * math.log(1.0 - psd1)
                         - math.log(1.0 - psd)
                         + math.log(p_prune) - math.log(n_nogs_after)
                         - math.log(p_grow) + math.log(n_leaves))
                if math.log(_uniform(state)) < log_a:
                    counters[0, 1] += 1
                    if free_cnt[t] > 0:
                        free_cnt[t] -= 1
                        lc = free_list[t, free_cnt[t]]
                    else:
                        lc = np.int32(hw[t])
                        hw[t] += 1
                    if free_cnt[t] > 0:
                        free_cnt[t] -= 1
                        rc = free_list[t, free_cnt[t]]
                    else:
                        rc = np.int32(hw[t])
                        hw[t] += 1
                    var[t, node] = np.int32(v)
                    cutv[t, node] = c
                    left[t, node] = lc
                    right[t, node] = rc
                    var[t, lc] = LEAF
                    var[t, rc] = LEAF
                    leafval[t, lc] = 0.0
                    leafval[t, rc] = 0.0
                    parent[t, lc] = np.int32(node)
                    parent[t, rc] = np.int32(node)
                    cnt[lc] = nl
                    ssum[lc] = sl
                    cnt[rc] = nr
                    ssum[rc] = sr
                    for k in range(nu):
                        leaf_of[t, ulist[k]] = lc if uside[k] == 1 else rc

        elif kind == 1 and node >= 0:
            # PRUNE: collapse the chosen nog node
            lc = left[t, node]
            rc = right[t, node]
            d = _depth(parent[t], node)
            psd = prior_alpha * (1.0 + d) ** (-prior_beta)
            psd1 = prior_alpha * (2.0 + d) ** (-prior_beta)
            nm = cnt[lc] + cnt[rc]
            sm = ssum[lc] + ssum[rc]
            llr = (_leaf_marginal(nm, sm, s2)
                   - _leaf_marginal(cnt[lc], ssum[lc], s2)
                   - _leaf_marginal(cnt[rc], ssum[rc], s2))
            log_a = (llr
                     + math.log(1.0 - psd) - math.log(psd)
                     - 2.0 * math.log(1.0 - psd1)
                     + math.log(p_grow) - math.log(n_leaves - 1)
                     - math.log(p_prune) + math.log(n_nogs))
            if math.log(_uniform(state)) < log_a:
                counters[1, 1] += 1
                for k in range(nu):
                    leaf_of[t, ulist[k]] = np.int32(node)
                var[t, node] = LEAF
                leafval[t, node] = 0.0
                cnt[node] = nm
                ssum[node] = sm
                var[t, lc] = FREE
                var[t, rc] = FREE
                free_list[t, free_cnt[t]] = lc
                free_cnt[t] += 1
                free_list[t, free_cnt[t]] = rc
                free_cnt[t] += 1

        elif kind == 2 and node >= 0:
            # CHANGE: apply the redrawn split rule at the chosen nog node
            lc = left[t, node]
            rc = right[t, node]
            nm = cnt[lc] + cnt[rc]
            sm = ssum[lc] + ssum[rc]
            nr = nm - nl
            sr = sm - sl
            if nl > 0 and nr > 0:
                llr = (_leaf_marginal(nl, sl, s2) + _leaf_marginal(nr, sr, s2)
                       - _leaf_marginal(cnt[lc], ssum[lc], s2)
                       - _leaf_marginal(cnt[rc], ssum[rc], s2))
                if math.log(_uniform(state)) < llr:
                    counters[2, 1] += 1
                    var[t, node] = np.int32(v)
                    cutv[t, node] = c
                    for k in range(nu):
                        leaf_of[t, ulist[k]] = lc if uside[k] == 1 else rc
                    cnt[lc] = nl
                    ssum[lc] = sl
                    cnt[rc] = nr
                    ssum[rc] = sr

        # redraw every leaf value from its conjugate posterior; put tree back
        inv_s2 = 1.0 / s2
        for k in range(hw[t]):
            if var[t, k] == LEAF:
                post_var = 1.0 / (cnt[k] + inv_s2)
                leafval[t, k] = ssum[k] * post_var + math.sqrt(post_var) * _normal(state)
        for i in range(n):
            f[i] += leafval[t, leaf_of[t, i]]


@njit(cache=True)
def count_alive(var, hw, out):
    for t in range(var.shape[0]):
        c = 0
        for k in range(hw[t]):
            if var[t, k] != FREE:
                c += 1
        out[t] = c


@njit(cache=True)
def snapshot(var, cutv, leafval, left, right, hw, offsets,
             out_var, out_cut, out_val, out_left, out_right, remap):
    """Compact alive nodes of every tree into contiguous blocks (root first)."""
    for t in range(var.shape[0]):
        pos = offsets[t]
        for k in range(hw[t]):
            if var[t, k] != FREE:
                remap[k] = np.int32(pos - offsets[t])
                pos += 1
        pos = offsets[t]
        for k in range(hw[t]):
            if var[t, k] != FREE:
                out_var[pos] = np.int16(var[t, k])
                out_cut[pos] = cutv[t, k]
                out_val[pos] = leafval[t, k]
                if var[t, k] >= 0:
                    out_left[pos] = remap[left[t, k]]
                    out_right[pos] = remap[right[t, k]]
                else:
                    out_left[pos] = -1
                    out_right[pos] = -1
                pos += 1


# ---- replay / prediction ----------------------------------------------------
# Tree blocks are stored draw-major: block (d, t) spans
# offsets[d * n_trees + t] : offsets[d * n_trees + t + 1], child indices local
# to the block.  Column conventions: column `a_col` is the binary treatment,
# column `th_col` is ability; W holds the remaining columns in training order
# (treatment excluded), with the ability column left in place but overridden.


@njit(cache=True)
def _partition_tree(nvar, ncut, nval, nleft, nright, W, th_col, grid,
                    idx, stack, base, f0, f1, c0, c1):
    """Add one tree's contribution over all (treatment, grid) configurations.

    base[i] collects leaves reached under every config; c0[g] / c1[g] collect
    treatment- and grid-specific leaves that cover the full unit set (the
    common case: trees splitting only on treatment or ability); f0[i, g] /
    f1[i, g] collect the rest.  Tree column 0 is the treatment; column
    th_col is ability (overridden by grid values); any other column j reads
    W[i, j - 1].  idx may hold any permutation of 0..n-1 on entry.
    """
    n = W.shape[0]
    n_grid = grid.shape[0]
    if nvar[0] == LEAF:
        v = nval[0]
        for i in range(n):
            base[i] += v
        return
    # stack rows: node, start, end, amask, glo, ghi
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    stack[0, 3] = 3
    stack[0, 4] = 0
    stack[0, 5] = n_grid
    top = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        s = stack[top, 1]
        e = stack[top, 2]
        amask = stack[top, 3]
        glo = stack[top, 4]
        ghi = stack[top, 5]
        f = nvar[node]
        if f == LEAF:
            v = nval[node]
            if amask == 3 and glo == 0 and ghi == n_grid:
                for k in range(s, e):
                    base[idx[k]] += v
            elif s == 0 and e == n:
                if amask & 1:
                    for g in range(glo, ghi):
                        c0[g] += v
                if amask & 2:
                    for g in range(glo, ghi):
                        c1[g] += v
            else:
                if amask & 1:
                    for k in range(s, e):
                        row = idx[k]
                        for g in range(glo, ghi):
                            f0[row, g] += v
                if amask & 2:
                    for k in range(s, e):
                        row = idx[k]
                        for g in range(glo, ghi):
                            f1[row, g] += v
            continue
        c = ncut[node]
        if f == 0:
            # treatment split: route whole subset per treatment level
            mask_left = 0
            if 0.0 <= c:
                mask_left |= 1
            if 1.0 <= c:
                mask_left |= 2
            ml = amask & mask_left
            mr = amask & (3 ^ mask_left)
            if ml != 0:
                stack[top, 0] = nleft[node]
                stack[top, 1] = s
                stack[top, 2] = e
                stack[top, 3] = ml
                stack[top, 4] = glo
                stack[top, 5] = ghi
                top += 1
            if mr != 0:
                stack[top, 0] = nright[node]
                stack[top, 1] = s
                stack[top, 2] = e
                stack[top, 3] = mr
                stack[top, 4] = glo
                stack[top, 5] = ghi
                top += 1
        elif f == th_col:
            # ability split: grid values <= cut go left (grid is sorted)
            split = 0
            while split < n_grid and grid[split] <= c:
                split += 1
            glo_l, ghi_l = glo, min(ghi, split)
            glo_r, ghi_r = max(glo, split), ghi
            if glo_l < ghi_l:
                stack[top, 0] = nleft[node]
                stack[top, 1] = s
                stack[top, 2] = e
                stack[top, 3] = amask
                stack[top, 4] = glo_l
                stack[top, 5] = ghi_l
                top += 1
            if glo_r < ghi_r:
                stack[top, 0] = nright[node]
                stack[top, 1] = s
                stack[top, 2] = e
                stack[top, 3] = amask
                stack[top, 4] = glo_r
                stack[top, 5] = ghi_r
                top += 1
        else:
            # covariate split: partition idx[s:e] in place
            w_col = f - 1
            i = s
            j = e - 1
            while i <= j:
                if W[idx[i], w_col] <= c:
                    i += 1
                else:
                    tmp = idx[i]
                    idx[i] = idx[j]
                    idx[j] = tmp
                    j -= 1
            mid = i
            if s < mid:
                stack[top, 0] = nleft[node]
                stack[top, 1] = s
                stack[top, 2] = mid
                stack[top, 3] = amask
                stack[top, 4] = glo
                stack[top, 5] = ghi
                top += 1
            if mid < e:
                stack[top, 0] = nright[node]
                stack[top, 1] = mid
                stack[top, 2] = e
                stack[top, 3] = amask
                stack[top, 4] = glo
                stack[top, 5] = ghi
                top += 1


@njit(cache=True)
def replay_weighted_curve(all_var, all_cut, all_val, all_left, all_right, offsets,
                          n_draws, n_trees, W, th_col, grid, weights, offset, out):
    """Per-draw density-weighted mean treatment contrast at every grid value.

    weights has shape (n_grid, n); out has shape (n_draws, n_grid) and
    receives (sum_i w * Phi(f1) - sum_i w * Phi(f0)) / sum_i w per draw.
    """
    n = W.shape[0]
    n_grid = grid.shape[0]
    base = np.zeros(n, dtype=np.float64)
    f0 = np.zeros((n, n_grid), dtype=np.float64)
    f1 = np.zeros((n, n_grid), dtype=np.float64)
    c0 = np.zeros(n_grid, dtype=np.float64)
    c1 = np.zeros(n_grid, dtype=np.float64)
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        idx[i] = i
    stack = np.empty((256, 6), dtype=np.int64)
    w_tot = np.empty(n_grid, dtype=np.float64)
    for g in range(n_grid):
        tot = 0.0
        for i in range(n):
            tot += weights[g, i]
        w_tot[g] = tot
    for d in range(n_draws):
        for i in range(n):
            base[i] = 0.0
            for g in range(n_grid):
                f0[i, g] = 0.0
                f1[i, g] = 0.0
        for g in range(n_grid):
            c0[g] = 0.0
            c1[g] = 0.0
        for t in range(n_trees):
            lo = offsets[d * n_trees + t]
            hi = offsets[d * n_trees + t + 1]
            _partition_tree(all_var[lo:hi], all_cut[lo:hi], all_val[lo:hi],
                            all_left[lo:hi], all_right[lo:hi],
                            W, th_col, grid, idx, stack, base, f0, f1, c0, c1)
        for g in range(n_grid):
            s0 = 0.0
            s1 = 0.0
            for i in range(n):
                w = weights[g, i]
                s0 += w * _phi(base[i] + c0[g] + f0[i, g] + offset)
                s1 += w * _phi(base[i] + c1[g] + f1[i, g] + offset)
            out[d, g] = (s1 - s0) / w_tot[g]


@njit(cache=True)
def replay_icate(all_var, all_cut, all_val, all_left, all_right, offsets,
                 n_draws, n_trees, W, th_col, grid_value, offset, out):
    """Materialized per-unit ICATE draws at a single grid value: out (n_draws, n)."""
    n = W.shape[0]
    grid = np.empty(1, dtype=np.float64)
    grid[0] = grid_value
    base = np.zeros(n, dtype=np.float64)
    f0 = np.zeros((n, 1), dtype=np.float64)
    f1 = np.zeros((n, 1), dtype=np.float64)
    c0 = np.zeros(1, dtype=np.float64)
    c1 = np.zeros(1, dtype=np.float64)
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        idx[i] = i
    stack = np.empty((256, 6), dtype=np.int64)
    for d in range(n_draws):
        for i in range(n):
            base[i] = 0.0
            f0[i, 0] = 0.0
            f1[i, 0] = 0.0
        c0[0] = 0.0
        c1[0] = 0.0
        for t in range(n_trees):
            lo = offsets[d * n_trees + t]
            hi = offsets[d * n_trees + t + 1]
            _partition_tree(all_var[lo:hi], all_cut[lo:hi], all_val[lo:hi],
                            all_left[lo:hi], all_right[lo:hi],
                            W, th_col, grid, idx, stack, base, f0, f1, c0, c1)
        for i in range(n):
            out[d, i] = (_phi(base[i] + c1[0] + f1[i, 0] + offset)
                         - _phi(base[i] + c0[0] + f0[i, 0] + offset))


@njit(cache=True)
def replay_train_mean(all_var, all_cut, all_val, all_left, all_right, offsets,
                      n_draws, n_trees, X, offset, out):
    """Posterior mean of Phi(latent) at the training rows (full column layout)."""
    n = X.shape[0]
    for i in range(n):
        out[i] = 0.0
    for d in range(n_draws):
        for i in range(n):
            f = 0.0
            for t in range(n_trees):
                lo = offsets[d * n_trees + t]
                node = np.int64(0)
                while all_var[lo + node] != LEAF:
                    if X[i, all_var[lo + node]] <= all_cut[lo + node]:
                        node = np.int64(all_left[lo + node])
                    else:
                        node = np.int64(all_right[lo + node])
                f += all_val[lo + node]
            out[i] += _phi(f + offset)
    for i in range(n):
        out[i] /= n_draws
