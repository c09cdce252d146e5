"""Compiled kernels shared by the tree ensembles.

Trees are stored as fixed-capacity node pools. For a tree with capacity
``cap`` the arrays ``var``, ``cut``, ``left``, ``right``, ``parent``,
``depth`` and ``value`` all have length ``cap``; node 0 is the root. ``var``
holds the split covariate of internal nodes, ``LEAF`` for terminal nodes and
``UNUSED`` for free slots. An ensemble stacks ``m`` such trees in 2-d arrays
and keeps, for every tree, the terminal node each training row falls into
(``leaf_of``).

Leaf semantics are selected with ``kind``: ``GAMMA_LEAVES`` for the
multiplicative log-linear forests (leaf stats are the count total and the
rate total) and ``NORMAL_LEAVES`` for the additive probit forests (leaf stats
are the row count and the residual sum).
"""

import math

import numpy as np
from numba import njit

LEAF = -1
UNUSED = -2

GROW = 0
PRUNE = 1
CHANGE = 2

GAMMA_LEAVES = 0
NORMAL_LEAVES = 1

LEAF_FLOOR = 1e-300

# layout of the int64 counters array filled by the sweeps
C_PROPOSED = 0  # 3 slots, one per move type
C_ACCEPTED = 3  # 3 slots
C_CLAMPED = 6
C_CAPACITY = 7
N_COUNTERS = 8


@njit(cache=True)
def split_prob(a, b, depth):
    return a * (1.0 + depth) ** (-b)


@njit(cache=True)
def tree_log_prior_arrays(var, depth, a, b):
    total = 0.0
    for t in range(var.shape[0]):
        v = var[t]
        if v == UNUSED:
            continue
        p = a * (1.0 + depth[t]) ** (-b)
        if v >= 0:
            total += math.log(p)
        else:
            total += math.log1p(-p)
    return total


@njit(cache=True)
def route_row(var, cut, left, right, x):
    node = 0
    while var[node] >= 0:
        if x[var[node]] <= cut[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@njit(cache=True)
def route_rows(var, cut, left, right, X, out):
    for i in range(X.shape[0]):
        out[i] = route_row(var, cut, left, right, X[i])


@njit(cache=True)
def leaf_log_marginal(kind, a, b, c0, d0, lgc0, sig2):
    """Log of the leaf-parameter integral for one terminal node."""
    if kind == GAMMA_LEAVES:
        return c0 * math.log(d0) - lgc0 + math.lgamma(a + c0) - (a + c0) * math.log(b + d0)
    v = a * sig2 + 1.0
    return -0.5 * math.log(v) + sig2 * b * b / (2.0 * v)


@njit(cache=True)
def draw_leaf(kind, a, b, c0, d0, sig2, rng):
    if kind == GAMMA_LEAVES:
        return rng.gamma(a + c0, 1.0 / (b + d0))
    prec = a + 1.0 / sig2
    return b / prec + rng.standard_normal() / math.sqrt(prec)


@njit(cache=True)
def count_leaves(var):
    n = 0
    for t in range(var.shape[0]):
        if var[t] == LEAF:
            n += 1
    return n


@njit(cache=True)
def count_internal(var):
    n = 0
    for t in range(var.shape[0]):
        if var[t] >= 0:
            n += 1
    return n


@njit(cache=True)
def is_prunable(var, left, right, t):
    return var[t] >= 0 and var[left[t]] == LEAF and var[right[t]] == LEAF


@njit(cache=True)
def count_prunable(var, left, right):
    n = 0
    for t in range(var.shape[0]):
        if is_prunable(var, left, right, t):
            n += 1
    return n


@njit(cache=True)
def nth_node(var, left, right, what, r):
    """Index of the r-th node (in storage order) of a given class.

    ``what`` is 0 for leaves, 1 for internal nodes, 2 for prunable nodes.
    """
    c = 0
    for t in range(var.shape[0]):
        if what == 0:
            ok = var[t] == LEAF
        elif what == 1:
            ok = var[t] >= 0
        else:
            ok = is_prunable(var, left, right, t)
        if ok:
            if c == r:
                return t
            c += 1
    return -1


@njit(cache=True)
def free_slots(var, out):
    """Write up to two unused slot indices into ``out``; return how many."""
    k = 0
    for t in range(var.shape[0]):
        if var[t] == UNUSED:
            out[k] = t
            k += 1
            if k == 2:
                break
    return k


@njit(cache=True)
def rows_in_leaf(leaf_of, node, rows):
    n = 0
    for i in range(leaf_of.shape[0]):
        if leaf_of[i] == node:
            rows[n] = i
            n += 1
    return n


@njit(cache=True)
def mark_subtree(var, left, right, node, flag, stack):
    """Set flag[t] = 1 for every node of the subtree rooted at ``node``."""
    flag[:] = 0
    top = 0
    stack[0] = node
    top = 1
    while top > 0:
        top -= 1
        t = stack[top]
        flag[t] = 1
        if var[t] >= 0:
            stack[top] = left[t]
            stack[top + 1] = right[t]
            top += 2


@njit(cache=True)
def rows_in_subtree(leaf_of, flag, rows):
    n = 0
    for i in range(leaf_of.shape[0]):
        if flag[leaf_of[i]] == 1:
            rows[n] = i
            n += 1
    return n


@njit(cache=True)
def _next_stamp(stamp):
    stamp[0] += 1
    return stamp[0]


@njit(cache=True)
def count_cuts(rows, nrows, k, xr, mark, stamp):
    """Number of valid cut points for covariate ``k`` among ``rows``.

    Marks the distinct ranks present with a fresh stamp and returns the
    distinct count minus one (the largest value cannot be a cut).
    """
    s = _next_stamp(stamp)
    cnt = 0
    for ii in range(nrows):
        r = xr[rows[ii], k]
        if mark[r] != s:
            mark[r] = s
            cnt += 1
    return cnt - 1


@njit(cache=True)
def rule_table(rows, nrows, xr, probs, mark, stamp, ncut):
    """Fill ``ncut`` for every covariate; return the total weight of
    covariates with at least one valid cut."""
    total = 0.0
    for k in range(ncut.shape[0]):
        ncut[k] = count_cuts(rows, nrows, k, xr, mark, stamp)
        if ncut[k] >= 1:
            total += probs[k]
    return total


@njit(cache=True)
def rule_log_prob(k, probs, total, ncut):
    if probs[k] <= 0.0 or ncut[k] < 1 or total <= 0.0:
        return -np.inf
    return math.log(probs[k] / total) - math.log(ncut[k])


@njit(cache=True)
def rule_log_prob_at(rows, nrows, k, c, xr, ux, nux, probs, mark, stamp, ncut):
    """Prior log probability of rule (k, c) at a node holding ``rows``.

    -inf when the cut is not one of the valid cuts for these rows.
    """
    total = rule_table(rows, nrows, xr, probs, mark, stamp, ncut)
    if total <= 0.0 or probs[k] <= 0.0 or ncut[k] < 1:
        return -np.inf
    r = np.searchsorted(ux[k, :nux[k]], c)
    if r >= nux[k] or ux[k, r] != c:
        return -np.inf
    present = False
    above = False
    for ii in range(nrows):
        ri = xr[rows[ii], k]
        if ri == r:
            present = True
        elif ri > r:
            above = True
    if not (present and above):
        return -np.inf
    return math.log(probs[k] / total) - math.log(ncut[k])


@njit(cache=True)
def draw_rule(rows, nrows, xr, ux, nux, probs, mark, stamp, ncut, rng):
    """Draw a splitting rule for the given rows.

    Returns ``(k, cut, log_prob)`` with ``k = -1`` when no covariate admits a
    valid cut.
    """
    total = rule_table(rows, nrows, xr, probs, mark, stamp, ncut)
    if total <= 0.0:
        return -1, 0.0, -np.inf
    u = rng.random() * total
    k = -1
    acc = 0.0
    last = -1
    for kk in range(ncut.shape[0]):
        if ncut[kk] >= 1 and probs[kk] > 0.0:
            last = kk
            acc += probs[kk]
            if u < acc:
                k = kk
                break
    if k < 0:
        k = last
    nk = ncut[k]
    count_cuts(rows, nrows, k, xr, mark, stamp)
    s = stamp[0]
    pick = int(rng.random() * nk)
    if pick >= nk:
        pick = nk - 1
    c = 0
    cut = 0.0
    for r in range(nux[k]):
        if mark[r] == s:
            if c == pick:
                cut = ux[k, r]
                break
            c += 1
    return k, cut, math.log(probs[k] / total) - math.log(nk)


@njit(cache=True)
def propose(var, cut, left, right, parent, depth, leaf_of, X, xr, ux, nux,
            probs, pg, pp, a, b, rng, rows, newleaf, mark, stamp, ncut,
            flag, stack, slots, flag2, rows2):
    """Draw a grow, prune or change proposal without modifying the tree.

    Returns ``(move, feasible, node, k, cut, nrows, log_q_ratio,
    log_rule_ratio, log_depth_ratio)`` where ``log_q_ratio`` is
    log K(T|T') - log K(T'|T), ``log_rule_ratio`` the change in the
    splitting-rule prior and ``log_depth_ratio`` the change in the
    branching-process prior. ``rows[:nrows]`` holds the rows affected by the
    move; for a change move ``newleaf[:nrows]`` holds their new leaves.
    ``feasible`` is 0 for infeasible moves, 2 when the tree is out of node
    capacity, 1 otherwise.
    """
    u = rng.random()
    if u < pg:
        move = GROW
    elif u < pg + pp:
        move = PRUNE
    else:
        move = CHANGE
    ninf = -np.inf

    if move == GROW:
        nleaves = count_leaves(var)
        r = int(rng.random() * nleaves)
        if r >= nleaves:
            r = nleaves - 1
        node = nth_node(var, left, right, 0, r)
        nrows = rows_in_leaf(leaf_of, node, rows)
        if free_slots(var, slots) < 2:
            return move, 2, node, -1, 0.0, nrows, ninf, 0.0, 0.0
        k, c, lrule = draw_rule(rows, nrows, xr, ux, nux, probs, mark, stamp, ncut, rng)
        if k < 0:
            return move, 0, node, -1, 0.0, nrows, ninf, 0.0, 0.0
        w2 = count_prunable(var, left, right)
        par = parent[node]
        if par >= 0:
            sib = left[par] if right[par] == node else right[par]
            if var[sib] == LEAF:
                w2 -= 1
        w2 += 1
        dn = depth[node]
        ldepth = (math.log(split_prob(a, b, dn)) + 2.0 * math.log1p(-split_prob(a, b, dn + 1))
                  - math.log1p(-split_prob(a, b, dn)))
        lq = math.log(pp / w2) - (math.log(pg / nleaves) + lrule)
        return move, 1, node, k, c, nrows, lq, lrule, ldepth

    if move == PRUNE:
        w2 = count_prunable(var, left, right)
        if w2 == 0:
            return move, 0, -1, -1, 0.0, 0, ninf, 0.0, 0.0
        r = int(rng.random() * w2)
        if r >= w2:
            r = w2 - 1
        node = nth_node(var, left, right, 2, r)
        mark_subtree(var, left, right, node, flag, stack)
        nrows = rows_in_subtree(leaf_of, flag, rows)
        total = rule_table(rows, nrows, xr, probs, mark, stamp, ncut)
        lrule = rule_log_prob(var[node], probs, total, ncut)
        nleaves_after = count_leaves(var) - 1
        dn = depth[node]
        ldepth = -(math.log(split_prob(a, b, dn)) + 2.0 * math.log1p(-split_prob(a, b, dn + 1))
                   - math.log1p(-split_prob(a, b, dn)))
        lq = (math.log(pg / nleaves_after) + lrule) - math.log(pp / w2)
        return move, 1, node, var[node], cut[node], nrows, lq, -lrule, ldepth

    nint = count_internal(var)
    if nint == 0:
        return move, 0, -1, -1, 0.0, 0, ninf, 0.0, 0.0
    r = int(rng.random() * nint)
    if r >= nint:
        r = nint - 1
    node = nth_node(var, left, right, 1, r)
    mark_subtree(var, left, right, node, flag, stack)
    nrows = rows_in_subtree(leaf_of, flag, rows)
    total = rule_table(rows, nrows, xr, probs, mark, stamp, ncut)
    lold = rule_log_prob(var[node], probs, total, ncut)
    k, c, lnew = draw_rule(rows, nrows, xr, ux, nux, probs, mark, stamp, ncut, rng)
    if k < 0:
        return move, 0, node, -1, 0.0, nrows, ninf, 0.0, 0.0
    # re-route the affected rows below the changed node
    for t in range(var.shape[0]):
        stack[t] = 0
    for ii in range(nrows):
        i = rows[ii]
        t = left[node] if X[i, k] <= c else right[node]
        while var[t] >= 0:
            if X[i, var[t]] <= cut[t]:
                t = left[t]
            else:
                t = right[t]
        newleaf[ii] = t
        stack[t] += 1
    for t in range(var.shape[0]):
        if flag[t] == 1 and var[t] == LEAF and stack[t] == 0:
            return move, 0, node, k, c, nrows, ninf, 0.0, 0.0
    if lold == ninf:
        # the current rule is not reachable by the proposal (covariate
        # weight zero); the reverse move has probability zero
        return move, 0, node, k, c, nrows, ninf, 0.0, 0.0
    # rules below the changed node see different rows
    ldesc = 0.0
    for s_ in range(var.shape[0]):
        if flag[s_] != 1 or s_ == node or var[s_] < 0:
            continue
        mark_subtree(var, left, right, s_, flag2, stack)
        n_old = 0
        n_new = 0
        for ii in range(nrows):
            i = rows[ii]
            if flag2[leaf_of[i]] == 1:
                rows2[n_old] = i
                n_old += 1
        lo_ = rule_log_prob_at(rows2, n_old, var[s_], cut[s_], xr, ux, nux, probs, mark,
                               stamp, ncut)
        for ii in range(nrows):
            if flag2[newleaf[ii]] == 1:
                rows2[n_new] = rows[ii]
                n_new += 1
        ln_ = rule_log_prob_at(rows2, n_new, var[s_], cut[s_], xr, ux, nux, probs, mark,
                               stamp, ncut)
        if ln_ == ninf:
            return move, 0, node, k, c, nrows, ninf, 0.0, 0.0
        ldesc += ln_ - lo_
    return move, 1, node, k, c, nrows, lold - lnew, lnew - lold + ldesc, 0.0


@njit(cache=True)
def apply_move(move, node, k, c, nrows, var, cut, left, right, parent, depth,
               value, leaf_of, X, rows, newleaf, slots):
    if move == GROW:
        l = slots[0]
        r = slots[1]
        var[node] = k
        cut[node] = c
        left[node] = l
        right[node] = r
        for t in (l, r):
            var[t] = LEAF
            cut[t] = 0.0
            left[t] = -1
            right[t] = -1
            parent[t] = node
            depth[t] = depth[node] + 1
            value[t] = value[node]
        for ii in range(nrows):
            i = rows[ii]
            leaf_of[i] = l if X[i, k] <= c else r
    elif move == PRUNE:
        l = left[node]
        r = right[node]
        value[node] = value[l]
        for t in (l, r):
            var[t] = UNUSED
            parent[t] = -1
            left[t] = -1
            right[t] = -1
        var[node] = LEAF
        cut[node] = 0.0
        left[node] = -1
        right[node] = -1
        for ii in range(nrows):
            leaf_of[rows[ii]] = node
    else:
        var[node] = k
        cut[node] = c
        for ii in range(nrows):
            leaf_of[rows[ii]] = newleaf[ii]


@njit(cache=True)
def move_delta_loglik(move, node, k, c, nrows, var, left, right, leaf_of, X,
                      rows, newleaf, sa, sb, kind, c0, d0, lgc0, sig2,
                      acc_a, acc_b, acc_a2, acc_b2, flag):
    """Change in the summed leaf log-marginals implied by a proposal."""
    if move == GROW:
        la = 0.0
        lb = 0.0
        ra = 0.0
        rb = 0.0
        for ii in range(nrows):
            i = rows[ii]
            if X[i, k] <= c:
                la += sa[i]
                lb += sb[i]
            else:
                ra += sa[i]
                rb += sb[i]
        return (leaf_log_marginal(kind, la, lb, c0, d0, lgc0, sig2)
                + leaf_log_marginal(kind, ra, rb, c0, d0, lgc0, sig2)
                - leaf_log_marginal(kind, la + ra, lb + rb, c0, d0, lgc0, sig2))
    if move == PRUNE:
        l = left[node]
        la = 0.0
        lb = 0.0
        ra = 0.0
        rb = 0.0
        for ii in range(nrows):
            i = rows[ii]
            if leaf_of[i] == l:
                la += sa[i]
                lb += sb[i]
            else:
                ra += sa[i]
                rb += sb[i]
        return (leaf_log_marginal(kind, la + ra, lb + rb, c0, d0, lgc0, sig2)
                - leaf_log_marginal(kind, la, lb, c0, d0, lgc0, sig2)
                - leaf_log_marginal(kind, ra, rb, c0, d0, lgc0, sig2))
    # change: compare every leaf of the subtree before and after
    for t in range(var.shape[0]):
        acc_a[t] = 0.0
        acc_b[t] = 0.0
        acc_a2[t] = 0.0
        acc_b2[t] = 0.0
    for ii in range(nrows):
        i = rows[ii]
        acc_a[leaf_of[i]] += sa[i]
        acc_b[leaf_of[i]] += sb[i]
        acc_a2[newleaf[ii]] += sa[i]
        acc_b2[newleaf[ii]] += sb[i]
    delta = 0.0
    for t in range(var.shape[0]):
        if flag[t] == 1 and var[t] == LEAF:
            delta += (leaf_log_marginal(kind, acc_a2[t], acc_b2[t], c0, d0, lgc0, sig2)
                      - leaf_log_marginal(kind, acc_a[t], acc_b[t], c0, d0, lgc0, sig2))
    return delta


class Scratch:
    """Work arrays reused across tree updates (plain Python holder)."""

    def __init__(self, n, p, cap, max_unique):
        self.rows = np.zeros(n, np.int64)
        self.newleaf = np.zeros(n, np.int64)
        self.mark = np.zeros(max(max_unique, 1), np.int64)
        self.stamp = np.zeros(1, np.int64)
        self.ncut = np.zeros(p, np.int64)
        self.flag = np.zeros(cap, np.int64)
        self.flag2 = np.zeros(cap, np.int64)
        self.rows2 = np.zeros(n, np.int64)
        self.stack = np.zeros(cap + 2, np.int64)
        self.slots = np.zeros(2, np.int64)
        self.acc = np.zeros((4, cap))
        self.sa = np.zeros(n)
        self.sb = np.zeros(n)
        self.partial = np.zeros(n)
        self.leafval = np.zeros(cap)
        self.flin = np.zeros(n)
        self.plin = np.zeros(n)


@njit(cache=True)
def mh_tree_step(var, cut, left, right, parent, depth, value, leaf_of, X, xr,
                 ux, nux, probs, pg, pp, a, b, sa, sb, kind, c0, d0, lgc0,
                 sig2, rng, rows, newleaf, mark, stamp, ncut, flag, stack,
                 slots, flag2, rows2, acc, counters):
    """One Metropolis-Hastings topology update of a single tree."""
    move, feas, node, k, c, nrows, lq, lrule, ldepth = propose(
        var, cut, left, right, parent, depth, leaf_of, X, xr, ux, nux, probs,
        pg, pp, a, b, rng, rows, newleaf, mark, stamp, ncut, flag, stack, slots,
        flag2, rows2)
    counters[C_PROPOSED + move] += 1
    if feas != 1:
        if feas == 2:
            counters[C_CAPACITY] += 1
        return False
    dll = move_delta_loglik(move, node, k, c, nrows, var, left, right,
                            leaf_of, X, rows, newleaf, sa, sb, kind, c0, d0,
                            lgc0, sig2, acc[0], acc[1], acc[2], acc[3], flag)
    log_alpha = dll + ldepth + lrule + lq
    if log_alpha >= 0.0 or math.log(rng.random()) < log_alpha:
        apply_move(move, node, k, c, nrows, var, cut, left, right, parent,
                   depth, value, leaf_of, X, rows, newleaf, slots)
        counters[C_ACCEPTED + move] += 1
        return True
    return False


@njit(cache=True)
def redraw_leaves(var, value, leaf_of, sa, sb, kind, c0, d0, sig2, rng,
                  acc_a, acc_b, counters):
    for t in range(var.shape[0]):
        acc_a[t] = 0.0
        acc_b[t] = 0.0
    for i in range(leaf_of.shape[0]):
        acc_a[leaf_of[i]] += sa[i]
        acc_b[leaf_of[i]] += sb[i]
    for t in range(var.shape[0]):
        if var[t] == LEAF:
            v = draw_leaf(kind, acc_a[t], acc_b[t], c0, d0, sig2, rng)
            if kind == GAMMA_LEAVES and v < LEAF_FLOOR:
                v = LEAF_FLOOR
                counters[C_CLAMPED] += 1
            value[t] = v


@njit(cache=True, nogil=True)
def sweep_loglinear(var, cut, left, right, parent, depth, value, leaf_of, X,
                    xr, ux, nux, probs, pg, pp, a, b, y, base, logf, c0, d0,
                    use_lik, update_trees, rng, rows, newleaf, mark, stamp,
                    ncut, flag, stack, slots, flag2, rows2, acc, sa, sb, partial,
                    leafval, flin, plin, counters):
    """Backfit every tree of one multiplicative forest.

    ``base[i]`` is phi_i * z_ij * exp(u_ij); ``logf`` is the cached log fit
    and is kept consistent on exit. ``flin`` and ``plin`` are work arrays
    holding the fit and the partial fit on the linear scale; they are only
    used while every |log f| is small enough for exp to be exact.
    """
    m = var.shape[0]
    n = leaf_of.shape[1]
    lgc0 = math.lgamma(c0)
    linear = True
    for i in range(n):
        if abs(logf[i]) > 600.0:
            linear = False
            break
    if linear:
        for i in range(n):
            flin[i] = math.exp(logf[i])
    for h in range(m):
        vals = value[h]
        for t in range(var.shape[1]):
            if var[h, t] == LEAF:
                leafval[t] = math.log(vals[t])
        lo = leaf_of[h]
        for i in range(n):
            partial[i] = logf[i] - leafval[lo[i]]
        if linear:
            for i in range(n):
                plin[i] = flin[i] / vals[lo[i]]
        if use_lik:
            for i in range(n):
                sa[i] = y[i]
                if base[i] > 0.0:
                    sb[i] = base[i] * (plin[i] if linear else math.exp(partial[i]))
                else:
                    sb[i] = 0.0
        else:
            for i in range(n):
                sa[i] = 0.0
                sb[i] = 0.0
        if update_trees:
            mh_tree_step(var[h], cut[h], left[h], right[h], parent[h],
                         depth[h], vals, lo, X, xr, ux, nux, probs, pg,
                         pp, a, b, sa, sb, GAMMA_LEAVES, c0, d0, lgc0, 1.0,
                         rng, rows, newleaf, mark, stamp, ncut, flag, stack,
                         slots, flag2, rows2, acc, counters)
        redraw_leaves(var[h], vals, lo, sa, sb, GAMMA_LEAVES, c0, d0, 1.0,
                      rng, acc[0], acc[1], counters)
        for t in range(var.shape[1]):
            if var[h, t] == LEAF:
                leafval[t] = math.log(vals[t])
        for i in range(n):
            logf[i] = partial[i] + leafval[lo[i]]
        if linear:
            for i in range(n):
                flin[i] = plin[i] * vals[lo[i]]


@njit(cache=True, nogil=True)
def sweep_probit(var, cut, left, right, parent, depth, value, leaf_of, X, xr,
                 ux, nux, probs, pg, pp, a, b, w, fit, sig2, use_lik,
                 update_trees, rng, rows, newleaf, mark, stamp, ncut, flag,
                 stack, slots, flag2, rows2, acc, sa, sb, partial, counters):
    """Backfit every tree of one additive probit forest against latents w."""
    m = var.shape[0]
    n = leaf_of.shape[1]
    for h in range(m):
        lo = leaf_of[h]
        vals = value[h]
        for i in range(n):
            pf = fit[i] - vals[lo[i]]
            partial[i] = pf
            if use_lik:
                sa[i] = 1.0
                sb[i] = w[i] - pf
            else:
                sa[i] = 0.0
                sb[i] = 0.0
        if update_trees:
            mh_tree_step(var[h], cut[h], left[h], right[h], parent[h],
                         depth[h], vals, lo, X, xr, ux, nux, probs, pg, pp,
                         a, b, sa, sb, NORMAL_LEAVES, 1.0, 1.0, 0.0, sig2, rng,
                         rows, newleaf, mark, stamp, ncut, flag, stack, slots,
                         flag2, rows2, acc, counters)
        redraw_leaves(var[h], vals, lo, sa, sb, NORMAL_LEAVES, 1.0, 1.0, sig2,
                      rng, acc[0], acc[1], counters)
        for i in range(n):
            fit[i] = partial[i] + vals[lo[i]]


@njit(cache=True)
def split_counts(var, p, out):
    out[:] = 0
    for h in range(var.shape[0]):
        for t in range(var.shape[1]):
            if var[h, t] >= 0:
                out[var[h, t]] += 1


@njit(cache=True)
def predict_log_product(var, cut, left, right, value, X, out):
    """Sum over trees of log leaf value for each row of X."""
    for i in range(X.shape[0]):
        s = 0.0
        for h in range(var.shape[0]):
            s += math.log(value[h, route_row(var[h], cut[h], left[h], right[h], X[i])])
        out[i] = s


@njit(cache=True)
def predict_sum(var, cut, left, right, value, X, out):
    for i in range(X.shape[0]):
        s = 0.0
        for h in range(var.shape[0]):
            s += value[h, route_row(var[h], cut[h], left[h], right[h], X[i])]
        out[i] = s


@njit(cache=True)
def log_ndtr(x):
    """log Phi(x), accurate in both tails."""
    if x > 5.0:
        return math.log1p(-0.5 * math.erfc(x / math.sqrt(2.0)))
    if x > -20.0:
        return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))
    # asymptotic series of the Mills ratio
    x2 = x * x
    s = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2)
    return -0.5 * x2 - math.log(-x) - 0.5 * math.log(2.0 * math.pi) + math.log(s)


@njit(cache=True)
def std_truncnorm_lower(lo, rng):
    """Standard normal truncated to [lo, inf)."""
    if lo < 0.0:
        while True:
            x = rng.standard_normal()
            if x >= lo:
                return x
    alpha = 0.5 * (lo + math.sqrt(lo * lo + 4.0))
    while True:
        x = lo - math.log(rng.random()) / alpha
        if math.log(rng.random()) <= -0.5 * (x - alpha) * (x - alpha):
            return x


@njit(cache=True, nogil=True)
def draw_w(z, mean, rng, out):
    """Probit latents: w <= 0 where z == 1, w >= 0 where z == 0."""
    for i in range(z.shape[0]):
        if z[i] == 1:
            # w = mean + e, w <= 0  <=>  -e >= mean
            out[i] = mean[i] - std_truncnorm_lower(mean[i], rng)
        else:
            out[i] = mean[i] + std_truncnorm_lower(-mean[i], rng)


@njit(cache=True, nogil=True)
def draw_z(y, logf, fit0, phi, u, rng, out):
    """At-risk indicators given the current fits (log-sum-exp form)."""
    for i in range(y.shape[0]):
        if y[i] > 0:
            out[i] = 1
            continue
        l1 = log_ndtr(-fit0[i]) - phi[i] * math.exp(u[i] + logf[i])
        l0 = log_ndtr(fit0[i])
        if l1 == -np.inf:
            p1 = 0.0
        elif l0 == -np.inf:
            p1 = 1.0
        else:
            p1 = 1.0 / (1.0 + math.exp(l0 - l1))
        out[i] = 1 if rng.random() < p1 else 0


@njit(cache=True)
def compact_ensemble(var, cut, left, right, depth, value):
    """Preorder serialization of an ensemble.

    Returns ``(ptr, cvar, cval, cright, cdepth)``: tree ``h`` occupies
    positions ``ptr[h]:ptr[h + 1]``; ``cval`` holds the cut of internal nodes
    and the value of leaves; ``cright`` is the position of the right child
    relative to the tree start (the left child always follows its parent).
    """
    m = var.shape[0]
    total = 0
    for h in range(m):
        for t in range(var.shape[1]):
            if var[h, t] != UNUSED:
                total += 1
    ptr = np.zeros(m + 1, np.int64)
    cvar = np.empty(total, np.int32)
    cval = np.empty(total)
    cright = np.full(total, -1, np.int32)
    cdepth = np.empty(total, np.int16)
    stack = np.empty(var.shape[1] + 2, np.int64)
    owner = np.empty(var.shape[1] + 2, np.int64)
    pos = 0
    for h in range(m):
        start = pos
        top = 1
        stack[0] = 0
        owner[0] = -1
        while top > 0:
            top -= 1
            t = stack[top]
            o = owner[top]
            if o >= 0:
                cright[o] = pos - start
            cvar[pos] = var[h, t]
            if var[h, t] >= 0:
                cval[pos] = cut[h, t]
            else:
                cval[pos] = value[h, t]
            cdepth[pos] = depth[h, t]
            if var[h, t] >= 0:
                stack[top] = right[h, t]
                owner[top] = pos
                stack[top + 1] = left[h, t]
                owner[top + 1] = -1
                top += 2
            pos += 1
        ptr[h + 1] = pos
    return ptr, cvar, cval, cright, cdepth


@njit(cache=True)
def predict_compact(ptr, cvar, cval, cright, X, log_product, out):
    """Evaluate a compact ensemble: sum of leaves or sum of log leaves."""
    m = ptr.shape[0] - 1
    for i in range(X.shape[0]):
        s = 0.0
        for h in range(m):
            base = ptr[h]
            t = 0
            while cvar[base + t] >= 0:
                if X[i, cvar[base + t]] <= cval[base + t]:
                    t += 1
                else:
                    t = cright[base + t]
            v = cval[base + t]
            s += math.log(v) if log_product else v
        out[i] = s


@njit(cache=True)
def predict_compact_grid(ptr, cvar, cval, cright, X, k, grid, log_product, out):
    """Ensemble output with column ``k`` of ``X`` replaced by each grid value.

    ``out`` has shape (len(grid), n). Trees that never split on ``k`` are
    evaluated once per row.
    """
    m = ptr.shape[0] - 1
    G = grid.shape[0]
    n = X.shape[0]
    out[:, :] = 0.0
    x = np.empty(X.shape[1])
    for h in range(m):
        base = ptr[h]
        uses = False
        for t in range(ptr[h], ptr[h + 1]):
            if cvar[t] == k:
                uses = True
                break
        for i in range(n):
            for c in range(X.shape[1]):
                x[c] = X[i, c]
            for g in range(G if uses else 1):
                if uses:
                    x[k] = grid[g]
                t = 0
                while cvar[base + t] >= 0:
                    if x[cvar[base + t]] <= cval[base + t]:
                        t += 1
                    else:
                        t = cright[base + t]
                v = cval[base + t]
                v = math.log(v) if log_product else v
                if uses:
                    out[g, i] += v
                else:
                    for gg in range(G):
                        out[gg, i] += v
