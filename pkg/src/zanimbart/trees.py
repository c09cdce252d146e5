"""Decision trees, the branching-process prior, split-rule sampling and the
grow/prune/change proposal.

The Python classes here are thin views over the fixed-capacity node arrays
used by :mod:`zanimbart._kernels`; the ensembles operate on the same arrays
in compiled code.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.special import gammaln

from . import _kernels as K
from ._slice import slice_sample

DEFAULT_CAPACITY = 64
MOVE_NAMES = ("grow", "prune", "change")


@dataclass
class TreePrior:
    """Branching-process prior: a node at depth t splits w.p. a (1 + t)^-b."""

    a: float = 0.95
    b: float = 2.0

    def __post_init__(self):
        if not 0 < self.a < 1:
            raise ValueError("a must lie in (0, 1)")
        if self.b < 0:
            raise ValueError("b must be nonnegative")

    def split_prob(self, depth):
        return self.a * (1.0 + depth) ** (-self.b)


@dataclass
class MoveWeights:
    grow: float = 0.28
    prune: float = 0.28
    change: float = 0.44

    def __post_init__(self):
        w = np.array([self.grow, self.prune, self.change])
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError("move weights must be nonnegative and sum to one")


@dataclass
class SplitProbabilities:
    """Covariate selection probabilities, optionally with a sparsity prior.

    With ``sparse=True`` the vector follows Dirichlet(omega/p, ..., omega/p)
    and omega/(omega + rho) ~ Beta(a_omega, b_omega).
    """

    p: int
    sparse: bool = False
    omega: float = 1.0
    a_omega: float = 0.5
    b_omega: float = 1.0
    rho: float = None
    s: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.rho is None:
            self.rho = float(self.p)
        if self.s is None:
            self.s = np.full(self.p, 1.0 / self.p)
        self.s = np.asarray(self.s, dtype=float)


class CovariateIndex:
    """Training covariates with the per-column ranks used for cut sampling.

    Parameters
    ----------
    X : array-like of shape (n, p)
    """

    def __init__(self, X):
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be 2-d")
        if not np.all(np.isfinite(X)):
            raise ValueError("X must be finite")
        n, p = X.shape
        self.X = X
        self.xr = np.empty((n, p), np.int64)
        uniq = []
        for k in range(p):
            u, inv = np.unique(X[:, k], return_inverse=True)
            uniq.append(u)
            self.xr[:, k] = inv
        self.nux = np.array([u.size for u in uniq], np.int64)
        self.ux = np.zeros((p, max(int(self.nux.max()), 1)))
        for k, u in enumerate(uniq):
            self.ux[k, :u.size] = u

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def scratch(self, cap):
        return K.Scratch(self.n, self.p, cap, int(self.nux.max()))


class DecisionTree:
    """Binary tree stored in fixed-capacity node arrays.

    Leaf values are plain floats; whether they act multiplicatively or
    additively is decided by the owning forest.
    """

    def __init__(self, var, cut, left, right, parent, depth, value):
        self.var = var
        self.cut = cut
        self.left = left
        self.right = right
        self.parent = parent
        self.depth = depth
        self.value = value

    @classmethod
    def stump(cls, value=0.0, capacity=DEFAULT_CAPACITY):
        var = np.full(capacity, K.UNUSED, np.int64)
        var[0] = K.LEAF
        value_ = np.zeros(capacity)
        value_[0] = value
        return cls(var, np.zeros(capacity), np.full(capacity, -1, np.int64),
                   np.full(capacity, -1, np.int64), np.full(capacity, -1, np.int64),
                   np.zeros(capacity, np.int64), value_)

    def copy(self):
        return DecisionTree(*(a.copy() for a in self.arrays()))

    def arrays(self):
        return (self.var, self.cut, self.left, self.right, self.parent, self.depth, self.value)

    @property
    def capacity(self):
        return self.var.shape[0]

    def leaves(self):
        return np.flatnonzero(self.var == K.LEAF)

    def internal(self):
        return np.flatnonzero(self.var >= 0)

    def split(self, node, k, cut, left_value=None, right_value=None):
        """Turn leaf ``node`` into a split on ``x[k] <= cut``; return children."""
        if self.var[node] != K.LEAF:
            raise ValueError("only leaves can be split")
        free = np.flatnonzero(self.var == K.UNUSED)
        if free.size < 2:
            raise ValueError("tree capacity exhausted")
        l, r = int(free[0]), int(free[1])
        self.var[node] = k
        self.cut[node] = cut
        self.left[node], self.right[node] = l, r
        for t, v in ((l, left_value), (r, right_value)):
            self.var[t] = K.LEAF
            self.parent[t] = node
            self.depth[t] = self.depth[node] + 1
            self.value[t] = self.value[node] if v is None else v
        return l, r

    def apply(self, X):
        """Leaf index for every row of ``X`` (see :func:`partition_assign`)."""
        return partition_assign(self, X)

    def to_preorder(self):
        """Preorder node list of ``(depth, var, cut)`` / ``(depth, 'L', value)``."""
        out = []
        stack = [0]
        while stack:
            t = stack.pop()
            if self.var[t] >= 0:
                out.append((int(self.depth[t]), int(self.var[t]), float(self.cut[t])))
                stack.append(int(self.right[t]))
                stack.append(int(self.left[t]))
            else:
                out.append((int(self.depth[t]), "L", float(self.value[t])))
        return out

    @classmethod
    def from_preorder(cls, nodes, capacity=None):
        cap = capacity or max(DEFAULT_CAPACITY, len(nodes))
        tree = cls.stump(capacity=cap)
        tree.var[0] = K.UNUSED
        pos = [0]

        def build(t, parent, depth):
            d_, kind, val = nodes[pos[0]]
            pos[0] += 1
            if d_ != depth:
                raise ValueError("inconsistent depth in preorder list")
            tree.parent[t] = parent
            tree.depth[t] = depth
            if kind == "L":
                tree.var[t] = K.LEAF
                tree.value[t] = val
                return t + 1
            tree.var[t] = int(kind)
            tree.cut[t] = val
            tree.left[t] = t + 1
            nxt = build(t + 1, t, depth + 1)
            tree.right[t] = nxt
            return build(nxt, t, depth + 1)

        build(0, -1, 0)
        if pos[0] != len(nodes):
            raise ValueError("trailing nodes in preorder list")
        return tree


def tree_log_prior(tree, prior):
    """Log probability of the tree shape under the branching-process prior."""
    return float(K.tree_log_prior_arrays(tree.var, tree.depth, prior.a, prior.b))


def partition_assign(tree, X):
    """Route each row of ``X``: left when ``x[k] <= cut``."""
    X = np.ascontiguousarray(X, dtype=float)
    internal = tree.var[tree.var >= 0]
    if internal.size and internal.max() >= X.shape[1]:
        raise IndexError("tree splits on a covariate not present in X")
    out = np.empty(X.shape[0], np.int64)
    K.route_rows(tree.var, tree.cut, tree.left, tree.right, X, out)
    return out


def sample_split_rule(data, rows, probs, rng, scratch=None):
    """Draw a splitting rule for the training rows reaching a node.

    Parameters
    ----------
    data : CovariateIndex
    rows : array-like of int
        Training rows at the node.
    probs : SplitProbabilities
    rng : numpy.random.Generator

    Returns
    -------
    (k, cut) or None
        None when no covariate separates the rows.
    """
    sc = scratch or data.scratch(DEFAULT_CAPACITY)
    rows = np.asarray(rows, np.int64)
    sc.rows[:rows.size] = rows
    k, c, _ = K.draw_rule(sc.rows, rows.size, data.xr, data.ux, data.nux, probs.s,
                          sc.mark, sc.stamp, sc.ncut, rng)
    return None if k < 0 else (int(k), float(c))


@dataclass
class Proposal:
    """Outcome of :func:`propose_move`.

    ``log_q_ratio`` is log K(T | T') - log K(T' | T) and ``log_prior_ratio``
    the change in the tree prior including the splitting-rule probabilities.
    Infeasible proposals carry ``tree is original`` and ``log_q_ratio = -inf``.
    """

    tree: DecisionTree
    leaf_of: np.ndarray
    move: str
    feasible: bool
    log_q_ratio: float
    log_prior_ratio: float
    log_depth_ratio: float
    node: int


def propose_move(tree, data, leaf_of, probs, rng, prior=TreePrior(), weights=MoveWeights(),
                 scratch=None):
    """Draw a grow, prune or change proposal for ``tree``.

    Parameters
    ----------
    tree : DecisionTree
    data : CovariateIndex
    leaf_of : ndarray of int
        Current leaf of each training row.
    probs : SplitProbabilities
    rng : numpy.random.Generator

    Returns
    -------
    Proposal
    """
    sc = scratch or data.scratch(tree.capacity)
    res = K.propose(tree.var, tree.cut, tree.left, tree.right, tree.parent, tree.depth,
                    leaf_of, data.X, data.xr, data.ux, data.nux, probs.s, weights.grow,
                    weights.prune, prior.a, prior.b, rng, sc.rows, sc.newleaf, sc.mark,
                    sc.stamp, sc.ncut, sc.flag, sc.stack, sc.slots, sc.flag2, sc.rows2)
    move, feas, node, k, c, nrows, lq, lrule, ldepth = res
    name = MOVE_NAMES[move]
    if feas != 1:
        return Proposal(tree, leaf_of, name, False, -math.inf, 0.0, 0.0, int(node))
    new = tree.copy()
    lo = leaf_of.copy()
    K.apply_move(move, node, k, c, nrows, *new.arrays(), lo, data.X, sc.rows, sc.newleaf,
                 sc.slots)
    return Proposal(new, lo, name, True, float(lq), float(lrule + ldepth), float(ldepth),
                    int(node))


def dirichlet_multinomial_loglik(counts, omega):
    """log p(counts | omega) with s ~ Dirichlet(omega/p, ...) integrated out."""
    counts = np.asarray(counts, dtype=float)
    p = counts.size
    a = omega / p
    return (gammaln(omega) - gammaln(omega + counts.sum())
            + np.sum(gammaln(a + counts) - gammaln(a)))


def update_split_probabilities(counts, probs, rng):
    """Gibbs/slice update of the sparsity parameters given split counts.

    omega is moved with a slice sampler on xi = omega / (omega + rho) under
    its Beta(a_omega, b_omega) prior and the Dirichlet-multinomial marginal
    of ``counts``; then s is drawn from Dirichlet(omega/p + counts). Without
    the sparsity prior ``s`` stays uniform.

    Returns
    -------
    s, omega
    """
    if not probs.sparse:
        return probs.s, probs.omega
    counts = np.asarray(counts, dtype=float)
    rho = probs.rho

    def logpost(xi):
        if not 0.0 < xi < 1.0:
            return -math.inf
        omega = rho * xi / (1.0 - xi)
        return ((probs.a_omega - 1) * math.log(xi) + (probs.b_omega - 1) * math.log1p(-xi)
                + dirichlet_multinomial_loglik(counts, omega))

    xi0 = probs.omega / (probs.omega + rho)
    xi = slice_sample(xi0, logpost, rng, width=0.25, lower=0.0, upper=1.0)
    omega = rho * xi / (1.0 - xi)
    s = _dirichlet(omega / probs.p + counts, rng)
    probs.s, probs.omega = s, omega
    return s, omega


def _dirichlet(alpha, rng):
    # log-space gamma draws: small shapes underflow plain gamma variates
    g = rng.gamma(alpha + 1.0)
    logg = np.log(g) + np.log(rng.random(alpha.size)) / alpha
    logg -= logg.max()
    s = np.exp(logg)
    s = np.maximum(s / s.sum(), 1e-300)
    return s / s.sum()


class TreeEnsemble:
    """``m`` trees sharing stacked node arrays, plus the training-row routing.

    Parameters
    ----------
    m : int
        Number of trees.
    n : int
        Number of training rows.
    init_value : float
        Leaf value of the initial stumps.
    capacity : int
        Node capacity per tree.
    """

    def __init__(self, m, n, init_value=0.0, capacity=DEFAULT_CAPACITY):
        if m < 1:
            raise ValueError("m must be >= 1")
        self.var = np.full((m, capacity), K.UNUSED, np.int64)
        self.var[:, 0] = K.LEAF
        self.cut = np.zeros((m, capacity))
        self.left = np.full((m, capacity), -1, np.int64)
        self.right = np.full((m, capacity), -1, np.int64)
        self.parent = np.full((m, capacity), -1, np.int64)
        self.depth = np.zeros((m, capacity), np.int64)
        self.value = np.zeros((m, capacity))
        self.value[:, 0] = init_value
        self.leaf_of = np.zeros((m, n), np.int64)

    @property
    def m(self):
        return self.var.shape[0]

    @property
    def capacity(self):
        return self.var.shape[1]

    def arrays(self):
        return (self.var, self.cut, self.left, self.right, self.parent, self.depth, self.value)

    def tree(self, h):
        """A :class:`DecisionTree` viewing tree ``h`` (shares memory)."""
        return DecisionTree(*(a[h] for a in self.arrays()))

    def set_tree(self, h, tree, X):
        for dst, src in zip(self.arrays(), tree.arrays()):
            dst[h] = src
        self.leaf_of[h] = partition_assign(self.tree(h), X)

    def split_counts(self, p):
        out = np.zeros(p, np.int64)
        K.split_counts(self.var, p, out)
        return out

    def leaf_values(self):
        return self.value[self.var == K.LEAF]

    def snapshot(self):
        """Preorder node lists for every tree."""
        return [self.tree(h).to_preorder() for h in range(self.m)]

    @classmethod
    def from_snapshot(cls, trees, capacity=None):
        cap = capacity or max(DEFAULT_CAPACITY, max(len(t) for t in trees))
        ens = cls(len(trees), 0, capacity=cap)
        for h, nodes in enumerate(trees):
            t = DecisionTree.from_preorder(nodes, cap)
            for dst, src in zip(ens.arrays(), t.arrays()):
                dst[h] = src
        return ens

    def predict_sum(self, X):
        X = np.ascontiguousarray(X, dtype=float)
        out = np.empty(X.shape[0])
        K.predict_sum(self.var, self.cut, self.left, self.right, self.value, X, out)
        return out

    def predict_log_product(self, X):
        X = np.ascontiguousarray(X, dtype=float)
        out = np.empty(X.shape[0])
        K.predict_log_product(self.var, self.cut, self.left, self.right, self.value, X, out)
        return out
