"""Array-backed binary trees with missing-aware split rules.

Every tree of a chain lives in a slice ``[t, :]`` of the arrays in a
:class:`Forest`. Slot 0 is always the root. Each node owns a contiguous
segment ``order[t, start:end]`` of training row indices; growing a node
partitions its segment in place, so children segments stay contiguous and
pruning needs no data movement.

Training-time routing works on per-feature dense ranks (``-1`` = missing),
so a split value is stored as a rank threshold. Rule types:

1. missing goes left, present goes left iff value <= split
2. missing goes right, present goes left iff value <= split
3. missing goes left, present goes right
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from numba import njit

Forest = namedtuple(
    "Forest",
    [
        "feat", "split", "mia", "left", "right", "parent", "depth", "val",
        "start", "end", "used", "free", "nfree", "order",
        "cache_ok", "cache_avail", "cache_wsum", "cache_nadj",
    ],
)
Design = namedtuple("Design", ["ranks", "uvals", "uoff", "weights"])
Scratch = namedtuple("Scratch", ["mark", "buf", "tmp", "leaves", "sing", "stack", "mask"])

LEAF = -1
NO_NODE = -1


# ---------------------------------------------------------------------------
# construction helpers (python side)


def make_design(matrix: np.ndarray, weights: np.ndarray | None = None) -> Design:
    """Rank-encode a design matrix; NaN cells get rank -1."""
    matrix = np.asarray(matrix, dtype=float)
    n, p = matrix.shape
    ranks = np.full((p, n), -1, dtype=np.int32)
    uvals_list = []
    uoff = np.zeros(p + 1, dtype=np.int64)
    for j in range(p):
        col = matrix[:, j]
        present = ~np.isnan(col)
        uniq = np.unique(col[present])
        ranks[j, present] = np.searchsorted(uniq, col[present]).astype(np.int32)
        uvals_list.append(uniq)
        uoff[j + 1] = uoff[j] + len(uniq)
    uvals = np.concatenate(uvals_list) if uvals_list else np.zeros(0)
    if weights is None:
        weights = np.ones(p)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (p,) or (weights <= 0).any():
        raise ValueError("covariate weights must be p positive numbers")
    return Design(ranks, uvals.astype(float), uoff, weights)


def make_forest(m: int, n: int, p: int, cap: int = 32) -> Forest:
    cap = max(cap, 4)
    f = Forest(
        feat=np.full((m, cap), LEAF, np.int32),
        split=np.full((m, cap), -1, np.int32),
        mia=np.zeros((m, cap), np.int8),
        left=np.full((m, cap), NO_NODE, np.int32),
        right=np.full((m, cap), NO_NODE, np.int32),
        parent=np.full((m, cap), NO_NODE, np.int32),
        depth=np.zeros((m, cap), np.int32),
        val=np.zeros((m, cap)),
        start=np.zeros((m, cap), np.int32),
        end=np.zeros((m, cap), np.int32),
        used=np.zeros((m, cap), np.int8),
        free=np.zeros((m, cap), np.int32),
        nfree=np.zeros(m, np.int32),
        order=np.zeros((m, n), np.int32),
        cache_ok=np.zeros((m, cap), np.int8),
        cache_avail=np.zeros((m, cap, p), np.int8),
        cache_wsum=np.zeros((m, cap)),
        cache_nadj=np.full((m, cap, p), -1, np.int32),
    )
    for t in range(m):
        reset_tree(f, t, n)
    return f


def make_scratch(design: Design, cap: int) -> Scratch:
    p, n = design.ranks.shape
    umax = int(np.max(np.diff(design.uoff))) if p else 0
    return Scratch(
        mark=np.zeros(max(umax, 1), np.int8),
        buf=np.zeros(max(n, umax, 1), np.int32),
        tmp=np.zeros(max(n, 1), np.int32),
        leaves=np.zeros(cap, np.int32),
        sing=np.zeros(cap, np.int32),
        stack=np.zeros(cap, np.int32),
        mask=np.zeros(max(p, 1), np.int8),
    )


def grow_capacity(forest: Forest) -> Forest:
    """Return a copy of ``forest`` with twice the node capacity per tree."""
    m, cap = forest.feat.shape
    new_cap = 2 * cap
    p = forest.cache_avail.shape[2]
    fills = {
        "feat": LEAF, "split": -1, "mia": 0, "left": NO_NODE, "right": NO_NODE,
        "parent": NO_NODE, "depth": 0, "val": 0.0, "start": 0, "end": 0, "used": 0,
        "cache_ok": 0, "cache_wsum": 0.0,
    }
    out = {}
    for name, fill in fills.items():
        old = getattr(forest, name)
        arr = np.full((m, new_cap), fill, dtype=old.dtype)
        arr[:, :cap] = old
        out[name] = arr
    avail = np.zeros((m, new_cap, p), np.int8)
    avail[:, :cap] = forest.cache_avail
    nadj = np.full((m, new_cap, p), -1, np.int32)
    nadj[:, :cap] = forest.cache_nadj
    free = np.zeros((m, new_cap), np.int32)
    nfree = forest.nfree.copy()
    for t in range(m):
        k = int(nfree[t])
        # new slots sit below the existing stack so pops keep their old order
        fresh = np.arange(new_cap - 1, cap - 1, -1, dtype=np.int32)
        free[t, : len(fresh)] = fresh
        free[t, len(fresh): len(fresh) + k] = forest.free[t, :k]
        nfree[t] = len(fresh) + k
    return Forest(
        order=forest.order, free=free, nfree=nfree, cache_avail=avail, cache_nadj=nadj, **out
    )


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def reset_tree(f, t, n):
    cap = f.feat.shape[1]
    for s in range(cap):
        f.used[t, s] = 0
        f.feat[t, s] = LEAF
        f.left[t, s] = NO_NODE
        f.right[t, s] = NO_NODE
        f.cache_ok[t, s] = 0
    for k in range(cap - 1):
        f.free[t, k] = cap - 1 - k
    f.nfree[t] = cap - 1
    f.used[t, 0] = 1
    f.parent[t, 0] = NO_NODE
    f.depth[t, 0] = 0
    f.val[t, 0] = 0.0
    f.start[t, 0] = 0
    f.end[t, 0] = n
    for i in range(n):
        f.order[t, i] = i


@njit(cache=True)
def goes_left(rank, c, mia):
    if rank < 0:
        return mia != 2
    if mia == 3:
        return False
    return rank <= c


@njit(cache=True)
def goes_left_value(x, split_value, mia):
    if np.isnan(x):
        return mia != 2
    if mia == 3:
        return False
    return x <= split_value


@njit(cache=True)
def _alloc(f, t):
    k = f.nfree[t] - 1
    s = f.free[t, k]
    f.nfree[t] = k
    f.used[t, s] = 1
    f.cache_ok[t, s] = 0
    return s


@njit(cache=True)
def _release(f, t, s):
    f.used[t, s] = 0
    f.feat[t, s] = LEAF
    f.left[t, s] = NO_NODE
    f.right[t, s] = NO_NODE
    f.cache_ok[t, s] = 0
    f.free[t, f.nfree[t]] = s
    f.nfree[t] += 1


@njit(cache=True)
def collect_nodes(f, t, leaves, sing, stack):
    """Preorder walk; fills terminal and singly-internal node lists.

    Returns (number of leaves, number of singly-internal nodes, max depth).
    """
    nl = 0
    ns = 0
    top = 0
    maxd = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        s = stack[top]
        if f.depth[t, s] > maxd:
            maxd = f.depth[t, s]
        if f.feat[t, s] == LEAF:
            leaves[nl] = s
            nl += 1
        else:
            lft = f.left[t, s]
            rgt = f.right[t, s]
            if f.feat[t, lft] == LEAF and f.feat[t, rgt] == LEAF:
                sing[ns] = s
                ns += 1
            stack[top] = rgt
            top += 1
            stack[top] = lft
            top += 1
    return nl, ns, maxd


@njit(cache=True)
def feature_available(ranks, order_t, start, end, j):
    """True iff the node's rows show >= 2 distinct values of j (missing counts as one)."""
    first = -2
    hm = False
    for k in range(start, end):
        r = ranks[j, order_t[k]]
        if r < 0:
            hm = True
            if first >= 0:
                return True
        elif first == -2:
            first = r
            if hm:
                return True
        elif r != first:
            return True
    return False


@njit(cache=True)
def node_availability(f, d, t, s, memcache, mask):
    """Fill ``mask`` with available features at node s; return (count, weight sum)."""
    p = d.ranks.shape[0]
    if memcache and f.cache_ok[t, s] == 1:
        cnt = 0
        for j in range(p):
            mask[j] = f.cache_avail[t, s, j]
            cnt += mask[j]
        return cnt, f.cache_wsum[t, s]
    cnt = 0
    w = 0.0
    st = f.start[t, s]
    en = f.end[t, s]
    order_t = f.order[t]
    for j in range(p):
        if feature_available(d.ranks, order_t, st, en, j):
            mask[j] = 1
            cnt += 1
            w += d.weights[j]
        else:
            mask[j] = 0
    if memcache:
        for j in range(p):
            f.cache_avail[t, s, j] = mask[j]
            f.cache_nadj[t, s, j] = -1
        f.cache_wsum[t, s] = w
        f.cache_ok[t, s] = 1
    return cnt, w


@njit(cache=True)
def unique_ranks(ranks, uoff, order_t, start, end, j, mark, buf):
    """Sorted distinct present ranks of feature j among the node rows, into buf.

    Returns (number of distinct present values, whether any row is missing).
    """
    nn = end - start
    big_u = uoff[j + 1] - uoff[j]
    hm = False
    if nn * 8 < big_u:
        cnt = 0
        for k in range(start, end):
            r = ranks[j, order_t[k]]
            if r < 0:
                hm = True
            else:
                buf[cnt] = r
                cnt += 1
        if cnt == 0:
            return 0, hm
        buf[:cnt].sort()
        u = 1
        for q in range(1, cnt):
            if buf[q] != buf[u - 1]:
                buf[u] = buf[q]
                u += 1
        return u, hm
    for k in range(start, end):
        r = ranks[j, order_t[k]]
        if r < 0:
            hm = True
        else:
            mark[r] = 1
    u = 0
    for r in range(big_u):
        if mark[r] == 1:
            buf[u] = r
            u += 1
            mark[r] = 0
    return u, hm


@njit(cache=True)
def candidate_count(u, hm):
    if u == 0:
        return 0
    if hm:
        return 2 * u
    return u - 1


@njit(cache=True)
def candidate_at(k, u, hm, buf):
    """The k-th candidate rule for a feature: returns (rank threshold, rule type)."""
    if k < u - 1:
        return buf[k], 1
    if k < 2 * u - 1:
        return buf[k - (u - 1)], 2
    return -1, 3


@njit(cache=True)
def node_nadj(f, d, t, s, j, memcache, mark, buf):
    """Number of candidate rules for feature j at node s (memcached when enabled)."""
    if memcache and f.cache_ok[t, s] == 1 and f.cache_nadj[t, s, j] >= 0:
        return f.cache_nadj[t, s, j]
    u, hm = unique_ranks(d.ranks, d.uoff, f.order[t], f.start[t, s], f.end[t, s], j, mark, buf)
    c = candidate_count(u, hm)
    if memcache and f.cache_ok[t, s] == 1:
        f.cache_nadj[t, s, j] = c
    return c


@njit(cache=True)
def rule_index(u, hm, buf, c, mia):
    """Inverse of candidate_at; -1 if the rule is not a candidate."""
    if mia == 3:
        return 2 * u - 1 if hm and u > 0 else -1
    pos = -1
    for q in range(u):
        if buf[q] == c:
            pos = q
            break
    if pos < 0:
        return -1
    if mia == 1:
        return pos if pos < u - 1 else -1
    if not hm:
        return -1
    return u - 1 + pos


@njit(cache=True)
def split_sums(ranks, order_t, start, end, j, c, mia, resid):
    """Row counts and residual sums of the two children a rule would create."""
    nl = 0
    nr = 0
    sl = 0.0
    sr = 0.0
    for k in range(start, end):
        i = order_t[k]
        if goes_left(ranks[j, i], c, mia):
            nl += 1
            sl += resid[i]
        else:
            nr += 1
            sr += resid[i]
    return nl, sl, nr, sr


@njit(cache=True)
def segment_sum(order_t, start, end, resid):
    s = 0.0
    for k in range(start, end):
        s += resid[order_t[k]]
    return s


@njit(cache=True)
def _partition(f, ranks, t, s, j, c, mia, tmp):
    st = f.start[t, s]
    en = f.end[t, s]
    nl = 0
    nr = 0
    for k in range(st, en):
        i = f.order[t, k]
        if goes_left(ranks[j, i], c, mia):
            f.order[t, st + nl] = i
            nl += 1
        else:
            tmp[nr] = i
            nr += 1
    for q in range(nr):
        f.order[t, st + nl + q] = tmp[q]
    return st + nl


@njit(cache=True)
def grow_node(f, ranks, t, s, j, c, mia, tmp):
    lft = _alloc(f, t)
    rgt = _alloc(f, t)
    f.feat[t, s] = j
    f.split[t, s] = c
    f.mia[t, s] = mia
    f.left[t, s] = lft
    f.right[t, s] = rgt
    mid = _partition(f, ranks, t, s, j, c, mia, tmp)
    for ch in (lft, rgt):
        f.feat[t, ch] = LEAF
        f.left[t, ch] = NO_NODE
        f.right[t, ch] = NO_NODE
        f.parent[t, ch] = s
        f.depth[t, ch] = f.depth[t, s] + 1
        f.val[t, ch] = 0.0
    f.start[t, lft] = f.start[t, s]
    f.end[t, lft] = mid
    f.start[t, rgt] = mid
    f.end[t, rgt] = f.end[t, s]


@njit(cache=True)
def prune_node(f, t, s):
    _release(f, t, f.left[t, s])
    _release(f, t, f.right[t, s])
    f.feat[t, s] = LEAF
    f.left[t, s] = NO_NODE
    f.right[t, s] = NO_NODE


@njit(cache=True)
def change_node(f, ranks, t, s, j, c, mia, tmp):
    f.feat[t, s] = j
    f.split[t, s] = c
    f.mia[t, s] = mia
    mid = _partition(f, ranks, t, s, j, c, mia, tmp)
    lft = f.left[t, s]
    rgt = f.right[t, s]
    f.end[t, lft] = mid
    f.start[t, rgt] = mid
    f.cache_ok[t, lft] = 0
    f.cache_ok[t, rgt] = 0


@njit(cache=True)
def route_rank(f, ranks, t, i):
    s = 0
    while f.feat[t, s] != LEAF:
        if goes_left(ranks[f.feat[t, s], i], f.split[t, s], f.mia[t, s]):
            s = f.left[t, s]
        else:
            s = f.right[t, s]
    return s


# ---------------------------------------------------------------------------
# python view of a single tree


@dataclass(frozen=True)
class SplitRule:
    """A split on ``feature``; ``value`` is the raw threshold (None for type 3)."""

    feature: int
    value: float | None
    mia_type: int = 1

    def __post_init__(self) -> None:
        if self.mia_type not in (1, 2, 3):
            raise ValueError("rule type must be 1, 2 or 3")
        if (self.mia_type == 3) != (self.value is None):
            raise ValueError("type-3 rules carry no value; types 1 and 2 require one")

    def sends_left(self, x: float) -> bool:
        return bool(goes_left_value(float("nan") if x is None else float(x),
                                    np.nan if self.value is None else self.value, self.mia_type))


@dataclass(frozen=True)
class TreeStats:
    b: int
    w2: int
    n_internal: int
    max_depth: int


@dataclass(frozen=True)
class NodeSufficientStats:
    n: int
    sum_r: float
    sum_r_sq: float


class TreeError(ValueError):
    pass


class Tree:
    """One tree over a fixed training design, with in-place structural edits.

    Node handles are integer slots; slot 0 is the root.
    """

    def __init__(self, matrix: np.ndarray, weights: np.ndarray | None = None,
                 memcache: bool = True, column_names: list[str] | None = None):
        self.matrix = np.asarray(matrix, dtype=float)
        self.design = make_design(self.matrix, weights)
        self.n, self.p = self.matrix.shape
        self.memcache = memcache
        self.forest = make_forest(1, self.n, self.p)
        self.scratch = make_scratch(self.design, self.forest.feat.shape[1])
        self.column_names = column_names or [f"x{j + 1}" for j in range(self.p)]

    def copy(self) -> "Tree":
        out = object.__new__(Tree)
        out.__dict__.update(self.__dict__)
        out.forest = Forest(*(a.copy() for a in self.forest))
        out.scratch = make_scratch(self.design, self.forest.feat.shape[1])
        return out

    # -- structure queries
    def is_leaf(self, node: int) -> bool:
        self._check(node)
        return int(self.forest.feat[0, node]) == LEAF

    def children(self, node: int) -> tuple[int, int]:
        return int(self.forest.left[0, node]), int(self.forest.right[0, node])

    def depth(self, node: int) -> int:
        return int(self.forest.depth[0, node])

    def rows(self, node: int) -> np.ndarray:
        f = self.forest
        return f.order[0, f.start[0, node]: f.end[0, node]].copy()

    def nodes(self) -> list[int]:
        out, stack = [], [0]
        while stack:
            s = stack.pop()
            out.append(s)
            if not self.is_leaf(s):
                lft, rgt = self.children(s)
                stack.extend([rgt, lft])
        return out

    def leaves(self) -> list[int]:
        return [s for s in self.nodes() if self.is_leaf(s)]

    def singly_internal(self) -> list[int]:
        return [s for s in self.nodes() if not self.is_leaf(s)
                and all(self.is_leaf(c) for c in self.children(s))]

    def rule(self, node: int) -> SplitRule | None:
        f = self.forest
        j = int(f.feat[0, node])
        if j == LEAF:
            return None
        mia = int(f.mia[0, node])
        value = None if mia == 3 else float(self._value_of(j, int(f.split[0, node])))
        return SplitRule(j, value, mia)

    def stats(self) -> TreeStats:
        sc = self.scratch
        b, w2, maxd = collect_nodes(self.forest, 0, sc.leaves, sc.sing, sc.stack)
        return TreeStats(int(b), int(w2), len(self.nodes()) - int(b), int(maxd))

    def leaf_value(self, node: int) -> float:
        return float(self.forest.val[0, node])

    def set_leaf_value(self, node: int, value: float) -> None:
        if not self.is_leaf(node):
            raise TreeError("only terminal nodes carry values")
        self.forest.val[0, node] = value

    # -- availability
    def available_predictors(self, node: int) -> dict[int, float]:
        """Feature -> normalized selection probability at this node."""
        self._check(node)
        mask = self.scratch.mask
        cnt, w = node_availability(self.forest, self.design, 0, node, self.memcache, mask)
        return {j: float(self.design.weights[j] / w) for j in range(self.p) if mask[j]}

    def candidate_rules(self, node: int, feature: int) -> list[SplitRule]:
        """All rules for ``feature`` at ``node`` in canonical order."""
        self._check(node)
        u, hm = self._uniques(node, feature)
        buf = self.scratch.buf
        out = []
        for k in range(candidate_count(u, hm)):
            c, mia = candidate_at(k, u, hm, buf)
            out.append(SplitRule(feature, None if mia == 3 else float(self._value_of(feature, int(c))), int(mia)))
        return out

    def available_values(self, node: int, feature: int) -> list[SplitRule]:
        if feature not in self.available_predictors(node):
            raise TreeError(f"feature {feature} is not available at node {node}")
        return self.candidate_rules(node, feature)

    def n_adj(self, node: int, feature: int) -> int:
        sc = self.scratch
        return int(node_nadj(self.forest, self.design, 0, node, feature, self.memcache, sc.mark, sc.buf))

    # -- edits
    def grow_at(self, node: int, rule: SplitRule) -> tuple[int, int]:
        if not self.is_leaf(node):
            raise TreeError("can only grow a terminal node")
        c, mia = self._encode(node, rule)
        self._ensure_capacity()
        grow_node(self.forest, self.design.ranks, 0, node, rule.feature, c, mia, self.scratch.tmp)
        return self.children(node)

    def prune_at(self, node: int) -> None:
        if node not in self.singly_internal():
            raise TreeError("can only prune a singly-internal node")
        prune_node(self.forest, 0, node)

    def change_at(self, node: int, rule: SplitRule) -> None:
        if node not in self.singly_internal():
            raise TreeError("can only change a singly-internal node")
        c, mia = self._encode(node, rule)
        change_node(self.forest, self.design.ranks, 0, node, rule.feature, c, mia, self.scratch.tmp)

    # -- data
    def route(self, x: np.ndarray) -> int:
        """Terminal node reached by a raw predictor row (NaN = missing)."""
        x = np.asarray(x, dtype=float)
        s = 0
        while not self.is_leaf(s):
            rule = self.rule(s)
            lft, rgt = self.children(s)
            s = lft if rule.sends_left(x[rule.feature]) else rgt
        return s

    def sufficient_stats(self, node: int, resid: np.ndarray) -> NodeSufficientStats:
        r = np.asarray(resid, dtype=float)[self.rows(node)]
        return NodeSufficientStats(len(r), float(r.sum()), float((r * r).sum()))

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.array([self.leaf_value(self.route(row)) for row in x])

    def dump(self) -> str:
        """Indented text rendering: rule or leaf value with row count."""
        lines = []

        def walk(s: int, indent: int) -> None:
            pad = "  " * indent
            n = int(self.forest.end[0, s] - self.forest.start[0, s])
            if self.is_leaf(s):
                lines.append(f"{pad}leaf n={n} mu={self.leaf_value(s):.6g}")
                return
            r = self.rule(s)
            name = self.column_names[r.feature]
            if r.mia_type == 3:
                text = f"{name} is missing"
            else:
                miss = "or missing" if r.mia_type == 1 else "and present"
                text = f"{name} <= {r.value:.6g} ({miss})"
            lines.append(f"{pad}[{text}] n={n}")
            lft, rgt = self.children(s)
            walk(lft, indent + 1)
            walk(rgt, indent + 1)

        walk(0, 0)
        return "\n".join(lines)

    # -- internals
    def _check(self, node: int) -> None:
        if not (0 <= node < self.forest.used.shape[1]) or not self.forest.used[0, node]:
            raise TreeError(f"no node {node}")

    def _value_of(self, j: int, c: int) -> float:
        return self.design.uvals[self.design.uoff[j] + c]

    def _uniques(self, node: int, j: int) -> tuple[int, bool]:
        f, sc = self.forest, self.scratch
        u, hm = unique_ranks(self.design.ranks, self.design.uoff, f.order[0],
                             f.start[0, node], f.end[0, node], j, sc.mark, sc.buf)
        return int(u), bool(hm)

    def _encode(self, node: int, rule: SplitRule) -> tuple[int, int]:
        j = rule.feature
        if not 0 <= j < self.p:
            raise TreeError("feature out of range")
        lo, hi = self.design.uoff[j], self.design.uoff[j + 1]
        if rule.mia_type == 3:
            c = -1
        else:
            c = int(np.searchsorted(self.design.uvals[lo:hi], rule.value))
            if c >= hi - lo or self.design.uvals[lo + c] != rule.value:
                raise TreeError("split value is not an observed value of the feature")
        u, hm = self._uniques(node, j)
        if rule_index(u, hm, self.scratch.buf, c, rule.mia_type) < 0:
            raise TreeError("rule is not a feasible candidate at this node")
        return c, rule.mia_type

    def _ensure_capacity(self) -> None:
        if self.forest.nfree[0] < 2:
            self.forest = grow_capacity(self.forest)
            self.scratch = make_scratch(self.design, self.forest.feat.shape[1])
