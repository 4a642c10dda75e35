"""Random designs, trees and proposals shared by the tree, sampler and acceptance tests."""

import numpy as np

from sumtrees.priors import Hyperparameters
from sumtrees.sampler import change_ratios, grow_ratios, prune_ratios
from sumtrees.tree import Tree


def random_design(rng, n=12, p=3, levels=4, missing=0.0):
    """Small-integer predictors (plenty of ties) with optional NaN cells."""
    x = rng.integers(0, levels, size=(n, p)).astype(float)
    if missing > 0:
        x[rng.random((n, p)) < missing] = np.nan
    return x


def random_edit(tree: Tree, rng) -> str | None:
    """Apply one random feasible GROW/PRUNE/CHANGE; returns its kind or None."""
    kind = rng.choice(["grow", "prune", "change"], p=[0.45, 0.25, 0.3])
    if kind == "grow":
        leaves = [s for s in tree.leaves() if tree.available_predictors(s)]
        if not leaves:
            return None
        s = leaves[rng.integers(len(leaves))]
        feats = list(tree.available_predictors(s))
        j = feats[rng.integers(len(feats))]
        rules = tree.candidate_rules(s, j)
        tree.grow_at(s, rules[rng.integers(len(rules))])
        return "grow"
    sing = tree.singly_internal()
    if not sing:
        return None
    s = sing[rng.integers(len(sing))]
    if kind == "prune":
        tree.prune_at(s)
        return "prune"
    feats = list(tree.available_predictors(s))
    j = feats[rng.integers(len(feats))]
    rules = tree.candidate_rules(s, j)
    tree.change_at(s, rules[rng.integers(len(rules))])
    return "change"


def random_tree(rng, x, edits=8, memcache=True, weights=None) -> Tree:
    tree = Tree(x, weights=weights, memcache=memcache)
    for _ in range(edits):
        random_edit(tree, rng)
    return tree


def brute_force_candidates(values):
    """All (type, value) rules giving two nonempty children, by direct routing."""
    vals = np.asarray(values, dtype=float)
    miss = np.isnan(vals)
    uniq = np.unique(vals[~miss])
    out = []
    types = (1, 2) if miss.any() else (1,)
    for t in types:
        for c in uniq:
            if t == 1:
                left = miss | (vals <= c)
            else:
                left = ~miss & (vals <= c)
            if left.any() and not left.all():
                out.append((t, float(c)))
    if miss.any() and not miss.all():
        out.append((3, None))
    return sorted(out, key=lambda r: (r[0], -np.inf if r[1] is None else r[1]))


def random_proposal(rng, tree):
    """A random feasible (kind, node, rule) on ``tree``; rule is None for PRUNE."""
    sing = tree.singly_internal()
    kinds = ["GROW"] + (["PRUNE", "CHANGE"] if sing else [])
    growable = [s for s in tree.leaves() if tree.available_predictors(s)]
    if not growable:
        kinds.remove("GROW")
    if not kinds:
        return None
    kind = kinds[rng.integers(len(kinds))]
    if kind == "PRUNE":
        return kind, sing[rng.integers(len(sing))], None
    pool = growable if kind == "GROW" else sing
    s = pool[rng.integers(len(pool))]
    feats = list(tree.available_predictors(s))
    j = feats[rng.integers(len(feats))]
    rules = tree.candidate_rules(s, j)
    return kind, s, rules[rng.integers(len(rules))]


def random_case(seed):
    """A random small tree with residuals, variances and a perturbed depth prior."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(6, 20))
    p = int(rng.integers(1, 4))
    x = random_design(rng, n=n, p=p, levels=int(rng.integers(2, 6)), missing=float(rng.uniform(0, 0.25)))
    w = rng.uniform(0.3, 3.0, size=p)
    tree = random_tree(rng, x, edits=int(rng.integers(0, 10)), weights=w)
    resid = rng.normal(rng.normal(0, 1), rng.uniform(0.5, 3), size=n)
    params = dict(sigma_sq=float(rng.uniform(0.3, 2.0)), sigma_mu_sq=float(rng.uniform(0.05, 1.0)),
                  prior_mean=float(rng.normal(0, 0.3)))
    hyper = Hyperparameters(alpha=float(rng.uniform(0.5, 0.99)), beta=float(rng.uniform(0, 3)))
    return rng, x, w, tree, resid, params, hyper


def proposal_case(seed):
    """Like :func:`random_case` plus a feasible proposal; reseeds until one exists."""
    k = 0
    while True:
        rng, x, w, tree, resid, params, hyper = random_case(seed + 1000 * k)
        prop = random_proposal(rng, tree)
        if prop is not None:
            return x, w, tree, resid, params, hyper, prop
        k += 1


def evaluate(kind, tree, node, rule, resid, params, hyper):
    """The implementation's ratio evaluation for one proposal."""
    args = (resid, params["sigma_sq"], params["sigma_mu_sq"], hyper, params["prior_mean"])
    if kind == "GROW":
        return grow_ratios(tree, node, rule, *args)
    if kind == "PRUNE":
        return prune_ratios(tree, node, *args)
    return change_ratios(tree, node, rule, *args)
