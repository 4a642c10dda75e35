import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sumtrees.tree import SplitRule, Tree, TreeError
from treegen import brute_force_candidates, random_design, random_edit, random_tree


def column_tree(values, **kw):
    return Tree(np.asarray(values, dtype=float).reshape(-1, 1), **kw)


# routing rules for present and missing values
@pytest.mark.parametrize("rule,x,left", [
    (SplitRule(0, 7.0, 1), np.nan, True),
    (SplitRule(0, 7.0, 1), 7.0, True),
    (SplitRule(0, 7.0, 1), 8.0, False),
    (SplitRule(0, 7.0, 2), 5.0, True),
    (SplitRule(0, 7.0, 2), np.nan, False),
    (SplitRule(0, None, 3), 5.0, False),
    (SplitRule(0, None, 3), np.nan, True),
])
def test_rule_routing(rule, x, left):
    assert rule.sends_left(x) is left


def test_rule_validation():
    with pytest.raises(ValueError):
        SplitRule(0, 1.0, 3)
    with pytest.raises(ValueError):
        SplitRule(0, None, 1)


def test_constant_node_has_no_predictors():
    tree = Tree(np.ones((5, 3)))
    assert tree.available_predictors(0) == {}


def test_renormalized_uniform_weights():
    x = np.column_stack([np.arange(4.0), np.ones(4), np.arange(4.0) % 2])
    assert Tree(x).available_predictors(0) == {0: 0.5, 2: 0.5}


def test_weighted_selection_probabilities():
    x = np.column_stack([np.arange(4.0), np.arange(4.0)])
    probs = Tree(x, weights=np.array([5.0, 1.0])).available_predictors(0)
    assert probs[0] == pytest.approx(5 / 6) and probs[1] == pytest.approx(1 / 6)


def test_candidates_exclude_maximum():
    tree = column_tree([3, 1, 2, 2])
    assert [r.value for r in tree.available_values(0, 0)] == [1.0, 2.0]
    assert tree.n_adj(0, 0) == 2


def test_single_value_is_structural_zero():
    tree = column_tree([4, 4, 4])
    with pytest.raises(TreeError):
        tree.available_values(0, 0)


def test_mia_candidate_count():
    tree = column_tree([1, 2, 3, np.nan])
    rules = tree.candidate_rules(0, 0)
    # u = 3 observed values: 2 type-1, 3 type-2, 1 type-3
    assert len(rules) == 6 == tree.n_adj(0, 0)
    assert sorted(r.mia_type for r in rules) == [1, 1, 2, 2, 2, 3]


def test_only_missing_and_one_value():
    tree = column_tree([5, 5, np.nan])
    kinds = sorted((r.mia_type, r.value) for r in tree.candidate_rules(0, 0))
    assert kinds == [(2, 5.0), (3, None)]


@given(st.lists(st.one_of(st.integers(0, 5).map(float), st.just(float("nan"))), min_size=1, max_size=15))
@settings(max_examples=150, deadline=None)
def test_candidates_match_brute_force(values):
    tree = column_tree(values)
    expected = brute_force_candidates(values)
    if not expected:
        assert tree.available_predictors(0) == {}
        return
    got = sorted(((r.mia_type, r.value) for r in tree.candidate_rules(0, 0)),
                 key=lambda r: (r[0], -np.inf if r[1] is None else r[1]))
    assert got == expected
    assert tree.n_adj(0, 0) == len(expected)


def test_grow_prune_counts():
    tree = column_tree([1, 2, 3])
    assert (tree.stats().b, tree.stats().w2) == (1, 0)
    tree.grow_at(0, SplitRule(0, 2.0))
    assert (tree.stats().b, tree.stats().w2) == (2, 1)
    tree.prune_at(0)
    assert (tree.stats().b, tree.stats().w2) == (1, 0)
    assert tree.rows(0).tolist() == [0, 1, 2]


def test_change_keeps_structure():
    x = np.column_stack([np.arange(6.0), np.arange(6.0)[::-1]])
    tree = Tree(x)
    lft, _ = tree.grow_at(0, SplitRule(0, 2.0))
    tree.grow_at(lft, SplitRule(1, 4.0))
    before = tree.stats()
    tree.change_at(lft, SplitRule(0, 0.0))
    assert tree.stats() == before
    assert tree.rule(lft) == SplitRule(0, 0.0)


def test_invalid_edits_rejected():
    tree = column_tree([1, 2, 3])
    with pytest.raises(TreeError):
        tree.prune_at(0)
    with pytest.raises(TreeError):
        tree.grow_at(0, SplitRule(0, 2.5))
    tree.grow_at(0, SplitRule(0, 1.0))
    with pytest.raises(TreeError):
        tree.grow_at(0, SplitRule(0, 1.0))


def test_dump_golden():
    tree = Tree(np.array([[1.0, 0], [2, 1], [3, 0], [np.nan, 1]]), column_names=["age", "flag"])
    lft, rgt = tree.grow_at(0, SplitRule(0, 2.0, 2))
    tree.set_leaf_value(lft, 0.5)
    tree.grow_at(rgt, SplitRule(0, None, 3))
    assert tree.dump() == (
        "[age <= 2 (and present)] n=4\n"
        "  leaf n=2 mu=0.5\n"
        "  [age is missing] n=2\n"
        "    leaf n=1 mu=0\n"
        "    leaf n=1 mu=0"
    )


def brute_w2(tree):
    return sum(1 for s in tree.nodes() if not tree.is_leaf(s) and all(tree.is_leaf(c) for c in tree.children(s)))


@given(st.integers(0, 2**32 - 1), st.floats(0, 0.3))
@settings(max_examples=60, deadline=None)
def test_structural_invariants(seed, missing):
    rng = np.random.default_rng(seed)
    x = random_design(rng, n=int(rng.integers(2, 25)), p=int(rng.integers(1, 4)), missing=missing)
    tree = random_tree(rng, x, edits=int(rng.integers(0, 20)))
    leaves = tree.leaves()
    rows = np.concatenate([tree.rows(s) for s in leaves])
    assert sorted(rows.tolist()) == list(range(len(x)))
    for s in leaves:
        for i in tree.rows(s):
            assert tree.route(x[i]) == s
    for s in tree.nodes():
        assert all(len(tree.rows(c)) > 0 for c in ([] if tree.is_leaf(s) else tree.children(s)))
        if s != 0:
            par = int(tree.forest.parent[0, s])
            assert tree.depth(s) == tree.depth(par) + 1
            assert set(tree.rows(s)) <= set(tree.rows(par))
    st_ = tree.stats()
    assert st_.b == len(leaves)
    assert st_.w2 == brute_w2(tree)
    assert (st_.w2 >= 1) == (st_.b >= 2)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_grow_then_prune_is_identity(seed):
    rng = np.random.default_rng(seed)
    x = random_design(rng, n=15, p=2, missing=0.15)
    tree = random_tree(rng, x, edits=6)
    growable = [s for s in tree.leaves() if tree.available_predictors(s)]
    if not growable:
        return
    s = growable[rng.integers(len(growable))]
    j = list(tree.available_predictors(s))[0]
    before = (tree.dump(), [sorted(tree.rows(v).tolist()) for v in tree.nodes()], tree.stats())
    rule = tree.candidate_rules(s, j)[-1]
    tree.grow_at(s, rule)
    tree.prune_at(s)
    after = (tree.dump(), [sorted(tree.rows(v).tolist()) for v in tree.nodes()], tree.stats())
    assert after == before


def test_memcache_survives_long_edit_sequences():
    rng = np.random.default_rng(77)
    x = random_design(rng, n=40, p=4, levels=6, missing=0.1)
    tree = Tree(x, memcache=True)
    for step in range(1000):
        random_edit(tree, rng)
        if step % 5:
            continue
        for s in tree.nodes():
            tree.memcache = True
            cached = (tree.available_predictors(s), {j: tree.n_adj(s, j) for j in range(tree.p)})
            tree.memcache = False
            fresh = (tree.available_predictors(s), {j: tree.n_adj(s, j) for j in range(tree.p)})
            assert cached == fresh, f"stale cache at node {s} after {step} edits"
        tree.memcache = True


@pytest.mark.parametrize("seed", range(50))
def test_memcache_on_off_identical_sets(seed):
    rng = np.random.default_rng(seed)
    x = random_design(rng, n=20, p=3, missing=0.1)
    a = random_tree(np.random.default_rng(seed), x, edits=10, memcache=True)
    b = random_tree(np.random.default_rng(seed), x, edits=10, memcache=False)
    assert a.dump() == b.dump()
    for s in a.leaves():
        assert a.available_predictors(s) == b.available_predictors(s)
        for j in a.available_predictors(s):
            assert a.candidate_rules(s, j) == b.candidate_rules(s, j)


def test_capacity_grows_on_demand():
    x = np.arange(200.0).reshape(-1, 1)
    tree = Tree(x)
    frontier = [0]
    while frontier and len(tree.nodes()) < 150:
        s = frontier.pop(0)
        if tree.available_predictors(s):
            rules = tree.candidate_rules(s, 0)
            frontier += list(tree.grow_at(s, rules[len(rules) // 2]))
    assert tree.stats().b == (len(tree.nodes()) + 1) // 2
    for i in range(0, 200, 17):
        assert i in tree.rows(tree.route(x[i]))


def test_sufficient_stats():
    tree = column_tree([1, 2, 3, 4])
    lft, rgt = tree.grow_at(0, SplitRule(0, 2.0))
    r = np.array([1.0, -2.0, 3.0, 0.5])
    st_ = tree.sufficient_stats(rgt, r)
    assert (st_.n, st_.sum_r, st_.sum_r_sq) == (2, 3.5, 9.25)
