"""Gibbs sampler over tree ensembles with Metropolis-Hastings tree moves.

One iteration visits each tree in turn: add the tree's fit back into the
running residuals, propose a GROW, PRUNE or CHANGE, draw the leaf values
from their conjugate normal posterior, subtract the new fit. Then sigma^2
is drawn (regression) or the latent probit variables are redrawn
(classification).

All acceptance ratios are assembled in log space from three parts: the
transition ratio, the likelihood ratio (leaf means integrated out), and
the tree-structure prior ratio.
"""

from __future__ import annotations

import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import IO

import numpy as np
from numba import njit

from .dataset import DataError, ModelFrame
from .ensemble import PosteriorEnsemble, TraceSegment
from .priors import CalibratedPriors, Hyperparameters, calibrate, resolve_cov_weights
from .tree import (
    LEAF,
    Design,
    Forest,
    SplitRule,
    Tree,
    TreeError,
    candidate_at,
    candidate_count,
    change_node,
    collect_nodes,
    grow_capacity,
    grow_node,
    make_design,
    make_forest,
    make_scratch,
    node_availability,
    node_nadj,
    prune_node,
    route_rank,
    segment_sum,
    split_sums,
    unique_ranks,
)

GROW, PRUNE, CHANGE = 0, 1, 2
KIND_NAMES = ("GROW", "PRUNE", "CHANGE")
# rows of the per-tree proposal log: kind, trans, lik, struct, log_r, accepted, feasible
EVAL_WIDTH = 7


class InvariantError(RuntimeError):
    """Raised when a debug-mode consistency check fails."""


@dataclass(frozen=True)
class ProposalEvaluation:
    kind: str
    log_transition_ratio: float
    log_likelihood_ratio: float
    log_tree_structure_ratio: float
    accepted: bool = False

    @property
    def log_r(self) -> float:
        return self.log_transition_ratio + self.log_likelihood_ratio + self.log_tree_structure_ratio


# ---------------------------------------------------------------------------
# likelihood


@njit(cache=True)
def log_ratio_term(n, s, sigsq, sigmu_sq, mu0):
    """The part of the log marginal likelihood of a node that enters MH ratios."""
    if n == 0:
        return 0.0
    sp = s - n * mu0
    denom = sigsq + n * sigmu_sq
    return 0.5 * math.log(sigsq / denom) + sigmu_sq * sp * sp / (2.0 * sigsq * denom)


def log_node_marginal_likelihood(stats, sigma_sq: float, sigma_mu_sq: float, prior_mean: float = 0.0) -> float:
    """Log density of a node's residuals with its leaf mean integrated out.

    ``stats`` is a :class:`~sumtrees.tree.NodeSufficientStats`. The leaf
    mean has prior Normal(prior_mean, sigma_mu_sq).
    """
    if sigma_sq <= 0 or sigma_mu_sq <= 0:
        raise ValueError("variances must be positive")
    n = stats.n
    if n == 0:
        return 0.0
    # sum of squares about the prior mean, from the stored moments
    ss = stats.sum_r_sq - 2.0 * prior_mean * stats.sum_r + n * prior_mean**2
    return (-0.5 * n * math.log(2 * math.pi * sigma_sq) - ss / (2 * sigma_sq)
            + log_ratio_term(n, stats.sum_r, sigma_sq, sigma_mu_sq, prior_mean))


# ---------------------------------------------------------------------------
# the three ratios from sufficient statistics and counts


@njit(cache=True)
def _grow_structure(depth, wj, w_total, nadj, alpha, beta):
    return (math.log(alpha) + 2.0 * math.log(1.0 - alpha / (2.0 + depth) ** beta)
            - math.log((1.0 + depth) ** beta - alpha) + math.log(wj / w_total) - math.log(nadj))


@njit(cache=True)
def grow_core(nl, sl, nr, sr, b, w2_star, w_total, wj, nadj, depth,
              sigsq, sigmu_sq, mu0, alpha, beta, p_grow, p_prune, use_lik):
    """(transition, likelihood, structure) log ratios for growing a leaf at ``depth``.

    ``b`` counts leaves before the move and ``w2_star`` singly-internal
    nodes after it.
    """
    trans = (math.log(p_prune / p_grow) + math.log(b) + math.log(w_total / wj)
             + math.log(nadj) - math.log(w2_star))
    lik = 0.0
    if use_lik:
        lik = (log_ratio_term(nl, sl, sigsq, sigmu_sq, mu0) + log_ratio_term(nr, sr, sigsq, sigmu_sq, mu0)
               - log_ratio_term(nl + nr, sl + sr, sigsq, sigmu_sq, mu0))
    struct = _grow_structure(depth, wj, w_total, nadj, alpha, beta)
    return trans, lik, struct


@njit(cache=True)
def prune_core(nl, sl, nr, sr, b, w2, w_total, wj, nadj, depth,
               sigsq, sigmu_sq, mu0, alpha, beta, p_grow, p_prune, use_lik):
    """Log ratios for pruning; exact negation of the reverse GROW.

    ``b`` and ``w2`` are counted on the tree before pruning.
    """
    trans, lik, struct = grow_core(nl, sl, nr, sr, b - 1, w2, w_total, wj, nadj, depth,
                                   sigsq, sigmu_sq, mu0, alpha, beta, p_grow, p_prune, use_lik)
    return -trans, -lik, -struct


@njit(cache=True)
def change_core(n1, s1, n2, s2, n1s, s1s, n2s, s2s, wj_old, nadj_old, wj_new, nadj_new,
                sigsq, sigmu_sq, mu0, use_lik):
    """Log ratios for replacing a singly-internal node's rule.

    Counts/sums without suffix describe the current children, ``*s`` the
    proposed ones. Transition and structure parts cancel exactly.
    """
    trans = math.log(nadj_new) - math.log(nadj_old) + math.log(wj_old) - math.log(wj_new)
    lik = 0.0
    if use_lik:
        lik = (log_ratio_term(n1s, s1s, sigsq, sigmu_sq, mu0) + log_ratio_term(n2s, s2s, sigsq, sigmu_sq, mu0)
               - log_ratio_term(n1, s1, sigsq, sigmu_sq, mu0) - log_ratio_term(n2, s2, sigsq, sigmu_sq, mu0))
    return trans, lik, -trans


def change_likelihood_same_counts(n1: int, s1: float, s1_new: float, n2: int, s2: float, s2_new: float,
                                  sigma_sq: float, sigma_mu_sq: float, prior_mean: float = 0.0) -> float:
    """Shortcut CHANGE log likelihood ratio when both child counts are unchanged."""
    k = sigma_sq / sigma_mu_sq
    a1, a1n = s1 - n1 * prior_mean, s1_new - n1 * prior_mean
    a2, a2n = s2 - n2 * prior_mean, s2_new - n2 * prior_mean
    return ((a1n**2 - a1**2) / (n1 + k) + (a2n**2 - a2**2) / (n2 + k)) / (2 * sigma_sq)


# ---------------------------------------------------------------------------
# chain kernels


@njit(cache=True)
def _pick_feature(mask, weights, w_total, u):
    target = u * w_total
    acc = 0.0
    last = -1
    for j in range(mask.shape[0]):
        if mask[j]:
            last = j
            acc += weights[j]
            if target < acc:
                return j
    return last


@njit(cache=True)
def _node_uniques(f, d, t, s, j, memcache, mark, buf):
    u, hm = unique_ranks(d.ranks, d.uoff, f.order[t], f.start[t, s], f.end[t, s], j, mark, buf)
    c = candidate_count(u, hm)
    if memcache and f.cache_ok[t, s] == 1:
        f.cache_nadj[t, s, j] = c
    return u, hm, c


@njit(cache=True)
def mh_step(f, d, t, resid, sigsq, sigmu_sq, mu0, alpha, beta, p_grow, p_prune,
            memcache, use_lik, sc, rng, ev):
    """One MH tree move on tree t; fills ``ev`` and returns 1 if accepted."""
    for k in range(ev.shape[0]):
        ev[k] = 0.0
    nl, ns, maxd = collect_nodes(f, t, sc.leaves, sc.sing, sc.stack)
    u = rng.random()
    if u < p_grow:
        kind = GROW
    elif u < p_grow + p_prune:
        kind = PRUNE
    else:
        kind = CHANGE
    ev[0] = kind
    order_t = f.order[t]
    s = 0
    j = 0
    c = np.int32(0)
    mia = 1

    if kind == GROW:
        s = sc.leaves[rng.integers(0, nl)]
        cnt, w_total = node_availability(f, d, t, s, memcache, sc.mask)
        if cnt == 0:
            return 0
        j = _pick_feature(sc.mask, d.weights, w_total, rng.random())
        uu, hm, nadj = _node_uniques(f, d, t, s, j, memcache, sc.mark, sc.buf)
        c, mia = candidate_at(rng.integers(0, nadj), uu, hm, sc.buf)
        n_l, s_l, n_r, s_r = split_sums(d.ranks, order_t, f.start[t, s], f.end[t, s], j, c, mia, resid)
        w2_star = ns + 1
        if s != 0:
            par = f.parent[t, s]
            sib = f.right[t, par] if f.left[t, par] == s else f.left[t, par]
            if f.feat[t, sib] == LEAF:
                w2_star -= 1
        trans, lik, struct = grow_core(n_l, s_l, n_r, s_r, nl, w2_star, w_total, d.weights[j], nadj,
                                       f.depth[t, s], sigsq, sigmu_sq, mu0, alpha, beta,
                                       p_grow, p_prune, use_lik)
    elif kind == PRUNE:
        if nl < 2:
            return 0
        s = sc.sing[rng.integers(0, ns)]
        j = f.feat[t, s]
        lft = f.left[t, s]
        rgt = f.right[t, s]
        n_l = f.end[t, lft] - f.start[t, lft]
        n_r = f.end[t, rgt] - f.start[t, rgt]
        s_l = segment_sum(order_t, f.start[t, lft], f.end[t, lft], resid)
        s_r = segment_sum(order_t, f.start[t, rgt], f.end[t, rgt], resid)
        cnt, w_total = node_availability(f, d, t, s, memcache, sc.mask)
        nadj = node_nadj(f, d, t, s, j, memcache, sc.mark, sc.buf)
        trans, lik, struct = prune_core(n_l, s_l, n_r, s_r, nl, ns, w_total, d.weights[j], nadj,
                                        f.depth[t, s], sigsq, sigmu_sq, mu0, alpha, beta,
                                        p_grow, p_prune, use_lik)
    else:
        if ns == 0:
            return 0
        s = sc.sing[rng.integers(0, ns)]
        j_old = f.feat[t, s]
        lft = f.left[t, s]
        rgt = f.right[t, s]
        n1 = f.end[t, lft] - f.start[t, lft]
        n2 = f.end[t, rgt] - f.start[t, rgt]
        s1 = segment_sum(order_t, f.start[t, lft], f.end[t, lft], resid)
        s2 = segment_sum(order_t, f.start[t, rgt], f.end[t, rgt], resid)
        cnt, w_total = node_availability(f, d, t, s, memcache, sc.mask)
        nadj_old = node_nadj(f, d, t, s, j_old, memcache, sc.mark, sc.buf)
        j = _pick_feature(sc.mask, d.weights, w_total, rng.random())
        uu, hm, nadj = _node_uniques(f, d, t, s, j, memcache, sc.mark, sc.buf)
        c, mia = candidate_at(rng.integers(0, nadj), uu, hm, sc.buf)
        n1s, s1s, n2s, s2s = split_sums(d.ranks, order_t, f.start[t, s], f.end[t, s], j, c, mia, resid)
        trans, lik, struct = change_core(n1, s1, n2, s2, n1s, s1s, n2s, s2s, d.weights[j_old], nadj_old,
                                         d.weights[j], nadj, sigsq, sigmu_sq, mu0, use_lik)

    log_r = trans + lik + struct
    accepted = math.log(rng.random()) < log_r
    ev[1] = trans
    ev[2] = lik
    ev[3] = struct
    ev[4] = log_r
    ev[5] = 1.0 if accepted else 0.0
    ev[6] = 1.0
    if not accepted:
        return 0
    if kind == GROW:
        grow_node(f, d.ranks, t, s, j, c, mia, sc.tmp)
    elif kind == PRUNE:
        prune_node(f, t, s)
    else:
        change_node(f, d.ranks, t, s, j, c, mia, sc.tmp)
    return 1


@njit(cache=True)
def _add_tree_fit(f, t, resid, leaves, nl, sign):
    for q in range(nl):
        s = leaves[q]
        v = sign * f.val[t, s]
        for k in range(f.start[t, s], f.end[t, s]):
            resid[f.order[t, k]] += v


@njit(cache=True, nogil=True)
def gibbs_sweep(f, d, resid, sigsq, sigmu_sq, mu0, alpha, beta, p_grow, p_prune,
                memcache, use_lik, sc, rng, evals, stats):
    """Update every tree once. ``resid`` holds y (or z) minus the full fit.

    ``stats`` receives (accepted count, total leaves, total depth).
    """
    m = f.feat.shape[0]
    accepted = 0
    tot_leaves = 0
    tot_depth = 0
    for t in range(m):
        nl, ns, maxd = collect_nodes(f, t, sc.leaves, sc.sing, sc.stack)
        _add_tree_fit(f, t, resid, sc.leaves, nl, 1.0)
        accepted += mh_step(f, d, t, resid, sigsq, sigmu_sq, mu0, alpha, beta, p_grow, p_prune,
                            memcache, use_lik, sc, rng, evals[t])
        nl, ns, maxd = collect_nodes(f, t, sc.leaves, sc.sing, sc.stack)
        for q in range(nl):
            s = sc.leaves[q]
            n = f.end[t, s] - f.start[t, s]
            if not use_lik:
                n = 0
            total = segment_sum(f.order[t], f.start[t, s], f.end[t, s], resid) if n > 0 else 0.0
            denom = n * sigmu_sq + sigsq
            mean = (sigmu_sq * total + sigsq * mu0) / denom
            f.val[t, s] = mean + math.sqrt(sigsq * sigmu_sq / denom) * rng.standard_normal()
        _add_tree_fit(f, t, resid, sc.leaves, nl, -1.0)
        tot_leaves += nl
        tot_depth += maxd
    stats[0] = accepted
    stats[1] = tot_leaves
    stats[2] = tot_depth


@njit(cache=True)
def draw_sigma_sq_kernel(resid, nu, lam, rng):
    ss = 0.0
    for i in range(resid.shape[0]):
        ss += resid[i] * resid[i]
    shape = 0.5 * (nu + resid.shape[0])
    rate = 0.5 * (nu * lam + ss)
    return 1.0 / rng.gamma(shape, 1.0 / rate)


@njit(cache=True)
def _std_normal_above(a, rng):
    """Standard normal conditioned on being >= a."""
    if a < 0.5:
        while True:
            z = rng.standard_normal()
            if z >= a:
                return z
    # exponential proposal with the optimal rate for this tail
    lam = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        z = a + rng.exponential(1.0 / lam)
        if rng.random() <= math.exp(-0.5 * (z - lam) ** 2):
            return z


@njit(cache=True)
def draw_latent_kernel(y, g, rng, out):
    for i in range(y.shape[0]):
        if y[i] == 1:
            out[i] = g[i] + _std_normal_above(-g[i], rng)
        else:
            out[i] = g[i] - _std_normal_above(g[i], rng)


@njit(cache=True)
def recompute_fit(f, ranks, n):
    m = f.feat.shape[0]
    fit = np.zeros(n)
    for t in range(m):
        for i in range(n):
            fit[i] += f.val[t, route_rank(f, ranks, t, i)]
    return fit


@njit(cache=True)
def count_nodes(f):
    m, cap = f.feat.shape
    total = 0
    for t in range(m):
        total += cap - f.nfree[t]
    return total


@njit(cache=True)
def export_forest(f, uvals, uoff, feat, split, mia, right, leaf, offsets, pos, tree_base):
    """Append every tree in preorder to the flat arrays starting at ``pos``."""
    m = f.feat.shape[0]
    stack = np.empty(f.feat.shape[1], np.int64)
    where = np.empty(f.feat.shape[1], np.int64)
    for t in range(m):
        offsets[tree_base + t] = pos
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            s = stack[top]
            where[s] = pos
            j = f.feat[t, s]
            feat[pos] = j
            if j == LEAF:
                split[pos] = np.nan
                mia[pos] = 0
                right[pos] = 0
                leaf[pos] = f.val[t, s]
            else:
                mia[pos] = f.mia[t, s]
                split[pos] = np.nan if f.mia[t, s] == 3 else uvals[uoff[j] + f.split[t, s]]
                leaf[pos] = 0.0
                stack[top] = f.right[t, s]
                stack[top + 1] = f.left[t, s]
                top += 2
            if s != 0:
                par = f.parent[t, s]
                if f.right[t, par] == s:
                    right[where[par]] = pos - where[par]
            pos += 1
    return pos


# ---------------------------------------------------------------------------
# python-level draws (used by tests and the CLI-facing API)


def draw_leaf_parameters(n: int, sum_r: float, sigma_sq: float, sigma_mu_sq: float,
                         prior_mean: float, rng: np.random.Generator, size=None):
    """Draw leaf values from their conjugate normal posterior."""
    denom = n * sigma_mu_sq + sigma_sq
    mean = (sigma_mu_sq * sum_r + sigma_sq * prior_mean) / denom
    return rng.normal(mean, math.sqrt(sigma_sq * sigma_mu_sq / denom), size=size)


def draw_sigma_sq(resid: np.ndarray, nu: float, lam: float, rng: np.random.Generator,
                  classification: bool = False) -> float:
    if classification:
        raise ValueError("sigma^2 is fixed at 1 for classification")
    return float(draw_sigma_sq_kernel(np.asarray(resid, dtype=float), float(nu), float(lam), rng))


def draw_latent_z(y: np.ndarray, g: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    g = np.asarray(g, dtype=float)
    out = np.empty(len(y))
    draw_latent_kernel(y, g, rng, out)
    return out


# ---------------------------------------------------------------------------
# ratios on a Tree object (audit / oracle tests)


def _wstats(tree: Tree, node: int, feature: int) -> tuple[float, float, int]:
    sc = tree.scratch
    cnt, w_total = node_availability(tree.forest, tree.design, 0, node, tree.memcache, sc.mask)
    if not sc.mask[feature]:
        raise TreeError(f"feature {feature} is not available at node {node}")
    nadj = node_nadj(tree.forest, tree.design, 0, node, feature, tree.memcache, sc.mark, sc.buf)
    return float(w_total), float(tree.design.weights[feature]), int(nadj)


def _split_stats(tree: Tree, node: int, rule: SplitRule, resid: np.ndarray):
    c, mia = tree._encode(node, rule)
    f = tree.forest
    return split_sums(tree.design.ranks, f.order[0], f.start[0, node], f.end[0, node],
                      rule.feature, c, mia, resid)


def grow_ratios(tree: Tree, node: int, rule: SplitRule, resid, sigma_sq: float, sigma_mu_sq: float,
                hyper: Hyperparameters, prior_mean: float = 0.0) -> ProposalEvaluation:
    if not tree.is_leaf(node):
        raise TreeError("GROW needs a terminal node")
    resid = np.asarray(resid, dtype=float)
    st = tree.stats()
    w_total, wj, nadj = _wstats(tree, node, rule.feature)
    nl, sl, nr, sr = _split_stats(tree, node, rule, resid)
    w2_star = st.w2 + 1
    if node != 0:
        par = int(tree.forest.parent[0, node])
        sib = [c for c in tree.children(par) if c != node][0]
        if tree.is_leaf(sib):
            w2_star -= 1
    parts = grow_core(nl, sl, nr, sr, st.b, w2_star, w_total, wj, nadj, tree.depth(node), sigma_sq,
                      sigma_mu_sq, prior_mean, hyper.alpha, hyper.beta, hyper.prob_grow, hyper.prob_prune, True)
    return ProposalEvaluation("GROW", *parts)


def prune_ratios(tree: Tree, node: int, resid, sigma_sq: float, sigma_mu_sq: float,
                 hyper: Hyperparameters, prior_mean: float = 0.0) -> ProposalEvaluation:
    if node not in tree.singly_internal():
        raise TreeError("PRUNE needs a singly-internal node")
    resid = np.asarray(resid, dtype=float)
    st = tree.stats()
    rule = tree.rule(node)
    w_total, wj, nadj = _wstats(tree, node, rule.feature)
    lft, rgt = tree.children(node)
    a, b = tree.sufficient_stats(lft, resid), tree.sufficient_stats(rgt, resid)
    parts = prune_core(a.n, a.sum_r, b.n, b.sum_r, st.b, st.w2, w_total, wj, nadj, tree.depth(node),
                       sigma_sq, sigma_mu_sq, prior_mean, hyper.alpha, hyper.beta,
                       hyper.prob_grow, hyper.prob_prune, True)
    return ProposalEvaluation("PRUNE", *parts)


def change_ratios(tree: Tree, node: int, rule: SplitRule, resid, sigma_sq: float, sigma_mu_sq: float,
                  hyper: Hyperparameters | None = None, prior_mean: float = 0.0) -> ProposalEvaluation:
    if node not in tree.singly_internal():
        raise TreeError("CHANGE needs a singly-internal node")
    resid = np.asarray(resid, dtype=float)
    old = tree.rule(node)
    w_total, wj_old, nadj_old = _wstats(tree, node, old.feature)
    _, wj_new, nadj_new = _wstats(tree, node, rule.feature)
    lft, rgt = tree.children(node)
    a, b = tree.sufficient_stats(lft, resid), tree.sufficient_stats(rgt, resid)
    n1s, s1s, n2s, s2s = _split_stats(tree, node, rule, resid)
    parts = change_core(a.n, a.sum_r, b.n, b.sum_r, n1s, s1s, n2s, s2s, wj_old, nadj_old, wj_new, nadj_new,
                        sigma_sq, sigma_mu_sq, prior_mean, True)
    return ProposalEvaluation("CHANGE", *parts)


# ---------------------------------------------------------------------------
# chains


@dataclass
class ChainState:
    """Mutable state of one chain: trees, residuals, sigma^2, latent z, RNG."""

    forest: Forest
    design: Design
    resid: np.ndarray
    sigma_sq: float
    rng: np.random.Generator
    target: np.ndarray
    latent_z: np.ndarray | None = None
    iteration: int = 0

    def fit(self) -> np.ndarray:
        return recompute_fit(self.forest, self.design.ranks, len(self.resid))

    def check_residuals(self, tol: float = 1e-10) -> float:
        """Compare the running residuals to a from-scratch recomputation."""
        target = self.latent_z if self.latent_z is not None else self.target
        err = float(np.max(np.abs(target - self.fit() - self.resid))) if len(self.resid) else 0.0
        scale = max(1.0, float(np.max(np.abs(target))))
        if err > tol * scale:
            raise InvariantError(f"running residuals drifted by {err:.3e} at iteration {self.iteration}")
        return err


@dataclass
class SamplerOptions:
    """Switches outside the model definition."""

    fixed_sigma_sq: float | None = None
    use_likelihood: bool = True
    debug_check: bool = False
    debug_log: IO[str] | None = None
    progress: bool = False
    progress_every: int = 100


def chain_seeds(seed: int, chains: int) -> list[np.random.SeedSequence]:
    """Independent per-chain streams spawned from one 64-bit seed."""
    return np.random.SeedSequence(seed).spawn(chains)


def kept_per_chain(post_burn_in: int, chains: int) -> int:
    return -(-post_burn_in // chains)


class _Snapshots:
    def __init__(self, m: int):
        self.m = m
        self.parts: list[tuple] = []

    def add(self, f: Forest, design: Design) -> None:
        total = int(count_nodes(f))
        feat = np.empty(total, np.int32)
        split = np.empty(total)
        mia = np.empty(total, np.int8)
        right = np.empty(total, np.int32)
        leaf = np.empty(total)
        offsets = np.empty(self.m, np.int64)
        export_forest(f, design.uvals, design.uoff, feat, split, mia, right, leaf, offsets, 0, 0)
        self.parts.append((feat, split, mia, right, leaf, offsets))


def run_chain(frame: ModelFrame, hyper: Hyperparameters, priors: CalibratedPriors,
              seed_seq: np.random.SeedSequence, keep: int, options: SamplerOptions | None = None,
              chain_index: int = 0, design: Design | None = None):
    """Run one chain; returns (snapshots, sigma^2 of kept draws, trace)."""
    options = options or SamplerOptions()
    rng = np.random.default_rng(seed_seq)
    n, p = frame.matrix.shape
    m = hyper.num_trees
    if design is None:
        design = make_design(frame.matrix, resolve_cov_weights(frame, hyper))
    f = make_forest(m, n, p)
    sc = make_scratch(design, f.feat.shape[1])
    classification = frame.is_classification
    target = np.asarray(frame.response, dtype=float)
    y_int = target.astype(np.int64)
    if classification:
        latent = draw_latent_z(y_int, np.zeros(n), rng)
        resid = latent.copy()
        sigsq = 1.0
    else:
        latent = None
        resid = target.copy()
        sigsq = priors.sigsq_hat if options.fixed_sigma_sq is None else float(options.fixed_sigma_sq)
    state = ChainState(f, design, resid, sigsq, rng, target, latent)

    sigmu_sq = priors.sigma_mu**2
    mu0 = priors.leaf_prior_mean(m)
    total_iter = hyper.burn_in + keep
    sig_trace = np.empty(total_iter)
    acc_trace = np.empty(total_iter)
    leaf_trace = np.empty(total_iter)
    depth_trace = np.empty(total_iter)
    evals = np.zeros((m, EVAL_WIDTH))
    stats = np.zeros(3, np.int64)
    snaps = _Snapshots(m)
    kept_sigma = np.empty(keep)
    fit = np.empty(n)

    for it in range(total_iter):
        if int(state.forest.nfree.min()) < 2:
            state.forest = grow_capacity(state.forest)
            sc = make_scratch(design, state.forest.feat.shape[1])
        gibbs_sweep(state.forest, design, state.resid, state.sigma_sq, sigmu_sq, mu0,
                    hyper.alpha, hyper.beta, hyper.prob_grow, hyper.prob_prune,
                    hyper.memcache, options.use_likelihood, sc, rng, evals, stats)
        if classification:
            np.subtract(state.latent_z, state.resid, out=fit)
            draw_latent_kernel(y_int, fit, rng, state.latent_z)
            np.subtract(state.latent_z, fit, out=state.resid)
        elif options.fixed_sigma_sq is None:
            state.sigma_sq = float(draw_sigma_sq_kernel(state.resid, hyper.nu, priors.lam, rng))
        state.iteration = it + 1

        sig_trace[it] = state.sigma_sq
        acc_trace[it] = stats[0] / m
        leaf_trace[it] = stats[1] / m
        depth_trace[it] = stats[2] / m
        if options.debug_log is not None:
            _write_log(options.debug_log, chain_index, it, evals)
        if options.debug_check:
            state.check_residuals()
        if it >= hyper.burn_in:
            snaps.add(state.forest, design)
            kept_sigma[it - hyper.burn_in] = state.sigma_sq
        if options.progress and (it + 1) % options.progress_every == 0:
            print(f"chain {chain_index}: iteration {it + 1}/{total_iter}", file=sys.stderr)

    trace = TraceSegment(sig_trace, acc_trace, leaf_trace, depth_trace, hyper.burn_in)
    return snaps, kept_sigma, trace, state


def _write_log(stream: IO[str], chain: int, it: int, evals: np.ndarray) -> None:
    for t, row in enumerate(evals):
        if row[6] == 0:
            stream.write(json.dumps({"chain": chain, "iteration": it, "tree": t,
                                     "kind": KIND_NAMES[int(row[0])], "feasible": False,
                                     "accepted": False}) + "\n")
            continue
        stream.write(json.dumps({
            "chain": chain, "iteration": it, "tree": t, "kind": KIND_NAMES[int(row[0])], "feasible": True,
            "log_transition_ratio": row[1], "log_likelihood_ratio": row[2],
            "log_tree_structure_ratio": row[3], "log_r": row[4], "accepted": bool(row[5]),
        }) + "\n")


def run_gibbs(frame: ModelFrame, hyper: Hyperparameters | None = None, priors: CalibratedPriors | None = None,
              seed: int = 0, threads: int = 1, options: SamplerOptions | None = None) -> PosteriorEnsemble:
    """Fit the model; chains run on up to ``threads`` worker threads.

    Each chain keeps ceil(post_burn_in / chains) draws; the concatenation is
    truncated to post_burn_in.
    """
    hyper = hyper or Hyperparameters()
    if not hyper.use_missing_data and np.isnan(frame.matrix).any():
        raise DataError("training data has missing predictor values; enable use_missing_data")
    priors = priors or calibrate(frame, hyper)
    options = options or SamplerOptions()
    if options.debug_log is not None and threads > 1:
        threads = 1  # keeps the log ordered by chain
    keep = kept_per_chain(hyper.post_burn_in, hyper.chains)
    seqs = chain_seeds(seed, hyper.chains)
    design = make_design(frame.matrix, resolve_cov_weights(frame, hyper))
    started = time.perf_counter()

    def one(c: int):
        return run_chain(frame, hyper, priors, seqs[c], keep, options, c, design)

    if threads <= 1 or hyper.chains == 1:
        results = [one(c) for c in range(hyper.chains)]
    else:
        with ThreadPoolExecutor(min(threads, hyper.chains)) as pool:
            results = list(pool.map(one, range(hyper.chains)))

    m = hyper.num_trees
    parts = [part for snaps, *_ in results for part in snaps.parts][: hyper.post_burn_in]
    sizes = []
    remaining = hyper.post_burn_in
    for _ in results:
        sizes.append(min(keep, remaining))
        remaining -= sizes[-1]
    feat = np.concatenate([p_[0] for p_ in parts])
    offsets = np.empty(len(parts) * m + 1, np.int64)
    base = 0
    for k, part in enumerate(parts):
        offsets[k * m:(k + 1) * m] = part[5] + base
        base += len(part[0])
    offsets[-1] = base
    ensemble = PosteriorEnsemble(
        feat=feat,
        split=np.concatenate([p_[1] for p_ in parts]),
        mia=np.concatenate([p_[2] for p_ in parts]),
        right=np.concatenate([p_[3] for p_ in parts]),
        leaf=np.concatenate([p_[4] for p_ in parts]),
        offsets=offsets,
        num_trees=m,
        sigma_sq=np.concatenate([r[1] for r in results])[: hyper.post_burn_in],
        hyper=hyper,
        priors=priors,
        frame=frame,
        traces=[r[2] for r in results],
        chain_sizes=sizes,
        seeds=[int(seed)],
    )
    ensemble.train_seconds = time.perf_counter() - started
    return ensemble
