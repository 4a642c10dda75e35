"""Independent reference computations for the sampler checks.

Nothing here calls the package's likelihood or ratio code: marginal
likelihoods come from the multivariate normal density of the node's
residuals (or numerical quadrature), the structure prior from a walk over
nodes with candidate sets rebuilt by routing rows directly, and proposal
probabilities from explicit counting.
"""

import math

import mpmath
import numpy as np
from scipy.stats import multivariate_normal

from treegen import brute_force_candidates


def log_marginal_mvn(r, sigma_sq, sigma_mu_sq, mu0=0.0):
    """log of int prod N(r_i | mu, sigma^2) N(mu | mu0, sigma_mu^2) dmu."""
    r = np.asarray(r, dtype=float)
    n = len(r)
    if n == 0:
        return 0.0
    cov = sigma_sq * np.eye(n) + sigma_mu_sq * np.ones((n, n))
    return float(multivariate_normal(mean=np.full(n, mu0), cov=cov).logpdf(r))


def log_marginal_quadrature(r, sigma_sq, sigma_mu_sq, mu0=0.0, dps=25):
    """Same integral by adaptive high-precision quadrature over mu."""
    mpmath.mp.dps = dps
    r = [mpmath.mpf(float(v)) for v in r]
    n = len(r)
    s2, t2, m0 = mpmath.mpf(sigma_sq), mpmath.mpf(sigma_mu_sq), mpmath.mpf(mu0)
    log_const = -mpmath.log(2 * mpmath.pi * t2) / 2 - n * mpmath.log(2 * mpmath.pi * s2) / 2

    def exponent(mu):
        # log of the N(mu0, t2) prior times the N(mu, s2) density of each residual, up to log_const
        return -(mu - m0) ** 2 / (2 * t2) - sum((v - mu) ** 2 for v in r) / (2 * s2)

    # centre the partition on the peak and scale it to 1; quad's tolerance is absolute
    peak = (t2 * sum(r) + s2 * m0) / (n * t2 + s2) if n else m0
    width = mpmath.sqrt(s2 * t2 / (n * t2 + s2))
    top = exponent(peak)
    pts = [-mpmath.inf] + [peak + k * width for k in (-8, -2, 0, 2, 8)] + [mpmath.inf]
    area = mpmath.quad(lambda mu: mpmath.exp(exponent(mu) - top), pts)
    return float(log_const + top + mpmath.log(area))


def node_depth(tree, s):
    d = 0
    while s != 0:
        s = int(tree.forest.parent[0, s])
        d += 1
    return d


def available(tree, x, s):
    rows = tree.rows(s)
    out = {}
    for j in range(x.shape[1]):
        c = brute_force_candidates(x[rows, j])
        if c:
            out[j] = len(c)
    return out


def log_structure_prior(tree, x, weights, alpha, beta):
    total = 0.0
    for s in tree.nodes():
        ps = alpha * (1 + node_depth(tree, s)) ** (-beta)
        if tree.is_leaf(s):
            total += math.log(1 - ps)
            continue
        avail = available(tree, x, s)
        j = tree.rule(s).feature
        total += math.log(ps) + math.log(weights[j] / sum(weights[k] for k in avail)) - math.log(avail[j])
    return total


def log_posterior(tree, x, weights, resid, sigma_sq, sigma_mu_sq, mu0, alpha, beta):
    """Unnormalized log p(T | R, sigma^2) with leaf values integrated out."""
    lik = sum(log_marginal_mvn(resid[tree.rows(s)], sigma_sq, sigma_mu_sq, mu0) for s in tree.leaves())
    return lik + log_structure_prior(tree, x, weights, alpha, beta)


def log_q_grow(tree, x, weights, s, feature, p_grow):
    avail = available(tree, x, s)
    b = len(tree.leaves())
    return (math.log(p_grow) - math.log(b) + math.log(weights[feature] / sum(weights[k] for k in avail))
            - math.log(avail[feature]))


def log_q_prune(tree, p_prune):
    return math.log(p_prune) - math.log(len(tree.singly_internal()))


def log_q_change(tree, x, weights, s, feature, p_change):
    avail = available(tree, x, s)
    return (math.log(p_change) - math.log(len(tree.singly_internal()))
            + math.log(weights[feature] / sum(weights[k] for k in avail)) - math.log(avail[feature]))


def oracle_log_r(kind, before, after, node, x, weights, resid, sigma_sq, sigma_mu_sq, mu0, hyper):
    """log[pi(T') q(T' -> T)] - log[pi(T) q(T -> T')] for a realized move at ``node``."""
    a, b = hyper.alpha, hyper.beta
    post = (log_posterior(after, x, weights, resid, sigma_sq, sigma_mu_sq, mu0, a, b)
            - log_posterior(before, x, weights, resid, sigma_sq, sigma_mu_sq, mu0, a, b))
    if kind == "GROW":
        fwd = log_q_grow(before, x, weights, node, after.rule(node).feature, hyper.prob_grow)
        rev = log_q_prune(after, hyper.prob_prune)
    elif kind == "PRUNE":
        fwd = log_q_prune(before, hyper.prob_prune)
        rev = log_q_grow(after, x, weights, node, before.rule(node).feature, hyper.prob_grow)
    else:
        fwd = log_q_change(before, x, weights, node, after.rule(node).feature, hyper.prob_change)
        rev = log_q_change(after, x, weights, node, before.rule(node).feature, hyper.prob_change)
    return post + rev - fwd


def apply(tree, kind, node, rule):
    out = tree.copy()
    if kind == "GROW":
        out.grow_at(node, rule)
    elif kind == "PRUNE":
        out.prune_at(node)
    else:
        out.change_at(node, rule)
    return out


def total_variation(p, q):
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def tree_key(tree, s=0):
    """Hashable nested description of the subtree at ``s`` (None for a leaf)."""
    if tree.is_leaf(s):
        return None
    r = tree.rule(s)
    left, right = tree.children(s)
    value = None if r.value is None or math.isnan(r.value) else float(r.value)
    return (int(r.feature), value, int(r.mia_type), tree_key(tree, left), tree_key(tree, right))


def flat_tree_key(feat, split, mia, right, i=0):
    """Same description read from flat preorder arrays."""
    if feat[i] < 0:
        return None
    value = None if math.isnan(split[i]) else float(split[i])
    return (int(feat[i]), value, int(mia[i]), flat_tree_key(feat, split, mia, right, i + 1),
            flat_tree_key(feat, split, mia, right, i + int(right[i])))


def enumerate_trees(x, weights=None):
    """Every tree reachable from the root by feasible grows, keyed by :func:`tree_key`."""
    from sumtrees.tree import Tree

    seen = {}
    work = [Tree(x, weights=weights)]
    while work:
        t = work.pop()
        key = tree_key(t)
        if key in seen:
            continue
        seen[key] = t
        for s in t.leaves():
            for j in t.available_predictors(s):
                for rule in t.candidate_rules(s, j):
                    child = t.copy()
                    child.grow_at(s, rule)
                    work.append(child)
    return seen


def normalize_log(weights):
    top = max(weights.values())
    z = sum(math.exp(v - top) for v in weights.values())
    return {k: math.exp(v - top) / z for k, v in weights.items()}
