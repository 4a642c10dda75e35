"""Hyperparameters, data-driven prior calibration, and the tree-structure prior."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammainc

from .dataset import ModelFrame


class PriorError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparameters:
    num_trees: int = 50
    alpha: float = 0.95
    beta: float = 2.0
    k: float = 2.0
    nu: float = 3.0
    q: float = 0.9
    prob_grow: float = 0.28
    prob_prune: float = 0.28
    prob_change: float = 0.44
    cov_prior_vec: tuple[float, ...] | None = None
    burn_in: int = 250
    post_burn_in: int = 1000
    chains: int = 1
    prob_rule_class: float = 0.5
    memcache: bool = True
    use_missing_data: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1:
            raise PriorError("alpha must lie in (0, 1)")
        if self.beta < 0:
            raise PriorError("beta must be nonnegative")
        if self.num_trees < 1:
            raise PriorError("num_trees must be >= 1")
        probs = (self.prob_grow, self.prob_prune, self.prob_change)
        if min(probs) < 0 or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
            raise PriorError("proposal probabilities must be nonnegative and sum to 1")
        if self.prob_grow <= 0 or self.prob_prune <= 0:
            raise PriorError("GROW and PRUNE probabilities must be positive")
        if self.cov_prior_vec is not None and min(self.cov_prior_vec) <= 0:
            raise PriorError("cov_prior_vec entries must be > 0")
        if self.k <= 0 or self.nu <= 0 or not 0 < self.q < 1:
            raise PriorError("k, nu must be positive and q in (0, 1)")
        if self.burn_in < 0 or self.post_burn_in < 1 or self.chains < 1:
            raise PriorError("need burn_in >= 0, post_burn_in >= 1 and chains >= 1")
        if not 0 < self.prob_rule_class < 1:
            raise PriorError("prob_rule_class must lie in (0, 1)")

    def with_(self, **changes: Any) -> "Hyperparameters":
        if "cov_prior_vec" in changes and changes["cov_prior_vec"] is not None:
            changes["cov_prior_vec"] = tuple(float(v) for v in changes["cov_prior_vec"])
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        if out["cov_prior_vec"] is not None:
            out["cov_prior_vec"] = list(out["cov_prior_vec"])
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Hyperparameters":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise PriorError(f"unknown hyperparameters: {sorted(unknown)}")
        kwargs = dict(data)
        if kwargs.get("cov_prior_vec") is not None:
            kwargs["cov_prior_vec"] = tuple(float(v) for v in kwargs["cov_prior_vec"])
        return cls(**kwargs)


def parse_config(text: str) -> dict[str, Any]:
    """Parse ``key=value`` lines (``#`` comments) into typed hyperparameter overrides."""
    types = {f.name: f.type for f in fields(Hyperparameters)}
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PriorError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise PriorError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def _coerce(key: str, value: str) -> Any:
    if key == "cov_prior_vec":
        return tuple(float(v) for v in value.replace(",", " ").split())
    if key in ("memcache", "use_missing_data"):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise PriorError(f"{key} expects a boolean")
        return value.lower() in ("true", "1", "yes", "on")
    if key in ("num_trees", "burn_in", "post_burn_in", "chains"):
        return int(value)
    return float(value)


@dataclass(frozen=True)
class CalibratedPriors:
    mu_mu: float
    sigma_mu: float
    lam: float
    sigsq_hat: float
    classification: bool = False

    def __post_init__(self) -> None:
        if self.sigma_mu <= 0:
            raise PriorError("sigma_mu must be positive")
        if not self.classification and self.lam <= 0:
            raise PriorError("lambda must be positive")

    def leaf_prior_mean(self, m: int) -> float:
        return self.mu_mu / m


def prob_split(depth, alpha: float = 0.95, beta: float = 2.0):
    """Prior probability that a node at ``depth`` is internal."""
    out = alpha * np.power(1.0 + np.asarray(depth, dtype=float), -beta)
    return float(out) if out.ndim == 0 else out


def calibrate_leaf_prior(y_min: float, y_max: float, m: int, k: float = 2.0) -> tuple[float, float]:
    """Range center and leaf sd so that the m-tree sum spans [y_min, y_max] at +-k sd."""
    if not y_max > y_min:
        raise PriorError("response range is degenerate (y_max <= y_min)")
    mu_mu = (y_min + y_max) / 2.0
    sigma_mu = (y_max - mu_mu) / (k * math.sqrt(m))
    return mu_mu, sigma_mu


def classification_leaf_prior(m: int, k: float = 2.0) -> tuple[float, float]:
    """Probit scale: the m-tree sum is centered at 0 and spans (-3, 3) at +-k sd."""
    return 0.0, 3.0 / (k * math.sqrt(m))


def chi2_cdf(x: float, nu: float) -> float:
    return float(gammainc(nu / 2.0, x / 2.0)) if x > 0 else 0.0


def chi2_quantile(prob: float, nu: float, tol: float = 1e-10) -> float:
    """Bracketed root of the regularized incomplete-gamma CDF."""
    if not 0 < prob < 1:
        raise PriorError("quantile level must lie in (0, 1)")
    hi = max(1.0, nu)
    while chi2_cdf(hi, nu) < prob:
        hi *= 2.0
    return brentq(lambda x: chi2_cdf(x, nu) - prob, 0.0, hi, xtol=tol, rtol=4 * np.finfo(float).eps)


def noise_variance_estimate(y: np.ndarray, x: np.ndarray) -> float:
    """Residual variance of an OLS fit with intercept.

    Missing cells are mean-imputed for this estimate only. Falls back to the
    sample variance of y when the fit leaves no residual degrees of freedom.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < 2:
        raise PriorError("need at least 2 rows to estimate noise variance")
    x = np.asarray(x, dtype=float)
    if x.size and np.isnan(x).any():
        x = x.copy()
        means = np.nanmean(np.where(np.isnan(x).all(axis=0), 0.0, x), axis=0)
        idx = np.where(np.isnan(x))
        x[idx] = np.take(np.nan_to_num(means), idx[1])
    design = np.column_stack([np.ones(n), x]) if x.size else np.ones((n, 1))
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    dof = n - rank
    if design.shape[1] >= n or dof <= 0:
        return float(np.var(y, ddof=1))
    resid = y - design @ coef
    return float(resid @ resid / dof)


def calibrate_lambda(sigsq_hat: float, nu: float = 3.0, q: float = 0.9) -> float:
    """Scale so that P(sigma^2 <= sigsq_hat) = q under InvGamma(nu/2, nu*lambda/2)."""
    return sigsq_hat * chi2_quantile(1.0 - q, nu) / nu


def calibrate(frame: ModelFrame, hyper: Hyperparameters) -> CalibratedPriors:
    m = hyper.num_trees
    if frame.is_classification:
        mu_mu, sigma_mu = classification_leaf_prior(m, hyper.k)
        return CalibratedPriors(mu_mu, sigma_mu, lam=1.0, sigsq_hat=1.0, classification=True)
    y = frame.response
    mu_mu, sigma_mu = calibrate_leaf_prior(float(y.min()), float(y.max()), m, hyper.k)
    sigsq_hat = noise_variance_estimate(y, frame.matrix)
    return CalibratedPriors(mu_mu, sigma_mu, calibrate_lambda(sigsq_hat, hyper.nu, hyper.q), sigsq_hat)


def default_cov_weights(frame: ModelFrame) -> np.ndarray:
    """Unit weight per predictor; a factor's dummies share one unit equally."""
    w = np.ones(frame.p)
    for cols in frame.dummy_groups.values():
        w[cols] = 1.0 / len(cols)
    return w


def resolve_cov_weights(frame: ModelFrame, hyper: Hyperparameters) -> np.ndarray:
    if hyper.cov_prior_vec is None:
        return default_cov_weights(frame)
    w = np.asarray(hyper.cov_prior_vec, dtype=float)
    if w.shape != (frame.p,):
        raise PriorError(f"cov_prior_vec has length {len(w)}, expected p={frame.p}")
    return w


def tree_structure_log_prior(tree, alpha: float = 0.95, beta: float = 2.0) -> float:
    """Log prior of a tree's structure and rules under the depth-split prior.

    Terminals contribute log(1 - P_split); internals contribute log P_split
    plus log of the rule probability (normalized feature weight times one
    over the number of candidate rules for that feature).
    """
    total = 0.0
    for node in tree.nodes():
        ps = prob_split(tree.depth(node), alpha, beta)
        if tree.is_leaf(node):
            total += math.log1p(-ps)
            continue
        rule = tree.rule(node)
        probs = tree.available_predictors(node)
        total += math.log(ps) + math.log(probs[rule.feature]) - math.log(tree.n_adj(node, rule.feature))
    return total
