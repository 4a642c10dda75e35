"""Prediction and analysis on fitted ensembles.

Everything here consumes frozen :class:`PosteriorEnsemble` objects or
refits models through :func:`fit`. Replicate fits use seeds derived from
one base seed and the replicate index (see :func:`derive_seed`), so
results do not depend on how work is spread over threads.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numba import njit
from scipy.special import ndtr

from .dataset import DataError, ModelFrame, kfold_split, permute_columns, permute_response
from .ensemble import PosteriorEnsemble, count_inclusions, count_interactions
from .priors import Hyperparameters
from .sampler import SamplerOptions, run_gibbs
from .tree import goes_left_value

PDP_PERCENTILES = (5, 10, 20, 30, 40, 50, 60, 70, 80, 90, 95)


def derive_seed(seed: int, *keys: int) -> int:
    """64-bit child seed for (seed, key path); the splitting rule for all replicates."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, np.uint64)[0])


def fit(frame: ModelFrame, hyper: Hyperparameters | None = None, seed: int = 0, threads: int = 1,
        options: SamplerOptions | None = None) -> PosteriorEnsemble:
    return run_gibbs(frame, hyper or Hyperparameters(), seed=seed, threads=threads, options=options)


def _parallel_map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# prediction


@dataclass
class PredictionResult:
    draws: np.ndarray
    point: np.ndarray
    probabilities: np.ndarray | None = None
    labels: np.ndarray | None = None


def predict(ensemble: PosteriorEnsemble, x: np.ndarray, threads: int = 1) -> PredictionResult:
    """Posterior draws of the sum of trees plus point predictions.

    Regression points are posterior means. For classification the point is
    the mean of Phi(g_s) and labels are 1 where it reaches prob_rule_class.
    """
    draws = ensemble.draws(x, threads=threads)
    if not ensemble.is_classification:
        return PredictionResult(draws, draws.mean(axis=0))
    prob = ndtr(draws).mean(axis=0)
    labels = (prob >= ensemble.hyper.prob_rule_class).astype(int)
    return PredictionResult(draws, prob, prob, labels)


def label_names(ensemble: PosteriorEnsemble, labels: np.ndarray) -> list[str]:
    """Map 0/1 labels back to response level names when known."""
    frame = ensemble.frame
    pos = frame.positive_level
    if pos is None or not frame.response_levels:
        return [str(int(v)) for v in labels]
    neg = next(lv for lv in frame.response_levels if lv != pos)
    return [pos if v == 1 else neg for v in labels]


@dataclass
class IntervalEstimate:
    lower: np.ndarray
    upper: np.ndarray
    conf: float
    kind: str


def _quantile_bounds(values: np.ndarray, conf: float) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < conf < 1:
        raise ValueError("confidence level must lie in (0, 1)")
    lo, hi = np.quantile(values, [(1 - conf) / 2, (1 + conf) / 2], axis=0)
    return lo, hi


def credible_interval(ensemble: PosteriorEnsemble, x: np.ndarray, conf: float = 0.95,
                      draws: np.ndarray | None = None) -> IntervalEstimate:
    g = ensemble.draws(x) if draws is None else draws
    lo, hi = _quantile_bounds(g, conf)
    return IntervalEstimate(lo, hi, conf, "credible")


def prediction_interval(ensemble: PosteriorEnsemble, x: np.ndarray, conf: float = 0.95, num_draws: int = 1000,
                        seed: int = 0, draws: np.ndarray | None = None) -> IntervalEstimate:
    """Quantiles of g_s(x) + eps with eps ~ N(0, sigma_s^2), cycling over kept samples."""
    if ensemble.is_classification:
        raise ValueError("prediction intervals are not defined for classification")
    g = ensemble.draws(x) if draws is None else draws
    s_idx = np.arange(num_draws) % g.shape[0]
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((num_draws, g.shape[1])) * np.sqrt(ensemble.sigma_sq[s_idx])[:, None]
    lo, hi = _quantile_bounds(g[s_idx] + noise, conf)
    return IntervalEstimate(lo, hi, conf, "predictive")


# ---------------------------------------------------------------------------
# error summaries


def error_summary(y: np.ndarray, yhat: np.ndarray, y_mean: float | None = None) -> dict[str, float]:
    """L1, L2, rmse and Pseudo-R^2 (with ``y_mean`` in the total sum of squares)."""
    y = np.asarray(y, dtype=float)
    e = y - np.asarray(yhat, dtype=float)
    l2 = float(e @ e)
    ybar = float(y.mean()) if y_mean is None else y_mean
    sst = float(((y - ybar) ** 2).sum())
    return {
        "L1": float(np.abs(e).sum()),
        "L2": l2,
        "rmse": float(np.sqrt(l2 / len(y))),
        "pseudo_r2": 1.0 - l2 / sst if sst > 0 else float("nan"),
    }


def confusion_matrix(y: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """2x2 counts, rows = truth (0, 1), columns = predicted (0, 1)."""
    out = np.zeros((2, 2), int)
    for a, b in zip(np.asarray(y, int), np.asarray(labels, int)):
        out[a, b] += 1
    return out


def misclassification(y: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(y, int) != np.asarray(labels, int)))


def in_sample_statistic(ensemble: PosteriorEnsemble) -> float:
    """Pseudo-R^2 for regression, misclassification error for classification."""
    frame = ensemble.frame
    res = predict(ensemble, frame.matrix)
    if frame.is_classification:
        return misclassification(frame.response, res.labels)
    return error_summary(frame.response, res.point)["pseudo_r2"]


# ---------------------------------------------------------------------------
# inclusion proportions and interactions


def inclusion_proportions(ensemble: PosteriorEnsemble) -> np.ndarray:
    counts = count_inclusions(ensemble.feat, ensemble.p)
    total = counts.sum()
    return counts / total if total > 0 else counts


def interaction_counts(ensemble: PosteriorEnsemble) -> np.ndarray:
    """Parent/child split pairs, with (j, k) and (k, j) added together off the diagonal."""
    raw = count_interactions(ensemble.feat, ensemble.right, ensemble.offsets, ensemble.p)
    folded = raw + raw.T
    np.fill_diagonal(folded, np.diag(raw))
    return folded


@dataclass
class ImportanceReport:
    names: list[str]
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    replicates: np.ndarray
    interactions: np.ndarray | None = None


def replicate_fits(frame: ModelFrame, hyper: Hyperparameters, replicates: int, seed: int,
                   threads: int = 1, stat: Callable[[PosteriorEnsemble], np.ndarray] = inclusion_proportions,
                   key: int = 0) -> np.ndarray:
    """Stack ``stat`` over independently seeded refits of the same frame."""
    seeds = [derive_seed(seed, key, r) for r in range(replicates)]
    return np.array(_parallel_map(lambda s: stat(fit(frame, hyper, s)), seeds, threads))


def importance_report(frame: ModelFrame, hyper: Hyperparameters, replicates: int = 20, seed: int = 0,
                      threads: int = 1, with_interactions: bool = True) -> ImportanceReport:
    """Inclusion proportions averaged over refits with a +-2 SE band."""
    def both(ens: PosteriorEnsemble):
        return inclusion_proportions(ens), interaction_counts(ens)

    seeds = [derive_seed(seed, 0, r) for r in range(replicates)]
    out = _parallel_map(lambda s: both(fit(frame, hyper, s)), seeds, threads)
    props = np.array([o[0] for o in out])
    mean = props.mean(axis=0)
    se = props.std(axis=0, ddof=1) / np.sqrt(replicates) if replicates > 1 else np.zeros_like(mean)
    inter = np.mean([o[1] for o in out], axis=0) if with_interactions else None
    return ImportanceReport(list(frame.column_names), mean, mean - 2 * se, mean + 2 * se, props, inter)


# ---------------------------------------------------------------------------
# partial dependence


@njit(cache=True, nogil=True)
def _pdp_sample_means(feat, split, mia, right, leaf, offsets, m, x, j, v, out):
    """Per-sample average over rows of the fit with column j set to v."""
    n_samples = (offsets.shape[0] - 1) // m
    n = x.shape[0]
    for s in range(n_samples):
        total = 0.0
        for i in range(n):
            for t in range(m):
                node = offsets[s * m + t]
                while feat[node] >= 0:
                    xv = v if feat[node] == j else x[i, feat[node]]
                    if goes_left_value(xv, split[node], mia[node]):
                        node += 1
                    else:
                        node += right[node]
                total += leaf[node]
        out[s] = total / n


@dataclass
class PartialDependence:
    feature: str
    percentiles: tuple
    grid: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    per_sample: np.ndarray = field(repr=False)


def partial_dependence(ensemble: PosteriorEnsemble, feature: int | str,
                       percentiles: Sequence[float] = PDP_PERCENTILES, band: float = 0.95,
                       threads: int = 1) -> PartialDependence:
    """Average fit over the training rows with one column held at each grid value.

    Classification stays on the probit scale.
    """
    frame = ensemble.frame
    j = frame.column_names.index(feature) if isinstance(feature, str) else int(feature)
    if not 0 <= j < frame.p:
        raise DataError(f"feature index {j} out of range")
    col = frame.matrix[:, j]
    col = col[~np.isnan(col)]
    if col.size == 0 or col.min() == col.max():
        raise DataError(f"feature {frame.column_names[j]!r} is constant; no partial dependence grid")
    grid = np.percentile(col, percentiles)
    x = np.ascontiguousarray(frame.matrix)
    per = np.empty((len(grid), ensemble.num_samples))
    args = (ensemble.feat, ensemble.split, ensemble.mia, ensemble.right, ensemble.leaf,
            ensemble.offsets, ensemble.num_trees, x, j)

    def one(g: int) -> None:
        _pdp_sample_means(*args, float(grid[g]), per[g])

    _parallel_map(one, list(range(len(grid))), threads)
    lo, hi = np.quantile(per, [(1 - band) / 2, (1 + band) / 2], axis=1)
    return PartialDependence(frame.column_names[j], tuple(percentiles), grid, per.mean(axis=1), lo, hi, per)


# ---------------------------------------------------------------------------
# permutation tests


@dataclass
class CovImportanceResult:
    covariates: list[str]
    statistic: str
    observed: float
    null: np.ndarray
    p_value: float


def cov_importance_test(frame: ModelFrame, hyper: Hyperparameters, covariates: Iterable[str] | str | None = None,
                        permutations: int = 100, seed: int = 0, threads: int = 1) -> CovImportanceResult:
    """Permutation test of a covariate set (or, with ``covariates=None``, the whole model).

    Named covariates are permuted jointly; a factor name permutes all of its
    dummies. ``"ALL"`` permutes every predictor jointly. ``None`` permutes
    the response. The p-value is the share of null builds that fit strictly
    better than the observed build.
    """
    if permutations < 1:
        raise ValueError("need at least one permutation")
    if covariates is None:
        names = ["RESPONSE"]
        cols: list[int] | None = None
    elif covariates == "ALL":
        names = ["ALL"]
        cols = list(range(frame.p))
    else:
        names = [covariates] if isinstance(covariates, str) else list(covariates)
        cols = sorted({c for nm in names for c in frame.column_index(nm)})
    observed = in_sample_statistic(fit(frame, hyper, derive_seed(seed, 1)))

    def null_stat(b: int) -> float:
        pseed = derive_seed(seed, 2, b)
        permuted = permute_response(frame, pseed) if cols is None else permute_columns(frame, cols, pseed)
        return in_sample_statistic(fit(permuted, hyper, derive_seed(seed, 3, b)))

    null = np.array(_parallel_map(null_stat, list(range(permutations)), threads))
    if frame.is_classification:
        p = float(np.mean(null < observed))
        stat = "misclassification"
    else:
        p = float(np.mean(null > observed))
        stat = "pseudo_r2"
    return CovImportanceResult(names, stat, float(observed), null, p)


# ---------------------------------------------------------------------------
# variable selection


@dataclass
class VarSelectionResult:
    names: list[str]
    observed: np.ndarray
    null: np.ndarray
    alpha: float
    local: list[int]
    global_max: list[int]
    global_se: list[int]
    local_thresholds: np.ndarray
    global_max_threshold: float
    global_se_multiplier: float

    def selected(self, method: str) -> list[int]:
        return {"local": self.local, "global_max": self.global_max, "global_se": self.global_se}[method]

    def selected_names(self, method: str) -> list[str]:
        return [self.names[j] for j in self.selected(method)]


METHODS = ("local", "global_max", "global_se")


def _upper_order_stat(values: np.ndarray, level: float, axis: int = 0) -> np.ndarray:
    """The ceil(level * (P + 1))-th smallest of P null values (capped at the largest).

    An exchangeable observed value exceeds it with probability at most
    1 - level.
    """
    s = np.sort(values, axis=axis)
    k = min(int(np.ceil(level * (s.shape[axis] + 1) - 1e-9)), s.shape[axis]) - 1
    return np.take(s, max(k, 0), axis=axis)


def selection_thresholds(observed: np.ndarray, null: np.ndarray, alpha: float):
    """Apply the three threshold rules to observed and null inclusion proportions."""
    local_thr = _upper_order_stat(null, 1 - alpha, axis=0)
    gmax_thr = float(_upper_order_stat(null.max(axis=1), 1 - alpha))
    mean = null.mean(axis=0)
    sd = null.std(axis=0, ddof=1) if null.shape[0] > 1 else np.zeros(null.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, (null - mean) / np.where(sd > 0, sd, 1.0), -np.inf)
    worst = z.max(axis=1)
    worst = worst[np.isfinite(worst)]
    mult = float(_upper_order_stat(worst, 1 - alpha)) if worst.size else 0.0
    se_thr = mean + mult * sd
    local = [int(j) for j in np.flatnonzero(observed > local_thr)]
    gmax = [int(j) for j in np.flatnonzero(observed > gmax_thr)]
    gse = [int(j) for j in np.flatnonzero(observed > se_thr)]
    return local, gmax, gse, local_thr, gmax_thr, mult


def var_selection(frame: ModelFrame, hyper: Hyperparameters, permutations: int = 100, alpha: float = 0.05,
                  replicates: int = 5, num_trees: int | None = 20, seed: int = 0,
                  threads: int = 1) -> VarSelectionResult:
    """Permutation-null variable selection with Local, Global Max and Global SE thresholds.

    Observed proportions average ``replicates`` builds; every null draw
    averages the same number of builds on one response permutation so that
    observed and null proportions share a distribution under no signal.
    """
    if permutations < 1:
        raise ValueError("need at least one permutation")
    h = hyper if num_trees is None else hyper.with_(num_trees=num_trees)
    observed = replicate_fits(frame, h, replicates, seed, threads, key=0).mean(axis=0)

    def null_props(b: int) -> np.ndarray:
        permuted = permute_response(frame, derive_seed(seed, 1, b))
        return replicate_fits(permuted, h, replicates, derive_seed(seed, 2, b), 1).mean(axis=0)

    null = np.array(_parallel_map(null_props, list(range(permutations)), threads))
    local, gmax, gse, lthr, gthr, mult = selection_thresholds(observed, null, alpha)
    return VarSelectionResult(list(frame.column_names), observed, null, alpha, local, gmax, gse, lthr, gthr, mult)


@dataclass
class VarSelectionCVResult:
    best_method: str
    selected: list[int]
    selected_names: list[str]
    fold_scores: dict[str, list[float]]
    mean_scores: dict[str, float]


def _holdout_score(train: ModelFrame, test: ModelFrame, cols: list[int], hyper: Hyperparameters,
                   seed: int) -> float:
    if not cols:
        if train.is_classification:
            guess = int(train.response.mean() >= 0.5)
            return misclassification(test.response, np.full(test.n, guess))
        return error_summary(test.response, np.full(test.n, train.response.mean()))["rmse"]
    ens = fit(train.select_columns(cols), hyper, seed)
    res = predict(ens, test.matrix[:, cols])
    if train.is_classification:
        return misclassification(test.response, res.labels)
    return error_summary(test.response, res.point)["rmse"]


def var_selection_cv(frame: ModelFrame, hyper: Hyperparameters, folds: int = 5, permutations: int = 100,
                     alpha: float = 0.05, replicates: int = 5, num_trees: int | None = 20, seed: int = 0,
                     threads: int = 1) -> VarSelectionCVResult:
    """Pick the threshold rule with the best held-out score, then apply it to all data."""
    assign = kfold_split(frame.n, folds, derive_seed(seed, 0))
    scores: dict[str, list[float]] = {m: [] for m in METHODS}
    for k in range(1, folds + 1):
        test_rows = assign.rows(k)
        train_rows = np.flatnonzero(assign.fold_index != k)
        train, test = frame.subset(train_rows), frame.subset(test_rows)
        vs = var_selection(train, hyper, permutations, alpha, replicates, num_trees,
                           derive_seed(seed, 1, k), threads)
        for method in METHODS:
            scores[method].append(_holdout_score(train, test, vs.selected(method), hyper,
                                                 derive_seed(seed, 2, k)))
    means = {m: float(np.mean(v)) for m, v in scores.items()}
    best = min(METHODS, key=lambda m: means[m])
    full = var_selection(frame, hyper, permutations, alpha, replicates, num_trees, derive_seed(seed, 3), threads)
    sel = full.selected(best)
    return VarSelectionCVResult(best, sel, [frame.column_names[j] for j in sel], scores, means)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CVResult:
    L1: float
    L2: float
    rmse: float
    pseudo_r2: float
    predictions: np.ndarray
    folds: np.ndarray
    confusion: np.ndarray | None = None
    misclassification: float | None = None

    def summary(self) -> dict:
        out = {"L1": self.L1, "L2": self.L2, "rmse": self.rmse, "pseudo_r2": self.pseudo_r2}
        if self.confusion is not None:
            out["confusion"] = self.confusion.tolist()
            out["misclassification"] = self.misclassification
        return out


def k_fold_cv(frame: ModelFrame, hyper: Hyperparameters, k: int = 5, seed: int = 0, threads: int = 1) -> CVResult:
    """Out-of-fold predictions and error summaries."""
    assign = kfold_split(frame.n, k, derive_seed(seed, 0))
    preds = np.empty(frame.n)

    def one(fold: int):
        test_rows = assign.rows(fold)
        train = frame.subset(np.flatnonzero(assign.fold_index != fold))
        return test_rows, predict(fit(train, hyper, derive_seed(seed, 1, fold)), frame.matrix[test_rows])

    for rows, res in _parallel_map(one, list(range(1, k + 1)), threads):
        preds[rows] = res.point
    stats = error_summary(frame.response, preds, float(frame.response.mean()))
    out = CVResult(stats["L1"], stats["L2"], stats["rmse"], stats["pseudo_r2"], preds, assign.fold_index)
    if frame.is_classification:
        labels = (preds >= hyper.prob_rule_class).astype(int)
        out.confusion = confusion_matrix(frame.response, labels)
        out.misclassification = misclassification(frame.response, labels)
    return out


DEFAULT_GRID = {
    "k": (2.0, 3.0, 5.0),
    "nu_q": ((3.0, 0.9), (3.0, 0.99), (10.0, 0.75)),
    "num_trees": (50, 200),
}


@dataclass
class GridCell:
    k: float
    nu: float | None
    q: float | None
    num_trees: int
    score: float


@dataclass
class GridResult:
    best: Hyperparameters
    cells: list[GridCell]
    metric: str


def cv_grid_search(frame: ModelFrame, hyper: Hyperparameters, grid: dict | None = None, folds: int = 5,
                   seed: int = 0, threads: int = 1) -> GridResult:
    """Full factorial search; the winner minimises out-of-fold rmse (misclassification)."""
    grid = dict(DEFAULT_GRID if grid is None else grid)
    nu_q = [(None, None)] if frame.is_classification else list(grid.get("nu_q", [(hyper.nu, hyper.q)]))
    cells = list(itertools.product(grid.get("k", [hyper.k]), nu_q, grid.get("num_trees", [hyper.num_trees])))
    if not cells:
        raise ValueError("empty grid")
    results = []
    for k, (nu, q), m in cells:
        changes = {"k": float(k), "num_trees": int(m)}
        if nu is not None:
            changes.update(nu=float(nu), q=float(q))
        cv = k_fold_cv(frame, hyper.with_(**changes), folds, seed, threads)
        score = cv.misclassification if frame.is_classification else cv.rmse
        results.append(GridCell(float(k), nu, q, int(m), float(score)))
    best = min(range(len(results)), key=lambda i: results[i].score)
    cell = results[best]
    changes = {"k": cell.k, "num_trees": cell.num_trees}
    if cell.nu is not None:
        changes.update(nu=cell.nu, q=cell.q)
    return GridResult(hyper.with_(**changes), results, "misclassification" if frame.is_classification else "rmse")


def rmse_by_num_trees(frame: ModelFrame, hyper: Hyperparameters, tree_counts: Sequence[int] = (5, 10, 20, 50, 100, 200),
                      replicates: int = 3, holdout: float = 0.2, seed: int = 0, threads: int = 1) -> list[float]:
    """Mean holdout rmse per tree count over random 80/20 splits."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    out = []
    n_test = max(1, int(round(holdout * frame.n)))
    splits = []
    for r in range(replicates):
        perm = np.random.default_rng(derive_seed(seed, 0, r)).permutation(frame.n)
        splits.append((perm[n_test:], perm[:n_test]))
    for m in tree_counts:
        h = hyper.with_(num_trees=int(m))

        def one(r: int) -> float:
            tr, te = splits[r]
            ens = fit(frame.subset(tr), h, derive_seed(seed, 1, r))
            return error_summary(frame.response[te], predict(ens, frame.matrix[te]).point)["rmse"]

        out.append(float(np.mean(_parallel_map(one, list(range(replicates)), threads))))
    return out
