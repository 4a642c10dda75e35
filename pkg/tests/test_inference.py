import numpy as np
import pytest
from scipy.stats import norm

from sumtrees.dataset import DataError, ModelFrame, friedman_function, generate_friedman, kfold_split
from sumtrees.ensemble import PosteriorEnsemble
from sumtrees.inference import (
    DEFAULT_GRID,
    PDP_PERCENTILES,
    cov_importance_test,
    credible_interval,
    cv_grid_search,
    derive_seed,
    error_summary,
    fit,
    importance_report,
    inclusion_proportions,
    interaction_counts,
    k_fold_cv,
    partial_dependence,
    predict,
    prediction_interval,
    rmse_by_num_trees,
    selection_thresholds,
    var_selection,
    var_selection_cv,
)
from sumtrees.priors import CalibratedPriors, Hyperparameters


def hand_ensemble(trees, samples=3, p=3, sigma_sq=1.0, task="regression", **hyper):
    """Ensemble repeating the same flat trees in every sample.

    Each tree is a list of (feature, split, mia, right, leaf) node tuples in preorder.
    """
    feat, split, mia, right, leaf, offsets = [], [], [], [], [], []
    for _ in range(samples):
        for tree in trees:
            offsets.append(len(feat))
            for f_, s_, m_, r_, v_ in tree:
                feat.append(f_)
                split.append(s_)
                mia.append(m_)
                right.append(r_)
                leaf.append(v_)
    offsets.append(len(feat))
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 10).astype(float) if task == "classification" else rng.normal(size=10)
    frame = ModelFrame(rng.uniform(size=(10, p)), [f"x{j + 1}" for j in range(p)], y, task=task)
    h = Hyperparameters(num_trees=len(trees), **hyper)
    return PosteriorEnsemble(
        feat=np.array(feat, np.int32), split=np.array(split, float), mia=np.array(mia, np.int8),
        right=np.array(right, np.int32), leaf=np.array(leaf, float), offsets=np.array(offsets, np.int64),
        num_trees=len(trees), sigma_sq=np.full(samples, sigma_sq), hyper=h,
        priors=CalibratedPriors(0.0, 1.0, 1.0, 1.0, task == "classification"), frame=frame)


LEAF = lambda v: (-1, np.nan, 0, 0, v)  # noqa: E731


def test_constant_model_prediction():
    ens = hand_ensemble([[LEAF(0.25)]] * 4)
    res = predict(ens, np.random.default_rng(1).uniform(size=(6, 3)))
    np.testing.assert_allclose(res.point, 1.0)
    assert res.draws.shape == (3, 6)


def test_zero_classifier_is_a_coin():
    ens = hand_ensemble([[LEAF(0.0)]], task="classification")
    res = predict(ens, np.zeros((2, 3)))
    np.testing.assert_array_equal(res.probabilities, 0.5)
    np.testing.assert_array_equal(res.labels, 1)
    strict = hand_ensemble([[LEAF(0.0)]], task="classification", prob_rule_class=0.6)
    np.testing.assert_array_equal(predict(strict, np.zeros((2, 3))).labels, 0)


def test_prediction_rejects_wrong_width_and_missing():
    ens = hand_ensemble([[LEAF(0.0)]])
    with pytest.raises(ValueError):
        predict(ens, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        predict(ens, np.array([[np.nan, 0, 0]]))


def test_noiseless_friedman_fit():
    train = generate_friedman(500, p=10, sigma=0.0, seed=1)
    test = generate_friedman(500, p=10, sigma=0.0, seed=2)
    ens = fit(train, Hyperparameters(), seed=1)
    rmse = error_summary(test.response, predict(ens, test.matrix).point)["rmse"]
    assert rmse < 0.2 * test.response.std()


def test_threaded_prediction_bit_identical(small_model, small_friedman):
    a = predict(small_model, small_friedman.matrix)
    b = predict(small_model, small_friedman.matrix, threads=4)
    np.testing.assert_array_equal(a.draws, b.draws)
    np.testing.assert_array_equal(predict(small_model, small_friedman.matrix).draws, a.draws)


def test_degenerate_posterior_collapses_intervals():
    ens = hand_ensemble([[LEAF(2.0)]], samples=5, sigma_sq=1e-300)
    x = np.zeros((3, 3))
    for iv in (credible_interval(ens, x), prediction_interval(ens, x)):
        np.testing.assert_allclose(iv.lower, 2.0)
        np.testing.assert_allclose(iv.upper, 2.0)


def test_credible_inside_predictive(small_model, small_friedman):
    x = small_friedman.matrix
    cred = credible_interval(small_model, x, 0.95)
    pred = prediction_interval(small_model, x, 0.95, num_draws=1000, seed=4)
    # Monte Carlo standard error of a 2.5% quantile from 1000 draws, normal approximation
    g = small_model.draws(x)
    sd = np.sqrt(g.var(axis=0) + small_model.sigma_sq.mean())
    se = np.sqrt(0.025 * 0.975 / 1000) / norm.pdf(norm.ppf(0.025)) * sd
    assert np.all(pred.lower - 3 * se <= cred.lower)
    assert np.all(cred.upper <= pred.upper + 3 * se)
    assert np.all(cred.lower <= cred.upper)


def test_prediction_interval_refused_for_classification():
    ens = hand_ensemble([[LEAF(0.0)]], task="classification")
    with pytest.raises(ValueError):
        prediction_interval(ens, np.zeros((1, 3)))


def test_masking_strong_predictor_widens_credible_interval():
    rng = np.random.default_rng(12)
    x = rng.uniform(size=(300, 3))
    y = 6 * x[:, 0] + x[:, 1] + rng.normal(scale=0.3, size=300)
    x[rng.random(300) < 0.1, 0] = np.nan
    frame = ModelFrame(x, ["a", "b", "c"], y)
    ens = fit(frame, Hyperparameters(use_missing_data=True), seed=3)
    rows = rng.uniform(size=(50, 3))
    masked = rows.copy()
    masked[:, 0] = np.nan
    w_full = np.diff(np.vstack([credible_interval(ens, rows).lower, credible_interval(ens, rows).upper]), axis=0)
    m = credible_interval(ens, masked)
    assert np.mean((m.upper - m.lower) > w_full[0]) >= 0.8


def test_inclusion_proportions_hand_counts():
    assert np.all(inclusion_proportions(hand_ensemble([[LEAF(0)]] * 2)) == 0)
    one_split = [(1, 0.5, 1, 2, 0.0), LEAF(1.0), LEAF(2.0)]
    np.testing.assert_array_equal(inclusion_proportions(hand_ensemble([one_split])), [0, 1, 0])


def test_interaction_hand_count():
    assert np.all(interaction_counts(hand_ensemble([[LEAF(0)]])) == 0)
    # root on x1, its left child on x2
    tree = [(0, 0.5, 1, 4, 0.0), (1, 0.5, 1, 2, 0.0), LEAF(1.0), LEAF(2.0), LEAF(3.0)]
    counts = interaction_counts(hand_ensemble([tree], samples=1))
    expected = np.zeros((3, 3))
    expected[0, 1] = expected[1, 0] = 1
    np.testing.assert_array_equal(counts, expected)


def test_self_interaction_on_diagonal():
    tree = [(0, 0.5, 1, 4, 0.0), (0, 0.2, 1, 2, 0.0), LEAF(1.0), LEAF(2.0), LEAF(3.0)]
    counts = interaction_counts(hand_ensemble([tree], samples=2))
    assert counts[0, 0] == 2 and counts.sum() == 2


def test_friedman_signal_features_lead_inclusion():
    hits = 0
    for seed in range(10):
        fr = generate_friedman(500, p=10, sigma=1.0, seed=100 + seed)
        props = inclusion_proportions(fit(fr, Hyperparameters(num_trees=20), seed=seed))
        hits += set(np.argsort(props)[-5:]) == {0, 1, 2, 3, 4}
    assert hits >= 9


def test_importance_report_band(small_friedman):
    rep = importance_report(small_friedman, Hyperparameters(num_trees=10, burn_in=30, post_burn_in=50),
                            replicates=3, seed=1)
    assert rep.replicates.shape == (3, small_friedman.p)
    np.testing.assert_allclose(rep.replicates.sum(axis=1), 1.0)
    assert np.all(rep.lower <= rep.mean) and np.all(rep.mean <= rep.upper)
    np.testing.assert_array_equal(rep.interactions, rep.interactions.T)


def test_pdp_of_constant_model_is_flat():
    ens = hand_ensemble([[LEAF(0.5)], [LEAF(0.25)]])
    pd_ = partial_dependence(ens, 0)
    assert len(pd_.grid) == 11 == len(PDP_PERCENTILES)
    np.testing.assert_allclose(pd_.estimate, 0.75)


def test_pdp_linear_truth_slope():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(400, 3))
    frame = ModelFrame(x, ["x1", "x2", "x3"], x[:, 0].copy())
    ens = fit(frame, Hyperparameters(), seed=5)
    pd_ = partial_dependence(ens, "x1")
    slope = np.polyfit(pd_.grid, pd_.estimate, 1)[0]
    assert slope == pytest.approx(1.0, rel=0.1)
    assert np.all(pd_.lower <= pd_.estimate) and np.all(pd_.estimate <= pd_.upper)


def test_pdp_constant_feature_rejected():
    frame = ModelFrame(np.column_stack([np.ones(20), np.arange(20.0)]), ["c", "x"], np.arange(20.0))
    ens = fit(frame, Hyperparameters(num_trees=5, burn_in=10, post_burn_in=10))
    with pytest.raises(DataError):
        partial_dependence(ens, "c")


def test_permutation_test_on_strong_signal():
    fr = generate_friedman(100, p=5, seed=8)
    h = Hyperparameters(num_trees=20, burn_in=100, post_burn_in=200)
    res = cov_importance_test(fr, h, None, permutations=100, seed=2)
    assert res.p_value == np.count_nonzero(res.null > res.observed) / 100
    assert 0 <= res.p_value <= 0.01
    assert res.covariates == ["RESPONSE"]


def test_permutation_test_noise_column():
    fr = generate_friedman(100, p=6, seed=9)
    h = Hyperparameters(num_trees=10, burn_in=50, post_burn_in=50)
    res = cov_importance_test(fr, h, ["x6"], permutations=10, seed=1)
    assert 0 <= res.p_value <= 1 and len(res.null) == 10
    with pytest.raises(DataError):
        cov_importance_test(fr, h, ["nope"], permutations=2)


def test_thresholds_hand_case():
    rng = np.random.default_rng(0)
    null = rng.uniform(0, 0.1, size=(99, 4))
    observed = np.array([0.5, 0.09, 0.0, 0.2])
    local, gmax, gse, lthr, gthr, mult = selection_thresholds(observed, null, 0.05)
    # 95th of 99 sorted values is the local cut
    np.testing.assert_allclose(lthr, np.sort(null, axis=0)[94])
    assert gthr == np.sort(null.max(axis=1))[94]
    assert 0 in local and 3 in local and 2 not in local
    assert set(gmax) <= set(gse) <= set(local)


def test_thresholds_identical_sets_tie():
    null = np.tile([0.1, 0.1], (20, 1)) + np.random.default_rng(1).normal(0, 1e-3, (20, 2))
    local, gmax, gse, *_ = selection_thresholds(np.array([0.9, 0.0]), null, 0.05)
    assert local == gmax == gse == [0]


def test_var_selection_friedman_small():
    # null proportions sit near 1/p, so the noise block has to be wide
    fr = generate_friedman(200, p=40, seed=1)
    h = Hyperparameters(burn_in=100, post_burn_in=200)
    res = var_selection(fr, h, permutations=20, replicates=1, seed=3)
    assert {0, 1, 2, 3, 4} <= set(res.local)
    assert set(res.global_max) <= set(res.global_se) <= set(res.local)
    assert res.null.shape == (20, 40)


def test_var_selection_cv_picks_signal():
    fr = generate_friedman(250, p=40, seed=6)
    h = Hyperparameters(burn_in=100, post_burn_in=200)
    res = var_selection_cv(fr, h, folds=3, permutations=20, replicates=1, seed=2)
    assert res.best_method in ("local", "global_max", "global_se")
    assert {0, 1, 2, 3, 4} <= set(res.selected)
    assert all(len(v) == 3 for v in res.fold_scores.values())


@pytest.mark.parametrize("yhat,expected", [
    ((1, 2, 4), dict(L1=1, L2=1, rmse=np.sqrt(1 / 3), pseudo_r2=0.5)),
    ((1, 2, 3), dict(L1=0, L2=0, rmse=0, pseudo_r2=1)),
    ((2, 2, 2), dict(L1=2, L2=2, rmse=np.sqrt(2 / 3), pseudo_r2=0)),
])
def test_error_summary_arithmetic(yhat, expected):
    got = error_summary(np.array([1.0, 2, 3]), np.array(yhat, float))
    assert got == pytest.approx(expected)


def test_kfold_cv_out_of_fold_coverage(small_friedman, quick_hyper):
    cv = k_fold_cv(small_friedman, quick_hyper, k=4, seed=1)
    assign = kfold_split(small_friedman.n, 4, derive_seed(1, 0))
    np.testing.assert_array_equal(cv.folds, assign.fold_index)
    assert sorted(np.concatenate([assign.rows(f) for f in range(1, 5)])) == list(range(small_friedman.n))
    assert np.all(np.isfinite(cv.predictions))
    assert cv.summary()["rmse"] == pytest.approx(np.sqrt(cv.L2 / small_friedman.n))


def test_kfold_cv_classification_confusion():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(90, 2))
    fr = ModelFrame(x, ["a", "b"], (x[:, 0] > 0.5).astype(float), task="classification")
    cv = k_fold_cv(fr, Hyperparameters(num_trees=10, burn_in=50, post_burn_in=50), k=3)
    assert cv.confusion.sum() == 90
    assert cv.misclassification < 0.2


def test_grid_defaults_contain_reported_winner():
    assert 2.0 in DEFAULT_GRID["k"] and (3.0, 0.9) in DEFAULT_GRID["nu_q"] and 200 in DEFAULT_GRID["num_trees"]


def test_grid_search_argmin(small_friedman, quick_hyper):
    res = cv_grid_search(small_friedman, quick_hyper, {"k": (2.0, 3.0), "num_trees": (5, 10)}, folds=3)
    assert len(res.cells) == 4
    best = min(c.score for c in res.cells)
    assert all(best <= c.score for c in res.cells)
    winner = [c for c in res.cells if c.score == best][0]
    assert (res.best.k, res.best.num_trees) == (winner.k, winner.num_trees)
    single = cv_grid_search(small_friedman, quick_hyper, {"k": (3.0,), "num_trees": (7,)}, folds=3)
    assert (single.best.k, single.best.num_trees) == (3.0, 7)


def test_rmse_by_num_trees_shape(small_friedman, quick_hyper):
    assert len(rmse_by_num_trees(small_friedman, quick_hyper, [50], replicates=1)) == 1
    assert len(rmse_by_num_trees(small_friedman, quick_hyper, [2, 4, 6], replicates=1)) == 3


def test_rmse_plateau_after_fifty_trees():
    fr = generate_friedman(400, p=10, seed=21)
    out = rmse_by_num_trees(fr, Hyperparameters(), [50, 200], replicates=2, seed=4)
    assert out[0] == pytest.approx(out[1], rel=0.15)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(5, 1, 2) == derive_seed(5, 1, 2)
    assert len({derive_seed(5, 1, k) for k in range(100)}) == 100
    assert derive_seed(5, 1) != derive_seed(6, 1)
