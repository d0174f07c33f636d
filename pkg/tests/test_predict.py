import numpy as np
import pytest
from scipy.stats import spearmanr

from poissonfm import (
    BetaPosterior,
    DomainError,
    FitConfig,
    ModelConfig,
    Query,
    ThetaPosterior,
    expected_unobserved,
    fit,
    fold_in,
    predict_response,
    rank_related,
    run_query,
    sample_dataset,
)


def fitted_model(seed=41, n=60, d=30, k=3, c=0.5, a=1.0, b=1.0, max_iters=600):
    # Fit-time shapes default to 1: sub-1 shapes make the row-local
    # subproblem multimodal, which breaks replay-style comparisons.
    mcfg = ModelConfig(k, a, b, seed=seed)
    gen = ModelConfig(k, 0.3, 0.3, seed=seed)
    rng = np.random.default_rng(seed)
    eta = rng.standard_normal(k)
    data, y, theta_t, beta_t = sample_dataset(gen, n, d, c, eta, 0.1, seed=seed)
    res = fit(data, y, mcfg, FitConfig(max_iters=max_iters, rel_tol=1e-10))
    return mcfg, data, y, res


class TestQueryType:
    def test_full_row_includes_explicit_zeros(self):
        q = Query.full_row(5, [1, 3], [4, 2])
        assert q.cols.tolist() == [0, 1, 2, 3, 4]
        assert q.counts.tolist() == [0, 4, 0, 2, 0]
        assert q.unobserved.size == 0

    def test_subset_leaves_rest_unobserved(self):
        q = Query.subset(6, [4, 1], [0, 7])
        assert q.cols.tolist() == [1, 4]
        assert q.counts.tolist() == [7, 0]
        assert q.unobserved.tolist() == [0, 2, 3, 5]

    def test_validation(self):
        with pytest.raises(DomainError):
            Query(4, [0, 0], [1, 2])  # duplicate columns
        with pytest.raises(DomainError):
            Query(4, [5], [1])  # out of range
        with pytest.raises(DomainError):
            Query(4, [1], [-2])  # negative count
        with pytest.raises(DomainError):
            Query.subset(4, [], [])  # empty subset


class TestFoldIn:
    def test_k1_closed_form(self):
        a, c, x = 0.4, 1.3, 5
        beta = BetaPosterior(np.array([[2.0]]), np.array([[2.0]]))  # E[beta] = 1
        cfg = ModelConfig(1, a, 0.3)
        res = fold_in(Query.from_dense([x]), beta, cfg, c)
        assert res.converged
        assert res.mean[0] == pytest.approx((a + x) / (a * c + 1.0), rel=1e-12)

    def test_all_zero_query_shrinks_prior_by_loading_mass(self):
        rng = np.random.default_rng(3)
        k, d = 3, 6
        beta = BetaPosterior(rng.uniform(0.5, 2, (k, d)), rng.uniform(0.5, 2, (k, d)))
        cfg = ModelConfig(k, 0.5, 0.3)
        c = 0.9
        res = fold_in(Query.from_dense(np.zeros(d, dtype=int)), beta, cfg, c)
        expected = 0.5 / (0.5 * c + beta.mean.sum(axis=1))
        np.testing.assert_allclose(res.mean, expected, rtol=1e-12)

    def test_empty_query_returns_prior_with_flag(self):
        beta = BetaPosterior(np.ones((2, 4)), np.ones((2, 4)))
        cfg = ModelConfig(2, 0.7, 0.3)
        res = fold_in(Query(4, [], []), beta, cfg, 1.1)
        assert res.empty_query
        np.testing.assert_allclose(res.gamma, [0.7, 0.7])
        np.testing.assert_allclose(res.chi, [0.77, 0.77])

    def test_subset_mass_restricted_to_observed_columns(self):
        rng = np.random.default_rng(5)
        k, d = 2, 8
        beta = BetaPosterior(rng.uniform(0.5, 2, (k, d)), rng.uniform(0.5, 2, (k, d)))
        cfg = ModelConfig(k, 0.4, 0.3)
        sub = Query.subset(d, [2, 5], [0, 0])
        res = fold_in(sub, beta, cfg, 1.0)
        np.testing.assert_allclose(
            res.chi, 0.4 + beta.mean[:, [2, 5]].sum(axis=1), rtol=1e-12
        )

    def test_training_row_self_consistency(self):
        mcfg, data, y, res = fitted_model()
        assert res.converged
        for i in range(data.n_rows):
            sl = data.row_slice(i)
            q = Query.full_row(data.n_cols, data.cols[sl], data.counts[sl])
            folded = fold_in(q, res.beta, mcfg, res.regression.c)
            rel = np.max(
                np.abs(folded.gamma - res.theta.gamma[i]) / res.theta.gamma[i]
            )
            assert rel < 1e-6

    def test_deterministic(self):
        mcfg, data, y, res = fitted_model(seed=43, n=30, d=15)
        q = Query.subset(data.n_cols, [0, 4, 9], [3, 0, 1])
        r1 = fold_in(q, res.beta, mcfg, res.regression.c)
        r2 = fold_in(q, res.beta, mcfg, res.regression.c)
        np.testing.assert_array_equal(r1.gamma, r2.gamma)
        np.testing.assert_array_equal(r1.chi, r2.chi)

    def test_dimension_mismatch(self):
        beta = BetaPosterior(np.ones((2, 4)), np.ones((2, 4)))
        with pytest.raises(DomainError):
            fold_in(Query.from_dense([1, 2]), beta, ModelConfig(2, 0.3, 0.3), 1.0)


class TestPredictResponse:
    def test_zero_eta(self):
        assert predict_response(np.array([1.0, 2.0]), np.zeros(2)) == 0.0

    def test_scalar_product(self):
        assert predict_response(np.array([2.0]), np.array([3.0])) == 6.0

    def test_dot_oracle(self):
        rng = np.random.default_rng(7)
        theta = rng.uniform(0.1, 3.0, 4)
        eta = rng.standard_normal(4)
        oracle = sum(theta[k] * eta[k] for k in range(4))
        assert predict_response(theta, eta) == pytest.approx(oracle, abs=1e-12)

    def test_positive_scaling_linearity(self):
        rng = np.random.default_rng(11)
        theta = rng.uniform(0.1, 2.0, 5)
        eta = rng.standard_normal(5)
        for alpha in (0.0, 0.5, 3.0):
            assert predict_response(alpha * theta, eta) == pytest.approx(
                alpha * predict_response(theta, eta), rel=1e-12, abs=1e-12
            )


class TestExpectedUnobserved:
    def test_full_set_empty_result(self):
        beta = BetaPosterior(np.ones((2, 3)), np.ones((2, 3)))
        cols, vals = expected_unobserved(np.ones(2), beta, np.arange(3))
        assert cols.size == 0 and vals.size == 0

    def test_rank_one_structure(self):
        rng = np.random.default_rng(13)
        beta = BetaPosterior(rng.uniform(0.5, 2, (1, 6)), rng.uniform(0.5, 2, (1, 6)))
        theta = np.array([2.5])
        cols, vals = expected_unobserved(theta, beta, np.array([0, 1]))
        np.testing.assert_allclose(vals, 2.5 * beta.mean[0, 2:], rtol=1e-12)

    def test_factor_permutation_invariance(self):
        rng = np.random.default_rng(15)
        k, d = 4, 7
        beta = BetaPosterior(rng.uniform(0.5, 2, (k, d)), rng.uniform(0.5, 2, (k, d)))
        theta = rng.uniform(0.2, 2.0, k)
        cols, vals = expected_unobserved(theta, beta, np.array([1]))
        perm = rng.permutation(k)
        beta_p = BetaPosterior(beta.nu[perm], beta.lam[perm])
        cols_p, vals_p = expected_unobserved(theta[perm], beta_p, np.array([1]))
        np.testing.assert_array_equal(cols, cols_p)
        np.testing.assert_allclose(vals, vals_p, rtol=1e-12)

    def test_planted_model_spearman(self):
        # Predictions from a half-observed row should rank the held-out
        # columns nearly like the true unobserved rates.
        k, n, d = 5, 400, 50
        mcfg = ModelConfig(k, 0.3, 0.3, seed=101)
        data, _, theta_t, beta_t = sample_dataset(
            mcfg, n, d, 0.3, np.zeros(k), 0.0, seed=101
        )
        res = fit(data, None, mcfg, FitConfig(max_iters=80, rel_tol=1e-6))
        rng = np.random.default_rng(0)
        rhos = []
        for i in range(0, 40, 5):
            observed = np.sort(rng.choice(d, size=d // 2, replace=False))
            sl = data.row_slice(i)
            dense = np.zeros(d, dtype=int)
            dense[data.cols[sl]] = data.counts[sl]
            q = Query(d, observed, dense[observed])
            folded = fold_in(q, res.beta, mcfg, res.regression.c)
            cols, vals = expected_unobserved(folded.mean, res.beta, observed)
            true_rates = theta_t[i] @ beta_t[:, cols]
            rhos.append(spearmanr(vals, true_rates).statistic)
        assert float(np.mean(rhos)) > 0.9


class TestRankRelated:
    def test_top_n_zero(self):
        feats, insts = rank_related(
            np.ones(2), np.array([0, 1]), np.array([1.0, 2.0]), np.ones((3, 2)), 0
        )
        assert feats == [] and insts == []

    def test_identical_rows_tie_broken_by_index(self):
        tm = np.tile([1.0, 2.0], (4, 1))
        feats, insts = rank_related(
            np.array([1.0, 2.0]), np.array([5]), np.array([0.3]), tm, 3
        )
        assert [i for i, _ in insts] == [0, 1, 2]
        assert all(s == pytest.approx(1.0, rel=1e-12) for _, s in insts)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(19)
        k, n_train, n_un = 3, 12, 9
        theta_mean = rng.uniform(0.1, 2, k)
        tm = rng.uniform(0.1, 2, (n_train, k))
        cols = np.arange(n_un) * 2
        vals = rng.uniform(0, 5, n_un)
        feats, insts = rank_related(theta_mean, cols, vals, tm, 5)
        feat_oracle = sorted(
            zip(cols.tolist(), vals.tolist()), key=lambda t: (-t[1], t[0])
        )[:5]
        assert [c for c, _ in feats] == [c for c, _ in feat_oracle]
        cos = [
            float(tm[i] @ theta_mean / (np.linalg.norm(tm[i]) * np.linalg.norm(theta_mean)))
            for i in range(n_train)
        ]
        inst_oracle = sorted(range(n_train), key=lambda i: (-cos[i], i))[:5]
        assert [i for i, _ in insts] == inst_oracle

    def test_truncates_when_top_n_exceeds_items(self):
        feats, insts = rank_related(
            np.ones(2), np.array([0]), np.array([1.0]), np.ones((2, 2)), 10
        )
        assert len(feats) == 1 and len(insts) == 2


class TestRunQuery:
    def test_assembles_everything(self):
        mcfg, data, y, res = fitted_model(seed=47, n=40, d=20)
        q = Query.subset(data.n_cols, [0, 3, 7], [2, 0, 4])
        out = run_query(q, res.theta, res.beta, res.regression, mcfg, top_n=5)
        assert out.theta_mean.shape == (mcfg.n_factors,)
        assert out.unobserved_cols.size == data.n_cols - 3
        assert out.expected_counts.shape == out.unobserved_cols.shape
        assert len(out.top_features) == 5
        assert len(out.top_instances) == 5
        assert np.isfinite(out.predicted_response)
        assert not out.empty_query
        np.testing.assert_array_less(-1e-12, out.expected_counts)
