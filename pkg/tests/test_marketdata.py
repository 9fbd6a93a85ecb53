import datetime as dt
import math

import numpy as np
import pytest
from scipy import integrate, stats

from fluctcredit.ensemble import CorrelationModel, CovarianceSpec
from fluctcredit.marketdata import (
    CVM_CRITICAL_5PCT,
    NFit,
    NonMonotoneDatesError,
    NonPositivePriceError,
    PricePanel,
    ReturnPanel,
    UnparseableRowError,
    ZeroVarianceError,
    compute_returns,
    cramer_von_mises,
    estimate_covariance,
    estimate_N_variance_identity,
    export_prices,
    factor_correlation,
    fit_N_cramer_von_mises,
    fit_N_least_squares,
    homogeneous_summary,
    homogenized,
    ingest_prices,
    prices_from_returns,
    rotate_scale_returns,
    rotated_scaled_cdf,
    sample_rotated_scaled,
    synthetic_ensemble_returns,
    variance_of_square_norm,
    windowed_pairwise_aggregate,
)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestIngest:
    def test_well_formed(self, tmp_path):
        f = _write(tmp_path / "p.csv", "date,AAA,BBB\n2020-01-02,10,20\n2020-01-03,11,19\n2020-01-06,12,18\n")
        p = ingest_prices(f)
        assert p.tickers == ["AAA", "BBB"] and p.prices.shape == (2, 3)
        assert p.dates[0] == dt.date(2020, 1, 2)
        assert p.dropped == []

    def test_sparse_ticker_dropped(self, tmp_path):
        rows = ["date,AAA,BBB"]
        for i in range(10):
            rows.append(f"2020-01-{i + 1:02d},{100 + i},{'' if i % 2 else 50 + i}")
        p = ingest_prices(_write(tmp_path / "p.csv", "\n".join(rows) + "\n"), missing_threshold=0.10)
        assert p.tickers == ["AAA"] and p.dropped == ["BBB"]
        assert p.M == 10

    def test_small_gaps_removed_by_day(self, tmp_path):
        rows = ["date,AAA,BBB"] + [f"2020-02-{i + 1:02d},{100 + i},{'' if i == 3 else 50 + i}" for i in range(20)]
        p = ingest_prices(_write(tmp_path / "p.csv", "\n".join(rows) + "\n"))
        assert p.K == 2 and p.M == 19 and np.all(np.isfinite(p.prices))

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        panel = prices_from_returns(rng.normal(0, 0.01, (3, 40)), tickers=["X", "Y", "Z"])
        export_prices(panel, tmp_path / "a.csv")
        back = ingest_prices(tmp_path / "a.csv")
        assert back.tickers == panel.tickers and back.dates == panel.dates
        assert np.array_equal(back.prices, panel.prices)

    @pytest.mark.parametrize("text,err", [
        ("date,AAA\n2020-01-02,10\n2020-01-03,abc\n", UnparseableRowError),
        ("date,AAA\n2020-13-02,10\n", UnparseableRowError),
        ("date,AAA,BBB\n2020-01-02,10\n", UnparseableRowError),
        ("ticker,AAA\n2020-01-02,10\n", UnparseableRowError),
        ("", UnparseableRowError),
        ("date,AAA\n2020-01-03,10\n2020-01-02,11\n", NonMonotoneDatesError),
        ("date,AAA\n2020-01-02,10\n2020-01-02,11\n", NonMonotoneDatesError),
        ("date,AAA\n2020-01-02,10\n2020-01-03,0\n", NonPositivePriceError),
    ])
    def test_distinct_errors(self, tmp_path, text, err):
        with pytest.raises(err):
            ingest_prices(_write(tmp_path / "p.csv", text))


def _panel(prices):
    prices = np.atleast_2d(np.asarray(prices, dtype=float))
    days = [dt.date(2020, 1, 1) + dt.timedelta(days=i) for i in range(prices.shape[1])]
    return PricePanel([f"T{i}" for i in range(prices.shape[0])], days, prices)


class TestReturns:
    def test_constant(self):
        assert np.array_equal(compute_returns(_panel(np.full((2, 5), 7.0))).returns, np.zeros((2, 4)))

    def test_arithmetic(self):
        r = compute_returns(_panel([100.0, 110.0]), 1)
        assert r.returns.shape == (1, 1) and r.returns[0, 0] == pytest.approx(0.10, abs=1e-15)

    def test_interval_too_long(self):
        with pytest.raises(ValueError):
            compute_returns(_panel([1.0, 2.0, 3.0]), 3)

    def test_gbm_mean(self):
        rng = np.random.default_rng(5)
        mu, sig, M = 5e-4, 0.01, 20_000
        logS = np.cumsum(rng.normal(mu - 0.5 * sig**2, sig, M))
        r = compute_returns(_panel(100 * np.exp(logS)), 20).returns[0]
        # overlapping returns: standard error from non-overlapping blocks
        se = r[::20].std() / math.sqrt(r[::20].size)
        assert abs(r.mean() - (math.exp(20 * mu) - 1)) < 3 * se


class TestWindowedAggregate:
    def test_normal_input_passes(self):
        rng = np.random.default_rng(2)
        agg = windowed_pairwise_aggregate(ReturnPanel(rng.standard_normal((10, 250)), 1))
        assert cramer_von_mises(agg.sample, stats.norm.cdf) < CVM_CRITICAL_5PCT

    def test_perfectly_correlated_pair_skipped(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(50)
        agg = windowed_pairwise_aggregate(ReturnPanel(np.vstack([x, 2 * x]), 1))
        assert agg.pairs_skipped == 2 and agg.pairs_used == 0 and agg.sample.size == 0

    def test_window_count(self):
        rng = np.random.default_rng(4)
        agg = windowed_pairwise_aggregate(ReturnPanel(rng.standard_normal((3, 110)), 1))
        assert agg.windows == 4
        assert agg.sample.size == 4 * 3 * 2 * 25

    def test_too_short(self):
        with pytest.raises(ValueError):
            windowed_pairwise_aggregate(ReturnPanel(np.zeros((2, 10)), 1))


class TestCovariance:
    def test_identical_series(self):
        x = np.random.default_rng(0).normal(size=100)
        est = estimate_covariance(ReturnPanel(np.vstack([x, x]), 1))
        assert est.cov.correlation_matrix()[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_independent(self):
        # each entry has standard error 0.01: +-0.03 is a 3-sigma band, held by
        # all 10 pairs together about 97% of the time
        X = np.random.default_rng(22).normal(size=(5, 10_000))
        C = estimate_covariance(ReturnPanel(X, 1)).cov.correlation_matrix()
        assert np.max(np.abs(C - np.eye(5))) < 0.03

    def test_known_covariance(self):
        rng = np.random.default_rng(6)
        sigma = np.array([0.01, 0.02, 0.015])
        C = factor_correlation([0.5, 0.7, 0.6])
        S = np.outer(sigma, sigma) * C
        M = 50_000
        X = rng.multivariate_normal(np.zeros(3), S, size=M).T
        est = estimate_covariance(ReturnPanel(X, 1), time_unit_days=1)
        emp = est.cov.matrix()
        se = np.sqrt((S**2 + np.outer(np.diag(S), np.diag(S))) / M)
        assert np.all(np.abs(emp - S) < 4 * se)

    def test_drift_and_volatility_units(self):
        X = np.random.default_rng(7).normal(0.001, 0.02, size=(2, 5000))
        est = estimate_covariance(ReturnPanel(X, 5), time_unit_days=20)
        assert np.allclose(est.mu, X.mean(axis=1) * 4.0)
        assert np.allclose(est.rho, X.std(axis=1, ddof=1) * 2.0)

    def test_zero_variance_named(self):
        X = np.vstack([np.random.default_rng(0).normal(size=20), np.ones(20)])
        with pytest.raises(ZeroVarianceError, match="BAD"):
            estimate_covariance(ReturnPanel(X, 1, ["OK", "BAD"]))

    def test_needs_two_observations(self):
        with pytest.raises(ValueError):
            estimate_covariance(ReturnPanel(np.ones((2, 1)), 1))

    def test_recovers_model_parameters(self):
        rng = np.random.default_rng(8)
        K, M, mu, sd, c = 8, 20_000, 2e-4, 0.012, 0.3
        X = synthetic_ensemble_returns(rng, CorrelationModel(K, c).matrix(), np.full(K, sd), np.full(K, mu), 8, M)
        est = estimate_covariance(compute_returns(prices_from_returns(X), 1), time_unit_days=1)
        assert np.all(np.abs(est.mu - mu) < 3 * sd / math.sqrt(M) * 1.05)
        # sd of the sample sd of a fluctuating-variance series: sqrt((kurtosis - 1) / 4M) sd
        kurt = 3 * (1 + 2 / 8)
        assert np.all(np.abs(est.rho - sd) < 3 * sd * math.sqrt((kurt - 1) / (4 * M)) * 1.05)
        assert homogeneous_summary(est.cov).c == pytest.approx(c, abs=0.03)


class TestHomogeneousSummary:
    def test_constant(self):
        cov = CovarianceSpec(np.ones(4), CorrelationModel(4, 0.3).matrix())
        assert homogeneous_summary(cov).c == pytest.approx(0.3, abs=1e-15)
        assert math.isinf(homogeneous_summary(cov).N)

    def test_pair(self):
        cov = CovarianceSpec(np.ones(2), np.array([[1.0, 0.5], [0.5, 1.0]]))
        assert homogeneous_summary(cov).c == pytest.approx(0.5)

    def test_permutation_invariant(self):
        C = factor_correlation(np.linspace(0.2, 0.8, 7))
        perm = np.random.default_rng(0).permutation(7)
        a = homogeneous_summary(CovarianceSpec(np.ones(7), C)).c
        b = homogeneous_summary(CovarianceSpec(np.ones(7), C[np.ix_(perm, perm)])).c
        assert a == pytest.approx(b, abs=1e-15)

    def test_market_like_level(self):
        # loadings chosen so the average correlation is 0.26
        rng = np.random.default_rng(12)
        b = rng.uniform(0.3, 0.7, 60)
        b *= math.sqrt(0.26 / ((np.sum(b) ** 2 - np.sum(b**2)) / (60 * 59)))
        X = synthetic_ensemble_returns(rng, factor_correlation(b), np.full(60, 0.01), np.zeros(60), 5, 5000)
        est = estimate_covariance(ReturnPanel(X, 1))
        assert homogeneous_summary(est.cov).c == pytest.approx(0.26, abs=0.02)

    def test_homogenized_keeps_vols(self):
        cov = CovarianceSpec([1.0, 2.0, 3.0], factor_correlation([0.3, 0.6, 0.9]))
        h = homogenized(cov)
        assert np.array_equal(h.sigma, cov.sigma) and h.is_homogeneous


class TestRotateScale:
    def test_normal_exact_sigma(self):
        rng = np.random.default_rng(9)
        cov = CovarianceSpec([0.01, 0.03, 0.02], factor_correlation([0.4, 0.8, 0.6]))
        X = rng.multivariate_normal(np.zeros(3), cov.matrix(), 20_000).T
        s = rotate_scale_returns(ReturnPanel(X, 1), cov)
        assert np.var(s) == pytest.approx(1.0, abs=0.02)

    def test_scalar(self):
        X = np.array([[0.02, -0.01, 0.03]])
        s = rotate_scale_returns(ReturnPanel(X, 1), CovarianceSpec([0.02], np.eye(1)), center=False)
        assert np.allclose(s, X[0] / 0.02)

    def test_ensemble_sample_matches_model(self):
        rng = np.random.default_rng(10)
        cov = CovarianceSpec(np.full(20, 0.01), CorrelationModel(20, 0.3))
        X = synthetic_ensemble_returns(rng, cov.correlation_matrix(), cov.sigma, np.zeros(20), 5, 1000)
        s = rotate_scale_returns(ReturnPanel(X, 1), cov, center=False)
        assert cramer_von_mises(s, lambda x: rotated_scaled_cdf(x, 5.0)) < CVM_CRITICAL_5PCT

    def test_unit_variance_with_own_sample_covariance(self):
        rng = np.random.default_rng(11)
        X = synthetic_ensemble_returns(rng, factor_correlation(np.full(10, 0.5)), np.full(10, 0.02), np.zeros(10), 4, 3000)
        r = ReturnPanel(X, 1)
        assert np.var(rotate_scale_returns(r, estimate_covariance(r).cov)) == pytest.approx(1.0, abs=0.02)

    def test_non_pd(self):
        r = ReturnPanel(np.zeros((2, 5)), 1)
        with pytest.raises(np.linalg.LinAlgError):
            rotate_scale_returns(r, CovarianceSpec([1.0, 1.0], np.ones((2, 2))))


class TestModelCdf:
    @pytest.mark.parametrize("N", [1.0, 4.2, 20.0])
    def test_against_mixture(self, N):
        for x in (0.1, 0.8, 2.5):
            ref = integrate.quad(lambda z: stats.chi2.pdf(z, N) * stats.norm.cdf(x * math.sqrt(N / z)), 0, np.inf,
                                 epsrel=1e-11, limit=200)[0]
            assert rotated_scaled_cdf(x, N) == pytest.approx(ref, abs=1e-8)
            assert rotated_scaled_cdf(-x, N) == pytest.approx(1 - ref, abs=1e-8)


class TestNFits:
    def test_least_squares_round_trip(self):
        s = sample_rotated_scaled(np.random.default_rng(0), 5, 1_000_000)
        f = fit_N_least_squares(s)
        assert 4.0 <= f.N_hat <= 6.0 and not f.at_boundary and f.method == "least_squares"

    def test_normal_hits_boundary(self):
        s = np.random.default_rng(1).standard_normal(1_000_000)
        f = fit_N_least_squares(s)
        assert f.N_hat >= 49.0 and f.at_boundary

    def test_size_and_degenerate_errors(self):
        with pytest.raises(ValueError):
            fit_N_least_squares(np.zeros(10))
        with pytest.raises(ValueError):
            fit_N_least_squares(np.zeros(5000))
        with pytest.raises(ValueError):
            fit_N_cramer_von_mises(np.zeros(5000))

    def test_cvm_calibration(self):
        rng = np.random.default_rng(2)
        below = [cramer_von_mises(sample_rotated_scaled(rng, 5, 2000), lambda x: rotated_scaled_cdf(x, 5.0))
                 < CVM_CRITICAL_5PCT for _ in range(40)]
        assert np.mean(below) >= 0.9

    def test_cvm_agrees_with_least_squares(self):
        s = sample_rotated_scaled(np.random.default_rng(3), 5, 500_000)
        a = fit_N_cramer_von_mises(s)
        b = fit_N_least_squares(s)
        assert abs(a.N_hat - b.N_hat) <= 1.0 and 4.0 <= a.N_hat <= 6.0

    def test_nfit_positive(self):
        with pytest.raises(ValueError):
            NFit(0.0, "least_squares", 1.0)


class TestVarianceIdentity:
    def test_formula(self):
        assert variance_of_square_norm(1, 0.0, 1.0) == pytest.approx(8.0)

    def test_round_trip(self):
        rng = np.random.default_rng(4)
        X = synthetic_ensemble_returns(rng, CorrelationModel(50, 0.3).matrix(), np.full(50, 0.01), np.zeros(50), 5,
                                       100_000)
        f = estimate_N_variance_identity(ReturnPanel(X, 1), 0.3)
        assert 4.0 <= f.N_hat <= 6.0

    def test_inconsistent(self):
        # constant-norm return vectors: x = r^T r barely varies, below the N -> inf floor
        Y = np.random.default_rng(5).standard_normal((10, 5000))
        Y /= np.linalg.norm(Y, axis=0)
        with pytest.raises(ValueError, match="inconsistent"):
            estimate_N_variance_identity(ReturnPanel(Y, 1), 0.0)

    def test_estimators_agree(self):
        rng = np.random.default_rng(6)
        X = synthetic_ensemble_returns(rng, CorrelationModel(20, 0.2).matrix(), np.full(20, 0.01), np.zeros(20), 6,
                                       10_000)
        r = ReturnPanel(X, 1)
        s = rotate_scale_returns(r, estimate_covariance(r).cov)
        ns = [fit_N_least_squares(s).N_hat, fit_N_cramer_von_mises(s).N_hat, estimate_N_variance_identity(r, 0.2).N_hat]
        assert max(ns) / min(ns) < 2.0
