import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cate_fusion.data import BlockPartition, FusedSample, SourceSample
from cate_fusion.dgp import DgpConfig, generate, generate_r2_controlled, true_cate_rmse
from cate_fusion.estimators import (
    METHODS,
    MROSCAR,
    RACER,
    ROSCAR,
    SROSCAR,
    EstimatorConfig,
    attach_confidence_intervals,
    cate_confidence_intervals,
    fit_imputation,
    fit_method,
    predict_cate,
    preliminary_cate,
)
from cate_fusion.exceptions import ArmTooSmall, BlockUnavailable, DimensionMismatch, OsArmMissing

SMALL = dict(p=40, n_r=200, n_o=400, n_eval=500)


@pytest.fixture(scope="module")
def small_draw():
    return generate(DgpConfig(seed=7, **SMALL))


@pytest.fixture(scope="module")
def small_fits(small_draw):
    fused = small_draw[0]
    return {m: fit_method(m, fused, EstimatorConfig(method=m, seed=3)) for m in METHODS}


def _linear_fused(n_r, n_o, part, tau_coef, beta, noise, rng, os_beta=None, v_coef=None):
    """Independent standard normal covariates with a linear outcome."""
    p = part.p
    v_coef = np.zeros(part.p_v) if v_coef is None else v_coef
    os_beta = beta if os_beta is None else os_beta

    def draw(n, b, treat_prob):
        X = rng.standard_normal((n, p))
        a = np.where(rng.random(n) < treat_prob, 1.0, -1.0)
        full_tau = np.r_[tau_coef, np.zeros(part.p_v)]
        full_b = np.r_[b, v_coef]
        y = X @ full_b + (a == 1) * (X @ full_tau) + noise * rng.standard_normal(n)
        return X, a, y

    Xr, ar, yr = draw(n_r, beta, 0.5)
    Xo, ao, yo = draw(n_o, os_beta, 0.5)
    rct = SourceSample(Xr[:, : part.p_r], ar, yr, "rct", part, v_oracle=Xr[:, part.p_r :])
    os_ = SourceSample(Xo[:, part.p_u :], ao, yo, "os", part)
    return FusedSample(rct, os_, part)


class TestNullAndRecovery:
    @pytest.mark.parametrize("method", METHODS)
    def test_null_effect(self, method):
        # V is unobserved in the trial, so zero noise also needs zero V coefficients
        cfg = DgpConfig(n_r=1000, n_o=1000, n_eval=200, noise_sd=0.0, tau_mag=0.0, v_coef_mag=0.0, seed=1)
        fused, truth, ev = generate(cfg)
        assert np.all(truth.tau_coef == 0)
        est = fit_method(method, fused, EstimatorConfig(method=method, seed=0))
        assert np.max(np.abs(est.tau_hat)) < 0.05
        assert np.max(np.abs(predict_cate(est, ev.X_r, ev.V))) < 0.05

    def test_racer_recovers_u_coefficient(self):
        part = BlockPartition(5, 5, 0)
        tau = np.zeros(10)
        tau[2] = 1.0
        beta = np.r_[0.5, 0, 0, 0, 0, 0, -0.5, 0, 0, 0]
        coefs = []
        for seed in range(20):
            fused = _linear_fused(2000, 0, part, tau, beta, 0.25, np.random.default_rng(seed))
            est = fit_method("racer", fused, EstimatorConfig(method="racer", seed=seed))
            coefs.append(est.final_fit.coefficients)
            assert 2 in est.final_support
        med = np.median(coefs, axis=0)
        assert abs(med[2] - 1.0) < 0.1
        assert np.max(np.abs(np.delete(med, 2))) < 0.1

    def test_r_oscar_zero_noise_consistency(self):
        cfg = DgpConfig(n_r=2000, n_o=2000, n_eval=500, noise_sd=0.0, seed=4)
        fused, _, ev = generate(cfg)
        est = fit_method("r_oscar", fused, EstimatorConfig(method="r_oscar"))
        assert true_cate_rmse(est, ev) < 0.05


class TestBorrowing:
    def test_transportable_discrepancy_shrinks(self):
        part = BlockPartition(3, 6, 3)
        beta = np.r_[0, 0, 0, 1.0, -0.5, 0, 0, 0.5, 0]
        tau = np.r_[0, 0, 0, 0.5, 0, 0, 0, 0, 0]
        fused = _linear_fused(300, 5000, part, tau, beta, 0.5, np.random.default_rng(0))
        est = fit_method("sr_oscar", fused, EstimatorConfig(method="sr_oscar"))
        X = fused.rct.covariates
        delta = np.mean([[f[a].predict(X) for a in (1, -1)] for f in est.fold_models], axis=0)
        assert np.mean(np.abs(delta)) < 0.1

    def test_sr_no_better_when_v_carries_signal(self):
        diffs = []
        for seed in range(10):
            cfg = DgpConfig(signal_mag=0.0, v_coef_mag=1.5, v_signal_prop=1.0, seed=100 + seed, n_eval=1000)
            fused, _, ev = generate(cfg)
            r = true_cate_rmse(fit_method("racer", fused, EstimatorConfig(method="racer", seed=seed)), ev)
            s = true_cate_rmse(fit_method("sr_oscar", fused, EstimatorConfig(method="sr_oscar", seed=seed)), ev)
            diffs.append(s - r)
        assert np.mean(diffs) >= 0

    def test_degenerate_shared_partition(self):
        fused, _, ev = generate(DgpConfig(f1=0.0, f2=0.0, p=30, n_r=150, n_o=300, n_eval=100, seed=2))
        est = fit_method("sr_oscar", fused, EstimatorConfig(method="sr_oscar"))
        assert np.all(np.isfinite(predict_cate(est, ev.X_r)))

    def test_r_oscar_matches_sr_when_v_irrelevant(self):
        gaps = []
        for seed in range(20):
            fused, _, ev = generate(DgpConfig(v_coef_mag=0.0, seed=300 + seed, n_eval=1000))
            s = fit_method("sr_oscar", fused, EstimatorConfig(method="sr_oscar", seed=seed))
            r = fit_method("r_oscar", fused, EstimatorConfig(method="r_oscar", seed=seed))
            gaps.append(abs(true_cate_rmse(s, ev) - true_cate_rmse(r, ev)))
        assert np.median(gaps) < 0.03

    def test_oracle_orderings(self):
        near_perfect, base = [], []
        for seed in range(10):
            cfg = DgpConfig(r2_target=0.999, lambda_seed=5, seed=500 + seed, n_eval=1000)
            fused, _, ev = generate_r2_controlled(cfg)
            m = fit_method("mr_oscar", fused, EstimatorConfig(method="mr_oscar", seed=seed))
            r = fit_method("r_oscar", fused, EstimatorConfig(method="r_oscar", seed=seed))
            near_perfect.append(true_cate_rmse(m, ev) - true_cate_rmse(r, ev))
            fused, _, ev = generate(DgpConfig(seed=600 + seed, n_eval=1000))
            m = fit_method("mr_oscar", fused, EstimatorConfig(method="mr_oscar", seed=seed))
            r = fit_method("r_oscar", fused, EstimatorConfig(method="r_oscar", seed=seed))
            base.append(true_cate_rmse(m, ev) - true_cate_rmse(r, ev))
        assert np.mean(near_perfect) <= 0.02
        assert np.mean(base) >= 0


class TestImputation:
    def _os(self, Lam, noise, n, rng):
        part = BlockPartition(0, Lam.shape[1], Lam.shape[0])
        Z = rng.standard_normal((n, part.p_z))
        V = Z @ Lam.T + noise * rng.standard_normal((n, part.p_v))
        return SourceSample(np.hstack([Z, V]), np.ones(n), np.zeros(n), "os", part), part

    @staticmethod
    def _oos_r2(model, Lam, noise, rng):
        Z = rng.standard_normal((5000, Lam.shape[1]))
        V = Z @ Lam.T + noise * rng.standard_normal((5000, Lam.shape[0]))
        pred = model.predict(Z)
        return 1 - np.mean((V - pred) ** 2, axis=0) / np.var(V, axis=0)

    def test_noiseless_map(self):
        rng = np.random.default_rng(0)
        Lam = np.zeros((3, 10))
        Lam[0, :2] = [1, -1]
        Lam[1, 3] = 2
        Lam[2, [4, 7, 9]] = 0.5
        os_, part = self._os(Lam, 0.0, 2000, rng)
        model = fit_imputation(os_, part, EstimatorConfig())
        assert np.all(self._oos_r2(model, Lam, 0.0, rng) > 0.99)

    def test_no_signal(self):
        rng = np.random.default_rng(1)
        Lam = np.zeros((3, 10))
        os_, part = self._os(Lam, 1.0, 2000, rng)
        model = fit_imputation(os_, part, EstimatorConfig())
        assert np.all(np.abs(self._oos_r2(model, Lam, 1.0, rng)) < 0.05)

    def test_r2_design(self):
        cfg = DgpConfig(r2_target=0.6, seed=3, n_r=50, n_eval=10)
        fused, truth, _ = generate_r2_controlled(cfg)
        model = fit_imputation(fused.os, fused.partition, EstimatorConfig())
        test, _, _ = generate_r2_controlled(DgpConfig(r2_target=0.6, seed=4, lambda_seed=3, n_r=5000, n_o=10, n_eval=10))
        Z = test.rct.covariates[:, fused.partition.p_u :]
        V = test.rct.v_oracle
        r2 = 1 - np.mean((V - model.predict(Z)) ** 2, axis=0) / np.var(V, axis=0)
        assert abs(np.mean(r2) - 0.6) < 0.07

    def test_binary_and_constant_targets(self):
        rng = np.random.default_rng(2)
        part = BlockPartition(0, 4, 2)
        Z = rng.standard_normal((600, 4))
        v_bin = (Z[:, 0] + 0.5 * rng.standard_normal(600) > 0).astype(float)
        os_ = SourceSample(np.column_stack([Z, v_bin, np.full(600, 2.0)]), np.ones(600), np.zeros(600), "os", part)
        model = fit_imputation(os_, part, EstimatorConfig())
        pred = model.predict(Z)
        assert model.kinds[0] == "logistic_lasso"
        assert np.all((pred[:, 0] > 0) & (pred[:, 0] < 1))
        np.testing.assert_array_equal(pred[:, 1], 2.0)


class TestPrediction:
    @pytest.mark.parametrize("method", METHODS)
    def test_round_trip(self, small_draw, small_fits, method):
        fused = small_draw[0]
        est = small_fits[method]
        V = fused.rct.v_oracle if method == "r_oscar" else None
        np.testing.assert_array_equal(predict_cate(est, fused.rct.covariates, V), est.tau_hat)
        assert est.tau_hat.shape == (fused.rct.n,)

    @pytest.mark.parametrize("method", ["racer", "sr_oscar"])
    def test_intercept_case(self, small_fits, method):
        est = small_fits[method]
        p_r = est.partition.p_r
        expected = est.final_fit.intercept
        if method == "sr_oscar":
            parts = [
                est.os_models[1].intercept + f[1].intercept - est.os_models[-1].intercept - f[-1].intercept
                for f in est.fold_models
            ]
            expected += np.mean(parts)
        assert predict_cate(est, np.zeros((1, p_r)))[0] == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("method", ["sr_oscar", "mr_oscar"])
    def test_offset_linearity(self, small_draw, small_fits, method):
        est = small_fits[method]
        X = small_draw[2].X_r[:3]
        f = lambda x: predict_cate(est, x) - preliminary_cate(est, x)
        mix = 0.3 * X[0] + 0.7 * X[1]
        assert f(mix)[0] == pytest.approx(0.3 * f(X[:1])[0] + 0.7 * f(X[1:2])[0], abs=1e-10)
        np.testing.assert_allclose(f(X), est.final_fit.predict(X), atol=1e-12)

    def test_dimension_mismatch(self, small_fits):
        with pytest.raises(DimensionMismatch):
            predict_cate(small_fits["racer"], np.zeros((2, 3)))
        with pytest.raises(BlockUnavailable):
            predict_cate(small_fits["r_oscar"], np.zeros((2, small_fits["r_oscar"].partition.p_r)))


class TestCrossFitting:
    @pytest.mark.parametrize("method", ["racer", "mr_oscar"])
    def test_separation_audit(self, small_draw, small_fits, method):
        fused = small_draw[0]
        est = small_fits[method]
        for k, train in enumerate(est.train_index):
            held = np.flatnonzero(est.folds == k)
            assert np.intersect1d(train, held).size == 0
            assert np.union1d(train, held).size == fused.rct.n
        # perturbing fold-0 outcomes must leave fold-0 nuisances untouched
        held = est.folds == 0
        rct = fused.rct.subset(np.arange(fused.rct.n))
        rct.outcome = rct.outcome + np.where(held, 100.0, 0.0)
        refit = fit_method(method, FusedSample(rct, fused.os, fused.partition), EstimatorConfig(method=method, seed=3))
        for a in (1, -1):
            np.testing.assert_array_equal(refit.fold_models[0][a].coefficients, est.fold_models[0][a].coefficients)
            assert not np.array_equal(refit.fold_models[1][a].coefficients, est.fold_models[1][a].coefficients) or \
                refit.fold_models[1][a].intercept != est.fold_models[1][a].intercept
        np.testing.assert_array_equal(refit.offset_crossfit[held], est.offset_crossfit[held])

    def test_folds_stratified(self, small_fits, small_draw):
        a = small_draw[0].rct.treatment
        folds = small_fits["racer"].folds
        for k in range(5):
            for arm in (1, -1):
                assert np.sum((folds == k) & (a == arm)) >= np.sum(a == arm) // 5

    @pytest.mark.parametrize("method", METHODS)
    def test_determinism(self, small_draw, small_fits, method):
        again = fit_method(method, small_draw[0], EstimatorConfig(method=method, seed=3))
        np.testing.assert_array_equal(again.tau_hat, small_fits[method].tau_hat)
        assert again.to_json() == small_fits[method].to_json()


class TestNesting:
    def test_empty_os_intercept_discrepancy(self, small_draw):
        fused, _, ev = small_draw
        part = fused.partition
        empty = SourceSample(np.zeros((0, part.p_o)), [], [], "os", part)
        cfg = EstimatorConfig(method="sr_oscar", os_fallback=True, fixed_lambdas={"discrepancy": np.inf})
        est = fit_method("sr_oscar", FusedSample(fused.rct, empty, part), cfg)
        assert np.all(np.isfinite(predict_cate(est, ev.X_r)))
        assert est.support_sizes["os_outcome[+1]"] == 0

    def test_missing_os_arm_raises(self, small_draw):
        fused = small_draw[0]
        os_ = fused.os.subset(np.flatnonzero(fused.os.treatment == 1))
        with pytest.raises(OsArmMissing):
            fit_method("mr_oscar", FusedSample(fused.rct, os_, fused.partition))

    def test_arm_too_small(self, small_draw):
        fused = small_draw[0]
        rows = np.r_[np.flatnonzero(fused.rct.treatment == 1)[:30], np.flatnonzero(fused.rct.treatment == -1)[:8]]
        with pytest.raises(ArmTooSmall):
            fit_method("racer", FusedSample(fused.rct.subset(rows), fused.os, fused.partition))

    def test_r_oscar_needs_true_v(self, small_draw):
        fused = small_draw[0]
        rct = fused.rct.subset(np.arange(fused.rct.n))
        rct.v_oracle = None
        with pytest.raises(BlockUnavailable):
            fit_method("r_oscar", FusedSample(rct, fused.os, fused.partition))


class TestConfidenceIntervals:
    def test_bracket_center(self, small_fits):
        est = attach_confidence_intervals(small_fits["mr_oscar"])
        assert np.all(est.ci_lower <= est.ci_center) and np.all(est.ci_center <= est.ci_upper)
        d = json.loads(est.to_json())
        assert len(d["ci_lower"]) == len(d["tau_hat"])

    def test_intercept_only_equal_width(self, small_draw):
        fused = small_draw[0]
        cfg = EstimatorConfig(method="sr_oscar", fixed_lambdas={"final": np.inf})
        est = fit_method("sr_oscar", fused, cfg)
        _, lo, hi = cate_confidence_intervals(est)
        np.testing.assert_allclose(hi - lo, (hi - lo)[0], rtol=1e-12)

    def test_width_scaling(self):
        widths = {}
        for n in (400, 800):
            w = []
            for seed in range(6):
                part = BlockPartition(3, 3, 0)
                tau = np.r_[1.0, 0, 0, 0, 0, 0]
                fused = _linear_fused(n, 0, part, tau, np.zeros(6), 0.5, np.random.default_rng(seed))
                _, lo, hi = cate_confidence_intervals(fit_method("racer", fused, EstimatorConfig(method="racer")))
                w.append(np.mean(((hi - lo) / 2) ** 2))
            widths[n] = np.mean(w)
        assert widths[800] / widths[400] == pytest.approx(0.5, rel=0.2)


class TestSklearnApi:
    def test_params_and_clone(self):
        est = MROSCAR(n_crossfit_folds=3, random_state=4)
        assert est.get_params()["n_crossfit_folds"] == 3
        c = clone(est)
        assert c.get_params() == est.get_params()
        assert set(RACER().get_params()) == set(ROSCAR().get_params())

    def test_array_fit_matches_fused(self, small_draw, small_fits):
        fused, _, ev = small_draw
        part = fused.partition
        est = SROSCAR(random_state=3).fit(
            fused.rct.covariates, fused.rct.outcome, fused.rct.treatment,
            X_os=fused.os.covariates, y_os=fused.os.outcome, treatment_os=fused.os.treatment,
            partition=(part.p_u, part.p_z, part.p_v),
        )
        np.testing.assert_array_equal(est.predict(ev.X_r), predict_cate(small_fits["sr_oscar"], ev.X_r))
        center, lo, hi = est.confidence_intervals(ev.X_r[:5])
        assert center.shape == (5,)

    def test_racer_without_os(self, small_draw):
        fused = small_draw[0]
        est = RACER().fit(fused.rct.covariates, fused.rct.outcome, fused.rct.treatment, partition=fused.partition)
        assert est.n_features_in_ == fused.partition.p_r

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            RACER().predict(np.zeros((1, 3)))

    def test_partition_required(self):
        with pytest.raises(ValueError):
            RACER().fit(np.zeros((10, 2)), np.zeros(10), np.ones(10))


def test_config_validation():
    with pytest.raises(ValueError):
        EstimatorConfig(method="xlearner")
    with pytest.raises(ValueError):
        EstimatorConfig(n_crossfit_folds=1)
    with pytest.raises(ValueError):
        EstimatorConfig(fixed_lambdas={"bogus": 1.0})
