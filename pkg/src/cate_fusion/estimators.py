"""
RCT-anchored CATE estimators under covariate mismatch.

Four pipelines share one cross-fitting engine:

``racer``
    arm-wise LASSO outcome models on the trial covariates, then a LASSO
    regression of pseudo-outcomes on ``X^r``.
``sr_oscar``
    OS outcome models on the shared block ``Z``, calibrated to the trial by
    arm-wise discrepancy LASSOs on ``X^r``; the final stage corrects the
    induced preliminary CATE.
``mr_oscar``
    OS-only covariates ``V`` are imputed in the trial from ``Z`` with a map
    learned in the OS; OS outcome models on ``(Z, V)`` are calibrated on
    ``(X^r, V_hat)``.
``r_oscar``
    ``mr_oscar`` with the imputation replaced by the true ``V`` (oracle).

Trial rows are split into K folds stratified by arm. Trial-side nuisances
for fold k are trained on the other folds only, and pseudo-outcomes for fold
k are formed from them. OS-side models never see trial data, so they are
fit once per call. The final regression pools the cross-fitted pseudo-outcomes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import BlockPartition, FusedSample, SourceSample, as_source_sample, extract_block, validate
from .exceptions import (
    ArmTooSmall,
    BlockUnavailable,
    DimensionMismatch,
    ImputationUnavailable,
    OsArmMissing,
)
from .penalized import (
    DEFAULT_PATH_LENGTH,
    PATH_EPS,
    PenalizedFit,
    PenaltySpec,
    cv_lasso,
    fit_lasso,
    make_folds,
    post_lasso_ols,
)
from .pseudo import Propensity, cmo_from_means, pseudo_outcome_values

logger = logging.getLogger(__name__)

METHODS = ("racer", "sr_oscar", "mr_oscar", "r_oscar")
ARMS = (1, -1)

# stage codes feed the per-stage seed derivation
_STAGE_CODES = {
    "crossfit": 0,
    "rct_outcome": 1,
    "os_outcome": 2,
    "discrepancy": 3,
    "imputation": 4,
    "final": 5,
}


def stage_seed(seed, stage, *keys):
    """Independent integer seed for a (stage, fold, arm, ...) cell."""
    ss = np.random.SeedSequence([int(seed), _STAGE_CODES[stage], *[int(k) % (2**32) for k in keys]])
    return int(ss.generate_state(1)[0])


@dataclass
class EstimatorConfig:
    method: str = "mr_oscar"
    n_crossfit_folds: int = 5
    cv_folds: int = 5
    seed: int = 0
    path_length: int = DEFAULT_PATH_LENGTH
    path_eps: float = PATH_EPS
    standardize: bool = True
    tol: float = 1e-7
    max_iter: int = 10_000
    rct_propensity: float = 0.5
    overlap_floor: float = 0.01
    min_arm_size: int = 5
    # CV selection rule per stage ("min" or "1se"); stages not listed use cv_rule
    cv_rule: str = "min"
    stage_rules: dict = field(default_factory=dict)
    # stage name -> fixed penalty, bypassing CV for that stage
    fixed_lambdas: dict = field(default_factory=dict)
    # treat a missing OS arm as a zero outcome model instead of raising
    os_fallback: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.n_crossfit_folds < 2 or self.cv_folds < 2:
            raise ValueError("cross-fitting and CV need at least two folds")
        unknown = (set(self.fixed_lambdas) | set(self.stage_rules)) - set(_STAGE_CODES)
        if unknown:
            raise ValueError(f"unknown stages in fixed_lambdas: {sorted(unknown)}")

    def rule(self, stage):
        return self.stage_rules.get(stage, self.cv_rule)

    @property
    def propensity(self):
        return Propensity("known_constant", constant=self.rct_propensity, floor=self.overlap_floor)


def _fit_stage(cfg: EstimatorConfig, stage, X, y, seed, offset=None, strata=None):
    """CV-tuned (or fixed-penalty) LASSO for one nuisance stage."""
    spec = PenaltySpec(0.0, cfg.standardize, cfg.max_iter, cfg.tol)
    if stage in cfg.fixed_lambdas:
        lam = float(cfg.fixed_lambdas[stage])
        if np.isinf(lam):
            r = y if offset is None else y - offset
            return PenalizedFit(float(np.mean(r)), np.zeros(X.shape[1]), lam, float(np.var(r)), True)
        return fit_lasso(X, y, offset, PenaltySpec(lam, cfg.standardize, cfg.max_iter, cfg.tol))
    n_folds = min(cfg.cv_folds, X.shape[0])
    fit, _ = cv_lasso(
        X, y, offset, n_folds, cfg.path_length, "squared", seed, strata, spec, cfg.path_eps, cfg.rule(stage)
    )
    return fit


@dataclass
class ImputationModel:
    """Per-coordinate maps ``Z -> V_j`` learned in the OS."""

    fits: list
    kinds: list

    @property
    def p_v(self):
        return len(self.fits)

    def predict(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        cols = []
        for fit, kind in zip(self.fits, self.kinds):
            eta = fit.decision_function(Z)
            cols.append(stats.logistic.cdf(eta) if kind == "logistic_lasso" else eta)
        if not cols:
            return np.zeros((Z.shape[0], 0))
        return np.column_stack(cols)


def fit_imputation(os: SourceSample, partition: BlockPartition, cfg: EstimatorConfig) -> ImputationModel:
    """Fit one CV-tuned LASSO per V coordinate on Z in the OS.

    Binary (0/1) coordinates get a logistic LASSO and impute probabilities.
    """
    if partition.p_v and os.n == 0:
        raise ImputationUnavailable("the OS sample is empty")
    try:
        Z = extract_block(os, "Z")
        V = extract_block(os, "V")
    except BlockUnavailable as exc:
        raise ImputationUnavailable(str(exc)) from None
    fits, kinds = [], []
    spec = PenaltySpec(0.0, cfg.standardize, cfg.max_iter, cfg.tol)
    n_folds = min(cfg.cv_folds, os.n)
    for j in range(V.shape[1]):
        v = V[:, j]
        seed = stage_seed(cfg.seed, "imputation", j)
        if np.ptp(v) == 0:
            logger.info("imputation target V[%d] is constant; using an intercept-only fit", j)
            fits.append(PenalizedFit(float(v[0]), np.zeros(Z.shape[1]), np.inf, 0.0, True))
            kinds.append("gaussian_lasso")
        elif np.all((v == 0) | (v == 1)):
            fit, _ = cv_lasso(Z, v, None, n_folds, cfg.path_length, "logistic", seed, None, spec, cfg.path_eps,
                              cfg.rule("imputation"))
            fits.append(fit)
            kinds.append("logistic_lasso")
        else:
            fit, _ = cv_lasso(Z, v, None, n_folds, cfg.path_length, "squared", seed, None, spec, cfg.path_eps,
                              cfg.rule("imputation"))
            fits.append(fit)
            kinds.append("gaussian_lasso")
    return ImputationModel(fits, kinds)


@dataclass
class CateEstimate:
    """Fitted pipeline plus per-unit CATE estimates on the training trial.

    ``tau_hat`` is ``predict_cate`` evaluated on the training rows, so the
    preliminary CATE there is the average of the K fold models, as it is for
    new rows. ``offset_crossfit`` keeps the fold-specific preliminary CATE
    used as the offset in the final regression.
    """

    method: str
    tau_hat: np.ndarray
    final_fit: PenalizedFit
    partition: BlockPartition
    folds: np.ndarray
    train_index: list
    stage_lambdas: dict
    support_sizes: dict
    pseudo_outcomes: np.ndarray
    offset_crossfit: np.ndarray
    X_train: np.ndarray
    os_models: dict = field(default_factory=dict)
    fold_models: list = field(default_factory=list)
    imputation: ImputationModel | None = None
    v_train: np.ndarray | None = None
    ci_lower: np.ndarray | None = None
    ci_upper: np.ndarray | None = None
    ci_center: np.ndarray | None = None
    ci_level: float | None = None

    @property
    def eta_hat(self):
        """Final-stage coefficients as ``[intercept, coef...]``."""
        return np.r_[self.final_fit.intercept, self.final_fit.coefficients]

    @property
    def final_support(self):
        return self.final_fit.support

    def to_dict(self):
        out = {
            "method": self.method,
            "eta_hat": self.eta_hat.tolist(),
            "stage_lambdas": _jsonable(self.stage_lambdas),
            "support_sizes": _jsonable(self.support_sizes),
            "tau_hat": self.tau_hat.tolist(),
            "ci_level": self.ci_level,
            "ci_lower": None if self.ci_lower is None else self.ci_lower.tolist(),
            "ci_upper": None if self.ci_upper is None else self.ci_upper.tolist(),
        }
        return out

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if not np.isfinite(obj) else float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


# ---------------------------------------------------------------------------
# design views


def _augmented_rct(method, rct, v_rct):
    """Design for discrepancy stages: X^r, or (X^r, V) for MR/R."""
    if method in ("mr_oscar", "r_oscar"):
        return np.hstack([rct, v_rct])
    return rct


def _os_input(method, Z, V):
    if method == "sr_oscar":
        return Z
    return np.hstack([Z, V])


def _arm_means(est_parts, method, X_r, Z, V, fold_model):
    """Calibrated arm means for rows with RCT covariates X_r."""
    if method == "racer":
        return {a: fold_model[a].predict(X_r) for a in ARMS}
    os_in = _os_input(method, Z, V)
    design = _augmented_rct(method, X_r, V)
    return {a: est_parts[a].predict(os_in) + fold_model[a].predict(design) for a in ARMS}


# ---------------------------------------------------------------------------
# core pipeline


def _check_arms(rct, folds, cfg):
    for k in range(cfg.n_crossfit_folds):
        train = folds != k
        for a in ARMS:
            cnt = int(np.sum(train & (rct.treatment == a)))
            held = int(np.sum(~train & (rct.treatment == a)))
            if min(cnt, held) < cfg.min_arm_size:
                raise ArmTooSmall(f"fold {k} has {held} held-out and {cnt} training units in arm {a:+d}")


def _fit_os_outcomes(fused, cfg, method, stage_lambdas, support_sizes):
    os = fused.os
    part = fused.partition
    models = {}
    for a in ARMS:
        rows = os.treatment == a if os.n else np.zeros(0, dtype=bool)
        n_a = int(np.sum(rows))
        width = part.p_z if method == "sr_oscar" else part.p_o
        if n_a < cfg.min_arm_size:
            if not cfg.os_fallback:
                raise OsArmMissing(f"OS arm {a:+d} has {n_a} units")
            logger.warning("OS arm %+d missing; using a zero outcome model", a)
            models[a] = PenalizedFit(0.0, np.zeros(width), np.nan, 0.0, True)
            stage_lambdas[f"os_outcome[{a:+d}]"] = np.nan
            support_sizes[f"os_outcome[{a:+d}]"] = 0
            continue
        sub = os.subset(rows)
        X = extract_block(sub, "Z") if method == "sr_oscar" else extract_block(sub, "X^o")
        fit = _fit_stage(cfg, "os_outcome", X, sub.outcome, stage_seed(cfg.seed, "os_outcome", a))
        models[a] = fit
        stage_lambdas[f"os_outcome[{a:+d}]"] = fit.lambda_used
        support_sizes[f"os_outcome[{a:+d}]"] = int(fit.support.size)
    return models


def _pipeline(fused: FusedSample, cfg: EstimatorConfig, method: str) -> CateEstimate:
    problems = [p for p in validate(fused) if not p.startswith("os")] if method == "racer" else validate(fused)
    if problems:
        raise ValueError("invalid FusedSample: " + "; ".join(problems))
    rct = fused.rct
    part = fused.partition
    X_r = rct.covariates
    Z_r = extract_block(rct, "Z")
    n = rct.n
    prop = cfg.propensity
    stage_lambdas, support_sizes = {}, {}

    imputation = None
    V_r = None
    os_models = {}
    if method in ("sr_oscar", "mr_oscar", "r_oscar"):
        os_models = _fit_os_outcomes(fused, cfg, method, stage_lambdas, support_sizes)
    if method == "mr_oscar":
        imputation = fit_imputation(fused.os, part, cfg)
        V_r = imputation.predict(Z_r)
        stage_lambdas["imputation"] = [f.lambda_used for f in imputation.fits]
        support_sizes["imputation"] = [int(f.support.size) for f in imputation.fits]
    elif method == "r_oscar":
        if rct.v_oracle is None:
            raise BlockUnavailable("R-OSCAR needs the true V block on RCT rows")
        V_r = np.asarray(rct.v_oracle, dtype=float)
    elif method == "sr_oscar":
        V_r = np.zeros((n, 0))

    K = cfg.n_crossfit_folds
    if n < K:
        raise ArmTooSmall(f"{n} trial rows cannot fill {K} cross-fit folds")
    folds = make_folds(n, K, stage_seed(cfg.seed, "crossfit"), strata=rct.treatment)
    _check_arms(rct, folds, cfg)

    psi = np.empty(n)
    offset = np.zeros(n)
    fold_models = []
    train_index = []
    design_r = X_r if method == "racer" else _augmented_rct(method, X_r, V_r)
    os_pred_r = {}
    if method != "racer":
        os_in = _os_input(method, Z_r, V_r)
        os_pred_r = {a: os_models[a].predict(os_in) for a in ARMS}
    stage = "rct_outcome" if method == "racer" else "discrepancy"

    for k in range(K):
        train = folds != k
        test = ~train
        train_index.append(np.flatnonzero(train))
        model = {}
        for a in ARMS:
            rows = train & (rct.treatment == a)
            resp = rct.outcome[rows] if method == "racer" else rct.outcome[rows] - os_pred_r[a][rows]
            fit = _fit_stage(cfg, stage, design_r[rows], resp, stage_seed(cfg.seed, stage, k, a))
            model[a] = fit
            stage_lambdas.setdefault(f"{stage}[{a:+d}]", []).append(fit.lambda_used)
            support_sizes.setdefault(f"{stage}[{a:+d}]", []).append(int(fit.support.size))
        fold_models.append(model)

        if method == "racer":
            mu = {a: model[a].predict(X_r[test]) for a in ARMS}
        else:
            mu = {a: os_pred_r[a][test] + model[a].predict(design_r[test]) for a in ARMS}
        pi1 = prop.pi_treat(X_r[test])
        m = cmo_from_means(mu[1], mu[-1], pi1)
        a_te = rct.treatment[test]
        pi_a = np.where(a_te == 1, pi1, 1 - pi1)
        psi[test] = pseudo_outcome_values(a_te, rct.outcome[test], m, pi_a)
        if method != "racer":
            offset[test] = mu[1] - mu[-1]

    final = _fit_stage(
        cfg,
        "final",
        X_r,
        psi,
        stage_seed(cfg.seed, "final"),
        offset=None if method == "racer" else offset,
        strata=rct.treatment,
    )
    stage_lambdas["final"] = final.lambda_used
    support_sizes["final"] = int(final.support.size)

    est = CateEstimate(
        method=method,
        tau_hat=np.empty(0),
        final_fit=final,
        partition=part,
        folds=folds,
        train_index=train_index,
        stage_lambdas=stage_lambdas,
        support_sizes=support_sizes,
        pseudo_outcomes=psi,
        offset_crossfit=offset,
        X_train=X_r,
        os_models=os_models,
        fold_models=fold_models,
        imputation=imputation,
        v_train=V_r if method == "r_oscar" else None,
    )
    est.tau_hat = predict_cate(est, X_r, V=est.v_train)
    return est


def preliminary_cate(est: CateEstimate, X_r, V=None):
    """Fold-averaged preliminary CATE; zero for RACER."""
    X_r = _check_rows(est, X_r)
    if est.method == "racer":
        return np.zeros(X_r.shape[0])
    part = est.partition
    Z = X_r[:, part.p_u :]
    if est.method == "mr_oscar":
        V = est.imputation.predict(Z)
    elif est.method == "r_oscar":
        if V is None:
            raise BlockUnavailable("R-OSCAR prediction needs the true V for the new rows")
        V = np.atleast_2d(np.asarray(V, dtype=float))
        if V.shape != (X_r.shape[0], part.p_v):
            raise DimensionMismatch(f"V must have shape {(X_r.shape[0], part.p_v)}")
    else:
        V = np.zeros((X_r.shape[0], 0))
    total = np.zeros(X_r.shape[0])
    for model in est.fold_models:
        mu = _arm_means(est.os_models, est.method, X_r, Z, V, model)
        total += mu[1] - mu[-1]
    return total / len(est.fold_models)


def _check_rows(est, X_r):
    X_r = np.atleast_2d(np.asarray(X_r, dtype=float))
    if X_r.shape[1] != est.partition.p_r:
        raise DimensionMismatch(f"expected {est.partition.p_r} trial covariates, got {X_r.shape[1]}")
    return X_r


def predict_cate(est: CateEstimate, X_r, V=None):
    """CATE prediction: preliminary CATE plus the final-stage linear fit."""
    X_r = _check_rows(est, X_r)
    return preliminary_cate(est, X_r, V) + est.final_fit.predict(X_r)


def cate_confidence_intervals(est: CateEstimate, X_r=None, V=None, level=0.95):
    """Post-LASSO OLS intervals for the CATE.

    Refits the final regression by OLS on its selected support (with the
    cross-fitted preliminary CATE as offset) and returns
    ``(center, lower, upper)`` for the rows ``X_r`` (default: training rows).
    The preliminary CATE is treated as fixed.
    """
    ols = post_lasso_ols(
        est.X_train,
        est.pseudo_outcomes,
        None if est.method == "racer" else est.offset_crossfit,
        est.final_fit.support,
    )
    if X_r is None:
        X_r, V = est.X_train, est.v_train
    X_r = _check_rows(est, X_r)
    center = preliminary_cate(est, X_r, V) + ols.predict(X_r)
    half = stats.norm.ppf(0.5 + level / 2) * ols.prediction_se(X_r)
    return center, center - half, center + half


def attach_confidence_intervals(est: CateEstimate, level=0.95) -> CateEstimate:
    center, lo, hi = cate_confidence_intervals(est, level=level)
    est.ci_center, est.ci_lower, est.ci_upper, est.ci_level = center, lo, hi, level
    return est


def fit_racer(fused: FusedSample, cfg: EstimatorConfig | None = None) -> CateEstimate:
    return _pipeline(fused, cfg or EstimatorConfig(method="racer"), "racer")


def fit_sr_oscar(fused: FusedSample, cfg: EstimatorConfig | None = None) -> CateEstimate:
    return _pipeline(fused, cfg or EstimatorConfig(method="sr_oscar"), "sr_oscar")


def fit_mr_oscar(fused: FusedSample, cfg: EstimatorConfig | None = None) -> CateEstimate:
    return _pipeline(fused, cfg or EstimatorConfig(method="mr_oscar"), "mr_oscar")


def fit_r_oscar(fused: FusedSample, cfg: EstimatorConfig | None = None) -> CateEstimate:
    return _pipeline(fused, cfg or EstimatorConfig(method="r_oscar"), "r_oscar")


FITTERS = {
    "racer": fit_racer,
    "sr_oscar": fit_sr_oscar,
    "mr_oscar": fit_mr_oscar,
    "r_oscar": fit_r_oscar,
}


def fit_method(method, fused, cfg: EstimatorConfig | None = None) -> CateEstimate:
    if method not in FITTERS:
        raise ValueError(f"unknown method {method!r}")
    return FITTERS[method](fused, cfg)


# ---------------------------------------------------------------------------
# scikit-learn style estimators


class _CateEstimator(BaseEstimator):
    _method = None

    def __init__(
        self,
        n_crossfit_folds=5,
        cv_folds=5,
        path_length=DEFAULT_PATH_LENGTH,
        rct_propensity=0.5,
        standardize=True,
        random_state=0,
    ):
        self.n_crossfit_folds = n_crossfit_folds
        self.cv_folds = cv_folds
        self.path_length = path_length
        self.rct_propensity = rct_propensity
        self.standardize = standardize
        self.random_state = random_state

    def _config(self):
        return EstimatorConfig(
            method=self._method,
            n_crossfit_folds=self.n_crossfit_folds,
            cv_folds=self.cv_folds,
            seed=self.random_state,
            path_length=self.path_length,
            rct_propensity=self.rct_propensity,
            standardize=self.standardize,
        )

    def fit(self, X, y=None, treatment=None, *, X_os=None, y_os=None, treatment_os=None,
            partition=None, V=None):
        """Fit on a :class:`FusedSample` or on raw trial/OS arrays.

        With arrays, ``X`` holds the trial covariates ``(U, Z)``, ``X_os`` the
        OS covariates ``(Z, V)`` and ``partition`` the block sizes (a
        :class:`BlockPartition` or a ``(p_u, p_z, p_v)`` tuple). ``V`` passes
        true OS-only covariates for trial rows (R-OSCAR only).
        """
        if isinstance(X, FusedSample):
            fused = X
        else:
            if partition is None:
                raise ValueError("partition is required when fitting on arrays")
            part = partition if isinstance(partition, BlockPartition) else BlockPartition(*partition)
            rct = as_source_sample(X, treatment, y, "rct", part, v_oracle=V)
            if X_os is None:
                os = as_source_sample(np.zeros((0, part.p_o)), [], [], "os", part)
            else:
                os = as_source_sample(X_os, treatment_os, y_os, "os", part)
            fused = FusedSample(rct, os, part)
        self.estimate_ = _pipeline(fused, self._config(), self._method)
        self.n_features_in_ = fused.partition.p_r
        return self

    def predict(self, X, V=None):
        check_is_fitted(self, "estimate_")
        return predict_cate(self.estimate_, X, V)

    def confidence_intervals(self, X=None, V=None, level=0.95):
        check_is_fitted(self, "estimate_")
        return cate_confidence_intervals(self.estimate_, X, V, level)


class RACER(_CateEstimator):
    """Trial-only estimator: arm-wise outcome LASSOs plus pseudo-outcome regression."""

    _method = "racer"


class SROSCAR(_CateEstimator):
    """Shared-covariate borrowing from the OS with trial calibration."""

    _method = "sr_oscar"


class MROSCAR(_CateEstimator):
    """Imputation-augmented borrowing: V is imputed in the trial from Z."""

    _method = "mr_oscar"


class ROSCAR(_CateEstimator):
    """Oracle variant with the true V available on trial rows."""

    _method = "r_oscar"
