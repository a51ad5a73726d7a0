"""CATE estimation that anchors on a trial and borrows from an observational study
whose covariates only partly overlap the trial's."""

__version__ = "0.1.0"

from .data import BlockPartition, FusedSample, SourceSample, extract_block, read_csv, validate
from .dgp import DgpConfig, generate, generate_r2_controlled, true_cate_rmse
from .estimators import (
    MROSCAR,
    RACER,
    ROSCAR,
    SROSCAR,
    CateEstimate,
    EstimatorConfig,
    cate_confidence_intervals,
    fit_imputation,
    fit_mr_oscar,
    fit_r_oscar,
    fit_racer,
    fit_sr_oscar,
    predict_cate,
)
from .penalized import PenaltySpec, cv_lasso, fit_lasso, post_lasso_ols
from .pseudo import Propensity, cmo, pseudo_outcome
from .theory import imputation_risk_decompose, transfer_factor

__all__ = [
    "BlockPartition",
    "CateEstimate",
    "DgpConfig",
    "EstimatorConfig",
    "FusedSample",
    "MROSCAR",
    "PenaltySpec",
    "Propensity",
    "RACER",
    "ROSCAR",
    "SROSCAR",
    "SourceSample",
    "cate_confidence_intervals",
    "cmo",
    "cv_lasso",
    "extract_block",
    "fit_imputation",
    "fit_lasso",
    "fit_mr_oscar",
    "fit_r_oscar",
    "fit_racer",
    "fit_sr_oscar",
    "generate",
    "generate_r2_controlled",
    "imputation_risk_decompose",
    "post_lasso_ols",
    "predict_cate",
    "pseudo_outcome",
    "read_csv",
    "transfer_factor",
    "true_cate_rmse",
    "validate",
]
