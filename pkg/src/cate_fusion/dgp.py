"""
Linear-Gaussian simulation design for two-source CATE experiments.

The latent covariate vector ``X = (U, Z, V)`` is equicorrelated Gaussian.
Trial draws have their ``U`` block shifted by ``delta_u`` and treatment by a
fair coin; OS draws are treated with a logistic propensity on a few ``Z``
coordinates. Potential outcomes are linear, ``Y(a) = X'beta_a + eps``, with
a sparse CATE on the trial covariates and a few trial-specific coefficient
perturbations ("outcome shift").

With ``r2_target`` set, ``V`` is instead generated as ``Lambda Z + eps_V``
with per-coordinate noise chosen so the population R^2 of ``V_j`` on ``Z``
equals the target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import optimize, special

from .data import BlockPartition, FusedSample, SourceSample
from .exceptions import CalibrationFailure, InfeasiblePartition, ZeroSignalRow

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(80)


@dataclass
class DgpConfig:
    p: int = 100
    f1: float = 0.3
    f2: float = 0.3
    rho: float = 0.4
    n_r: int = 300
    n_o: int = 1000
    n_eval: int = 2000
    signal_prop: float = 0.05
    signal_mag: float = 2 / 3
    v_coef_mag: float = 1.0
    v_signal_prop: float = 0.1
    tau_prop: float = 0.05
    tau_mag: float = 2 / 3
    tau_block: str = "X^r"
    perturb_prop: float = 0.02
    perturb_mag: float = 0.25
    noise_sd: float = 0.5
    delta_u_low: float = 0.25
    delta_u_high: float = 0.5
    prop_active: int = 10
    gamma_low: float = 0.25
    gamma_high: float = 0.5
    treated_share: float = 1 / 3
    r2_target: float | None = None
    lambda_row_sparsity: int = 5
    lambda_signal_var: float = 0.5
    lambda_seed: int | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("p", "n_r", "n_o", "n_eval"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.f1 < 0 or self.f2 < 0 or self.f1 + self.f2 > 0.8 + 1e-12:
            raise InfeasiblePartition(f"fractions f1={self.f1}, f2={self.f2} need f1 + f2 <= 0.8")
        if not -1 / (self.p - 1 if self.p > 1 else 1) < self.rho < 1:
            raise ValueError(f"rho={self.rho} does not give a positive definite equicorrelation")
        if self.r2_target is not None and not 0 < self.r2_target < 1:
            raise ValueError("r2_target must lie in (0, 1)")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")

    @property
    def partition(self) -> BlockPartition:
        p_u = math.floor(self.f1 * self.p + 1e-9)
        p_v = math.floor(self.f2 * self.p + 1e-9)
        p_z = self.p - p_u - p_v
        if p_z < 1:
            raise InfeasiblePartition(f"p_u={p_u} and p_v={p_v} leave no shared columns out of p={self.p}")
        return BlockPartition(p_u, p_z, p_v)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class DgpTruth:
    """Population quantities of one draw of the design."""

    partition: BlockPartition
    beta_treat: np.ndarray
    beta_control: np.ndarray
    beta_treat_rct: np.ndarray
    beta_control_rct: np.ndarray
    delta_u: np.ndarray
    gamma: np.ndarray
    gamma_index: np.ndarray
    alpha0: float
    Lambda: np.ndarray
    Sigma_v_given_z: np.ndarray
    Sigma_zz: np.ndarray
    Sigma_rr: np.ndarray
    cond_v_coef: np.ndarray
    cond_v_intercept: np.ndarray
    noise_sd: float
    intercept_treat: float = 0.0
    intercept_control: float = 0.0
    r2_target: float | None = None

    @property
    def sigma_v_given_z(self):
        """Per-coordinate conditional sd of V given Z."""
        return np.sqrt(np.diag(self.Sigma_v_given_z))

    @property
    def tau_coef(self):
        """CATE coefficients on the trial covariates ``(U, Z)``."""
        p_r = self.partition.p_r
        return (self.beta_treat_rct - self.beta_control_rct)[:p_r]

    def true_cate(self, X_r):
        X_r = np.atleast_2d(np.asarray(X_r, dtype=float))
        return (self.intercept_treat - self.intercept_control) + X_r @ self.tau_coef

    def conditional_v_mean(self, X_r):
        """``E[V | U, Z]`` in the trial population."""
        X_r = np.atleast_2d(np.asarray(X_r, dtype=float))
        return self.cond_v_intercept + X_r @ self.cond_v_coef.T

    def os_treat_prob(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return special.expit(self.alpha0 + Z[:, self.gamma_index] @ self.gamma)


@dataclass
class EvalSet:
    X_r: np.ndarray
    V: np.ndarray
    tau: np.ndarray

    @property
    def n(self):
        return self.X_r.shape[0]


def equicorrelation(p, rho):
    return (1 - rho) * np.eye(p) + rho * np.ones((p, p))


def equicorrelated_normal(rng, n, p, rho):
    """``n`` draws from N(0, (1-rho)I + rho 11') via a one-factor representation."""
    if rho >= 0:
        W = rng.standard_normal((n, p))
        g = rng.standard_normal((n, 1))
        return math.sqrt(1 - rho) * W + math.sqrt(rho) * g
    # negative correlation has no one-factor form; fall back to Cholesky
    L = np.linalg.cholesky(equicorrelation(p, rho))
    return rng.standard_normal((n, p)) @ L.T


def calibrate_alpha0(scale, target):
    """Intercept with ``E[expit(alpha0 + scale * xi)] = target``, xi ~ N(0, 1).

    The expectation is evaluated by Gauss-Hermite quadrature.
    """
    w = _GH_WEIGHTS / _GH_WEIGHTS.sum()

    def gap(a0):
        return float(w @ special.expit(a0 + scale * _GH_NODES)) - target

    lo, hi = -20.0 - 10 * scale, 20.0 + 10 * scale
    if gap(lo) * gap(hi) > 0:
        raise CalibrationFailure(f"cannot bracket alpha0 for target share {target}")
    return optimize.brentq(gap, lo, hi, xtol=1e-12)


def _signed(rng, k, mag_low, mag_high=None):
    mags = np.full(k, float(mag_low)) if mag_high is None else rng.uniform(mag_low, mag_high, k)
    return mags * rng.choice([-1.0, 1.0], k)


def _count(prop, size):
    return max(1, math.floor(prop * size + 1e-9)) if size else 0


def draw_lambda(cfg: DgpConfig, partition: BlockPartition, rng=None, max_resample=100):
    """Sparse imputation map ``Lambda`` (p_v x p_z) for the R^2 design.

    Each row has ``lambda_row_sparsity`` Gaussian entries, rescaled so that
    ``Var(lambda_j' Z) = lambda_signal_var``. All-zero rows are redrawn.
    """
    if rng is None:
        seed = cfg.seed if cfg.lambda_seed is None else cfg.lambda_seed
        rng = np.random.default_rng([int(seed), 0x1A3])
    p_z, p_v = partition.p_z, partition.p_v
    S_zz = equicorrelation(p_z, cfg.rho)
    k = min(cfg.lambda_row_sparsity, p_z)
    Lam = np.zeros((p_v, p_z))
    for j in range(p_v):
        for _ in range(max_resample):
            row = np.zeros(p_z)
            idx = rng.choice(p_z, k, replace=False)
            row[idx] = rng.standard_normal(k)
            var = row @ S_zz @ row
            if var > 1e-12:
                Lam[j] = row * math.sqrt(cfg.lambda_signal_var / var)
                break
        else:
            raise ZeroSignalRow(f"Lambda row {j} stayed degenerate after {max_resample} draws")
    return Lam


def r2_noise_variances(Lam, Sigma_zz, r2):
    """Per-coordinate noise variances ``Var(lambda_j'Z) (1 - R^2) / R^2``."""
    signal = np.einsum("ij,jk,ik->i", Lam, Sigma_zz, Lam)
    if np.any(signal <= 0):
        raise ZeroSignalRow(f"rows {np.flatnonzero(signal <= 0).tolist()} of Lambda carry no signal")
    return signal * (1 - r2) / r2


def _draw_truth(cfg: DgpConfig, rng, Lam=None) -> DgpTruth:
    part = cfg.partition
    p, p_u, p_z, p_v, p_r = part.p, part.p_u, part.p_z, part.p_v, part.p_r

    delta_u = _signed(rng, p_u, cfg.delta_u_low, cfg.delta_u_high)

    # prognostic part shared by both arms
    base = np.zeros(p)
    idx = rng.choice(p_r, _count(cfg.signal_prop, p_r), replace=False)
    base[idx] = _signed(rng, idx.size, cfg.signal_mag)
    if p_v:
        v_idx = p_r + rng.choice(p_v, _count(cfg.v_signal_prop, p_v), replace=False)
        base[v_idx] = _signed(rng, v_idx.size, cfg.v_coef_mag)
    tau = np.zeros(p)
    pool = {"X^r": np.arange(p_r), "Z": np.arange(p_u, p_r), "U": np.arange(p_u)}[cfg.tau_block]
    if pool.size == 0:
        pool = np.arange(p_r)
    t_idx = rng.choice(pool, min(pool.size, _count(cfg.tau_prop, p_r)), replace=False)
    tau[t_idx] = _signed(rng, t_idx.size, cfg.tau_mag)
    beta_control = base
    beta_treat = base + tau

    # trial-only coefficient perturbation, common to both arms
    shift = np.zeros(p)
    s_idx = rng.choice(p_r, _count(cfg.perturb_prop, p_r), replace=False)
    shift[s_idx] = _signed(rng, s_idx.size, cfg.perturb_mag)

    k = min(cfg.prop_active, p_z)
    gamma_index = np.sort(rng.choice(p_z, k, replace=False))
    gamma = _signed(rng, k, cfg.gamma_low, cfg.gamma_high)
    S_zz = equicorrelation(p_z, cfg.rho)
    scale = math.sqrt(float(gamma @ S_zz[np.ix_(gamma_index, gamma_index)] @ gamma))
    alpha0 = calibrate_alpha0(scale, cfg.treated_share)

    S_rr = equicorrelation(p_r, cfg.rho)
    if cfg.r2_target is None:
        S = equicorrelation(p, cfg.rho)
        S_vz = S[p_r:, p_u:p_r]
        S_vr = S[p_r:, :p_r]
        Lam = np.linalg.solve(S_zz, S_vz.T).T
        S_v_z = S[p_r:, p_r:] - Lam @ S_vz.T
        cond_coef = np.linalg.solve(S_rr, S_vr.T).T
        mean_r = np.r_[delta_u, np.zeros(p_z)]
        cond_int = -cond_coef @ mean_r
    else:
        if Lam is None:
            Lam = draw_lambda(cfg, part)
        S_v_z = np.diag(r2_noise_variances(Lam, S_zz, cfg.r2_target))
        cond_coef = np.hstack([np.zeros((p_v, p_u)), Lam])
        cond_int = np.zeros(p_v)

    return DgpTruth(
        partition=part,
        beta_treat=beta_treat,
        beta_control=beta_control,
        beta_treat_rct=beta_treat + shift,
        beta_control_rct=beta_control + shift,
        delta_u=delta_u,
        gamma=gamma,
        gamma_index=gamma_index,
        alpha0=alpha0,
        Lambda=Lam,
        Sigma_v_given_z=S_v_z,
        Sigma_zz=S_zz,
        Sigma_rr=S_rr,
        cond_v_coef=cond_coef,
        cond_v_intercept=cond_int,
        noise_sd=cfg.noise_sd,
        r2_target=cfg.r2_target,
    )


def draw_covariates(cfg: DgpConfig, truth: DgpTruth, rng, n, source):
    """Full latent ``(U, Z, V)`` rows for one source."""
    part = truth.partition
    if cfg.r2_target is None:
        X = equicorrelated_normal(rng, n, part.p, cfg.rho)
    else:
        R = equicorrelated_normal(rng, n, part.p_r, cfg.rho)
        sd = np.sqrt(np.diag(truth.Sigma_v_given_z))
        V = R[:, part.p_u :] @ truth.Lambda.T + rng.standard_normal((n, part.p_v)) * sd
        X = np.hstack([R, V])
    if source == "rct":
        X[:, : part.p_u] += truth.delta_u
    return X


def _outcomes(rng, X, a, b_treat, b_control, noise_sd):
    mean = np.where(a == 1, X @ b_treat, X @ b_control)
    return mean + noise_sd * rng.standard_normal(X.shape[0])


def generate(cfg: DgpConfig, Lambda=None):
    """Draw one replicate: ``(FusedSample, DgpTruth, EvalSet)``.

    The trial sample carries the true ``V`` as ``v_oracle`` for oracle
    methods and diagnostics; estimators that must not see it never read it.
    """
    part = cfg.partition
    rng = np.random.default_rng(int(cfg.seed))
    truth = _draw_truth(cfg, rng, Lambda)
    p_r = part.p_r

    X_o = draw_covariates(cfg, truth, rng, cfg.n_o, "os")
    pi_o = truth.os_treat_prob(X_o[:, part.p_u : p_r])
    a_o = np.where(rng.random(cfg.n_o) < pi_o, 1.0, -1.0)
    y_o = _outcomes(rng, X_o, a_o, truth.beta_treat, truth.beta_control, cfg.noise_sd)

    X_r = draw_covariates(cfg, truth, rng, cfg.n_r, "rct")
    a_r = np.where(rng.random(cfg.n_r) < 0.5, 1.0, -1.0)
    y_r = _outcomes(rng, X_r, a_r, truth.beta_treat_rct, truth.beta_control_rct, cfg.noise_sd)

    X_e = draw_covariates(cfg, truth, rng, cfg.n_eval, "rct")
    evaluation = EvalSet(X_e[:, :p_r], X_e[:, p_r:], truth.true_cate(X_e[:, :p_r]))

    rct = SourceSample(X_r[:, :p_r], a_r, y_r, "rct", part, v_oracle=X_r[:, p_r:])
    os = SourceSample(X_o[:, part.p_u :], a_o, y_o, "os", part)
    return FusedSample(rct, os, part), truth, evaluation


def generate_r2_controlled(cfg: DgpConfig, Lambda=None):
    """:func:`generate` with ``V = Lambda Z + eps`` at the configured R^2.

    ``Lambda`` defaults to :func:`draw_lambda` under ``cfg.lambda_seed``
    (falling back to ``cfg.seed``), so configs differing only in
    ``r2_target`` share the same map.
    """
    if cfg.r2_target is None:
        raise ValueError("generate_r2_controlled needs cfg.r2_target")
    if Lambda is None:
        Lambda = draw_lambda(cfg, cfg.partition)
    Lambda = np.asarray(Lambda, dtype=float)
    part = cfg.partition
    if Lambda.shape != (part.p_v, part.p_z):
        raise ValueError(f"Lambda must have shape {(part.p_v, part.p_z)}")
    return generate(cfg, Lambda)


def true_cate_rmse(est, eval_set: EvalSet, truth: DgpTruth | None = None) -> float:
    """Root mean squared error of a CATE estimate on the evaluation rows.

    ``est`` may be a fitted :class:`~cate_fusion.estimators.CateEstimate`, an
    estimator with ``predict``, or an array of predictions.
    """
    from .estimators import CateEstimate, predict_cate

    if isinstance(est, CateEstimate):
        pred = predict_cate(est, eval_set.X_r, V=eval_set.V)
    elif hasattr(est, "predict"):
        pred = est.predict(eval_set.X_r, V=eval_set.V)
    else:
        pred = np.asarray(est, dtype=float)
    tau = eval_set.tau if truth is None else truth.true_cate(eval_set.X_r)
    return float(np.sqrt(np.mean((pred - tau) ** 2)))
