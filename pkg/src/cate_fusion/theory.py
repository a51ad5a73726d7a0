"""
Exact pieces of the linear-Gaussian imputation-risk analysis.

For a linear imputation map ``V_hat = Lambda_hat Z`` evaluated on the trial
population, where ``V = Lambda_r Z + eps`` with ``eps`` independent of
``Z``, the imputation risk splits into a mean-relation term and a noise
term::

    r_im^2 = E||Lambda_hat Z - V||^2
           = tr(D Sigma_zz D') + ||D mu_z||^2 + tr(Sigma_{V|Z}),   D = Lambda_hat - Lambda_r

because the cross term ``E<D Z, eps>`` is zero. This module evaluates the
closed form, checks it against a Monte-Carlo estimate, and computes the
covariance transfer factor ``kappa`` between sources.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import SingularCovariance


@dataclass
class ImputationTruth:
    """Population imputation structure in the trial (and optionally the OS)."""

    Lambda_r: np.ndarray
    Sigma_zz_r: np.ndarray
    Sigma_v_given_z_r: np.ndarray
    mu_z_r: np.ndarray | None = None
    Lambda_o: np.ndarray | None = None
    Sigma_zz_o: np.ndarray | None = None

    @classmethod
    def from_dgp(cls, truth):
        """Both sources share the map and the Z covariance in the simulation design."""
        return cls(
            Lambda_r=truth.Lambda,
            Sigma_zz_r=truth.Sigma_zz,
            Sigma_v_given_z_r=truth.Sigma_v_given_z,
            mu_z_r=np.zeros(truth.Sigma_zz.shape[0]),
            Lambda_o=truth.Lambda,
            Sigma_zz_o=truth.Sigma_zz,
        )


@dataclass
class ImputationRiskReport:
    r_im_sq_empirical: float
    r_im_sq_se: float
    shift_term: float
    noise_term: float
    estimation_term: float
    kappa: float
    cross_term_empirical: float
    cross_term_se: float
    n_mc: int

    @property
    def analytic(self):
        return self.shift_term + self.noise_term

    @property
    def gap(self):
        return self.r_im_sq_empirical - self.analytic

    @property
    def z_score(self):
        return self.gap / self.r_im_sq_se if self.r_im_sq_se > 0 else (0.0 if self.gap == 0 else np.inf)

    def to_dict(self):
        out = asdict(self)
        out.update(analytic=self.analytic, gap=self.gap)
        return out

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def _psd_sqrt(S):
    """Symmetric square root that tolerates singular PSD matrices."""
    S = np.asarray(S, dtype=float)
    w, Q = np.linalg.eigh((S + S.T) / 2)
    return (Q * np.sqrt(np.clip(w, 0.0, None))) @ Q.T


def imputation_risk_decompose(Lambda_hat, truth, n_mc=100_000, rng=None) -> ImputationRiskReport:
    """Analytic trace terms plus a Monte-Carlo estimate of the imputation risk.

    Parameters
    ----------
    Lambda_hat : (p_v, p_z) array
        Linear imputation map being assessed.
    truth : ImputationTruth or DgpTruth
        Population structure; a ``DgpTruth`` is converted with
        :meth:`ImputationTruth.from_dgp`.
    n_mc : int
        Fresh trial draws for the Monte-Carlo estimate.
    rng : Generator or int, optional

    Returns
    -------
    ImputationRiskReport
        ``estimation_term`` is the part of the shift term due to
        ``Lambda_hat - Lambda_o``, i.e. ``tr(E Sigma_zz_r E')``; ``kappa`` is
        the transfer factor when both Z covariances are known (else NaN).
    """
    if not isinstance(truth, ImputationTruth):
        truth = ImputationTruth.from_dgp(truth)
    rng = np.random.default_rng(rng)
    L_hat = np.atleast_2d(np.asarray(Lambda_hat, dtype=float))
    L_r = np.atleast_2d(np.asarray(truth.Lambda_r, dtype=float))
    S_zz = np.asarray(truth.Sigma_zz_r, dtype=float)
    S_vz = np.atleast_2d(np.asarray(truth.Sigma_v_given_z_r, dtype=float))
    p_z = S_zz.shape[0]
    mu = np.zeros(p_z) if truth.mu_z_r is None else np.asarray(truth.mu_z_r, dtype=float)
    if L_hat.shape != L_r.shape:
        raise ValueError(f"Lambda_hat shape {L_hat.shape} != Lambda_r shape {L_r.shape}")

    D = L_hat - L_r
    shift = float(np.trace(D @ S_zz @ D.T) + np.sum((D @ mu) ** 2))
    noise = float(np.trace(S_vz))
    if truth.Lambda_o is not None:
        E = L_hat - np.asarray(truth.Lambda_o, dtype=float)
        estimation = float(np.trace(E @ S_zz @ E.T) + np.sum((E @ mu) ** 2))
    else:
        estimation = float("nan")
    kappa = transfer_factor(S_zz, truth.Sigma_zz_o) if truth.Sigma_zz_o is not None else float("nan")

    Z = mu + rng.standard_normal((n_mc, p_z)) @ _psd_sqrt(S_zz)
    eps = rng.standard_normal((n_mc, S_vz.shape[0])) @ _psd_sqrt(S_vz)
    V = Z @ L_r.T + eps
    err = np.sum((Z @ L_hat.T - V) ** 2, axis=1)
    cross = np.sum((Z @ D.T) * eps, axis=1)
    se = lambda x: float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else float("nan")
    return ImputationRiskReport(
        r_im_sq_empirical=float(err.mean()),
        r_im_sq_se=se(err),
        shift_term=shift,
        noise_term=noise,
        estimation_term=estimation,
        kappa=kappa,
        cross_term_empirical=float(cross.mean()),
        cross_term_se=se(cross),
        n_mc=int(n_mc),
    )


def transfer_factor(Sigma_r, Sigma_o, tol=1e-8, max_iter=100_000) -> float:
    """``kappa = ||Sigma_r Sigma_o^{-1}||_op`` by power iteration.

    Iterates on the symmetric form ``L^{-1} Sigma_r L^{-T}`` with
    ``Sigma_o = L L'``, which has the same spectrum as
    ``Sigma_o^{-1/2} Sigma_r Sigma_o^{-1/2}``.
    """
    S_r = np.atleast_2d(np.asarray(Sigma_r, dtype=float))
    S_o = np.atleast_2d(np.asarray(Sigma_o, dtype=float))
    if S_r.shape != S_o.shape or S_r.shape[0] != S_r.shape[1]:
        raise ValueError("covariances must be square and of equal size")
    try:
        L = np.linalg.cholesky((S_o + S_o.T) / 2)
    except np.linalg.LinAlgError:
        raise SingularCovariance("Sigma_o is not positive definite") from None
    if np.min(np.diag(L)) <= 1e-12 * max(1.0, np.max(np.diag(L))):
        raise SingularCovariance("Sigma_o is numerically singular")
    Li = np.linalg.solve(L, np.eye(L.shape[0]))
    M = Li @ ((S_r + S_r.T) / 2) @ Li.T

    x = np.ones(M.shape[0]) + 0.01 * np.arange(M.shape[0])
    x /= np.linalg.norm(x)
    lam = float(x @ M @ x)
    for _ in range(max_iter):
        y = M @ x
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
        new = float(x @ M @ x)
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            return new
        lam = new
    return lam


def psd_margin(Sigma_r, Sigma_o, kappa=None) -> float:
    """Smallest eigenvalue of ``kappa Sigma_o - Sigma_r`` (nonnegative up to rounding)."""
    if kappa is None:
        kappa = transfer_factor(Sigma_r, Sigma_o)
    return float(np.linalg.eigvalsh(kappa * np.asarray(Sigma_o) - np.asarray(Sigma_r)).min())
