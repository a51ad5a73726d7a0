"""
Penalized linear and logistic regression by cyclic coordinate descent.

Every stage of the CATE pipelines (outcome models, discrepancy models,
imputation maps and the final pseudo-outcome regression) is a LASSO fit
through this module. The squared-error objective is

    (1/n) * sum_i (y_i - offset_i - b0 - x_i'b)^2 + lam * ||b||_1

and the logistic objective is the mean negative log-likelihood plus
``lam * ||b||_1``. The intercept is never penalized. With
``standardize=True`` the penalty applies to coefficients of columns scaled
to unit (1/n) variance, and coefficients are reported on the original scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import special
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import (
    ConvergenceWarning,
    DimensionMismatch,
    EmptyFold,
    RankDeficient,
    SeparationWarning,
)

PATH_EPS = 1e-3
DEFAULT_PATH_LENGTH = 100
# convergence threshold for CV path exploration, relative to the null variance
PATH_TOL = 1e-7


@dataclass(frozen=True)
class PenaltySpec:
    lam: float = 0.0
    standardize: bool = True
    max_iter: int = 10_000
    tol: float = 1e-7
    penalize_intercept: bool = False

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lam must be nonnegative, got {self.lam}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be a positive integer")
        if self.penalize_intercept:
            raise ValueError("the intercept is never penalized")


@dataclass
class PenalizedFit:
    intercept: float
    coefficients: np.ndarray
    lambda_used: float
    objective_value: float
    converged: bool
    n_iter: int = 0

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.coefficients)

    def decision_function(self, X, offset=None):
        eta = np.asarray(X, dtype=float) @ self.coefficients + self.intercept
        if offset is not None:
            eta = eta + offset
        return eta

    def predict(self, X, offset=None):
        return self.decision_function(X, offset)


@dataclass
class CvResult:
    lambda_path: np.ndarray
    cv_mean_loss: np.ndarray
    lambda_min: float
    fold_assignments: np.ndarray
    loss: str = "squared"
    cv_se: np.ndarray | None = None
    lambda_selected: float | None = None

    @property
    def index_min(self) -> int:
        return int(np.flatnonzero(self.lambda_path == self.lambda_min)[0])

    @property
    def lambda_1se(self) -> float:
        return float(self.lambda_path[_one_se_index(self.cv_mean_loss, self.cv_se)])


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _cd_gram(G, c, pen, beta, Gb, tol, max_iter, weighted=False):
    """Minimise 0.5 b'Gb - c'b + pen * |b|_1 in place.

    ``Gb`` must hold G @ beta on entry and is kept in sync. Returns the number
    of sweeps used and whether the max coefficient change fell below ``tol``.
    With ``weighted`` the change is measured as G_jj * delta^2 (the glmnet
    rule), which tracks the objective rather than the coefficients.
    """
    p = G.shape[0]
    sweeps = 0
    active = np.empty(p, dtype=np.int64)
    while sweeps < max_iter:
        max_delta = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            z = c[j] - Gb[j] + gjj * beta[j]
            if z > pen:
                new = (z - pen) / gjj
            elif z < -pen:
                new = (z + pen) / gjj
            else:
                new = 0.0
            delta = new - beta[j]
            if delta != 0.0:
                for k in range(p):
                    Gb[k] += delta * G[j, k]
                beta[j] = new
                d = gjj * delta * delta if weighted else abs(delta)
                if d > max_delta:
                    max_delta = d
        sweeps += 1
        if max_delta < tol:
            return sweeps, True
        n_active = 0
        for j in range(p):
            if beta[j] != 0.0:
                active[n_active] = j
                n_active += 1
        while sweeps < max_iter:
            max_delta = 0.0
            for a in range(n_active):
                j = active[a]
                gjj = G[j, j]
                z = c[j] - Gb[j] + gjj * beta[j]
                if z > pen:
                    new = (z - pen) / gjj
                elif z < -pen:
                    new = (z + pen) / gjj
                else:
                    new = 0.0
                delta = new - beta[j]
                if delta != 0.0:
                    for k in range(p):
                        Gb[k] += delta * G[j, k]
                    beta[j] = new
                    d = gjj * delta * delta if weighted else abs(delta)
                    if d > max_delta:
                        max_delta = d
            sweeps += 1
            if max_delta < tol:
                break
    return sweeps, False


@njit(cache=True)
def _cd_path(G, c, pens, tol, max_iter, yy, early_stop, weighted=False):
    """Warm-started path. With ``early_stop`` the path is cut once the
    training deviance ratio stops moving (relative gain < 1e-5 after five
    points) or exceeds 0.999; remaining rows repeat the last solution and
    ``n_used`` reports how many points were actually solved."""
    p = G.shape[0]
    L = pens.shape[0]
    B = np.zeros((L, p))
    beta = np.zeros(p)
    Gb = np.zeros(p)
    sweeps = np.zeros(L, dtype=np.int64)
    converged = np.zeros(L, dtype=np.bool_)
    prev = 0.0
    n_used = L
    for l in range(L):
        s, ok = _cd_gram(G, c, pens[l], beta, Gb, tol, max_iter, weighted)
        sweeps[l] = s
        converged[l] = ok
        B[l] = beta
        if early_stop and yy > 0.0:
            rss = yy - 2.0 * np.dot(c, beta) + np.dot(beta, Gb)
            ratio = 1.0 - rss / yy
            if l >= 4 and (ratio >= 0.999 or (ratio > 0.0 and ratio - prev < 1e-5 * ratio)):
                n_used = l + 1
                for m in range(l + 1, L):
                    B[m] = beta
                    converged[m] = ok
                break
            prev = ratio
    return B, sweeps, converged, n_used


# ---------------------------------------------------------------------------
# helpers


def _as_design(X, y=None, offset=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DimensionMismatch("design matrix must be two-dimensional")
    n = X.shape[0]
    if y is not None:
        y = np.asarray(y, dtype=float).ravel()
        if y.shape[0] != n:
            raise DimensionMismatch(f"X has {n} rows but y has {y.shape[0]}")
    if offset is not None:
        offset = np.asarray(offset, dtype=float).ravel()
        if offset.shape[0] != n:
            raise DimensionMismatch(f"X has {n} rows but offset has {offset.shape[0]}")
    if n < 2:
        raise DimensionMismatch("need at least two rows")
    if not np.all(np.isfinite(X)) or (y is not None and not np.all(np.isfinite(y))):
        raise ValueError("inputs contain NaN or infinite values")
    return X, y, offset


def _column_scaling(X, standardize):
    mean = X.mean(axis=0)
    if standardize:
        scale = X.std(axis=0)
        scale[scale <= 1e-12 * np.maximum(1.0, np.abs(mean))] = 0.0
    else:
        scale = np.ones(X.shape[1])
        scale[np.ptp(X, axis=0) == 0] = 0.0
    return mean, scale


def _gram(X, r, mean, scale):
    """Gram matrix and correlation vector of centered, scaled columns."""
    n = X.shape[0]
    safe = np.where(scale > 0, scale, 1.0)
    Xs = (X - mean) / safe
    Xs[:, scale == 0] = 0.0
    G = Xs.T @ Xs / n
    c = Xs.T @ (r - r.mean()) / n
    return np.ascontiguousarray(G), c


def _unscale(B, scale):
    safe = np.where(scale > 0, scale, 1.0)
    out = B / safe
    out[..., scale == 0] = 0.0
    return out


def lambda_max(X, y, offset=None, standardize=True):
    """Smallest penalty at which every slope of the squared-error fit is zero."""
    X, y, offset = _as_design(X, y, offset)
    r = y if offset is None else y - offset
    mean, scale = _column_scaling(X, standardize)
    _, c = _gram(X, r, mean, scale)
    return 2.0 * float(np.max(np.abs(c))) if c.size else 0.0


def lambda_path(lam_max, path_length=DEFAULT_PATH_LENGTH, eps=PATH_EPS):
    """Log-spaced descending path from ``lam_max`` to ``eps * lam_max``."""
    if path_length < 1:
        raise ValueError("path_length must be positive")
    top = lam_max if lam_max > 0 else 1e-10
    if path_length == 1:
        return np.array([top])
    return np.geomspace(top, eps * top, path_length)


def soft_threshold(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def _squared_objective(X, r, intercept, coef, lam, scale):
    resid = r - intercept - X @ coef
    return float(np.mean(resid**2) + lam * np.sum(np.abs(coef * scale)))


# ---------------------------------------------------------------------------
# squared error


def fit_lasso(X, y, offset=None, spec: PenaltySpec | None = None) -> PenalizedFit:
    """LASSO fit by cyclic coordinate descent with soft-thresholding.

    A constant column gets a zero coefficient. When ``max_iter`` sweeps are
    exhausted the fit is still returned with ``converged=False`` and a
    :class:`ConvergenceWarning` is issued.
    """
    spec = spec or PenaltySpec()
    X, y, offset = _as_design(X, y, offset)
    r = y if offset is None else y - offset
    mean, scale = _column_scaling(X, spec.standardize)
    G, c = _gram(X, r, mean, scale)
    beta = np.zeros(X.shape[1])
    Gb = np.zeros(X.shape[1])
    sweeps, ok = _cd_gram(G, c, 0.5 * spec.lam, beta, Gb, spec.tol, spec.max_iter)
    return _finish_squared(X, r, beta, mean, scale, spec, sweeps, ok)


def _finish_squared(X, r, beta_std, mean, scale, spec, sweeps, ok):
    coef = _unscale(beta_std, scale)
    intercept = float(r.mean() - mean @ coef)
    pen_scale = scale if spec.standardize else np.ones_like(scale)
    obj = _squared_objective(X, r, intercept, coef, spec.lam, pen_scale)
    if not ok:
        warnings.warn(
            f"coordinate descent did not converge in {spec.max_iter} sweeps "
            f"(lam={spec.lam:.3g})",
            ConvergenceWarning,
            stacklevel=3,
        )
    return PenalizedFit(
        intercept=intercept,
        coefficients=coef,
        lambda_used=float(spec.lam),
        objective_value=obj,
        converged=bool(ok),
        n_iter=int(sweeps),
    )


def lasso_path(X, y, offset=None, lambdas=None, spec: PenaltySpec | None = None):
    """Warm-started fits along a descending penalty path.

    Returns ``(lambdas, intercepts, coefs)`` with ``coefs`` of shape (L, p)
    on the original column scale.
    """
    spec = spec or PenaltySpec()
    X, y, offset = _as_design(X, y, offset)
    r = y if offset is None else y - offset
    mean, scale = _column_scaling(X, spec.standardize)
    G, c = _gram(X, r, mean, scale)
    if lambdas is None:
        lambdas = lambda_path(2.0 * float(np.max(np.abs(c))) if c.size else 0.0)
    lambdas = np.asarray(lambdas, dtype=float)
    B, _, conv, _ = _cd_path(G, c, 0.5 * lambdas, spec.tol, spec.max_iter, 0.0, False)
    if not conv.all():
        warnings.warn(
            f"{int((~conv).sum())} path points did not converge", ConvergenceWarning, stacklevel=2
        )
    coefs = _unscale(B, scale)
    intercepts = r.mean() - coefs @ mean
    return lambdas, intercepts, coefs


def make_folds(n, n_folds, seed=0, strata=None):
    """Deterministic fold labels in ``0..n_folds-1``.

    With ``strata`` each stratum is spread round-robin over the folds, so a
    fold complement always contains every stratum that has at least two units.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be at least 2")
    if n < n_folds:
        raise EmptyFold(f"{n} rows cannot fill {n_folds} folds")
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    if strata is None:
        folds[rng.permutation(n)] = np.arange(n) % n_folds
    else:
        strata = np.asarray(strata).ravel()
        if strata.shape[0] != n:
            raise DimensionMismatch("strata length must equal number of rows")
        start = 0
        for level in np.unique(strata):
            idx = np.flatnonzero(strata == level)
            folds[rng.permutation(idx)] = (start + np.arange(idx.size)) % n_folds
            start += idx.size
    counts = np.bincount(folds, minlength=n_folds)
    if np.any(counts == 0):
        raise EmptyFold(f"fold(s) {np.flatnonzero(counts == 0).tolist()} received no rows")
    return folds


def cv_select_lambda(
    X,
    y,
    offset=None,
    n_folds=5,
    path_length=DEFAULT_PATH_LENGTH,
    loss="squared",
    seed=0,
    strata=None,
    spec: PenaltySpec | None = None,
    eps=PATH_EPS,
) -> CvResult:
    """K-fold cross-validated penalty choice over a log-spaced path."""
    return cv_lasso(X, y, offset, n_folds, path_length, loss, seed, strata, spec, eps)[1]


def cv_lasso(
    X,
    y,
    offset=None,
    n_folds=5,
    path_length=DEFAULT_PATH_LENGTH,
    loss="squared",
    seed=0,
    strata=None,
    spec: PenaltySpec | None = None,
    eps=PATH_EPS,
    rule="min",
):
    """Cross-validate the penalty, then refit on all rows at the chosen one.

    ``rule="min"`` takes the CV-loss minimizer (ties go to the smallest
    penalty); ``rule="1se"`` takes the largest penalty whose CV loss is
    within one standard error of that minimum.

    Returns ``(fit, cv_result)``.
    """
    spec = spec or PenaltySpec()
    if rule not in ("min", "1se"):
        raise ValueError(f"unknown selection rule {rule!r}")
    if loss == "logistic":
        if offset is not None:
            raise ValueError("offsets are not supported for the logistic loss")
        return _cv_logistic(X, y, n_folds, path_length, seed, strata, spec, eps, rule)
    if loss != "squared":
        raise ValueError(f"unknown loss {loss!r}")
    X, y, offset = _as_design(X, y, offset)
    r = y if offset is None else y - offset
    n = X.shape[0]
    folds = make_folds(n, n_folds, seed, strata)

    mean, scale = _column_scaling(X, spec.standardize)
    G, c = _gram(X, r, mean, scale)
    yy = float(np.mean((r - r.mean()) ** 2))
    lam_max = 2.0 * float(np.max(np.abs(c))) if c.size else 0.0
    lambdas = lambda_path(lam_max, path_length, eps)
    # path exploration uses the objective-scale rule; the chosen point is
    # polished to ``spec.tol`` below
    B_full, _, _, n_used = _cd_path(G, c, 0.5 * lambdas, PATH_TOL * yy, spec.max_iter, yy, True, True)
    lambdas = lambdas[:n_used]
    pens = 0.5 * lambdas

    fold_mse = np.zeros((n_folds, lambdas.size))
    for k in range(n_folds):
        tr = folds != k
        va = ~tr
        Xtr, rtr = X[tr], r[tr]
        m_k, s_k = _column_scaling(Xtr, spec.standardize)
        G_k, c_k = _gram(Xtr, rtr, m_k, s_k)
        yy_k = float(np.mean((rtr - rtr.mean()) ** 2))
        B, _, _, _ = _cd_path(G_k, c_k, pens, PATH_TOL * yy_k, spec.max_iter, yy_k, True, True)
        coefs = _unscale(B, s_k)
        intercepts = rtr.mean() - coefs @ m_k
        pred = X[va] @ coefs.T + intercepts
        fold_mse[k] = np.mean((r[va, None] - pred) ** 2, axis=0)
    counts = np.bincount(folds, minlength=n_folds)
    cv_loss = counts @ fold_mse / n
    cv_se = _fold_se(fold_mse, counts, cv_loss)
    best_min = _argmin_smallest_lambda(cv_loss)
    best = best_min if rule == "min" else _one_se_index(cv_loss, cv_se)
    beta = B_full[best].copy()
    sweeps, ok = _cd_gram(G, c, pens[best], beta, G @ beta, spec.tol, spec.max_iter)
    fit_spec = PenaltySpec(
        lam=float(lambdas[best]), standardize=spec.standardize, max_iter=spec.max_iter, tol=spec.tol
    )
    fit = _finish_squared(X, r, beta, mean, scale, fit_spec, sweeps, ok)
    cv = CvResult(
        lambda_path=lambdas,
        cv_mean_loss=cv_loss,
        lambda_min=float(lambdas[best_min]),
        fold_assignments=folds,
        loss="squared",
        cv_se=cv_se,
        lambda_selected=float(lambdas[best]),
    )
    return fit, cv


def _argmin_smallest_lambda(cv_loss):
    # path is descending, so the last index among exact ties is the smallest penalty
    m = np.min(cv_loss)
    return int(np.flatnonzero(cv_loss == m)[-1])


def _fold_se(fold_loss, counts, cv_loss):
    """Standard error of the pooled CV loss from the fold-wise losses."""
    K = fold_loss.shape[0]
    w = counts / counts.sum()
    var = w @ (fold_loss - cv_loss) ** 2 / max(K - 1, 1)
    return np.sqrt(var)


def _one_se_index(cv_loss, cv_se):
    best = _argmin_smallest_lambda(cv_loss)
    ok = np.flatnonzero(cv_loss <= cv_loss[best] + cv_se[best])
    return int(ok[0])


# ---------------------------------------------------------------------------
# logistic


def _logistic_nll(y, eta):
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta))


def _irls_path(X, y, mean, scale, lambdas, tol, max_iter, max_outer=100):
    """Proximal-Newton (IRLS + weighted CD) along a penalty path.

    Works in standardized coordinates; returns standardized slopes and
    intercepts per path point plus convergence flags.
    """
    n, p = X.shape
    safe = np.where(scale > 0, scale, 1.0)
    Xs = (X - mean) / safe
    Xs[:, scale == 0] = 0.0
    ybar = np.clip(y.mean(), 1e-10, 1 - 1e-10)
    b0 = float(special.logit(ybar))
    beta = np.zeros(p)
    L = lambdas.size
    B = np.zeros((L, p))
    b0s = np.zeros(L)
    conv = np.zeros(L, dtype=bool)
    sweeps_total = 0
    for l, lam in enumerate(lambdas):
        ok = False
        for _ in range(max_outer):
            eta = b0 + Xs @ beta
            prob = special.expit(eta)
            w = np.clip(prob * (1 - prob), 1e-5, None)
            z = eta + (y - prob) / w
            wsum = w.sum()
            xw = (w @ Xs) / wsum
            zw = (w @ z) / wsum
            Xc = Xs - xw
            G = np.ascontiguousarray((Xc * w[:, None]).T @ Xc / n)
            c = (Xc * w[:, None]).T @ (z - zw) / n
            new = beta.copy()
            Gb = G @ new
            s, _ = _cd_gram(G, c, lam, new, Gb, tol, max_iter)
            sweeps_total += s
            new_b0 = zw - xw @ new
            change = max(np.max(np.abs(new - beta), initial=0.0), abs(new_b0 - b0))
            beta, b0 = new, float(new_b0)
            if change < max(tol * 10, 1e-8):
                ok = True
                break
        B[l] = beta
        b0s[l] = b0
        conv[l] = ok
    return B, b0s, conv, sweeps_total


def _logistic_inputs(X, y):
    X, y, _ = _as_design(X, y)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic targets must be 0/1")
    if y.min() == y.max():
        raise ValueError("both classes must be present")
    return X, y


def logistic_lambda_max(X, y, standardize=True):
    X, y = _logistic_inputs(X, y)
    mean, scale = _column_scaling(X, standardize)
    _, c = _gram(X, y, mean, scale)
    return float(np.max(np.abs(c))) if c.size else 0.0


def _finish_logistic(X, y, beta_std, b0_std, mean, scale, spec, ok, sweeps):
    coef = _unscale(beta_std, scale)
    intercept = float(b0_std - mean @ coef)
    eta = intercept + X @ coef
    pen_scale = scale if spec.standardize else np.ones_like(scale)
    obj = _logistic_nll(y, eta) + spec.lam * float(np.sum(np.abs(coef * pen_scale)))
    prob = special.expit(eta)
    if np.any(prob < 1e-8) or np.any(prob > 1 - 1e-8):
        warnings.warn("fitted probabilities within 1e-8 of 0 or 1", SeparationWarning, stacklevel=3)
    if not ok:
        warnings.warn("logistic coordinate descent did not converge", ConvergenceWarning, stacklevel=3)
    return PenalizedFit(
        intercept=intercept,
        coefficients=coef,
        lambda_used=float(spec.lam),
        objective_value=obj,
        converged=bool(ok),
        n_iter=int(sweeps),
    )


def fit_logistic_lasso(X, y, spec: PenaltySpec | None = None) -> PenalizedFit:
    """L1-penalized logistic regression via iteratively reweighted CD."""
    spec = spec or PenaltySpec()
    X, y = _logistic_inputs(X, y)
    mean, scale = _column_scaling(X, spec.standardize)
    lam_max = logistic_lambda_max(X, y, spec.standardize)
    # start from the all-zero solution and walk down for stable warm starts
    lams = np.array([spec.lam]) if spec.lam >= lam_max else np.r_[lam_max, spec.lam]
    B, b0s, conv, sweeps = _irls_path(X, y, mean, scale, lams, spec.tol, spec.max_iter)
    return _finish_logistic(X, y, B[-1], b0s[-1], mean, scale, spec, conv[-1], sweeps)


def _cv_logistic(X, y, n_folds, path_length, seed, strata, spec, eps, rule="min"):
    X, y = _logistic_inputs(X, y)
    n = X.shape[0]
    folds = make_folds(n, n_folds, seed, y if strata is None else strata)
    mean, scale = _column_scaling(X, spec.standardize)
    lambdas = lambda_path(logistic_lambda_max(X, y, spec.standardize), path_length, eps)
    fold_dev = np.zeros((n_folds, lambdas.size))
    for k in range(n_folds):
        tr = folds != k
        va = ~tr
        if y[tr].min() == y[tr].max():
            raise EmptyFold(f"fold {k} complement contains a single class")
        m_k, s_k = _column_scaling(X[tr], spec.standardize)
        B, b0s, _, _ = _irls_path(X[tr], y[tr], m_k, s_k, lambdas, spec.tol, spec.max_iter)
        coefs = _unscale(B, s_k)
        intercepts = b0s - coefs @ m_k
        eta = X[va] @ coefs.T + intercepts
        fold_dev[k] = np.mean(np.logaddexp(0.0, eta) - y[va, None] * eta, axis=0)
    counts = np.bincount(folds, minlength=n_folds)
    cv_loss = counts @ fold_dev / n
    cv_se = _fold_se(fold_dev, counts, cv_loss)
    best_min = _argmin_smallest_lambda(cv_loss)
    best = best_min if rule == "min" else _one_se_index(cv_loss, cv_se)
    B, b0s, conv, sweeps = _irls_path(X, y, mean, scale, lambdas[: best + 1], spec.tol, spec.max_iter)
    fit_spec = PenaltySpec(
        lam=float(lambdas[best]), standardize=spec.standardize, max_iter=spec.max_iter, tol=spec.tol
    )
    fit = _finish_logistic(X, y, B[best], b0s[best], mean, scale, fit_spec, conv[best], sweeps)
    cv = CvResult(lambdas, cv_loss, float(lambdas[best_min]), folds, "logistic", cv_se, float(lambdas[best]))
    return fit, cv


# ---------------------------------------------------------------------------
# post-selection refit


@dataclass
class OlsFit:
    """OLS refit on a selected support, with homoscedastic covariance.

    ``covariance`` is ordered (intercept, support...).
    """

    intercept: float
    coefficients: np.ndarray
    support: np.ndarray
    covariance: np.ndarray
    sigma2: float
    dof: int
    dropped: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))

    def _rows(self, X):
        X = np.asarray(X, dtype=float)
        return np.column_stack([np.ones(X.shape[0]), X[:, self.support]])

    def predict(self, X, offset=None):
        out = np.asarray(X, dtype=float) @ self.coefficients + self.intercept
        return out if offset is None else out + offset

    def prediction_se(self, X):
        D = self._rows(X)
        return np.sqrt(np.einsum("ij,jk,ik->i", D, self.covariance, D))


def _independent_columns(X, support, tol=1e-10):
    """Keep support columns (with intercept) in index order while rank grows."""
    keep, dropped = [], []
    basis = [np.ones(X.shape[0])]
    for j in support:
        trial = np.column_stack(basis + [X[:, j]])
        s = np.linalg.svd(trial - 0.0, compute_uv=False)
        if s[-1] > tol * s[0]:
            keep.append(j)
            basis.append(X[:, j])
        else:
            dropped.append(j)
    return np.array(keep, dtype=int), np.array(dropped, dtype=int)


def post_lasso_ols(X, y, offset=None, support=()) -> OlsFit:
    """OLS on the selected columns plus intercept.

    Collinear support columns are dropped in index order. Raises
    :class:`RankDeficient` when the remaining system has condition number
    above 1e10.
    """
    X, y, offset = _as_design(X, y, offset)
    r = y if offset is None else y - offset
    n, p = X.shape
    support = np.unique(np.asarray(support, dtype=int))
    if support.size and (support.min() < 0 or support.max() >= p):
        raise DimensionMismatch("support index out of range")
    if support.size + 1 >= n:
        raise RankDeficient("support too large for the number of rows")
    keep, dropped = _independent_columns(X, support)
    D = np.column_stack([np.ones(n), X[:, keep]])
    gram = D.T @ D
    if np.linalg.cond(gram) > 1e10:
        raise RankDeficient("post-selection design is ill-conditioned")
    theta = np.linalg.solve(gram, D.T @ r)
    resid = r - D @ theta
    dof = n - keep.size - 1
    sigma2 = float(resid @ resid / dof)
    cov = sigma2 * np.linalg.inv(gram)
    coef = np.zeros(p)
    coef[keep] = theta[1:]
    return OlsFit(
        intercept=float(theta[0]),
        coefficients=coef,
        support=keep,
        covariance=cov,
        sigma2=sigma2,
        dof=dof,
        dropped=dropped,
    )


# ---------------------------------------------------------------------------
# scikit-learn wrappers


class CoordinateDescentLasso(RegressorMixin, BaseEstimator):
    """Fixed-penalty LASSO with the package objective normalization."""

    def __init__(self, lam=0.0, standardize=True, tol=1e-7, max_iter=10_000):
        self.lam = lam
        self.standardize = standardize
        self.tol = tol
        self.max_iter = max_iter

    def _spec(self):
        return PenaltySpec(self.lam, self.standardize, self.max_iter, self.tol)

    def fit(self, X, y, offset=None):
        X = check_array(X)
        self.fit_ = fit_lasso(X, y, offset, self._spec())
        self.coef_ = self.fit_.coefficients
        self.intercept_ = self.fit_.intercept
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, offset=None):
        check_is_fitted(self, "fit_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatch(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.fit_.predict(X, offset)


class CoordinateDescentLassoCV(RegressorMixin, BaseEstimator):
    """LASSO with the penalty chosen by K-fold cross-validation."""

    def __init__(
        self,
        n_folds=5,
        path_length=DEFAULT_PATH_LENGTH,
        eps=PATH_EPS,
        standardize=True,
        tol=1e-7,
        max_iter=10_000,
        random_state=0,
    ):
        self.n_folds = n_folds
        self.path_length = path_length
        self.eps = eps
        self.standardize = standardize
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y, offset=None, strata=None):
        X = check_array(X)
        spec = PenaltySpec(0.0, self.standardize, self.max_iter, self.tol)
        self.fit_, self.cv_ = cv_lasso(
            X, y, offset, self.n_folds, self.path_length, "squared", self.random_state, strata, spec, self.eps
        )
        self.coef_ = self.fit_.coefficients
        self.intercept_ = self.fit_.intercept
        self.lambda_ = self.cv_.lambda_min
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, offset=None):
        check_is_fitted(self, "fit_")
        return self.fit_.predict(check_array(X), offset)


class LogisticLassoCD(ClassifierMixin, BaseEstimator):
    """L1 logistic regression; ``lam=None`` selects the penalty by CV."""

    def __init__(self, lam=None, n_folds=5, path_length=DEFAULT_PATH_LENGTH, standardize=True,
                 tol=1e-7, max_iter=10_000, random_state=0):
        self.lam = lam
        self.n_folds = n_folds
        self.path_length = path_length
        self.standardize = standardize
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X)
        y = np.asarray(y, dtype=float)
        if self.lam is None:
            spec = PenaltySpec(0.0, self.standardize, self.max_iter, self.tol)
            self.fit_, self.cv_ = cv_lasso(X, y, None, self.n_folds, self.path_length, "logistic",
                                           self.random_state, None, spec)
        else:
            self.fit_ = fit_logistic_lasso(X, y, PenaltySpec(self.lam, self.standardize, self.max_iter, self.tol))
        self.coef_ = self.fit_.coefficients
        self.intercept_ = self.fit_.intercept
        self.classes_ = np.array([0.0, 1.0])
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "fit_")
        p1 = special.expit(self.fit_.decision_function(check_array(X)))
        return np.column_stack([1 - p1, p1])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(float)
