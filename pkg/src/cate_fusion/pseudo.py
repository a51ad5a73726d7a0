"""Propensities, counterfactual mean outcomes and pseudo-outcomes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .exceptions import OverlapViolation

DEFAULT_OVERLAP_FLOOR = 0.01


@dataclass(frozen=True)
class Propensity:
    """Treatment probabilities ``pi_a(x)`` for a = +1 / -1.

    ``known_constant`` uses ``constant`` for every unit (the RCT design);
    ``fitted_logistic`` evaluates ``expit(intercept + x'coef)``.
    Probabilities are clipped to ``[floor, 1 - floor]``.
    """

    kind: str = "known_constant"
    constant: float = 0.5
    intercept: float = 0.0
    coef: np.ndarray | None = None
    floor: float = DEFAULT_OVERLAP_FLOOR

    def __post_init__(self):
        if not 0 < self.floor <= 0.5:
            raise ValueError("overlap floor must lie in (0, 0.5]")
        if self.kind not in ("known_constant", "fitted_logistic"):
            raise ValueError(f"unknown propensity kind {self.kind!r}")

    def raw_treat(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == "known_constant":
            return np.full(X.shape[0], float(self.constant))
        return special.expit(self.intercept + X @ np.asarray(self.coef, dtype=float))

    def pi_treat(self, X):
        return np.clip(self.raw_treat(X), self.floor, 1 - self.floor)

    def pi(self, X, a, strict=False):
        """Probability of the arm(s) ``a`` (scalar or per row)."""
        raw1 = self.raw_treat(X)
        raw = np.where(np.asarray(a) == 1, raw1, 1 - raw1)
        if strict and np.any(raw < self.floor):
            raise OverlapViolation(f"propensity below the overlap floor {self.floor}")
        return np.clip(raw, self.floor, 1 - self.floor)


RCT_PROPENSITY = Propensity()


@dataclass
class CmoModel:
    """Arm mean functions over one covariate view.

    ``view`` records what the functions consume: ``"X^r"``, ``"X^r+Vhat"``
    or ``"Z"``; callers are responsible for passing that view.
    """

    mu_treat: Callable[[np.ndarray], np.ndarray]
    mu_control: Callable[[np.ndarray], np.ndarray]
    view: str = "X^r"


def cmo_from_means(mu_treat, mu_control, pi_treat):
    """Swapped-weight average: pi_{-1} * mu_{+1} + pi_{+1} * mu_{-1}."""
    pi_treat = np.asarray(pi_treat, dtype=float)
    return (1 - pi_treat) * np.asarray(mu_treat) + pi_treat * np.asarray(mu_control)


def cmo(model: CmoModel, prop: Propensity, x, view_input=None):
    """Counterfactual mean outcome at covariate row(s) ``x``.

    ``x`` is the RCT row used by the propensity; ``view_input`` is what the
    arm functions consume (defaults to ``x``).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = x if view_input is None else np.atleast_2d(np.asarray(view_input, dtype=float))
    out = cmo_from_means(model.mu_treat(v), model.mu_control(v), prop.pi_treat(x))
    return out


def pseudo_outcome_values(a, y, m, pi_a):
    """``a * (y - m) / pi_a`` elementwise."""
    return np.asarray(a, dtype=float) * (np.asarray(y, dtype=float) - m) / pi_a


def pseudo_outcome(x, a, y, m, prop: Propensity = RCT_PROPENSITY, strict=False):
    """Pseudo-outcome for row(s) ``x`` with augmentation ``m``.

    ``m`` may be a callable of ``x`` or precomputed values.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m_val = m(x) if callable(m) else np.asarray(m, dtype=float)
    pi_a = prop.pi(x, a, strict=strict)
    return pseudo_outcome_values(a, y, m_val, pi_a)


def marginalized_cmo_oracle(truth, x_r, prop: Propensity = RCT_PROPENSITY):
    """Marginalized RCT CMO for the linear-Gaussian simulation design.

    Evaluates ``E[mu(X) | X^r = x_r, S = r]`` with the arm means linear in
    ``X``; V enters through its RCT conditional mean given the observed
    ``(U, Z)`` (which is ``Lambda @ z`` whenever V is independent of U given
    Z). Test oracle only; estimators never call it.
    """
    x_r = np.atleast_2d(np.asarray(x_r, dtype=float))
    ev = truth.conditional_v_mean(x_r)
    full = np.hstack([x_r, ev])
    mu1 = truth.intercept_treat + full @ truth.beta_treat_rct
    mu0 = truth.intercept_control + full @ truth.beta_control_rct
    return cmo_from_means(mu1, mu0, prop.pi_treat(x_r))
