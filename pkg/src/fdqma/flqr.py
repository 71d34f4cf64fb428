"""Truncated functional linear quantile regression on FPC scores.

The conditional quantile is modelled as ``a + sum_j b_j * xi_j`` over the
first ``j`` principal-component scores. Coefficients come from the exact
linear-programming form of check-loss minimization; model-selection scores
(FVE, AIC, BIC) choose the truncation level.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy import optimize, sparse

from .exceptions import (DimensionMismatch, LpFailure, NoFeasibleJ, PerfectFit,
                         RankDeficient)


def check_loss(e, tau):
    """Check (pinball) loss ``(tau - 1{e <= 0}) * e``, elementwise."""
    e = np.asarray(e, dtype=float)
    out = np.where(e <= 0, (tau - 1.0) * e, tau * e)
    return float(out) if out.ndim == 0 else out


def psi(u, tau):
    """Score of the check loss, ``tau - 1{u <= 0}``."""
    u = np.asarray(u, dtype=float)
    return tau - (u <= 0).astype(float)


def knight_integral(u, v):
    """Closed form of ``int_0^v [1{u <= s} - 1{u <= 0}] ds``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    pos = np.where((u > 0) & (u <= v), v - u, 0.0)
    neg = np.where((v < u) & (u <= 0), u - v, 0.0)
    return np.where(v >= 0, pos, neg)


@dataclass(frozen=True, eq=False)
class QuantileFit:
    """One candidate model: truncation level ``j`` and its fitted parameters."""

    tau: float
    j: int
    intercept: float
    coefficients: np.ndarray
    slope_on_grid: np.ndarray
    in_sample_loss: float
    n: int = 0

    def predict(self, scores):
        return predict(self, scores)

    def to_dict(self) -> dict:
        return {"tau": self.tau, "j": self.j, "intercept": self.intercept,
                "coefficients": np.asarray(self.coefficients).tolist(),
                "slope_on_grid": np.asarray(self.slope_on_grid).tolist(),
                "in_sample_loss": self.in_sample_loss, "n": self.n}

    @classmethod
    def from_dict(cls, doc: dict) -> "QuantileFit":
        return cls(tau=float(doc["tau"]), j=int(doc["j"]), intercept=float(doc["intercept"]),
                   coefficients=np.asarray(doc["coefficients"], dtype=float),
                   slope_on_grid=np.asarray(doc["slope_on_grid"], dtype=float),
                   in_sample_loss=float(doc.get("in_sample_loss", float("nan"))),
                   n=int(doc.get("n", 0)))


def _solve_qr_lp(y, x, tau):
    """min tau*1'u + (1-tau)*1'v  s.t.  x @ beta + u - v = y,  u, v >= 0."""
    n, p = x.shape
    c = np.concatenate([np.zeros(p), np.full(n, tau), np.full(n, 1.0 - tau)])
    eye = sparse.identity(n, format="csr")
    a_eq = sparse.hstack([sparse.csr_matrix(x), eye, -eye], format="csr")
    bounds = [(None, None)] * p + [(0, None)] * (2 * n)
    tight = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}
    # dual simplex at tight tolerances occasionally stalls on nearly collinear
    # columns; fall back to default tolerances, then to HiGHS' own choice
    for method, options in (("highs-ds", tight), ("highs-ds", {}), ("highs", {})):
        res = optimize.linprog(c, A_eq=a_eq, b_eq=y, bounds=bounds, method=method,
                               options=options)
        if res.status == 0:
            return res.x[:p]
    raise LpFailure(f"quantile-regression LP failed: {res.message}")


def fit_qr(responses, scores, tau: float, eigenfunctions=None) -> QuantileFit:
    """Linear quantile regression of ``responses`` on the columns of ``scores``.

    Parameters
    ----------
    responses : (n,) array_like
    scores : (n, j) array_like
        FPC scores truncated to the first ``j`` components (``j`` may be 0).
    tau : float
        Quantile level in (0, 1).
    eigenfunctions : (G, >= j) array_like, optional
        Grid values of the eigenfunctions, used to report the slope function.

    Returns
    -------
    QuantileFit
        An optimal vertex of the LP. Optima need not be unique; only the loss
        value and fitted values at the data are guaranteed.

    Raises
    ------
    LpFailure
        If the solver does not report optimality.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    y = np.asarray(responses, dtype=float).ravel()
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        s = np.zeros((y.size, 0))
    elif s.ndim == 1:
        s = s[:, None]
    n, j = s.shape
    if n != y.size:
        raise DimensionMismatch(f"{y.size} responses but {n} score rows")
    if n <= j + 1:
        raise ValueError(f"need n > j + 1 observations, got n={n}, j={j}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(y))):
        raise ValueError("responses and scores must be finite")
    x = np.column_stack([np.ones(n), s])
    if j > 0 and np.linalg.matrix_rank(x) < j + 1:
        warnings.warn(f"collinear score columns at j={j}", RankDeficient, stacklevel=2)

    # standardize so solver tolerances are scale-free
    y_shift = float(np.median(y))
    y_scale = float(np.max(np.abs(y - y_shift))) or 1.0
    x_scale = np.ones(j + 1)
    if j > 0:
        col = np.max(np.abs(s), axis=0)
        x_scale[1:] = np.where(col > 0, col, 1.0)
    beta = _solve_qr_lp((y - y_shift) / y_scale, x / x_scale, tau)
    beta = beta / x_scale * y_scale
    beta[0] += y_shift

    resid = y - x @ beta
    loss = float(np.mean(check_loss(resid, tau)))
    if loss <= 1e-12 * y_scale:
        loss = 0.0
    coef = beta[1:].copy()
    if eigenfunctions is None:
        slope = np.zeros(0)
    else:
        phi = np.asarray(eigenfunctions, dtype=float)[:, :j]
        slope = phi @ coef
    return QuantileFit(tau=float(tau), j=int(j), intercept=float(beta[0]), coefficients=coef,
                       slope_on_grid=slope, in_sample_loss=loss, n=int(n))


def subgradient_counts(fit: QuantileFit, responses, scores, rel_tol: float = 1e-9):
    """``(#negative, #zero, #positive)`` residuals, zero meaning within tolerance.

    At any optimum with an intercept, ``#neg <= n*tau <= #neg + #zero``.
    """
    y = np.asarray(responses, dtype=float).ravel()
    s = np.asarray(scores, dtype=float).reshape(y.size, -1)[:, :fit.j]
    resid = y - (fit.intercept + s @ fit.coefficients)
    tol = rel_tol * max(1.0, float(np.max(np.abs(y))) if y.size else 1.0)
    neg = int(np.sum(resid < -tol))
    pos = int(np.sum(resid > tol))
    return neg, y.size - neg - pos, pos


def predict(fit: QuantileFit, scores_new):
    """Plug-in conditional quantile ``intercept + coefficients @ scores``.

    ``scores_new`` may be one score vector or a matrix with one row per
    subject; extra columns beyond ``fit.j`` are rejected.
    """
    s = np.asarray(scores_new, dtype=float)
    if s.ndim <= 1:
        if s.size != fit.j:
            raise DimensionMismatch(f"fit has j={fit.j} but {s.size} scores given")
        return float(fit.intercept + s @ fit.coefficients) if fit.j else float(fit.intercept)
    if s.shape[1] != fit.j:
        raise DimensionMismatch(f"fit has j={fit.j} but score matrix has {s.shape[1]} columns")
    return fit.intercept + s @ fit.coefficients


def _log_loss_term(fit, n):
    if fit.in_sample_loss <= 0.0:
        warnings.warn(f"perfect in-sample fit at j={fit.j}", PerfectFit, stacklevel=3)
        return None
    return 2.0 * n * math.log(fit.in_sample_loss)


def aic(fit: QuantileFit, n: int) -> float:
    """``2n log(loss) + 2(j + 1)``; ``-inf`` (with a PerfectFit warning) on zero loss."""
    term = _log_loss_term(fit, n)
    return -math.inf if term is None else term + 2.0 * (fit.j + 1)


def bic(fit: QuantileFit, n: int) -> float:
    """``2n log(loss) + (j + 1) log n``; ``-inf`` (with a PerfectFit warning) on zero loss."""
    term = _log_loss_term(fit, n)
    return -math.inf if term is None else term + (fit.j + 1) * math.log(n)


_FVE_RE = re.compile(r"^FVE\(?\s*(0?\.\d+|\d+(?:\.\d+)?)\s*\)?$", re.IGNORECASE)


def parse_criterion(criterion):
    """Normalize a criterion spec to ``("AIC", None)``, ``("BIC", None)`` or ``("FVE", gamma)``.

    Accepts ``"AIC"``, ``"BIC"``, ``"FVE90"``, ``"FVE(0.9)"`` or a float gamma.
    """
    if isinstance(criterion, tuple):
        return criterion
    if isinstance(criterion, (float, int)) and not isinstance(criterion, bool):
        gamma = float(criterion)
    else:
        name = str(criterion).strip().upper()
        if name in ("AIC", "BIC"):
            return name, None
        m = _FVE_RE.match(name)
        if not m:
            raise ValueError(f"unknown selection criterion {criterion!r}")
        gamma = float(m.group(1))
        if gamma > 1.0:
            gamma /= 100.0
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"FVE threshold must lie in (0, 1], got {gamma}")
    return "FVE", gamma


def fit_path(model, responses, tau, j_range: Iterable[int]) -> dict:
    """Fit every truncation level in ``j_range`` on the model's training scores."""
    return {j: fit_qr(responses, model.scores[:, :j], tau, model.eigenfunctions)
            for j in j_range}


def default_j_range(model, n: Optional[int] = None):
    """0..(retained components), capped so each fit has more data than parameters."""
    top = model.n_components
    if n is not None:
        top = min(top, n - 2)
    return range(0, max(top, 0) + 1)


def select_j(model, responses, tau, criterion, j_range=None, fits=None) -> int:
    """Truncation level chosen by FVE(gamma), AIC or BIC.

    FVE takes the smallest ``J`` in ``j_range`` whose cumulative FVE reaches
    gamma; AIC/BIC take the argmin (smallest ``J`` on ties). Precomputed
    ``fits`` (a dict keyed by ``J``) are reused when given.
    """
    kind, gamma = parse_criterion(criterion)
    n = len(responses)
    j_range = list(default_j_range(model, n) if j_range is None else j_range)
    if not j_range:
        raise ValueError("j_range is empty")
    if kind == "FVE":
        fve = np.concatenate([[0.0], model.fve_cumulative])
        for j in sorted(j_range):
            if j < fve.size and fve[j] >= gamma - 1e-12:
                return int(j)
        warnings.warn(f"FVE {gamma} not reached within j <= {max(j_range)}",
                      NoFeasibleJ, stacklevel=2)
        return int(max(j_range))
    fits = {} if fits is None else fits   # filled in place so callers can reuse it
    for j in j_range:
        if j not in fits:
            fits[j] = fit_qr(responses, model.scores[:, :j], tau, model.eigenfunctions)
    score = aic if kind == "AIC" else bic
    values = [(score(fits[j], n), j) for j in sorted(j_range)]
    best = min(v for v, _ in values)
    return int(next(j for v, j in values if v == best))
