"""Cross-validated quantile model averaging over truncation levels.

Weights over a candidate set of truncation levels minimize the K-fold
cross-validated check loss of the weighted prediction, which is a linear
program over the probability simplex. Smoothed AIC/BIC weights are provided
as baselines.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, sparse

from .exceptions import (CandidateInfeasible, DimensionMismatch, LpFailure, NoFeasibleCandidate,
                         PerfectFit)
from .flqr import QuantileFit, aic, bic, check_loss, fit_qr, predict, select_j


@dataclass(frozen=True)
class CandidateSet:
    anchor: int
    d: int
    members: tuple

    def __post_init__(self):
        members = tuple(sorted(set(int(m) for m in self.members)))
        if not members:
            raise ValueError("candidate set is empty")
        object.__setattr__(self, "members", members)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @classmethod
    def around(cls, anchor: int, d: int, upper: int) -> "CandidateSet":
        """All ``j`` with ``|anchor - j| <= d``, clipped to ``[0, upper]``."""
        if d < 0:
            raise ValueError("d must be nonnegative")
        lo, hi = max(0, anchor - d), min(upper, anchor + d)
        return cls(anchor, d, tuple(range(lo, hi + 1)) or (min(anchor, upper),))

    @classmethod
    def fixed(cls, members) -> "CandidateSet":
        members = tuple(sorted(members))
        return cls(members[0], 0, members)


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Simplex weights, aligned with ``members`` (truncation levels)."""

    members: tuple
    weights: np.ndarray
    cv_value: float = float("nan")

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(self.members) != w.size:
            raise DimensionMismatch("one weight per candidate is required")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "members", tuple(int(m) for m in self.members))

    def as_dict(self) -> dict:
        return dict(zip(self.members, self.weights.tolist()))

    def to_dict(self) -> dict:
        return {"members": list(self.members), "weights": self.weights.tolist(),
                "cv_value": self.cv_value}

    @classmethod
    def from_dict(cls, doc) -> "WeightVector":
        return cls(tuple(doc["members"]), np.asarray(doc["weights"], dtype=float),
                   float(doc.get("cv_value", float("nan"))))


def _clean_simplex(w):
    w = np.asarray(w, dtype=float).copy()
    w[w < 0] = 0.0
    total = w.sum()
    if total <= 0:
        raise LpFailure("weight vector collapsed to zero")
    return w / total


@dataclass(frozen=True, eq=False)
class CvTable:
    """Held-out predictions: row i, column m is candidate m's prediction for i."""

    k: int
    members: tuple
    fold_ids: np.ndarray
    fold_predictions: np.ndarray
    dropped: tuple = ()

    def criterion(self, responses, weights, tau) -> float:
        """``CV_K(w)``: mean check loss of the weighted held-out predictions."""
        w = weights.weights if isinstance(weights, WeightVector) else np.asarray(weights, float)
        pred = self.fold_predictions @ w
        return float(np.mean(check_loss(np.asarray(responses, float) - pred, tau)))

    def to_dict(self) -> dict:
        return {"k": self.k, "members": list(self.members),
                "fold_ids": self.fold_ids.tolist(),
                "fold_predictions": self.fold_predictions.tolist(),
                "dropped": list(self.dropped)}

    @classmethod
    def from_dict(cls, doc) -> "CvTable":
        return cls(int(doc["k"]), tuple(doc["members"]),
                   np.asarray(doc["fold_ids"], dtype=int),
                   np.asarray(doc["fold_predictions"], dtype=float).reshape(
                       len(doc["fold_ids"]), len(doc["members"])),
                   tuple(doc.get("dropped", ())))


def fold_assignment(n: int, k: int, shuffle: bool = False, seed=None) -> np.ndarray:
    """Fold label (0-based) per observation.

    Folds are consecutive blocks of ``M = n // k`` observations; the
    ``n - k*M`` leftovers join the last fold. With ``shuffle`` the block
    structure is applied to a seeded permutation of the indices.
    """
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    m = n // k
    labels = np.minimum(np.arange(n) // m, k - 1)
    if shuffle:
        perm = np.random.default_rng(seed).permutation(n)
        out = np.empty(n, dtype=int)
        out[perm] = labels
        return out
    return labels


def build_candidate_set(model, responses, tau, anchor_criterion, d: int,
                        j_range=None, fits=None) -> CandidateSet:
    """d-divergence candidate set around the truncation level chosen by ``anchor_criterion``."""
    from .flqr import default_j_range
    j_range = list(default_j_range(model, len(responses)) if j_range is None else j_range)
    anchor = select_j(model, responses, tau, anchor_criterion, j_range, fits=fits)
    return CandidateSet.around(anchor, d, max(j_range))


def cv_table(model, responses, tau, candidates, k: int, shuffle: bool = False,
             seed=None) -> CvTable:
    """K-fold held-out predictions for every candidate truncation level.

    ``model`` is an :class:`~fdqma.fpca.FpcaModel` (its full-data scores are
    used; the FPCA is never refitted inside a fold) or a plain score matrix.
    Candidates needing more parameters than some fold's training part can
    support are dropped with a :class:`CandidateInfeasible` warning.
    """
    scores = np.asarray(getattr(model, "scores", model), dtype=float)
    y = np.asarray(responses, dtype=float).ravel()
    n = y.size
    if scores.shape[0] != n:
        raise DimensionMismatch(f"{n} responses but {scores.shape[0]} score rows")
    folds = fold_assignment(n, k, shuffle, seed)
    min_train = min(int(np.sum(folds != f)) for f in range(k))
    members = tuple(candidates)
    kept, dropped = [], []
    for j in members:
        if j > scores.shape[1] or min_train < j + 2:
            dropped.append(j)
        else:
            kept.append(j)
    if dropped:
        warnings.warn(f"candidates {dropped} dropped: too few observations per fold",
                      CandidateInfeasible, stacklevel=2)
    if not kept:
        raise NoFeasibleCandidate("no candidate can be fitted inside the CV folds")
    preds = np.empty((n, len(kept)))
    for f in range(k):
        held = folds == f
        for m, j in enumerate(kept):
            fit = fit_qr(y[~held], scores[~held, :j], tau)
            preds[held, m] = predict(fit, scores[held, :j])
    return CvTable(k=k, members=tuple(kept), fold_ids=folds, fold_predictions=preds,
                   dropped=tuple(dropped))


def solve_weights(table: CvTable, responses, tau) -> WeightVector:
    """Simplex weights minimizing the cross-validated check loss.

    Solves ``min tau*1'u + (1-tau)*1'v`` subject to
    ``P w + u - v = y``, ``sum(w) = 1`` and ``w, u, v >= 0``.
    """
    y = np.asarray(responses, dtype=float).ravel()
    p = np.asarray(table.fold_predictions, dtype=float)
    n, m = p.shape
    if n != y.size:
        raise DimensionMismatch(f"{y.size} responses but {n} table rows")
    if m == 0:
        raise ValueError("empty CV table")
    if m == 1:
        w = np.ones(1)
        return WeightVector(table.members, w, table.criterion(y, w, tau))

    shift = float(np.median(y))
    scale = float(max(np.max(np.abs(y - shift)), np.max(np.abs(p - shift)))) or 1.0
    ys, ps = (y - shift) / scale, (p - shift) / scale

    c = np.concatenate([np.zeros(m), np.full(n, tau), np.full(n, 1.0 - tau)])
    eye = sparse.identity(n, format="csr")
    top = sparse.hstack([sparse.csr_matrix(ps), eye, -eye])
    bottom = sparse.hstack([sparse.csr_matrix(np.ones((1, m))),
                            sparse.csr_matrix((1, 2 * n))])
    a_eq = sparse.vstack([top, bottom], format="csr")
    b_eq = np.concatenate([ys, [1.0]])
    res = optimize.linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds",
                           options={"primal_feasibility_tolerance": 1e-10,
                                    "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise LpFailure(f"weight LP failed: {res.message}")
    w = _clean_simplex(res.x[:m])
    return WeightVector(table.members, w, table.criterion(y, w, tau))


def saic_sbic_weights(fits: Sequence[QuantileFit], n: int, kind: str = "SAIC") -> WeightVector:
    """Smoothed-information-criterion weights ``exp(-score/2)``, normalized.

    Fits with a perfect in-sample fit (score ``-inf``) share all the weight.
    """
    kind = kind.upper()
    if kind not in ("SAIC", "SBIC"):
        raise ValueError(f"kind must be SAIC or SBIC, got {kind}")
    crit = aic if kind == "SAIC" else bic
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", PerfectFit)
        scores = np.array([crit(f, n) for f in fits])
    for w in caught:
        warnings.warn(w.message, w.category, stacklevel=2)
    flagged = np.isneginf(scores)
    if flagged.any():
        w = flagged / flagged.sum()
    else:
        z = -0.5 * (scores - scores.min())
        w = np.exp(z)
        w /= w.sum()
    return WeightVector(tuple(f.j for f in fits), w)


def information_weights(scores) -> np.ndarray:
    """Softmax of ``-scores/2`` with max-subtraction; exposed for direct use."""
    s = np.asarray(scores, dtype=float)
    z = np.exp(-0.5 * (s - s.min()))
    return z / z.sum()


def _weights_array(weights):
    return weights.weights if isinstance(weights, WeightVector) else np.asarray(weights, float)


def averaged_prediction(fits: Sequence[QuantileFit], weights, scores_new_per_candidate) -> float:
    """``sum_m w_m * predict(fits[m], scores_m)`` for a single subject."""
    w = _weights_array(weights)
    if not len(fits) == w.size == len(scores_new_per_candidate):
        raise DimensionMismatch("fits, weights and score vectors must have equal length")
    return float(sum(wm * predict(f, s) for wm, f, s in zip(w, fits, scores_new_per_candidate)))


def averaged_predictions(fits: Sequence[QuantileFit], weights, scores) -> np.ndarray:
    """Vectorized averaged prediction: each fit reads the leading columns of ``scores``."""
    w = _weights_array(weights)
    if len(fits) != w.size:
        raise DimensionMismatch("one weight per fit is required")
    s = np.atleast_2d(np.asarray(scores, dtype=float))
    out = np.zeros(s.shape[0])
    for wm, f in zip(w, fits):
        if wm != 0.0:
            out += wm * predict(f, s[:, :f.j])
    return out


def averaged_parameters(fits: Sequence[QuantileFit], weights):
    """Weighted intercept and grid slope function ``(a_w, b_w)``."""
    w = _weights_array(weights)
    if len(fits) != w.size:
        raise DimensionMismatch("one weight per fit is required")
    slopes = [np.asarray(f.slope_on_grid, dtype=float) for f in fits]
    sizes = {s.size for s in slopes}
    if len(sizes) != 1:
        raise DimensionMismatch("fits do not share a grid")
    a = float(sum(wm * f.intercept for wm, f in zip(w, fits)))
    b = np.zeros(sizes.pop())
    for wm, s in zip(w, slopes):
        b += wm * s
    return a, b


@dataclass(frozen=True, eq=False)
class ModelAverage:
    """Candidate fits on the full training data plus their weights."""

    fits: tuple
    weights: WeightVector
    candidates: Optional[CandidateSet] = None
    table: Optional[CvTable] = None
    extras: dict = field(default_factory=dict)

    def predict(self, scores) -> np.ndarray:
        return averaged_predictions(self.fits, self.weights, scores)

    def parameters(self):
        return averaged_parameters(self.fits, self.weights)


def fit_model_average(model, responses, tau, candidates: CandidateSet, k: int,
                      fits: Optional[dict] = None, shuffle: bool = False,
                      seed=None) -> ModelAverage:
    """Cross-validated weights over ``candidates`` plus full-data fits.

    A single candidate gets weight one without running the CV. Candidates
    dropped by the CV table receive no fit and no weight; if all of them are
    dropped the anchor alone is used, with a :class:`CandidateInfeasible`
    warning.
    """
    fits = {} if fits is None else fits
    if len(candidates) > 1:
        try:
            table = cv_table(model, responses, tau, candidates, k, shuffle=shuffle, seed=seed)
        except NoFeasibleCandidate:
            warnings.warn(f"no candidate fits inside {k} folds; using J={candidates.anchor} "
                          "alone", CandidateInfeasible, stacklevel=2)
            candidates = CandidateSet(candidates.anchor, 0, (candidates.anchor,))
    if len(candidates) == 1:
        (j,) = candidates.members
        if j not in fits:
            fits[j] = fit_qr(responses, model.scores[:, :j], tau, model.eigenfunctions)
        return ModelAverage((fits[j],), WeightVector((j,), np.ones(1)), candidates, None)
    weights = solve_weights(table, responses, tau)
    for j in table.members:
        if j not in fits:
            fits[j] = fit_qr(responses, model.scores[:, :j], tau, model.eigenfunctions)
    return ModelAverage(tuple(fits[j] for j in table.members), weights, candidates, table)


# ---------------------------------------------------------------------------
# prediction rules shared by the simulation and the data pipeline
# ---------------------------------------------------------------------------

_MA_RE = re.compile(r"^MA\(\s*([A-Z0-9().]+?)\s*(?:±|\+-|\+/-|_?PM)\s*(\d+)\s*,\s*K\s*(\d+)\s*\)$")
COMPARISON_METHODS = ("SAIC", "SBIC", "FVE90", "FVE95", "AIC", "BIC")


@dataclass(frozen=True)
class Method:
    """A prediction rule: ``kind`` is MA, SAIC, SBIC or SELECT."""

    label: str
    kind: str
    criterion: Optional[str] = None
    d: int = 0
    k: int = 0


def parse_method(label: str) -> Method:
    """Parse ``"MA(FVE90±4,K4)"``, ``"SAIC"``, ``"SBIC"``, ``"FVE90"``, ``"AIC"`` and so on."""
    name = label.strip()
    upper = name.upper()
    m = _MA_RE.match(upper)
    if m:
        return Method(name, "MA", m.group(1), int(m.group(2)), int(m.group(3)))
    if upper in ("SAIC", "SBIC"):
        return Method(name, upper)
    if upper in ("AIC", "BIC") or upper.startswith("FVE"):
        return Method(name, "SELECT", upper)
    raise ValueError(f"unknown method {label!r}")


@dataclass(frozen=True, eq=False)
class MethodOutput:
    predictions: np.ndarray
    intercept: float
    slope_on_grid: np.ndarray
    weights: dict = field(default_factory=dict)


def apply_method(method: Method, model, responses, tau, test_scores, j_range, fits,
                 fixed_candidates=None) -> MethodOutput:
    """Fit one method on the training data and predict the test subjects.

    ``fits`` caches full-data fits keyed by truncation level; it is filled in
    place. ``fixed_candidates`` replaces the anchor-based candidate set.
    """
    def fit(j):
        if j not in fits:
            fits[j] = fit_qr(responses, model.scores[:, :j], tau, model.eigenfunctions)
        return fits[j]

    if method.kind == "SELECT":
        j = select_j(model, responses, tau, method.criterion, j_range, fits=fits)
        f = fit(j)
        return MethodOutput(f.predict(test_scores[:, :j]), f.intercept, f.slope_on_grid, {j: 1.0})
    if method.kind in ("SAIC", "SBIC"):
        cand = [fit(j) for j in j_range]
        w = saic_sbic_weights(cand, len(responses), method.kind)
        return _averaged(cand, w.weights, test_scores)
    if fixed_candidates is not None:
        cands = CandidateSet.fixed(fixed_candidates)
    else:
        anchor = select_j(model, responses, tau, method.criterion, j_range, fits=fits)
        cands = CandidateSet.around(anchor, method.d, max(j_range))
    ma = fit_model_average(model, responses, tau, cands, method.k, fits=fits)
    return _averaged(list(ma.fits), ma.weights.weights, test_scores)


def _averaged(fits, w, test_scores):
    pred = np.zeros(test_scores.shape[0])
    a, b = 0.0, np.zeros_like(fits[0].slope_on_grid)
    for wm, f in zip(w, fits):
        pred += wm * f.predict(test_scores[:, :f.j])
        a += wm * f.intercept
        b = b + wm * f.slope_on_grid
    return MethodOutput(pred, a, b, {f.j: float(wm) for f, wm in zip(fits, w)})
