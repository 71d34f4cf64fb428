"""Functional principal component analysis for sparse, noisy curves.

Mean and covariance are estimated with local-linear kernel smoothers (the
covariance surface from off-diagonal raw products only), the surface is
eigendecomposed on an equispaced grid over [0, 1], and per-subject scores
are predicted by conditional expectation (PACE), which works for both sparse
and dense sampling designs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .exceptions import DegenerateDesign, SingularSystem

AUTO = "auto"

Bandwidth = Union[float, str]

_DET_RTOL = 1e-10


@dataclass(frozen=True)
class Grid:
    """Equispaced discretization of [0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("a grid needs at least 2 points")
        if pts[0] != 0.0 or pts[-1] != 1.0 or np.any(np.diff(pts) <= 0):
            raise ValueError("grid must be strictly increasing from 0 to 1")
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, size: int = 51) -> "Grid":
        return cls(np.linspace(0.0, 1.0, size))

    @property
    def size(self) -> int:
        return self.points.size

    @property
    def spacing(self) -> float:
        return 1.0 / (self.size - 1)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid-rule quadrature weights."""
        w = np.full(self.size, self.spacing)
        w[[0, -1]] *= 0.5
        return w


@dataclass(frozen=True, eq=False)
class SparseCurve:
    """One subject's discretely observed, possibly noisy trajectory.

    Observations are sorted by time on construction; repeated time stamps
    are rejected.
    """

    subject_id: int
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        u = np.asarray(self.values, dtype=float).ravel()
        if t.size != u.size:
            raise ValueError(
                f"curve {self.subject_id}: {t.size} times but {u.size} values")
        if t.size == 0:
            raise ValueError(f"curve {self.subject_id} has no observations")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(u))):
            raise ValueError(f"curve {self.subject_id} has non-finite entries")
        order = np.argsort(t, kind="stable")
        t, u = t[order], u[order]
        if np.any(np.diff(t) == 0):
            raise ValueError(f"curve {self.subject_id} has duplicate time stamps")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", u)

    def __len__(self):
        return self.times.size

    def rescaled(self, domain):
        lo, hi = domain
        return SparseCurve(self.subject_id, (self.times - lo) / (hi - lo), self.values)


# ---------------------------------------------------------------------------
# kernel smoothers
# ---------------------------------------------------------------------------

def _kernel_moments(x, points, h, powers):
    """Gaussian kernel weights times (x - point)**p, one G x N matrix per power."""
    d = x[None, :] - points[:, None]
    k = np.exp(-0.5 * (d / h) ** 2)
    out = []
    for p in powers:
        out.append(k if p == 0 else k * d**p)
    return out


def _ll1d_moments(x, y, points, h):
    k0, k1, k2 = _kernel_moments(x, points, h, (0, 1, 2))
    return np.stack([k0.sum(1), k1.sum(1), k2.sum(1), k0 @ y, k1 @ y])


def _ll1d_solve(mom):
    s0, s1, s2, t0, t1 = mom
    det = s0 * s2 - s1 * s1
    scale = s0 * s2
    bad = ~(det > _DET_RTOL * scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        fit = (s2 * t0 - s1 * t1) / det
    return fit, bad


def local_linear_1d(x, y, points, bandwidth):
    """Local-linear Gaussian-kernel smoother evaluated at ``points``.

    Raises
    ------
    DegenerateDesign
        If the weighted normal equations are singular at any output point.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    fit, bad = _ll1d_solve(_ll1d_moments(x, y, np.asarray(points, float), bandwidth))
    if np.any(bad):
        raise DegenerateDesign(
            f"local-linear fit singular at {int(bad.sum())} point(s), bandwidth={bandwidth:g}")
    return fit


def _ll2d_moments(u, v, z, points, h):
    au0, au1, au2 = _kernel_moments(u, points, h, (0, 1, 2))
    av0, av1, av2 = _kernel_moments(v, points, h, (0, 1, 2))
    return np.stack([
        au0 @ av0.T, au1 @ av0.T, au0 @ av1.T,
        au2 @ av0.T, au1 @ av1.T, au0 @ av2.T,
        (au0 * z) @ av0.T, (au1 * z) @ av0.T, (au0 * z) @ av1.T,
    ])


def _ll2d_solve(mom):
    m00, m10, m01, m20, m11, m02, t00, t10, t01 = mom
    a = np.stack([
        np.stack([m00, m10, m01], -1),
        np.stack([m10, m20, m11], -1),
        np.stack([m01, m11, m02], -1),
    ], -2)
    det = np.linalg.det(a)
    bad = ~(det > _DET_RTOL * m00 * m20 * m02)
    a[bad] = np.eye(3)
    rhs = np.stack([t00, t10, t01], -1)
    beta = np.linalg.solve(a, rhs[..., None])[..., 0]
    fit = beta[..., 0]
    fit[bad] = np.nan
    return fit, bad


def local_linear_2d(u, v, z, points, bandwidth):
    """Local-linear product-kernel surface smoother on ``points`` x ``points``."""
    mom = _ll2d_moments(np.asarray(u, float), np.asarray(v, float),
                        np.asarray(z, float), np.asarray(points, float), bandwidth)
    fit, bad = _ll2d_solve(mom)
    if np.any(bad):
        raise DegenerateDesign(
            f"surface fit singular at {int(bad.sum())} grid cell(s), bandwidth={bandwidth:g}")
    return fit


def candidate_bandwidths(grid: Grid, count: int = 10) -> np.ndarray:
    return np.geomspace(2.0 * grid.spacing, 0.5, count)


def _fold_labels(n_curves, folds=5):
    return np.arange(n_curves) % folds


def _interp_index(points, x):
    """Left neighbour index and fractional offset of each x on ``points``."""
    x = np.clip(np.asarray(x, dtype=float), points[0], points[-1])
    idx = np.clip(np.searchsorted(points, x, side="right") - 1, 0, points.size - 2)
    frac = (x - points[idx]) / (points[idx + 1] - points[idx])
    return idx, frac


def _bilinear(points, surface, s, t):
    """Bilinear interpolation of a grid surface at paired coordinates (s, t)."""
    i, a = _interp_index(points, s)
    j, b = _interp_index(points, t)
    return ((1 - a) * (1 - b) * surface[i, j] + a * (1 - b) * surface[i + 1, j]
            + (1 - a) * b * surface[i, j + 1] + a * b * surface[i + 1, j + 1])


def _interp_weights(points, x):
    """Row i holds the linear-interpolation weights of x[i] on ``points``."""
    idx, frac = _interp_index(points, x)
    w = np.zeros((idx.size, points.size))
    rows = np.arange(idx.size)
    w[rows, idx] = 1.0 - frac
    w[rows, idx + 1] += frac
    return w


# ---------------------------------------------------------------------------
# mean and covariance
# ---------------------------------------------------------------------------

def _pool(curves):
    ids = np.concatenate([np.full(len(c), i) for i, c in enumerate(curves)])
    t = np.concatenate([c.times for c in curves])
    u = np.concatenate([c.values for c in curves])
    return ids, t, u


def _check_times(curves):
    for c in curves:
        if c.times[0] < 0.0 or c.times[-1] > 1.0:
            raise ValueError(
                f"curve {c.subject_id} has times outside [0, 1]; rescale first")


def smooth_mean(curves: Sequence[SparseCurve], grid: Grid,
                bandwidth: Bandwidth = AUTO, return_bandwidth: bool = False):
    """Local-linear estimate of the mean function on ``grid``.

    With ``bandwidth="auto"`` the bandwidth minimizes the 5-fold
    (curve-wise) cross-validated squared prediction error over
    :func:`candidate_bandwidths`.
    """
    _check_times(curves)
    ids, t, u = _pool(curves)
    if t.size < 10:
        raise DegenerateDesign(f"need at least 10 pooled observations, got {t.size}")
    if bandwidth == AUTO:
        bandwidth = _cv_bandwidth_1d(ids, t, u, grid)
    mu = local_linear_1d(t, u, grid.points, float(bandwidth))
    return (mu, float(bandwidth)) if return_bandwidth else mu


def _cv_bandwidth_1d(ids, t, u, grid, folds=5):
    labels = _fold_labels(ids.max() + 1, folds)[ids]
    best, best_err = None, np.inf
    for h in candidate_bandwidths(grid):
        per_fold = [_ll1d_moments(t[labels == f], u[labels == f], grid.points, h)
                    for f in range(folds)]
        total = sum(per_fold)
        err = 0.0
        for f in range(folds):
            held = labels == f
            if not held.any():
                continue
            fit, bad = _ll1d_solve(total - per_fold[f])
            if np.any(bad):
                err = np.inf
                break
            err += np.sum((u[held] - np.interp(t[held], grid.points, fit)) ** 2)
        if err < best_err:
            best, best_err = h, err
    if best is None:
        raise DegenerateDesign("no candidate bandwidth gives a nonsingular mean fit")
    return float(best)


def raw_covariances(curves, mean, grid):
    """Off-diagonal raw products plus the diagonal squared residuals.

    Returns
    -------
    pairs : tuple of arrays (curve index, s, t, product) over ordered pairs l != l'
    diag : tuple of arrays (curve index, t, squared residual)
    """
    idx, ss, tt, zz = [], [], [], []
    didx, dt, dz = [], [], []
    for i, c in enumerate(curves):
        r = c.values - np.interp(c.times, grid.points, mean)
        didx.append(np.full(len(c), i))
        dt.append(c.times)
        dz.append(r * r)
        if len(c) < 2:
            continue
        a, b = np.nonzero(~np.eye(len(c), dtype=bool))
        idx.append(np.full(a.size, i))
        ss.append(c.times[a])
        tt.append(c.times[b])
        zz.append(r[a] * r[b])
    if not idx:
        raise DegenerateDesign("no curve has two or more observations")
    pairs = tuple(np.concatenate(v) for v in (idx, ss, tt, zz))
    diag = tuple(np.concatenate(v) for v in (didx, dt, dz))
    return pairs, diag


def smooth_covariance(curves: Sequence[SparseCurve], mean, grid: Grid,
                      bandwidth: Bandwidth = AUTO, return_bandwidth: bool = False):
    """Smoothed covariance surface and measurement-error variance.

    The surface is fitted to off-diagonal raw covariances only. The noise
    variance is the average, over the central half [0.25, 0.75] of the
    domain, of the smoothed raw variance minus the surface diagonal,
    clipped at zero.

    Returns
    -------
    covariance : (G, G) ndarray
    noise_variance : float
    """
    _check_times(curves)
    if sum(1 for c in curves if len(c) >= 2) < 2:
        raise DegenerateDesign("covariance needs at least 2 curves with 2+ observations")
    mean = np.asarray(mean, dtype=float)
    (pidx, s, t, z), (didx, dt, dz) = raw_covariances(curves, mean, grid)
    if bandwidth == AUTO:
        bandwidth = _cv_bandwidth_2d(pidx, s, t, z, grid, len(curves))
    h = float(bandwidth)
    cov = local_linear_2d(s, t, z, grid.points, h)
    cov = 0.5 * (cov + cov.T)
    variance = local_linear_1d(dt, dz, grid.points, h)
    central = (grid.points >= 0.25) & (grid.points <= 0.75)
    sigma2 = float(np.mean(variance[central] - np.diag(cov)[central]))
    sigma2 = max(0.0, sigma2)
    if return_bandwidth:
        return cov, sigma2, h
    return cov, sigma2


def _cv_bandwidth_2d(pidx, s, t, z, grid, n_curves, folds=5):
    labels = _fold_labels(n_curves, folds)[pidx]
    best, best_err = None, np.inf
    for h in candidate_bandwidths(grid):
        per_fold = [_ll2d_moments(s[labels == f], t[labels == f], z[labels == f],
                                  grid.points, h) for f in range(folds)]
        total = sum(per_fold)
        err = 0.0
        for f in range(folds):
            held = labels == f
            if not held.any():
                continue
            fit, bad = _ll2d_solve(total - per_fold[f])
            if np.any(bad):
                err = np.inf
                break
            pred = _bilinear(grid.points, fit, s[held], t[held])
            err += np.sum((z[held] - pred) ** 2)
        if err < best_err:
            best, best_err = h, err
    if best is None:
        raise DegenerateDesign("no candidate bandwidth gives a nonsingular surface fit")
    return float(best)


# ---------------------------------------------------------------------------
# eigen-analysis and scores
# ---------------------------------------------------------------------------

def eigendecompose(covariance, grid: Grid, j_max: int, atol: float = 0.0):
    """Eigenpairs of the covariance operator discretized on ``grid``.

    The operator is discretized with trapezoid weights ``w``, so
    eigenfunctions satisfy ``phi_j @ (w * phi_k) == delta_jk``. Pairs
    with eigenvalue below ``1e-10`` times the leading one are dropped, and
    each eigenfunction is signed so its largest-magnitude entry is positive.
    Eigenvalues not above ``atol`` are treated as roundoff and dropped too.

    Returns
    -------
    eigenvalues : (J,) ndarray, non-increasing and positive
    eigenfunctions : (G, J) ndarray
    """
    cov = np.asarray(covariance, dtype=float)
    root = np.sqrt(grid.weights)
    vals, vecs = np.linalg.eigh(root[:, None] * cov * root[None, :])
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    g = grid.size
    if vals.size == 0 or vals[0] <= 0.0:
        return np.zeros(0), np.zeros((g, 0))
    keep = vals > max(1e-10 * vals[0], atol)
    keep[int(j_max):] = False
    vals, vecs = vals[keep], vecs[:, keep]
    phi = vecs / root[:, None]
    lead = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[lead, np.arange(phi.shape[1])])
    signs[signs == 0] = 1.0
    return vals, phi * signs


def fve_cumulative(eigenvalues) -> np.ndarray:
    """Cumulative fraction of variance explained by the retained eigenvalues."""
    vals = np.asarray(eigenvalues, dtype=float)
    if vals.size == 0:
        return np.zeros(0)
    out = np.cumsum(vals) / vals.sum()
    out[-1] = 1.0
    return out


@dataclass(frozen=True, eq=False)
class FpcaModel:
    """Fitted FPCA representation on a common grid over [0, 1].

    ``covariance`` is the smoothed surface; score prediction uses the
    reconstruction from the retained eigenpairs (:meth:`fitted_covariance`),
    which is positive semi-definite by construction.
    """

    grid: Grid
    mean: np.ndarray
    covariance: np.ndarray
    noise_variance: float
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    scores: np.ndarray
    fve_cumulative: np.ndarray
    domain: tuple = (0.0, 1.0)
    bandwidths: tuple = (None, None)

    @property
    def n_components(self) -> int:
        return self.eigenvalues.size

    def fitted_covariance(self, j: Optional[int] = None):
        j = self.n_components if j is None else j
        phi = self.eigenfunctions[:, :j]
        return (phi * self.eigenvalues[:j]) @ phi.T

    def score(self, curve: SparseCurve, j: Optional[int] = None):
        """PACE scores of one curve given in the original time units."""
        return self.scores_for([curve], j)[0]

    def scores_for(self, curves, j: Optional[int] = None,
                   noise_variance: Optional[float] = None) -> np.ndarray:
        """PACE scores, one row per curve (times in the original units)."""
        j = self.n_components if j is None else int(j)
        if not 0 <= j <= self.n_components:
            raise ValueError(f"j={j} outside 0..{self.n_components}")
        if self.domain != (0.0, 1.0):
            curves = [c.rescaled(self.domain) for c in curves]
        return _pace_batch(curves, self, j, noise_variance)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.points.tolist(),
            "domain": list(self.domain),
            "mean": self.mean.tolist(),
            "noise_variance": self.noise_variance,
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenfunctions": self.eigenfunctions.T.tolist(),
            "bandwidths": list(self.bandwidths),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FpcaModel":
        grid = Grid(np.asarray(doc["grid"], dtype=float))
        vals = np.asarray(doc["eigenvalues"], dtype=float)
        phi = np.asarray(doc["eigenfunctions"], dtype=float).reshape(vals.size, grid.size).T
        cov = (phi * vals) @ phi.T
        return cls(grid=grid, mean=np.asarray(doc["mean"], dtype=float), covariance=cov,
                   noise_variance=float(doc["noise_variance"]), eigenvalues=vals,
                   eigenfunctions=phi, scores=np.zeros((0, vals.size)),
                   fve_cumulative=fve_cumulative(vals),
                   domain=tuple(doc.get("domain", (0.0, 1.0))),
                   bandwidths=tuple(doc.get("bandwidths", (None, None))))

    def save(self, path):
        from .io import dump_json
        dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "FpcaModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def pace_scores(curve: SparseCurve, model: FpcaModel, j: int) -> np.ndarray:
    """PACE score prediction for one curve whose times already lie in [0, 1].

    Raises
    ------
    SingularSystem
        If the regularized covariance system still cannot be solved.
    """
    if not 1 <= j <= model.n_components:
        raise ValueError(f"j={j} outside 1..{model.n_components}")
    _check_times([curve])
    return _pace_batch([curve], model, j)[0]


def _pace_batch(curves, model, j, noise_variance=None):
    sigma2 = model.noise_variance if noise_variance is None else float(noise_variance)
    out = np.zeros((len(curves), j))
    if j == 0 or not curves:
        return out
    pts = model.grid.points
    vals = model.eigenvalues
    phi_grid = model.eigenfunctions
    sizes = np.array([len(c) for c in curves])
    for size in np.unique(sizes):
        rows = np.flatnonzero(sizes == size)
        times = np.stack([curves[r].times for r in rows])
        resid = np.stack([curves[r].values for r in rows])
        w = _interp_weights(pts, times.ravel()).reshape(rows.size, size, pts.size)
        phi = w @ phi_grid                                  # (B, N, J_all)
        resid = resid - w @ model.mean
        sigma = (phi * vals) @ np.swapaxes(phi, 1, 2)
        sigma = sigma + sigma2 * np.eye(size)
        sigma = _regularize(sigma)
        try:
            sol = np.linalg.solve(sigma, resid[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(str(exc)) from exc
        scores = vals[:j] * np.einsum("bnj,bn->bj", phi[:, :, :j], sol)
        if not np.all(np.isfinite(scores)):
            raise SingularSystem("non-finite PACE scores")
        out[rows] = scores
    return out


def _regularize(sigma):
    """Ridge 1e-8 * trace / N onto numerically singular matrices in a batch."""
    eig = np.linalg.eigvalsh(sigma)
    top = np.abs(eig).max(axis=-1)
    singular = eig[:, 0] <= 1e-12 * np.maximum(top, np.finfo(float).tiny)
    if np.any(singular):
        n = sigma.shape[-1]
        trace = np.trace(sigma, axis1=1, axis2=2)
        ridge = np.where(singular, 1e-8 * trace / n, 0.0)
        ridge = np.where(singular & (ridge <= 0), 1e-12, ridge)
        sigma = sigma + ridge[:, None, None] * np.eye(n)
    return sigma


def fit_fpca(curves: Sequence[SparseCurve], grid: Optional[Grid] = None,
             j_max: int = 20, bandwidths=(AUTO, AUTO), domain=None) -> FpcaModel:
    """Fit mean, covariance, eigenpairs and training scores in one pass.

    Parameters
    ----------
    curves : sequence of SparseCurve
        Training curves in original time units.
    grid : Grid, optional
        Output grid on [0, 1]; 51 points by default.
    j_max : int
        Maximum number of eigenpairs retained.
    bandwidths : (mean, covariance)
        Each a positive float or ``"auto"``.
    domain : (lo, hi), optional
        Interval mapped affinely to [0, 1]. Defaults to [0, 1] when every time
        already lies there, otherwise to the observed time range.
    """
    curves = list(curves)
    if len(curves) < 2:
        raise DegenerateDesign("FPCA needs at least two curves")
    grid = grid or Grid.uniform(51)
    if domain is None:
        lo = min(c.times[0] for c in curves)
        hi = max(c.times[-1] for c in curves)
        domain = (0.0, 1.0) if lo >= 0.0 and hi <= 1.0 else (float(lo), float(hi))
    domain = (float(domain[0]), float(domain[1]))
    if domain != (0.0, 1.0):
        curves = [c.rescaled(domain) for c in curves]
    bw_mean, bw_cov = bandwidths
    mean, h_mean = smooth_mean(curves, grid, bw_mean, return_bandwidth=True)
    cov, sigma2, h_cov = smooth_covariance(curves, mean, grid, bw_cov, return_bandwidth=True)
    # eigenvalues at roundoff level relative to the data scale are not signal
    _, _, u = _pool(curves)
    vals, phi = eigendecompose(cov, grid, j_max, atol=1e-12 * float(np.mean(u * u)))
    partial = FpcaModel(grid=grid, mean=mean, covariance=cov, noise_variance=sigma2,
                        eigenvalues=vals, eigenfunctions=phi, scores=np.zeros((0, 0)),
                        fve_cumulative=fve_cumulative(vals), domain=(0.0, 1.0),
                        bandwidths=(h_mean, h_cov))
    scores = _pace_batch(curves, partial, vals.size)
    return FpcaModel(grid=grid, mean=mean, covariance=cov, noise_variance=sigma2,
                     eigenvalues=vals, eigenfunctions=phi, scores=scores,
                     fve_cumulative=fve_cumulative(vals), domain=domain,
                     bandwidths=(h_mean, h_cov))


# ---------------------------------------------------------------------------
# long-format CSV
# ---------------------------------------------------------------------------

def read_curves_csv(path) -> list:
    """Read ``subject_id,time,value`` rows into curves, ordered by first appearance."""
    from .exceptions import ParseError
    rows: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["subject_id", "time", "value"]:
            raise ParseError("expected header subject_id,time,value", line=1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != 3:
                raise ParseError(f"expected 3 fields, got {len(rec)}", line=lineno)
            try:
                sid, t, u = int(rec[0]), float(rec[1]), float(rec[2])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            rows.setdefault(sid, ([], []))
            rows[sid][0].append(t)
            rows[sid][1].append(u)
    return [SparseCurve(sid, np.array(t), np.array(u)) for sid, (t, u) in rows.items()]


def write_curves_csv(curves, path):
    from .io import fmt
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "time", "value"])
        for c in curves:
            for t, u in zip(c.times, c.values):
                w.writerow([c.subject_id, fmt(t), fmt(u)])
