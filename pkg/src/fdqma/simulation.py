"""Simulated sparse functional data with a heteroscedastic linear response.

Curves are ``X(t) = sum_j kappa_j^{1/2} Z_j phi_j(t)`` with cosine
eigenfunctions, ``kappa_j = j^-1.2`` and uniform unit-variance ``Z_j``,
observed at 10-12 uniform random times with Gaussian measurement error. The
response is ``Y = theta * <b1, X> + sigma(X) e`` with
``sigma(X) = a2 + <b2, X>`` and standard normal ``e``, so the true
conditional tau-quantile is linear in the latent scores.

Design ``"I"`` uses 20 components everywhere. Design ``"II"`` keeps 8
components but truncates ``b1``, ``b2`` and ``a2`` to the first three, so
truncation levels 3 and above contain the true model; its candidate
truncation levels are fixed to ``0..6``.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .averaging import Method, apply_method, parse_method
from .evaluation import efpe, integrated_squared_error, trapezoid_weights
from .exceptions import FdqmaError
from .fpca import Grid, SparseCurve, fit_fpca

DESIGNS = ("I", "II")


@dataclass(frozen=True)
class DesignSpec:
    """Parameters of one simulation setting.

    ``j_max`` is the number of latent components in the curves and the cap
    on estimated eigenpairs; ``None`` picks 20 for design I and 8 for II.
    ``candidates`` overrides the truncation levels considered by every
    method; design II defaults to ``0..6``.
    """

    design: str = "I"
    n: int = 300
    n_test: int = 100
    tau: float = 0.05
    r_squared: float = 0.5
    j_max: Optional[int] = None
    noise_sd: float = math.sqrt(0.8)
    seed: int = 0
    grid_size: int = 51
    candidates: Optional[tuple] = None

    def __post_init__(self):
        design = str(self.design).upper()
        if design not in DESIGNS:
            raise ValueError(f"design must be I or II, got {self.design!r}")
        object.__setattr__(self, "design", design)
        if self.j_max is None:
            object.__setattr__(self, "j_max", 20 if design == "I" else 8)
        if self.candidates is None and design == "II":
            object.__setattr__(self, "candidates", tuple(range(7)))
        if not 0.0 < self.r_squared < 1.0:
            raise ValueError(f"r_squared must lie in (0, 1), got {self.r_squared}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.n < 4 or self.n_test < 1:
            raise ValueError("need n >= 4 training and n_test >= 1 test subjects")

    @property
    def n_signal(self) -> int:
        """Number of terms in b1, b2 and a2."""
        return self.j_max if self.design == "I" else 3

    @classmethod
    def from_config(cls, cfg: dict) -> "DesignSpec":
        """Build from a key=value mapping (values may be strings)."""
        kinds = {"n": int, "n_test": int, "tau": float, "r_squared": float,
                 "j_max": int, "noise_sd": float, "seed": int, "grid_size": int}
        kw = {}
        for key, val in cfg.items():
            if key == "design":
                kw[key] = str(val)
            elif key == "candidates":
                kw[key] = tuple(int(v) for v in str(val).replace(",", " ").split())
            elif key in kinds:
                kw[key] = kinds[key](val)
        return cls(**kw)


def eigenvalues(spec: DesignSpec) -> np.ndarray:
    return np.arange(1, spec.j_max + 1) ** -1.2


def eigenfunctions(points, count: int) -> np.ndarray:
    """``sqrt(2) cos(j pi t)`` for ``j = 1..count``, one column each."""
    j = np.arange(1, count + 1)
    return math.sqrt(2.0) * np.cos(np.pi * np.outer(np.asarray(points, float), j))


def _signal_coefficients(spec: DesignSpec):
    """Score-space coefficients of b1 and b2 and the constant a2."""
    j = np.arange(1, spec.j_max + 1, dtype=float)
    on = j <= spec.n_signal
    c1 = np.where(on, 1.0 / j, 0.0)
    c2 = np.where(on, j ** -1.5, 0.0)
    a2 = 2.0 * float(np.sum(c2 * np.sqrt(eigenvalues(spec))))
    return c1, c2, a2


def signal_variances(spec: DesignSpec):
    """``V1 = Var<b1, X>`` and ``V2 = E sigma(X)^2``."""
    c1, c2, a2 = _signal_coefficients(spec)
    kappa = eigenvalues(spec)
    return float(np.sum(c1 ** 2 * kappa)), float(a2 ** 2 + np.sum(c2 ** 2 * kappa))


def theta_from_r2(spec: DesignSpec) -> float:
    """Signal scale giving population R^2 = theta^2 V1 / (theta^2 V1 + V2)."""
    v1, v2 = signal_variances(spec)
    r2 = spec.r_squared
    return math.sqrt(r2 * v2 / ((1.0 - r2) * v1))


def implied_r2(spec: DesignSpec, theta: float) -> float:
    v1, v2 = signal_variances(spec)
    return theta ** 2 * v1 / (theta ** 2 * v1 + v2)


def true_parameters(spec: DesignSpec):
    """Intercept and score coefficients of the true conditional tau-quantile."""
    c1, c2, a2 = _signal_coefficients(spec)
    z = float(stats.norm.ppf(spec.tau))
    theta = theta_from_r2(spec)
    return z * a2, theta * c1 + z * c2


@dataclass(frozen=True, eq=False)
class SimulatedDataset:
    """Training and test subjects plus the quantities only a simulation knows."""

    spec: DesignSpec
    theta: float
    train_curves: list
    train_responses: np.ndarray
    train_scores: np.ndarray
    test_curves: list
    test_responses: np.ndarray
    test_scores: np.ndarray
    true_intercept: float
    true_coefficients: np.ndarray
    grid: Grid
    true_slope_on_grid: np.ndarray

    def true_quantile(self, latent_scores) -> np.ndarray:
        """``Q_tau(X)`` from latent (not estimated) scores, one row per subject."""
        s = np.atleast_2d(np.asarray(latent_scores, dtype=float))
        return self.true_intercept + s @ self.true_coefficients

    def quadrature_quantile(self, latent_scores) -> np.ndarray:
        """``a + int b(t) X(t) dt`` by the trapezoid rule on the grid.

        An independent route to the true quantile: it integrates the true
        slope against the noiseless curve instead of using score algebra.
        """
        s = np.atleast_2d(np.asarray(latent_scores, dtype=float))
        curves = s @ eigenfunctions(self.grid.points, s.shape[1]).T
        w = trapezoid_weights(self.grid.size, self.grid.spacing)
        return self.true_intercept + curves @ (w * self.true_slope_on_grid)

    @property
    def train_quantiles(self) -> np.ndarray:
        return self.true_quantile(self.train_scores)

    @property
    def test_quantiles(self) -> np.ndarray:
        return self.true_quantile(self.test_scores)


def _subjects(spec, count, rngs, start_id, theta, c1, c2, a2):
    r_scores, r_counts, r_times, r_noise, r_err = rngs
    kappa = eigenvalues(spec)
    z = r_scores.uniform(-math.sqrt(3.0), math.sqrt(3.0), size=(count, spec.j_max))
    xi = z * np.sqrt(kappa)
    sizes = r_counts.integers(10, 13, size=count)
    sigma = a2 + xi @ c2
    if np.any(sigma <= 0):
        raise AssertionError("sigma(X) must be positive for every subject")
    y = theta * (xi @ c1) + sigma * r_err.standard_normal(count)
    curves = []
    for i in range(count):
        t = np.sort(r_times.uniform(0.0, 1.0, size=sizes[i]))
        x = eigenfunctions(t, spec.j_max) @ xi[i]
        u = x + r_noise.normal(0.0, spec.noise_sd, size=t.size)
        curves.append(SparseCurve(start_id + i, t, u))
    return curves, y, xi


def generate(spec: DesignSpec, replication: int = 0) -> SimulatedDataset:
    """Draw one dataset; identical ``(spec.seed, replication)`` gives identical data.

    Separate random streams drive the latent scores, observation counts,
    observation times, measurement noise and response errors.
    """
    root = np.random.SeedSequence([int(spec.seed), int(replication)])
    train_ss, test_ss = root.spawn(2)
    c1, c2, a2 = _signal_coefficients(spec)
    theta = theta_from_r2(spec)
    train = _subjects(spec, spec.n, [np.random.default_rng(s) for s in train_ss.spawn(5)],
                      0, theta, c1, c2, a2)
    test = _subjects(spec, spec.n_test, [np.random.default_rng(s) for s in test_ss.spawn(5)],
                     spec.n, theta, c1, c2, a2)
    a, b = true_parameters(spec)
    grid = Grid.uniform(spec.grid_size)
    slope = eigenfunctions(grid.points, spec.j_max) @ b
    return SimulatedDataset(spec=spec, theta=theta,
                            train_curves=train[0], train_responses=train[1], train_scores=train[2],
                            test_curves=test[0], test_responses=test[1], test_scores=test[2],
                            true_intercept=a, true_coefficients=b, grid=grid,
                            true_slope_on_grid=slope)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExperimentResult:
    """Replication-level metrics in tidy form plus per-method summaries."""

    spec: DesignSpec
    methods: tuple
    rows: list
    failures: list

    def values(self, method: str, metric: str = "efpe") -> np.ndarray:
        return np.array([r[3] for r in self.rows if r[1] == method and r[2] == metric])

    def mean(self, method: str, metric: str = "efpe") -> float:
        v = self.values(method, metric)
        return float(v.mean()) if v.size else float("nan")

    def summary(self) -> dict:
        metrics = sorted({r[2] for r in self.rows})
        out = {"spec": {k: getattr(self.spec, k) for k in self.spec.__dataclass_fields__},
               "replications_ok": len({r[0] for r in self.rows}),
               "failures": len(self.failures),
               "failure_messages": [f"{r}: {msg}" for r, msg in self.failures],
               "methods": {}}
        for m in self.methods:
            entry = {}
            for metric in metrics:
                v = self.values(m, metric)
                if v.size:
                    entry[metric] = {"mean": float(v.mean()),
                                     "se": float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan"),
                                     "count": int(v.size)}
            out["methods"][m] = entry
        return out

    def write(self, csv_path=None, json_path=None):
        import csv
        from .io import dump_json, fmt
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["replication", "method", "metric", "value"])
                for r in self.rows:
                    w.writerow([r[0], r[1], r[2], fmt(r[3])])
        if json_path is not None:
            dump_json(self.summary(), json_path)


def run_replication(spec: DesignSpec, methods: Sequence[Method], replication: int,
                    oracle: bool = True) -> list:
    """Metrics ``(replication, method, metric, value)`` for one simulated dataset."""
    data = generate(spec, replication)
    model = fit_fpca(data.train_curves, data.grid, j_max=spec.j_max)
    test_scores = model.scores_for(data.test_curves)
    n = spec.n
    top = min(model.n_components, n - 2)
    if spec.candidates is not None:
        j_range = [j for j in spec.candidates if j <= top]
    else:
        j_range = list(range(0, top + 1))
    q_true = data.test_quantiles
    b_true = data.true_slope_on_grid
    fits: dict = {}
    rows = []
    for m in methods:
        out = apply_method(m, model, data.train_responses, spec.tau, test_scores, j_range, fits,
                           fixed_candidates=j_range if spec.candidates is not None else None)
        rows.append((replication, m.label, "efpe",
                     efpe(data.test_responses, out.predictions, q_true, spec.tau)))
        if spec.design == "II":
            rows.append((replication, m.label, "ise",
                         integrated_squared_error(out.slope_on_grid, b_true, data.grid.spacing)))
    if oracle:
        q_oracle = data.quadrature_quantile(data.test_scores)
        rows.append((replication, "ORACLE", "efpe",
                     efpe(data.test_responses, q_oracle, q_true, spec.tau)))
    return rows


def _replication_job(args):
    spec, methods, r = args
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return r, run_replication(spec, methods, r), None
    except (FdqmaError, ValueError, np.linalg.LinAlgError) as exc:
        return r, [], f"{type(exc).__name__}: {exc}"


def run_experiment(spec: DesignSpec, methods: Sequence[str], replications: int,
                   n_jobs: int = 1, progress=None) -> ExperimentResult:
    """Run ``replications`` independent datasets through every method.

    Returns per-replication EFPE (and ISE of the slope for design II; its
    mean over replications is the MISE). A replication that raises is
    recorded in ``failures`` and excluded from every method. Replication
    ``r`` always sees the same data, independent of ``n_jobs``.
    """
    parsed = tuple(parse_method(m) for m in methods)
    labels = [m.label for m in parsed]
    if len(set(labels)) != len(labels):
        raise ValueError("method labels must be unique")
    jobs = [(spec, parsed, r) for r in range(int(replications))]
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_replication_job, jobs))
    else:
        results = []
        for job in jobs:
            t0 = time.perf_counter()
            results.append(_replication_job(job))
            if progress is not None:
                progress(job[2], time.perf_counter() - t0)
    rows, failures = [], []
    for r, rep_rows, err in sorted(results, key=lambda x: x[0]):
        if err is None:
            rows.extend(rep_rows)
        else:
            failures.append((r, err))
    return ExperimentResult(spec, tuple(labels) + ("ORACLE",), rows, failures)


def with_n(spec: DesignSpec, n: int) -> DesignSpec:
    return replace(spec, n=int(n))
