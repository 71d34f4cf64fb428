"""Hourly price data to VaR forecasts: ingestion, gap-day sampling, evaluation.

Each sample pairs the curve of within-day hourly log-returns on one UTC day
with the minimum hourly log-return of the next day. Samples are built from
consecutive three-day blocks (covariate day, response day, skipped day), so
no day is used twice and successive samples are separated by a full day.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .averaging import COMPARISON_METHODS, apply_method, parse_method
from .config import read_config, split_list
from .evaluation import (CSV_HEADER, BacktestReport, ViolationSeries, backtest, fpe,
                         write_backtest_csv)
from .exceptions import FdqmaError, InsufficientData, NonPositivePrice, ParseError
from .fpca import Grid, SparseCurve, fit_fpca
from .io import dump_json, fmt

SECONDS_PER_HOUR = 3600
HOURS_PER_DAY = 24
SECONDS_PER_DAY = SECONDS_PER_HOUR * HOURS_PER_DAY


@dataclass(frozen=True)
class PriceRecord:
    asset: str
    timestamp: int
    price: float


def ingest(csv_path, asset: str = "") -> list:
    """Read a ``timestamp,price`` CSV (epoch seconds, UTC) into sorted records.

    Raises
    ------
    ParseError
        Malformed header or row, or a repeated timestamp (with its line number).
    NonPositivePrice
        A price that is zero or negative.
    """
    records, seen = [], {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["timestamp", "price"]:
            raise ParseError("expected header timestamp,price", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, got {len(row)}", line=lineno)
            try:
                ts_float = float(row[0])
                price = float(row[1])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if not (math.isfinite(ts_float) and ts_float == int(ts_float)):
                raise ParseError(f"timestamp {row[0]!r} is not whole seconds", line=lineno)
            if not math.isfinite(price):
                raise ParseError(f"price {row[1]!r} is not finite", line=lineno)
            if price <= 0:
                raise NonPositivePrice(f"price {price} is not positive", line=lineno)
            ts = int(ts_float)
            if ts in seen:
                raise ParseError(f"timestamp {ts} repeats line {seen[ts]}", line=lineno)
            seen[ts] = lineno
            records.append(PriceRecord(asset, ts, price))
    records.sort(key=lambda r: r.timestamp)
    return records


def hourly_log_returns(records: Sequence[PriceRecord]) -> dict:
    """Per UTC day, ``(hours, returns)`` of within-day hourly log-returns.

    The last price in each clock hour is that hour's price. A return for hour
    ``h`` exists when hours ``h - 1`` and ``h`` of the same day both have one.
    """
    last = {}
    for r in records:
        last[r.timestamp // SECONDS_PER_HOUR] = r.price
    by_day: dict = {}
    for hour_index in sorted(last):
        day, hour = divmod(hour_index, HOURS_PER_DAY)
        prev = last.get(hour_index - 1)
        if hour == 0 or prev is None:
            by_day.setdefault(day, ([], []))
            continue
        hours, rets = by_day.setdefault(day, ([], []))
        hours.append(hour)
        rets.append(math.log(last[hour_index] / prev))
    return {d: (np.array(h, dtype=int), np.array(r)) for d, (h, r) in by_day.items()}


@dataclass(frozen=True, eq=False)
class GapDaySample:
    """Paired (covariate curve, next-day minimum return) samples for one asset."""

    asset: str
    curves: list
    responses: np.ndarray
    days: list = field(default_factory=list)
    dropped_days: list = field(default_factory=list)

    @property
    def pairs(self):
        return list(zip(self.curves, self.responses))

    def __len__(self):
        return len(self.curves)


def build_gap_day_sample(records: Sequence[PriceRecord], min_returns: int = 12) -> GapDaySample:
    """Gap-day samples from hourly prices.

    Calendar days from the first to the last observed UTC day are cut into
    blocks of three: day one gives the covariate curve (hour ``h`` at
    ``t = h / 23``), day two the response (its minimum hourly log-return), day
    three is skipped. Only complete blocks count, so four days give one
    sample and eight give two. Days with fewer than ``min_returns`` returns
    are dropped with a warning, together with any sample that needs them.
    """
    if not records:
        raise InsufficientData("no price records")
    asset = records[0].asset
    returns = hourly_log_returns(records)
    first, last = min(returns), max(returns)
    n_days = last - first + 1
    if n_days < 4:
        raise InsufficientData(f"need at least 4 calendar days, got {n_days}")
    usable = {d for d, (_, r) in returns.items() if r.size >= min_returns}
    dropped = sorted(d for d in range(first, last + 1) if d not in usable)
    if dropped:
        warnings.warn(f"{asset or 'asset'}: {len(dropped)} day(s) with fewer than "
                      f"{min_returns} hourly returns dropped", UserWarning, stacklevel=2)
    curves, responses, days = [], [], []
    for block in range(n_days // 3):
        cov_day = first + 3 * block
        resp_day = cov_day + 1
        if cov_day not in usable or resp_day not in usable:
            continue
        hours, rets = returns[cov_day]
        curves.append(SparseCurve(len(curves), hours / (HOURS_PER_DAY - 1.0), rets))
        responses.append(float(returns[resp_day][1].min()))
        days.append((cov_day, resp_day))
    if not curves:
        raise InsufficientData("no complete covariate/response day pair")
    return GapDaySample(asset, curves, np.array(responses), days, dropped)


def synthetic_prices(days: int = 30, seed: int = 0, start: int = 1654041600,
                     missing_rate: float = 0.02, asset: str = "SYN") -> list:
    """Hourly prices with persistent volatility and an intraday pattern.

    Log-returns follow a GARCH(1,1)-type recursion scaled by a smooth
    intraday volatility profile; a few hours are randomly missing.
    """
    rng = np.random.default_rng(seed)
    n = days * HOURS_PER_DAY
    hour = np.arange(n) % HOURS_PER_DAY
    profile = 1.0 + 0.5 * np.cos(2 * np.pi * (hour - 15) / HOURS_PER_DAY)
    omega, alpha, beta = 2e-6, 0.08, 0.9
    var = omega / (1 - alpha - beta)
    log_p = math.log(20000.0)
    out = []
    for i in range(n):
        eps = rng.standard_t(5) * math.sqrt(3.0 / 5.0)
        r = math.sqrt(var) * profile[i] * eps
        var = omega + alpha * (r / profile[i]) ** 2 + beta * var
        log_p += r
        if rng.random() >= missing_rate:
            out.append(PriceRecord(asset, start + i * SECONDS_PER_HOUR + 59 * 60,
                                   round(math.exp(log_p), 2)))
    return out


def write_prices_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "price"])
        for r in records:
            w.writerow([r.timestamp, repr(r.price)])


# ---------------------------------------------------------------------------
# forecasting pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    """Settings for :func:`run_pipeline`.

    ``assets`` maps an asset name to its price CSV. ``partitions`` random
    train/test splits of the samples give the FPE table; calibration
    backtests use the chronological split (first ``train_fraction`` of the
    samples for training, the rest in time order for testing).
    """

    assets: tuple = ()
    taus: tuple = (0.05,)
    k: int = 2
    d: int = 8
    anchor: str = "BIC"
    partitions: int = 200
    train_fraction: float = 0.7
    seed: int = 0
    grid_size: int = 51
    j_max: int = 20
    min_returns: int = 12
    comparison: tuple = COMPARISON_METHODS

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.partitions < 1 or self.k < 2 or self.d < 0:
            raise ValueError("need partitions >= 1, k >= 2 and d >= 0")

    @property
    def ma_label(self) -> str:
        return f"MA({self.anchor}±{self.d},K{self.k})"

    @property
    def methods(self) -> tuple:
        return (self.ma_label,) + tuple(m for m in self.comparison if m != self.ma_label)

    @classmethod
    def from_dict(cls, cfg: dict, base_dir: str = ".") -> "PipelineConfig":
        """Keys: ``asset.<NAME> = path`` (repeatable), ``tau`` (list), ``k``, ``d``,
        ``anchor``, ``partitions``, ``train_fraction``, ``seed``, ``grid_size``,
        ``j_max``, ``min_returns``, ``comparison`` (list)."""
        kw: dict = {}
        assets = []
        ints = {"k", "d", "partitions", "seed", "grid_size", "j_max", "min_returns"}
        known = {f.name for f in fields(cls)}
        for key, val in cfg.items():
            if key.startswith("asset."):
                path = str(val)
                if not os.path.isabs(path):
                    path = os.path.join(base_dir, path)
                assets.append((key.split(".", 1)[1].upper(), path))
            elif key in ("tau", "taus"):
                kw["taus"] = tuple(float(v) for v in split_list(val))
            elif key == "comparison":
                kw["comparison"] = tuple(split_list(val))
            elif key in ints:
                kw[key] = int(val)
            elif key == "train_fraction":
                kw[key] = float(val)
            elif key == "anchor":
                kw[key] = str(val)
            elif key not in known:
                raise ParseError(f"unknown pipeline setting {key!r}")
        if assets:
            kw["assets"] = tuple(assets)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_dict(read_config(path), os.path.dirname(os.path.abspath(path)))


def split_indices(n: int, train_fraction: float, rng=None):
    """Train/test index arrays with ``floor((1 - train_fraction) n)`` test points.

    With ``rng`` the split is a random partition (both parts sorted);
    without, it is chronological.
    """
    n_test = int(math.floor((1.0 - train_fraction) * n + 1e-9))
    if n_test < 1 or n - n_test < 4:
        raise InsufficientData(f"{n} samples cannot be split into train and test")
    order = np.arange(n) if rng is None else rng.permutation(n)
    return np.sort(order[: n - n_test]), np.sort(order[n - n_test:])


@dataclass(frozen=True, eq=False)
class SplitResult:
    """Every method's test predictions and weights for one train/test split."""

    test_index: np.ndarray
    responses: np.ndarray
    predictions: dict
    weights: dict
    fpe: dict


def forecast_split(curves, responses, train, test, methods: Sequence[str], tau: float,
                   grid: Grid, j_max: int) -> SplitResult:
    """Fit the FPCA on the training curves and forecast the test responses."""
    y = np.asarray(responses, dtype=float)
    train_curves = [curves[i] for i in train]
    test_curves = [curves[i] for i in test]
    model = fit_fpca(train_curves, grid, j_max=j_max)
    test_scores = model.scores_for(test_curves)
    top = min(model.n_components, len(train) - 2)
    j_range = list(range(0, max(top, 0) + 1))
    fits: dict = {}
    preds, weights, losses = {}, {}, {}
    for label in methods:
        out = apply_method(parse_method(label), model, y[train], tau, test_scores, j_range, fits)
        preds[label] = out.predictions
        weights[label] = out.weights
        losses[label] = fpe(y[test], out.predictions, tau)
    return SplitResult(np.asarray(test), y[test], preds, weights, losses)


@dataclass(frozen=True, eq=False)
class AssetResult:
    asset: str
    tau: float
    n_samples: int
    partition_fpe: dict
    partition_weights: list
    chronological: Optional[SplitResult]
    backtests: dict

    @property
    def mean_fpe(self) -> dict:
        return {m: float(np.mean(v)) for m, v in self.partition_fpe.items()}


def _partition_job(args):
    curves, y, r, cfg, tau = args
    rng = np.random.default_rng([cfg.seed, r])
    train, test = split_indices(len(y), cfg.train_fraction, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return forecast_split(curves, y, train, test, cfg.methods, tau,
                              Grid.uniform(cfg.grid_size), cfg.j_max)


def evaluate_sample(curves, responses, cfg: PipelineConfig, tau: float, asset: str = "",
                    n_jobs: int = 1) -> AssetResult:
    """Random-partition FPE table plus chronological-split backtests for one sample."""
    y = np.asarray(responses, dtype=float)
    jobs = [(curves, y, r, cfg, tau) for r in range(cfg.partitions)]
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            splits = list(pool.map(_partition_job, jobs))
    else:
        splits = [_partition_job(j) for j in jobs]
    table = {m: [s.fpe[m] for s in splits] for m in cfg.methods}
    weights = [s.weights[cfg.ma_label] for s in splits]
    train, test = split_indices(len(y), cfg.train_fraction)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        chrono = forecast_split(curves, y, train, test, cfg.methods, tau,
                                Grid.uniform(cfg.grid_size), cfg.j_max)
    reports = {m: backtest(ViolationSeries.from_forecasts(chrono.responses, chrono.predictions[m], tau))
               for m in cfg.methods}
    return AssetResult(asset, tau, len(y), table, weights, chrono, reports)


@dataclass(frozen=True, eq=False)
class PipelineReport:
    config: PipelineConfig
    results: list
    failures: list

    def non_rejection_counts(self) -> dict:
        """Per tau, method and test: how many assets were not rejected at 5%."""
        out: dict = {}
        for res in self.results:
            per_tau = out.setdefault(str(res.tau), {})
            for method, rep in res.backtests.items():
                row = per_tau.setdefault(method, {})
                for test, r in rep.results.items():
                    row[test] = row.get(test, 0) + int(not r.rejected)
        return out

    def write(self, out_dir):
        """FPE table, weights, violation series and backtests as CSV/JSON files."""
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "fpe.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["asset", "tau", "method", "partition", "fpe"])
            for res in self.results:
                for m, vals in res.partition_fpe.items():
                    for r, v in enumerate(vals):
                        w.writerow([res.asset, fmt(res.tau), m, r, fmt(v)])
        with open(os.path.join(out_dir, "fpe_summary.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["asset", "tau", "method", "mean_fpe", "partitions"])
            for res in self.results:
                for m, v in res.mean_fpe.items():
                    w.writerow([res.asset, fmt(res.tau), m, fmt(v), len(res.partition_fpe[m])])
        with open(os.path.join(out_dir, "violations.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["asset", "tau", "method", "sample", "response", "quantile", "hit"])
            for res in self.results:
                c = res.chronological
                for m, q in c.predictions.items():
                    for i, yi, qi in zip(c.test_index, c.responses, q):
                        w.writerow([res.asset, fmt(res.tau), m, int(i), fmt(yi), fmt(qi),
                                    int(yi <= qi)])
        rows = [row for res in self.results
                for m, rep in res.backtests.items() for row in rep.csv_rows(res.asset, m)]
        write_backtest_csv(rows, os.path.join(out_dir, "backtests.csv"))
        dump_json({"weights": [{"asset": res.asset, "tau": res.tau, "method": self.config.ma_label,
                                "partitions": [{"members": list(w), "weights": list(w.values())}
                                               for w in res.partition_weights]}
                               for res in self.results]},
                  os.path.join(out_dir, "weights.json"))
        dump_json(self.summary(), os.path.join(out_dir, "summary.json"))

    def summary(self) -> dict:
        return {"methods": list(self.config.methods),
                "assets": [{"asset": r.asset, "tau": r.tau, "samples": r.n_samples,
                            "mean_fpe": r.mean_fpe,
                            "backtests": {m: rep.to_dict() for m, rep in r.backtests.items()}}
                           for r in self.results],
                "non_rejection_counts": self.non_rejection_counts(),
                "failures": [{"asset": a, "tau": t, "error": e} for a, t, e in self.failures]}


def run_pipeline(cfg: PipelineConfig, out_dir=None, n_jobs: int = 1) -> PipelineReport:
    """Run every asset and tau; an asset that fails is logged and skipped.

    With ``out_dir`` the report files are rewritten after each asset, so
    results finished before a failure are kept on disk.
    """
    if not cfg.assets:
        raise ValueError("no assets configured")
    results, failures = [], []
    report = PipelineReport(cfg, results, failures)
    for name, path in cfg.assets:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                sample = build_gap_day_sample(ingest(path, name), cfg.min_returns)
            for tau in cfg.taus:
                results.append(evaluate_sample(sample.curves, sample.responses, cfg, tau,
                                               name, n_jobs))
        except (FdqmaError, ValueError, OSError, np.linalg.LinAlgError) as exc:
            failures.append((name, None, f"{type(exc).__name__}: {exc}"))
        if out_dir is not None:
            report.write(out_dir)
    return report


__all__ = ["PriceRecord", "ingest", "hourly_log_returns", "GapDaySample",
           "build_gap_day_sample", "synthetic_prices", "write_prices_csv", "PipelineConfig",
           "split_indices", "forecast_split", "SplitResult", "evaluate_sample", "AssetResult",
           "PipelineReport", "run_pipeline", "CSV_HEADER", "BacktestReport"]
