"""Command-line front end.

Subcommands: simulate, fpca-fit, fit, weights, predict, backtest, pipeline.
Each one reads optional defaults from ``--config`` (key = value lines); flags
given on the command line win. Results go to ``--out`` (default ``.``) and a
short summary is printed with 10 significant digits.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings

import numpy as np

from . import averaging, evaluation, flqr, fpca, pipeline, simulation
from .config import read_config, split_list
from .exceptions import FdqmaError, ParseError
from .io import dump_json, fmt, round_sig

DEFAULT_SIM_METHODS = ("MA(FVE90±4,K4)", "FVE90", "FVE95", "AIC", "BIC", "SAIC", "SBIC")


def _read_responses(path) -> dict:
    """``subject_id,response`` CSV into a dict."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["subject_id", "response"]:
            raise ParseError("expected header subject_id,response", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out[int(row[0])] = float(row[1])
            except (ValueError, IndexError) as exc:
                raise ParseError(str(exc), line=lineno) from None
    return out


def _aligned(curves, responses):
    missing = [c.subject_id for c in curves if c.subject_id not in responses]
    if missing:
        raise ParseError(f"no response for subjects {missing[:5]}")
    return np.array([responses[c.subject_id] for c in curves])


def _setting(args, cfg, name, cast=str, default=None):
    val = getattr(args, name, None)
    if val is None:
        val = cfg.get(name)
    if val is None:
        return default
    return cast(val)


def _print(obj):
    print(json.dumps(round_sig(obj), indent=2, ensure_ascii=False))


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args, cfg):
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    for key in ("design", "n", "tau", "r_squared", "n_test"):
        if getattr(args, key, None) is not None:
            cfg[key] = str(getattr(args, key))
    spec = simulation.DesignSpec.from_config(cfg)
    methods = split_list(args.methods or cfg.get("methods") or ",".join(DEFAULT_SIM_METHODS))
    reps = _setting(args, cfg, "replications", int, 10)
    res = simulation.run_experiment(spec, methods, reps, n_jobs=args.threads)
    res.write(_out(args, "simulation.csv"), _out(args, "simulation.json"))
    _print(res.summary())


def cmd_fpca_fit(args, cfg):
    curves = fpca.read_curves_csv(_setting(args, cfg, "curves"))
    grid = fpca.Grid.uniform(_setting(args, cfg, "grid_size", int, 51))
    j_max = _setting(args, cfg, "j_max", int, 20)
    bw = _setting(args, cfg, "bandwidth", str, fpca.AUTO)
    bws = (fpca.AUTO, fpca.AUTO) if bw == fpca.AUTO else tuple(float(b) for b in split_list(bw))
    if len(bws) == 1:
        bws = bws * 2
    model = fpca.fit_fpca(curves, grid, j_max=j_max, bandwidths=bws)
    model.save(_out(args, "fpca.json"))
    with open(_out(args, "scores.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id"] + [f"xi{j + 1}" for j in range(model.n_components)])
        for c, s in zip(curves, model.scores):
            w.writerow([c.subject_id] + [fmt(v) for v in s])
    _print({"curves": len(curves), "components": model.n_components,
            "noise_variance": model.noise_variance, "eigenvalues": model.eigenvalues,
            "fve_cumulative": model.fve_cumulative, "bandwidths": list(model.bandwidths)})


def _load_training(args, cfg):
    model = fpca.FpcaModel.load(_setting(args, cfg, "model"))
    curves = fpca.read_curves_csv(_setting(args, cfg, "curves"))
    y = _aligned(curves, _read_responses(_setting(args, cfg, "responses")))
    scores = model.scores_for(curves)
    return model, curves, y, scores


def cmd_fit(args, cfg):
    model, _, y, scores = _load_training(args, cfg)
    tau = _setting(args, cfg, "tau", float, 0.05)
    j = _setting(args, cfg, "j", str, None)
    if j is None or not j.lstrip("-").isdigit():
        model_full = _with_scores(model, scores)
        j = flqr.select_j(model_full, y, tau, j or "BIC")
    fit = flqr.fit_qr(y, scores[:, :int(j)], tau, model.eigenfunctions)
    dump_json(fit.to_dict(), _out(args, "fit.json"))
    _print({"tau": tau, "j": fit.j, "intercept": fit.intercept,
            "coefficients": fit.coefficients, "in_sample_loss": fit.in_sample_loss,
            "aic": flqr.aic(fit, y.size), "bic": flqr.bic(fit, y.size)})


def _with_scores(model, scores):
    from dataclasses import replace
    return replace(model, scores=scores)


def cmd_weights(args, cfg):
    model, _, y, scores = _load_training(args, cfg)
    model = _with_scores(model, scores)
    tau = _setting(args, cfg, "tau", float, 0.05)
    k = _setting(args, cfg, "k", int, 2)
    d = _setting(args, cfg, "d", int, 8)
    anchor = _setting(args, cfg, "anchor", str, "BIC")
    cands = averaging.build_candidate_set(model, y, tau, anchor, d)
    ma = averaging.fit_model_average(model, y, tau, cands, k, shuffle=bool(args.shuffle),
                                     seed=args.seed)
    doc = {"tau": tau, "anchor": anchor, "d": d, "k": k,
           "candidates": list(cands.members), "anchor_j": cands.anchor,
           "weights": ma.weights.to_dict(), "fits": [f.to_dict() for f in ma.fits],
           "cv_table": ma.table.to_dict() if ma.table is not None else None}
    dump_json(doc, _out(args, "weights.json"))
    a, _ = ma.parameters()
    _print({"anchor_j": cands.anchor, "members": list(ma.weights.members),
            "weights": ma.weights.weights, "cv_value": ma.weights.cv_value,
            "averaged_intercept": a})


def cmd_predict(args, cfg):
    model = fpca.FpcaModel.load(_setting(args, cfg, "model"))
    with open(_setting(args, cfg, "weights")) as fh:
        doc = json.load(fh)
    if "fits" in doc:
        fits = [flqr.QuantileFit.from_dict(f) for f in doc["fits"]]
        weights = averaging.WeightVector.from_dict(doc["weights"])
    else:
        fits = [flqr.QuantileFit.from_dict(doc)]
        weights = averaging.WeightVector((fits[0].j,), np.ones(1))
    curves = fpca.read_curves_csv(_setting(args, cfg, "curves"))
    scores = model.scores_for(curves)
    q = averaging.averaged_predictions(fits, weights, scores)
    with open(_out(args, "predictions.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "quantile"])
        for c, v in zip(curves, q):
            w.writerow([c.subject_id, fmt(v)])
    _print({"subjects": len(curves), "mean_quantile": float(np.mean(q))})


def _read_series(path):
    """CSV with columns ``response,quantile`` or a single ``hit`` column."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = [c.strip() for c in (reader.fieldnames or [])]
        rows = list(reader)
    try:
        if "hit" in cols:
            return None, np.array([int(r["hit"]) for r in rows], dtype=bool)
        if {"response", "quantile"} <= set(cols):
            return (np.array([float(r["response"]) for r in rows]),
                    np.array([float(r["quantile"]) for r in rows]))
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    raise ParseError("expected columns response,quantile or hit", line=1)


def cmd_backtest(args, cfg):
    tau = _setting(args, cfg, "tau", float, 0.05)
    y, q = _read_series(_setting(args, cfg, "input"))
    series = (evaluation.ViolationSeries(tau, q) if y is None
              else evaluation.ViolationSeries.from_forecasts(y, q, tau))
    report = evaluation.backtest(series)
    label = _setting(args, cfg, "method", str, "")
    asset = _setting(args, cfg, "asset", str, "")
    evaluation.write_backtest_csv(report.csv_rows(asset, label), _out(args, "backtest.csv"))
    dump_json(report.to_dict(), _out(args, "backtest.json"))
    _print(report.to_dict())


def cmd_pipeline(args, cfg):
    if args.config is None and not args.asset:
        raise ParseError("pipeline needs --config or --asset NAME=PATH")
    for spec in args.asset or []:
        name, _, path = spec.partition("=")
        cfg[f"asset.{name}"] = path
    for key in ("tau", "k", "d", "anchor", "partitions"):
        if getattr(args, key, None) is not None:
            cfg[key] = str(getattr(args, key))
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    base = os.path.dirname(os.path.abspath(args.config)) if args.config else os.getcwd()
    pc = pipeline.PipelineConfig.from_dict(cfg, base)
    report = pipeline.run_pipeline(pc, args.out, n_jobs=args.threads)
    summary = report.summary()
    _print({"mean_fpe": {f"{a['asset']}@{a['tau']}": a["mean_fpe"] for a in summary["assets"]},
            "non_rejection_counts": summary["non_rejection_counts"],
            "failures": summary["failures"]})
    return 1 if report.failures else 0


# ---------------------------------------------------------------------------

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the flags without defaults so they never clobber earlier values
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", help="key = value settings file", **kw)
    g.add_argument("--seed", type=int, help="random seed", **kw)
    g.add_argument("--threads", type=int, help="worker processes",
                   **(kw or {"default": 1}))
    g.add_argument("--out", help="output directory", **(kw or {"default": "."}))
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="fdqma", parents=[_global_flags(suppress=False)],
                                description="Functional quantile model averaging and VaR backtests.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo experiment")
    s.add_argument("--design", choices=["I", "II"])
    s.add_argument("--n", type=int)
    s.add_argument("--n-test", dest="n_test", type=int)
    s.add_argument("--tau", type=float)
    s.add_argument("--r-squared", dest="r_squared", type=float)
    s.add_argument("--replications", type=int)
    s.add_argument("--methods", help="comma-separated, e.g. 'MA(FVE90±4,K4),FVE90,SBIC'")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fpca-fit", parents=[common], help="fit FPCA to a long-format curve CSV")
    s.add_argument("--curves")
    s.add_argument("--grid-size", dest="grid_size", type=int)
    s.add_argument("--j-max", dest="j_max", type=int)
    s.add_argument("--bandwidth", help="'auto', one value, or 'mean,cov'")
    s.set_defaults(func=cmd_fpca_fit)

    for name, func, helptext in (("fit", cmd_fit, "fit one quantile regression"),
                                 ("weights", cmd_weights, "cross-validated averaging weights")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--model")
        s.add_argument("--curves")
        s.add_argument("--responses")
        s.add_argument("--tau", type=float)
        if name == "fit":
            s.add_argument("--j", help="truncation level or criterion (AIC, BIC, FVE90)")
        else:
            s.add_argument("--k", type=int)
            s.add_argument("--d", type=int)
            s.add_argument("--anchor")
            s.add_argument("--shuffle", action="store_true",
                           help="permute observations (with --seed) before folding")
        s.set_defaults(func=func)

    s = sub.add_parser("predict", parents=[common], help="quantile forecasts for new curves")
    s.add_argument("--model")
    s.add_argument("--weights", help="weights.json or fit.json")
    s.add_argument("--curves")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("backtest", parents=[common], help="HIT/POF/CCI/TBF tests")
    s.add_argument("--input", help="CSV with response,quantile or hit columns")
    s.add_argument("--tau", type=float)
    s.add_argument("--asset")
    s.add_argument("--method")
    s.set_defaults(func=cmd_backtest)

    s = sub.add_parser("pipeline", parents=[common], help="price files to FPE and backtests")
    s.add_argument("--asset", action="append", help="NAME=PATH (repeatable)")
    s.add_argument("--tau")
    s.add_argument("--k", type=int)
    s.add_argument("--d", type=int)
    s.add_argument("--anchor")
    s.add_argument("--partitions", type=int)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = read_config(args.config) if args.config else {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            code = args.func(args, cfg)
        return int(code or 0)
    except (FdqmaError, OSError, ValueError) as exc:
        print(f"fdqma {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
