"""Command-line experiment runner.

Subcommands::

    gpdyn generate  --system lotka-volterra --density 0.1 --noise 0.1 --seed 1 --out runs/lv
    gpdyn fit       --system lotka-volterra --scenario case-a --data runs/lv --out runs/lv
    gpdyn predict   --posterior runs/lv --ic 2 1.2 --t-end 20 --out runs/lv
    gpdyn benchmark --system lotka-volterra --config grid.json --out runs/grid

Flags override values from ``--config``.  The output root defaults to
``$GPDYN_OUT`` (or ``./runs``).  Exit codes: 0 success, 2 usage error,
3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, dataio, dynamics, pipeline
from . import inference_linear as il
from . import inference_mcmc as mc
from .config import ConfigError, ExperimentConfig, load_config
from .errors import DataError, NumericalError

log = logging.getLogger("gpdyn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
OUT_ENV = "GPDYN_OUT"


class UsageError(Exception):
    pass


# Helpers =====================================================================
def _write_json(path, obj):
    with dataio.atomic_write(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _write_csv(path, header, rows):
    with dataio.atomic_write(path) as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _manifest(out, cfg, command, outputs, extra=None):
    import scipy

    _write_json(
        Path(out) / f"manifest_{command}.json",
        {
            "command": command,
            "config": cfg.to_dict(),
            "config_sha256": cfg.digest(),
            "seeds": {
                "root": cfg.seed,
                "data": cfg.seed,
                "gp": [pipeline.stage_seed(cfg.seed, f"gp{j}") for j in range(dynamics.get_system(cfg.system).state_dim)],
                "mcmc": pipeline.stage_seed(cfg.seed, "mcmc"),
                "predict": pipeline.stage_seed(cfg.seed, "predict"),
            },
            "versions": {
                "gpdyn": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "outputs": sorted(str(Path(p).name) for p in outputs),
            **(extra or {}),
        },
    )


def _resolve_config(args):
    if args.config:
        cfg = load_config(args.config)
        if args.system and args.system != cfg.system:
            cfg = cfg.override(system=args.system, scenario=args.scenario)
    elif args.system:
        cfg = ExperimentConfig(system=args.system)
    else:
        raise UsageError("--system is required (directly or through --config)")
    return cfg.override(**{
        "scenario": args.scenario,
        "seed": args.seed,
        "data.density": args.density,
        "data.noise_level": args.noise,
    })


def _out_dir(args):
    root = args.out or os.environ.get(OUT_ENV) or "runs"
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _ics(cfg):
    if cfg.data.ics:
        return [np.asarray(ic, dtype=float) for ic in cfg.data.ics]
    return [np.asarray(dataio.BENCHMARKS[cfg.system].ic, dtype=float)]


def _train_fraction(cfg):
    if cfg.data.train_window is None:
        return None
    return cfg.data.train_window / dataio.BENCHMARKS[cfg.system].t_end


def make_datasets(cfg):
    """Training sets (one per initial condition) and the clean test trajectory of the first."""
    trains, test = [], None
    for k, ic in enumerate(_ics(cfg)):
        tr, te = dataio.generate_benchmark(
            cfg.system, density=cfg.data.density, noise_level=cfg.data.noise_level,
            seed=cfg.seed if k == 0 else pipeline.stage_seed(cfg.seed, f"data{k}"),
            pool_seed=cfg.data.pool_seed, n_points=cfg.data.n_points, ic=ic,
            train_fraction=_train_fraction(cfg),
        )
        trains.append(tr)
        test = test or te
    return trains, test


def _train_paths(directory):
    paths = sorted(p for p in Path(directory).glob("train*.csv") if not p.name.endswith(".clean.csv"))
    if not paths:
        raise DataError(f"no train*.csv files in {directory}")
    return paths


# Commands ====================================================================
def cmd_generate(cfg, out):
    trains, test = make_datasets(cfg)
    written = []
    for k, tr in enumerate(trains):
        name = "train.csv" if len(trains) == 1 else f"train_{k}.csv"
        written += dataio.save_dataset(tr, out / name)
    written += dataio.save_dataset(test, out / "test.csv")
    _manifest(out, cfg, "generate", written)
    for tr in trains:
        log.info("wrote %d training points (noise %.3g, density %.3g)", tr.K, tr.noise_level, tr.density)
    return written


def _load_or_make(cfg, data_dir):
    if data_dir is None:
        trains, _ = make_datasets(cfg)
        return trains
    return [dataio.load_dataset(p) for p in _train_paths(data_dir)]


def _posterior_density_rows(posteriors, eq_names, n=201):
    for i, post in enumerate(posteriors):
        for j, name in enumerate(post.term_names):
            mu, sd = post.mean[j], max(post.sd[j], 1e-300)
            for x in np.linspace(mu - 4 * sd, mu + 4 * sd, n):
                yield [eq_names[i], name, x, np.exp(-0.5 * ((x - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))]


def cmd_fit(cfg, out, data_dir=None):
    trains = _load_or_make(cfg, data_dir)
    written = []
    inf = cfg.inference
    trajectories = [(tr.times, tr.values) for tr in trains]
    if cfg.scenario in ("case-a", "case-b"):
        dicts, truth = pipeline.dictionaries_for(cfg.system, cfg.scenario)
        res = pipeline.fit_affine(
            None, None, dicts, scenario=cfg.scenario, truth=truth, restarts=cfg.gp.restarts, seed=cfg.seed,
            chi_d_init=cfg.gp.chi_d_init, prior_precision=inf.prior_precision, threshold=inf.threshold,
            lambda_active=inf.lambda_active, lambda_sparse=inf.lambda_sparse, trajectories=trajectories,
        )
        eps1, eps2 = res.eps
        eqs = [p.to_dict(eps1=eps1, eps2=eps2) for p in res.posteriors]
        _write_json(out / "posterior.json", {
            "kind": "gaussian", "system": cfg.system, "scenario": cfg.scenario,
            "equations": eqs, "eps1": eps1, "eps2": eps2,
        })
        rows = []
        for i, (p, t) in enumerate(zip(res.posteriors, truth)):
            for j, name in enumerate(p.term_names):
                rows.append([f"eq{i + 1}", name, p.mean[j], p.sd[j], t[j]])
        _write_csv(out / "summary.csv", ["equation", "term", "mean", "sd", "truth"], rows)
        eq_names = [f"eq{i + 1}" for i in range(len(dicts))]
        _write_csv(out / "posterior_density.csv", ["equation", "term", "theta", "pdf"],
                   _posterior_density_rows(res.posteriors, eq_names))
        metrics = {"eps1": eps1, "eps2": eps2, "n_points": [tr.K for tr in trains]}
        if cfg.benchmark.baseline and len(trains) == 1:
            try:
                _, metrics["eps1_fd_linreg"] = pipeline.fit_baseline(
                    trains[0].times, trains[0].values, dicts, truth, smooth=trains[0].noise_level > 0
                )
            except (DataError, NumericalError) as exc:
                metrics["eps1_fd_linreg"] = None
                log.warning("baseline failed: %s", exc)
        run_log = res.log()
        written += [out / "posterior.json", out / "summary.csv", out / "posterior_density.csv"]
    elif cfg.scenario == "nn-mcmc":
        res = pipeline.fit_network(
            trajectories, hidden=inf.hidden, lam=inf.nn_lambda, steps=inf.steps, burn_in=inf.burn_in, thin=inf.thin,
            init_draws=inf.init_draws, restarts=cfg.gp.restarts, seed=cfg.seed, chi_d_init=cfg.gp.chi_d_init,
        )
        res.chain.write(out / "chain.csv", out / "chain.json", extra={
            "kind": "network", "system": cfg.system, "input_dim": 1, "hidden": inf.hidden, "lambda": inf.nn_lambda,
        })
        q = np.linspace(0.0, 1.0, 201)
        mean, sd = mc.posterior_f_band(res.chain, res.net, q[:, None])
        _write_csv(out / "f_band.csv", ["x", "f_mean", "f_sd"], zip(q, mean, sd))
        metrics = {"acceptance_rate": res.chain.acceptance_rate, "n_points": [tr.K for tr in trains]}
        run_log = res.log()
        written += [out / "chain.csv", out / "chain.json", out / "f_band.csv"]
    else:  # shared-param
        tr = trains[0]
        res = pipeline.fit_black_hole(
            tr.times, tr.values, seed=cfg.seed, lam=inf.shared_lambda, steps=inf.steps, burn_in=inf.burn_in,
            thin=inf.thin, init_draws=inf.init_draws, restarts=cfg.gp.restarts, chi_d_init=cfg.gp.chi_d_init,
        )
        res.chain.write(out / "chain.csv", out / "chain.json", extra={"kind": "shared", "system": cfg.system})
        truth = dynamics.black_hole().truth_flat
        metrics = {
            "mean": res.chain.mean.tolist(), "sd": res.chain.sd.tolist(), "truth": truth.tolist(),
            "acceptance_rate": res.chain.acceptance_rate, "n_points": tr.K,
        }
        run_log = res.log()
        written += [out / "chain.csv", out / "chain.json"]
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "run_log.json", run_log)
    written += [out / "metrics.json", out / "run_log.json"]
    _manifest(out, cfg, "fit", written)
    log.info("fit done: %s", json.dumps(metrics, default=_json_default))
    return metrics


def cmd_predict(cfg, out, posterior_dir, ic=None, t_end=None):
    posterior_dir = Path(posterior_dir)
    setup = dataio.BENCHMARKS[cfg.system]
    t_end = t_end or cfg.prediction.t_end or setup.t_end
    x0 = np.asarray(ic if ic is not None else (cfg.prediction.ic or setup.ic), dtype=float)
    t_eval = np.linspace(0.0, t_end, cfg.prediction.n_out)
    seed = pipeline.stage_seed(cfg.seed, "predict")
    draws = cfg.prediction.draws
    if (posterior_dir / "posterior.json").exists():
        art = json.loads((posterior_dir / "posterior.json").read_text())
        dicts, _ = pipeline.dictionaries_for(art["system"], art["scenario"])
        posts = [il.GaussianPosterior.from_dict(e) for e in art["equations"]]
        pred = pipeline.predict_affine(dicts, posts, x0, t_eval, draws=draws, seed=seed, dt=setup.dt)
        names = list(dynamics.get_system(art["system"]).state_names)
    elif (posterior_dir / "chain.csv").exists():
        meta = json.loads((posterior_dir / "chain.json").read_text())
        chain = mc.SampleChain.read(posterior_dir / "chain.csv", posterior_dir / "chain.json")
        if meta.get("kind") == "network":
            net = mc.ShallowNet(meta["input_dim"], meta["hidden"])
            pred = pipeline.predict_network(net, chain, x0, t_eval, draws=draws, seed=seed)
            names = ["x"]
        else:
            spec = dynamics.get_system(meta["system"])
            pred = pipeline.predict_shared(spec, chain, x0, t_eval, draws=draws, seed=seed)
            names = list(spec.state_names)
    else:
        raise DataError(f"{posterior_dir} holds neither posterior.json nor chain.csv")
    path = out / "band.csv"
    dynamics.write_band_csv(path, pred, names)
    _write_json(out / "band.json", {"draws_used": pred.draws_used, "divergent_draws": pred.divergent_draws,
                                    "ic": x0.tolist(), "t_end": t_end})
    _manifest(out, cfg, "predict", [path, out / "band.json"], {"posterior": str(posterior_dir)})
    return pred


def cmd_benchmark(cfg, out):
    if cfg.scenario not in ("case-a", "case-b"):
        raise UsageError("benchmark sweeps the affine scenarios only")
    dicts, truth = pipeline.dictionaries_for(cfg.system, cfg.scenario)
    b = cfg.benchmark
    rows = []
    for noise in b.noise_levels:
        for density in b.densities:
            for seed in b.seeds:
                c = cfg.override(**{"data.density": density, "data.noise_level": noise, "seed": seed})
                (tr,), _ = make_datasets(c)
                row = {"noise_level": noise, "density": density, "seed": seed, "n_points": tr.K}
                try:
                    res = pipeline.fit_affine(
                        tr.times, tr.values, dicts, scenario=c.scenario, truth=truth, restarts=c.gp.restarts,
                        seed=seed, chi_d_init=c.gp.chi_d_init, prior_precision=c.inference.prior_precision,
                        threshold=c.inference.threshold, lambda_active=c.inference.lambda_active,
                        lambda_sparse=c.inference.lambda_sparse,
                    )
                    row.update(eps1=res.eps[0], eps2=res.eps[1], runtime_s=res.runtime)
                except NumericalError as exc:
                    row.update(eps1=float("nan"), eps2=float("nan"), error=str(exc))
                if b.baseline:
                    try:
                        row["eps1_fd_linreg"] = pipeline.fit_baseline(tr.times, tr.values, dicts, truth, smooth=noise > 0)[1]
                    except (DataError, NumericalError):
                        row["eps1_fd_linreg"] = float("nan")
                log.info("cell noise=%g density=%g seed=%d eps1=%.4g", noise, density, seed, row["eps1"])
                rows.append(row)
    cols = ["noise_level", "density", "seed", "n_points", "eps1", "eps2", "eps1_fd_linreg"]
    _write_csv(out / "report.csv", cols, ([r.get(k, "") for k in cols] for r in rows))
    summary = []
    for noise in b.noise_levels:
        for density in b.densities:
            cell = [r for r in rows if r["noise_level"] == noise and r["density"] == density]
            e1 = np.array([r["eps1"] for r in cell])
            e2 = np.array([r["eps2"] for r in cell])
            summary.append([noise, density, len(cell), float(np.mean(e1)), float(np.std(e1)),
                            float(np.mean(e2)), float(np.std(e2))])
    _write_csv(out / "summary.csv", ["noise_level", "density", "n_seeds", "eps1_mean", "eps1_sd", "eps2_mean", "eps2_sd"], summary)
    _write_json(out / "report.json", {"cells": rows})
    _manifest(out, cfg, "benchmark", [out / "report.csv", out / "summary.csv", out / "report.json"])
    return rows


def _artifact_system(directory):
    for name in ("posterior.json", "chain.json"):
        path = Path(directory) / name
        if path.exists():
            return json.loads(path.read_text()).get("system")
    raise DataError(f"{directory} holds neither posterior.json nor chain.json")


# Entry point =================================================================
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--system", choices=sorted(dynamics.SYSTEMS))
    common.add_argument("--scenario", choices=["case-a", "case-b", "nn-mcmc", "shared-param"])
    common.add_argument("--density", type=float)
    common.add_argument("--noise", type=float, help="noise level as a fraction of the mean state")
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gpdyn", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="fabricate benchmark data")
    p = sub.add_parser("fit", parents=[common], help="infer parameters from a dataset")
    p.add_argument("--data", help="directory with train*.csv (generated on the fly if omitted)")
    p = sub.add_parser("predict", parents=[common], help="Bayesian ensemble prediction")
    p.add_argument("--posterior", required=True, help="directory written by fit")
    p.add_argument("--ic", type=float, nargs="+")
    p.add_argument("--t-end", type=float)
    sub.add_parser("benchmark", parents=[common], help="sweep the density x noise grid")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "predict" and not (args.system or args.config):
            args.system = _artifact_system(args.posterior)
        cfg = _resolve_config(args)
        out = _out_dir(args)
        if args.command == "generate":
            cmd_generate(cfg, out)
        elif args.command == "fit":
            cmd_fit(cfg, out, args.data)
        elif args.command == "predict":
            cmd_predict(cfg, out, args.posterior, args.ic, args.t_end)
        else:
            cmd_benchmark(cfg, out)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"gpdyn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"gpdyn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"gpdyn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
