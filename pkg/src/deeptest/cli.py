"""Command line interface.

Subcommands mirror the pipeline stages (train, calibrate, validate),
plus trial simulation, the sample-size search, heatmap export, and the
canned table reproductions.  Every failure exits nonzero with a
stage-tagged line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deeptest",
        description="Neural hypothesis tests with simulation-calibrated cutoffs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--scale", type=float, default=1.0, help="Monte Carlo size multiplier")
        p.add_argument("--workers", type=int, default=1, help="worker processes")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--cache", default=None, help="artifact cache directory")

    p = sub.add_parser("train", help="fit the test statistic network")
    common(p)

    p = sub.add_parser("calibrate", help="fit the critical surface for a trained statistic")
    common(p)
    p.add_argument("--statistic", required=True, help="statistic.json from the train step")

    p = sub.add_parser("validate", help="run the validation grid against a saved bundle")
    common(p)
    p.add_argument("--bundle", required=True, help="bundle.json from calibrate or run")

    p = sub.add_parser("run", help="train, calibrate, and validate in one go")
    common(p)

    p = sub.add_parser("simulate-trial", help="simulate one reassessed trial")
    p.add_argument("--config", default=None, help="config supplying the design (optional)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--pi-p", type=float, required=True)
    p.add_argument("--pi-t", type=float, required=True)

    p = sub.add_parser("asn", help="search n2_max for a target power and report ASN")
    common(p)
    p.add_argument("--target", type=float, required=True, help="target power in (0, 1)")
    p.add_argument("--pi-p", type=float, required=True)
    p.add_argument("--pi-t", type=float, required=True)

    p = sub.add_parser("heatmap", help="export conditional rejection grids")
    common(p)
    p.add_argument("--pi-p", type=float, required=True)
    p.add_argument("--pi-t", type=float, required=True)
    p.add_argument("--reps", type=int, default=2000, help="replicates per stage-1 cell")

    p = sub.add_parser("reproduce", help="rerun a canned benchmark exhibit")
    p.add_argument("--table", required=True, help="exhibit id, e.g. T1 or F1")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None)
    p.add_argument("--cache", default=None)
    return parser


def _load_single_config(harness, args):
    configs = harness.load_config(args.config)
    if len(configs) != 1:
        raise ValueError(
            f"{args.config} holds {len(configs)} experiments; this command needs exactly one"
        )
    config = configs[0]
    if args.scale != 1.0:
        config = harness.scaled_config(config, args.scale)
    if args.seed is not None:
        config = harness.with_seed(config, args.seed)
    return config


def _out_dir(args) -> Path:
    out = Path(args.out if args.out is not None else ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cache(harness, args):
    return None if args.cache is None else harness.CacheStore(args.cache)


def _cmd_train(harness, args) -> int:
    from . import nnet, pipeline
    from .scenarios import generate_training_data
    from .streams import RandomStream

    config = _load_single_config(harness, args)
    root = RandomStream(seed=config.seed)
    n2_table = None
    if config.design is not None:
        n2_table = harness._cached_table(
            config.design, root.child(harness._TABLE_STREAM), config.seed, _cache(harness, args)
        )
    data = generate_training_data(
        config.scenario, root.child(harness._DATA_STREAM), design=config.design, n2_table=n2_table
    )
    net, report = pipeline.fit_statistic_net(
        data, config.first_pool, config.first_train, root.child(harness._FIT_STREAM)
    )
    document = {
        "format": "deeptest-statistic",
        "version": 1,
        "config_sha256": harness.config_hash(config),
        "selection": report.as_dict(),
        "network": json.loads(nnet.save(net)),
    }
    path = _out_dir(args) / "statistic.json"
    path.write_text(json.dumps(document, indent=1, sort_keys=True), encoding="utf-8")
    print(path)
    return 0


def _load_statistic(harness, path: str):
    from . import nnet

    document = json.loads(Path(path).read_text(encoding="utf-8"))
    if document.get("format") != "deeptest-statistic" or document.get("version") != 1:
        raise ValueError(f"{path} is not a statistic document")
    return nnet.load(json.dumps(document["network"])), document


def _cmd_calibrate(harness, args) -> int:
    from functools import partial

    from . import pipeline
    from .scenarios import KIND_KNOWN, gen_critical_inputs, gen_null_features
    from .streams import RandomStream

    config = _load_single_config(harness, args)
    net, document = _load_statistic(harness, args.statistic)
    if document["config_sha256"] != harness.config_hash(config):
        raise ValueError("statistic was trained under a different config")
    root = RandomStream(seed=config.seed)
    spec = config.scenario
    crit_report = None
    n2_table = None
    if config.design is not None:
        n2_table = harness._cached_table(
            config.design, root.child(harness._TABLE_STREAM), config.seed, _cache(harness, args)
        )
    if spec.kind == KIND_KNOWN:
        critical = pipeline.calibrate_constant_cutoff(
            net, spec, config.sizes.b_prime, config.alpha, root.child(harness._CRIT_STREAM)
        )
    else:
        crit = pipeline.fit_critical_surface(
            net,
            gen_critical_inputs(spec),
            partial(gen_null_features, spec, design=config.design, n2_table=n2_table),
            config.sizes.b_prime,
            config.alpha,
            config.second_pool,
            config.second_train,
            root.child(harness._CRIT_STREAM),
            mapper=lambda fn, tasks: harness.pmap(fn, tasks, args.workers),
        )
        critical = crit.net
        crit_report = crit.report.as_dict()
    test = pipeline.FittedTest(
        statistic_net=net,
        critical_net=critical,
        scenario=spec,
        alpha=config.alpha,
        provenance={
            "config_sha256": harness.config_hash(config),
            "seed": config.seed,
            "statistic_selection": document["selection"],
            "critical_selection": crit_report,
        },
    )
    path = _out_dir(args) / "bundle.json"
    path.write_text(pipeline.save_bundle(test), encoding="utf-8")
    print(path)
    return 0


def _cmd_validate(harness, args) -> int:
    from . import pipeline
    from .streams import RandomStream

    config = _load_single_config(harness, args)
    test = pipeline.load_bundle(Path(args.bundle).read_text(encoding="utf-8"))
    n2_table = None
    if config.design is not None:
        root = RandomStream(seed=config.seed)
        n2_table = harness._cached_table(
            config.design, root.child(harness._TABLE_STREAM), config.seed, _cache(harness, args)
        )
    table = harness.validate(test, config, workers=args.workers, n2_table=n2_table)
    path = _out_dir(args) / "results.csv"
    table.to_csv(path)
    print(path)
    return 0


def _cmd_run(harness, args) -> int:
    config = _load_single_config(harness, args)
    out = _out_dir(args)
    harness.run_experiment(
        config, workers=args.workers, out_dir=out, cache=_cache(harness, args)
    )
    print(out / "results.csv")
    return 0


def _cmd_simulate_trial(harness, args) -> int:
    from .ssr import DesignParams, simulate_trial
    from .streams import RandomStream

    design = DesignParams()
    if args.config is not None:
        configs = harness.load_config(args.config)
        if len(configs) != 1 or configs[0].design is None:
            raise ValueError("config must hold one adaptive experiment")
        design = configs[0].design
    path = simulate_trial(args.pi_p, args.pi_t, design, RandomStream(seed=args.seed))
    print(json.dumps(asdict(path), sort_keys=True))
    return 0


def _cmd_asn(harness, args) -> int:
    config = _load_single_config(harness, args)
    table = harness.asn_for_power(
        config,
        target_power=args.target,
        pi_p=args.pi_p,
        pi_t=args.pi_t,
        power_reps=max(2_000, config.sizes.b_val // 2),
        asn_reps=max(2_000, config.sizes.b_val),
        workers=args.workers,
        cache=_cache(harness, args),
    )
    path = _out_dir(args) / "asn.csv"
    table.to_csv(path)
    print(path)
    return 0


def _cmd_heatmap(harness, args) -> int:
    from .streams import RandomStream

    config = _load_single_config(harness, args)
    test, n2_table = harness.fit_test(
        config, workers=args.workers, cache=_cache(harness, args)
    )
    path = _out_dir(args) / f"heatmap_{args.pi_p:g}_{args.pi_t:g}.csv"
    harness.heatmap_export(
        test,
        config.design,
        n2_table,
        args.pi_p,
        args.pi_t,
        args.reps,
        RandomStream(seed=config.seed).child(7),
        path=path,
        workers=args.workers,
    )
    print(path)
    return 0


def _cmd_reproduce(harness, args) -> int:
    table = harness.reproduce(
        args.table,
        scale=args.scale,
        workers=args.workers,
        out_dir=args.out,
        cache=_cache(harness, args),
        seed=args.seed,
    )
    if args.out is None:
        table.to_csv(sys.stdout)
    else:
        print(Path(args.out) / f"reproduce_{args.table}.csv")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "calibrate": _cmd_calibrate,
    "validate": _cmd_validate,
    "run": _cmd_run,
    "simulate-trial": _cmd_simulate_trial,
    "asn": _cmd_asn,
    "heatmap": _cmd_heatmap,
    "reproduce": _cmd_reproduce,
}


def main(argv=None) -> int:
    # single-threaded BLAS in any spawned worker keeps results identical
    # across worker counts; set before children start
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    from . import harness

    try:
        return _COMMANDS[args.command](harness, args)
    except harness.StageError as err:
        print(f"[{err.stage}] {err.original}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as err:
        print(f"[cli] {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
