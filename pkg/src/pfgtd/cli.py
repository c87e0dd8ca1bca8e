"""Command-line entry point.

Examples::

    pfgtd run --env baird --algo pfgtd+ --runs 200 --steps 5000 --out results/baird_pfgtd
    pfgtd sweep --env boyan --algo gtd2 --out results/boyan_gtd2
    pfgtd cdf --env baird --algo gtd2 --runs 500 --out results/baird_cdf
    pfgtd audit --env random-walk-dependent --algo pfgtd --out results/audit
    pfgtd dump-model --env boyan
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys

from . import envs, experiments, metrics
from .experiments import ExperimentConfig

# protocol lengths for the classic problems
DEFAULT_STEPS = {
    "random-walk-tabular": 3000,
    "random-walk-dependent": 3000,
    "random-walk-inverted": 3000,
    "boyan": 10000,
    "baird": 5000,
    "baird-classic": 5000,
    "multi-scale": 5000,
}

_FLAG_FIELDS = {
    "env": str, "algo": str, "runs": int, "steps": int, "seed": int, "alpha": float,
    "objective": str, "radius": float, "cadence": int, "W0": float, "eps_hat": float,
    "warm_start": str, "baird_behavior": str, "tdc_ratio": float, "tdrc_beta": float,
    "cdf_dist": str, "workers": int,
}


def _parse_bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_range(v: str):
    parts = v.replace(",", " ").split()
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("range needs two numbers, e.g. 0.0009765625,1")
    return float(parts[0]), float(parts[1])


def read_config_file(path: str) -> dict:
    """Read an INI file with an ``[experiment]`` section; keys mirror the long flags."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    if "experiment" not in cp:
        raise ValueError(f"{path}: missing [experiment] section")
    out = {}
    for key, raw in cp["experiment"].items():
        key = key.replace("-", "_")
        if key in _FLAG_FIELDS:
            out[key] = _FLAG_FIELDS[key](raw)
        elif key == "average":
            out[key] = _parse_bool(raw)
        elif key == "cdf_range":
            out[key] = _parse_range(raw)
        elif key == "out":
            out[key] = raw
        else:
            raise ValueError(f"{path}: unknown key {key!r}")
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # defaults are None so a config file value survives unless the flag is given
    common.add_argument("--config", help="INI file with an [experiment] section")
    common.add_argument("--env", choices=sorted(envs.ENVIRONMENTS) + list(envs.STREAM_ENVIRONMENTS))
    common.add_argument("--algo", choices=experiments.ALGORITHMS)
    common.add_argument("--runs", type=int)
    common.add_argument("--steps", type=int, help="default: protocol length of the environment")
    common.add_argument("--seed", type=int, help="run i uses seed + i (default 0)")
    common.add_argument("--alpha", type=float, help="baseline step size")
    common.add_argument("--objective", choices=("mspbe", "neu"))
    common.add_argument("--radius", type=float, help="feasible ball radius D (default 100)")
    common.add_argument("--average", action="store_const", const=True,
                        help="report averaged iterates for baselines")
    common.add_argument("--cadence", type=int, help="steps between metric evaluations")
    common.add_argument("--W0", type=float, dest="W0", help="initial wealth")
    common.add_argument("--eps-hat", type=float, dest="eps_hat", help="initial hint guess")
    common.add_argument("--warm-start", choices=("auto", "on", "off"), dest="warm_start")
    common.add_argument("--baird-behavior", choices=("equiprobable", "classic"), dest="baird_behavior")
    common.add_argument("--tdc-ratio", type=float, dest="tdc_ratio")
    common.add_argument("--tdrc-beta", type=float, dest="tdrc_beta")
    common.add_argument("--cdf-dist", choices=("log-uniform", "uniform"), dest="cdf_dist")
    common.add_argument("--cdf-range", type=_parse_range, dest="cdf_range")
    common.add_argument("--workers", type=int, help="processes for parallel runs")
    common.add_argument("--out", help="output prefix; writes <out>.csv and <out>.json")

    p = argparse.ArgumentParser(prog="pfgtd", description="Parameter-free GTD experiments")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="learning curves averaged over runs")
    sub.add_parser("sweep", parents=[common], help="grid-tune a baseline step size, then run it")
    sub.add_parser("cdf", parents=[common], help="final-RMSPBE CDF under random step sizes")
    sub.add_parser("audit", parents=[common], help="regret / folk-theorem report")
    sub.add_parser("smape", parents=[common], help="SMAPE on the multi-scale prediction stream")
    sub.add_parser("dump-model", parents=[common], help="print the exact model as JSON")
    sub.add_parser("dump-env", parents=[common], help="print the environment as JSON")
    return p


def resolve_config(args: argparse.Namespace) -> tuple:
    values = read_config_file(args.config) if args.config else {}
    for key in list(_FLAG_FIELDS) + ["average", "cdf_range", "out"]:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    out = values.pop("out", None)
    values.setdefault("env", "random-walk-tabular")
    values.setdefault("steps", DEFAULT_STEPS.get(values["env"], 5000))
    if values["env"] == "multi-scale":
        values.setdefault("cadence", 100)
    return ExperimentConfig(**values), out


def _emit(doc: dict, out):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        with open(out + ".json", "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config, out = resolve_config(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"pfgtd: error: {e}", file=sys.stderr)
        return 2
    cmd = args.command

    if cmd in ("dump-model", "dump-env"):
        spec = config.spec()
        doc = spec.to_dict() if cmd == "dump-env" else \
            metrics.build_exact_model(spec, config.objective).to_dict()
        _emit(doc, out)
        return 0
    if cmd == "smape":
        res = experiments.run_stream_smape(config)
        _emit({"config": config.to_dict(), **res}, out)
        return 0

    if config.env in envs.STREAM_ENVIRONMENTS:
        print(f"pfgtd: error: {cmd} needs a classic environment", file=sys.stderr)
        return 2
    if cmd == "audit":
        report = experiments.run_regret_audit(config)
        _emit({"config": config.to_dict(), **report}, out)
        print(f"folk-theorem pass rate {report['pass_rate']:.3f}, "
              f"exact-gradient inequality pass rate {report['exact_pass_rate']:.3f}", file=sys.stderr)
        return 0

    if cmd == "sweep":
        best, table = experiments.sweep_step_sizes(config)
        config = ExperimentConfig(**{**config.to_dict(), "alpha": best})
        res = experiments.run_learning_curves(config)
        summary = {**res.summary(), "sweep": table, "best_alpha": best}
        records = res.records
    elif cmd == "run":
        res = experiments.run_learning_curves(config)
        summary, records = res.summary(), res.records
    else:  # cdf
        res = experiments.run_cdf_study(config)
        summary, records = res.summary(), res.records

    if out:
        experiments.emit_outputs(records, config, out, summary)
        print(f"wrote {out}.csv and {out}.json", file=sys.stderr)
    else:
        _emit({"config": config.to_dict(), "summary": summary}, None)
    return 0


if __name__ == "__main__":
    sys.exit(main())
