"""``pittt`` command line: generate -> train -> eval -> bench.

Every subcommand accepts ``--config FILE.json`` whose keys mirror the long
flags (dashes or underscores); flags given on the command line win.
Exit codes: 0 ok, 2 input IO, 3 empty/invalid data, 4 dimension or config
mismatch, 5 numerical abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import __version__
from .case_io import load_case, load_dataset, load_model_file, save_dataset, save_model_file
from .errors import DimensionError, InputIOError, InvalidDataError, PitttError
from .evaluation import BASELINE, REFINED, bench, emit_report, evaluate_model
from .grid import build_ybus
from .pf import newton_raphson
from .scenarios import NRSettings, PerturbationSpec, generate_dataset, sample_condition
from .surrogate import TrainConfig, encode_input, forward, input_stats, train
from .ttt import PROFILES, TTTConfig, nominal_metric, refine

NOT_ECHOED = {"config", "jobs", "out", "out_dir", "command", "func"}


def _digest(path):
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise InputIOError(f"cannot read {path}: {exc.strerror}") from exc


def _echo(args, **extra):
    out = {k: v for k, v in vars(args).items() if k not in NOT_ECHOED}
    out.update(extra)
    return out


# ---------------------------------------------------------------- generate

def cmd_generate(args):
    case = load_case(args.case)
    train_spec = PerturbationSpec(args.train_load_low, args.train_load_high, args.train_gen_low,
                                  args.train_gen_high, args.correlation_mode, seed=args.seed, noise=args.noise)
    test_spec = PerturbationSpec(args.test_load_low, args.test_load_high, args.test_gen_low,
                                 args.test_gen_high, args.correlation_mode, seed=args.seed + 1, noise=args.noise)
    nr = NRSettings(args.nr_tol, args.nr_max_iter)
    records, report = generate_dataset(case, train_spec, test_spec, args.n_train, args.n_test, nr, jobs=args.jobs)
    header = {"case": args.case, "case_name": case.name, "n_bus": case.n, "base_mva": case.base_mva,
              "nr_tolerance": nr.tol, "nr_max_iter": nr.max_iter, "seed": args.seed,
              "perturbation_spec": {"train": asdict(train_spec), "test": asdict(test_spec)},
              "counts": {"requested": report.requested, "produced": report.produced, "dropped": report.dropped}}
    out = Path(args.out)
    _write(lambda: save_dataset(out, records, header), out)
    _write(lambda: Path(f"{out}.report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n"), out)
    print(f"wrote {len(records)} records to {out}")
    for split in ("train", "test"):
        print(f"  {split}: {report.produced[split]} kept, {report.dropped[split]} dropped "
              f"(non-converged or failed re-check)")
    return 0


def _write(fn, path):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        fn()
    except OSError as exc:
        raise InputIOError(f"cannot write {path}: {exc.strerror}") from exc


def _case_for(args, header):
    return load_case(args.case if args.case else header.get("case", ""))


# ---------------------------------------------------------------- train

def cmd_train(args):
    header, records = load_dataset(args.dataset)
    if not records:
        raise InvalidDataError(f"dataset {args.dataset} has no records")
    case = _case_for(args, header)
    hidden = tuple(int(h) for h in args.hidden.split(",")) if args.hidden else None
    cfg = TrainConfig(hidden=hidden, optimizer=args.optimizer, lr=args.lr, momentum=args.momentum,
                      batch_size=args.batch_size, epochs=args.epochs, lr_decay=args.lr_decay, seed=args.seed)
    params, curve = train(records, case, cfg)
    out = Path(args.out)
    _write(lambda: save_model_file(out, params), out)
    curve_path = Path(f"{out}.curve.csv")
    _write(lambda: curve_path.write_text("epoch,train_mse\n" + "".join(
        f"{i},{v!r}\n" for i, v in enumerate(curve))), curve_path)
    print(f"wrote model to {out} (final train MSE {curve[-1]:.4g})")
    return 0


# ---------------------------------------------------------------- eval / bench

def _ttt_config(args) -> TTTConfig:
    base = PROFILES[args.profile]
    overrides = {f.name: getattr(args, f.name) for f in fields(TTTConfig)
                 if getattr(args, f.name, None) is not None}
    if args.ttt_steps is not None:
        overrides["steps"] = args.ttt_steps
    return replace(base, **overrides)


def cmd_eval(args):
    header, records = load_dataset(args.dataset)
    case = _case_for(args, header)
    params = load_model_file(args.model)
    params.check_case(case)
    cfg = _ttt_config(args)
    outcome = evaluate_model(params, records, case, cfg, jobs=args.jobs)
    ratio = outcome.median_sq_ratio
    extra = {"test samples": len(outcome.results),
             "median per-sample squared-mismatch ratio (after/before)": repr(ratio),
             "aborted refinements": sum(r.aborted for r in outcome.results)}
    config = _echo(args, dataset=Path(args.dataset).name, dataset_sha256=_digest(args.dataset),
                   model=Path(args.model).name, model_sha256=_digest(args.model), ttt=asdict(cfg))
    out = Path(args.out_dir)
    _write(lambda: emit_report(out, outcome.metrics, outcome.violations, None, config, extra), out)
    rows = ["sample,sq_mismatch_before,sq_mismatch_after,phi_norm,aborted"]
    rows += [f"{i},{b!r},{a!r},{r.adapt.phi_norm!r},{int(r.aborted)}"
             for i, (b, a, r) in enumerate(zip(outcome.sq_before, outcome.sq_after, outcome.results))]
    _write(lambda: (out / "samples.csv").write_text("\n".join(rows) + "\n"), out)
    m0, m1 = outcome.metrics[BASELINE], outcome.metrics[REFINED]
    print(f"RMSE_P {m0.rmse_p:.4g} -> {m1.rmse_p:.4g}, RMSE_Q {m0.rmse_q:.4g} -> {m1.rmse_q:.4g} "
          f"(K={cfg.steps}, profile {args.profile}); report in {out}")
    return 0


def cmd_bench(args):
    case = load_case(args.case)
    params = load_model_file(args.model)
    params.check_case(case)
    cfg = _ttt_config(args)
    ybus = build_ybus(case)
    if args.dataset:
        _, records = load_dataset(args.dataset)
        conds = [r.condition for r in records if r.split == "test"][:args.n_samples]
    else:
        spec = PerturbationSpec(0.8, 1.2, 0.8, 1.2, seed=args.seed)
        conds = [sample_condition(case, spec, k) for k in range(args.n_samples)]
    if not conds:
        raise InvalidDataError("no conditions to benchmark")
    stats = input_stats(params)
    metric = nominal_metric(case, ybus) if cfg.metric == "nominal-jacobian" else None
    procs = {}
    if not args.skip_nr:
        procs["newton-raphson"] = lambda c: newton_raphson(case, c, ybus=ybus)
    procs[BASELINE] = lambda c: forward(params, encode_input(c, case, stats))
    procs[f"{REFINED} (K={cfg.steps})"] = lambda c: refine(params, c, case, ybus, cfg, metric=metric)
    table = bench(procs, conds, repetitions=args.repetitions)
    config = _echo(args, model=Path(args.model).name, model_sha256=_digest(args.model), ttt=asdict(cfg))
    out = Path(args.out_dir)
    _write(lambda: emit_report(out, None, None, table, config), out)
    for r in table.rows:
        print(f"{r.label:<32}{r.ms_per_sample:10.4f} ms/sample")
    return 0


# ---------------------------------------------------------------- parser

def _add_ttt_flags(p):
    p.add_argument("--profile", choices=sorted(PROFILES), default="default")
    p.add_argument("--ttt-steps", type=int, help="refinement steps K (0 = plain surrogate)")
    p.add_argument("--eta", type=float)
    p.add_argument("--lambda-v", type=float)
    p.add_argument("--lambda-flow", type=float)
    p.add_argument("--epsilon", type=float, help="absolute trust-region radius")
    p.add_argument("--epsilon-rel", type=float, help="radius relative to the final-layer norm")
    p.add_argument("--step-control", choices=["fixed", "backtracking"])
    p.add_argument("--metric", choices=["nominal-jacobian", "euclidean"])
    p.add_argument("--max-halvings", type=int)
    p.add_argument("--include-gen-limits", action="store_const", const=True)
    p.add_argument("--lambda-gen", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="pittt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = {}

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with flag values")
        p.set_defaults(func=func)
        parser.commands[name] = p
        return p

    g = command("generate", cmd_generate, "sample conditions and solve them with Newton-Raphson")
    g.add_argument("--case", required=True, help="case file or bundled name (case14, case118, ...)")
    g.add_argument("--n-train", type=int, default=1000)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--seed", type=int, default=0, help="train stream seed; test uses seed + 1")
    for split, (lo, hi) in (("train", (0.9, 1.1)), ("test", (0.8, 1.2))):
        for kind in ("load", "gen"):
            g.add_argument(f"--{split}-{kind}-low", type=float, default=lo)
            g.add_argument(f"--{split}-{kind}-high", type=float, default=hi)
    g.add_argument("--correlation-mode", choices=["independent_per_bus", "global_plus_noise"],
                   default="independent_per_bus")
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--nr-tol", type=float, default=1e-8)
    g.add_argument("--nr-max-iter", type=int, default=20)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--out", required=True)

    t = command("train", cmd_train, "fit the surrogate on the train split")
    t.add_argument("--dataset", required=True)
    t.add_argument("--case", help="defaults to the case recorded in the dataset header")
    t.add_argument("--hidden", help="comma-separated hidden widths (default: two layers of max(64, 4n))")
    t.add_argument("--optimizer", choices=["momentum", "adam"], default="momentum")
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr-decay", type=float, default=0.99)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    e = command("eval", cmd_eval, "refine test predictions and write accuracy/violation reports")
    e.add_argument("--dataset", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--case")
    _add_ttt_flags(e)
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--out-dir", required=True)

    b = command("bench", cmd_bench, "per-sample runtime of NR, surrogate and refinement")
    b.add_argument("--case", required=True)
    b.add_argument("--model", required=True)
    b.add_argument("--dataset", help="take test conditions from here instead of sampling")
    b.add_argument("--n-samples", type=int, default=50)
    b.add_argument("--repetitions", type=int, default=3)
    b.add_argument("--seed", type=int, default=1)
    b.add_argument("--skip-nr", action="store_true")
    _add_ttt_flags(b)
    b.add_argument("--out-dir", required=True)
    return parser


def _apply_config(parser, argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in parser.commands), None)
    if known.config and command:
        try:
            doc = json.loads(Path(known.config).read_text())
        except OSError as exc:
            raise InputIOError(f"cannot read config {known.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidDataError(f"config {known.config}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise InvalidDataError(f"config {known.config} must be a JSON object")
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        sub = parser.commands[command]
        dests = {a.dest for a in sub._actions} - {"help", "config"}
        unknown = sorted(set(doc) - dests)
        if unknown:
            raise DimensionError(f"config {known.config}: unknown keys for {command}: {unknown}")
        # flags given on the command line still win; required ones may now come from the file
        for action in sub._actions:
            if action.dest in doc:
                action.required = False
        sub.set_defaults(**doc)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return args.func(args)
    except PitttError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # invalid configuration values rejected by the config dataclasses
        print(f"error: {exc}", file=sys.stderr)
        return DimensionError.exit_code


if __name__ == "__main__":
    sys.exit(main())
