"""Command-line interface: split, train, inspect, recommend, evaluate, bound.

Every option can also come from a JSON ``--config`` file. Top-level keys set
global options (``seed``, ``delimiter``, ``columns``); a key named after a
subcommand holds that subcommand's options, e.g.::

    {"seed": 7, "train": {"max_cluster_size": 4, "train": ["train.tsv"]}}

Explicit command-line flags override the file. Logs go to standard error.
"""

from __future__ import annotations

import argparse
import codecs
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

from . import ltm
from .cof import ConformativeFilter, CoverageQuery, coverage_bound, coverage_simulate, recommend
from .evaluation import SELECTION_R, run_protocol
from .hlta import HierarchyConfig, build_hierarchy, hierarchy_report
from .ingest import (DEFAULT_COLUMNS, EventLog, IngestError, binarize, core_filter, merge, parse_events,
                     split_by_time, write_events)

log = logging.getLogger("cofrec")


class CLIError(Exception):
    """A user-facing failure; reported on stderr with exit status 1."""


# --- argument types -----------------------------------------------------------------------

def _delimiter(text: str) -> str:
    if text.lower() == "tab":
        return "\t"
    value = codecs.decode(text, "unicode_escape")
    if not value or "\n" in value or "\r" in value:
        raise argparse.ArgumentTypeError(f"delimiter must be non-empty and on one line, got {text!r}")
    return value


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _ints(text: str) -> list[int]:
    try:
        values = [int(t) for t in _names(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def _history(text: str) -> int | None:
    if text.strip().lower() in ("full", "all", "none"):
        return None
    try:
        H = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"history must be a positive integer or 'full', got {text!r}") from None
    if H < 1:
        raise argparse.ArgumentTypeError("history must be >= 1")
    return H


def _histories(text: str) -> list[int | None]:
    return [_history(t) for t in _names(text)]


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in _names(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# --- I/O helpers ---------------------------------------------------------------------------

def _read_log(paths: Sequence[str] | str, args) -> EventLog:
    paths = [paths] if isinstance(paths, str) else list(paths)
    logs = []
    for p in paths:
        try:
            with open(p, encoding="utf-8") as fh:
                logs.append(parse_events(fh, args.delimiter, args.columns))
        except OSError as e:
            raise CLIError(f"{p}: {e.strerror or e}") from None
        except IngestError as e:
            raise CLIError(f"{p}: {e}") from None
    return logs[0] if len(logs) == 1 else merge(*logs)


def _load_model(path: str) -> ltm.LatentTreeModel:
    try:
        with open(path, encoding="utf-8") as fh:
            return ltm.load(fh)
    except OSError as e:
        raise CLIError(f"{path}: {e.strerror or e}") from None
    except (ValueError, KeyError, TypeError) as e:
        raise CLIError(f"{path}: not a valid model file ({e})") from None


def _require(args, *names: str) -> None:
    missing = [n for n in names if getattr(args, n, None) in (None, [], "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise CLIError(f"{args.command}: missing required option(s) {flags}")


def _check_inputs(*paths) -> None:
    for p in paths:
        for q in ([p] if isinstance(p, str) else p or []):
            if not Path(q).is_file():
                raise CLIError(f"{q}: no such file")


def _hierarchy_config(args) -> HierarchyConfig:
    try:
        return HierarchyConfig(
            max_cluster_size=args.max_cluster_size, top_level_max=args.top_level_max,
            em_restarts=args.em_restarts, em_tol=args.em_tol, em_max_iters=args.em_max_iters,
            seed=args.seed, min_growth_ratio=args.min_growth_ratio, refresh=not args.no_refresh)
    except ValueError as e:
        raise CLIError(str(e)) from None


def _fmt(x: float) -> str:
    return f"{x:.10g}"


# --- commands --------------------------------------------------------------------------------

def cmd_split(args) -> int:
    _require(args, "input")
    _check_inputs(args.input)
    events = _read_log(args.input, args)
    if args.core:
        if len(args.core) != 2:
            raise CLIError("--core takes two integers: min events per user, min events per item")
        events = core_filter(events, *args.core)
        log.info("core filter kept %d events, %d users, %d items", len(events), len(events.users), len(events.items))
    try:
        parts = split_by_time(events, args.fractions)
    except IngestError as e:
        raise CLIError(str(e)) from None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "valid", "test"), parts):
        path = out / f"{name}.tsv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            write_events(part, fh, args.delimiter)
        print(f"{name}\t{path}\t{len(part)}")
    return 0


def cmd_train(args) -> int:
    _require(args, "train", "model")
    _check_inputs(args.train)
    cfg = _hierarchy_config(args)
    data = binarize(_read_log(args.train, args).compact())
    log.info("training on %d users x %d items (%d consumptions)", data.rows, data.cols, data.nnz)
    try:
        model = build_hierarchy(data, cfg)
    except ValueError as e:
        raise CLIError(f"cannot build a hierarchy: {e}") from None
    with open(args.model, "w", encoding="utf-8") as fh:
        ltm.save(model, fh)
    report_path = args.report or f"{args.model}.report.tsv"
    rows = hierarchy_report(model)
    shown: dict[str, int] = {}
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write("latent\tlevel\tchild\tp_child_given_s1\tp_child_given_s0\n")
        for z, level, child, p1, p0 in rows:
            shown[z] = shown.get(z, 0) + 1
            if args.report_top and shown[z] > args.report_top:
                continue
            fh.write(f"{z}\t{level}\t{child}\t{p1:.6f}\t{p0:.6f}\n")
    levels = [len(model.latents_at(l)) for l in range(1, model.max_level + 1)]
    print(f"model\t{args.model}\tlevels={model.max_level}\tlatents_per_level={','.join(map(str, levels))}")
    print(f"report\t{report_path}")
    return 0


def cmd_inspect(args) -> int:
    _require(args, "model", "latent")
    _check_inputs(args.model)
    model = _load_model(args.model)
    latents = [z.id for z in model.latents]
    try:
        var = model.variable(args.latent)
    except (KeyError, ValueError):
        var = None
    if var is None:
        raise CLIError(f"unknown latent {args.latent!r}; available: {' '.join(latents)}")
    if var.kind != ltm.LATENT:
        raise CLIError(f"{args.latent!r} is an observed item, not a taste group; available: {' '.join(latents)}")
    marginal = ltm.prior_marginals(model)[var.id]
    print(f"{var.id}\tlevel={var.level}\tP(s1)={marginal[1]:.4f}")
    print("child\tP(child=1|s1)\tP(child=1|s0)")
    rows = [r for r in hierarchy_report(model) if r[0] == var.id]
    for _, _, child, p1, p0 in rows[:args.top] if args.top else rows:
        print(f"{child}\t{p1:.4f}\t{p0:.4f}")
    return 0


def cmd_recommend(args) -> int:
    _require(args, "model", "train")
    if not args.all and not args.user:
        raise CLIError("recommend: give --user ID (repeatable) or --all")
    _check_inputs(args.model, args.train)
    model = _load_model(args.model)
    train = _read_log(args.train, args)
    try:
        scorer = ConformativeFilter(model, args.level, args.history).fit(train)
    except (ValueError, ltm.ModelError) as e:
        raise CLIError(str(e)) from None
    users = list(train.active_users()) if args.all else list(args.user)
    history = train.per_user_items()
    cold = [u for u in users if u not in history]
    if cold:
        log.warning("%d user(s) have no training events and get prior-based lists: %s",
                    len(cold), " ".join(cold[:10]))
    d = args.delimiter
    for a in range(0, len(users), 256):
        chunk = users[a:a + 256]
        S = scorer.score(chunk)
        for row, u in enumerate(chunk):
            lst = recommend(S[row], history.get(u, ()), args.top, scorer.items, u)
            for rank, (it, s) in enumerate(zip(lst.items, lst.scores), start=1):
                print(f"{u}{d}{it}{d}{rank}{d}{_fmt(s)}")
    return 0


def cmd_evaluate(args) -> int:
    _require(args, "train", "test")
    _check_inputs(args.train, args.test, args.valid or [], args.model or [])
    train = _read_log(args.train, args)
    test = _read_log(args.test, args)
    valid = _read_log(args.valid, args) if args.valid else None
    model = _load_model(args.model) if args.model else None
    cfg = _hierarchy_config(args)
    try:
        result = run_protocol(args.method, train, valid, test, tuple(args.top), cfg,
                              H_grid=tuple(args.grid_H), levels=args.grid_l, ks=tuple(args.k),
                              retrain=not args.no_retrain, model=model)
    except (ValueError, ltm.ModelError) as e:
        raise CLIError(str(e)) from None
    rep = result.report
    doc = {"report": rep.to_dict()}
    if result.grid is not None:
        doc["selected"] = {"l": result.grid.best_level,
                           "H": "full" if result.grid.best_H is None else result.grid.best_H,
                           "criterion": f"validation recall@{SELECTION_R}"}
        doc["grid"] = [{"l": l, "H": "full" if H is None else H, **r.to_dict()}
                       for l, H, r in result.grid.points]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if args.json:
        json.dump(doc, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    else:
        params = ",".join(f"{k}={v}" for k, v in rep.params.items()) or "-"
        print("method\tparams\tR\trecall\tdiversity\tndcg\tevaluated\tskipped")
        for R in sorted(rep.recall_at):
            print(f"{rep.method}\t{params}\t{R}\t{rep.recall_at[R]:.6f}\t{rep.diversity_at[R]}\t"
                  f"{rep.ndcg:.6f}\t{rep.evaluated_users}\t{rep.skipped_users}")
    if args.emit_curves:
        if result.grid is None:
            raise CLIError("--emit-curves needs --method cof and a non-empty --valid set")
        with open(args.emit_curves, "w", encoding="utf-8") as fh:
            fh.write("series\tvalue\tR\trecall\tdiversity\n")
            for R in sorted(rep.recall_at):
                for series, value, rec, div in result.grid.curves(R):
                    fh.write(f"{series}\t{value}\t{R}\t{rec:.6f}\t{div}\n")
    return 0


def cmd_bound(args) -> int:
    _require(args, "items", "picks", "coverage", "confidence")
    try:
        query = CoverageQuery(args.items, args.picks, args.coverage, args.confidence)
        m = coverage_bound(query)
    except ValueError as e:
        raise CLIError(str(e)) from None
    print(m)
    if args.simulate:
        sim = coverage_simulate(args.items, args.picks, m, args.coverage, args.simulate, seed=args.seed)
        print(f"simulated_trials\t{sim.trials}")
        print(f"P(distinct>=qN)\t{sim.probability:.6f}")
        print(f"mean_distinct\t{sim.mean_distinct:.3f}\t+/-{sim.std_error:.3f}")
        print(f"expected_distinct\t{sim.expected_distinct:.3f}")
    return 0


# --- parser ------------------------------------------------------------------------------------

def _hierarchy_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("hierarchy construction")
    d = {f.name: f.default for f in fields(HierarchyConfig)}
    g.add_argument("--max-cluster-size", type=int, default=d["max_cluster_size"])
    g.add_argument("--top-level-max", type=int, default=d["top_level_max"],
                   help="stop stacking levels once a level has at most this many latents")
    g.add_argument("--em-restarts", type=int, default=d["em_restarts"])
    g.add_argument("--em-tol", type=float, default=d["em_tol"], help="per-record log-likelihood gain")
    g.add_argument("--em-max-iters", type=int, default=d["em_max_iters"])
    g.add_argument("--min-growth-ratio", type=float, default=d["min_growth_ratio"],
                   help="cluster growth stops when mean MI to members drops below this fraction "
                        "of the seed pair's MI (0 disables)")
    g.add_argument("--no-refresh", action="store_true", help="skip the final whole-model EM sweep")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cofrec", description=__doc__.split("\n\n")[0])
    parser.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    parser.add_argument("--config", help="JSON file of option defaults")
    parser.add_argument("--delimiter", type=_delimiter, default="\t", help="field separator (default tab)")
    parser.add_argument("--columns", type=_names, default=DEFAULT_COLUMNS,
                        help="comma-separated column names; must include user,item,timestamp")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("split", help="core-filter and split an event file by time")
    p.add_argument("--input")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--fractions", type=_floats, default=[0.7, 0.15, 0.15])
    p.add_argument("--core", type=_ints, help="MIN_USER,MIN_ITEM event thresholds")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="learn a hierarchy of taste groups")
    p.add_argument("--train", nargs="+", help="event file(s); several are merged")
    p.add_argument("--model", help="output model file (JSON)")
    p.add_argument("--report", help="hierarchy report path (default MODEL.report.tsv)")
    p.add_argument("--report-top", type=int, default=10, help="children listed per latent (0 = all)")
    _hierarchy_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inspect", help="show one taste group")
    p.add_argument("--model")
    p.add_argument("--latent")
    p.add_argument("--top", type=int, default=0, help="children to show (0 = all)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("recommend", help="top-R lists from a trained model")
    p.add_argument("--model")
    p.add_argument("--train", nargs="+", help="event file(s) giving user histories")
    p.add_argument("--level", type=int, default=1)
    p.add_argument("--history", type=_history, default=None, metavar="H", help="latest H events or 'full'")
    p.add_argument("--top", type=int, default=10, metavar="R")
    who = p.add_mutually_exclusive_group()
    who.add_argument("--user", action="append", help="user id (repeatable)")
    who.add_argument("--all", action="store_true")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("evaluate", help="tune on validation, evaluate on test")
    p.add_argument("--method", choices=("cof", "pop", "uknn", "iknn"), default="cof")
    p.add_argument("--train", nargs="+")
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("--model", help="use this model instead of training one (cof)")
    p.add_argument("--top", type=_ints, default=[5, 10, 20])
    p.add_argument("--grid-H", type=_histories, default=[2, 3, 5, 10, 20, 50, 100, None],
                   help="history lengths to try; 'full' keeps every event")
    p.add_argument("--grid-l", type=_ints, default=None, help="levels to try (default all)")
    p.add_argument("--k", type=_ints, default=[80], help="neighbourhood sizes for kNN baselines")
    p.add_argument("--no-retrain", action="store_true", help="do not retrain on train+valid")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--json", action="store_true", help="print JSON instead of the flat table")
    p.add_argument("--emit-curves", metavar="PATH", help="write recall/diversity against H and l")
    _hierarchy_options(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bound", help="group size needed to cover a fraction of the items")
    p.add_argument("--items", type=int, metavar="N")
    p.add_argument("--picks", type=int, metavar="n")
    p.add_argument("--coverage", type=float, metavar="q")
    p.add_argument("--confidence", type=float, metavar="p")
    p.add_argument("--simulate", type=int, metavar="TRIALS", help="also estimate by Monte Carlo")
    p.set_defaults(func=cmd_bound)
    return parser


def _apply_config(parser: argparse.ArgumentParser, path: str) -> None:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise CLIError(f"{path}: {e.strerror or e}") from None
    except json.JSONDecodeError as e:
        raise CLIError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise CLIError(f"{path}: expected a JSON object")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    for key, value in doc.items():
        if key in subparsers:
            if not isinstance(value, dict):
                raise CLIError(f"{path}: section {key!r} must be an object")
            for k, v in value.items():
                _set_default(subparsers[key], k, v, f"{path}: {key}.{k}")
        elif key != "config":
            _set_default(parser, key, value, f"{path}: {key}")


def _set_default(parser: argparse.ArgumentParser, key: str, value, where: str) -> None:
    """Config values go through the same converters as command-line text."""
    dest = key.replace("-", "_")
    action = next((a for a in parser._actions if a.dest == dest and a.dest != "help"), None)
    if action is None:
        raise CLIError(f"{where}: unknown option")
    text = lambda v: "full" if v is None else str(v)
    try:
        if isinstance(action, (argparse._StoreTrueAction, argparse._CountAction)):
            if not isinstance(value, (bool, int)):
                raise CLIError(f"{where}: expected a boolean")
        elif action.nargs in ("+", "*") or isinstance(action, argparse._AppendAction):
            value = [text(v) for v in (value if isinstance(value, list) else [value])]
            if action.type is not None:
                value = [action.type(v) for v in value]
        else:
            value = ",".join(map(text, value)) if isinstance(value, list) else text(value)
            if action.type is not None:
                value = action.type(value)
    except (argparse.ArgumentTypeError, ValueError) as e:
        raise CLIError(f"{where}: {e}") from None
    parser.set_defaults(**{dest: value})


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if known.config:
            _apply_config(parser, known.config)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    args = parser.parse_args(argv)
    logging.getLogger().setLevel(logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (IngestError, ltm.ModelError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
