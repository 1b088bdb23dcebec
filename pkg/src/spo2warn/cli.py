"""``spo2warn`` command line: generate, prepare, train, evaluate, compare, explain, predict, serve.

Each sub-command also accepts ``--config FILE`` with ``key = value`` lines
whose keys are that command's long option names (``--doctor-filter`` is
``doctor-filter``; train's ``--set eta=0.1`` is ``set.eta``).  Flags given
on the command line win over the file; unknown keys are rejected.

Exit codes: 0 success, 2 usage or configuration error, 3 invalid input data
or artifact, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4

logger = logging.getLogger("spo2warn")


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spo2warn", description="Hypoxemia early warning from minute-level SpO2 traces.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", metavar="FILE", help="key = value file of defaults for this command's options")
        return p

    p = command("generate", "Write a synthetic trace CSV.")
    p.add_argument("--cases", type=_positive_int, help="number of cases (default 500)")
    p.add_argument("--seed", type=_nonneg_int, help="generator seed (default 0)")
    p.add_argument("--missing-rate", type=_fraction, help="per-minute dropout probability (default 0.02)")
    p.add_argument("--event-rate", type=_nonneg_float, help="mean desaturation events per case hour (default 0.9)")
    p.add_argument("--out", help="output trace CSV path")

    p = command("prepare", "Label, split and normalize a trace file into a prepared directory.")
    p.add_argument("--traces", help="input trace CSV")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=_nonneg_int, help="case split seed (default 0)")
    p.add_argument("--doctor-filter", action="store_true", default=None,
                   help="drop negatives that desaturate 5 to 10 minutes ahead")

    p = command("train", "Train one model on a prepared directory and write an artifact.")
    p.add_argument("--data", help="prepared directory")
    p.add_argument("--model", help="base-rate | ar1 | logistic | gbt | cnn | lstm")
    p.add_argument("--out", help="output artifact path")
    p.add_argument("--scale", choices=("desk", "paper"), help="hyperparameter preset (default desk)")
    p.add_argument("--seed", type=_nonneg_int, help="training seed (default 0)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=None,
                   help="override one hyperparameter; repeatable")

    p = command("evaluate", "Score artifacts on a split and write the comparison table.")
    p.add_argument("--data", help="prepared directory")
    p.add_argument("--artifact", action="append", metavar="[NAME=]PATH", default=None,
                   help="artifact to score; repeatable; NAME defaults to the model kind")
    p.add_argument("--out", help="output directory for table, reports and curve CSVs")
    p.add_argument("--split", choices=("train", "validation", "test"), help="split to score (default test)")

    p = command("compare", "Paired bootstrap and ROC dominance check between two artifacts.")
    p.add_argument("--data", help="prepared directory")
    p.add_argument("--a", metavar="[NAME=]PATH", help="first artifact")
    p.add_argument("--b", metavar="[NAME=]PATH", help="second artifact")
    p.add_argument("--resamples", type=_positive_int, help="bootstrap resamples (default 10000)")
    p.add_argument("--seed", type=_nonneg_int, help="bootstrap seed (default 0)")
    p.add_argument("--split", choices=("train", "validation", "test"), help="split to score (default test)")
    p.add_argument("--out", help="also write the report to this file")

    p = command("explain", "Per-minute attribution for one window, written as CSV and SVG.")
    p.add_argument("--artifact", "--model", dest="artifact", help="artifact path")
    p.add_argument("--traces", help="trace CSV holding --case")
    p.add_argument("--case", help="case id")
    p.add_argument("--minute", type=_nonneg_int, help="prediction minute")
    p.add_argument("--window", help="file with 60 SpO2 values instead of --traces/--case/--minute")
    p.add_argument("--steps", type=_positive_int, help="Integrated Gradients steps (default 300)")
    p.add_argument("--out", help="output directory (default .)")

    p = command("predict", "Risk at every minute of every case in a trace file.")
    p.add_argument("--artifact", help="artifact path")
    p.add_argument("--traces", help="trace CSV")
    p.add_argument("--case", help="only this case")
    p.add_argument("--out", help="output CSV (default stdout)")

    p = command("serve", "Stream risks over the line-delimited JSON protocol.")
    p.add_argument("--artifact", help="artifact path")
    p.add_argument("--listen", help="tcp://HOST:PORT, unix:///PATH, stdio, or http://HOST:PORT")
    p.add_argument("--attrib", action="store_true", default=None, help="attach top-3 attributions to every risk")
    return parser


_DEFAULTS: dict[str, dict[str, Any]] = {
    "generate": {"cases": 500, "seed": 0, "missing_rate": 0.02, "event_rate": 0.9},
    "prepare": {"seed": 0, "doctor_filter": False},
    "train": {"scale": "desk", "seed": 0, "set": []},
    "evaluate": {"split": "test"},
    "compare": {"resamples": 10_000, "seed": 0, "split": "test"},
    "explain": {"steps": 300, "out": "."},
    "predict": {},
    "serve": {"attrib": False},
}
_REQUIRED = {
    "generate": ("out",),
    "prepare": ("traces", "out"),
    "train": ("data", "model", "out"),
    "evaluate": ("data", "artifact", "out"),
    "compare": ("data", "a", "b"),
    "explain": ("artifact",),
    "predict": ("artifact", "traces"),
    "serve": ("artifact", "listen"),
}


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from ``--config`` and built-in defaults, then check required ones."""
    from .workflow import parse_key_values

    cmd = args.command
    sub = next(a for a in parser._subparsers._group_actions if a.dest == "command").choices[cmd]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        try:
            items = parse_key_values(text, args.config)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        extra_sets = []
        for key, value in items.items():
            if cmd == "train" and key.startswith("set."):
                extra_sets.append(f"{key[4:]}={value}")
                continue
            dest = key.replace("-", "_")
            if dest not in actions:
                raise UsageError(f"{args.config}: unknown key {key!r} for {cmd}")
            if getattr(args, dest) is not None:
                continue
            action = actions[dest]
            if isinstance(action, argparse._StoreTrueAction):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise UsageError(f"{args.config}: {key} must be true or false")
                setattr(args, dest, value.lower() in ("true", "1"))
            elif isinstance(action, argparse._AppendAction):
                setattr(args, dest, [v.strip() for v in value.split(";") if v.strip()])
            else:
                try:
                    v = action.type(value) if action.type else value
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise UsageError(f"{args.config}: {key}: {exc}") from None
                if action.choices is not None and v not in action.choices:
                    raise UsageError(f"{args.config}: {key} must be one of {', '.join(action.choices)}")
                setattr(args, dest, v)
        if extra_sets:
            # flags win: command-line --set entries are applied after the file's
            args.set = extra_sets + (args.set or [])
    for dest, default in _DEFAULTS[cmd].items():
        if getattr(args, dest) is None:
            setattr(args, dest, default)
    missing = [d for d in _REQUIRED[cmd] if getattr(args, d) is None]
    if missing:
        raise UsageError(f"{cmd}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


# -- commands ----------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    from .traces import SynthConfig, generate_synthetic_cases, save_traces

    cfg = SynthConfig(n_cases=args.cases, seed=args.seed, missing_rate=args.missing_rate, event_rate=args.event_rate)
    cfg.validate()
    traces = generate_synthetic_cases(cfg)
    save_traces(traces, args.out)
    print(f"wrote {len(traces)} cases, {sum(t.duration for t in traces)} minutes to {args.out}")
    return EXIT_OK


def cmd_prepare(args: argparse.Namespace) -> int:
    from .workflow import prepare

    if not Path(args.traces).is_file():
        raise FileNotFoundError(f"trace file {args.traces} does not exist")
    s = prepare(args.traces, args.out, doctor_filter=args.doctor_filter, seed=args.seed)
    print(f"cases: {s.n_cases}")
    print(f"time points: {s.n_points} ({s.n_included} included)")
    for split, (n, pos) in s.split_counts.items():
        print(f"{split}: {n} examples, {pos} positive")
    print(f"prevalence: {s.prevalence:.6f} ({s.n_positive}/{s.n_included})")
    return EXIT_OK


def _parse_sets(items: Sequence[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def cmd_train(args: argparse.Namespace) -> int:
    from .workflow import load_prepared, train

    prepared = load_prepared(args.data)
    artifact, summary = train(prepared, args.model, args.scale, _parse_sets(args.set), args.seed)
    artifact.save(args.out)
    print(f"model: {summary.model} ({args.scale} scale, {summary.n_train} training examples)")
    print(f"final training loss: {summary.final_loss:.6f}")
    val = "n/a (single-class validation split)" if summary.validation_au_prc is None else f"{summary.validation_au_prc:.6f}"
    print(f"validation AU-PRC: {val}")
    print(f"artifact: {args.out}")
    return EXIT_OK


def _named_artifacts(specs: Sequence[str]):
    from .artifact import ModelArtifact

    loaded = []
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = "", spec
        if not Path(path).is_file():
            raise FileNotFoundError(f"artifact {path} does not exist")
        art = ModelArtifact.load(path)
        loaded.append((name or art.kind, art))
    names = [n for n, _ in loaded]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise UsageError(f"duplicate model name {dupes[0]!r}; label artifacts as NAME=PATH")
    return loaded


def cmd_evaluate(args: argparse.Namespace) -> int:
    from .workflow import evaluate, load_prepared

    artifacts = _named_artifacts(args.artifact)
    prepared = load_prepared(args.data)
    _, table = evaluate(prepared, artifacts, args.out, args.split)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    from .workflow import compare, load_prepared

    a, b = _named_artifacts([args.a, args.b]) if args.a != args.b else _named_artifacts([args.a]) * 2
    prepared = load_prepared(args.data)
    result = compare(prepared, a, b, args.resamples, args.seed, args.split)
    text = result.dumps()
    if args.out:
        Path(args.out).write_bytes(text.encode())
    sys.stdout.write(text)
    return EXIT_OK


def cmd_explain(args: argparse.Namespace) -> int:
    from .artifact import ModelArtifact
    from .traces import load_traces, trace_index
    from .workflow import explain_window, read_window_file, window_for

    if args.window:
        if args.traces or args.case:
            raise UsageError("explain: give either --window or --traces/--case/--minute")
        raw = read_window_file(args.window)
        case_id, minute = Path(args.window).stem, 59 if args.minute is None else args.minute
    else:
        if not (args.traces and args.case is not None and args.minute is not None):
            raise UsageError("explain: needs --traces, --case and --minute (or --window)")
        raw = window_for(trace_index(load_traces(args.traces)), args.case, args.minute)
        case_id, minute = args.case, args.minute
    artifact = ModelArtifact.load(args.artifact)
    e = explain_window(artifact, raw, args.out, case_id, minute, artifact.kind, args.steps)
    print(f"risk: {e.risk:.6f}")
    print(f"base value: {e.attribution.base_value:.6f} ({e.attribution.space_tag})")
    print("top minutes: " + ", ".join(f"{i - 59:+d} ({v:+.4f})" for i, v in e.attribution.top(3)))
    for path in e.files:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    from .artifact import ModelArtifact
    from .traces import load_traces
    from .workflow import predict_trace

    artifact = ModelArtifact.load(args.artifact)
    traces = load_traces(args.traces)
    if args.case is not None:
        traces = [t for t in traces if t.case_id == args.case]
        if not traces:
            raise UsageError(f"no case {args.case!r} in {args.traces}")
    lines = ["case_id,minute,risk"]
    for trace in traces:
        risks = predict_trace(artifact, trace)
        lines.extend(f"{trace.case_id},{m},{float(r)!r}" for m, r in enumerate(risks))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_bytes(text.encode())
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from .artifact import ModelArtifact
    from .serve import run_server

    artifact = ModelArtifact.load(args.artifact)

    def ready(where: str) -> None:
        logger.info("serving %s model on %s", artifact.kind, where)

    return run_server(artifact, args.listen, attrib=args.attrib, ready=ready)


COMMANDS = {
    "generate": cmd_generate,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "explain": cmd_explain,
    "predict": cmd_predict,
    "serve": cmd_serve,
}


def _exit_code(exc: BaseException) -> int:
    from .container import ArtifactError
    from .eval import EvaluationError
    from .explain import UnsupportedAttributionError
    from .serve import EndpointError
    from .traces import ConfigError, TraceError

    if isinstance(exc, (UsageError, ConfigError, EndpointError)):
        return EXIT_USAGE
    if isinstance(exc, (TraceError, ArtifactError, EvaluationError, UnsupportedAttributionError, FileNotFoundError)):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = None
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        args = _apply_config(parser, args)
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        # --help exits 0 through argparse
        return int(exc.code or 0)
    except KeyboardInterrupt:
        return EXIT_OK if getattr(args, "command", None) == "serve" else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        code = _exit_code(exc)
        print(f"spo2warn: error: {exc}", file=sys.stderr)
        if code == EXIT_RUNTIME:
            logger.debug("traceback", exc_info=True)
        return code


if __name__ == "__main__":
    sys.exit(main())
