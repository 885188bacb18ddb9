import argparse
import difflib
import json
import logging
import re
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, NoReturn, Optional, cast

from .analysis import ANALYSES, analyze, list_analyses
from .bench import GRIDS, bench_forward, rows_to_csv, verify_counts, wall_time_violations
from .core.checkpoint import load_checkpoint
from .core.config import Config
from .core.data import generate_synthetic, load_jsonl, write_jsonl
from .core.errors import ConfigError, FieReaderError, UsageError
from .core.runner import evaluate, prepare_data, run_training, write_eval
from .scaffold import RunLayout, read_run_config
from .spec import FusionMode, RunConfig
from .sweep import AXES, learnability_check, parse_values, sweep


logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace], None]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class ReaderArgumentParser(argparse.ArgumentParser):
    """Raises ``UsageError`` instead of exiting, with a close-match hint for mistyped flags."""

    def _known_words(self) -> List[str]:
        words: List[str] = []
        for action in self._actions:
            words.extend(action.option_strings)
            if isinstance(action, argparse._SubParsersAction):
                for name, sub in action.choices.items():
                    words.append(name)
                    if isinstance(sub, ReaderArgumentParser):
                        words.extend(sub._known_words())
        return sorted(set(words))

    def error(self, message: str) -> NoReturn:
        hint = ""
        for token in re.findall(r"(--?[\w-]+|'[\w-]+')", message):
            close = difflib.get_close_matches(token.strip("'"), self._known_words(), n=1)
            if close and close[0] != token.strip("'"):
                hint = f" (did you mean {close[0]}?)"
                break
        raise UsageError(f"{self.prog}: {message}{hint}")


def _get_handler(ns: argparse.Namespace) -> Handler:
    func = getattr(ns, "func", None)
    if not callable(func):  # pragma: no cover
        raise UsageError("no subcommand handler")
    return cast(Handler, func)


def _load_config(ns: argparse.Namespace, env: Config, required: bool = True) -> RunConfig:
    """Run config from ``--config`` with env precision as fallback and CLI flags on top."""
    raw: Dict[str, Any] = {}
    if ns.config:
        raw = read_run_config(ns.config)
    elif required:
        raise UsageError(f"{ns.cmd} needs --config")
    optim = dict(raw.get("optim") or {})
    optim.setdefault("precision", env.precision)
    if ns.precision:
        optim["precision"] = ns.precision
    if ns.seed is not None:
        optim["seed"] = ns.seed
    raw["optim"] = optim
    return RunConfig.from_dict(raw)


def _out(ns: argparse.Namespace, default: str) -> Path:
    return Path(ns.out or default)


def cmd_gen_data(ns: argparse.Namespace) -> None:
    config = _load_config(ns, ns.env, required=False)
    spec = config.synthetic
    if spec is None:
        raise ConfigError("gen-data needs a synthetic block in the run config")
    if ns.seed is not None:
        spec = config.with_overrides(synthetic={"seed": ns.seed}).synthetic
        assert spec is not None
    out = _out(ns, "data")
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "dev"):
        count = write_jsonl(out / f"{split}.jsonl", generate_synthetic(spec, split))
        print(f"{split}: {count} records -> {out / f'{split}.jsonl'}")


def cmd_train(ns: argparse.Namespace) -> None:
    config = _load_config(ns, ns.env)
    resume = load_checkpoint(ns.resume) if ns.resume else None
    out = _out(ns, "runs/latest")
    _, result, report = run_training(config, out, ns.env, resume)
    print(f"Trained {result.steps} steps; final loss {result.final_loss}")
    print(f"EM: {report.em:.4f}")
    print(f"Run directory: {out}")


def cmd_eval(ns: argparse.Namespace) -> None:
    ckpt = load_checkpoint(ns.checkpoint)
    model = ckpt.model
    if ns.precision and ns.precision != model.config.optim.precision:
        logger.warning("checkpoint stored at %s; evaluating at that precision", model.config.optim.precision)
    if ns.data:
        batches = [model.tokenize(r) for r in load_jsonl(ns.data, require_answers=True)]
    else:
        batches = prepare_data(model.config, model.vocab).dev
    report = evaluate(model, batches, ns.limit)
    layout = RunLayout(_out(ns, str(Path(ns.checkpoint).parent)))
    write_eval(report, layout)
    print(f"EM: {report.em:.4f}")
    print(f"Predictions: {layout.predictions}")


def _parse_modes(raw: str) -> List[FusionMode]:
    names = [m.strip().upper() for m in raw.split(",") if m.strip()]
    valid = [m.value for m in FusionMode]
    unknown = [n for n in names if n not in valid]
    if unknown or not names:
        raise UsageError(f"--modes: unknown fusion mode(s) {', '.join(unknown) or raw!r}; choose from {', '.join(valid)}")
    return [FusionMode(n) for n in names]


def cmd_bench(ns: argparse.Namespace) -> None:
    modes = _parse_modes(ns.modes) if ns.modes else list(FusionMode)
    out = _out(ns, "bench")
    out.mkdir(parents=True, exist_ok=True)
    report = verify_counts(ns.grid, modes, seed=ns.seed or 0)
    if ns.verify_only:
        rows = report.rows
    else:
        rows = bench_forward(ns.grid, modes, repeats=ns.repeats, precision=ns.precision or "f64", seed=ns.seed or 0)
        measured = {(r.mode, r.point.L, r.point.N, r.point.S, r.point.G): r.pairs_measured for r in report.rows}
        for r in rows:
            r.pairs_measured = measured[(r.mode, r.point.L, r.point.N, r.point.S, r.point.G)]
        slower = wall_time_violations(rows)
        print(f"Median wall time non-decreasing in N: {'yes' if not slower else f'no ({len(slower)} drops)'}")
    path = out / "complexity.csv"
    path.write_text(rows_to_csv(rows), encoding="utf-8")
    failures = report.failures()
    print(f"{len(rows)} rows -> {path}")
    print(f"Closed forms match instrumented counts: {'yes' if not failures else f'no ({len(failures)} mismatches)'}")
    if failures:
        raise FieReaderError(f"{len(failures)} pair-count mismatches; see {path}")


def cmd_analyze(ns: argparse.Namespace) -> None:
    if ns.list:
        for a in list_analyses():
            print(f"- {a['name']}: {a['description']}")
        return
    if not ns.checkpoint:
        raise UsageError("analyze needs --checkpoint")
    model = load_checkpoint(ns.checkpoint).model
    if ns.data:
        batches = [model.tokenize(r) for r in load_jsonl(ns.data)]
    else:
        batches = prepare_data(model.config, model.vocab).dev
    if ns.limit:
        batches = batches[: ns.limit]
    names = [n.strip() for n in ns.analyses.split(",") if n.strip()] if ns.analyses else list(ANALYSES)
    report = analyze(model, batches, names)
    out = _out(ns, str(Path(ns.checkpoint).parent))
    out.mkdir(parents=True, exist_ok=True)
    path = out / "analysis.json"
    path.write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(json.dumps(report, indent=2))
    print(f"Analysis written: {path}")


def cmd_sweep(ns: argparse.Namespace) -> None:
    config = _load_config(ns, ns.env)
    out = _out(ns, "sweeps")
    if ns.learnability:
        report = learnability_check(config, out, ns.env)
        (out / "learnability.json").parent.mkdir(parents=True, exist_ok=True)
        (out / "learnability.json").write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
        print(json.dumps(report.to_dict(), indent=2))
        return
    if not ns.axis or not ns.values:
        raise UsageError("sweep needs --axis and --values (or --learnability)")
    values = parse_values(ns.axis, ns.values)
    seeds = [int(s) for s in ns.seeds.split(",")] if ns.seeds else None
    result = sweep(config, ns.axis, values, out, seeds, ns.env)
    print(result.to_csv(), end="")
    for row in result.summary():
        stderr = "" if row["stderr"] is None else f" ± {row['stderr']:.4f}"
        mean = "n/a" if row["mean_em"] is None else f"{row['mean_em']:.4f}"
        print(f"{ns.axis}={row['value']}: mean EM {mean}{stderr} over {row['runs']} runs")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--precision", choices=["f32", "f64"], default=None)
    p.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    p = ReaderArgumentParser(prog="fie_reader", description="Fusion-in-encoder reader toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("gen-data", help="write synthetic train/dev JSONL from the config's synthetic block")
    _common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a reader and evaluate it on dev")
    _common(sp)
    sp.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="exact match of a checkpoint on a dataset")
    _common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", default=None, help="JSONL dataset (default: the run's dev split)")
    sp.add_argument("--limit", type=int, default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="attention-pair counts, ratios and forward timings")
    _common(sp)
    sp.add_argument("--grid", choices=sorted(GRIDS), default="small")
    sp.add_argument("--modes", default=None, help="comma-separated fusion modes (default: all)")
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--verify-only", action="store_true", help="skip timings")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("analyze", help="rollout, global-token similarity and attention-mass statistics")
    _common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--data", default=None)
    sp.add_argument("--analyses", default=None, help="comma-separated names (default: all)")
    sp.add_argument("--limit", type=int, default=None)
    sp.add_argument("--list", action="store_true", help="list analyses and exit")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("sweep", help="train/evaluate across values of one axis")
    _common(sp)
    sp.add_argument("--axis", choices=AXES, default=None)
    sp.add_argument("--values", default=None, help="comma-separated values")
    sp.add_argument("--seeds", default=None, help="comma-separated seeds")
    sp.add_argument("--learnability", action="store_true", help="train the fusion and isolated arms on the aggregation task instead")
    sp.set_defaults(func=cmd_sweep)

    return p


def main(argv: Optional[List[str]] = None) -> int:
    env = Config.from_env()
    env.configure_logging()
    p = build_parser()
    try:
        ns = p.parse_args(argv)
        ns.env = env
        _get_handler(ns)(ns)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FieReaderError, OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
