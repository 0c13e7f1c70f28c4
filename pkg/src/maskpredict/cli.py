"""Command-line entry point.

Every subcommand writes into a run directory (``--out``, or a fresh
directory under ``$MASKPREDICT_RUNS`` / ``./runs``) and leaves its inputs
untouched. Settings come from built-in defaults, then an optional flat
``key=value`` file (``--config``), then explicit flags; the merged result is
written to ``<run dir>/config.txt``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from . import data
from . import experiments as ex
from . import transformer as tf
from .bench import sweep, write_tsv
from .decoding import DecodeConfig
from .metrics import evaluate
from .training import TrainConfig, distill_corpus

log = logging.getLogger("maskpredict")

RUNS_ENV = "MASKPREDICT_RUNS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


# defaults per subcommand; flags and config files may only set these keys
DEFAULTS = {
    "gen-data": dict(task="copy", seed=1, vocab_size=64, min_len=3, max_len=20, n_train=8000,
                     n_valid=500, n_test=500, run_prob=0.9),
    "train": dict(data="", model="cmlm", preset="tiny", train_file="train.tsv", steps=2000, max_tokens=4096,
                  peak_lr=1e-3, warmup=0, weight_decay=0.01, clip_norm=10.0, label_smoothing=0.1,
                  length_weight=1.0, keep_best=5, seed=1, dropout=-1.0, init_std=-1.0),
    "distill": dict(data="", teacher="", beam=5, batch_size=32),
    "decode": dict(data="", checkpoint="", split="test", T=10, ell=5, beam=5, gold_length=False,
                   batch_size=10),
    "evaluate": dict(data="", hyp="", split="test", candidates=""),
    "bench": dict(data="", cmlm="", ar="", T="4,5,6,7,8,9,10", ell="1,2,3", b="1,5", batch_size=10,
                  repeats=3, limit=0, no_cache=False),
    "analyze": dict(data="", cmlm="", raw_cmlm="", ell=5),
}

HELP = {
    "gen-data": "generate a synthetic task (copy, reverse, dict_swap, synonym_registers)",
    "train": "train a CMLM or AR model",
    "distill": "replace training targets with an AR teacher's beam output",
    "decode": "decode a split with a checkpoint",
    "evaluate": "score hypotheses; prints a JSON metrics report",
    "bench": "time mask-predict and beam search configurations",
    "analyze": "emit the four analysis tables",
}


def read_config_file(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _coerce(value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    try:
        return type(default)(value)
    except ValueError:
        raise UsageError(f"expected {type(default).__name__}, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskpredict", description="Conditional masked LMs with mask-predict decoding.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="flat key=value file; flags override it")
        p.add_argument("--out", help=f"run directory (default: a new directory under ${RUNS_ENV} or ./runs)")
        for key, value in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(value, bool):
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None)
            else:
                p.add_argument(flag, dest=key, default=None, metavar=key.upper())
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    defaults = DEFAULTS[command]
    values = dict(defaults)
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file {args.config} does not exist")
        for k, v in read_config_file(args.config).items():
            if k not in defaults:
                raise UsageError(f"{args.config}: unknown key {k!r} for {command}")
            values[k] = _coerce(v, defaults[k])
    for k in defaults:
        v = getattr(args, k)
        if v is not None:
            values[k] = _coerce(v, defaults[k])
    return values


def run_directory(command: str, out: str | None) -> Path:
    if out:
        path = Path(out)
    else:
        root = Path(os.environ.get(RUNS_ENV, "runs"))
        n = 1
        while (root / f"{command}-{n:03d}").exists():
            n += 1
        path = root / f"{command}-{n:03d}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_config(run_dir: Path, command: str, values: dict) -> None:
    lines = [f"command={command}"] + [f"{k}={v}" for k, v in values.items()]
    (run_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require_file(path, what: str) -> Path:
    if not path:
        raise UsageError(f"missing --{what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(v: dict, run_dir: Path) -> None:
    spec = data.ToyTaskSpec(kind=v["task"], vocab_size=v["vocab_size"], min_len=v["min_len"],
                            max_len=v["max_len"], n_train=v["n_train"], n_valid=v["n_valid"],
                            n_test=v["n_test"], seed=v["seed"], run_prob=v["run_prob"])
    ex.save_task(ex.task_from_corpus(data.gen_toy_task(spec)), run_dir)
    print(f"wrote {v['task']} task to {run_dir}")


def cmd_train(v: dict, run_dir: Path) -> None:
    task = ex.load_task(_require_file(v["data"], "data"), v["train_file"])
    overrides = {k: v[k] for k in ("dropout", "init_std") if v[k] >= 0}
    tc = TrainConfig(steps=v["steps"], max_tokens=v["max_tokens"], peak_lr=v["peak_lr"],
                     warmup=v["warmup"] or None, weight_decay=v["weight_decay"], clip_norm=v["clip_norm"],
                     label_smoothing=v["label_smoothing"], length_weight=v["length_weight"],
                     keep_best=v["keep_best"], seed=v["seed"])
    if v["model"] not in ("cmlm", "ar"):
        raise UsageError(f"--model must be cmlm or ar, not {v['model']!r}")
    with open(run_dir / "train.log", "w", encoding="utf-8") as fh:
        result = ex.train_on_task(task, v["model"], v["preset"], tc, run_dir / "checkpoints", fh, **overrides)
    tf.save_checkpoint(run_dir / "model.ckpt", result.model.params, result.model.config,
                       {"kind": v["model"], "averaged": len(result.best.paths)})
    task.vocab.save(run_dir / "vocab.txt")
    print(f"valid loss {result.final_valid['loss']:.4f}; checkpoint {run_dir / 'model.ckpt'}")


def cmd_distill(v: dict, run_dir: Path) -> None:
    src_dir = _require_file(v["data"], "data")
    task = ex.load_task(src_dir)
    teacher = ex.load_model(_require_file(v["teacher"], "teacher"))
    pairs, kept = distill_corpus(teacher, task.encoded("train"), v["beam"], v["batch_size"])
    data.write_corpus(run_dir / "train.tsv",
                      [(task.vocab.decode(s), task.vocab.decode(t)) for s, t in pairs])
    for name in ("valid.tsv", "test.tsv", "test.refs", "vocab.txt"):
        if (src_dir / name).exists():
            shutil.copyfile(src_dir / name, run_dir / name)
    print(f"distilled {len(pairs)} pairs ({kept} kept gold) into {run_dir}")


def cmd_decode(v: dict, run_dir: Path) -> None:
    task = ex.load_task(_require_file(v["data"], "data"))
    model = ex.load_model(_require_file(v["checkpoint"], "checkpoint"))
    cfg = DecodeConfig(T=v["T"], ell=v["ell"], beam=v["beam"], gold_length=v["gold_length"])
    hyps, results = ex.translate(model, task, cfg, v["split"], v["batch_size"])
    (run_dir / "hyp.txt").write_text("".join(" ".join(h) + "\n" for h in hyps), encoding="utf-8")
    if model.kind == "cmlm" and not cfg.gold_length:
        (run_dir / "candidates.txt").write_text(
            "".join(" ".join(str(n) for n, _ in r.candidates) + "\n" for r in results), encoding="utf-8")
    print(f"wrote {len(hyps)} hypotheses to {run_dir / 'hyp.txt'}")


def cmd_evaluate(v: dict, run_dir: Path) -> None:
    task = ex.load_task(_require_file(v["data"], "data"))
    lines = _require_file(v["hyp"], "hyp").read_text(encoding="utf-8").splitlines()
    refs = task.references(v["split"])
    if len(lines) != len(refs):
        raise RuntimeError(f"{len(lines)} hypotheses for {len(refs)} references")
    cands = None
    if v["candidates"]:
        cands = [[int(x) for x in ln.split()] for ln in
                 _require_file(v["candidates"], "candidates").read_text(encoding="utf-8").splitlines()]
    report = evaluate([ln.split() for ln in lines], refs, cands)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    (run_dir / "metrics.json").write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_bench(v: dict, run_dir: Path) -> None:
    task = ex.load_task(_require_file(v["data"], "data"))
    cmlm = ex.load_model(_require_file(v["cmlm"], "cmlm"))
    ar = ex.load_model(_require_file(v["ar"], "ar"))
    pairs = task.test[: v["limit"]] if v["limit"] else task.test
    srcs = [task.vocab.encode(s) for s, _ in pairs]
    refs = task.test_refs[: len(pairs)]
    rows = sweep(cmlm, ar, srcs, refs, _ints(v["T"]), _ints(v["ell"]), _ints(v["b"]), v["batch_size"],
                 v["repeats"], detok=task.vocab.decode, cached=not v["no_cache"])
    write_tsv(run_dir / "bench.tsv", rows)
    print((run_dir / "bench.tsv").read_text(encoding="utf-8"), end="")


def cmd_analyze(v: dict, run_dir: Path) -> None:
    task = ex.load_task(_require_file(v["data"], "data"))
    cmlm = ex.load_model(_require_file(v["cmlm"], "cmlm"))
    tables = {
        "repetitions.tsv": ex.format_table(ex.repetition_table(cmlm, task)),
        "buckets.tsv": ex.format_bucket_table(ex.bucket_table(cmlm, task)),
        "length_candidates.tsv": ex.format_table(ex.length_table(cmlm, task)),
    }
    if v["raw_cmlm"]:
        raw = ex.load_model(_require_file(v["raw_cmlm"], "raw-cmlm"))
        tables["distillation.tsv"] = ex.format_table(ex.distillation_table(raw, cmlm, task, ell=v["ell"]))
    else:
        log.warning("no --raw-cmlm given; skipping the raw vs distilled table")
    for name, text in tables.items():
        (run_dir / name).write_text(text, encoding="utf-8")
        print(f"# {name}\n{text}")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "distill": cmd_distill, "decode": cmd_decode,
    "evaluate": cmd_evaluate, "bench": cmd_bench, "analyze": cmd_analyze,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
        values = resolve(args.command, args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        run_dir = run_directory(args.command, args.out)
        write_config(run_dir, args.command, values)
        COMMANDS[args.command](values, run_dir)
    except UsageError as e:
        print(f"maskpredict {args.command}: {e}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    except Exception as e:  # noqa: BLE001 - report anything else as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"maskpredict {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
