"""Command line entry point: ``ctxvlp {gen-data,train,gradcheck,eval,sweep}``.

Every command writes its resolved configuration to ``<out>/config.json``;
results go to ``<out>/logs``, ``<out>/checkpoints`` and ``<out>/reports``.
Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure,
3 I/O failure.  ``CTXVLP_OUT`` sets the default output directory and
``CTXVLP_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import autodiff as ad
from . import data, evaluation, plotting, training, verify
from .config import ConfigError, apply_overrides, to_dict
from .objectives import OBJECTIVE_NAMES

log = logging.getLogger("ctxvlp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _out_dir(args) -> Path:
    out = args.out or os.environ.get("CTXVLP_OUT")
    if not out:
        raise UsageError("no output directory: pass --out or set CTXVLP_OUT")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_json(path) -> dict:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return payload


def _echo_config(out: Path, command: str, resolved: dict) -> None:
    text = json.dumps({"command": command, **resolved}, indent=1, sort_keys=True) + "\n"
    (out / "config.json").write_text(text, encoding="utf-8")


def _write_csv(path: Path, columns, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def _train_config(args) -> training.TrainConfig:
    data_ = to_dict(training.profile_config(args.profile))
    if args.config:
        training._merge(data_, _read_json(args.config))
    data_ = apply_overrides(data_, args.set or [])
    if args.seed is not None:
        data_["seed"] = args.seed
    return training.TrainConfig.from_dict(data_)


def _load_split(corpus_dir, split) -> data.Corpus:
    manifest = data.load_manifest(corpus_dir)
    if split not in manifest["splits"]:
        raise ConfigError(f"corpus has no split {split!r}; available: {sorted(manifest['splits'])}")
    return data.load_split(corpus_dir, split)


def _load_prompts(args) -> data.PromptSet:
    path = Path(args.prompts) if args.prompts else Path(args.corpus) / "prompts.json"
    try:
        return data.load_prompts(path)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: malformed prompt file ({exc})") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _load_model(path):
    return training.model_from_checkpoint(training.load_checkpoint(Path(path)))


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    spec_data = _read_json(args.spec) if args.spec else {}
    spec_data = apply_overrides({**data.SyntheticProcedureSpec().to_dict(), **spec_data}, args.set or [])
    if args.seed is not None:
        spec_data["seed"] = args.seed
    try:
        spec = data.SyntheticProcedureSpec.from_dict(spec_data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid corpus spec: {exc}") from None
    out = _out_dir(args)
    generated = data.generate_corpus(spec)
    data.save_generated(generated, out)
    for corpus in (generated.train, generated.eval):
        print(f"{corpus.name}: {len(corpus.videos)} videos, {corpus.num_clips} clips, "
              f"{len(corpus.phases())} phases")
    print(f"seed {spec.seed}; corpus written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    corpus = _load_split(args.corpus, args.split)
    out = _out_dir(args)
    _echo_config(out, "train", {"corpus": str(args.corpus), "split": args.split, "train": cfg.to_dict()})
    try:
        result = training.train(cfg, corpus, out, resume_from=args.resume)
    except training.NonFiniteLossError as exc:
        print(f"error: {exc}; last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC
    rows = training.read_log(out / "logs" / "train_log.csv")
    plotting.plot_training_curves(rows, out / "reports" / "train_loss.png")
    last = result.log[-1]
    parts = ", ".join(f"{k} {last[k]:.4f}" for k in OBJECTIVE_NAMES + ("total",) if last[k] is not None)
    print(f"trained {cfg.epochs} epochs ({len(result.log)} steps); final step: {parts}")
    print(f"checkpoint: {result.checkpoint_paths[-1]}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    wanted = {n.strip() for n in args.objectives.split(",") if n.strip()}
    if wanted - set(OBJECTIVE_NAMES):
        raise ConfigError(f"unknown objectives {sorted(wanted - set(OBJECTIVE_NAMES))}")
    enabled = [n for n in OBJECTIVE_NAMES if n in wanted]
    if args.config or args.set:
        cfg = _train_config(args)
        on = cfg.objectives.enabled()
        enabled = [n for n in enabled if on[n]]
    if args.corrupt_op:
        ad._FAULTS[args.corrupt_op] = 1.5
    try:
        worst = verify.check_losses(enabled, range(args.seeds), step=args.step)
    finally:
        ad._FAULTS.pop(args.corrupt_op, None)
    failed = False
    print(f"{'loss':<8} {'max rel err':>12}  status (tol {args.tol:g})")
    for name, err in worst.items():
        ok = err < args.tol
        failed |= not ok
        print(f"{name:<8} {err:>12.3e}  {'ok' if ok else 'FAIL'}")
    if args.out or os.environ.get("CTXVLP_OUT"):
        out = _out_dir(args)
        _echo_config(out, "gradcheck", {"objectives": enabled, "seeds": args.seeds, "tol": args.tol,
                                        "step": args.step})
        _write_csv(out / "reports" / "gradcheck.csv", ["loss", "max_rel_err", "tol", "ok"],
                   [{"loss": n, "max_rel_err": float(e), "tol": args.tol, "ok": bool(e < args.tol)}
                    for n, e in worst.items()])
    return EXIT_NUMERIC if failed else EXIT_OK


def _eval_config(args, window=None) -> evaluation.EvalConfig:
    try:
        return evaluation.EvalConfig(window=window or args.window, fusion=args.fusion, task=args.task)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_eval(args) -> int:
    cfg = _eval_config(args)
    prompts = _load_prompts(args)
    corpus = _load_split(args.corpus, args.split)
    model = _load_model(args.checkpoint)
    out = _out_dir(args)
    _echo_config(out, "eval", {"checkpoint": str(args.checkpoint), "corpus": str(args.corpus),
                               "split": args.split, "prompts": str(args.prompts or ""),
                               "eval": to_dict(cfg)})
    report = evaluation.evaluate(model, corpus, prompts, cfg)
    rows = [{"dataset": report.dataset, "window": cfg.window, "fusion": cfg.fusion, "task": cfg.task,
             "variant": str(k), "f1": f1, "map": mp}
            for k, (f1, mp) in enumerate(zip(report.variant_f1, report.variant_map))]
    rows.append({"dataset": report.dataset, "window": cfg.window, "fusion": cfg.fusion, "task": cfg.task,
                 "variant": "mean", "f1": report.f1, "map": report.map})
    reports = out / "reports"
    _write_csv(reports / "metrics.csv", ["dataset", "window", "fusion", "task", "variant", "f1", "map"], rows)
    _write_csv(reports / "per_video_f1.csv", ["video_id", "variant", "f1"],
               [{"video_id": vid, "variant": k, "f1": f1}
                for k, pv in enumerate(report.per_video_f1) for vid, f1 in pv.items()])
    plotting.plot_per_video_f1(report.per_video_f1, reports / "per_video_f1.png")
    print(report.summary())
    return EXIT_OK


def cmd_sweep(args) -> int:
    windows = [int(w) for w in args.windows.split(",")]
    if any(w < 1 for w in windows):
        raise ConfigError("windows must be positive integers")
    prompts = _load_prompts(args)
    corpus = _load_split(args.corpus, args.split)
    model = _load_model(args.checkpoint)
    out = _out_dir(args)
    _echo_config(out, "sweep", {"checkpoint": str(args.checkpoint), "corpus": str(args.corpus),
                                "split": args.split, "windows": windows, "fusion": args.fusion,
                                "task": args.task})
    rows, _ = evaluation.temporal_window_sweep(model, corpus, prompts, windows, args.fusion, args.task)
    _write_csv(out / "reports" / "sweep.csv", ["window", "dataset", "f1", "map"], rows)
    plotting.plot_window_sweep(rows, out / "reports" / "sweep.png")
    for r in rows:
        print(f"window {r['window']:>3}: F1 {r['f1']:.4f}  mAP {r['map']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctxvlp", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=False):
        sp.add_argument("--out", help="output directory (default: $CTXVLP_OUT)")
        if config:
            sp.add_argument("--config", help="JSON file with training settings")
            sp.add_argument("--profile", default="reference", choices=sorted(training.PROFILES),
                            help="base settings before --config and --set (default: reference)")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="dotted override, e.g. objectives.cop=false")
            sp.add_argument("--seed", type=int, help="overrides the configured seed")

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    g.add_argument("--spec", help="JSON file with corpus parameters")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. num_train=10")
    g.add_argument("--seed", type=int, help="generator seed (default 0)")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a corpus split")
    t.add_argument("--corpus", required=True, help="directory written by gen-data")
    t.add_argument("--split", default="train", help="train or eval")
    t.add_argument("--resume", help="checkpoint to resume from")
    common(t, config=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    c.add_argument("--tol", type=float, default=verify.DEFAULT_TOL, help="max relative error (default 1e-5)")
    c.add_argument("--seeds", type=int, default=5, help="random problems per loss")
    c.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    c.add_argument("--objectives", default=",".join(OBJECTIVE_NAMES), help="comma-separated loss names")
    c.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    common(c, config=True)
    c.set_defaults(func=cmd_gradcheck)

    for name, func, help_ in (("eval", cmd_eval, "zero-shot evaluation"),
                              ("sweep", cmd_sweep, "evaluation over several windows")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--checkpoint", required=True, help="checkpoint written by train")
        e.add_argument("--corpus", required=True, help="directory written by gen-data")
        e.add_argument("--split", default="eval", help="train or eval")
        e.add_argument("--prompts", help="prompt file (default: <corpus>/prompts.json)")
        e.add_argument("--fusion", default="averaged", choices=evaluation.FUSION_MODES)
        e.add_argument("--task", default="single-label", choices=evaluation.TASKS)
        if name == "eval":
            e.add_argument("--window", type=int, default=4, help="frames per scoring window")
        else:
            e.add_argument("--windows", default=",".join(map(str, evaluation.SWEEP_WINDOWS)),
                           help="comma-separated window sizes")
        common(e)
        e.set_defaults(func=func)
    return p


def _limit_threads():
    threads = os.environ.get("CTXVLP_THREADS")
    if not threads:
        return None
    try:
        n = int(threads)
    except ValueError:
        raise UsageError(f"CTXVLP_THREADS must be an integer, got {threads!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ad.NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
