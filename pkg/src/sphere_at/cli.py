"""Command-line front end: ``sphere-at {train,attack,eval,verify,report}``.

Exit codes: 0 success, 1 a verified identity failed, 2 usage or config error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import SUITES, run_suite
from .attacks import AttackSpec, GradEstimatorSpec, fgsm, iterative_attack, zo_attack
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, write_blobs
from .config import ConfigError, ExperimentConfig, data_shape, format_value, load_data
from .datahub import CorruptionSpec, IdxParseError, corrupt
from .diffcore import ContractError, NumericError
from .objectives import ObjectiveSpec
from .rng import split_rng
from .spherehead import Model
from .trainer import TrainingAborted, evaluate, train

EXIT_OK, EXIT_ASSERT, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
REPORT_COLUMNS = ("run", "framework", "he", "clean_acc", "robust_acc", "attack", "eps", "steps")
VERSION = f"sphere_at {__version__}"


class UsageError(Exception):
    pass


def _threads():
    raw = os.environ.get("SPHERE_AT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SPHERE_AT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("SPHERE_AT_THREADS must be >= 1")
    return n


@contextlib.contextmanager
def _thread_cap():
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=_threads()):
        yield


def _prepare_out(out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "VERSION").write_text(VERSION + "\n")
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _ckpt_extra(cfg: ExperimentConfig) -> dict:
    # out_dir is where a run lands, not what it is; keeping it out lets reruns compare byte for byte
    extra = {f"cfg.{k}": format_value(v) for k, v in cfg.values.items() if k != "out_dir"}
    extra["version"] = VERSION
    return extra


# -- train -----------------------------------------------------------------------------

def cmd_train(args) -> int:
    overrides = {}
    for kv in args.set or []:
        key, sep, val = kv.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {kv!r}")
        overrides[key.strip()] = val.strip()
    if args.out:
        overrides["out_dir"] = args.out
    cfg = ExperimentConfig.load(args.config, overrides)
    out = _prepare_out(cfg["out_dir"])
    (out / "config.resolved").write_text(cfg.to_text(VERSION))
    train_data, test_data = load_data(cfg.values)
    spec = cfg.train_spec(data_shape(train_data, test_data))
    extra = _ckpt_extra(cfg)
    every = cfg["checkpoint_every"]

    def on_epoch(epoch, params, rec):
        if every and (epoch + 1) % every == 0:
            save_checkpoint(out / f"epoch{epoch + 1:04d}.ckpt", params, spec.head, extra)

    try:
        params, history = train(spec, train_data, test_data, on_epoch=on_epoch)
    except TrainingAborted as exc:
        exc.history.write_csv(out / "history.csv")
        save_checkpoint(out / "last_good.ckpt", exc.params, spec.head, extra)
        print(f"numeric failure: {exc}; last good parameters in {out / 'last_good.ckpt'}", file=sys.stderr)
        return EXIT_NUMERIC
    history.write_csv(out / "history.csv")
    save_checkpoint(out / "model.ckpt", params, spec.head, extra)
    last = history.records[-1]
    print(f"{out}: clean_acc={last.clean_acc:.4f} robust_acc={last.robust_acc:.4f} train_loss={last.train_loss:.4f}")
    return EXIT_OK


# -- attack / eval -------------------------------------------------------------------------

def _load_model(path):
    params, head, header = load_checkpoint(path)
    cfg_values = {k[4:]: v for k, v in header.items() if k.startswith("cfg.")}
    return Model(params, head), cfg_values


def _test_set(cfg_values: dict, args):
    if not cfg_values:
        raise UsageError("checkpoint carries no dataset description")
    values = ExperimentConfig.parse("\n".join(f"{k} = {v}" for k, v in cfg_values.items())).values
    _, test = load_data(values)
    if args.limit is not None:
        test = test.subset(np.arange(min(args.limit, len(test))))
    return test, values


def _attack_spec(args, model: Model) -> AttackSpec:
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    if args.adaptive and not model.head.hypersphere:
        raise UsageError("--adaptive needs a checkpoint trained with an he or m-he head")
    kind = "margin-ce" if args.adaptive else args.objective
    objective = ObjectiveSpec(kind, model.head, fn_in_objective=args.fn_in_objective)
    momentum = args.momentum if args.attack == "mim" else None
    rand_init = args.attack in ("pgd", "nes", "spsa") and args.eps > 0
    step = args.eps if args.attack == "fgsm" else args.step
    return AttackSpec(norm=args.norm, eps=args.eps, step=step, steps=1 if args.attack == "fgsm" else args.steps,
                      rand_init=rand_init, restarts=args.restarts, objective=objective, momentum=momentum)


def cmd_attack(args) -> int:
    model, cfg_values = _load_model(args.checkpoint)
    test, values = _test_set(cfg_values, args)
    spec = _attack_spec(args, model)
    seed = values["seed"] if args.seed is None else args.seed
    rng = split_rng(seed, f"cli/attack/{args.attack}")
    dumped = []

    def run(m, x, y, r):
        if args.attack == "fgsm":
            adv = fgsm(m, spec, x, y)
        elif args.attack in ("nes", "spsa"):
            est = GradEstimatorSpec(args.attack, args.q, args.sigma, seed)
            adv = zo_attack(m, spec, est, x, y, r)
        else:
            adv = iterative_attack(m, spec, x, y, r)
        if args.dump_adv:
            dumped.append(adv)
        return adv

    acc = evaluate(model, None, test, attack_fn=run, rng=rng)
    result = {"attack": args.attack, "norm": spec.norm, "eps": spec.eps, "step": spec.step,
              "steps": spec.steps, "restarts": spec.restarts, "momentum": spec.momentum,
              "objective": spec.objective.kind, "adaptive": bool(args.adaptive),
              "fn_in_objective": bool(args.fn_in_objective), "seed": seed, "n": len(test),
              "robust_acc": acc, "checkpoint": str(args.checkpoint), "version": VERSION}
    print(f"{args.attack}-{spec.steps} eps={spec.eps:g} robust_acc={acc:.4f}"
          + (" (adaptive)" if args.adaptive else ""))
    if args.out:
        out = _prepare_out(args.out)
        _write_json(out / "attack.json", result)
        if dumped:
            write_blobs(out / "adversarial.ckpt", {"kind": "adv-batch", "version": VERSION},
                        {"inputs": np.concatenate(dumped), "labels": test.labels.astype(np.float64)})
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg_values = _load_model(args.checkpoint)
    test, values = _test_set(cfg_values, args)
    name = "clean"
    if args.corruption:
        test = corrupt(test, CorruptionSpec(args.corruption, args.severity), seed=values["seed"])
        name = f"{args.corruption}-{args.severity}"
    acc = evaluate(model, None, test)
    print(f"{name} accuracy={acc:.4f}")
    if args.out:
        out = _prepare_out(args.out)
        _write_json(out / "eval.json", {"data": name, "accuracy": acc, "n": len(test),
                                        "checkpoint": str(args.checkpoint), "version": VERSION})
    return EXIT_OK


# -- verify / report -------------------------------------------------------------------------

def cmd_verify(args) -> int:
    if args.selector != "all" and args.selector not in SUITES:
        raise UsageError(f"selector must be one of {', '.join(SUITES + ('all',))}")
    results = run_suite(args.selector, seed=args.seed, trials=args.trials)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        op = r.detail.get("comparison", "<")
        print(f"{status} {r.suite:<10} {r.name:<40} {r.value:.3e} ({op} {r.threshold:g})")
    if args.out:
        out = _prepare_out(args.out)
        _write_json(out / f"verify-{args.selector}.json",
                    {"selector": args.selector, "seed": args.seed, "version": VERSION,
                     "results": [r.to_dict() for r in results]})
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"identity failed: {r.suite}/{r.name} deviation {r.value!r}", file=sys.stderr)
    return EXIT_ASSERT if failed else EXIT_OK


def _read_resolved(path: Path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def report_rows(dirs) -> list:
    rows = []
    for d in dirs:
        d = Path(d)
        hist, conf = d / "history.csv", d / "config.resolved"
        for f in (hist, conf):
            if not f.is_file():
                raise UsageError(f"{d}: missing {f.name}")
        with open(hist, newline="") as fh:
            records = list(csv.DictReader(fh))
        if not records:
            raise UsageError(f"{hist}: no epoch records")
        c = _read_resolved(conf)
        last = records[-1]
        eval_eps = c.get("eval.eps", "none")
        rows.append({"run": d.name, "framework": c.get("framework", ""), "he": c.get("head.mode", ""),
                     "clean_acc": last["clean_acc"], "robust_acc": last["robust_acc"],
                     "attack": f"pgd-{c.get('eval.steps', '')}" if c.get("eval.attack") == "pgd" else "none",
                     "eps": c.get("attack.eps", "") if eval_eps == "none" else eval_eps,
                     "steps": c.get("eval.steps", "")})
    return rows


def format_table(rows) -> str:
    cells = [list(REPORT_COLUMNS)] + [[_short(r[c]) for c in REPORT_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells) + "\n"


def _short(v) -> str:
    try:
        f = float(v)
    except (TypeError, ValueError):
        return str(v)
    return str(v) if str(v).isdigit() else f"{f:.4f}"


def cmd_report(args) -> int:
    if not args.dirs:
        raise UsageError("report needs at least one run directory")
    rows = report_rows(args.dirs)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    text = format_table(rows)
    print(text, end="")
    if args.out:
        out = _prepare_out(args.out)
        (out / "report.csv").write_text(buf.getvalue())
        (out / "report.txt").write_text(text)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sphere-at", description="Adversarial training with hypersphere embedding.")
    ap.add_argument("--version", action="version", version=VERSION)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("config")
    p.add_argument("--out", help="override out_dir")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="robust accuracy of a checkpoint under an attack")
    p.add_argument("checkpoint")
    p.add_argument("--attack", choices=("fgsm", "bim", "pgd", "mim", "nes", "spsa"), default="pgd")
    p.add_argument("--norm", choices=("inf", "2"), default="inf")
    p.add_argument("--eps", type=float, default=0.08)
    p.add_argument("--step", type=float, default=0.02)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--momentum", type=float, default=1.0)
    p.add_argument("--objective", choices=("ce-vs-label", "cw-inf"), default="ce-vs-label")
    p.add_argument("--adaptive", action="store_true", help="attack the training loss with s and m")
    p.add_argument("--fn-in-objective", action="store_true", help="read a standard head through FN")
    p.add_argument("--q", type=int, default=128)
    p.add_argument("--sigma", type=float, default=1e-3)
    p.add_argument("--seed", type=int)
    p.add_argument("--limit", type=int, help="attack only the first N test examples")
    p.add_argument("--dump-adv", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="clean (or corrupted) accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--corruption", choices=("gaussian-noise", "brightness", "contrast", "pixelate"))
    p.add_argument("--severity", type=int, default=1)
    p.add_argument("--limit", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="check the gradient identities")
    p.add_argument("selector", help=f"one of {', '.join(SUITES + ('all',))}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="merge run directories into a comparison table")
    p.add_argument("dirs", nargs="*")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_cap():
            return args.func(args)
    except (ConfigError, UsageError, CheckpointError, IdxParseError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
