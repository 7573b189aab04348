"""Command-line driver: ``maskd <command> [flags]``.

Every command reads and writes artifacts under ``--out`` (default ``$MASKD_OUT``
or ``./maskd_out``). Settings are layered: built-in defaults, then the run's
``run.json``, then ``--config FILE``, then explicit flags. Failures print a
single JSON line on stderr; exit status is 1 for runtime errors and 2 for
usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import gradcheck, io, pipeline
from .core import ReceptiveTokens, WeightingNet
from .pipeline import MODES, Dataset, DistillConfig, Lab, Split, ToyConfig

RUN_FILE = "run.json"
DATA_KEYS = ("H", "W", "n_classes", "noise", "n_train", "n_val", "data_seed")
TEACHER_KEYS = ("teacher_widths", "teacher_iters", "teacher_lr", "teacher_batch", "teacher_seed")
PER_INVOCATION = ("seed", "mode")

# artifact -> the command that writes it
PRODUCERS = {
    "data.ckpt": "gen-data",
    "teacher.ckpt": "train-teacher",
    "tokens.ckpt": "learn-masks",
}


class CLIError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1, **extra):
        super().__init__(message)
        self.kind, self.code, self.extra = kind, code, extra


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _report(CLIError("usage", message, 2))
        raise SystemExit(2)


def _report(err: CLIError) -> None:
    payload = {"error": err.kind, "message": str(err), **err.extra}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


# ---------------------------------------------------------------------------
# argument parsing

def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=None, help="artifact directory (default: $MASKD_OUT or ./maskd_out)")
    p.add_argument("--seed", type=int, default=None,
                   help="seed for this command's randomness (data, teacher init, or token/student init)")
    p.add_argument("--config", default=None, help="JSON file with 'data' and/or 'distill' sections")
    p.add_argument("--workers", type=int, default=1, help="threads for evaluation only (default: 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")


def _add_data(p: argparse.ArgumentParser) -> None:
    d = ToyConfig()
    g = p.add_argument_group("data")
    g.add_argument("--size", type=int, dest="size", help=f"image height and width (default: {d.H})")
    g.add_argument("--classes", type=int, dest="n_classes", help=f"classes incl. background (default: {d.n_classes})")
    g.add_argument("--noise", type=float, help=f"pixel noise std (default: {d.noise})")
    g.add_argument("--n-train", type=int, dest="n_train", help=f"training images (default: {d.n_train})")
    g.add_argument("--n-val", type=int, dest="n_val", help=f"validation images (default: {d.n_val})")


def _add_teacher(p: argparse.ArgumentParser) -> None:
    d = ToyConfig()
    g = p.add_argument_group("teacher")
    g.add_argument("--teacher-iters", type=int, dest="teacher_iters", help=f"(default: {d.teacher_iters})")
    g.add_argument("--teacher-lr", type=float, dest="teacher_lr", help=f"(default: {d.teacher_lr})")
    g.add_argument("--teacher-widths", type=_int_list, dest="teacher_widths",
                   help=f"backbone widths (default: {','.join(map(str, d.teacher_widths))})")
    g.add_argument("--student-widths", type=_int_list, dest="student_widths",
                   help=f"student backbone widths (default: {','.join(map(str, d.student_widths))})")


def _add_distill(p: argparse.ArgumentParser, mode: bool = False) -> None:
    d = DistillConfig()
    g = p.add_argument_group("distillation")
    g.add_argument("--T", type=int, dest="T", help=f"number of receptive tokens (default: {d.T})")
    g.add_argument("--mu", type=float, help=f"diversity loss factor (default: {d.mu:g})")
    g.add_argument("--lambda1", type=float, help=f"distillation loss factor (default: {d.lambda1:g})")
    g.add_argument("--lambda2", type=float, help=f"auxiliary loss factor (default: {d.lambda2:g})")
    g.add_argument("--stage1-iters", type=int, dest="stage1_iters",
                   help=f"token learning iterations (default: {d.stage1_iters})")
    g.add_argument("--stage2-iters", type=int, dest="stage2_iters",
                   help=f"student iterations (default: {d.stage2_iters})")
    g.add_argument("--batch-size", type=int, dest="batch_size", help=f"(default: {d.batch_size})")
    g.add_argument("--warmup-fraction", type=float, dest="warmup_fraction",
                   help=f"share of Stage-2 before masks are customized (default: {d.warmup_fraction:g})")
    g.add_argument("--n-evals", type=int, dest="n_evals", help=f"evaluations logged per run (default: {d.n_evals})")
    if mode:
        g.add_argument("--mode", choices=MODES, help=f"distillation loss (default: {d.mode})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskd", description="Masked-feature distillation laboratory on a toy segmentation task.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_common(p)
        return p

    p = command("gen-data", "generate the synthetic dataset into data.ckpt")
    _add_data(p)
    _add_teacher(p)

    p = command("train-teacher", "train the teacher network (writes teacher.ckpt)")
    _add_teacher(p)

    p = command("learn-masks", "Stage 1: learn receptive tokens and mask weights (writes tokens.ckpt)")
    _add_distill(p)

    p = command("distill", "Stage 2: train a student with the chosen distillation loss")
    _add_distill(p, mode=True)

    p = command("eval", "evaluate a trained network on the validation split")
    p.add_argument("--net", default="teacher", help="teacher, masked-teacher, or student_<mode> (default: teacher)")

    p = command("export-masks", "write learned masks for one validation image as PGM files")
    p.add_argument("--index", type=int, default=0, help="validation image index (default: 0)")

    p = command("token-sweep", "student accuracy against the number of tokens (T=0 is mimic)")
    _add_distill(p)
    p.add_argument("--T-values", type=_int_list, default=[0, 2, 4, 6], dest="T_values",
                   help="comma-separated token counts (default: 0,2,4,6)")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds, 0..n-1 (default: 1)")

    p = command("gradcheck", "finite-difference check of every primitive and loss")
    p.add_argument("--trials", type=int, default=100, help="random draws per op (default: 100)")
    p.add_argument("--ops", type=_str_list, default=None, help="comma-separated subset of ops (default: all)")
    p.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL,
                   help=f"maximum relative error (default: {gradcheck.DEFAULT_TOL:g})")

    p = command("ablate", "component ablation table across modes and seeds")
    _add_distill(p)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, 0..n-1 (default: 5)")
    p.add_argument("--modes", type=_str_list, default=list(MODES),
                   help=f"comma-separated modes (default: {','.join(MODES)})")
    return parser


# ---------------------------------------------------------------------------
# configuration and artifacts

def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get("MASKD_OUT") or "maskd_out")


def _flag_values(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def resolve_config(args, out: Path) -> tuple[ToyConfig, DistillConfig]:
    layers = [{"data": {}, "distill": {}}]
    run_file = out / RUN_FILE
    if run_file.exists() and args.command != "gen-data":
        run = _load_config_file(run_file)
        for key in PER_INVOCATION:  # a later command should not inherit an earlier one's choice
            run["distill"].pop(key, None)
        layers.append(run)
    if args.config:
        layers.append(_load_config_file(Path(args.config)))
    data_flags = _flag_values(args, ("n_classes", "noise", "n_train", "n_val") + TEACHER_KEYS + ("student_widths",))
    if getattr(args, "size", None) is not None:
        data_flags.update(H=args.size, W=args.size)
    distill_flags = _flag_values(args, [f.name for f in fields(DistillConfig)])
    layers.append({"data": data_flags, "distill": distill_flags})

    data, dist = {}, {}
    for layer in layers:
        data.update(layer.get("data", {}))
        dist.update(layer.get("distill", {}))
    if args.seed is not None:
        key = {"gen-data": "data_seed", "train-teacher": "teacher_seed"}.get(args.command)
        (data if key else dist)[key or "seed"] = args.seed
    try:
        return ToyConfig(**data), DistillConfig(**dist)
    except (TypeError, ValueError) as e:
        raise CLIError("config", str(e), 2) from None


def _load_config_file(path: Path) -> dict:
    if not path.exists():
        raise CLIError("config", f"config file not found: {path}", 2)
    try:
        return io.load_config(path)
    except io.ConfigError as e:
        raise CLIError("config", str(e), 2) from None


def _save_run(out: Path, toy: ToyConfig, cfg: DistillConfig) -> None:
    io.dump_config(pipeline.config_dict(toy, cfg), out / RUN_FILE)


def _require(out: Path, name: str, producer: str | None = None) -> Path:
    path = out / name
    if not path.exists():
        producer = producer or PRODUCERS[name]
        raise CLIError("missing_artifact", f"{path} not found; run `maskd {producer} --out {out}` first",
                       artifact=str(path), producer=producer)
    return path


def _load(path: Path) -> dict:
    try:
        return io.load_checkpoint(path)
    except io.CheckpointError as e:
        raise CLIError("checkpoint", f"{path}: {e}") from None


def _check_data_matches(out: Path, toy: ToyConfig) -> None:
    stored = _load_config_file(out / RUN_FILE)["data"] if (out / RUN_FILE).exists() else {}
    stale = [k for k in DATA_KEYS if k in stored and stored[k] != getattr(toy, k)]
    if stale:
        raise CLIError("config", f"data settings {', '.join(stale)} differ from the dataset in {out}; "
                                 "rerun gen-data with them", 2)


def _load_dataset(out: Path, toy: ToyConfig) -> Dataset:
    _check_data_matches(out, toy)
    t = _load(_require(out, "data.ckpt"))
    return Dataset(Split(t["train.images"], t["train.labels"].astype(np.int64)),
                   Split(t["val.images"], t["val.labels"].astype(np.int64)), toy.n_classes)


def _load_teacher(out: Path, toy: ToyConfig):
    net = pipeline.make_teacher(toy)
    try:
        net.load_state_dict(_load(_require(out, "teacher.ckpt")))
    except (KeyError, ValueError) as e:
        raise CLIError("checkpoint", f"teacher.ckpt does not fit the configured teacher: {e}") from None
    net.freeze()
    return net


def _load_lab(out: Path, toy: ToyConfig) -> Lab:
    data = _load_dataset(out, toy)
    teacher = _load_teacher(out, toy)
    features = pipeline.teacher_features(teacher, data.train.images)
    metrics = pipeline.evaluate(teacher, data.val, data.n_classes)
    return Lab(toy, data, teacher, features, metrics)


def _load_tokens(out: Path, toy: ToyConfig) -> tuple[ReceptiveTokens, WeightingNet]:
    t = _load(_require(out, "tokens.ckpt"))
    E = t["tokens.E"]
    tokens = ReceptiveTokens(E.shape[0], E.shape[1], E=E)
    weighting = WeightingNet(E.shape[1], E.shape[0], np.random.default_rng(0))
    weighting.load_state_dict(t, "weighting.")
    tokens.freeze()
    weighting.freeze()
    return tokens, weighting


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.6f}"


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args, out, toy, cfg):
    data = pipeline.build_dataset(toy)
    io.save_checkpoint({"train.images": data.train.images, "train.labels": data.train.labels.astype(np.float64),
                        "val.images": data.val.images, "val.labels": data.val.labels.astype(np.float64)},
                       out / "data.ckpt")
    _save_run(out, toy, cfg)
    fg = float(np.mean(data.train.labels > 0))
    print(f"gen-data train={len(data.train)} val={len(data.val)} size={toy.H}x{toy.W} "
          f"foreground={_fmt(fg)} -> {out / 'data.ckpt'}")


def cmd_train_teacher(args, out, toy, cfg):
    data = _load_dataset(out, toy)
    res = pipeline.train_teacher(data, pipeline.make_teacher(toy), toy.teacher_iters, toy.teacher_lr,
                                 toy.teacher_batch, toy.teacher_seed, workers=args.workers)
    io.save_checkpoint(res.net.state_dict(), out / "teacher.ckpt")
    io.write_metrics(res.log, out / "teacher_metrics.csv")
    _save_run(out, toy, cfg)
    print(f"train-teacher accuracy={_fmt(res.metrics['pixel_accuracy'])} mIoU={_fmt(res.metrics['mIoU'])} "
          f"-> {out / 'teacher.ckpt'}")


def cmd_learn_masks(args, out, toy, cfg):
    lab = _load_lab(out, toy)
    res = pipeline.learn_tokens(lab.teacher, lab.data, cfg, lab.features, args.workers)
    io.save_checkpoint({**res.tokens.state_dict("tokens."), **res.weighting.state_dict("weighting.")},
                       out / "tokens.ckpt")
    io.write_metrics(res.log, out / "stage1_metrics.csv")
    _save_run(out, toy, cfg)
    masked = pipeline.evaluate(pipeline.MaskedTeacher(lab.teacher, res.tokens, res.weighting), lab.data.val,
                               lab.data.n_classes, workers=args.workers)
    _, task, div = res.trace[-1] if res.trace else (0, float("nan"), float("nan"))
    print(f"learn-masks T={cfg.T} task={_fmt(task)} div={_fmt(div)} "
          f"teacher={_fmt(lab.teacher_metrics['pixel_accuracy'])} masked={_fmt(masked['pixel_accuracy'])} "
          f"-> {out / 'tokens.ckpt'}")


def cmd_distill(args, out, toy, cfg):
    lab = _load_lab(out, toy)
    tokens = weighting = None
    if cfg.mode in ("region_learned", "weighted", "customized"):
        tokens, weighting = _load_tokens(out, toy)
        if tokens.n_tokens != cfg.T:
            raise CLIError("config", f"tokens.ckpt holds {tokens.n_tokens} tokens but T={cfg.T}; "
                                     "rerun learn-masks or pass a matching --T", 2)
    res = pipeline.run_student(lab, cfg, tokens, weighting, args.workers)
    name = f"student_{cfg.mode}"
    io.save_checkpoint({**res.student.state_dict("student."), **res.phi.state_dict("phi.")}, out / f"{name}.ckpt")
    io.write_metrics(res.log, out / f"{name}_metrics.csv")
    _save_run(out, toy, cfg)
    print(f"distill mode={cfg.mode} seed={cfg.seed} accuracy={_fmt(res.metrics['pixel_accuracy'])} "
          f"mIoU={_fmt(res.metrics['mIoU'])} -> {out / (name + '.ckpt')}")


def cmd_eval(args, out, toy, cfg):
    data = _load_dataset(out, toy)
    if args.net == "teacher":
        net = _load_teacher(out, toy)
    elif args.net == "masked-teacher":
        net = pipeline.MaskedTeacher(_load_teacher(out, toy), *_load_tokens(out, toy))
    elif args.net.startswith("student_") and args.net[len("student_"):] in MODES:
        net = pipeline.make_student(toy, 0)
        net.load_state_dict(_load(_require(out, f"{args.net}.ckpt", f"distill --mode {args.net[8:]}")), "student.")
        net.freeze()
    else:
        raise CLIError("usage", f"unknown --net {args.net!r}; use teacher, masked-teacher or student_<mode>", 2)
    m = pipeline.evaluate(net, data.val, data.n_classes, workers=args.workers)
    record = {"net": args.net, "pixel_accuracy": m["pixel_accuracy"], "mIoU": m["mIoU"],
              "per_class_IoU": [None if v != v else v for v in m["per_class_IoU"]]}
    (out / f"eval_{args.net}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"eval net={args.net} accuracy={_fmt(m['pixel_accuracy'])} mIoU={_fmt(m['mIoU'])}")


def cmd_export_masks(args, out, toy, cfg):
    data = _load_dataset(out, toy)
    if not 0 <= args.index < len(data.val):
        raise CLIError("usage", f"--index must lie in [0, {len(data.val)})", 2)
    teacher = _load_teacher(out, toy)
    tokens, _ = _load_tokens(out, toy)
    feat = pipeline.teacher_features(teacher, data.val.images[args.index:args.index + 1])
    masks = pipeline.learned_masks(tokens, feat[0])
    paths = io.export_mask_images(masks, toy.H, toy.W, out / "masks", stage=tokens.stage_id)
    print(f"export-masks index={args.index} count={len(paths)} -> {out / 'masks'}")


def cmd_token_sweep(args, out, toy, cfg):
    lab = _load_lab(out, toy)
    rows = pipeline.token_sweep(lab, cfg, args.T_values, range(args.seeds), args.workers)
    _write_rows(out / "token_sweep.csv", ["T", "accuracy"] + [f"seed{s}" for s in range(args.seeds)],
                [[r["T"], repr(r["accuracy"])] + [repr(v) for v in r["values"]] for r in rows])
    for r in rows:
        print(f"token-sweep T={r['T']} accuracy={_fmt(r['accuracy'])}")


def cmd_gradcheck(args, out, toy, cfg):
    try:
        rows = gradcheck.run(args.ops, trials=args.trials, seed=args.seed or 0)
    except KeyError as e:
        raise CLIError("usage", e.args[0], 2) from None
    worst = 0.0
    for r in rows:
        ok = r["max_rel_err"] <= args.tol
        worst = max(worst, r["max_rel_err"])
        print(f"{r['op']:<24} max_rel_err={r['max_rel_err']:.3e} trials={r['trials']} {'ok' if ok else 'FAIL'}")
    print(f"gradcheck ops={len(rows)} worst={worst:.3e} tol={args.tol:g}")
    return 0 if worst <= args.tol else 1


def cmd_ablate(args, out, toy, cfg):
    unknown = [m for m in args.modes if m not in MODES]
    if unknown:
        raise CLIError("usage", f"unknown mode(s): {', '.join(unknown)}", 2)
    lab = _load_lab(out, toy)
    results = pipeline.ablate(lab, cfg, range(args.seeds), tuple(args.modes), args.workers)
    summary = pipeline.summarize(results)
    _write_rows(out / "ablation.csv", ["mode", "mean", "std"] + [f"seed{s}" for s in range(args.seeds)],
                [[r["mode"], repr(r["mean"]), repr(r["std"])] + [repr(v) for v in r["values"]] for r in summary])
    width = max(len(m) for m in args.modes)
    for r in summary:
        print(f"{r['mode']:<{width}}  {100 * r['mean']:6.2f} ± {100 * r['std']:.2f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "learn-masks": cmd_learn_masks,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "export-masks": cmd_export_masks,
    "token-sweep": cmd_token_sweep,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    out = _out_dir(args)
    try:
        if args.workers < 1:
            raise CLIError("usage", "--workers must be at least 1", 2)
        toy, cfg = resolve_config(args, out)
        if args.command != "gradcheck":
            io.ensure_dir(out)
        return COMMANDS[args.command](args, out, toy, cfg) or 0
    except CLIError as e:
        _report(e)
        return e.code
    except pipeline.TrainingDiverged as e:
        _report(CLIError("diverged", str(e)))
        return 1
    except (ValueError, OSError) as e:
        _report(CLIError(type(e).__name__, str(e)))
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
