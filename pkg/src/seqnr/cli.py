"""``seqnr`` command line.

Exit codes: 0 success, 1 contract violation (bad value, degenerate input,
divergence, missing ground truth, failed check), 2 I/O or parse error
(including unknown flags). stdout carries data only; diagnostics and the
resolved-config echo go to stderr.
"""

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from seqnr import checks, data, gpa, model, plotting, trainer
from seqnr import objective as obj
from seqnr.errors import ContractViolation, DataFormatError

THREADS_ENV = "SEQNR_THREADS"


def thread_cap():
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ContractViolation(f"{THREADS_ENV} must be a positive integer (got {raw!r})") from None
    if n < 1:
        raise ContractViolation(f"{THREADS_ENV} must be a positive integer (got {raw!r})")
    return n


def _err(msg):
    print(msg, file=sys.stderr)


def _echo_config(name, cfg):
    _err(f"resolved config ({name}): " + json.dumps(cfg, sort_keys=True))


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _svg_path(path):
    return str(Path(path).with_suffix(".svg"))


# -- gen --------------------------------------------------------------------


def cmd_gen(args):
    cfg = data.SyntheticConfig(frames=args.frames, points=args.points, basis_count=args.basis,
                               coefficient_frequencies=args.freqs,
                               camera_smoothness=args.camera_smoothness,
                               noise_sigma=args.noise, seed=args.seed)
    _echo_config("gen", {**cfg.__dict__, "sequences": args.sequences})
    ds = data.generate(cfg, args.sequences)
    data.save_dataset(ds, args.out)
    summary = {"path": args.out, "sequences": len(ds), "frames": cfg.frames,
               "points": cfg.points, "rank_bound": min(cfg.basis_count, cfg.frames, 3 * cfg.points)}
    print(json.dumps(summary))
    return 0


# -- train ------------------------------------------------------------------


def _read_config(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or set(doc) - {"model", "train"}:
        raise DataFormatError(f"{path}: expected an object with optional 'model' and 'train' sections")
    return doc


_TRAIN_FLAGS = {"steps": "steps", "seed": "seed", "lr": "learning_rate",
                "sequence_length": "sequence_length", "batch_size": "batch_size",
                "log_every": "log_every", "ablate": "ablation_mode"}


def _train_overrides(args):
    return {field: getattr(args, flag) for flag, field in _TRAIN_FLAGS.items()
            if getattr(args, flag, None) is not None}


def cmd_train(args):
    ds = data.load_dataset(args.data)
    resume = None
    if args.resume:
        resume = trainer.load_checkpoint(args.resume)
        mcfg = resume.model_config
        tdict = resume.train_config.to_dict()
    else:
        doc = _read_config(args.config)
        mdict = {"keypoints": ds.points, **doc.get("model", {})}
        mcfg = model.ModelConfig.from_dict(mdict)
        tdict = dict(doc.get("train", {}))
    tdict.update(_train_overrides(args))
    tdict["checkpoint_path"] = args.out
    tdict["metrics_csv_path"] = args.log
    tcfg = trainer.TrainConfig.from_dict(tdict)
    _echo_config("train", {"model": mcfg.to_dict(), "train": tcfg.to_dict(),
                           "resume": args.resume})

    def progress(row):
        _err("step {} total {:.6g} reprojection {:.6g} nuclear {:.6g}".format(*row[:4]))

    trainer.train(ds, mcfg, tcfg, resume=resume, progress=progress)
    steps, totals = _read_loss_history(args.log)
    plotting.line_chart(_svg_path(args.log), {"total": (steps, totals)},
                        f"training loss ({tcfg.ablation_mode})", "step", "total loss", log_y=True)
    return 0


def _read_loss_history(path):
    with open(path, "r", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [int(r["step"]) for r in rows], [float(r["total"]) for r in rows]


# -- eval -------------------------------------------------------------------


def cmd_eval(args):
    ckpt = trainer.load_checkpoint(args.ckpt)
    ds = data.load_dataset(args.data)
    flip = obj.BEST_OF_FLIP if args.flip else obj.NO_FLIP
    report = trainer.evaluate_checkpoint(ckpt, ds, flip)
    sys.stdout.write(trainer.report_csv(report))
    return 0


# -- align ------------------------------------------------------------------


def cmd_align(args):
    ds = data.load_dataset(args.data)
    ds.require_ground_truth()
    _echo_config("align", {"tol": args.tol, "max_iter": args.max_iter})
    aligned = []
    rows = io.StringIO()
    writer = csv.writer(rows, lineterminator="\n")
    writer.writerow(("sequence", "iteration", "residual"))
    histories = {}
    for i, seq in enumerate(ds.sequences):
        try:
            res = gpa.gpa_align(seq.shapes, args.tol, args.max_iter)
        except ContractViolation as exc:
            raise type(exc)(f"sequence {i}: {exc}") from None
        for k, r in enumerate(res.residual_history):
            writer.writerow((i, k, repr(float(r))))
        histories[f"sequence {i}"] = (range(len(res.residual_history)), list(res.residual_history))
        aligned.append(data.Sequence(seq.observations, res.aligned, None,
                                     {**seq.metadata, "aligned": True,
                                      "gpa_iterations": int(res.iterations)}))
    data.save_dataset(data.Dataset(aligned), args.out)
    residual_path = args.residuals or str(Path(args.out).with_suffix("")) + "_residuals.csv"
    _write_text(residual_path, rows.getvalue())
    plotting.line_chart(_svg_path(residual_path), histories, "alignment residual",
                        "iteration", "residual", log_y=True)
    sys.stdout.write(rows.getvalue())
    return 0


# -- gradcheck --------------------------------------------------------------


def cmd_gradcheck(args):
    scope = args.scope
    if scope[0] == "all" and len(scope) == 1:
        rows = checks.run("all", step=args.eps, seed=args.seed)
    elif scope[0] == "op" and len(scope) == 2:
        try:
            rows = checks.run("op", scope[1], step=args.eps, seed=args.seed)
        except KeyError:
            names = list(checks.PRIMITIVES) + list(checks.COMPOSITES) + ["gpa"]
            raise ContractViolation(f"unknown check {scope[1]!r}; choose from {', '.join(names)}") from None
    else:
        raise ContractViolation("--scope takes 'all' or 'op NAME'")
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(("name", "kind", "value", "threshold", "passed", "detail"))
    for r in rows:
        out.writerow((r.name, r.kind, f"{r.value:.3e}", f"{r.threshold:g}", int(r.passed), r.detail))
    failed = [r.name for r in rows if not r.passed]
    if failed:
        _err("failed: " + ", ".join(failed))
        return 1
    return 0


# -- ablate -----------------------------------------------------------------


def _ablation_run(job):
    ds_path, mdict, tdict, threads = job
    with threadpool_limits(threads):
        ds = data.load_dataset(ds_path)
        mcfg = model.ModelConfig.from_dict(mdict)
        tcfg = trainer.TrainConfig.from_dict(tdict)
        ckpt = trainer.train(ds, mcfg, tcfg)
        return trainer.evaluate_checkpoint(ckpt, ds)["aggregate"]


def cmd_ablate(args):
    ds = data.load_dataset(args.data)
    ds.require_ground_truth()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = _read_config(args.config)
    mdict = {"keypoints": ds.points, **doc.get("model", {})}
    base = dict(doc.get("train", {}))
    base.update(_train_overrides(args))
    modes = args.modes.split(",") if args.modes else list(trainer.ABLATION_MODES)
    jobs = []
    for mode in modes:
        t = {**base, "ablation_mode": mode,
             "checkpoint_path": str(out / f"{mode}.ckpt.json"),
             "metrics_csv_path": str(out / f"{mode}.csv")}
        trainer.TrainConfig.from_dict(t)
        jobs.append((args.data, model.ModelConfig.from_dict(mdict).to_dict(), t, 1))
    _echo_config("ablate", {"model": jobs[0][1], "train": {**base}, "modes": modes})
    workers = min(thread_cap(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_run, jobs))
    else:
        results = [_ablation_run(j) for j in jobs]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("mode", "mpjpe", "stress", "e3d"))
    for mode, agg in zip(modes, results):
        writer.writerow((mode, repr(agg["mpjpe"]), repr(agg["stress"]), repr(agg["e3d"])))
    _write_text(out / "comparison.csv", buf.getvalue())
    histories = {m: _read_loss_history(out / f"{m}.csv") for m in modes}
    plotting.line_chart(out / "loss.svg", histories, "training loss by mode", "step",
                        "total loss", log_y=True)
    sys.stdout.write(buf.getvalue())
    return 0


# -- params -----------------------------------------------------------------


def cmd_params(args):
    doc = _read_config(args.config)
    mdict = {**doc.get("model", {})}
    if args.points is not None:
        mdict["keypoints"] = args.points
    if "keypoints" not in mdict:
        raise ContractViolation("params needs --points or a config with model.keypoints")
    mcfg = model.ModelConfig.from_dict(mdict)
    if args.count:
        print(mcfg.parameter_count())
        return 0
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(("name", "shape", "size"))
    for name, shape in mcfg.parameter_shapes().items():
        out.writerow((name, "x".join(map(str, shape)) or "scalar", int(np.prod(shape))))
    return 0


# -- parser -----------------------------------------------------------------


def _add_train_flags(p, with_ablate=True):
    p.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--sequence-length", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--log-every", type=int)
    if with_ablate:
        p.add_argument("--ablate", choices=trainer.ABLATION_MODES, help="ablation mode (default none)")


def build_parser():
    parser = argparse.ArgumentParser(prog="seqnr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--points", type=int, default=15)
    p.add_argument("--basis", type=int, default=3)
    p.add_argument("--freqs", type=int, default=2)
    p.add_argument("--camera-smoothness", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequences", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", required=True, help="metrics CSV path (an SVG chart is written beside it)")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; CSV to stdout")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--flip", action="store_true", help="score the depth-flipped prediction too, keep the better")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("align", help="align ground-truth shapes of every sequence")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="aligned dataset path")
    p.add_argument("--residuals", help="residual CSV path (default: <out>_residuals.csv)")
    p.add_argument("--tol", type=float, default=gpa.DEFAULT_TOLERANCE)
    p.add_argument("--max-iter", type=int, default=gpa.DEFAULT_MAX_ITERATIONS)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", nargs="+", default=["all"], metavar="all|op NAME")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train once per ablation mode and compare")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--modes", help="comma-separated subset of modes (default: all six)")
    _add_train_flags(p, with_ablate=False)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="parameter inventory or count")
    p.add_argument("--points", type=int)
    p.add_argument("--config")
    p.add_argument("--count", action="store_true")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(thread_cap()):
            return args.func(args)
    except (DataFormatError, OSError) as exc:
        _err(f"error: {exc}")
        return 2
    except ContractViolation as exc:
        _err(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
