"""``flowlab`` command line: datagen, train, finetune, eval, profile, render.

Exit status: 0 success, 2 config error, 3 data error, 4 training diverged,
5 all-pairs budget exceeded.  ``FLOWLAB_ALLPAIRS_BUDGET`` overrides the
all-pairs element budget.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys

import numpy as np

from . import flowio, metrics
from .arch import build_model, checkpoint
from .config import ConfigError, ExperimentConfig, from_dict, load_config, parse_mixture
from .data import (
    IN_DISTRIBUTION,
    DatasetMixture,
    build_splits,
    draw,
    motion_histogram,
    overlap_coefficient,
    regenerate,
    write_manifest,
)
from .data.splits import MAGNITUDE_EDGES
from .seeding import stream
from .tensor import BudgetExceeded

log = logging.getLogger("flowlab")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_BUDGET = 5


class DataError(RuntimeError):
    pass


def _resolution(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 64x96, got {text!r}") from None


def _resolutions(text):
    return [_resolution(t) for t in text.split(",") if t.strip()]


def _outdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise DataError(f"output directory {path} is not writable")
    return path


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=float)


def _config(args) -> ExperimentConfig:
    if args.config is None:
        return from_dict({"schema_version": 1}, args.seed)
    if not os.path.exists(args.config):
        raise ConfigError(f"config file {args.config} does not exist")
    return load_config(args.config, args.seed)


def _sample_set(cfg, section, role):
    """Fixed evaluation samples described by a config section."""
    sec = cfg.section(section)
    mix = parse_mixture(sec.get("mixture", {"sintel": 1.0}))
    size = tuple(sec.get("size", (64, 96)))
    seed = int(stream(cfg.seed, "split", role).integers(0, 2**62))
    return [draw(mix, seed, k, size)[1] for k in range(int(sec.get("count", 8)))]


def _eval_sets(cfg):
    return {"val": _sample_set(cfg, "eval", "eval")} if "eval" in cfg.raw else None


# ---------------------------------------------------------------------------
# datagen
# ---------------------------------------------------------------------------

def cmd_datagen(args):
    cfg = _config(args)
    sec = cfg.section("data", {})
    count = args.count if args.count is not None else int(sec.get("count", 8))
    size = tuple(sec.get("size", (64, 96)))
    mix = parse_mixture(sec.get("mixture", {"sintel": 1.0}))
    out = _outdir(args.out)
    path = os.path.join(out, "manifest.json")
    doc = write_manifest(path, mix, cfg.seed, count, size)
    if sec.get("materialize", False) or args.materialize:
        for k in range(count):
            s = regenerate(doc, k)
            flowio.save_flo(os.path.join(out, f"{k:06d}.flo"), flowio.FlowField.from_array(s.flow, s.valid))
            for i, frame in ((1, s.frame1), (2, s.frame2)):
                img = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
                with open(os.path.join(out, f"{k:06d}_img{i}.png"), "wb") as fh:
                    fh.write(flowio.encode_png(img))
    hist = motion_histogram((regenerate(doc, k) for k in range(count)), MAGNITUDE_EDGES) if count else None
    _write_json(os.path.join(out, "histogram.json"), {
        "edges": [float(e) for e in MAGNITUDE_EDGES],
        "counts": [] if hist is None else hist.tolist(),
        "seed": cfg.seed,
    })
    print(f"wrote {count} manifest rows to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / finetune
# ---------------------------------------------------------------------------

def _train_one(cfg, plan, out, resume=None):
    from .train import pretrain, run

    out = _outdir(out)
    ckdir = os.path.join(out, "checkpoints")
    if resume:
        state = build_model(cfg.model, plan.seed)
        state, record = run(state, plan, eval_sets=_eval_sets(cfg), checkpoint_dir=ckdir, resume=resume)
    else:
        state, record = pretrain(cfg.model, plan, eval_sets=_eval_sets(cfg), checkpoint_dir=ckdir)
    checkpoint.save(os.path.join(out, "final.ckpt"), state, extra_meta={"seed": plan.seed, "plan": plan.fingerprint()})
    record.write(os.path.join(out, "record.jsonl"))
    _write_json(os.path.join(out, "run.json"), {
        "seed": plan.seed, "model": cfg.model.to_dict(), "plan": plan.to_dict(),
        "fingerprint": cfg.model.fingerprint(),
    })
    return state, record


def grid_runs(grid: dict):
    """Cartesian product of ``{field: [values]}`` as a list of override dicts."""
    keys = list(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def run_label(overrides):
    return ",".join(f"{k}={'off' if v is None else v}" for k, v in overrides.items())


GRID_COLUMNS = ("run", "seed", "steps", "final_loss", "mean_loss_last10%", "max_grad_norm", "val_aepe", "val_fl_all")


def grid_row(label, plan, record):
    steps = record.steps()
    tail = steps[-max(1, len(steps) // 10):] if steps else []
    evals = record.evals("val")
    return {
        "run": label,
        "seed": plan.seed,
        "steps": len(steps),
        "final_loss": steps[-1]["loss"] if steps else float("nan"),
        "mean_loss_last10%": float(np.mean([e["loss"] for e in tail])) if tail else float("nan"),
        "max_grad_norm": max((e["grad_norm"] for e in steps), default=float("nan")),
        "val_aepe": evals[-1]["aepe"] if evals else float("nan"),
        "val_fl_all": evals[-1]["fl_all"] if evals else float("nan"),
    }


def format_grid(rows):
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)
    lines = [" | ".join(GRID_COLUMNS)]
    lines += [" | ".join(cell(r[c]) for c in GRID_COLUMNS) for r in rows]
    return "\n".join(lines)


def cmd_train(args):
    cfg = _config(args)
    plan = cfg.plan("train")
    if "grid" not in cfg.raw:
        _, record = _train_one(cfg, plan, args.out, resume=args.checkpoint)
        steps = record.steps()
        print(f"trained {len(steps)} steps; final loss {steps[-1]['loss']:.4f}" if steps else "no steps run")
        return EXIT_OK
    rows = []
    for overrides in grid_runs(cfg.raw["grid"]):
        label = run_label(overrides)
        try:
            p = plan.replace(**overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad grid entry {label}: {exc}") from exc
        _, record = _train_one(cfg, p, os.path.join(args.out, label))
        rows.append(grid_row(label, p, record))
        print(f"finished {label}")
    text = format_grid(rows)
    with open(os.path.join(args.out, "grid_report.txt"), "w") as fh:
        fh.write(text + "\n")
    _write_json(os.path.join(args.out, "grid_report.json"), rows)
    print(text)
    return EXIT_OK


def cmd_finetune(args):
    from .train import finetune

    cfg = _config(args)
    if not args.checkpoint:
        raise ConfigError("finetune needs --checkpoint")
    try:
        state, _, _ = checkpoint.load(args.checkpoint, expect_fingerprint=cfg.model.fingerprint())
    except checkpoint.CheckpointError as exc:
        raise ConfigError(str(exc)) from exc
    plan = cfg.plan("finetune")
    out = _outdir(args.out)
    eval_sets = {}
    if "splits" in cfg.raw:
        sp = cfg.raw["splits"]
        size = tuple(sp.get("size", plan.size))
        train, val = build_splits(sp.get("mode", IN_DISTRIBUTION), int(sp.get("n_train", 8)),
                                  int(sp.get("n_val", 8)), cfg.seed, size)
        eval_sets = {"train": train, "val": val}
        h_train, h_val = motion_histogram(train), motion_histogram(val)
        _write_json(os.path.join(out, "histograms.json"), {
            "edges": [float(e) for e in MAGNITUDE_EDGES], "train": h_train.tolist(), "val": h_val.tolist(),
            "overlap": overlap_coefficient(h_train, h_val), "mode": sp.get("mode", IN_DISTRIBUTION), "seed": cfg.seed,
        })
        from .data.splits import SMALL_MOTION
        if "mixture" not in (cfg.raw.get("finetune") or {}):
            plan = plan.replace(mixture=DatasetMixture.single(SMALL_MOTION, "train-split"), size=size)
    else:
        ev = _eval_sets(cfg)
        if ev:
            eval_sets.update(ev)
    ckdir = os.path.join(out, "checkpoints")
    state, record = finetune(state, plan, config=cfg.model, eval_sets=eval_sets, checkpoint_dir=ckdir)
    checkpoint.save(os.path.join(out, "final.ckpt"), state, extra_meta={"seed": plan.seed, "plan": plan.fingerprint()})
    record.write(os.path.join(out, "record.jsonl"))
    lines = ["step | split | aepe | fl_all"]
    for e in record.evals():
        aepe = f"({e['aepe']:.3f})" if e["split"] == "train" else f"{e['aepe']:.3f}"
        lines.append(f"{e['step']} | {e['split']} | {aepe} | {e['fl_all']:.2f}%")
    with open(os.path.join(out, "metrics.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / profile / render
# ---------------------------------------------------------------------------

def cmd_eval(args):
    cfg = _config(args)
    samples = _sample_set(cfg, "eval", "eval") if "eval" in cfg.raw else _sample_set(
        from_dict({"schema_version": 1, "eval": {}}, cfg.seed), "eval", "eval")
    if args.oracle:
        def predictor(s):
            return s.flow
        label = "ground-truth"
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --oracle)")
        try:
            predictor, _, _ = checkpoint.load(args.checkpoint)
        except checkpoint.CheckpointError as exc:
            raise DataError(str(exc)) from exc
        label = predictor.arch
    report = metrics.evaluate(predictor, samples)
    out = _outdir(args.out)
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(report.to_json())
    text = metrics.MetricReport.header() + "\n" + report.row(label)
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_profile(args):
    from .arch import ModelConfig
    from .profiler import ScalingReport, profile_arch

    cfg = _config(args)
    sec = cfg.section("profile", {})
    archs = args.arch or sec.get("archs", ["pwc", "raft"])
    resolutions = args.resolutions or [tuple(r) for r in sec.get("resolutions", [(64, 96), (128, 192), (256, 384)])]
    repeats = args.repeats if args.repeats is not None else int(sec.get("repeats", 20))
    base = cfg.raw.get("model") or {}
    rows = {}
    for arch in archs:
        mc = ModelConfig.from_dict({**{k: tuple(v) if isinstance(v, list) else v for k, v in base.items()}, "arch": arch})
        try:
            rows[arch] = profile_arch(mc, resolutions, repeats, seed=cfg.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    report = ScalingReport.build(rows)
    out = _outdir(args.out)
    with open(os.path.join(out, "scaling.txt"), "w") as fh:
        fh.write(report.table() + "\n")
    with open(os.path.join(out, "scaling.json"), "w") as fh:
        fh.write(report.to_json())
    print(report.table())
    return EXIT_OK


def colorwheel_image(size=151):
    """Self-test image: flow (x, y) relative to the centre, max magnitude = radius."""
    r = (size - 1) / 2
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    f = flowio.FlowField(xs - r, ys - r)
    return flowio.flow_to_color(f, max_magnitude=r)


def cmd_render(args):
    if args.wheel:
        img = colorwheel_image()
    else:
        if not args.flow:
            raise ConfigError("render needs a flow file (or --wheel)")
        try:
            if args.flow.endswith(".png"):
                with open(args.flow, "rb") as fh:
                    field = flowio.read_kitti_png(fh.read())
            else:
                field = flowio.load_flo(args.flow)
        except (OSError, flowio.FlowFormatError) as exc:
            raise DataError(f"cannot read {args.flow}: {exc}") from exc
        img = flowio.flow_to_color(field, args.max_magnitude)
    parent = os.path.dirname(os.path.abspath(args.out))
    _outdir(parent)
    flowio.save_image(args.out, img)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="flowlab", description="Desk-scale optical flow experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="experiment YAML file")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("datagen", help="write a dataset manifest (and optionally files)")
    common(sp, "data")
    sp.add_argument("--count", type=int)
    sp.add_argument("--materialize", action="store_true")
    sp.set_defaults(func=cmd_datagen)

    sp = sub.add_parser("train", help="pre-train one model or an ablation grid")
    common(sp, "runs/train")
    sp.add_argument("--checkpoint", help="resume from this training checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="fine-tune from a checkpoint")
    common(sp, "runs/finetune")
    sp.add_argument("--checkpoint", help="initial model")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, "runs/eval")
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle", action="store_true", help="use ground truth as the prediction")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("profile", help="time and memory scaling of the cost volumes")
    common(sp, "runs/profile")
    sp.add_argument("--arch", action="append", choices=("pwc", "irr", "raft"))
    sp.add_argument("--resolutions", type=_resolutions, help="e.g. 64x96,128x192,256x384")
    sp.add_argument("--repeats", type=int)
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("render", help="colour-code a flow file")
    sp.add_argument("flow", nargs="?")
    sp.add_argument("--out", required=True, help="image path (.png or .ppm)")
    sp.add_argument("--max-magnitude", type=float)
    sp.add_argument("--wheel", action="store_true", help="render the colour wheel self-test")
    sp.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    from .train import TrainingDiverged

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"diverged: {exc} (last checkpoint: {exc.checkpoint})", file=sys.stderr)
        return EXIT_DIVERGED
    except BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except metrics.SampleError as exc:
        if isinstance(exc.__cause__, BudgetExceeded):
            print(f"budget exceeded: {exc}", file=sys.stderr)
            return EXIT_BUDGET
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, flowio.FlowFormatError, checkpoint.CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
