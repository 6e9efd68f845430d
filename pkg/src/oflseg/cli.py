"""``oflseg`` command-line entry point.

Subcommands: ``gen-data``, ``train``, ``eval``, ``render``, ``ablate``.
Settings resolve as command-line flags > ``--config`` JSON file > defaults.
Exit status is 0 on success, 1 on runtime or I/O failure, 2 on bad usage.

Reports never contain wall-clock values unless ``--timing`` is given, so a
rerun with the same flags reproduces every output file byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ABLATIONS, RunConfig, load_config
from .dataset import load_dataset, read_mask, render_overlay, save_report
from .errors import ConfigError, OflError
from .fusion import LabeledFrame, fusion_meta, load_fusion, save_fusion, train_offline
from .memory import attention_checksum
from .pipeline import build_components, run_experiment
from .plotting import plot_ablation, plot_loss_curve, plot_sequence_scores
from .synthetic import gen_synthetic

log = logging.getLogger("oflseg")


class UsageError(Exception):
    """Flag combination that argparse cannot reject by itself."""


def _resolve(args) -> RunConfig:
    rc = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    pipe = {}
    for flag, key in (("gamma", "gamma"), ("k_refs", "k_refs"), ("seed", "seed")):
        val = getattr(args, flag, None)
        if val is not None:
            pipe[key] = val
    train = {}
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = args.epochs
    return replace(rc, pipeline=replace(rc.pipeline, **pipe), train=replace(rc.train, **train))


def _provenance(rc: RunConfig, dataset) -> dict:
    return {"version": __version__, "resolved_config": rc.to_dict(),
            "dataset_id": dataset.checksum}


def _labelled_frames(dataset) -> list[LabeledFrame]:
    if len(dataset.classes) != 1:
        raise ConfigError("fusion training expects a single-class dataset")
    cls = dataset.classes[0]
    frames = []
    for seq in dataset.split("train"):
        for i, (img, m) in enumerate(zip(dataset.load_images(seq), dataset.load_masks(seq, cls))):
            frames.append(LabeledFrame(img, m, seq.id, i))
    if not frames:
        raise ConfigError("dataset has no train split")
    return frames


# ---- gen-data ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    rc = load_config(args.config) if args.config else RunConfig()
    overrides = {k: v for k, v in {
        "seed": args.seed, "n_sequences": args.sequences, "frames_per_sequence": args.frames,
        "n_distractors": args.distractors, "distractor_similarity": args.similarity,
        "size": args.size, "n_train": args.n_train,
        "train_frames_per_sequence": args.train_frames,
    }.items() if v is not None}
    gp = replace(rc.data, **overrides)
    ds = gen_synthetic(gp, args.out)
    print(ds.root / "manifest.json")
    return 0


# ---- train ------------------------------------------------------------------

def _train_model(rc: RunConfig, dataset, model_out, ablation: str, timing: bool) -> dict:
    cfg = rc.pipeline.ablation(ablation)
    comps = build_components(cfg)
    fp, report = train_offline(comps.stack, comps.attn, cfg, _labelled_frames(dataset), rc.train,
                               log=log.info)
    out = Path(model_out)
    save_fusion(fp, out, {"ablation": ablation, "pipeline": rc.to_dict()["pipeline"],
                          "frozen_checksums": report.frozen_checksums})
    doc = _provenance(replace(rc, pipeline=cfg), dataset)
    doc.update(report.to_dict(include_timing=timing))
    save_report(doc, out / "train_report.json")
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "lr"])
        for e in report.epochs:
            w.writerow([e["epoch"], repr(e["loss"]), repr(e["lr"])])
    plot_loss_curve(report.losses, report.lrs, out / "loss.png")
    return doc


def cmd_train(args) -> int:
    rc = _resolve(args)
    dataset = load_dataset(args.data)
    doc = _train_model(rc, dataset, args.model_out, args.ablate, args.timing)
    print(f"trained {args.ablate} fusion for {len(doc['epochs'])} epochs, "
          f"final loss {doc['epochs'][-1]['loss']:.5f} -> {args.model_out}")
    return 0


# ---- eval -------------------------------------------------------------------

def _load_model(model_dir, cfg, ablation: str):
    meta = fusion_meta(model_dir)
    fp = load_fusion(model_dir)
    if meta.get("ablation") != ablation:
        raise ConfigError(f"{model_dir}: model was trained for the {meta.get('ablation')!r} "
                          f"ablation, not {ablation!r}")
    comps = build_components(cfg, fp)
    expected = {"stack": comps.stack.checksum(), "attention": attention_checksum(comps.attn)}
    if meta.get("frozen_checksums") != expected:
        raise ConfigError(f"{model_dir}: frozen components differ from this configuration "
                          "(check seed, C and D)")
    return comps


def _write_score_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "sequence", "dice", "ahd", "accepted_frames", "n_frames"])
        for entry in report["per_class"]:
            for r in entry["per_sequence"]:
                w.writerow([entry["class"], r["sequence"], repr(r["dice"]), repr(r["ahd"]),
                            sum(r["accepted"]), len(r["accepted"])])


def _evaluate(rc: RunConfig, dataset, ablation: str, model_dir, report_path, pred_dir,
              timing: bool) -> dict:
    cfg = rc.pipeline.ablation(ablation)
    if cfg.use_learner:
        if model_dir is None:
            raise UsageError(f"--model is required for the {ablation} ablation")
        comps = _load_model(model_dir, cfg, ablation)
    else:
        comps = build_components(cfg)
    extra = _provenance(replace(rc, pipeline=cfg), dataset)
    extra["ablation"] = ablation
    t0 = time.perf_counter()
    report = run_experiment(cfg, dataset, comps, report_path, pred_dir, extra, timing=timing)
    log.info("%s evaluated in %.1f s", ablation, time.perf_counter() - t0)
    stem = os.path.splitext(os.fspath(report_path))[0]
    _write_score_csv(report, stem + ".csv")
    plot_sequence_scores(report, stem + ".png")
    return report


def cmd_eval(args) -> int:
    rc = _resolve(args)
    dataset = load_dataset(args.data)
    ablation = args.ablate
    if ablation is None:
        ablation = fusion_meta(args.model)["ablation"] if args.model else "base"
    report = _evaluate(rc, dataset, ablation, args.model, args.report, args.pred_out, args.timing)
    o = report["overall"]
    print(f"{ablation}: mean Dice {o['mean_dice']:.4f}  mean AHD {o['mean_ahd']:.3f}")
    return 0


# ---- render -----------------------------------------------------------------

def cmd_render(args) -> int:
    dataset = load_dataset(args.data)
    n = 0
    for seq in dataset.split("test"):
        images = dataset.load_images(seq)
        for cls in dataset.classes:
            for i, img in enumerate(images):
                src = Path(args.pred) / seq.id / cls / f"{i:04d}.pgm"
                if not src.exists():
                    raise FileNotFoundError(f"missing prediction: {src}")
                render_overlay(img, read_mask(src), Path(args.out) / seq.id / cls / f"{i:04d}.pgm")
                n += 1
    print(f"wrote {n} overlays under {args.out}")
    return 0


# ---- ablate -----------------------------------------------------------------

def cmd_ablate(args) -> int:
    rc = _resolve(args)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    rows = []
    for name in ABLATIONS:
        model_dir = None
        if rc.pipeline.ablation(name).use_learner:
            model_dir = out / "models" / name
            _train_model(rc, dataset, model_dir, name, args.timing)
        report = _evaluate(rc, dataset, name, model_dir, out / "reports" / f"{name}.json",
                           None, args.timing)
        rows.append({"ablation": name, **ABLATIONS[name],
                     "mean_dice": report["overall"]["mean_dice"],
                     "mean_ahd": report["overall"]["mean_ahd"]})
    base = rows[0]["mean_dice"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ablation", "use_learner", "use_afm", "mean_dice", "mean_ahd", "gap_vs_base"])
        for r in rows:
            w.writerow([r["ablation"], r["use_learner"], r["use_afm"], repr(r["mean_dice"]),
                        repr(r["mean_ahd"]), repr(r["mean_dice"] - base)])
    plot_ablation(rows, out / "ablation.png")
    for r in rows:
        print(f"{r['ablation']:8s} Dice {r['mean_dice']:.4f}  AHD {r['mean_ahd']:.3f}  "
              f"gap {r['mean_dice'] - base:+.4f}")
    return 0


# ---- parser -----------------------------------------------------------------

def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oflseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic sequence dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--sequences", type=_positive)
    g.add_argument("--frames", type=_positive)
    g.add_argument("--train-frames", type=_positive,
                   help="frames per training sequence (defaults to --frames)")
    g.add_argument("--n-train", type=int)
    g.add_argument("--distractors", type=int)
    g.add_argument("--similarity", type=float)
    g.add_argument("--size", type=int)
    g.set_defaults(func=cmd_gen_data)

    def common(sp):
        sp.add_argument("--data", required=True, help="dataset directory or manifest.json")
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--timing", action="store_true", help="record wall-clock fields")

    t = sub.add_parser("train", help="fit the fusion parameters offline")
    common(t)
    t.add_argument("--model-out", required=True)
    t.add_argument("--ablate", choices=["learner", "full"], default="full")
    t.add_argument("--epochs", type=_positive)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="segment the test split and score it")
    common(e)
    e.add_argument("--model")
    e.add_argument("--report", required=True)
    e.add_argument("--ablate", choices=list(ABLATIONS))
    e.add_argument("--gamma", type=float)
    e.add_argument("--k-refs", type=_positive)
    e.add_argument("--pred-out", help="directory for predicted masks")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="draw predicted mask boundaries over frames")
    r.add_argument("--data", required=True)
    r.add_argument("--pred", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    a = sub.add_parser("ablate", help="train and evaluate base, learner and full variants")
    common(a)
    a.add_argument("--out", required=True)
    a.add_argument("--epochs", type=_positive)
    a.add_argument("--gamma", type=float)
    a.add_argument("--k-refs", type=_positive)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"oflseg: error: {exc}", file=sys.stderr)
        return 2
    except (OflError, OSError, ValueError) as exc:
        print(f"oflseg: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
