"""Command-line entry point: ``srpn <command> [options]``.

Commands: synth, train, eval, gradcheck, detect, ablate. Every command that
writes into ``--out`` also writes the resolved ``config.toml`` there.
"""
import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from srpn import config as C
from srpn.anchors import AnchorSpec
from srpn.evaluator import (Detection, average_precision, detect, evaluate_f1ap, evaluate_ringcell,
                            f1_report, match, summary_text, write_report_csv)
from srpn.geometry import BBox
from srpn.head import load_checkpoint, save_checkpoint
from srpn.synth import generate_dataset, generate_negatives, load_annotations, load_png, read_dataset, write_dataset
from srpn.trainer import TrainingDiverged, sweep_margins, train, write_log_csv

log = logging.getLogger("srpn")

EXIT_OK = 0
EXIT_FAILED = 1         # a check failed or a metric could not be computed
EXIT_USAGE = 2          # argparse
EXIT_MISSING = 3
EXIT_BAD_CONFIG = 4
EXIT_DIVERGED = 5


class MissingInput(Exception):
    pass


def _require(path):
    if not os.path.exists(path):
        raise MissingInput(f"no such file or directory: {path}")
    return path


def _load_config(args):
    cfg = C.load(_require(args.config)) if getattr(args, "config", None) else C.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = C.from_dict({"seed": args.seed, "data_seed": args.seed}, cfg)
    return cfg


def _prepare_out(path, cfg=None):
    os.makedirs(path, exist_ok=True)
    if cfg is not None:
        C.dump(cfg, os.path.join(path, "config.toml"))
    return path


def _dataset_dir(root, split):
    """``root`` itself if it holds annotations, else ``root/split``."""
    if os.path.exists(os.path.join(root, "annotations.jsonl")):
        return root
    return _require(os.path.join(root, split))


def _read(root, split):
    d = _dataset_dir(_require(root), split)
    _require(os.path.join(d, "annotations.jsonl"))
    return read_dataset(d)


def _anchor_spec_of(model, cfg):
    spec = model.extra.get("anchor_spec")
    if spec is None:
        return cfg.anchor_spec()
    return AnchorSpec(tuple(spec["scales"]), tuple(spec["ratios"]), int(spec["stride"]))


def _checkpoint_extra(cfg):
    spec = cfg.anchor_spec()
    return {"anchor_spec": {"scales": list(spec.scales), "ratios": list(spec.ratios), "stride": spec.stride},
            "config": C.dumps(cfg)}


# -- commands --------------------------------------------------------------------

def cmd_synth(args):
    cfg = _load_config(args)
    out = _prepare_out(args.out, cfg)
    spec = cfg.scene_spec()
    sets = [("train", generate_dataset(spec, cfg.n_train, cfg.dataset_seed, prefix="train")),
            ("eval", generate_dataset(spec, cfg.n_eval, cfg.dataset_seed + 1, prefix="eval")),
            ("negatives", generate_negatives(spec, cfg.n_negative, cfg.dataset_seed + 2))]
    for name, items in sets:
        write_dataset(items, os.path.join(out, name))
        print(f"{name}: {len(items)} images, {sum(len(i.boxes) for i in items)} boxes")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    data = _read(args.data, "train")
    out = _prepare_out(args.out, cfg)
    log_path = os.path.join(out, "train_log.csv")
    res = train(cfg.train_config(), data)
    write_log_csv(log_path, res.log)
    save_checkpoint(res.model, os.path.join(out, "model.ckpt"), extra=_checkpoint_extra(cfg))
    last = res.log[-1]
    print(f"trained {cfg.iterations} iterations ({cfg.embed_mode}); final loss {last.loss_total:.5f}")
    return EXIT_OK


def _read_detections(path):
    """JSON lines ``{"image": ..., "detections": [[x, y, h, w, score], ...]}`` keyed by image stem."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dets = [Detection(BBox(*map(float, d[:4])), float(d[4])) for d in rec["detections"]]
            except (json.JSONDecodeError, KeyError, TypeError, IndexError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: malformed detection record ({e})") from None
            out[os.path.splitext(os.path.basename(rec["image"]))[0]] = dets
    return out


def _eval_precomputed(items, dets_by_id, ecfg):
    tp = fp = fn = 0
    all_dets, per_image = [], []
    for item in items:
        dets = dets_by_id.get(item.id, [])
        m = match([d for d in dets if d.score >= ecfg.score_threshold], item.boxes, ecfg.match_iou)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
        per_image.append({"id": item.id, "tp": m.tp, "fp": m.fp, "fn": m.fn})
        all_dets.append(dets)
    rep = f1_report(tp, fp, fn)
    rep.ap = average_precision(all_dets, [i.boxes for i in items], ecfg.match_iou)
    rep.per_image = per_image
    return rep


def cmd_eval(args):
    cfg = _load_config(args)
    ecfg = cfg.eval_config()
    if args.checkpoint is None and args.detections is None:
        raise MissingInput("eval needs --checkpoint or --detections")
    model = load_checkpoint(_require(args.checkpoint)) if args.checkpoint else None
    out = _prepare_out(args.out, cfg)
    if args.protocol == "f1ap":
        items = _read(args.data, "eval")
        if model is None:
            rep = _eval_precomputed(items, _read_detections(_require(args.detections)), ecfg)
        else:
            rep = evaluate_f1ap(model, items, _anchor_spec_of(model, cfg), ecfg)
        if not items or rep.tp + rep.fn == 0:
            print("no ground-truth boxes: recall and AP are undefined", file=sys.stderr)
            return EXIT_FAILED
    else:
        if model is None:
            raise MissingInput("the ringcell protocol needs --checkpoint")
        positives = _read(args.data, "eval")
        neg_root = args.negatives or args.data
        negatives = _read(neg_root, "negatives")
        if not negatives:
            print("ringcell protocol needs at least one negative image", file=sys.stderr)
            return EXIT_FAILED
        rep = evaluate_ringcell(model, positives, negatives, _anchor_spec_of(model, cfg), ecfg)
    write_report_csv(os.path.join(out, f"report_{args.protocol}.csv"), rep)
    text = summary_text(rep)
    with open(os.path.join(out, f"report_{args.protocol}.txt"), "w") as f:
        f.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args):
    from srpn import gradcheck
    seeds = args.points
    if args.scope == "ops":
        results = gradcheck.run_cases(gradcheck.op_cases(), seeds=seeds, tolerance=1e-4)
    elif args.scope == "losses":
        results = gradcheck.run_cases(gradcheck.loss_cases(), seeds=seeds, tolerance=1e-4)
    else:
        results = gradcheck.run_model_check(seeds=max(1, seeds // 10), tolerance=1e-3)
    rows = [(r.name, r.points, f"{r.max_rel_error:.3e}", "pass" if r.passed else "FAIL") for r in results]
    width = max(len(r[0]) for r in rows)
    print(f"{'check':<{width}}  points  max_rel_err  result")
    for name, pts, err, ok in rows:
        print(f"{name:<{width}}  {pts:>6}  {err:>11}  {ok}")
    if args.out:
        _prepare_out(args.out)
        with open(os.path.join(args.out, f"gradcheck_{args.scope}.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["check", "points", "max_rel_error", "result"])
            w.writerows(rows)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def _draw_overlay(image, dets, gts, path):
    from PIL import Image, ImageDraw
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    im = Image.fromarray(arr, mode="RGB")
    draw = ImageDraw.Draw(im)
    for color, boxes in (((0, 200, 0), gts), ((255, 220, 0), [d.box for d in dets])):
        for b in boxes:
            draw.rectangle([b.x, b.y, b.x + b.w - 1, b.y + b.h - 1], outline=color)
    im.save(path, format="PNG")


def cmd_detect(args):
    cfg = _load_config(args)
    model = load_checkpoint(_require(args.checkpoint))
    image = load_png(_require(args.image))
    gts = []
    if args.data:
        ann = os.path.join(_dataset_dir(_require(args.data), "eval"), "annotations.jsonl")
        stem = os.path.basename(args.image)
        for rel, boxes in load_annotations(_require(ann)):
            if os.path.basename(rel) == stem:
                gts = boxes
    ecfg = cfg.eval_config()
    dets = detect(model, image, _anchor_spec_of(model, cfg), ecfg.score_threshold, ecfg.nms_iou)
    out = _prepare_out(args.out, cfg)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    with open(os.path.join(out, "detections.jsonl"), "w", encoding="utf-8") as f:
        rec = {"image": args.image, "detections": [[*map(float, d.box), d.score] for d in dets]}
        f.write(json.dumps(rec) + "\n")
    _draw_overlay(image, dets, gts, os.path.join(out, f"{stem}_overlay.png"))
    print(f"{len(dets)} detections")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args)
    try:
        margins = [float(m) for m in args.margins.split(",") if m.strip()]
    except ValueError:
        raise C.ConfigError(f"--margins must be comma-separated numbers, got {args.margins!r}") from None
    modes = [m.strip() for m in args.modes.split(",")]
    train_set = _read(args.data, "train")
    eval_set = _read(args.data, "eval")
    out = _prepare_out(args.out, cfg)
    rows = []
    for mode in modes:
        base = C.from_dict({"embed_mode": mode}, cfg).train_config()
        rows += sweep_margins(base, margins, train_set, eval_set, cfg.eval_config())
    with open(os.path.join(out, "ablation.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["embed_mode", "margin", "f1", "ap"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "f1": repr(r["f1"]), "ap": repr(r["ap"])})
    print(f"{'loss':<8} {'margin':>6} {'F1':>7} {'AP':>7}")
    for r in rows:
        print(f"{r['embed_mode']:<8} {r['margin']:>6.2f} {r['f1']:>7.4f} {r['ap']:>7.4f}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="srpn", description="Similarity-learning region proposal network.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="flat TOML experiment config")
        sp.add_argument("--seed", type=int, help="overrides seed and data_seed")
        sp.add_argument("--out", required=out_required, help="output directory")

    sp = sub.add_parser("synth", help="generate train/eval/negative synthetic datasets")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model on a dataset directory")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint (or a detections file)")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--detections", help="JSON-lines detections instead of a checkpoint (f1ap only)")
    sp.add_argument("--protocol", choices=["f1ap", "ringcell"], default="f1ap")
    sp.add_argument("--negatives", help="negative-only dataset for ringcell (default: DATA/negatives)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("scope", choices=["ops", "losses", "model"])
    sp.add_argument("--points", type=int, default=20, help="random points per check")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("detect", help="run a checkpoint on one PNG and draw the boxes")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--data", help="dataset whose annotations supply ground-truth boxes")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("ablate", help="margin sweep for each embedding loss")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--margins", default="0.5,1.0,1.5,2.0")
    sp.add_argument("--modes", default="pair,triplet")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MissingInput as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except C.ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
