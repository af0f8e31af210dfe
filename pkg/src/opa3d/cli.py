"""Command-line entry point: ``opa3d <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .augmentor import PointAugmentor, augment_scene, displacement_histogram
from .config import TrainConfig, flatten, load_config
from .datakit import (
    SceneFormatError,
    generate_dataset,
    load_scene,
    load_scenes,
    load_split,
    make_split,
    save_scene,
    save_split,
)
from .detector import VoteDetector
from .metrics import evaluate
from .nn import CheckpointError, checkpoint_meta, load_checkpoint, save_checkpoint
from .ssl_pipeline import METRIC_COLUMNS, pretrain, ssl_train
from .report import discover_runs, write_histograms, write_report

logger = logging.getLogger("opa3d")

# ablation IDs: 1 = no-object-aug, 2 = no-labeled-aug, 3 = no-unlabeled-aug,
# 4 = no-objectness-rho, 5 = full (no flag)
ABLATIONS = {
    "no-labeled-aug": {"aug_labeled": False},
    "no-unlabeled-aug": {"aug_unlabeled": False},
    "no-objectness-rho": {"objectness_rho": False},
    "no-object-aug": {"use_augmentor": False, "aug_labeled": False, "aug_unlabeled": False},
}
# settings that are fixed once pre-training is done
PRETRAIN_KEYS = ("use_augmentor", "objectness_rho")


class CLIError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    git: str
    start: str
    end: str | None = None
    outputs: dict = field(default_factory=dict)
    ablation: str | None = None
    label: str | None = None

    def write(self, out_dir: Path):
        (out_dir / "manifest.json").write_text(json.dumps(asdict(self), indent=1, sort_keys=True))


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _git_describe():
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _start_manifest(command, cfg, out_dir: Path, ablation=None, label=None) -> RunManifest:
    out_dir.mkdir(parents=True, exist_ok=True)
    man = RunManifest(command, {k: list(v) if isinstance(v, tuple) else v for k, v in flatten(cfg).items()},
                      cfg.seed, _git_describe(), _now(), ablation=ablation, label=label)
    man.write(out_dir)
    return man


def write_metrics_csv(rows, path):
    columns = list(METRIC_COLUMNS) + ["lr"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row.get(c, "") == "" else repr(row[c]) for c in columns])


def save_detector(det: VoteDetector, path):
    save_checkpoint(det, path, {"kind": "detector", "config": det.config()})


def save_augmentor(aug: PointAugmentor, path):
    save_checkpoint(aug, path, {"kind": "augmentor", "config": aug.config()})


def load_detector(path) -> VoteDetector:
    meta = checkpoint_meta(path)
    det = VoteDetector(**meta.get("config", {}))
    return load_checkpoint(det, path)


def load_augmentor(path) -> PointAugmentor:
    meta = checkpoint_meta(path)
    config = dict(meta.get("config", {}))
    if "hidden" in config:
        config["hidden"] = tuple(config["hidden"])
    return load_checkpoint(PointAugmentor(**config), path)


def _config(args, ablation=None) -> TrainConfig:
    cfg = load_config(args.config)
    if ablation:
        if ablation not in ABLATIONS:
            raise CLIError(f"unknown ablation {ablation!r}; valid flags: {', '.join(ABLATIONS)}")
        cfg = replace(cfg, **ABLATIONS[ablation])
    return cfg


def _split_scenes(args):
    if not Path(args.split).exists():
        raise CLIError(f"split file not found: {args.split}")
    split = load_split(args.split)
    return split, (lambda ids: load_scenes(args.data, ids))


# commands

def cmd_gen_data(args):
    if args.scenes <= 0:
        raise CLIError("--scenes must be positive")
    if args.val < 0:
        raise CLIError("--val must be non-negative")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = generate_dataset(args.scenes, args.seed, prefix="train")
    val = generate_dataset(args.val, args.seed + 1_000_003, prefix="val") if args.val else []
    for s in train + val:
        save_scene(s, out / f"{s.id}.json")
    index = {"seed": args.seed, "train": [s.id for s in train], "val": [s.id for s in val]}
    (out / "index.json").write_text(json.dumps(index, indent=1))
    split = make_split(index["train"], args.ratio, args.seed, index["val"])
    save_split(split, out / "split.json")
    print(f"wrote {len(train)} train + {len(val)} val scenes, index.json and split.json to {out}")


def cmd_pretrain(args):
    cfg = _config(args, args.ablate)
    if args.ablate and args.ablate not in ("no-objectness-rho", "no-object-aug"):
        raise CLIError(f"--ablate {args.ablate} only affects ssl-train")
    split, load = _split_scenes(args)
    out = Path(args.out)
    man = _start_manifest("pretrain", cfg, out, args.ablate, args.label)
    labeled = load(split.labeled)
    val = load(split.val) if split.val else None
    res = pretrain(labeled, cfg, val)
    save_detector(res.detector, out / "detector.ckpt")
    save_augmentor(res.augmentor, out / "augmentor.ckpt")
    write_metrics_csv(res.metrics, out / "metrics.csv")
    man.outputs = {k: str(out / k) for k in ("detector.ckpt", "augmentor.ckpt", "metrics.csv")}
    man.end = _now()
    man.write(out)
    print(json.dumps({k: res.metrics[-1][k] for k in ("mAP@0.25", "mAP@0.5")}))


def cmd_ssl_train(args):
    cfg = _config(args, args.ablate)
    pre = Path(args.pretrained)
    for name in ("detector.ckpt", "augmentor.ckpt"):
        if not (pre / name).exists():
            raise CLIError(f"pretrained directory lacks {name}: {pre}")
    if (pre / "manifest.json").exists():
        pre_cfg = json.loads((pre / "manifest.json").read_text()).get("config", {})
        for key in PRETRAIN_KEYS:
            if key in pre_cfg and pre_cfg[key] != getattr(cfg, key):
                raise CLIError(f"pretrained run has {key}={pre_cfg[key]} but this run needs "
                               f"{getattr(cfg, key)}; pretrain with the matching --ablate flag")
    split, load = _split_scenes(args)
    out = Path(args.out)
    man = _start_manifest("ssl-train", cfg, out, args.ablate, args.label)
    detector = load_detector(pre / "detector.ckpt")
    augmentor = load_augmentor(pre / "augmentor.ckpt")
    val = load(split.val) if split.val else None
    res = ssl_train(load(split.labeled), load(split.unlabeled), detector, augmentor, cfg, val)
    save_detector(res.detector, out / "student.ckpt")
    save_detector(res.teacher, out / "teacher.ckpt")
    write_metrics_csv(res.metrics, out / "metrics.csv")
    man.outputs = {k: str(out / k) for k in ("student.ckpt", "teacher.ckpt", "metrics.csv")}
    man.end = _now()
    man.write(out)
    print(json.dumps({k: res.metrics[-1][k] for k in ("mAP@0.25", "mAP@0.5")}))


def cmd_eval(args):
    detector = load_detector(args.ckpt)
    split, load = _split_scenes(args)
    ids = getattr(split, args.subset)
    if not ids:
        raise CLIError(f"split has no {args.subset} scenes")
    cfg = load_config(None)
    result = evaluate(detector, load(ids), iou_threshold=cfg.nms_iou, objectness_floor=cfg.nms_objectness)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(result.to_json())
        (out / "eval.csv").write_text(result.to_csv_row())
    print(result.to_json())


def cmd_augment(args):
    augmentor = load_augmentor(args.augmentor)
    scene = load_scene(args.scene)
    if not scene.boxes:
        raise CLIError(f"scene {args.scene} has no boxes to augment")
    seed = int(os.environ["OPA_SEED"]) if os.environ.get("OPA_SEED") else args.seed
    rng = np.random.default_rng(seed)
    out_scene, crops, fields = augment_scene(scene, scene.boxes, args.m, augmentor, rng, args.samples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scene(out_scene, out)
    sidecar = {"scene": scene.id, "seed": seed, "objects": []}
    for crop, fld in zip(crops, fields):
        local = fld @ crop.box.rotation()
        sidecar["objects"].append({
            "box": crop.box.to_dict(),
            "point_indices": crop.point_indices.tolist(),
            "displacements": fld.tolist(),
            "max_ratio": (np.abs(local) / crop.box.size).max(axis=0).tolist() if len(fld) else [0.0] * 3,
        })
    side = out.with_name(out.stem + ".displacements.json")
    side.write_text(json.dumps(sidecar))
    print(f"wrote {out} and {side}")


def _histogram_scenes(args):
    if args.data:
        index = json.loads((Path(args.data) / "index.json").read_text())
        return load_scenes(args.data, index["train"][: args.scenes])
    return generate_dataset(args.scenes, 0, prefix="hist")


def cmd_report(args):
    written = write_report(args.runs, args.out)
    print(Path(written["summary"]).read_text(), end="")
    if args.histograms:
        runs = [r for r in discover_runs(args.runs) if (r["dir"] / "augmentor.ckpt").exists()]
        if not runs:
            raise CLIError("--histograms needs at least one run with augmentor.ckpt")
        scenes = _histogram_scenes(args)
        for run in runs:
            aug = load_augmentor(run["dir"] / "augmentor.ckpt")
            rng = np.random.default_rng(0)
            crops, fields = [], []
            for s in scenes:
                if s.boxes:
                    _, c, f = augment_scene(s, s.boxes, len(s.boxes), aug, rng)
                    crops += c
                    fields += f
            edges, counts = displacement_histogram(crops, fields)
            dest = Path(args.out) / "histograms" / run["name"]
            write_histograms(edges, counts, dest)
            print(f"histograms for {run['name']} in {dest}")


def build_parser():
    p = argparse.ArgumentParser(prog="opa3d", description="Object-level point augmentation for SSL 3D detection")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic scenes")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val", type=int, default=0)
    g.add_argument("--ratio", type=float, default=0.1, help="labeled fraction written to split.json")
    g.set_defaults(func=cmd_gen_data)

    for name, func, help_ in (("pretrain", cmd_pretrain, "joint detector/augmentor pre-training"),
                              ("ssl-train", cmd_ssl_train, "teacher-student training")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--data", required=True)
        s.add_argument("--split", required=True)
        s.add_argument("--config", default=None)
        s.add_argument("--out", required=True)
        s.add_argument("--label", default=None, help="group name for report tables")
        s.add_argument("--ablate", default=None, metavar="FLAG", help="one of: " + ", ".join(ABLATIONS))
        if name == "ssl-train":
            s.add_argument("--pretrained", required=True)
        s.set_defaults(func=func)

    e = sub.add_parser("eval", help="evaluate a detector checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--subset", default="val", choices=("val", "labeled", "unlabeled"))
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("augment", help="object-level augmentation of one scene")
    a.add_argument("--augmentor", required=True)
    a.add_argument("--scene", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--m", type=int, default=3)
    a.add_argument("--samples", type=int, default=1024)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_augment)

    r = sub.add_parser("report", help="curves, summary table and histograms")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--histograms", action="store_true")
    r.add_argument("--data", default=None, help="scene directory for histograms")
    r.add_argument("--scenes", type=int, default=20)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CLIError, CheckpointError, SceneFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
