"""Single entry point: generate / extract-prototypes / mine / align-eval /
simulate / report.

Flag precedence: command-line flag > --config JSON file > built-in default.
Diagnostics go to stderr; machine-readable output goes to files (or stdout
for `report` summaries). Exit codes: 0 success, 1 validation/usage error,
2 I/O or format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import alignment
from .bench import mine_dataset, simulated_predictions
from dataclasses import fields as dataclass_fields

from .errors import FormatError, TrainingDiverged, ValidationError, VgfmError
from .mining import MiningConfig
from .prototypes import DEFAULT_BG_IOU, DEFAULT_K, extract_prototypes
from .rng import Rng
from .store import load_dataset, read_runlog, write_prototypes, read_prototypes
from .trainer import (
    TrainerConfig,
    evaluate,
    forward,
    load_checkpoint,
    simulate,
    stability_report,
    teacher_predictions,
)
from .world import WorldConfig, generate_world


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _global_flags(parser) -> None:
    parser.add_argument("--config", help="JSON file of default flag values")
    parser.add_argument("--seed", type=int, help="global seed (default 0)")
    parser.add_argument("--workers", type=int, help="worker processes for generation")


def _build_parser() -> _Parser:
    parser = _Parser(prog="vgfm", description=__doc__)
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command")

    def add_parser(*a, **kw):
        sp = sub.add_parser(*a, **kw)
        _global_flags(sp)
        return sp

    p = add_parser("generate", help="materialize a synthetic world")
    p.add_argument("--world", required=True, help="WorldConfig JSON file")
    p.add_argument("--out", required=True, help="output directory")

    p = add_parser("extract-prototypes", help="offline reference prototypes")
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--bg-iou", dest="bg_iou", type=float)
    p.add_argument("--out", required=True)

    p = add_parser("mine", help="filter pseudo-labels over the unlabeled split")
    p.add_argument("--index", required=True)
    p.add_argument("--protos", required=True)
    p.add_argument("--tau-low", dest="tau_low", type=float)
    p.add_argument("--sim", dest="sim", type=float)
    p.add_argument("--dynamic", action="store_true", default=None)
    p.add_argument("--tau-high", dest="tau_high", type=float, help="fixed upper threshold")
    p.add_argument("--checkpoint", help="teacher checkpoint; omitted = simulated teacher")
    p.add_argument("--split", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--report", dest="report_path")

    p = add_parser("align-eval", help="report alignment losses, no updates")
    p.add_argument("--index", required=True)
    p.add_argument("--protos", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--out", required=True)

    p = add_parser("simulate", help="end-to-end self-training run")
    p.add_argument("--world", required=True, help="WorldConfig JSON file")
    p.add_argument("--mode")
    p.add_argument("--labeled", type=float, help="override labeled_fraction")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True, help="runlog.jsonl path")
    p.add_argument("--work-dir", dest="work_dir", help="directory for world + checkpoints")

    p = add_parser("report", help="runlog -> CSV + stability summary")
    p.add_argument("--runlog", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    return parser


def _merged(args: argparse.Namespace, key: str, default):
    """flag > config file > default"""
    val = getattr(args, key, None)
    if val is not None:
        return val
    if getattr(args, "_config_doc", None) and key in args._config_doc:
        return args._config_doc[key]
    return default


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("a subcommand is required")
        args._config_doc = {}
        if args.config:
            args._config_doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
            if not isinstance(args._config_doc, dict):
                raise ValidationError("--config must hold a JSON object")
        return _dispatch(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ValidationError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        json.dump(exc.dump, sys.stderr, indent=1)
        print(file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except VgfmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    seed = int(_merged(args, "seed", 0))
    workers = int(_merged(args, "workers", 1))
    cmd = args.command
    seed_given = getattr(args, "seed", None) is not None or "seed" in args._config_doc
    if cmd == "generate":
        cfg = WorldConfig.from_file(args.world)
        if seed_given:
            cfg = replace(cfg, seed=seed)
        index = generate_world(cfg, args.out, workers=workers)
        print(f"wrote {len(index.images)} images to {args.out}", file=sys.stderr)
        return 0

    if cmd == "extract-prototypes":
        index = load_dataset(args.index)
        protos = extract_prototypes(
            index,
            k=int(_merged(args, "k", DEFAULT_K)),
            bins=int(_merged(args, "bins", 7)),
            iou_max=float(_merged(args, "bg_iou", DEFAULT_BG_IOU)),
            rng=Rng(seed, ("prototypes",)),
        )
        write_prototypes(args.out, protos)
        print(f"wrote prototypes for {len(protos.classes)} classes to {args.out}", file=sys.stderr)
        return 0

    if cmd == "mine":
        return _cmd_mine(args, seed)

    if cmd == "align-eval":
        return _cmd_align_eval(args, seed)

    if cmd == "simulate":
        return _cmd_simulate(args, seed, workers)

    if cmd == "report":
        return _cmd_report(args)

    raise _UsageError(f"unknown subcommand {cmd!r}")


def _cmd_mine(args, seed: int) -> int:
    index = load_dataset(args.index)
    protos = read_prototypes(args.protos)
    dynamic = bool(_merged(args, "dynamic", False))
    tau_high = _merged(args, "tau_high", None)
    cfg = MiningConfig(
        tau_low=float(_merged(args, "tau_low", 0.3)),
        sim_threshold=float(_merged(args, "sim", 0.5)),
        tau_high_mode="dynamic" if dynamic or tau_high is None else "fixed",
        tau_high_value=float(tau_high) if tau_high is not None else 0.7,
    )
    split = _merged(args, "split", "unlabeled")
    if args.checkpoint:
        det = load_checkpoint(args.checkpoint)
        predictions = {}
        for image_id in index.image_ids(split):
            fmap = index.load_input_map(image_id)
            cache = forward(det, fmap, index.proposals.get(image_id, []), cfg.bins)
            predictions[image_id] = teacher_predictions(det, cache)
    else:
        rng = Rng(seed, ("mine_cli",))
        predictions = {
            image_id: simulated_predictions(index, image_id, rng)
            for image_id in index.image_ids(split)
        }
    mined, report = mine_dataset(index, protos, cfg, predictions, split)
    out_doc = {
        "schema_version": 1,
        "config": {
            "tau_low": cfg.tau_low,
            "tau_high_mode": cfg.tau_high_mode,
            "sim_threshold": cfg.sim_threshold,
        },
        "images": {
            image_id: {
                "accepted": [
                    {**m.detection.to_json(), "tag": m.tag}
                    for m in labels.accepted
                ],
                "rejected": [
                    {**d.to_json(), "reason": r} for d, r in labels.rejected
                ],
                "tau_high": labels.tau_high,
            }
            for image_id, labels in sorted(mined.items())
        },
    }
    Path(args.out).write_text(json.dumps(out_doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    if args.report_path:
        Path(args.report_path).write_text(
            json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )
    print(
        f"mined {report['accepted']} pseudo-labels "
        f"(precision {report['precision']:.3f}, recall {report['recall']:.3f})",
        file=sys.stderr,
    )
    return 0


def _cmd_align_eval(args, seed: int) -> int:
    index = load_dataset(args.index)
    protos = read_prototypes(args.protos)
    det = load_checkpoint(args.checkpoint)
    split = _merged(args, "split", "unlabeled")
    rng = Rng(seed, ("align_eval",))
    c = index.num_classes
    k = protos.components
    ref = np.zeros((c, k, protos.channels))
    ref_present = np.zeros((c, k), dtype=bool)
    for cls in range(c):
        entry = protos.classes[cls]
        if entry.present:
            ref[cls] = entry.centroids
            ref_present[cls] = True
    con_losses = []
    sim_losses = []
    for image_id in index.image_ids(split):
        fmap = index.load_input_map(image_id)
        vfm = index.load_vfm_map(image_id)
        cache = forward(det, fmap, index.proposals.get(image_id, []), 7)
        if cache.queries.shape[0]:
            batch = alignment.QueryBatch(cache.queries, cache.logits[:, :c])
            batch_protos = np.zeros((c, k, det.query_channels))
            batch_present = np.zeros((c, k), dtype=bool)
            for cls in range(c):
                rows = np.nonzero(batch.labels == cls)[0]
                if rows.size == 0:
                    continue
                assign = alignment.sinkhorn_assign(
                    rng.derive("sinkhorn", image_id, cls).normal(size=(rows.size, k))
                )
                batch_protos[cls], batch_present[cls] = alignment.aggregate_prototypes(
                    batch.features[rows], assign
                )
            res = alignment.contrastive_loss(
                batch_protos, batch_present, ref, ref_present, det.head
            )
            if res.terms:
                con_losses.append(res.loss)
        sim_losses.append(
            alignment.image_alignment_loss([cache.level0, cache.level1], vfm, det.head).loss
        )
    doc = {
        "schema_version": 1,
        "split": split,
        "contrastive": float(np.mean(con_losses)) if con_losses else 0.0,
        "image_alignment": float(np.mean(sim_losses)) if sim_losses else 0.0,
        "images": len(sim_losses),
    }
    Path(args.out).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(f"alignment losses over {len(sim_losses)} images written to {args.out}", file=sys.stderr)
    return 0


def _cmd_simulate(args, seed: int, workers: int) -> int:
    world_cfg = WorldConfig.from_file(args.world)
    if getattr(args, "seed", None) is not None or "seed" in args._config_doc:
        world_cfg = replace(world_cfg, seed=seed)
    labeled = _merged(args, "labeled", None)
    if labeled is not None:
        world_cfg = replace(world_cfg, labeled_fraction=float(labeled))
    # any TrainerConfig / MiningConfig field may come from the --config file
    trainer_keys = {f.name for f in dataclass_fields(TrainerConfig)}
    extra = {
        k: v for k, v in args._config_doc.items() if k in trainer_keys and k != "mining"
    }
    if isinstance(args._config_doc.get("mining"), dict):
        extra["mining"] = MiningConfig(**args._config_doc["mining"])
    extra["mode"] = str(_merged(args, "mode", extra.get("mode", "full_vg")))
    extra["steps"] = int(_merged(args, "steps", extra.get("steps", 400)))
    extra["lr"] = float(_merged(args, "lr", extra.get("lr", 0.01)))
    extra["seed"] = seed
    cfg = TrainerConfig(**extra)
    out = Path(args.out)
    work_dir = Path(args.work_dir) if args.work_dir else out.parent / (out.stem + "_work")
    result = simulate(world_cfg, cfg, work_dir, runlog_path=out, workers=workers)
    summary = dict(result["summary"])
    summary.pop("final_eval", None)
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return 0


def _cmd_report(args) -> int:
    records = read_runlog(args.runlog)
    fields = [
        "step",
        "sup",
        "unsup",
        "con",
        "sim",
        "total",
        "tau_high",
        "pseudo_precision",
        "pseudo_recall",
        "pseudo_f1",
        "pseudo_count",
        "eval_map",
        "eval_accuracy",
    ]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for rec in records:
            row = {
                "step": rec["step"],
                "sup": rec["losses"]["sup"],
                "unsup": rec["losses"]["unsup"],
                "con": rec["losses"]["con"],
                "sim": rec["losses"]["sim"],
                "total": rec["losses"]["total"],
                "tau_high": rec["tau_high"],
            }
            pseudo = rec.get("pseudo")
            if pseudo:
                row["pseudo_precision"] = pseudo["precision"]
                row["pseudo_recall"] = pseudo["recall"]
                row["pseudo_f1"] = pseudo["f1"]
                row["pseudo_count"] = pseudo["count"]
            ev = rec.get("eval")
            if ev:
                row["eval_map"] = ev["map"]
                row["eval_accuracy"] = ev["accuracy"]
            writer.writerow(row)
    try:
        summary = stability_report(records)
    except VgfmError:
        summary = {"collapse": None, "note": "fewer than two eval points"}
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
