"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 data error. With --json a
machine-readable summary of each command goes to standard output.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig, load_config
from .dataio import (DataFormatError, generate_dataset, load_manifest,
                     read_calibration, read_class_table, read_poses)
from .descriptor import (TrainableBackend, TrainParams, load_backend,
                         save_backend)
from .enrichment import LabeledImage, enrich_cloud
from .evaluation import (accuracy_report, pair_segments, retrieval_curve,
                         write_accuracy_csv, write_iou_csv,
                         write_retrieval_csv)
from .localize import load_map, save_map
from .pipeline import make_backend, run_pipeline
from .synth import scene_spec_from_json
from .training import ground_truth_observations, make_triplets


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="semloc", description=__doc__)
    parser.add_argument("--config", type=Path, help="pipeline config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--json", action="store_true",
                        help="print a JSON summary to stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", type=Path, help="class table file to copy in")

    p = sub.add_parser("enrich", help="back-project images onto clouds")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("build-map", help="build a target map from a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--backend-file", type=Path)

    p = sub.add_parser("localize", help="localize a dataset against a map")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--out", type=Path, help="localization CSV output")
    p.add_argument("--backend-file", type=Path)

    p = sub.add_parser("train", help="train the descriptor backend")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--triplets", type=int, default=256)

    p = sub.add_parser("eval-iou", help="segment overlap between two runs")
    p.add_argument("--data-a", type=Path, required=True)
    p.add_argument("--data-b", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval-retrieval", help="descriptor retrieval ranks")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--backend-file", type=Path)

    p = sub.add_parser("eval-loc", help="localization accuracy report")
    p.add_argument("--results", type=Path, required=True,
                   help="localization CSV from the localize command")
    p.add_argument("--ground-truth", type=Path, required=True,
                   help="pose file with ground truth")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("plot", help="render report CSVs to SVG")
    p.add_argument("--accuracy", type=Path)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads:
        cfg.threads = args.threads
    return cfg


def _get_backend(cfg, class_table, backend_file):
    if backend_file is not None:
        return load_backend(backend_file, class_table, n_sub=cfg.n_sub)
    return make_backend(cfg, class_table)


def _cmd_synth(args, cfg):
    spec = scene_spec_from_json(args.spec)
    table = read_class_table(args.classes) if args.classes else None
    manifest = generate_dataset(spec, args.out, class_table=table)
    return {"frames": len(manifest.frames), "out": str(args.out)}


def _cmd_enrich(args, cfg):
    manifest = load_manifest(args.data)
    if manifest.calibration_file is None:
        raise DataFormatError("dataset has no calibration file")
    cameras = read_calibration(manifest.root / manifest.calibration_file)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .dataio import DatasetManifest, FrameEntry, save_manifest, write_cloud
    entries = []
    for i, entry in enumerate(manifest.frames):
        frame = manifest.load_frame(i)
        images = []
        for cam in cameras:
            img_path = manifest.root / f"{Path(entry.cloud).stem}.{cam.name}.npz"
            if not img_path.exists():
                raise DataFormatError(f"missing image file {img_path}")
            data = np.load(img_path)
            images.append((cam, LabeledImage(data["color"], data["labels"])))
        enriched = enrich_cloud(frame, images)
        write_cloud(enriched, out / entry.cloud)
        entries.append(entry)
    new_manifest = DatasetManifest(out, tuple(entries),
                                   class_table_file=manifest.class_table_file)
    if manifest.class_table_file:
        (out / manifest.class_table_file).write_bytes(
            (manifest.root / manifest.class_table_file).read_bytes())
    save_manifest(new_manifest)
    return {"frames": len(entries), "out": str(out)}


def _cmd_build_map(args, cfg):
    manifest = load_manifest(args.data)
    backend = _get_backend(cfg, manifest.class_table(), args.backend_file)
    art = run_pipeline(manifest, cfg, mode="build-map", backend=backend)
    save_map(art.target_map, args.out)
    return {"segments": len(art.target_map), "map": str(args.out),
            "median_frame_seconds": art.median_frame_time}


def _cmd_localize(args, cfg):
    manifest = load_manifest(args.data)
    target_map = load_map(args.map)
    backend = _get_backend(cfg, manifest.class_table(), args.backend_file)
    art = run_pipeline(manifest, cfg, mode="localize",
                       target_map=target_map, backend=backend)
    if args.out:
        import csv
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["timestamp", "tx", "ty", "tz", "qw", "qx", "qy", "qz",
                        "inliers"])
            for res in art.results:
                t = res.transform
                w.writerow([f"{res.timestamp:.6f}",
                            *[f"{v:.9f}" for v in t.translation],
                            *[f"{v:.12f}" for v in t.rotation],
                            res.inlier_count])
    return {"steps": art.steps_attempted, "localizations": len(art.results),
            "median_frame_seconds": art.median_frame_time}


def _cmd_train(args, cfg):
    manifest = load_manifest(args.data)
    table = manifest.class_table()
    by_object = ground_truth_observations(manifest, voxel_size=cfg.voxel_size)
    triplets = make_triplets(by_object, args.triplets, seed=cfg.seed)
    backend = TrainableBackend(table, dim=cfg.descriptor_dim, n_sub=cfg.n_sub,
                               seed=cfg.seed)
    from .descriptor import train
    params = TrainParams(margin=cfg.margin, learning_rate=cfg.learning_rate,
                         epochs=cfg.epochs, batch_size=cfg.batch_size,
                         seed=cfg.seed,
                         augmentation=cfg.augment_params(tuple(table.ids())))
    history = train(backend, triplets, params)
    save_backend(backend, args.out)
    return {"triplets": len(triplets), "epochs": len(history),
            "final_loss": history[-1], "backend": str(args.out)}


def _run_observations(data, cfg):
    manifest = load_manifest(data)
    art = run_pipeline(manifest, cfg, mode="build-map")
    return manifest, art


def _cmd_eval_iou(args, cfg):
    _, art_a = _run_observations(args.data_a, cfg)
    _, art_b = _run_observations(args.data_b, cfg)
    report = pair_segments(art_a.final_observations, art_b.final_observations,
                           gate=cfg.pair_gate, n_samples=cfg.iou_samples,
                           seed=cfg.seed, threshold=cfg.iou_threshold)
    write_iou_csv(report, args.out)
    return {"pairs": len(report.pairs), "consistent": report.n_consistent,
            "inconsistent": report.n_inconsistent}


def _cmd_eval_retrieval(args, cfg):
    manifest = load_manifest(args.data)
    backend = _get_backend(cfg, manifest.class_table(), args.backend_file)
    art = run_pipeline(manifest, cfg, mode="build-map", backend=backend)
    finals = {o.segment_id: o for o in art.final_observations}
    queries = []
    for obs in art.observations:
        if obs.is_final or obs.segment_id not in finals:
            continue
        completeness = obs.point_count / finals[obs.segment_id].point_count
        queries.append((obs, obs.segment_id, min(completeness, 1.0)))
    curve = retrieval_curve(queries, art.target_map, backend, seed=cfg.seed)
    write_retrieval_csv(curve, args.out)
    return {"queries": len(curve.records), "recall_at_1": curve.recall_at(1)}


def _cmd_eval_loc(args, cfg):
    import csv

    from .core import Pose
    from .localize import LocalizationResult
    if not Path(args.ground_truth).exists():
        raise DataFormatError(f"missing ground truth file {args.ground_truth}")
    gt = read_poses(args.ground_truth)
    results = []
    with open(args.results) as f:
        for row in csv.DictReader(f):
            pose = Pose(np.array([float(row["tx"]), float(row["ty"]),
                                  float(row["tz"])]),
                        np.array([float(row["qw"]), float(row["qx"]),
                                  float(row["qy"]), float(row["qz"])]))
            results.append(LocalizationResult(pose, (),
                                              timestamp=float(row["timestamp"])))
    report = accuracy_report(results, gt)
    write_accuracy_csv(report, args.out)
    return {"localizations": len(report.entries),
            "below_1m": report.n_below_1m, "below_5m": report.n_below_5m,
            "dropped": report.dropped}


def _cmd_plot(args, cfg):
    import csv

    from .evaluation import AccuracyEntry, AccuracyReport
    from .plots import plot_accuracy_curve
    if args.accuracy is None:
        raise UsageError("plot requires --accuracy")
    entries = []
    with open(args.accuracy) as f:
        for row in csv.DictReader(f):
            entries.append(AccuracyEntry(float(row["timestamp"]),
                                         float(row["translation_error_m"]),
                                         float(row["rotation_error_deg"])))
    plot_accuracy_curve(AccuracyReport(tuple(entries)), args.out)
    return {"plot": str(args.out)}


_COMMANDS = {
    "synth": _cmd_synth,
    "enrich": _cmd_enrich,
    "build-map": _cmd_build_map,
    "localize": _cmd_localize,
    "train": _cmd_train,
    "eval-iou": _cmd_eval_iou,
    "eval-retrieval": _cmd_eval_retrieval,
    "eval-loc": _cmd_eval_loc,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_cfg(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        summary = _COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
