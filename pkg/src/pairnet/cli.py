"""Command-line entry point: ``pairnet {synth,train,eval,inspect,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .heatmap import inspect_image
from .metrics import GroundTruth, RankedTriplets, evaluate
from .model import infer
from .oracle import EmbeddingTable, assign_queries, load_precomputed, oracle_queries, save_precomputed
from .presets import standard_synth_config, standard_train_config
from .scene import load_dataset, save_dataset
from .synth import synthesize
from .trainer import (EVAL_SALT, TrainConfig, check_extents, evaluate_model, load_run, save_run,
                      split_indices, train)

ANNOTATIONS = "annotations.json"


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CLIError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: malformed JSON at line {exc.lineno}") from exc


def _annotations(data):
    path = Path(data)
    return path / ANNOTATIONS if path.is_dir() else path


def _parse_ks(text):
    try:
        ks = sorted({int(k) for k in text.split(",") if k.strip()})
    except ValueError as exc:
        raise CLIError(f"--k expects comma-separated integers, got {text!r}") from exc
    if not ks or ks[0] < 1:
        raise CLIError("--k values must be positive")
    return ks


def _apply_oracle_flags(config, args):
    for flag, name in (("noise", "noise"), ("flip_prob", "flip_prob"),
                       ("perturb_rate", "perturb_rate")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config.oracle, name, value)
    config.oracle.__post_init__()


def _eval_split(dataset, config, split):
    if split == "all":
        return dataset
    _, val_idx = split_indices(len(dataset.scenes), config.val_count)
    return dataset.subset(val_idx)


def cmd_synth(args):
    raw = _read_json(args.config) if args.config else {}
    try:
        config = standard_synth_config(**raw)
    except TypeError as exc:
        raise CLIError(f"bad synth config: {exc}") from exc
    dataset = synthesize(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / ANNOTATIONS, dataset)
    print(f"wrote {len(dataset.scenes)} scenes to {out / ANNOTATIONS}")


def cmd_train(args):
    raw = _read_json(args.config) if args.config else {}
    config = TrainConfig.from_dict(raw) if args.from_defaults else standard_train_config(**raw)
    _apply_oracle_flags(config, args)
    dataset = load_dataset(_annotations(args.data))

    def progress(epoch, losses, report):
        line = f"epoch {epoch}: total {losses['total']:.4f} ppn {losses['ppn']:.4f}"
        if report is not None:
            k = min(report.recall)
            line += (f" | val R@{k} {report.recall[k]:.3f} mR@{k} {report.mean_recall[k]:.3f}"
                     f" pair-R@{k} {report.pair_recall[k]:.3f}")
        print(line, flush=True)

    model, record = train(config, dataset, progress=progress)
    ckpt = save_run(args.out, model, config, record)
    print(f"checkpoint: {ckpt} ({record.wall_clock:.1f}s)")


def _dump_predictions(path, model, config, dataset):
    """Ranked triplets as JSON plus the query sets (masks, class logits) as .pnet."""
    table = EmbeddingTable.create(dataset.n_object_classes, config.oracle)
    images, query_sets = [], {}
    for scene in dataset.scenes:
        qs = oracle_queries(scene, table, config.oracle, salt=EVAL_SALT)
        if qs is None:
            continue
        ranked, _ = infer(model, qs, fold_pair_score=config.fold_pair_score)
        images.append({"image_id": scene.image_id, "triplets": [
            {"sub_query": p.sub_query, "obj_query": p.obj_query, "sub_class": p.sub_class,
             "obj_class": p.obj_class, "rel_class": p.rel_class, "score": p.score}
            for p in ranked]})
        query_sets[scene.image_id] = qs
    path = Path(path)
    masks = path.with_suffix(".masks.pnet")
    save_precomputed(masks, query_sets)
    path.write_text(json.dumps({"masks": masks.name, "n_queries": config.n_queries,
                                "dim": config.dim, "images": images}), encoding="utf-8")


def cmd_eval(args):
    model, config = load_run(args.ckpt)
    _apply_oracle_flags(config, args)
    dataset = load_dataset(_annotations(args.data))
    check_extents(model, dataset)
    subset = _eval_split(dataset, config, args.split)
    report = evaluate_model(model, config, subset, _parse_ks(args.k), claiming=args.claiming)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    if args.pred:
        _dump_predictions(args.pred, model, config, subset)


def cmd_inspect(args):
    model, config = load_run(args.ckpt)
    _apply_oracle_flags(config, args)
    dataset = load_dataset(_annotations(args.data))
    check_extents(model, dataset)
    try:
        dataset.by_id(args.image)
    except KeyError as exc:
        raise CLIError(f"no image {args.image!r} in {args.data}") from exc
    sidecar = inspect_image(model, config, dataset, args.image, args.out)
    for panel in sidecar["panels"].values():
        print(Path(args.out) / panel["file"])


def cmd_report(args):
    pred_path = Path(args.pred)
    raw = _read_json(pred_path)
    dataset = load_dataset(_annotations(args.gt))
    query_sets = load_precomputed(pred_path.parent / raw["masks"], raw["n_queries"], raw["dim"])
    images, sets, assignments = [], [], []
    for entry in raw["images"]:
        image_id = entry["image_id"]
        try:
            scene, graph = dataset.by_id(image_id)
        except KeyError as exc:
            raise CLIError(f"prediction for unknown image {image_id!r}") from exc
        if image_id not in query_sets:
            raise CLIError(f"no masks stored for image {image_id!r}")
        qs = query_sets[image_id]
        rows = entry["triplets"]
        col = lambda key: np.array([t[key] for t in rows], dtype=np.int64)  # noqa: E731
        pred = RankedTriplets(col("sub_query"), col("obj_query"), col("sub_class"),
                              col("obj_class"), col("rel_class"),
                              np.array([t["score"] for t in rows], dtype=np.float64),
                              qs.binary_masks())
        images.append((pred, GroundTruth(scene, graph)))
        sets.append(qs)
        assignments.append(assign_queries(scene, qs))
    report = evaluate(images, _parse_ks(args.k), claiming=args.claiming, query_sets=sets,
                      assignments=assignments, n_relation_classes=dataset.n_relation_classes)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    return report


def _oracle_flags(parser):
    parser.add_argument("--noise", type=float, help="oracle query noise sigma")
    parser.add_argument("--flip-prob", dest="flip_prob", type=float,
                        help="probability an oracle class label is flipped")
    parser.add_argument("--perturb-rate", dest="perturb_rate", type=float,
                        help="probability each mask boundary pixel is flipped")


def build_parser():
    parser = _Parser(prog="pairnet", description="Pair-proposal scene-graph toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON overriding the standard SynthConfig fields")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON overriding TrainConfig fields")
    p.add_argument("--from-defaults", dest="from_defaults", action="store_true",
                   help="fill unspecified fields from the full-size defaults "
                        "instead of the standard desk-scale preset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _oracle_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", default="20,50,100")
    p.add_argument("--out")
    p.add_argument("--pred", help="also dump ranked predictions to this JSON file")
    p.add_argument("--split", choices=["val", "all"], default="val")
    p.add_argument("--claiming", choices=["greedy", "optimal"], default="greedy")
    _oracle_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="export pair-matrix and attention heatmaps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    _oracle_flags(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("report", help="score dumped predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--k", default="20,50,100")
    p.add_argument("--out")
    p.add_argument("--claiming", choices=["greedy", "optimal"], default="greedy")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except SystemExit as exc:  # --help
        return exc.code or 0
    except KeyboardInterrupt:
        print("pairnet: error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"pairnet: error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
