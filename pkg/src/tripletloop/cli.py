"""Batch entry points: synth/ingest -> baseline -> triplets -> train -> eval -> compare -> serve.

Every stage writes its artifacts into a fresh run directory under the
workdir (named by timestamp + seed, never overwritten) and records it as the
stage's latest output, which the next stage picks up by default.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime
from pathlib import Path

from . import data as D
from . import models as M
from .evaluation import (
    ConfusionPartition,
    MetricsReport,
    build_report,
    render_report_table,
    write_inference_log,
)
from .pipeline import (
    pretrain_classifier,
    resolve_pathologies,
    run_baseline,
    weaken_classifier,
)
from .stats import compare_reports, render_comparison_table
from .training import (
    TrainConfig,
    compute_prototypes,
    reclassify_failures,
    train_fingerprint,
    train_incremental,
    train_tfsl,
)
from .triplets import (
    TripletDatasetConfig,
    build_training_triplets,
    build_validation_triplets,
    read_triplets,
    write_triplets,
)

STAGES = ("dataset", "baseline", "triplets", "train", "eval", "compare")


def _now_tag() -> str:
    return datetime.now().strftime("%Y%m%dT%H%M%S%f")


def _new_run_dir(workdir: Path, stage: str, seed: int) -> Path:
    run = workdir / f"{stage}-{_now_tag()}-seed{seed}"
    run.mkdir(parents=True, exist_ok=False)
    return run


def _write_pointer(workdir: Path, stage: str, run_dir: Path) -> None:
    pointer_dir = workdir / ".latest"
    pointer_dir.mkdir(parents=True, exist_ok=True)
    (pointer_dir / stage).write_text(str(run_dir))


def _read_pointer(workdir: Path, stage: str) -> Path:
    pointer = workdir / ".latest" / stage
    if not pointer.exists():
        raise FileNotFoundError(
            f"no {stage} artifacts under {workdir}; run the {stage} stage first"
        )
    return Path(pointer.read_text().strip())


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _resolve_pathology_arg(name: str) -> str:
    if name == "all":
        return name
    return D.pathology_name(D.pathology_index(name))


def _safe(name: str) -> str:
    return name.replace(" ", "_")


def cmd_synth(args) -> int:
    workdir = Path(args.workdir)
    spec = D.SyntheticSpec(
        image_size=args.image_size,
        n_pathologies=args.n_pathologies,
        noise_sigma=args.noise_sigma,
        prevalence=args.prevalence,
        seed=args.seed,
    )
    records = D.generate_synthetic_dataset(spec, args.n_images)
    run_dir = _new_run_dir(workdir, "dataset", args.seed)
    D.write_dataset(records, run_dir, spec=spec)
    _write_pointer(workdir, "dataset", run_dir)
    print(f"dataset: {len(records)} images -> {run_dir}")
    return 0


def cmd_ingest(args) -> int:
    workdir = Path(args.workdir)
    cfg = D.PreprocessConfig(resize_to=args.resize, crop_to=args.crop)
    records = D.load_manifest(args.manifest, policy=args.policy, cfg=cfg)
    run_dir = _new_run_dir(workdir, "dataset", args.seed)
    # Stored images are already preprocessed, so downstream loads are identity.
    D.write_dataset(records, run_dir,
                    preprocess=D.PreprocessConfig(resize_to=args.crop, crop_to=args.crop))
    _write_pointer(workdir, "dataset", run_dir)
    print(f"dataset: ingested {len(records)} images -> {run_dir}")
    return 0


def _load_dataset(args, workdir: Path):
    dataset_dir = Path(args.dataset) if getattr(args, "dataset", None) else _read_pointer(workdir, "dataset")
    records, meta = D.load_dataset_dir(dataset_dir, policy=getattr(args, "policy", "negative"))
    return dataset_dir, records, meta


def cmd_baseline(args) -> int:
    workdir = Path(args.workdir)
    dataset_dir, records, dataset_meta = _load_dataset(args, workdir)
    preprocess = D.PreprocessConfig.from_dict(dataset_meta["preprocess"])
    train_records, eval_records = D.split_dataset(records, (args.train_frac, 1 - args.train_frac), args.seed)
    if args.checkpoint:
        model, _ = M.load_checkpoint(args.checkpoint)
        classifier = model
    else:
        classifier = pretrain_classifier(
            train_records, epochs=args.pretrain_epochs,
            learning_rate=args.pretrain_lr, seed=args.seed,
        )
        if args.weaken_quantile is not None:
            weaken_classifier(classifier, train_records, args.weaken_quantile)
    artifacts = run_baseline(classifier, eval_records, args.threshold, timestamp=_now_tag())

    run_dir = _new_run_dir(workdir, "baseline", args.seed)
    M.save_checkpoint(classifier, run_dir / "classifier.ckpt", preprocess=preprocess, seed=args.seed)
    write_inference_log(artifacts.inference_records, run_dir / "inference.jsonl")
    (run_dir / "partition.json").write_text(
        json.dumps(artifacts.partition.to_dict(), indent=2, sort_keys=True)
    )
    artifacts.report.save(run_dir / "report.json")
    (run_dir / "split.json").write_text(json.dumps({
        "seed": args.seed,
        "train_frac": args.train_frac,
        "train_ids": sorted(r.image_id for r in train_records),
        "eval_ids": sorted(r.image_id for r in eval_records),
        "split_id": artifacts.split_id,
    }, indent=2, sort_keys=True))
    (run_dir / "baseline.json").write_text(json.dumps({
        "dataset_dir": str(dataset_dir),
        "preprocess": preprocess.to_dict(),
        "threshold": args.threshold,
        "split_id": artifacts.split_id,
        "pretrain_epochs": args.pretrain_epochs,
        "pretrain_lr": args.pretrain_lr,
        "weaken_quantile": args.weaken_quantile,
    }, indent=2, sort_keys=True))
    _write_pointer(workdir, "baseline", run_dir)
    print(render_report_table(artifacts.report))
    print(f"baseline -> {run_dir}")
    return 0


def _load_baseline(workdir: Path):
    base_dir = _read_pointer(workdir, "baseline")
    meta = json.loads((base_dir / "baseline.json").read_text())
    partition = ConfusionPartition.from_dict(json.loads((base_dir / "partition.json").read_text()))
    report = MetricsReport.load(base_dir / "report.json")
    split = json.loads((base_dir / "split.json").read_text())
    return base_dir, meta, partition, report, split


def _eval_records(meta: dict, split: dict) -> list:
    records, _ = D.load_dataset_dir(meta["dataset_dir"])
    eval_ids = set(split["eval_ids"])
    return [r for r in records if r.image_id in eval_ids]


def cmd_triplets(args) -> int:
    workdir = Path(args.workdir)
    _, _, partition, _, _ = _load_baseline(workdir)
    target = _resolve_pathology_arg(args.pathology)
    names, skipped = resolve_pathologies(partition, target, skip_unsatisfiable=(target == "all"))
    cfg = TripletDatasetConfig(n_train=args.n, seed=args.seed)
    run_dir = _new_run_dir(workdir, "triplets", args.seed)
    built = {}
    for name in names:
        train_set = build_training_triplets(partition, name, cfg)
        val_set = build_validation_triplets(partition, name, {t.anchor_id for t in train_set}, cfg)
        write_triplets({"train": train_set, "val": val_set}, run_dir / f"triplets-{_safe(name)}.jsonl")
        built[name] = {"train": len(train_set), "val": len(val_set)}
    (run_dir / "meta.json").write_text(json.dumps({
        "n_train": args.n, "seed": args.seed, "target": target,
        "pathologies": names, "skipped": skipped,
    }, indent=2, sort_keys=True))
    _write_pointer(workdir, "triplets", run_dir)
    for name, counts in built.items():
        print(f"{name}: {counts['train']} training / {counts['val']} validation triplets")
    if skipped:
        print(f"skipped: {skipped}")
    print(f"triplets -> {run_dir}")
    return 0


def cmd_train(args) -> int:
    workdir = Path(args.workdir)
    base_dir, meta, partition, report, split = _load_baseline(workdir)
    triplet_dir = _read_pointer(workdir, "triplets")
    triplet_meta = json.loads((triplet_dir / "meta.json").read_text())
    classifier, _ = M.load_checkpoint(base_dir / "classifier.ckpt")
    records = _eval_records(meta, split)
    by_id = {r.image_id: r for r in records}

    target = _resolve_pathology_arg(args.pathology)
    if target == "all":
        names = triplet_meta["pathologies"]
    else:
        if target not in triplet_meta["pathologies"]:
            raise ValueError(f"no triplets built for {target!r}; available: {triplet_meta['pathologies']}")
        names = [target]

    cfg = TrainConfig(
        epochs=args.epochs, learning_rate=args.lr, weight_decay=args.weight_decay,
        margin=args.margin, loss_kind=args.loss, batch_size=args.batch_size,
        seed=args.seed, backbone_trainable=not args.freeze_backbone,
    )
    run_dir = _new_run_dir(workdir, "train", args.seed)
    trained = {}
    if args.mode == "tfsl":
        for name in names:
            sets = read_triplets(triplet_dir / f"triplets-{_safe(name)}.jsonl")
            embedding = M.swap_embedding_head(classifier, seed=args.head_seed)
            trained[name] = train_tfsl(embedding, sets["train"], by_id, cfg)
    else:
        pooled = []
        for name in names:
            pooled.extend(read_triplets(triplet_dir / f"triplets-{_safe(name)}.jsonl")["train"])
        embedding = M.swap_embedding_head(classifier, seed=args.head_seed)
        trained["all"] = train_incremental(embedding, pooled, by_id, cfg)

    preprocess = D.PreprocessConfig.from_dict(meta["preprocess"]) if "preprocess" in meta else None
    for key, result in trained.items():
        result.checkpoint_id = M.save_checkpoint(
            result.model, run_dir / f"model-{_safe(key)}.ckpt", preprocess=preprocess,
            seed=cfg.seed, train_fingerprint=train_fingerprint(cfg),
        )
        (run_dir / f"job-{_safe(key)}.json").write_text(
            json.dumps(result.job_record(), indent=2, sort_keys=True)
        )
        print(f"{key}: epoch losses {[round(v, 4) for v in result.loss_trace]} "
              f"({result.duration_seconds:.1f}s)")
    (run_dir / "meta.json").write_text(json.dumps({
        "mode": args.mode, "pathologies": names, "config": cfg.to_dict(),
        "head_seed": args.head_seed, "triplet_dir": str(triplet_dir),
    }, indent=2, sort_keys=True))
    _write_pointer(workdir, "train", run_dir)
    print(f"train -> {run_dir}")
    return 0


def cmd_eval(args) -> int:
    workdir = Path(args.workdir)
    base_dir, meta, partition, report, split = _load_baseline(workdir)
    train_dir = _read_pointer(workdir, "train")
    train_meta = json.loads((train_dir / "meta.json").read_text())
    triplet_dir = Path(train_meta["triplet_dir"])
    records = _eval_records(meta, split)
    by_id = {r.image_id: r for r in records}

    checkpoint_ids = {}
    updated = partition.copy()
    for name in train_meta["pathologies"]:
        key = name if train_meta["mode"] == "tfsl" else "all"
        model, model_meta = M.load_checkpoint(train_dir / f"model-{_safe(key)}.ckpt")
        checkpoint_ids[key] = model_meta["checkpoint_id"]
        sets = read_triplets(triplet_dir / f"triplets-{_safe(name)}.jsonl")
        prototypes = compute_prototypes(model, partition, name, by_id,
                                        support_size=args.support_size, seed=args.seed)
        anchors = [t.anchor_id for t in sets["val"]]
        updated = reclassify_failures(model, updated, name, prototypes, anchors, by_id)

    after = build_report(updated, {
        "checkpoint_ids": checkpoint_ids,
        "split_id": split["split_id"],
        "mode": train_meta["mode"],
        "timestamp": _now_tag(),
    })
    run_dir = _new_run_dir(workdir, "eval", args.seed)
    (run_dir / "partition_after.json").write_text(
        json.dumps(updated.to_dict(), indent=2, sort_keys=True)
    )
    after.save(run_dir / "report_after.json")
    _write_pointer(workdir, "eval", run_dir)
    print(render_report_table(after))
    print(f"eval -> {run_dir}")
    return 0


def cmd_compare(args) -> int:
    workdir = Path(args.workdir)
    _, _, _, before, _ = _load_baseline(workdir)
    try:
        eval_dir = _read_pointer(workdir, "eval")
    except FileNotFoundError:
        # train -> compare without an explicit eval stage: run it with defaults
        eval_args = argparse.Namespace(workdir=args.workdir, seed=args.seed, support_size=20)
        cmd_eval(eval_args)
        eval_dir = _read_pointer(workdir, "eval")
    after = MetricsReport.load(eval_dir / "report_after.json")
    comparison = compare_reports(before, after)
    run_dir = _new_run_dir(workdir, "compare", args.seed)
    (run_dir / "comparison.json").write_text(json.dumps(comparison, indent=2, sort_keys=True))
    table = render_comparison_table(comparison)
    (run_dir / "comparison.txt").write_text(table + "\n")
    _write_pointer(workdir, "compare", run_dir)
    print(table)
    print(f"compare -> {run_dir}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import LoopService, create_app

    workdir = Path(args.workdir)
    service = LoopService.from_workdir(workdir)
    app = create_app(service, ui_dir=Path(args.ui_dir) if args.ui_dir else None)
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    finally:
        service.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tripletloop")
    parser.add_argument("--workdir", default="runs", help="artifact root (default: ./runs)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-images", type=_positive_int, default=900)
    p.add_argument("--image-size", type=_positive_int, default=64)
    p.add_argument("--n-pathologies", type=_positive_int, default=2)
    p.add_argument("--noise-sigma", type=float, default=0.08)
    p.add_argument("--prevalence", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="load a CSV manifest + images into a dataset dir")
    p.add_argument("--manifest", required=True)
    p.add_argument("--policy", choices=D.UNCERTAIN_POLICIES, default="negative")
    p.add_argument("--resize", type=_positive_int, default=320)
    p.add_argument("--crop", type=_positive_int, default=224)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("baseline", help="train/load a classifier and run baseline inference")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", help="dataset dir (default: latest)")
    p.add_argument("--checkpoint", help="load this classifier instead of pretraining")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--train-frac", type=float, default=0.4)
    p.add_argument("--pretrain-epochs", type=int, default=20)
    p.add_argument("--pretrain-lr", type=float, default=1e-3)
    p.add_argument("--weaken-quantile", type=float, default=0.8,
                   help="positive-logit quantile subtracted from each output bias")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("triplets", help="build training/validation triplets from the baseline")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=_positive_int, default=150)
    p.add_argument("--pathology", default="all")
    p.set_defaults(func=cmd_triplets)

    p = sub.add_parser("train", help="retrain the embedding head on triplets")
    p.add_argument("--mode", choices=("tfsl", "incremental"), default="tfsl")
    p.add_argument("--pathology", default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--head-seed", type=int, default=0)
    p.add_argument("--epochs", type=_positive_int, default=5)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--batch-size", type=_positive_int, default=16)
    p.add_argument("--loss", choices=("margin_ranking", "triplet_margin"), default="margin_ranking")
    p.add_argument("--freeze-backbone", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="reclassify validation failures with prototypes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--support-size", type=_positive_int, default=20)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="diff the baseline and post-repair reports")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("serve", help="start the review/retraining HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--ui-dir", help="static UI bundle to serve at /ui")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every pipeline error becomes exit 1
        print(json.dumps({"code": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
