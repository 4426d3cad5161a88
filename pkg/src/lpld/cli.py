"""Command-line pipeline: squeeze, recover, relabel, prune, validate, analyze.

Every phase writes its artifacts plus a manifest (config hash, input/output
checksums, tool version) and a schema-validated JSON report. `lpld run`
drives all phases from one INI config and is resumable per phase.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import jsonschema

from lpld import __version__
from lpld.bn import BoundInputs, apply_class_stats, load_class_stats, monte_carlo_convergence, required_updates
from lpld.data import LabeledDataset, load_image_dir, make_toy_splits
from lpld.errors import ConfigError, LPLDError
from lpld.diversity import extract_features, mmd_squared, within_class_cosine
from lpld.labelpool import (
    METRICS,
    calibrate_pool,
    load_pool,
    prune_by_metric,
    prune_random,
    sample_training_stream,
    save_pool,
    score_labels,
    storage_report,
)
from lpld.layers import Network, NetworkSpec, small_cnn_spec
from lpld.recover import (
    RecoverConfig,
    export_contact_sheets,
    export_images,
    load_condensed,
    synthesize,
    teacher_checksum,
)
from lpld.relabel import AugConfig, LabelStoreFile, generate_labels, save_label_store
from lpld.squeeze import (
    TeacherModel,
    TrainConfig,
    class_stats_storage,
    estimate_class_stats,
    save_teacher_stats,
    train_teacher,
)
from lpld.util import json_hash, sha256_file
from lpld.validate import StudentConfig, evaluate, train_student

REPORT_SCHEMA = {
    "type": "object",
    "required": ["phase", "provenance"],
    "properties": {
        "phase": {"type": "string"},
        "provenance": {
            "type": "object",
            "required": ["seed", "tool_version", "config_hash"],
            "properties": {
                "seed": {"type": "integer"},
                "tool_version": {"type": "string"},
                "config_hash": {"type": "string"},
                "input_checksums": {"type": "object"},
            },
        },
    },
}

PHASES = ("squeeze", "recover", "relabel", "prune", "validate", "analyze")


def effective_seed(seed: int) -> int:
    env = os.environ.get("LPLD_SEED")
    return int(env) if env else seed


def write_report(path, phase: str, seed: int, config: dict, payload: dict,
                 inputs: dict | None = None) -> dict:
    report = {
        "phase": phase,
        "provenance": {
            "seed": seed,
            "tool_version": __version__,
            "config_hash": json_hash(config).hex(),
            "input_checksums": inputs or {},
        },
    }
    report.update(payload)
    jsonschema.validate(report, REPORT_SCHEMA)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=2, default=float))
    return report


def write_manifest(path, phase: str, seed: int, config: dict,
                   inputs: dict, outputs: dict) -> dict:
    manifest = {
        "phase": phase,
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "config_hash": json_hash(config).hex(),
        "inputs": inputs,
        "outputs": outputs,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest, indent=2, default=float))
    return manifest


def write_csv(path, rows: list[dict]):
    if not rows:
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def hash_files(*paths) -> dict:
    return {str(p): sha256_file(p) for p in paths if p and Path(p).exists()}


# ---- shared loaders -----------------------------------------------------------

def add_dataset_args(parser, prefix: str = ""):
    p = f"--{prefix}" if prefix else "--"
    parser.add_argument(f"{p}classes", type=int, default=10)
    parser.add_argument(f"{p}per-class", type=int, default=300)
    parser.add_argument(f"{p}image-size", type=int, default=32)
    parser.add_argument(f"{p}noise", type=float, default=0.45)
    parser.add_argument(f"{p}test-per-class", type=int, default=100)
    parser.add_argument(f"{p}data-seed", type=int, default=0)


def load_dataset(source: str, args, split: str = "train") -> LabeledDataset:
    if source != "synthetic":
        return load_image_dir(source)
    train, test = make_toy_splits(
        num_classes=args.classes, per_class=args.per_class,
        test_per_class=args.test_per_class, image_size=args.image_size,
        noise=args.noise, seed=args.data_seed)
    return train if split == "train" else test


def load_net_spec(path: str | None, input_shape, num_classes: int) -> NetworkSpec:
    if path:
        return NetworkSpec.from_json(Path(path).read_text())
    return small_cnn_spec(input_shape, num_classes)


def load_teacher(ckpt_path, stats_path=None) -> TeacherModel:
    if not Path(ckpt_path).exists():
        raise ConfigError(f"missing artifact: {ckpt_path}")
    net, extras = Network.load(ckpt_path)
    top1 = float(extras["meta.top1"].reshape(-1)[0]) if "meta.top1" in extras else 0.0
    teacher = TeacherModel(net=net, top1_accuracy=top1)
    if stats_path:
        if not Path(stats_path).exists():
            raise ConfigError(f"missing artifact: {stats_path}")
        states = [net.bn_states[lid] for lid in net.bn_layer_ids()]
        apply_class_stats(states, load_class_stats(stats_path))
        teacher.stats_estimated = True
    return teacher


# ---- subcommands ----------------------------------------------------------------

def cmd_squeeze(args) -> int:
    seed = effective_seed(args.seed)
    train = load_dataset(args.data, args, "train")
    test = load_dataset(args.data, args, "test") if args.data == "synthetic" else train
    spec = load_net_spec(args.net, train.images.shape[1:], train.num_classes)
    config = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=seed)
    teacher = train_teacher(train, spec, config, eval_dataset=test)
    bound = estimate_class_stats(teacher, train, batch_size=args.stats_batch_size,
                                 eps_mom=args.bn_momentum, seed=seed)
    teacher.net.save(args.out, extra={"meta.top1": np.asarray([teacher.top1_accuracy])})
    save_teacher_stats(teacher, args.stats_out)
    cfg = vars(args).copy()
    payload = {
        "top1_accuracy": teacher.top1_accuracy,
        "teacher_checksum": teacher_checksum(teacher),
        "class_stats_bytes": class_stats_storage(teacher),
        "missing_classes": teacher.missing_classes,
    }
    write_report(args.report, "squeeze", seed, cfg, payload,
                 inputs={} if args.data == "synthetic" else hash_files(args.data))
    write_manifest(Path(args.out).with_suffix(".manifest.json"), "squeeze", seed, cfg,
                   inputs={}, outputs=hash_files(args.out, args.stats_out, args.report))
    print(f"squeeze: top1={teacher.top1_accuracy:.4f} -> {args.out}, {args.stats_out}")
    return 0


def cmd_recover(args) -> int:
    seed = effective_seed(args.seed)
    teacher = load_teacher(args.teacher, args.stats if args.mode == "lpld" else args.stats or None)
    config = RecoverConfig(iterations=args.iters, image_lr=args.image_lr,
                           alpha=args.alpha, seed=seed, threads=args.threads)
    condensed = synthesize(teacher, ipc=args.ipc, config=config, mode=args.mode)
    export_images(condensed, args.out)
    final_losses = {k: v[-1] for k, v in condensed.loss_history.items()}
    cfg = vars(args).copy()
    payload = {
        "mode": args.mode,
        "ipc": args.ipc,
        "num_images": len(condensed),
        "teacher_checksum": condensed.teacher_checksum,
        "final_losses": final_losses,
    }
    write_report(args.report, "recover", seed, cfg, payload,
                 inputs=hash_files(args.teacher, args.stats))
    write_manifest(Path(args.out) / "recover.manifest.json", "recover", seed, cfg,
                   inputs=hash_files(args.teacher, args.stats),
                   outputs=hash_files(Path(args.out) / "manifest.json", args.report))
    print(f"recover: {len(condensed)} images ({args.mode}) -> {args.out}")
    return 0


def cmd_relabel(args) -> int:
    seed = effective_seed(args.seed)
    teacher = load_teacher(args.teacher, args.stats)
    condensed = load_condensed(args.data)
    if condensed.teacher_checksum != teacher_checksum(teacher):
        raise ConfigError("condensed dataset was synthesized by a different teacher")
    aug = AugConfig(mix=args.mix, flip_prob=args.flip_prob,
                    crop_scale=(args.crop_scale_min, args.crop_scale_max))
    store = generate_labels(teacher, condensed, epochs=args.epochs,
                            batch_size=args.batch, aug_config=aug, seed=seed)
    nbytes = save_label_store(store, args.out)
    report = storage_report(store, args.data)
    cfg = vars(args).copy()
    payload = {
        "records": len(store.records),
        "epochs": args.epochs,
        "file_bytes": nbytes,
        "image_bytes": report.image_bytes,
        "label_bytes": report.label_bytes,
        "label_image_ratio": report.ratio,
    }
    write_report(args.report, "relabel", seed, cfg, payload,
                 inputs=hash_files(args.teacher, args.stats, Path(args.data) / "manifest.json"))
    write_manifest(Path(args.out).with_suffix(".manifest.json"), "relabel", seed, cfg,
                   inputs=hash_files(args.teacher, Path(args.data) / "manifest.json"),
                   outputs=hash_files(args.out, args.report))
    print(f"relabel: {len(store.records)} records, {nbytes} bytes -> {args.out}")
    return 0


def cmd_prune(args) -> int:
    seed = effective_seed(args.seed)
    if not Path(args.labels).exists():
        raise ConfigError(f"missing artifact: {args.labels}")
    store_file = LabelStoreFile(args.labels)
    store = store_file.load()
    keep_ratio = 1.0 / args.ratio
    calibrated = None
    if args.calibrate:
        easy, hard = (float(x) for x in args.calibrate.split(","))
        confidence = score_labels(store, _store_labels(store, args), "confidence")
        calibrated = calibrate_pool(store, confidence, easy, hard)
    if args.metric == "random":
        pool = prune_random(calibrated or store, args.granularity, keep_ratio, seed=seed)
    else:
        if calibrated is not None:
            raise ConfigError("calibration applies to random pruning only")
        scores = score_labels(store, _store_labels(store, args), args.metric)
        pool = prune_by_metric(store, scores, args.mode, keep_ratio)
    save_pool(pool, args.out, store_file.header_hash())
    report = storage_report(pool, args.data) if args.data else None
    cfg = vars(args).copy()
    payload = {
        "kept_records": len(pool),
        "total_records": store.header.num_records,
        "granularity": args.granularity,
        "metric": args.metric,
        "compression": store.header.num_records / len(pool),
    }
    if report:
        payload.update(image_bytes=report.image_bytes, label_bytes=report.label_bytes,
                       label_image_ratio=report.ratio)
    write_report(args.report, "prune", seed, cfg, payload, inputs=hash_files(args.labels))
    write_csv(Path(args.report).with_suffix(".csv"), [payload])
    write_manifest(Path(args.out).with_suffix(".manifest.json"), "prune", seed, cfg,
                   inputs=hash_files(args.labels), outputs=hash_files(args.out, args.report))
    print(f"prune: kept {len(pool)}/{store.header.num_records} ({args.metric}, {args.granularity}) -> {args.out}")
    return 0


def _store_labels(store, args) -> np.ndarray:
    """Hard labels of the condensed images (class-major layout)."""
    return np.repeat(np.arange(store.header.num_classes, dtype=np.int64), store.header.ipc)


def cmd_validate(args) -> int:
    seed = effective_seed(args.seed)
    for p in (args.labels, args.pool):
        if not Path(p).exists():
            raise ConfigError(f"missing artifact: {p}")
    condensed = load_condensed(args.data)
    store_file = LabelStoreFile(args.labels)
    store = store_file.load()
    pool = load_pool(args.pool, store, expected_store_hash=store_file.header_hash())
    spec = load_net_spec(args.student, condensed.images.shape[1:], condensed.num_classes)
    config = StudentConfig(epochs=args.epochs, lr=args.lr,
                           loss="mse_gt" if args.loss == "msegt" else args.loss, seed=seed)
    test = load_dataset(args.testdata, args, "test") if args.testdata else None
    run = train_student(condensed, pool, spec, config,
                        norm_mean=condensed.norm_mean or None,
                        norm_std=condensed.norm_std or None, test_set=test)
    cfg = vars(args).copy()
    payload = {
        "final_accuracy": run.final_accuracy,
        "epoch_loss": run.epoch_loss,
        "epochs": args.epochs,
        "loss_kind": config.loss,
        "pool_records": len(pool),
    }
    write_report(args.report, "validate", seed, cfg, payload,
                 inputs=hash_files(args.labels, args.pool, Path(args.data) / "manifest.json"))
    write_csv(Path(args.report).with_suffix(".csv"),
              [{"epoch": i, "loss": l} for i, l in enumerate(run.epoch_loss)])
    write_manifest(Path(args.report).with_suffix(".manifest.json"), "validate", seed, cfg,
                   inputs=hash_files(args.labels, args.pool), outputs=hash_files(args.report))
    print(f"validate: accuracy={run.final_accuracy:.4f} ({len(pool)} pooled records)")
    return 0


def cmd_analyze(args) -> int:
    seed = effective_seed(args.seed)
    teacher = load_teacher(args.teacher, args.stats)
    syn = load_condensed(args.syn)
    real = load_dataset(args.real, args, "train")
    syn_fs = extract_features(teacher, syn.images, syn.labels)
    real_fs = extract_features(teacher, real.images, real.labels)
    per_class, mean, std, skipped = within_class_cosine(syn_fs)
    real_per_class, real_mean, real_std, _ = within_class_cosine(real_fs)
    mmd2 = mmd_squared(real_fs, syn_fs)
    cfg = vars(args).copy()
    payload = {
        "within_class_cosine": {str(k): v for k, v in per_class.items()},
        "cosine_mean": mean,
        "cosine_std": std,
        "cosine_skipped_classes": skipped,
        "real_cosine_mean": real_mean,
        "real_cosine_std": real_std,
        "mmd_squared": mmd2,
        "mode": syn.mode,
    }
    write_report(args.report, "analyze", seed, cfg, payload,
                 inputs=hash_files(args.teacher, Path(args.syn) / "manifest.json"))
    write_csv(Path(args.report).with_suffix(".csv"),
              [{"class": k, "cosine": v} for k, v in per_class.items()])
    if args.grids:
        export_contact_sheets(syn, args.grids)
    print(f"analyze: cosine={mean:.4f}+-{std:.4f}, mmd2={mmd2:.6f}")
    return 0


def cmd_bound(args) -> int:
    inputs = BoundInputs(T=args.T, delta=args.delta, eps_mom=args.eps, C=args.C,
                         tau=args.tau, min_pc=args.min_pc, batch_size=args.batch_size)
    result = required_updates(inputs)
    out = {
        "n_chernoff": result.n_chernoff,
        "n_convergence": result.n_convergence,
        "n": result.n,
        "min_qc": result.min_qc,
        "warning": result.warning,
    }
    if args.simulate:
        probs = np.full(args.num_classes, 1.0 / args.num_classes)
        out["empirical_success"] = monte_carlo_convergence(
            args.num_classes, probs, args.batch_size, args.eps, args.C, args.tau,
            result.n, trials=args.simulate, seed=effective_seed(args.seed))
    if args.json:
        write_report(args.json, "bound", effective_seed(args.seed), vars(args).copy(), out)
    print(json.dumps(out, indent=2))
    return 0


def cmd_grid(args) -> int:
    syn = load_condensed(args.data)
    written = export_contact_sheets(syn, args.out, cols=args.cols)
    print(f"grid: wrote {len(written)} sheets -> {args.out}")
    return 0


# ---- pipeline runner --------------------------------------------------------------

def _cfg(section, key, fallback, cast=str):
    if section is None or key not in section:
        return fallback
    return cast(section[key])


def cmd_run(args) -> int:
    parser = configparser.ConfigParser()
    if not Path(args.config).exists():
        raise ConfigError(f"missing config file {args.config}")
    parser.read(args.config)
    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    pipe = parser["pipeline"] if "pipeline" in parser else {}
    seed = effective_seed(int(os.environ.get("LPLD_SEED", _cfg(pipe, "seed", 0, int))))
    ds = parser["dataset"] if "dataset" in parser else {}
    start = PHASES.index(args.from_phase) if args.from_phase else 0

    teacher_ckpt = work / "teacher.ckpt"
    stats_bin = work / "stats.bin"
    condensed_dir = work / "condensed"
    labels_file = work / "labels.lpld"
    pool_file = work / "pool.lpldp"

    def phase_args(**kw):
        ns = argparse.Namespace(**kw)
        ns.classes = _cfg(ds, "classes", 10, int)
        ns.per_class = _cfg(ds, "per_class", 300, int)
        ns.image_size = _cfg(ds, "image_size", 32, int)
        ns.noise = _cfg(ds, "noise", 0.45, float)
        ns.test_per_class = _cfg(ds, "test_per_class", 100, int)
        ns.data_seed = _cfg(ds, "data_seed", 0, int)
        return ns

    def require(path, phase):
        if not Path(path).exists():
            raise ConfigError(f"cannot resume from {phase}: missing artifact {path}")

    sq = parser["squeeze"] if "squeeze" in parser else {}
    if start <= PHASES.index("squeeze"):
        cmd_squeeze(phase_args(
            data=_cfg(ds, "source", "synthetic"), net=_cfg(sq, "net", None),
            epochs=_cfg(sq, "epochs", 5, int), lr=_cfg(sq, "lr", 2e-3, float),
            batch_size=_cfg(sq, "batch_size", 64, int),
            stats_batch_size=_cfg(sq, "stats_batch_size", 16, int),
            bn_momentum=_cfg(sq, "bn_momentum", 0.1, float), seed=seed,
            out=str(teacher_ckpt), stats_out=str(stats_bin),
            report=str(work / "squeeze.report.json")))

    rc = parser["recover"] if "recover" in parser else {}
    if start <= PHASES.index("recover"):
        require(teacher_ckpt, "recover")
        require(stats_bin, "recover")
        cmd_recover(phase_args(
            teacher=str(teacher_ckpt), stats=str(stats_bin),
            ipc=_cfg(rc, "ipc", 10, int), mode=_cfg(rc, "mode", "lpld"),
            iters=_cfg(rc, "iterations", 150, int), alpha=_cfg(rc, "alpha", 0.01, float),
            image_lr=_cfg(rc, "image_lr", 0.25, float), threads=args.threads, seed=seed,
            out=str(condensed_dir), report=str(work / "recover.report.json")))

    rl = parser["relabel"] if "relabel" in parser else {}
    if start <= PHASES.index("relabel"):
        require(condensed_dir / "manifest.json", "relabel")
        cmd_relabel(phase_args(
            teacher=str(teacher_ckpt), stats=str(stats_bin), data=str(condensed_dir),
            epochs=_cfg(rl, "epochs", 40, int), batch=_cfg(rl, "batch_size", 25, int),
            mix=_cfg(rl, "mix", "cutmix"), flip_prob=_cfg(rl, "flip_prob", 0.5, float),
            crop_scale_min=_cfg(rl, "crop_scale_min", 0.08, float),
            crop_scale_max=_cfg(rl, "crop_scale_max", 1.0, float), seed=seed,
            out=str(labels_file), report=str(work / "relabel.report.json")))

    pr = parser["prune"] if "prune" in parser else {}
    if start <= PHASES.index("prune"):
        require(labels_file, "prune")
        cmd_prune(phase_args(
            labels=str(labels_file), ratio=_cfg(pr, "ratio", 10, float),
            granularity=_cfg(pr, "granularity", "batch"),
            metric=_cfg(pr, "metric", "random"), mode=_cfg(pr, "mode", "easy"),
            calibrate=_cfg(pr, "calibrate", None), data=str(condensed_dir), seed=seed,
            out=str(pool_file), report=str(work / "prune.report.json")))

    va = parser["validate"] if "validate" in parser else {}
    if start <= PHASES.index("validate"):
        for path in (labels_file, pool_file):
            require(path, "validate")
        cmd_validate(phase_args(
            data=str(condensed_dir), pool=str(pool_file), labels=str(labels_file),
            student=_cfg(va, "student", None), epochs=_cfg(va, "epochs", 20, int),
            lr=_cfg(va, "lr", 2e-3, float), loss=_cfg(va, "loss", "kl"),
            testdata=_cfg(va, "testdata", "synthetic"), seed=seed,
            report=str(work / "validate.report.json")))

    an = parser["analyze"] if "analyze" in parser else {}
    if start <= PHASES.index("analyze"):
        require(condensed_dir / "manifest.json", "analyze")
        cmd_analyze(phase_args(
            teacher=str(teacher_ckpt), stats=str(stats_bin), syn=str(condensed_dir),
            real=_cfg(ds, "source", "synthetic"), grids=_cfg(an, "grids", None), seed=seed,
            report=str(work / "diversity.report.json")))
    print(f"run: all phases complete -> {work}")
    return 0


# ---- argument wiring -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpld", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sq = sub.add_parser("squeeze", help="train the teacher and estimate class statistics")
    sq.add_argument("--data", default="synthetic", help="'synthetic' or a class-per-subdir image directory")
    sq.add_argument("--net", default=None, help="network spec JSON (default: built-in small CNN)")
    sq.add_argument("--epochs", type=int, default=5)
    sq.add_argument("--lr", type=float, default=2e-3)
    sq.add_argument("--batch-size", type=int, default=64)
    sq.add_argument("--stats-batch-size", type=int, default=16)
    sq.add_argument("--bn-momentum", type=float, default=0.1)
    sq.add_argument("--seed", type=int, default=0)
    sq.add_argument("--out", default="teacher.ckpt")
    sq.add_argument("--stats-out", default="stats.bin")
    sq.add_argument("--report", default="squeeze.report.json")
    add_dataset_args(sq)
    sq.set_defaults(func=cmd_squeeze)

    rc = sub.add_parser("recover", help="synthesize the condensed dataset")
    rc.add_argument("--teacher", required=True)
    rc.add_argument("--stats", default=None)
    rc.add_argument("--ipc", type=int, default=10)
    rc.add_argument("--mode", choices=("lpld", "baseline"), default="lpld")
    rc.add_argument("--iters", type=int, default=400)
    rc.add_argument("--alpha", type=float, default=0.01)
    rc.add_argument("--image-lr", type=float, default=0.25)
    rc.add_argument("--threads", type=int, default=1)
    rc.add_argument("--seed", type=int, default=0)
    rc.add_argument("--out", default="condensed")
    rc.add_argument("--report", default="recover.report.json")
    rc.set_defaults(func=cmd_recover)

    rl = sub.add_parser("relabel", help="pre-generate augmentation and soft-label records")
    rl.add_argument("--teacher", required=True)
    rl.add_argument("--stats", default=None)
    rl.add_argument("--data", required=True, help="condensed dataset directory")
    rl.add_argument("--epochs", type=int, default=40)
    rl.add_argument("--batch", type=int, default=25)
    rl.add_argument("--mix", choices=("cutmix", "mixup", "none"), default="cutmix")
    rl.add_argument("--flip-prob", type=float, default=0.5)
    rl.add_argument("--crop-scale-min", type=float, default=0.08)
    rl.add_argument("--crop-scale-max", type=float, default=1.0)
    rl.add_argument("--seed", type=int, default=0)
    rl.add_argument("--out", default="labels.lpld")
    rl.add_argument("--report", default="relabel.report.json")
    rl.set_defaults(func=cmd_relabel)

    pr = sub.add_parser("prune", help="build a pruned label pool")
    pr.add_argument("--labels", required=True)
    pr.add_argument("--ratio", type=float, default=10.0, help="r in 'r x' pruning (keep 1/r)")
    pr.add_argument("--granularity", choices=("epoch", "batch"), default="batch")
    pr.add_argument("--metric", choices=("random",) + METRICS, default="random")
    pr.add_argument("--mode", choices=("easy", "hard", "uniform"), default="easy")
    pr.add_argument("--calibrate", default=None, help="easy,hard trim fractions before random pruning")
    pr.add_argument("--data", default=None, help="condensed dir (storage report)")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", default="pool.lpldp")
    pr.add_argument("--report", default="prune.report.json")
    pr.set_defaults(func=cmd_prune)

    va = sub.add_parser("validate", help="train a student from the pool and evaluate")
    va.add_argument("--data", required=True, help="condensed dataset directory")
    va.add_argument("--pool", required=True)
    va.add_argument("--labels", required=True)
    va.add_argument("--student", default=None, help="network spec JSON")
    va.add_argument("--epochs", type=int, default=20)
    va.add_argument("--lr", type=float, default=2e-3)
    va.add_argument("--loss", choices=("kl", "msegt"), default="kl")
    va.add_argument("--testdata", default="synthetic", help="'synthetic', a directory, or '' to skip")
    va.add_argument("--seed", type=int, default=0)
    va.add_argument("--report", default="validate.report.json")
    add_dataset_args(va)
    va.set_defaults(func=cmd_validate)

    an = sub.add_parser("analyze", help="diversity metrics for a condensed dataset")
    an.add_argument("--teacher", required=True)
    an.add_argument("--stats", default=None)
    an.add_argument("--real", default="synthetic")
    an.add_argument("--syn", required=True)
    an.add_argument("--grids", default=None, help="also write per-class contact sheets here")
    an.add_argument("--seed", type=int, default=0)
    an.add_argument("--report", default="diversity.report.json")
    add_dataset_args(an)
    an.set_defaults(func=cmd_analyze)

    bd = sub.add_parser("bound", help="update-count bound calculator")
    bd.add_argument("--T", type=float, default=0.05)
    bd.add_argument("--delta", type=float, default=0.2)
    bd.add_argument("--eps", type=float, default=0.1)
    bd.add_argument("--C", type=float, default=1.0)
    bd.add_argument("--tau", type=float, default=0.01)
    bd.add_argument("--min-pc", type=float, required=True)
    bd.add_argument("--batch-size", type=int, required=True)
    bd.add_argument("--simulate", type=int, default=0, help="Monte-Carlo trials (0: skip)")
    bd.add_argument("--num-classes", type=int, default=10)
    bd.add_argument("--seed", type=int, default=0)
    bd.add_argument("--json", default=None)
    bd.set_defaults(func=cmd_bound)

    gr = sub.add_parser("grid", help="export per-class contact sheets")
    gr.add_argument("--data", required=True)
    gr.add_argument("--out", default="grids")
    gr.add_argument("--cols", type=int, default=10)
    gr.set_defaults(func=cmd_grid)

    rn = sub.add_parser("run", help="run the full pipeline from an INI config")
    rn.add_argument("--config", required=True)
    rn.add_argument("--workdir", default="lpld-out")
    rn.add_argument("--threads", type=int, default=1)
    rn.add_argument("--from", dest="from_phase", choices=PHASES, default=None,
                    help="resume from this phase (earlier artifacts must exist)")
    rn.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LPLDError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
