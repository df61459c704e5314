"""Command-line front door: prepare data, train, synthesize, evaluate.

Every subcommand is a batch operation over one run directory. The
configuration comes from ``--config`` (falling back to the snapshot inside
the run directory, then to package defaults), ``--seed`` and ``--run-dir``
override single fields, and all numeric artifacts are deterministic given
the resolved config.

Exit codes: 0 success, 2 configuration or data error, 3 training
divergence (partial artifacts are kept).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from .baselines import adasyn, ros, smote
from .config import (
    ModelConfig,
    RunConfig,
    build_quartet,
    config_hash,
    default_config,
    load_config,
    save_config,
    to_dict,
)
from .datasets import (
    ImbalanceSpec,
    LabeledImageSet,
    balance_with_synthetic,
    generate_glyphs,
    load_idx,
    make_imbalanced,
    save_idx,
    save_image_archive,
)
from .errors import ConfigError, DataError, MedaLudeError, TrainingDivergedError
from .gm_distribution import load_gmm, sample_population
from .lgm_loss import softmax_cross_entropy
from .meda_evolution import decode_latents, run_full_training
from .metrics import EvalReport, evaluate
from .networks import (
    MLP,
    AdamState,
    MLPSpec,
    adam_step,
    backward,
    forward,
    forward_hidden,
    init_params,
    load_quartet,
)
from .training_phases import TrainConfig

BALANCE_METHODS = ("meda_lude", "ros", "smote", "adasyn")
CONTROL_METHOD = "imbalanced"
REPORT_FIELDS = (
    "accuracy",
    "macro_precision",
    "macro_recall",
    "macro_specificity",
    "macro_f1",
    "g_mean",
    "auc",
)


# ---------------------------------------------------------------------------
# run-directory layout


def _train_paths(run_dir: str) -> tuple[str, str]:
    return (
        os.path.join(run_dir, "train_images.idx"),
        os.path.join(run_dir, "train_labels.idx"),
    )


def _val_paths(run_dir: str) -> tuple[str, str]:
    return (
        os.path.join(run_dir, "val_images.idx"),
        os.path.join(run_dir, "val_labels.idx"),
    )


def _balanced_paths(run_dir: str, method: str) -> tuple[str, str]:
    return (
        os.path.join(run_dir, f"balanced_{method}_images.idx"),
        os.path.join(run_dir, f"balanced_{method}_labels.idx"),
    )


def _generated_paths(run_dir: str, label: int) -> tuple[str, str]:
    return (
        os.path.join(run_dir, f"generated_c{label}.img"),
        os.path.join(run_dir, f"generated_c{label}.lbl"),
    )


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Load the config named by ``--config``, else the run-directory
    snapshot, else defaults; then apply ``--seed`` / ``--run-dir``."""
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        probe_dir = args.run_dir if args.run_dir is not None else RunConfig().run_dir
        snapshot = os.path.join(probe_dir, "config.json")
        cfg = load_config(snapshot) if os.path.exists(snapshot) else default_config()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.run_dir is not None:
        cfg = dataclasses.replace(cfg, run_dir=args.run_dir)
    return cfg


def _load_split(cfg: RunConfig, paths: tuple[str, str]) -> LabeledImageSet:
    data = _check_labels(load_idx(*paths), cfg.data.class_count, paths[1])
    return data


def _check_labels(
    data: LabeledImageSet, class_count: int, origin: str
) -> LabeledImageSet:
    if len(data) and data.labels.max() >= class_count:
        raise DataError(
            f"{origin}: label {int(data.labels.max())} outside "
            f"[0, {class_count})"
        )
    return data


# ---------------------------------------------------------------------------
# prepare


def cmd_prepare(args: argparse.Namespace) -> int:
    if args.emit_default_config:
        print(json.dumps(to_dict(default_config()), indent=2, sort_keys=True))
        return 0
    cfg = resolve_config(args)
    data_cfg = cfg.data
    if data_cfg.source == "glyphs":
        full = generate_glyphs(
            class_count=data_cfg.class_count,
            per_class=data_cfg.per_class,
            height=data_cfg.height,
            width=data_cfg.width,
            noise_sd=data_cfg.noise_sd,
            seed=data_cfg.glyph_seed,
            max_shift=data_cfg.max_shift,
            intensity_jitter=data_cfg.intensity_jitter,
        )
    else:
        assert data_cfg.idx_images is not None and data_cfg.idx_labels is not None
        full = _check_labels(
            load_idx(data_cfg.idx_images, data_cfg.idx_labels),
            data_cfg.class_count,
            data_cfg.idx_labels,
        )
    spec = ImbalanceSpec(
        minority_classes=data_cfg.minority_classes,
        n_min=data_cfg.n_min,
        n_maj=data_cfg.n_maj,
        n_val=data_cfg.n_val,
        seed=data_cfg.split_seed,
    )
    train, val = make_imbalanced(full, spec)

    os.makedirs(cfg.run_dir, exist_ok=True)
    save_idx(train, *_train_paths(cfg.run_dir))
    save_idx(val, *_val_paths(cfg.run_dir))
    save_config(cfg, os.path.join(cfg.run_dir, "config.json"))
    tracked = [
        "config.json",
        "train_images.idx",
        "train_labels.idx",
        "val_images.idx",
        "val_labels.idx",
    ]
    manifest = {
        "config_hash": config_hash(cfg),
        "class_count": data_cfg.class_count,
        "train_counts": train.class_counts(data_cfg.class_count).tolist(),
        "val_counts": val.class_counts(data_cfg.class_count).tolist(),
        "files": {name: _sha256(os.path.join(cfg.run_dir, name)) for name in tracked},
    }
    with open(os.path.join(cfg.run_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"prepared {len(train)} train / {len(val)} val samples in {cfg.run_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    train = _load_split(cfg, _train_paths(cfg.run_dir))
    height, width = train.image_shape
    rng = np.random.default_rng(cfg.seed)
    models = build_quartet(cfg.model, height * width, cfg.data.class_count, rng)
    digest = config_hash(cfg)
    run_full_training(
        train,
        cfg.data.minority_classes,
        models,
        cfg.weights,
        cfg.lgm,
        (cfg.train, cfg.train, cfg.train),
        cfg.evolution,
        rng,
        run_dir=cfg.run_dir,
        config_hash=digest,
    )
    artifacts = [
        "models.bin",
        "gmm_init.bin",
        "gmm_opti.bin",
        "loss_trace.csv",
        "evolution_trace.csv",
    ]
    summary = {
        "config_hash": digest,
        "artifacts": {
            name: _sha256(os.path.join(cfg.run_dir, name)) for name in artifacts
        },
    }
    with open(os.path.join(cfg.run_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"training complete; artifacts in {cfg.run_dir}")
    return 0


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.count < 0:
        raise ConfigError(f"count must be >= 0, got {args.count}")
    models = load_quartet(os.path.join(cfg.run_dir, "models.bin"))
    gmm = load_gmm(os.path.join(cfg.run_dir, "gmm_opti.bin"))
    if not 0 <= args.label < gmm.class_count:
        raise ConfigError(
            f"label {args.label} outside [0, {gmm.class_count})"
        )
    train = _load_split(cfg, _train_paths(cfg.run_dir))
    height, width = train.image_shape
    if args.count == 0:
        images = LabeledImageSet(
            np.zeros((0, height, width)), np.zeros(0, dtype=np.int64)
        )
    else:
        counts = np.zeros(gmm.class_count, dtype=np.int64)
        counts[args.label] = args.count
        pop = sample_population(gmm, counts, np.random.default_rng(cfg.seed))
        images = decode_latents(models.decoder, pop, (height, width))
    save_image_archive(images, *_generated_paths(cfg.run_dir, args.label))
    print(
        f"generated {len(images)} class-{args.label} images in {cfg.run_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# balance


def _make_balanced(
    cfg: RunConfig, method: str, train: LabeledImageSet
) -> LabeledImageSet:
    if method == "meda_lude":
        models = load_quartet(os.path.join(cfg.run_dir, "models.bin"))
        gmm = load_gmm(os.path.join(cfg.run_dir, "gmm_opti.bin"))
        return balance_with_synthetic(
            train, models.decoder, gmm, np.random.default_rng(cfg.seed)
        )
    if method == "ros":
        return ros(train, seed=cfg.sampler.seed)
    if method == "smote":
        return smote(train, cfg.sampler)
    if method == "adasyn":
        return adasyn(train, cfg.sampler)
    raise ConfigError(f"unknown balancing method {method!r}")


def cmd_balance(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    train = _load_split(cfg, _train_paths(cfg.run_dir))
    balanced = _make_balanced(cfg, args.method, train)
    save_idx(balanced, *_balanced_paths(cfg.run_dir, args.method))
    counts = balanced.class_counts(cfg.data.class_count).tolist()
    print(f"balanced with {args.method}: class counts {counts}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def train_final_classifier(
    data: LabeledImageSet,
    class_count: int,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
) -> MLP:
    """Fit a fresh softmax classifier with the image-classifier layout.

    Plain mini-batch cross entropy under Adam, with the same epoch-mean
    convergence rule the representation phases use.
    """
    height, width = data.image_shape
    spec = MLPSpec((height * width, *model_cfg.image_hidden, class_count), "logits")
    params = init_params(spec, rng)
    state = AdamState.for_arrays([*params.weights, *params.biases])
    x, y = data.flat(), data.labels
    n = len(data)
    prev_epoch_loss: float | None = None
    streak = 0
    for _ in range(train_cfg.max_epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, train_cfg.batch_size):
            rows = order[start : start + train_cfg.batch_size]
            logits, cache = forward(spec, params, x[rows], want_cache=True)
            loss, grad_logits = softmax_cross_entropy(logits, y[rows])
            if not np.isfinite(loss):
                raise TrainingDivergedError("final classifier loss is non-finite")
            grads, _ = backward(spec, params, cache, grad_logits)
            adam_step(
                [*params.weights, *params.biases],
                [*grads.weights, *grads.biases],
                state,
                train_cfg.learning_rate,
            )
            epoch_losses.append(loss)
        epoch_loss = float(np.mean(epoch_losses))
        if prev_epoch_loss is not None:
            improvement = (prev_epoch_loss - epoch_loss) / max(
                abs(prev_epoch_loss), 1e-12
            )
            if improvement < train_cfg.min_rel_improvement:
                streak += 1
                if streak >= train_cfg.patience:
                    break
            else:
                streak = 0
        prev_epoch_loss = epoch_loss
    return MLP(spec, params)


def _evaluate_method(
    cfg: RunConfig,
    method: str,
    train: LabeledImageSet,
    val: LabeledImageSet,
) -> EvalReport:
    if method == CONTROL_METHOD:
        balanced = train
    else:
        balanced = _load_split(cfg, _balanced_paths(cfg.run_dir, method))
    clf = train_final_classifier(
        balanced,
        cfg.data.class_count,
        cfg.model,
        cfg.final_classifier,
        np.random.default_rng(cfg.seed),
    )
    scores = clf.forward(val.flat())
    assert isinstance(scores, np.ndarray)
    return evaluate(scores, val.labels, cfg.g_mean_variant)


def _report_path(run_dir: str) -> str:
    return os.path.join(run_dir, "eval_report.csv")


def _load_report_rows(path: str) -> dict[str, list[str]]:
    if not os.path.exists(path):
        return {}
    rows: dict[str, list[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    for line in lines[1:]:
        cells = line.split(",")
        rows[cells[0]] = cells
    return rows


def _save_report_rows(path: str, rows: dict[str, list[str]]) -> None:
    header = "method,config_hash," + ",".join(REPORT_FIELDS)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for cells in rows.values():
            fh.write(",".join(cells) + "\n")


def _record_report(cfg: RunConfig, method: str, report: EvalReport) -> list[str]:
    row = [method, config_hash(cfg)]
    scalars = report.row()
    row.extend(repr(scalars[field]) for field in REPORT_FIELDS)
    path = _report_path(cfg.run_dir)
    rows = _load_report_rows(path)
    rows[method] = row
    _save_report_rows(path, rows)
    return row


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    train = _load_split(cfg, _train_paths(cfg.run_dir))
    val = _load_split(cfg, _val_paths(cfg.run_dir))
    report = _evaluate_method(cfg, args.method, train, val)
    _record_report(cfg, args.method, report)
    print(
        f"{args.method}: accuracy {report.accuracy:.4f}, "
        f"macro F1 {report.macro_f1:.4f}, g-mean {report.g_mean:.4f}, "
        f"AUC {report.auc:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# compare


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    methods = [CONTROL_METHOD]
    for method in args.methods:
        if method not in methods:
            methods.append(method)
    train = _load_split(cfg, _train_paths(cfg.run_dir))
    val = _load_split(cfg, _val_paths(cfg.run_dir))
    reports: dict[str, EvalReport] = {}
    for method in methods:
        if method != CONTROL_METHOD:
            balanced = _make_balanced(cfg, method, train)
            save_idx(balanced, *_balanced_paths(cfg.run_dir, method))
        reports[method] = _evaluate_method(cfg, method, train, val)
        _record_report(cfg, method, reports[method])
    table_path = os.path.join(cfg.run_dir, "compare.csv")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash(cfg)}\n")
        fh.write("criterion," + ",".join(methods) + "\n")
        for field in REPORT_FIELDS:
            cells = [repr(reports[m].row()[field]) for m in methods]
            fh.write(field + "," + ",".join(cells) + "\n")
    print(f"compared {len(methods)} methods; table in {table_path}")
    return 0


# ---------------------------------------------------------------------------
# export-features


def cmd_export_features(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    paths = _train_paths(cfg.run_dir) if args.split == "train" else _val_paths(cfg.run_dir)
    data = _load_split(cfg, paths)
    models = load_quartet(os.path.join(cfg.run_dir, "models.bin"))
    clf = models.image_classifier
    features = forward_hidden(clf.spec, clf.params, data.flat())
    digest = config_hash(cfg)
    feat_path = os.path.join(cfg.run_dir, f"features_{args.split}.csv")
    with open(feat_path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={digest}\n")
        for row in features:
            fh.write(",".join(repr(v) for v in row.tolist()) + "\n")
    label_path = os.path.join(cfg.run_dir, f"features_{args.split}_labels.csv")
    with open(label_path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={digest}\n")
        for label in data.labels.tolist():
            fh.write(f"{label}\n")
    print(
        f"exported {features.shape[0]} x {features.shape[1]} features to "
        f"{feat_path}"
    )
    return 0


# ---------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meda-lude",
        description=(
            "Minority-class image synthesis through latent-distribution "
            "evolution, with preparation, training, balancing and "
            "evaluation as batch subcommands."
        ),
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", metavar="PATH", help="JSON run configuration file"
    )
    common.add_argument(
        "--seed", type=int, metavar="N", help="override the configured seed"
    )
    common.add_argument(
        "--run-dir", metavar="PATH", help="override the configured run directory"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "prepare",
        parents=[common],
        help="build the imbalanced train/val split and its manifest",
    )
    p.add_argument(
        "--emit-default-config",
        action="store_true",
        help="print the fully defaulted config as JSON and exit",
    )
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser(
        "train",
        parents=[common],
        help="run the full training program and persist its artifacts",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "generate",
        parents=[common],
        help="decode synthetic images for one class from the evolved mixture",
    )
    p.add_argument("--label", type=int, required=True, help="class to synthesize")
    p.add_argument("--count", type=int, required=True, help="number of images")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser(
        "balance",
        parents=[common],
        help="write a balanced training set using one method",
    )
    p.add_argument("--method", choices=BALANCE_METHODS, required=True)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser(
        "evaluate",
        parents=[common],
        help="train the final classifier on a balanced set and score it",
    )
    p.add_argument(
        "--method", choices=(CONTROL_METHOD,) + BALANCE_METHODS, required=True
    )
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "compare",
        parents=[common],
        help="balance and evaluate several methods plus the imbalanced control",
    )
    p.add_argument(
        "--methods",
        nargs="+",
        choices=(CONTROL_METHOD,) + BALANCE_METHODS,
        default=["meda_lude", "ros"],
    )
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser(
        "export-features",
        parents=[common],
        help="dump last-hidden-layer image-classifier features to CSV",
    )
    p.add_argument("--split", choices=("train", "val"), required=True)
    p.set_defaults(func=cmd_export_features)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (MedaLudeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
