"""Command-line surface: train, eval, count-params, synth.

Every run directory is self-describing: a config snapshot, the split
manifest, a per-epoch loss log, the final metrics record, and the best
checkpoint. Runs are bit-reproducible from the persisted config and seed.

Exit codes: 0 success, 1 usage or config error, 2 data error,
3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as D
from . import perturb as P
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (ConfigError, ExperimentConfig, apply_overrides, config_text,
                     load_config, parse_config)
from .layers import FscNet, count_parameters, format_parameter_table
from .metrics import EvalReport, compute_metrics, confusion, format_report, report_record
from .optim import Adam, EarlyStopping, NumericError, mean_bce, predict_logits, train_epoch
from .seeding import rng_for

PARAM_COUNT_NOTE = (
    "note: the block definitions give a closed-form total of 266,513 + 243*dim\n"
    "trainable parameters, so the widely quoted size for this architecture,\n"
    "216,270 (0.21627M), is not reachable for any positive dim. This tool\n"
    "reports the true count of the model as built."
)


def _load_sources(root_field: str) -> tuple[dict[str, D.ImageRecord], list[tuple[str, str]]]:
    """Load one or more comma-separated dataset roots, tagging sources I, II, ..."""
    roots = [r.strip() for r in root_field.split(",") if r.strip()]
    if not roots:
        raise D.DataError("no dataset root configured (set data.root or pass --root)")
    tags = ["I", "II", "III", "IV"] if len(roots) > 1 else [""]
    records: dict[str, D.ImageRecord] = {}
    skipped: list[tuple[str, str]] = []
    for i, root in enumerate(roots):
        tag = tags[i] if i < len(tags) else str(i + 1)
        recs, skips = D.load_directory(root, source=tag)
        for r in recs:
            rid = f"{tag}:{r.id}" if tag else r.id
            if rid in records:
                raise D.DataError(f"duplicate record id '{rid}'")
            r.id = rid
            records[rid] = r
        skipped.extend((f"{tag}:{p}" if tag else p, reason) for p, reason in skips)
    return records, skipped


def _perturb_eval_pixels(img: np.ndarray, spec: P.PerturbSpec, key: str) -> np.ndarray:
    if spec.kind == "noise":
        return P.add_gaussian_noise(img, spec.noise_std, rng_for(spec.seed, "noise", key))
    if spec.kind == "occlusion":
        return P.occlude(img, spec.occlusion_fraction, rng_for(spec.seed, "occlusion", key))
    return img


def _eval_arrays(records: dict[str, D.ImageRecord], ids: list[str],
                 cfg: ExperimentConfig, spec: P.PerturbSpec | None) -> tuple[np.ndarray, np.ndarray]:
    images = []
    labels = []
    for rid in ids:
        rec = records[rid]
        img = D.eval_pixels(rec, cfg.augment)
        if spec is not None and spec.kind in ("noise", "occlusion"):
            img = _perturb_eval_pixels(img, spec, rid)
        images.append(D.normalize(img, cfg.augment.mean, cfg.augment.std))
        labels.append(rec.label)
    x = np.stack(images).astype(np.float32)
    y = np.asarray(labels, dtype=np.float32).reshape(-1, 1)
    return x, y


def _train_batches(records: dict[str, D.ImageRecord], order: list[str],
                   cfg: ExperimentConfig, epoch: int):
    seed = cfg.train.seed
    spec = cfg.perturb
    noisy_training = spec.apply_in_training and spec.kind in ("noise", "occlusion")
    batch = cfg.train.batch_size
    for start in range(0, len(order), batch):
        chunk = order[start: start + batch]
        images = []
        labels = []
        for rid in chunk:
            rec = records[rid]
            img = D.augment_pixels(rec, cfg.augment, rng_for(seed, "augment", epoch, rid))
            if noisy_training:
                if spec.kind == "noise":
                    img = P.add_gaussian_noise(img, spec.noise_std,
                                               rng_for(spec.seed, "train-noise", epoch, rid))
                else:
                    img = P.occlude(img, spec.occlusion_fraction,
                                    rng_for(spec.seed, "train-occlusion", epoch, rid))
            images.append(D.normalize(img, cfg.augment.mean, cfg.augment.std))
            labels.append(rec.label)
        yield np.stack(images).astype(np.float32), \
            np.asarray(labels, dtype=np.float32).reshape(-1, 1)


def cmd_train(cfg: ExperimentConfig, quiet: bool = False) -> tuple[EvalReport, Path]:
    """Full recipe: split, augment, train with accumulation and early stopping,
    evaluate the best snapshot on the test split, write all artifacts."""
    out_dir = Path(cfg.data.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    say = (lambda *_: None) if quiet else print

    records, skipped = _load_sources(cfg.data.root)
    if skipped:
        report_path = out_dir / "skipped.txt"
        report_path.write_text("\n".join(f"{p}\t{reason}" for p, reason in skipped) + "\n",
                               encoding="utf-8")
        say(f"skipped {len(skipped)} files (see {report_path})")

    if cfg.data.manifest:
        manifest = D.load_manifest(cfg.data.manifest)
        missing = [rid for rid in manifest.all_ids() if rid not in records]
        if missing:
            raise D.DataError(f"manifest references {len(missing)} unknown ids, first: {missing[0]}")
    else:
        manifest = D.stratified_split(list(records.values()), cfg.data.ratios, cfg.train.seed)
    D.save_manifest(manifest, out_dir / "manifest.tsv")

    labels = {rid: records[rid].label for rid in records}
    eval_manifest = manifest
    if cfg.perturb.kind == "bias":
        eval_manifest = P.biased_test_composition(
            manifest, labels, cfg.perturb.bias_positive_fraction,
            rng_for(cfg.perturb.seed, "bias"))

    say(f"dataset: {len(records)} records "
        f"(train {len(manifest.train)} / val {len(manifest.val)} / test {len(eval_manifest.test)})")

    model = FscNet(cfg.model.dim, cfg.model.num_classes,
                   rng=rng_for(cfg.train.seed, "init"))
    optimizer = Adam(model, lr=cfg.train.learning_rate)
    stopper = EarlyStopping(cfg.train.patience)

    val_x, val_y = _eval_arrays(records, manifest.val, cfg, None)

    log_lines: list[str] = []
    for epoch in range(1, cfg.train.max_epochs + 1):
        t0 = time.monotonic()
        perm = rng_for(cfg.train.seed, "order", epoch).permutation(len(manifest.train))
        order = [manifest.train[i] for i in perm]
        train_loss = train_epoch(
            model, _train_batches(records, order, cfg, epoch), optimizer,
            accumulation_steps=cfg.train.accumulation_steps,
            rng=rng_for(cfg.train.seed, "dropout", epoch))
        val_loss = mean_bce(predict_logits(model, val_x), val_y)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        log_lines.append(f"{epoch}\t{train_loss:.8e}\t{val_loss:.8e}")
        say(f"epoch {epoch:3d}  train {train_loss:.6f}  val {val_loss:.6f}  "
            f"({time.monotonic() - t0:.1f}s)")
        if stopper.update(val_loss, model):
            say(f"early stop: no improvement for {stopper.patience} epochs")
            break
    (out_dir / "epochs.log").write_text("\n".join(log_lines) + "\n", encoding="utf-8")

    stopper.restore(model)
    test_x, test_y = _eval_arrays(records, eval_manifest.test, cfg,
                                  cfg.perturb if cfg.perturb.kind != "none" else None)
    logits = predict_logits(model, test_x)
    test_loss = mean_bce(logits, test_y)
    report = compute_metrics(confusion(logits, test_y))

    snapshot = config_text(cfg)
    (out_dir / "config.ini").write_text(snapshot, encoding="utf-8")
    save_checkpoint(out_dir / "model.ckpt", model.state_dict(), snapshot,
                    stopper.best_loss, optimizer.state_dict())
    extra = {"test_loss": test_loss, "best_val_loss": stopper.best_loss,
             "seed": cfg.train.seed,
             "perturb": asdict(cfg.perturb) if cfg.perturb.kind != "none" else None}
    (out_dir / "metrics.json").write_text(report_record(report, extra) + "\n", encoding="utf-8")
    say(format_report(report))
    say(f"artifacts in {out_dir}")
    return report, out_dir


def _model_from_checkpoint(path: str):
    ck = load_checkpoint(path)
    cfg = parse_config(ck.config_text)
    model = FscNet(cfg.model.dim, cfg.model.num_classes, rng=rng_for(0, "load"))
    try:
        model.load_state_dict(ck.tensors)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint does not fit a dim={cfg.model.dim}, "
                              f"num_classes={cfg.model.num_classes} model: {e}") from None
    return model, cfg, ck


def cmd_eval(checkpoint_path: str, root: str, *, manifest_path: str = "",
             split: str = "test", spec: P.PerturbSpec | None = None,
             out_path: str = "", quiet: bool = False) -> EvalReport:
    """Evaluate a checkpoint on a dataset with the deterministic eval transform,
    optionally perturbed."""
    model, cfg, _ = _model_from_checkpoint(checkpoint_path)
    records, _ = _load_sources(root)
    labels = {rid: r.label for rid, r in records.items()}

    if manifest_path:
        manifest = D.load_manifest(manifest_path)
        if split not in ("train", "val", "test"):
            raise ConfigError(f"unknown split '{split}'")
        ids = getattr(manifest, split)
        missing = [rid for rid in ids if rid not in records]
        if missing:
            raise D.DataError(f"manifest references {len(missing)} unknown ids, first: {missing[0]}")
        if spec is not None and spec.kind == "bias":
            if split != "test":
                raise ConfigError("biased composition applies to the test split only")
            manifest = P.biased_test_composition(manifest, labels,
                                                 spec.bias_positive_fraction,
                                                 rng_for(spec.seed, "bias"))
            ids = manifest.test
    else:
        if spec is not None and spec.kind == "bias":
            raise ConfigError("biased composition needs a manifest (--manifest)")
        ids = sorted(records)

    x, y = _eval_arrays(records, ids, cfg, spec)
    logits = predict_logits(model, x)
    report = compute_metrics(confusion(logits, y))
    record = report_record(report, {
        "checkpoint": str(checkpoint_path), "n": len(ids),
        "loss": mean_bce(logits, y),
        "perturb": asdict(spec) if spec is not None and spec.kind != "none" else None,
    })
    if out_path:
        Path(out_path).write_text(record + "\n", encoding="utf-8")
    if not quiet:
        print(format_report(report))
        print(record)
    return report


def cmd_count_params(cfg: ExperimentConfig, quiet: bool = False) -> int:
    model = FscNet(cfg.model.dim, cfg.model.num_classes, rng=rng_for(cfg.train.seed, "init"))
    rows, total = count_parameters(model)
    if not quiet:
        print(format_parameter_table(rows, total))
        print()
        print(PARAM_COUNT_NOTE)
    return total


def cmd_synth(n_per_class: int, image_size: int, seed: int, out_dir: str,
              quiet: bool = False) -> list[Path]:
    records = D.synth_generate(n_per_class, image_size, seed)
    paths = D.save_records_as_pngs(records, out_dir)
    if not quiet:
        print(f"wrote {len(paths)} images ({n_per_class} per class) to {out_dir}")
    return paths


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=int)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--accumulation-steps", dest="accumulation_steps", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--hflip-prob", dest="hflip_prob", type=float)
    p.add_argument("--vflip-prob", dest="vflip_prob", type=float)
    p.add_argument("--max-rotation-deg", dest="max_rotation_deg", type=float)
    p.add_argument("--brightness", type=float)
    p.add_argument("--contrast", type=float)
    p.add_argument("--saturation", type=float)
    p.add_argument("--hue", type=float)
    p.add_argument("--root", type=str)
    p.add_argument("--manifest", type=str)
    p.add_argument("--out", dest="output_dir", type=str)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--perturb", dest="perturb_kind", choices=P.KINDS)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--occlusion-fraction", dest="occlusion_fraction", type=float)
    p.add_argument("--bias-positive-fraction", dest="bias_positive_fraction", type=float)
    p.add_argument("--perturb-seed", dest="perturb_seed", type=int)
    p.add_argument("--perturb-in-training", dest="perturb_in_training",
                   action="store_const", const=True)


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {flag: getattr(args, flag, None) for flag in
                 ("dim num_classes image_size batch_size accumulation_steps max_epochs "
                  "patience learning_rate seed hflip_prob vflip_prob max_rotation_deg "
                  "brightness contrast saturation hue root manifest output_dir "
                  "train_fraction val_fraction test_fraction perturb_kind noise_std "
                  "occlusion_fraction bias_positive_fraction perturb_seed "
                  "perturb_in_training").split()}
    return apply_overrides(cfg, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = _Parser(prog="fscnet", description="fuzzy sigmoid convolution networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train and evaluate per the configured recipe")
    p_train.add_argument("--config", type=str, default="")
    _add_override_flags(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--root", required=True)
    p_eval.add_argument("--manifest", default="")
    p_eval.add_argument("--split", default="test", choices=("train", "val", "test"))
    p_eval.add_argument("--perturb", dest="perturb_kind", choices=P.KINDS, default="none")
    p_eval.add_argument("--noise-std", dest="noise_std", type=float, default=0.1)
    p_eval.add_argument("--occlusion-fraction", dest="occlusion_fraction", type=float, default=0.10)
    p_eval.add_argument("--bias-positive-fraction", dest="bias_positive_fraction",
                        type=float, default=0.60)
    p_eval.add_argument("--perturb-seed", dest="perturb_seed", type=int, default=7)
    p_eval.add_argument("--out", default="")

    p_count = sub.add_parser("count-params", help="per-layer trainable parameter audit")
    p_count.add_argument("--config", type=str, default="")
    _add_override_flags(p_count)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--n", type=int, default=100, help="images per class")
    p_synth.add_argument("--size", type=int, default=62)
    p_synth.add_argument("--seed", type=int, default=1234)

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            cmd_train(_config_from_args(args))
        elif args.command == "eval":
            spec = None
            if args.perturb_kind != "none":
                spec = P.PerturbSpec(kind=args.perturb_kind, noise_std=args.noise_std,
                                     occlusion_fraction=args.occlusion_fraction,
                                     bias_positive_fraction=args.bias_positive_fraction,
                                     seed=args.perturb_seed)
            cmd_eval(args.checkpoint, args.root, manifest_path=args.manifest,
                     split=args.split, spec=spec, out_path=args.out)
        elif args.command == "count-params":
            cmd_count_params(_config_from_args(args))
        elif args.command == "synth":
            cmd_synth(args.n, args.size, args.seed, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (D.DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    return 0
