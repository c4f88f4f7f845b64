"""Command-line entry points for reproducible experiments.

Exit codes: 0 success, 2 configuration/input error, 3 training aborted on a
non-finite loss.  Commands refuse to overwrite existing outputs unless
``--overwrite`` is given; the resolved configuration of a run is dumped to
``config.resolved`` inside the run directory and reloads as a config file.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import torch

from .config import Ablation, ExperimentConfig
from .data import (load_volume, make_folds, preprocess_case, read_manifest,
                   write_phantom_dataset)
from .errors import ConfigurationError, IngestionError, TrainingAbort
from .metrics import BinaryMask, evaluate_case, write_metric_csv
from .nifti import write_nifti
from .supervision import extract_contour, modify_contour_target, p_at_epoch
from .trainer import cross_validate, load_checkpoint, predict_volume, train


class OutputExists(RuntimeError):
    pass


def _runs_root(args):
    if args.out:
        return args.out
    return os.environ.get("CENET_RUNS_DIR", "runs")


def _guard_output(path, overwrite):
    if os.path.exists(path) and not overwrite:
        raise OutputExists(f"output {path} exists; pass --overwrite to replace it")


def _load_config(args):
    if args.config:
        cfg = ExperimentConfig.from_file(args.config, overrides=args.set)
    else:
        cfg = ExperimentConfig()
        cfg.apply_overrides(args.set)
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.validate()
    return cfg


def _load_cases(cfg, require_labels=True, preprocess=True):
    rows = read_manifest(cfg.data.manifest)
    cases = []
    for case_id, image_path, label_path in rows:
        vol, label = load_volume(image_path)
        if label is None and label_path:
            _, label = load_volume(label_path)  # pragma: no cover - odd layouts
        if label is None and require_labels:
            raise IngestionError(f"case {case_id} has no label volume")
        if preprocess:
            vol, label = preprocess_case(vol, label, cfg.preprocess)
        cases.append((case_id, vol, label))
    return cases


def cmd_train(args):
    cfg = _load_config(args)
    cases = _load_cases(cfg)
    if len(cases) < 2:
        raise ConfigurationError("training needs at least two labeled cases")
    val_count = min(cfg.data.val_count, len(cases) - 1)
    if val_count < 1:
        raise ConfigurationError("data.val_count must leave at least one case per side")
    rng = np.random.default_rng(cfg.train.seed)
    order = rng.permutation(len(cases))
    val_cases = [cases[i] for i in order[:val_count]]
    train_cases = [cases[i] for i in order[val_count:]]

    run_dir = os.path.join(_runs_root(args),
                           f"train-{cfg.config_hash()[:10]}-seed{cfg.train.seed}")
    _guard_output(run_dir, args.overwrite)
    logs = train(train_cases, val_cases, cfg, run_dir)
    print(f"run {run_dir}: {len(logs)} epochs, "
          f"final val dice loss {logs[-1].val_dice_loss:.4f}")
    return 0


def cmd_cross_validate(args):
    cfg = _load_config(args)
    cases = _load_cases(cfg)
    ids = [c[0] for c in cases]
    train_count = cfg.data.train_count or None
    folds = make_folds(ids, cfg.data.fold_count, cfg.train.seed, train_count=train_count)
    out_dir = os.path.join(_runs_root(args),
                           f"cv-{cfg.config_hash()[:10]}-seed{cfg.train.seed}")
    _guard_output(out_dir, args.overwrite)
    rows = cross_validate(cases, folds, cfg, out_dir, parallel=args.parallel)
    print(f"cross-validation over {folds.fold_count} folds -> "
          f"{os.path.join(out_dir, 'metrics.csv')} ({len(rows)} cases)")
    return 0


def cmd_evaluate(args):
    cfg = _load_config(args)
    out_path = args.out or "metrics.csv"
    _guard_output(out_path, args.overwrite)
    model = None
    if not args.oracle:
        if not args.checkpoint:
            raise ConfigurationError("evaluate needs --checkpoint (or --oracle)")
        model, ckpt_cfg, _ = load_checkpoint(args.checkpoint)
        cfg.network = ckpt_cfg.network
    rows = []
    for case_id, image_path, label_path in read_manifest(cfg.data.manifest):
        vol, label = load_volume(image_path)
        if label is None:
            raise IngestionError(f"case {case_id} has no label volume")
        if args.oracle:
            pred = label
        else:
            pred = predict_volume(model, vol, cfg.preprocess, native_grid=True)
        report = evaluate_case(BinaryMask(pred.mask, label.spacing),
                               BinaryMask(label.mask, label.spacing))
        rows.append((case_id, "", report))
    write_metric_csv(out_path, rows)
    print(f"wrote {out_path} ({len(rows)} cases + aggregates)")
    return 0


def cmd_predict(args):
    cfg = _load_config(args)
    if not args.checkpoint:
        raise ConfigurationError("predict needs --checkpoint")
    model, ckpt_cfg, _ = load_checkpoint(args.checkpoint)
    cfg.network = ckpt_cfg.network
    vol, _ = load_volume(args.image)
    out_path = args.out or _default_pred_path(args.image)
    _guard_output(out_path, args.overwrite)
    pred = predict_volume(model, vol, cfg.preprocess,
                          native_grid=not args.training_grid)
    write_nifti(out_path, pred.mask, pred.spacing)
    print(f"wrote {out_path}")
    return 0


def _default_pred_path(image_path):
    for ext in (".nii.gz", ".nii"):
        if image_path.endswith(ext):
            return image_path[: -len(ext)] + "_pred" + ext
    return image_path + "_pred.nii.gz"


def cmd_synth(args):
    cfg = _load_config(args)
    out_dir = args.out or "phantoms"
    manifest = os.path.join(out_dir, "manifest.csv")
    _guard_output(manifest, args.overwrite)
    os.makedirs(out_dir, exist_ok=True)
    write_phantom_dataset(out_dir, args.count, cfg.train.seed, cfg.phantom)
    print(f"wrote {args.count} phantom pairs under {out_dir}")
    return 0


def cmd_contour_debug(args):
    """Export contour supervision internals for one case as NIfTI volumes."""
    cfg = _load_config(args)
    if not args.checkpoint:
        raise ConfigurationError("contour-debug needs --checkpoint")
    model, ckpt_cfg, payload = load_checkpoint(args.checkpoint)
    cfg.network = ckpt_cfg.network
    cfg.train = ckpt_cfg.train
    if model.cfg.ablation is Ablation.C_NO_CONTOUR:
        raise ConfigurationError("checkpoint has no contour branch to debug")
    vol, label = load_volume(args.image)
    if label is None:
        raise IngestionError(f"{args.image} has no paired label volume")
    vol, label = preprocess_case(vol, label, cfg.preprocess)

    gamma_c = extract_contour(label.mask)
    with torch.no_grad():
        x = torch.from_numpy(vol.intensities[None, None].astype(np.float32))
        bundle = model(x)
        p = p_at_epoch(payload.get("epoch", 0), cfg.train.p_schedule)
        gamma_tilde = modify_contour_target(
            torch.from_numpy(gamma_c.astype(np.float32)),
            bundle.prob[0, 1], p).numpy()
        contour_prob = torch.softmax(bundle.f_contour, dim=1)[0, 1].numpy()
        shape_residual = (bundle.shape_feature[0, 1].numpy()
                          if bundle.shape_feature is not None
                          else np.zeros_like(contour_prob))

    out_dir = args.out or "contour_debug"
    _guard_output(os.path.join(out_dir, "contour.nii.gz"), args.overwrite)
    os.makedirs(out_dir, exist_ok=True)
    sp = vol.spacing
    write_nifti(os.path.join(out_dir, "contour.nii.gz"), gamma_c.astype(np.uint8), sp)
    write_nifti(os.path.join(out_dir, "contour_modified.nii.gz"),
                gamma_tilde.astype(np.uint8), sp)
    write_nifti(os.path.join(out_dir, "contour_prob.nii.gz"),
                contour_prob.astype(np.float32), sp)
    write_nifti(os.path.join(out_dir, "shape_residual.nii.gz"),
                shape_residual.astype(np.float32), sp)
    print(f"wrote 4 volumes under {out_dir} (p={p})")
    return 0


def _add_common(parser):
    parser.add_argument("--config", help="config file of dotted key = value lines")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory or file")
    parser.add_argument("--checkpoint", default=None)
    parser.add_argument("--overwrite", action="store_true")
    parser.add_argument("--parallel", type=int, default=1, metavar="K")


def build_parser():
    parser = argparse.ArgumentParser(prog="cenet")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model on a manifest")
    p.set_defaults(func=cmd_train)
    _add_common(p)

    p = sub.add_parser("cross-validate", help="k-fold cross-validation")
    p.set_defaults(func=cmd_cross_validate)
    _add_common(p)

    p = sub.add_parser("evaluate", help="metrics CSV for a checkpoint on labeled cases")
    p.set_defaults(func=cmd_evaluate)
    p.add_argument("--oracle", action="store_true",
                   help="score the ground truth against itself")
    _add_common(p)

    p = sub.add_parser("predict", help="segment one volume")
    p.set_defaults(func=cmd_predict)
    p.add_argument("image", help="input NIfTI volume")
    p.add_argument("--training-grid", action="store_true",
                   help="keep the prediction on the network grid")
    _add_common(p)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.set_defaults(func=cmd_synth)
    p.add_argument("--count", type=int, default=16)
    _add_common(p)

    p = sub.add_parser("contour-debug", help="export contour supervision volumes")
    p.set_defaults(func=cmd_contour_debug)
    p.add_argument("image", help="input NIfTI volume with a paired label")
    _add_common(p)

    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        for key, value in exc.diagnostics.items():
            print(f"  {key}: {value}", file=sys.stderr)
        return 3
    except (ConfigurationError, IngestionError, OutputExists, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
