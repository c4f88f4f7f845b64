"""Training loop: schedules, per-iteration contour rewriting, validation,
checkpointing and cross-validation.

Cases are ``(case_id, Volume, LabelVolume)`` triples already on the training
grid.  Two runs with the same seed, config and data produce identical loss
trajectories (and identical ``curve.csv`` files) on the same backend.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np
import torch

from .config import Ablation, ExperimentConfig
from .data import Volume, LabelVolume, cutout, preprocess_case, random_affine, resample_label
from .errors import ShapeError, TrainingAbort
from .metrics import BinaryMask, MetricReport, evaluate_case
from .model import CENet, conv_weights, init_parameters
from .supervision import (extract_contour, modify_contour_target, p_at_epoch,
                          soft_dice_loss, total_loss_terms)

CURVE_HEADER = ["epoch", "train_dice_loss", "val_dice_loss", "p_value", "lr"]

# channels-last keeps the 3D convolutions in oneDNN's fast path on CPU
_MEMORY_FORMAT = torch.channels_last_3d


def _as_input(array):
    t = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))
    return t.to(memory_format=_MEMORY_FORMAT) if t.ndim == 5 else t


@dataclass
class EpochLog:
    epoch: int
    train_dice_loss: float
    val_dice_loss: float
    p_value: float
    lr: float
    wall_time_s: float


def lr_at_epoch(epoch, train_cfg):
    """Stepped learning rate: lr_initial * decay ^ (epoch // decay_every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    steps = epoch // train_cfg.lr_decay_every
    # snap the cumulative decimal power so 0.001 * 0.1^2 is exactly 1e-5
    return float(f"{train_cfg.lr_initial * train_cfg.lr_decay_factor ** steps:.12g}")


def _augment_case(vol, label, augment, rng):
    vol, label = random_affine(vol, label, augment, rng)
    vol = cutout(vol, augment, rng)
    return vol, label


def make_batches(cases, cfg: ExperimentConfig, epoch, augment=True):
    """Shuffle cases and build augmented (ids, image, label, contour) batches.

    Every randomized draw comes from a stream derived from
    (seed, epoch, case position), so epochs are reproducible in isolation.
    """
    seed = cfg.train.seed
    order_rng = np.random.default_rng([seed, 1000 + epoch])
    order = order_rng.permutation(len(cases))
    batches = []
    bs = cfg.train.batch_size
    for start in range(0, len(cases), bs):
        ids, images, labels, contours = [], [], [], []
        for pos in order[start:start + bs]:
            case_id, vol, label = cases[pos]
            if augment:
                rng = np.random.default_rng([seed, epoch, int(pos)])
                vol, label = _augment_case(vol, label, cfg.augment, rng)
            ids.append(case_id)
            images.append(vol.intensities)
            labels.append(label.mask)
            contours.append(extract_contour(label.mask))
        x = _as_input(np.stack(images)[:, None])
        y = torch.from_numpy(np.stack(labels).astype(np.float32))
        gamma = torch.from_numpy(np.stack(contours).astype(np.float32))
        batches.append((ids, x, y, gamma))
    return batches


def train_epoch(model, optimizer, batches, cfg: ExperimentConfig, epoch):
    """One optimization pass; returns the running mean output dice loss.

    The contour target of every iteration is rebuilt from that iteration's
    own forward pass (except in the full-contour ablation, which always
    supervises with the unmodified contour).
    """
    model.train()
    p = p_at_epoch(epoch, cfg.train.p_schedule)
    reg_weights = conv_weights(model)
    dice_sum = 0.0
    for iteration, (ids, x, y, gamma_c) in enumerate(batches):
        bundle = model(x)
        if model.cfg.ablation is Ablation.A_FULL_CONTOUR or bundle.f_contour is None:
            gamma_tilde = gamma_c
        else:
            gamma_tilde = modify_contour_target(gamma_c, bundle.prob[:, 1], p)
        terms = total_loss_terms(bundle, y, gamma_tilde,
                                 cfg.train.loss_weights, params=reg_weights)
        if not torch.isfinite(terms.total):
            raise TrainingAbort(
                f"non-finite loss at epoch {epoch}, iteration {iteration}",
                diagnostics={
                    "epoch": epoch, "iteration": iteration, "batch_ids": ids,
                    "dice_out": float(terms.dice_out),
                    "dice_shape": None if terms.dice_shape is None else float(terms.dice_shape),
                    "contour_ce": None if terms.contour_ce is None else float(terms.contour_ce),
                    "l2": None if terms.l2 is None else float(terms.l2),
                })
        optimizer.zero_grad()
        terms.total.backward()
        optimizer.step()
        dice_sum += float(terms.dice_out.detach())
    return dice_sum / max(1, len(batches))


def validate(model, cases, compute_metrics=True):
    """Mean output dice loss plus per-case metric reports; no augmentation.

    Predictions are the channel argmax of the softmax output.  Model
    parameters and batch-norm statistics are left untouched.
    """
    if not cases:
        raise ValueError("validation needs at least one case")
    model.eval()
    losses = []
    reports = []
    with torch.no_grad():
        for case_id, vol, label in cases:
            x = _as_input(vol.intensities[None, None])
            bundle = model(x)
            y = torch.from_numpy(label.mask.astype(np.float32))[None]
            losses.append(float(soft_dice_loss(bundle.prob[:, 1], y)))
            if compute_metrics:
                pred = bundle.prob.argmax(dim=1)[0].numpy().astype(np.uint8)
                reports.append((case_id, evaluate_case(
                    BinaryMask(pred, vol.spacing),
                    BinaryMask(label.mask, vol.spacing))))
    return float(np.mean(losses)), reports


def _write_curve_row(path, log: EpochLog, header=False):
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(CURVE_HEADER)
        writer.writerow([log.epoch, f"{log.train_dice_loss:.10g}",
                         f"{log.val_dice_loss:.10g}", f"{log.p_value:.10g}",
                         f"{log.lr:.10g}"])


def save_checkpoint(path, model, cfg: ExperimentConfig, epoch, metric_snapshot=None):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    torch.save({
        "model_state": model.state_dict(),
        "config_lines": cfg.to_lines(),
        "config_hash": cfg.config_hash(),
        "epoch": epoch,
        "metrics": metric_snapshot or {},
    }, path)


def load_checkpoint(path):
    """Rebuild the model and config recorded in a checkpoint."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = ExperimentConfig.from_lines(payload["config_lines"], source=str(path))
    model = CENet(cfg.network).to(memory_format=_MEMORY_FORMAT)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg, payload


def train(train_cases, val_cases, cfg: ExperimentConfig, run_dir,
          progress=None) -> list[EpochLog]:
    """Full training: schedules, curve logging, best/last checkpoints."""
    cfg.validate()
    os.makedirs(run_dir, exist_ok=True)
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    cfg.dump(os.path.join(run_dir, "config.resolved"))
    curve_path = os.path.join(run_dir, "curve.csv")
    if os.path.exists(curve_path):
        os.remove(curve_path)

    torch.manual_seed(cfg.train.seed)
    model = init_parameters(CENet(cfg.network), cfg.train.seed)
    model = model.to(memory_format=_MEMORY_FORMAT)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.lr_initial)

    logs = []
    best_val = float("inf")
    for epoch in range(cfg.train.epochs):
        started = time.monotonic()
        lr = lr_at_epoch(epoch, cfg.train)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batches = make_batches(train_cases, cfg, epoch)
        train_dice = train_epoch(model, optimizer, batches, cfg, epoch)
        val_dice, _ = validate(model, val_cases, compute_metrics=False)
        log = EpochLog(epoch, train_dice, val_dice,
                       p_at_epoch(epoch, cfg.train.p_schedule), lr,
                       time.monotonic() - started)
        logs.append(log)
        _write_curve_row(curve_path, log, header=(epoch == 0))
        if val_dice < best_val:
            best_val = val_dice
            save_checkpoint(os.path.join(ckpt_dir, f"{epoch}.ckpt"), model, cfg,
                            epoch, {"val_dice_loss": val_dice})
            save_checkpoint(os.path.join(ckpt_dir, "best.ckpt"), model, cfg,
                            epoch, {"val_dice_loss": val_dice})
        if progress is not None:
            progress(log)
    save_checkpoint(os.path.join(ckpt_dir, "last.ckpt"), model, cfg,
                    cfg.train.epochs - 1, {"val_dice_loss": logs[-1].val_dice_loss})
    return logs


def _run_fold(payload):
    """One cross-validation fold: fresh init, full training, held-out metrics."""
    from .metrics import write_metric_csv

    fold_id, train_cases, val_cases, cfg_lines, base_seed, out_dir = payload
    cfg = ExperimentConfig.from_lines(cfg_lines)
    cfg.train.seed = base_seed + fold_id
    fold_dir = os.path.join(out_dir, f"fold{fold_id}")
    train(train_cases, val_cases, cfg, fold_dir)
    model, _, _ = load_checkpoint(os.path.join(fold_dir, "checkpoints", "best.ckpt"))
    _, reports = validate(model, val_cases)
    rows = [(case_id, fold_id, report) for case_id, report in reports]
    write_metric_csv(os.path.join(fold_dir, "metrics.csv"), rows)
    return rows


def cross_validate(cases, fold_split, cfg: ExperimentConfig, out_dir, parallel=1):
    """Train one fresh model per fold; write per-fold and aggregate CSVs.

    ``parallel`` > 1 runs that many folds as independent processes.  Returns
    the flat list of ``(case_id, fold, MetricReport)`` rows across folds; the
    aggregate mean over that list equals the mean over folds of the per-case
    values.
    """
    from .metrics import write_metric_csv

    by_id = {case_id: (case_id, vol, label) for case_id, vol, label in cases}
    cfg_lines = cfg.to_lines()
    jobs = [(fold_id,
             [by_id[c] for c in train_ids],
             [by_id[c] for c in val_ids],
             cfg_lines, cfg.train.seed, out_dir)
            for fold_id, train_ids, val_ids in fold_split.splits()]

    if parallel > 1:
        import concurrent.futures
        with concurrent.futures.ProcessPoolExecutor(max_workers=parallel) as pool:
            per_fold = list(pool.map(_run_fold, jobs))
    else:
        per_fold = [_run_fold(job) for job in jobs]

    all_rows = [row for rows in per_fold for row in rows]
    os.makedirs(out_dir, exist_ok=True)
    write_metric_csv(os.path.join(out_dir, "metrics.csv"), all_rows)
    return all_rows


def predict_volume(model, vol: Volume, preprocess, native_grid=True) -> LabelVolume:
    """Preprocess, run the network, argmax, optionally restore the native grid."""
    native_shape = vol.intensities.shape
    prepared, _ = preprocess_case(vol, None, preprocess)
    scale = 2 ** model.cfg.levels
    if any(d % scale for d in prepared.intensities.shape):
        raise ShapeError(
            f"preprocessed shape {prepared.intensities.shape} is not divisible "
            f"by 2^levels={scale}")
    model.eval()
    with torch.no_grad():
        x = _as_input(prepared.intensities[None, None])
        pred = model(x).prob.argmax(dim=1)[0].numpy().astype(np.uint8)
    result = LabelVolume(pred, prepared.spacing)
    if native_grid and native_shape != pred.shape:
        result = resample_label(result, native_shape)
        result = LabelVolume(result.mask, vol.spacing)
    return result
