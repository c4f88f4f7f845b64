"""Supervision targets and the composite training loss.

The contour target is the one-voxel inner boundary of the label.  During
training it is rewritten every iteration: contour voxels the network already
predicts with foreground probability >= p are erased, so the contour branch
concentrates on boundary regions that are still misclassified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .config import LossWeights, PSchedule
from .errors import ShapeError
from .model import FeatureBundle

DICE_EPS = 1e-5
CLASS_WEIGHT_MIN = 0.1
CLASS_WEIGHT_MAX = 10.0

_FACE_NEIGHBORHOOD = ndimage.generate_binary_structure(3, 1)


def extract_contour(label):
    """One-voxel-thick inner boundary of a binary 3D label.

    A voxel belongs to the contour when it is labeled and has at least one
    face-adjacent neighbor (or the grid boundary) that is background.
    """
    label = np.asarray(label)
    if label.ndim != 3:
        raise ShapeError(f"label must be 3D, got shape {label.shape}")
    if label.dtype != bool and not np.isin(label, (0, 1)).all():
        raise ValueError("label must be binary")
    mask = label.astype(bool)
    eroded = ndimage.binary_erosion(mask, structure=_FACE_NEIGHBORHOOD)
    return mask & ~eroded


def threshold_prediction(prob_fg, p):
    """Binary map marking voxels whose foreground probability is below p."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"threshold p must be in (0, 1], got {p}")
    lo, hi = float(prob_fg.min()), float(prob_fg.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"probabilities must lie in [0, 1], got [{lo}, {hi}]")
    return (prob_fg < p).to(prob_fg.dtype)


def modify_contour_target(gamma_c, prob_fg, p):
    """Erase contour voxels the network already predicts confidently.

    Returns gamma_c masked to voxels with prob_fg < p.  The result is a
    constant target: no gradient flows through the thresholding.
    """
    if gamma_c.shape != prob_fg.shape:
        raise ShapeError(
            f"contour {tuple(gamma_c.shape)} vs prob {tuple(prob_fg.shape)}")
    with torch.no_grad():
        return gamma_c.to(prob_fg.dtype) * threshold_prediction(prob_fg.detach(), p)


def soft_dice_loss(prob_fg, target):
    """Differentiable dice loss with a squared-sum denominator.

    1 - (2 * sum(p*t) + eps) / (sum(p^2) + sum(t^2) + eps), eps = 1e-5.
    """
    if prob_fg.shape != target.shape:
        raise ShapeError(
            f"prediction {tuple(prob_fg.shape)} vs target {tuple(target.shape)}")
    target = target.to(prob_fg.dtype)
    inter = (prob_fg * target).sum()
    denom = prob_fg.pow(2).sum() + target.pow(2).sum()
    return 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)


def inverse_frequency_weights(target):
    """Per-batch class weights 1/frequency, clamped to [0.1, 10]."""
    total = target.numel()
    fg = float(target.sum())
    freqs = np.array([(total - fg) / total, fg / total])
    with np.errstate(divide="ignore"):
        weights = np.clip(1.0 / np.maximum(freqs, 1e-12),
                          CLASS_WEIGHT_MIN, CLASS_WEIGHT_MAX)
    return float(weights[0]), float(weights[1])


def weighted_softmax_cross_entropy(logits, target, class_weights=None):
    """Class-weighted softmax cross-entropy, averaged over all voxels.

    ``logits`` has 2 channels; ``target`` is the binary map without a channel
    axis.  ``class_weights`` defaults to the per-batch inverse class
    frequency of the target.
    """
    if logits.shape[1] != 2:
        raise ShapeError(f"expected 2-channel logits, got {logits.shape[1]}")
    expected = logits.shape[:1] + logits.shape[2:]
    if tuple(target.shape) != tuple(expected):
        raise ShapeError(
            f"target shape {tuple(target.shape)} does not match logits "
            f"{tuple(logits.shape)}")
    if class_weights is None:
        class_weights = inverse_frequency_weights(target)
    idx = target.long().unsqueeze(1)
    log_prob = F.log_softmax(logits, dim=1).gather(1, idx).squeeze(1)
    weights = torch.as_tensor(class_weights, dtype=logits.dtype,
                              device=logits.device)[target.long()]
    return -(weights * log_prob).mean()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    dice_out: torch.Tensor
    dice_shape: torch.Tensor | None
    contour_ce: torch.Tensor | None
    l2: torch.Tensor | None


def total_loss_terms(bundle: FeatureBundle, target, gamma_c_tilde,
                     weights: LossWeights, params=None) -> LossBreakdown:
    """Composite loss: output dice + shape dice + contour CE + L2 penalty.

    Each dice term consumes the foreground softmax channel of its 2-channel
    feature map.  Branches absent from the bundle (ablations) contribute
    nothing; ``params`` is the iterable of conv weight tensors the L2 term
    sums over (batch-norm parameters are excluded by construction).
    """
    dice_out = soft_dice_loss(bundle.prob[:, 1], target)
    total = dice_out

    dice_shape = None
    shape_feat = bundle.shape_feature
    if shape_feat is not None:
        dice_shape = soft_dice_loss(torch.softmax(shape_feat, dim=1)[:, 1], target)
        total = total + weights.alpha * dice_shape

    contour_ce = None
    if bundle.f_contour is not None:
        contour_ce = weighted_softmax_cross_entropy(
            bundle.f_contour, gamma_c_tilde, weights.class_weights)
        total = total + weights.beta * contour_ce

    l2 = None
    if params is not None:
        acc = None
        for w in params:
            acc = w.pow(2).sum() if acc is None else acc + w.pow(2).sum()
        if acc is not None:
            l2 = acc
            total = total + weights.gamma * l2

    return LossBreakdown(total, dice_out, dice_shape, contour_ce, l2)


def total_loss(bundle, target, gamma_c_tilde, weights, params=None):
    return total_loss_terms(bundle, target, gamma_c_tilde, weights, params).total


def p_at_epoch(epoch, sched: PSchedule):
    """Contour threshold for an epoch: hold, then decay every few epochs.

    p stays at p_initial for the first hold_epochs epochs, is multiplied by
    decay_factor at epoch hold_epochs and again every decay_every epochs, and
    never drops below p_min.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < sched.hold_epochs:
        return sched.p_initial
    steps = (epoch - sched.hold_epochs) // sched.decay_every + 1
    # schedules are decimal rules; snap cumulative powers back to the decimal
    # value they denote so repeated multiplication cannot drift by an ulp
    value = float(f"{sched.p_initial * sched.decay_factor ** steps:.12g}")
    return max(sched.p_min, value)
