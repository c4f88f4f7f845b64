"""Volume ingestion, preprocessing, augmentation, folds and synthetic phantoms.

Images live as (x, y, z) numpy arrays with mm voxel spacing.  All randomized
operations take an explicit ``numpy.random.Generator`` so the pipeline is
reproducible from ``(seed, draw index)``; callers derive per-case streams
with ``np.random.default_rng([seed, case_index, ...])``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import AugmentSpec, PhantomSpec, PreprocessSpec
from .errors import IngestionError, ShapeError
from .nifti import read_nifti, write_nifti


@dataclass
class Volume:
    intensities: np.ndarray                      # (x, y, z) scalars
    spacing: tuple[float, float, float]          # mm per voxel
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    normalized: bool = False                     # True once windowed onto [0, 1]


@dataclass
class LabelVolume:
    mask: np.ndarray                             # (x, y, z) in {0, 1}
    spacing: tuple[float, float, float]


# -- ingestion ----------------------------------------------------------------

def label_path_for(image_path):
    """Companion label path by naming convention: <id>_label.nii.gz."""
    base = str(image_path)
    for ext in (".nii.gz", ".nii"):
        if base.endswith(ext):
            return base[: -len(ext)] + "_label" + ext
    return base + "_label.nii.gz"


def load_volume(path):
    """Load an image volume and, when present, its paired label.

    Returns ``(Volume, LabelVolume | None)``.
    """
    data, spacing, origin = read_nifti(path)
    vol = Volume(np.asarray(data, dtype=np.float32), spacing, origin)
    lpath = label_path_for(path)
    if not os.path.exists(lpath):
        return vol, None
    ldata, lspacing, _ = read_nifti(lpath)
    mask = (np.asarray(ldata) > 0.5).astype(np.uint8)
    if mask.shape != vol.intensities.shape:
        raise IngestionError(
            f"label shape {mask.shape} does not match image {vol.intensities.shape}")
    return vol, LabelVolume(mask, lspacing)


# -- preprocessing ------------------------------------------------------------

def window_normalize(vol: Volume, spec: PreprocessSpec) -> Volume:
    """Clip intensities to the window and map linearly onto [0, 1].

    Already-normalized volumes pass through unchanged, which keeps the
    preprocessing pipeline idempotent.
    """
    if vol.normalized:
        return Volume(vol.intensities.copy(), vol.spacing, vol.origin, normalized=True)
    lo, hi = spec.clip_lo, spec.clip_hi
    clipped = np.clip(vol.intensities, lo, hi)
    normed = ((clipped - lo) / (hi - lo)).astype(np.float32)
    return Volume(normed, vol.spacing, vol.origin, normalized=True)


def _resample_grid(src_shape, target_shape):
    # half-voxel-centered sampling; out-of-range coordinates clamp to the edge
    axes = [(np.arange(t) + 0.5) * s / t - 0.5 for s, t in zip(src_shape, target_shape)]
    return np.meshgrid(*axes, indexing="ij")


def _rescaled_spacing(spacing, src_shape, target_shape):
    return tuple(sp * s / t for sp, s, t in zip(spacing, src_shape, target_shape))


def resample_volume(vol: Volume, target_shape) -> Volume:
    """Trilinear resampling of intensities to a new grid."""
    target_shape = tuple(int(t) for t in target_shape)
    if any(t < 1 for t in target_shape):
        raise ValueError(f"target shape must be positive, got {target_shape}")
    src = vol.intensities.shape
    if target_shape == src:
        return Volume(vol.intensities.copy(), vol.spacing, vol.origin,
                      normalized=vol.normalized)
    coords = _resample_grid(src, target_shape)
    out = ndimage.map_coordinates(vol.intensities.astype(np.float32), coords,
                                  order=1, mode="nearest")
    return Volume(out.astype(np.float32),
                  _rescaled_spacing(vol.spacing, src, target_shape), vol.origin,
                  normalized=vol.normalized)


def resample_label(label: LabelVolume, target_shape) -> LabelVolume:
    """Nearest-neighbor resampling; the mask stays binary."""
    target_shape = tuple(int(t) for t in target_shape)
    if any(t < 1 for t in target_shape):
        raise ValueError(f"target shape must be positive, got {target_shape}")
    src = label.mask.shape
    if target_shape == src:
        return LabelVolume(label.mask.copy(), label.spacing)
    coords = _resample_grid(src, target_shape)
    out = ndimage.map_coordinates(label.mask.astype(np.uint8), coords,
                                  order=0, mode="nearest")
    return LabelVolume(out.astype(np.uint8),
                       _rescaled_spacing(label.spacing, src, target_shape))


def preprocess_case(vol, label, spec: PreprocessSpec):
    """Resample to the training grid, then window and normalize."""
    vol = resample_volume(vol, spec.target_shape)
    vol = window_normalize(vol, spec)
    if label is not None:
        label = resample_label(label, spec.target_shape)
    return vol, label


# -- augmentation -------------------------------------------------------------

def _rotation_matrix(angles_deg):
    ax, ay, az = np.deg2rad(angles_deg)
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def random_affine(vol: Volume, label: LabelVolume, spec: AugmentSpec, rng):
    """One shared random rotation/scale/translation for image and label.

    The image is interpolated trilinearly, the label with nearest neighbors;
    with probability ``1 - affine_prob`` both are returned untouched.
    """
    if vol.intensities.shape != label.mask.shape:
        raise ShapeError(
            f"image {vol.intensities.shape} vs label {label.mask.shape}")
    if rng.random() >= spec.affine_prob:
        return vol, label

    angles = rng.uniform(-spec.rotate_deg, spec.rotate_deg, size=3)
    scale = rng.uniform(spec.scale_min, spec.scale_max)
    shape = np.array(vol.intensities.shape, dtype=float)
    translation = rng.uniform(-spec.translate_frac, spec.translate_frac, size=3) * shape

    # forward map T(x) = scale * R (x - c) + c + t; render via its inverse
    forward = _rotation_matrix(angles) * scale
    center = (shape - 1) / 2.0
    inverse = np.linalg.inv(forward)
    offset = center - inverse @ (center + translation)

    img = ndimage.affine_transform(vol.intensities.astype(np.float32), inverse,
                                   offset=offset, order=1, mode="constant", cval=0.0)
    msk = ndimage.affine_transform(label.mask.astype(np.uint8), inverse,
                                   offset=offset, order=0, mode="constant", cval=0)
    return (Volume(img.astype(np.float32), vol.spacing, vol.origin, vol.normalized),
            LabelVolume(msk.astype(np.uint8), label.spacing))


def cutout(vol: Volume, spec: AugmentSpec, rng) -> Volume:
    """Zero a randomly sized box; the box may straddle the volume boundary.

    Per-dimension edge lengths are drawn uniformly from
    [ceil(L * frac_min), floor(L * frac_max)]; the box center is unconstrained
    so up to 7/8 of the box can fall outside the grid.
    """
    if rng.random() >= spec.cutout_prob:
        return vol
    shape = vol.intensities.shape
    out = vol.intensities.copy()
    slices = []
    for length in shape:
        lo_len = math.ceil(length * spec.cutout_frac_min)
        hi_len = math.floor(length * spec.cutout_frac_max)
        side = int(rng.integers(lo_len, hi_len, endpoint=True))
        center = int(rng.integers(0, length))
        start = center - side // 2
        slices.append(slice(max(0, start), min(length, start + side)))
    out[tuple(slices)] = 0.0
    return Volume(out, vol.spacing, vol.origin, vol.normalized)


# -- fold splitting -----------------------------------------------------------

@dataclass
class FoldSplit:
    """Partition of case ids into folds.

    In the standard layout every fold serves once as the validation set.  In
    the inverted layout (``train_fold`` set) the named fold is the small
    training set and the single remaining fold is validated.
    """

    fold_count: int
    assignments: dict = field(default_factory=dict)
    train_fold: int | None = None

    def members(self, fold):
        return sorted(cid for cid, f in self.assignments.items() if f == fold)

    def splits(self):
        """Yield (fold_id, train_ids, val_ids) for every evaluation."""
        if self.train_fold is not None:
            yield self.train_fold, self.members(self.train_fold), self.members(1 - self.train_fold)
            return
        for fold in range(self.fold_count):
            val = self.members(fold)
            train = sorted(cid for cid, f in self.assignments.items() if f != fold)
            yield fold, train, val


def make_folds(case_ids, fold_count, seed, train_count=None) -> FoldSplit:
    """Deterministic shuffled fold assignment; sizes differ by at most one.

    ``train_count`` switches to the inverted protocol: that many shuffled
    cases form the training fold, everything else is the validation fold.
    """
    ids = list(case_ids)
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    if train_count is not None:
        if not 0 < train_count < len(ids):
            raise ValueError(
                f"train_count {train_count} must be in (0, {len(ids)})")
        assignments = {cid: (0 if i < train_count else 1) for i, cid in enumerate(order)}
        return FoldSplit(2, assignments, train_fold=0)
    if fold_count < 1 or fold_count > len(ids):
        raise ValueError(f"fold_count {fold_count} must be in [1, {len(ids)}]")
    assignments = {cid: i % fold_count for i, cid in enumerate(order)}
    return FoldSplit(fold_count, assignments)


# -- synthetic phantoms -------------------------------------------------------

def _ellipsoid_mask(shape, center, axes, rotation):
    grids = np.meshgrid(*[np.arange(s, dtype=float) for s in shape], indexing="ij")
    pts = np.stack([g - c for g, c in zip(grids, center)], axis=-1)
    local = pts @ rotation  # rotate into the ellipsoid frame
    return (np.sum((local / axes) ** 2, axis=-1) <= 1.0)


def generate_phantom(spec: PhantomSpec, rng):
    """Render one random blob volume with its exact label.

    The foreground is a union of 2-4 overlapping ellipsoids at a random pose.
    A distractor blob with intermediate intensity touches the foreground
    boundary so intensity alone cannot separate the object.  Blobs are
    redrawn until the label fills the configured volume fraction.
    """
    shape = np.array(spec.shape, dtype=int)
    for _ in range(64):
        count = int(rng.integers(2, 5))
        base_center = shape * rng.uniform(0.35, 0.65, size=3)
        mask = np.zeros(tuple(shape), dtype=bool)
        max_r = None
        for i in range(count):
            axes = shape * rng.uniform(0.12, 0.28, size=3)
            if i == 0:
                center = base_center
                max_r = axes.max()
            else:
                center = base_center + rng.uniform(-0.6, 0.6, size=3) * max_r
            rot = _rotation_matrix(rng.uniform(-90, 90, size=3))
            mask |= _ellipsoid_mask(tuple(shape), center, axes, rot)
        frac = mask.mean()
        if spec.min_volume_frac <= frac <= spec.max_volume_frac:
            break
    else:
        raise RuntimeError("could not draw a phantom inside the volume-fraction band")

    img = np.full(tuple(shape), spec.bg_hu, dtype=np.float32)

    # distractor: an ellipsoid centered on a random surface voxel of the blob
    surface = mask & ~ndimage.binary_erosion(mask)
    surf_idx = np.argwhere(surface)
    pick = surf_idx[int(rng.integers(0, len(surf_idx)))]
    d_axes = shape * rng.uniform(0.06, 0.14, size=3)
    d_rot = _rotation_matrix(rng.uniform(-90, 90, size=3))
    distractor = _ellipsoid_mask(tuple(shape), pick.astype(float), d_axes, d_rot)
    img[distractor & ~mask] = spec.distractor_hu
    img[mask] = spec.fg_hu

    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape).astype(np.float32)

    return (Volume(img.astype(np.float32), spec.spacing),
            LabelVolume(mask.astype(np.uint8), spec.spacing))


def write_phantom_dataset(out_dir, count, seed, spec: PhantomSpec):
    """Write ``count`` phantom pairs plus a manifest CSV; seeded, deterministic."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        vol, label = generate_phantom(spec, rng)
        case_id = f"phantom{i:04d}"
        image_path = os.path.join(out_dir, f"{case_id}.nii.gz")
        write_nifti(image_path, vol.intensities, vol.spacing)
        write_nifti(label_path_for(image_path), label.mask, label.spacing)
        rows.append((case_id, image_path, label_path_for(image_path)))
    manifest = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest, rows)
    return manifest


# -- manifests and cached tensors ----------------------------------------------

def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "image_path", "label_path"])
        writer.writerows(rows)


def read_manifest(path):
    """Rows of ``(case_id, image_path, label_path)``; label may be empty."""
    if not os.path.exists(path):
        raise IngestionError(f"no such manifest: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "case_id" not in reader.fieldnames:
            raise IngestionError(f"{path}: expected a case_id,image_path,label_path header")
        for rec in reader:
            rows.append((rec["case_id"], rec["image_path"], rec.get("label_path", "") or ""))
    return rows


def write_cache(path_stem, vol: Volume, spec: PreprocessSpec):
    """Cache a preprocessed volume as a raw little-endian float32 blob.

    ``<stem>.raw`` holds the C-order voxels; ``<stem>.json`` records shape,
    spacing and the intensity window that produced the blob.
    """
    data = np.ascontiguousarray(vol.intensities, dtype="<f4")
    with open(f"{path_stem}.raw", "wb") as fh:
        fh.write(data.tobytes())
    header = {
        "shape": list(data.shape),
        "spacing": list(vol.spacing),
        "window": {"level": spec.window_level, "width": spec.window_width},
    }
    with open(f"{path_stem}.json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)


def read_cache(path_stem):
    with open(f"{path_stem}.json") as fh:
        header = json.load(fh)
    shape = tuple(header["shape"])
    data = np.fromfile(f"{path_stem}.raw", dtype="<f4").reshape(shape)
    return Volume(data, tuple(header["spacing"])), header["window"]
