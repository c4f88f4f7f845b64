"""Contour-embedded, deeply supervised 3D segmentation network.

A dense-separable V-shaped network whose intermediate shape and contour
branches are deeply supervised; the contour target is rewritten every
training iteration so the branch focuses on boundary voxels the network
still gets wrong.  Ships with a preprocessing/augmentation pipeline,
surface-distance metrics, a cross-validation trainer and a CLI.
"""

from .config import (Ablation, AugmentSpec, DataConfig, ExperimentConfig,
                     LossWeights, NetworkConfig, PhantomSpec, PreprocessSpec,
                     PSchedule, TrainConfig)
from .data import (FoldSplit, LabelVolume, Volume, cutout, generate_phantom,
                   load_volume, make_folds, random_affine, resample_label,
                   resample_volume, window_normalize)
from .metrics import (BinaryMask, MetricReport, SurfaceSet, assd, dsc,
                      directed_distances, evaluate_case, extract_surface,
                      hd95, precision, sensitivity)
from .model import (CENet, DBlock, DeepTransition, DownTransition,
                    FeatureBundle, OutTransition, UpTransition,
                    count_parameters, init_parameters, residual_shape)
from .supervision import (extract_contour, modify_contour_target, p_at_epoch,
                          soft_dice_loss, threshold_prediction, total_loss,
                          weighted_softmax_cross_entropy)
from .trainer import (EpochLog, cross_validate, load_checkpoint, lr_at_epoch,
                      predict_volume, train, validate)

__version__ = "0.1.0"
