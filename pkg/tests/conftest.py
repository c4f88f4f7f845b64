import numpy as np
import pytest
import torch

from cenet.config import ExperimentConfig
from cenet.data import generate_phantom, preprocess_case


def tiny_network(**overrides):
    """Smallest config that still exercises every architectural piece."""
    from cenet.config import NetworkConfig
    base = dict(growth_k=4, group_n=2, levels=2, base_channels=4,
                input_shape=(16, 16, 8), transition_width=8,
                out_growth=4, fuse_channels=8)
    base.update(overrides)
    return NetworkConfig(**base)


def tiny_experiment(**net_overrides):
    cfg = ExperimentConfig()
    cfg.network = tiny_network(**net_overrides)
    cfg.preprocess.target_shape = cfg.network.input_shape
    cfg.phantom.shape = cfg.network.input_shape
    cfg.train.batch_size = 2
    cfg.train.epochs = 2
    cfg.train.p_schedule.hold_epochs = 1
    cfg.train.p_schedule.decay_every = 1
    return cfg


def phantom_cases(cfg, count, seed=11):
    cases = []
    for i in range(count):
        vol, label = generate_phantom(cfg.phantom, np.random.default_rng([seed, i]))
        vol, label = preprocess_case(vol, label, cfg.preprocess)
        cases.append((f"case{i:03d}", vol, label))
    return cases


def finite_difference_grad(fn, tensor, eps=1e-6):
    """Central-difference gradient of a scalar function w.r.t. one tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn())
        flat[i] = orig - eps
        lo = float(fn())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_grad_error(analytic, numeric):
    analytic = analytic.reshape(-1).double()
    numeric = numeric.reshape(-1).double()
    scale = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
    return float((analytic - numeric).norm()) / scale


@pytest.fixture(autouse=True)
def _reset_torch_seed():
    torch.manual_seed(0)
