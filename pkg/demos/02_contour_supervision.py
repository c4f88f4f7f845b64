"""The adaptive contour target: erase what the network already gets right.

The contour target starts as the one-voxel inner boundary of the label.
During training, contour voxels whose foreground probability is already
above the threshold p are erased, so the contour branch is pushed toward the
still-misclassified boundary.  Here we fake a "half-trained" probability map
to show how the target thins out as p decays.
"""
import numpy as np
import torch
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from scipy import ndimage

from cenet import PhantomSpec, PSchedule, generate_phantom
from cenet.supervision import extract_contour, modify_contour_target, p_at_epoch

spec = PhantomSpec(shape=(64, 64, 32), noise_sigma=0.0)
_, label = generate_phantom(spec, np.random.default_rng(3))
gamma_c = extract_contour(label.mask)
print(f"label: {label.mask.sum()} voxels, contour: {gamma_c.sum()} voxels")

# pretend the network is confident everywhere except near one side of the
# object: blur the label and distort it so some boundary stays uncertain
prob = ndimage.gaussian_filter(label.mask.astype(np.float32), sigma=2.0)
prob[32:] = np.clip(prob[32:] * 1.6, 0, 1)   # one half "well learned"
prob_t = torch.from_numpy(prob)
gamma_t = torch.from_numpy(gamma_c.astype(np.float32))

z = int(np.argmax(label.mask.sum(axis=(0, 1))))
ps = [1.0, 0.9, 0.7, 0.5]
fig, axes = plt.subplots(1, len(ps) + 1, figsize=(15, 3.2))
axes[0].imshow(prob[:, :, z].T, cmap="magma")
axes[0].set_title("fake probability map")
for ax, p in zip(axes[1:], ps):
    gamma_tilde = modify_contour_target(gamma_t, prob_t, p).numpy()
    kept = int(gamma_tilde.sum())
    print(f"p={p:.1f}: {kept:5d} of {int(gamma_c.sum())} contour voxels kept")
    ax.imshow(gamma_tilde[:, :, z].T, cmap="viridis")
    ax.set_title(f"target at p={p}")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig("demo_contour_targets.png", dpi=110)
print("wrote demo_contour_targets.png")

sched = PSchedule()
print("\nthreshold schedule (default):")
for epoch in (0, 99, 100, 109, 110, 150, 160, 200, 300):
    print(f"  epoch {epoch:3d}: p = {p_at_epoch(epoch, sched)}")
