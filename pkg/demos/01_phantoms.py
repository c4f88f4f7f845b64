"""Generate a few synthetic phantoms and look at what the network trains on.

Each phantom is a union of overlapping ellipsoids with a distractor blob of
intermediate intensity touching the boundary, so thresholding alone cannot
recover the label.  Run:  python3 demos/01_phantoms.py
"""
import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from cenet import PhantomSpec, generate_phantom

spec = PhantomSpec(shape=(64, 64, 32))
fig, axes = plt.subplots(3, 4, figsize=(12, 8))

for row, seed in enumerate([0, 1, 2]):
    vol, label = generate_phantom(spec, np.random.default_rng(seed))
    frac = label.mask.mean()
    print(f"phantom seed {seed}: label fills {frac:.1%} of the volume, "
          f"intensity range [{vol.intensities.min():.0f}, {vol.intensities.max():.0f}] HU")
    z = int(np.argmax(label.mask.sum(axis=(0, 1))))  # densest axial slice
    axes[row, 0].imshow(vol.intensities[:, :, z].T, cmap="gray")
    axes[row, 0].set_title(f"seed {seed}: image (z={z})")
    axes[row, 1].imshow(label.mask[:, :, z].T, cmap="viridis")
    axes[row, 1].set_title("label")
    axes[row, 2].imshow(vol.intensities[:, 32, :].T, cmap="gray", aspect=2)
    axes[row, 2].set_title("coronal")
    axes[row, 3].hist(vol.intensities.ravel(), bins=80)
    axes[row, 3].set_title("intensity histogram")

for ax in axes.ravel():
    if ax.images:
        ax.axis("off")
fig.tight_layout()
fig.savefig("demo_phantoms.png", dpi=110)
print("wrote demo_phantoms.png")
