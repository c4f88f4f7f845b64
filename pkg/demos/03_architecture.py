"""Walk through the network: dense blocks, branches, and parameter budgets.

Shows the feature shapes a forward pass produces, how the separable dense
blocks compare against plain dense convolutions, and what each ablation
removes.
"""
import torch

from cenet import CENet, count_parameters, init_parameters
from cenet.config import Ablation, NetworkConfig

desk = NetworkConfig(growth_k=4, group_n=2, levels=3, base_channels=4,
                     input_shape=(64, 64, 32), transition_width=8,
                     out_growth=8, fuse_channels=8)
paper_scale = NetworkConfig()  # growth 16, groups of 4, 128x128x64 input

net = init_parameters(CENet(desk), seed=0).eval()
with torch.no_grad():
    bundle = net(torch.zeros(1, 1, *desk.input_shape))

print("forward pass on a", desk.input_shape, "volume:")
print(f"  f_out     {tuple(bundle.f_out.shape)}")
print(f"  f_shape0  {tuple(bundle.f_shape0.shape)}")
print(f"  f_shape1  {tuple(bundle.f_shape1.shape)}")
print(f"  f_contour {tuple(bundle.f_contour.shape)}")
print(f"  prob sums to {bundle.prob.sum(dim=1).mean():.6f} per voxel")

print("\nparameter budgets:")
for name, cfg in [("desk-scale", desk), ("default", paper_scale)]:
    sep = count_parameters(cfg)
    dense = count_parameters(cfg, separable=False)
    print(f"  {name:11s} separable {sep:>10,}   dense-conv equivalent {dense:>10,} "
          f"({sep / dense:.0%})")

print("\nablations (desk-scale):")
for ablation in Ablation:
    cfg = NetworkConfig(**{**desk.__dict__, "ablation": ablation})
    print(f"  {ablation.name:14s} {count_parameters(cfg):>9,} parameters")
