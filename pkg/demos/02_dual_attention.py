"""What the dual attention block does to a feature map.

The channel gate rescales whole channels, the spatial gate then rescales
every voxel. Both gates live in (0, 1), so the block can only attenuate.

Run: python3 demos/02_dual_attention.py
"""
import torch

from adaatlas.attention import DualAttention, channel_scores, spatial_scores

torch.manual_seed(0)
block = DualAttention(channels=8, reduction=2)
f = torch.randn(1, 8, 6, 6, 6)

a_ch = channel_scores(f, block)
print("channel gates", a_ch.detach().numpy().round(3))

fc = f * a_ch[:, :, None, None, None]
a_sp = spatial_scores(fc, block)
print("spatial gate range %.3f .. %.3f" % (a_sp.min().item(), a_sp.max().item()))

out = block(f)
print("|out| <= |in| everywhere:", bool((out.abs() <= f.abs()).all()))

# These six tensors are what test-time adaptation updates.
for name, p in block.named_parameters():
    print(f"  {name:6s} {tuple(p.shape)}")
print("adaptable parameters per block:", DualAttention.param_count(8, 2))
