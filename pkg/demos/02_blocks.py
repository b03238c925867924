"""The individual building blocks on toy tensors.

Run: python demos/02_blocks.py
"""

# %% Channel shuffle interleaves groups; shuffling with the complementary group count
# undoes it.
import numpy as np

from alsskit import blocks as B
from alsskit.tensor import channel_shuffle

x = np.arange(6.0).reshape(1, 6, 1, 1)
print("shuffle(2):", channel_shuffle(x, 2).ravel(), " back:", channel_shuffle(channel_shuffle(x, 2), 3).ravel())

# %% An ALSS block splits channels by alpha, transforms one part, shuffles, and can
# downsample.  Parameter counts follow from the config.
cfg = B.AlssConfig(in_channels=16, out_channels=32, alpha=0.5, beta=0.5, stride=2)
params = B.init_alss(cfg, rng=0)
y = B.alss_down_forward(np.random.default_rng(1).normal(size=(1, 16, 32, 32)), cfg, params)
print("ALSS stride 2:", y.shape, "params", B.block_param_count(params))

# %% LCA gates every position by a row gate times a column gate, both in (0, 1), so
# it can only shrink magnitudes.
lcfg = B.LcaConfig(8, transform_groups=2)
lp = B.init_lca(lcfg, rng=2)
z = np.random.default_rng(3).normal(size=(1, 8, 6, 6))
out = B.lca_forward(z, lcfg, lp)
print("LCA params", B.block_param_count(lp), "max |out|/|in|", float(np.max(np.abs(out) / np.abs(z))))

# %% Focus rearranges 2x2 neighborhoods into channels before its convolution.
img = np.arange(16.0).reshape(1, 1, 4, 4)
print("focus slice:\n", B.focus_slice(img)[0, :, :, :].reshape(4, -1))
