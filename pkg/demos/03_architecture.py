"""The classifier presets: parameter counts, shapes and the two building blocks.

Run: python3 demos/03_architecture.py
"""
import numpy as np

from dsscnet.model import PRESETS, build, preset, residual_stack, se_block

for name in PRESETS:
    cfg = preset(name)
    m = build(cfg, seed=0)
    print(f"{name:16s} conv {cfg.conv_filters!s:16s} residual {cfg.rb_widths!s:18s} "
          f"SE {cfg.use_se!s:5s} params {m.param_count():>10,d}")

m = build(preset("C1"), seed=0)
out = m.forward(np.zeros((2, 3, 128, 128), np.float32), keep_features=True)
print("C1 feature map", out.features.shape, "embedding", out.embedding.shape, "probs", out.probs.shape)

# channel attention: with zero weights every channel is scaled by sigmoid(0) = 0.5
x = np.random.default_rng(0).standard_normal((1, 16, 4, 4))
y, s = se_block(x, np.zeros((1, 16)), np.zeros((16, 1)))
print("zero-weight SE scales:", np.unique(s), "output == 0.5 * input:", np.array_equal(y, 0.5 * x))

# a zero-weight residual block passes non-negative vectors through untouched
v = np.abs(np.random.default_rng(1).standard_normal((2, 8)))
zeros = {"rb0.fc1.weight": np.zeros((8, 8)), "rb0.fc1.bias": np.zeros(8),
         "rb0.fc2.weight": np.zeros((8, 8)), "rb0.fc2.bias": np.zeros(8)}
print("zero-weight residual block is identity:", np.allclose(residual_stack(v, zeros, (8,)), v, atol=1e-12))
