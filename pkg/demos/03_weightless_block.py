"""A weightless block up close: thermometer bits, LUT lookups, conditional sums."""

import numpy as np

import quweit.autodiff as ad
from quweit.autodiff import Tensor
from quweit.weightless import WeightlessBlock, WeightlessBlockConfig

rng = np.random.default_rng(0)
cfg = WeightlessBlockConfig(num_features=4, layer_widths=(16, 4), output_dim=4, bits_per_feature=4, fan_in=3)
blk = WeightlessBlock(cfg)
blk.fit_encoder(rng.normal(size=(256, 4)))
print("thresholds of feature 0:", np.round(blk.encoder.thresholds[0], 3))

x = rng.normal(size=(3, 4)).astype(np.float32)
print("\ninput rows:\n", np.round(x, 3))
print("final LUT bits:\n", blk.output_bits(x).astype(int))

# Training forward with finite-difference gradients.
y = blk.forward(Tensor(x))
ad.backward((y * y).sum())
print("\nforward:\n", np.round(y.data, 4))
g = blk.layers[0].theta.grad
print(f"first-layer LUT entries with a gradient: {np.count_nonzero(g)} of {g.size} (only addressed entries)")

# Inference needs only comparisons, table reads and adds.
print("lookup-only inference matches:", np.array_equal(blk.infer(x), y.data))

blk.summation.e.data = rng.normal(0, 0.5, (4, 1)).astype(np.float32)
blk.quantize()
print(f"\nint8 scale {blk.summation.scale:.5f}, levels {blk.summation.levels.ravel().tolist()}")
print("integer sums:", blk.infer_int(x).tolist())
print("LUT 0 INIT:", blk.layers[0].init_hex()[0])
