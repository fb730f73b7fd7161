# Token-level (local) similarity versus pooled (global) similarity.
#
# Run: python3 demos/03_local_vs_global.py

import numpy as np

from fsclab.objective import (
    attention_weights,
    global_similarity,
    local_similarity,
    textual_aligned_patches,
)
from fsclab.tensor import Tensor


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# Attention over patches for one token, three ways.
s = Tensor(np.array([[0.1, 0.9, 0.5, 0.2]]))
for mode in ("minmax", "minmax_sparse", "softmax"):
    print(f"{mode:14s}", np.round(attention_weights(s, mode).data, 3))

# Four patches and three tokens in 8 dimensions.
rng = np.random.default_rng(3)
V = unit(rng.normal(size=(4, 8)))
T = unit(rng.normal(size=(3, 8)))
mask = np.array([True, True, True])

# Every token gets its own weighted mix of patches.
vhat = textual_aligned_patches(Tensor(V), Tensor(T), mask).data
print("aligned patches:", vhat.shape)

inv_tau = 1 / 0.07
v = unit(V.mean(0))
t = T[-1]
s_l = local_similarity(Tensor(V), Tensor(T), mask, inv_tau).item()
s_g = global_similarity(Tensor(v), Tensor(t), inv_tau).item()
print(f"S_l = {s_l:.3f}   S_g = {s_g:.3f}")

# Padding tokens do not count.
print("two real tokens:", local_similarity(Tensor(V), Tensor(T), np.array([True, True, False]), inv_tau).item())

# With one patch and one token there is nothing to align and both agree.
V1, T1 = V[:1], T[:1]
print(
    local_similarity(Tensor(V1), Tensor(T1), np.ones(1, bool), inv_tau, "softmax").item(),
    global_similarity(Tensor(V1[0]), Tensor(T1[0]), inv_tau).item(),
)
