"""Reversible downsampling: the Haar cascade and the affine coupling block.

Both transforms move information between resolutions without losing any of
it, which is what lets the codec discretize shallow features at 1/8 spatial
resolution and still reconstruct them exactly when quantization is bypassed.
"""

import numpy as np

from vqnerv import CouplingBlock, Tensor, haar_cascade, haar_cascade_inverse, haar_forward

rng = np.random.default_rng(0)

# One Haar level on a single 2x2 patch: (a,b,c,d) -> (LL, LH, HL, HH)
patch = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32))
print("patch [[1,2],[3,4]] ->", haar_forward(patch).data.ravel())

# Three cascaded levels multiply channels by 64 and shrink each side by 8
x = Tensor(rng.normal(size=(3, 32, 64)).astype(np.float32))
y = haar_cascade(x, 3)
print(f"cascade: {x.shape} -> {y.shape}")
print(f"energy preserved: |x| = {np.linalg.norm(x.data):.4f}, |y| = {np.linalg.norm(y.data):.4f}")

back = haar_cascade_inverse(y, 3)
print(f"round trip max error: {np.abs(back.data - x.data).max():.2e}")

# The coupling block mixes two channel groups and inverts in closed form
block = CouplingBlock(8, 8, hidden=4, rng=rng)
for p in block.parameters().values():
    p.data += rng.normal(scale=0.1, size=p.data.shape).astype(np.float32)

a = Tensor(rng.normal(size=(8, 4, 4)).astype(np.float32))
b = Tensor(rng.normal(size=(8, 4, 4)).astype(np.float32))
v1, v2 = block.forward(a, b)
f_back, x_back = block.inverse(v1, v2)
print(f"coupling round trip max error: "
      f"{max(np.abs(x_back.data - a.data).max(), np.abs(f_back.data - b.data).max()):.2e}")

# Fresh blocks start as the identity (zero-initialized subnets)
fresh = CouplingBlock(8, 8, hidden=4, rng=rng)
v1, v2 = fresh.forward(a, b)
print("identity at init:", np.array_equal(v1.data, a.data) and np.array_equal(v2.data, b.data))
