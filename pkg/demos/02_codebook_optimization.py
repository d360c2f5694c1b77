"""Index collapse and the shallow codebook optimization that counters it.

A plain EMA codebook started from random vectors lets a few codes capture
all the data (index collapse). The shallow optimization adds a feature
pool, clusters it online with k-means, and re-seeds dead codes from
well-used pool nodes - usage climbs to nearly every code.
"""

import logging

import numpy as np

from vqnerv import CodebookState, ShallowCodebookTrainer, ema_update
from vqnerv.codebook import ShallowCodebookConfig

logging.disable(logging.WARNING)
rng = np.random.default_rng(4)

DIM, CODES, CLUSTERS, STEPS = 8, 64, 8, 500
centers = rng.normal(size=(CLUSTERS, DIM)).astype(np.float32) * 3.0


def sample_batch():
    assign = rng.integers(0, CLUSTERS, size=256)
    return (centers[assign] + rng.normal(scale=0.3, size=(256, DIM))).astype(np.float32)


shallow = ShallowCodebookTrainer(
    ShallowCodebookConfig(size=CODES, dim=DIM, decay=0.99, dead_threshold=1.0),
    np.random.default_rng(5))
plain = CodebookState(CODES, DIM, decay=0.99, rng=np.random.default_rng(5))

for step in range(STEPS):
    batch = sample_batch()
    res = shallow.state.quantize(batch)
    shallow.update(batch, res.tokens)
    res_p = plain.quantize(batch)
    ema_update(plain, batch, res_p.tokens)
    if step in (0, 9, 99, 299, STEPS - 1):
        print(f"step {step + 1:>3}: shallow usage {shallow.state.usage():.3f}   "
              f"plain EMA usage {plain.usage():.3f}")
    if step == STEPS - 51:
        shallow.state.reset_usage()
        plain.reset_usage()

print()
print(f"final (last 50 steps): shallow {shallow.state.usage():.1%} of {CODES} codes, "
      f"plain EMA {plain.usage():.1%}")
print(f"codes revived along the way: {shallow.revived_total}")

# quantization error: distance from each feature to its chosen code
batch = sample_batch()
d_shallow = np.sqrt(shallow.state.quantize(batch).distances.mean())
d_plain = np.sqrt(plain.quantize(batch).distances.mean())
print(f"rms quantization error: shallow {d_shallow:.3f} vs plain {d_plain:.3f}")
