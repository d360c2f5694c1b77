"""Overfit the codec to a tiny synthetic video and watch the metrics climb.

Uses a reduced resolution and epoch count so the whole demo runs in well
under a minute; the acceptance suite runs the full desk-scale protocol.
"""

import logging
import os
import tempfile

from vqnerv import ModelConfig, RunConfig, train

logging.disable(logging.WARNING)

cfg = RunConfig()
cfg.model = ModelConfig(height=32, width=64, strides=(4, 2, 2), embed_channels=12,
                        block_channels=8, decoder_budget=120_000,
                        subnet_hidden=3, codebook_size=32, codebook_dim=8)
cfg.epochs = 60
cfg.eval_every = 10
cfg.synthetic_frames = 4
cfg.output_dir = os.path.join(tempfile.mkdtemp(prefix="vqnerv_demo_"), "run")

result = train(cfg)
print(f"\nrun directory: {result.run_dir}")
print(f"decoder parameters: {result.model.decoder_param_count()} "
      f"(budget {cfg.model.decoder_budget})")
print(f"final psnr {result.final_psnr:.2f} dB, ssim {result.final_ssim:.4f}")
print("\nper-epoch log (eval rows carry psnr/ssim/usage):")
with open(os.path.join(result.run_dir, "train_log.csv")) as fh:
    lines = fh.read().splitlines()
print("\n".join(lines[:1] + [ln for ln in lines[1:] if ln.split(",")[2]]))
