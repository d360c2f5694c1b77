"""vqnerv: a vector-quantized hybrid neural video codec.

The package trains a small encoder/decoder pair to overfit one video,
discretizes shallow residual features into codebook tokens through a
reversible Haar + coupling branch, and compresses the result into a
measurable bitstream (pruning, 8-bit quantization, entropy coding).
"""

from .autograd import Tensor, conv2d, grad_check, no_grad, pixel_shuffle, pixel_unshuffle
from .codebook import (CodebookState, FeaturePool, QuantizeResult, ShallowCodebookTrainer,
                       TokenGrid, ema_update, pool_kmeans_step, quantize,
                       revive_dead_codes, straight_through, usage, vq_loss)
from .compression import (CompressionReport, QuantizedTensor, decode_video, deflate_decode,
                          deflate_encode, huffman_decode, huffman_encode, pack,
                          prune_global_l1, quantize_8bit, unpack)
from .losses import LossWeights, inpainting_loss, psnr, reconstruction_loss, ssim
from .model import ModelConfig, VideoModel, load_checkpoint, save_checkpoint
from .optim import Adam, cosine_lr
from .pipeline import (RunConfig, VideoDataset, encode_run, eval_inpainting,
                       eval_interpolation, load_frames, make_box_mask,
                       make_disperse_mask, make_synthetic_video, rd_curve, train)
from .transforms import (CouplingBlock, HaarSpec, coupling_forward, coupling_inverse,
                         haar_cascade, haar_cascade_inverse, haar_forward, haar_inverse)

__version__ = "0.1.0"
