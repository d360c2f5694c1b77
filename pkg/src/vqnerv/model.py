"""The hybrid video representation network.

A convolutional encoder turns each frame into a tiny content-adaptive
embedding; an upsampling decoder regenerates the frame from it. A
vector-quantized side branch discretizes the residual between shallow
encoder features and the decoder's penultimate features (for the current
and the previous frame), so that at decode time, when the encoder is no
longer around, a handful of codebook tokens can stand in for skip
connections.

The side branch is fully reversible up to quantization: the channel-
concatenated residuals go through a 3-level Haar cascade, an affine
coupling block mixes the two channel halves, one half is projected to the
codebook dimension and quantized, and the inverse path (coupling inverse
followed by per-half Haar inverses) brings the features back to full
resolution, where a small gate fuses them into the final decoder stage.
The non-quantized coupling half is treated as content-agnostic and
replaced by zeros on reconstruction, in training and decoding alike, so
the decoded video is a pure function of embeddings, tokens and decoder
weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .codebook import (ShallowCodebookConfig, ShallowCodebookTrainer, TokenGrid,
                       straight_through, vq_loss)
from .container import read_container, write_container
from .errors import ConfigError, DimensionError, IntegrityError
from .nn import ChannelNorm, Conv2d, Module
from .transforms import CouplingBlock, haar_cascade, haar_cascade_inverse

CHECKPOINT_MAGIC = b"VQNC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture and codebook knobs; resolution-dependent fields validate early."""

    height: int = 64
    width: int = 128
    strides: tuple[int, ...] = (4, 2, 2, 2)
    embed_channels: int = 16
    block_channels: int = 12         # channels of the shallow encoder/decoder tap
    decoder_channels: tuple[int, ...] | None = None  # explicit trunk plan (overrides budget)
    decoder_budget: int | None = 300_000
    reduction: float = 2.0
    subnet_hidden: int = 4
    haar_levels: int = 3
    codebook_size: int = 64
    codebook_dim: int = 8
    ema_decay: float = 0.99
    dead_threshold: float = 1.0
    vq_beta: float = 0.25
    use_vq_block: bool = True
    scale_clamp: float = 5.0
    seed: int = 0

    def validate(self) -> None:
        if len(self.strides) < 2 or any(s < 1 for s in self.strides):
            raise ConfigError(f"bad stride plan {self.strides}")
        prod = int(np.prod(self.strides))
        if self.height % prod or self.width % prod:
            raise ConfigError(
                f"resolution {self.height}x{self.width} not divisible by stride product {prod}")
        down = 2 ** self.haar_levels
        h0, w0 = self.tap_hw
        if h0 % down or w0 % down:
            raise ConfigError(
                f"shallow feature dims {h0}x{w0} not divisible by 2^{self.haar_levels}")
        if self.codebook_size < 1 or self.codebook_dim < 1:
            raise ConfigError("codebook size and dim must be positive")
        if self.embed_channels < 1 or self.block_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.decoder_channels is None and self.decoder_budget is None:
            raise ConfigError("need decoder_channels or decoder_budget")

    @property
    def tap_hw(self) -> tuple[int, int]:
        """Spatial dims of the shallow tap (first encoder / penultimate decoder stage)."""
        return self.height // self.strides[0], self.width // self.strides[0]

    @property
    def embed_hw(self) -> tuple[int, int]:
        prod = int(np.prod(self.strides))
        return self.height // prod, self.width // prod

    @property
    def token_hw(self) -> tuple[int, int]:
        down = 2 ** self.haar_levels
        h0, w0 = self.tap_hw
        return h0 // down, w0 // down

    def to_dict(self) -> dict:
        return {
            "height": self.height, "width": self.width, "strides": list(self.strides),
            "embed_channels": self.embed_channels, "block_channels": self.block_channels,
            "decoder_channels": list(self.decoder_channels) if self.decoder_channels else None,
            "decoder_budget": self.decoder_budget, "reduction": self.reduction,
            "subnet_hidden": self.subnet_hidden, "haar_levels": self.haar_levels,
            "codebook_size": self.codebook_size, "codebook_dim": self.codebook_dim,
            "ema_decay": self.ema_decay, "dead_threshold": self.dead_threshold,
            "vq_beta": self.vq_beta, "use_vq_block": self.use_vq_block,
            "scale_clamp": self.scale_clamp, "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["strides"] = tuple(d["strides"])
        if d.get("decoder_channels"):
            d["decoder_channels"] = tuple(d["decoder_channels"])
        return ModelConfig(**d)


# -- parameter budgeting --------------------------------------------------------


def _conv_params(cin: int, cout: int, k: int, bias: bool = True) -> int:
    return cout * cin * k * k + (cout if bias else 0)


def _vq_side_params(cfg: ModelConfig) -> int:
    """Decode-side parameters of the VQ branch (coupling, projections, gate, adapter)."""
    if not cfg.use_vq_block:
        return 0
    half = (2 * cfg.block_channels) * (4 ** cfg.haar_levels) // 2
    h = cfg.subnet_hidden
    subnet = _conv_params(half, h, 3) + _conv_params(h, half, 3)
    proj = _conv_params(half, cfg.codebook_dim, 1) + _conv_params(cfg.codebook_dim, half, 1)
    gate = 4 * _conv_params(cfg.block_channels, cfg.block_channels, 3)
    adapter = _conv_params(cfg.block_channels, cfg.block_channels, 1)
    return 3 * subnet + proj + gate + adapter


def _trunk_params(cfg: ModelConfig, plan: tuple[int, ...]) -> int:
    """Exact parameter count of the decoder trunk plus the final stage."""
    ups = list(reversed(cfg.strides))  # embedding-side first
    chans = [cfg.embed_channels] + list(plan)
    total = 0
    for i, r in enumerate(ups[:-1]):
        total += _conv_params(chans[i], chans[i + 1] * r * r, 3)
        total += 2 * chans[i + 1]  # per-stage channel norm affine
    total += _conv_params(plan[-1], 3 * ups[-1] * ups[-1], 3)  # final RGB stage
    return total


def count_decoder_params(cfg: ModelConfig, plan: tuple[int, ...]) -> int:
    return _trunk_params(cfg, plan) + _vq_side_params(cfg)


def plan_decoder_channels(cfg: ModelConfig) -> tuple[int, ...]:
    """Channel plan for the decoder trunk, from an explicit plan or a budget.

    With a budget, searches the leading width so that the exact decode-side
    parameter count lands within 5% of the target. The last trunk stage is
    pinned to ``block_channels`` so the shallow tap lines up with the
    encoder's first stage.
    """
    n_stages = len(cfg.strides) - 1
    if cfg.decoder_channels is not None:
        plan = tuple(cfg.decoder_channels)
        if len(plan) != n_stages:
            raise ConfigError(f"decoder_channels needs {n_stages} entries, got {len(plan)}")
        if plan[-1] != cfg.block_channels:
            raise ConfigError("last decoder stage must equal block_channels")
        return plan

    def plan_for(width: int) -> tuple[int, ...]:
        chans = [max(4, round(width / cfg.reduction ** i)) for i in range(n_stages - 1)]
        return tuple(chans + [cfg.block_channels])

    budget = cfg.decoder_budget
    best, best_err = None, None
    for width in range(4, 2049):
        plan = plan_for(width)
        err = abs(count_decoder_params(cfg, plan) - budget) / budget
        if best_err is None or err < best_err:
            best, best_err = plan, err
    if best_err > 0.05:
        raise ConfigError(
            f"cannot hit decoder budget {budget} within 5% (closest miss {best_err:.1%})")
    return best


# -- network pieces ---------------------------------------------------------------


class EncoderBlock(Module):
    """Residual conv block: 3x3 conv, channel norm, GELU, 1x1 conv."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.norm = ChannelNorm(channels)
        self.conv2 = Conv2d(channels, channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(ag.gelu(self.norm(self.conv1(x))))


class EncoderStage(Module):
    """Patchify downsample (kernel = stride) followed by a residual block."""

    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator):
        self.down = Conv2d(cin, cout, stride, rng, stride=stride, padding=0)
        self.norm = ChannelNorm(cout)
        self.block = EncoderBlock(cout, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.block(self.norm(self.down(x)))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        widths = [cfg.block_channels]
        for i in range(1, len(cfg.strides)):
            widths.append(min(64, cfg.block_channels * 2 ** (i + 1)))
        self.stages = [EncoderStage(3 if i == 0 else widths[i - 1], widths[i],
                                    s, rng) for i, s in enumerate(cfg.strides)]
        self.head = Conv2d(widths[-1], cfg.embed_channels, 1, rng)

    def __call__(self, frame: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (embedding, shallow feature from the first stage)."""
        x = self.stages[0](frame)
        shallow = x
        for stage in self.stages[1:]:
            x = stage(x)
        return self.head(x), shallow


class DecoderStage(Module):
    """3x3 conv into r^2-expanded channels, pixel shuffle, channel norm, GELU.

    The norm keeps narrow late stages from saturating into a constant
    (mean-frame) predictor during long overfitting runs.
    """

    def __init__(self, cin: int, cout: int, r: int, rng: np.random.Generator):
        self.r = r
        self.conv = Conv2d(cin, cout * r * r, 3, rng)
        self.norm = ChannelNorm(cout)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.gelu(self.norm(ag.pixel_shuffle(self.conv(x), self.r)))


class Decoder(Module):
    """Trunk stages up to the penultimate feature, plus the final RGB stage."""

    def __init__(self, cfg: ModelConfig, plan: tuple[int, ...], rng: np.random.Generator):
        ups = list(reversed(cfg.strides))
        chans = [cfg.embed_channels] + list(plan)
        self.stages = [DecoderStage(chans[i], chans[i + 1], r, rng)
                       for i, r in enumerate(ups[:-1])]
        self.final_r = ups[-1]
        self.final = Conv2d(plan[-1], 3 * self.final_r ** 2, 3, rng)

    def trunk(self, embedding: Tensor) -> Tensor:
        x = embedding
        for stage in self.stages:
            x = stage(x)
        return x

    def head(self, x: Tensor) -> Tensor:
        return ag.sigmoid(ag.pixel_shuffle(self.final(x), self.final_r))


class FusionGate(Module):
    """Gated fusion of the reconstructed residual streams (four 3x3 convs)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.cand_x = Conv2d(channels, channels, 3, rng)
        self.cand_f = Conv2d(channels, channels, 3, rng)
        self.gate_x = Conv2d(channels, channels, 3, rng)
        self.gate_f = Conv2d(channels, channels, 3, rng)

    def __call__(self, xhat: Tensor, fhat: Tensor) -> Tensor:
        candidate = ag.tanh(self.cand_x(xhat) + self.cand_f(fhat))
        gate = ag.sigmoid(self.gate_x(xhat) + self.gate_f(fhat))
        return candidate * gate + (1.0 - gate) * xhat


@dataclass
class BlockResult:
    fused: Tensor | None
    tokens: TokenGrid | None
    vq_loss: Tensor
    pre_quant: np.ndarray | None = None  # codebook-space features, for EMA updates


class VQBlock(Module):
    """Residual discretization branch: Haar cascade, coupling, codebook, gate."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.half = (2 * cfg.block_channels) * (4 ** cfg.haar_levels) // 2
        self.coupling = CouplingBlock(self.half, self.half, cfg.subnet_hidden, rng,
                                      scale_clamp=cfg.scale_clamp)
        self.proj_down = Conv2d(self.half, cfg.codebook_dim, 1, rng)
        self.proj_up = Conv2d(cfg.codebook_dim, self.half, 1, rng)
        self.gate = FusionGate(cfg.block_channels, rng)
        self.adapter = Conv2d(cfg.block_channels, cfg.block_channels, 1, rng)

    def __call__(self, f_e: Tensor, f_d_t: Tensor, f_d_tm1: Tensor,
                 codebook, passthrough: bool = False) -> BlockResult:
        cfg = self.cfg
        if f_e.data.shape != f_d_t.data.shape or f_e.data.shape != f_d_tm1.data.shape:
            raise DimensionError("block features must share shapes")
        # decoder features enter as values only: the trunk trains purely for
        # reconstruction, while the branch (and the encoder through f_e)
        # learns to encode whatever residual remains
        x = ag.concat([f_e - f_d_t.detach(), f_e - f_d_tm1.detach()], axis=0)
        y = haar_cascade(x, cfg.haar_levels)
        ya = y.narrow(0, 0, self.half)
        yb = y.narrow(0, self.half, self.half)
        v1, v2 = self.coupling.forward(ya, yb)

        if passthrough:
            v1_dec, v2_dec = v1, v2
            tokens, loss, pre = None, Tensor(np.float32(0.0)), None
        else:
            coded = self.proj_down(v2)
            q = codebook.quantize(coded)
            tokens = q.tokens
            loss = vq_loss(coded, q.values, cfg.vq_beta)
            pre = coded.data.reshape(cfg.codebook_dim, -1).T.copy()
            v2_dec = straight_through(coded, q.values)
            v2_dec = self.proj_up(v2_dec)
            # the non-quantized half is content-agnostic: zeros at decode time
            v1_dec = Tensor(np.zeros_like(v1.data))

        fhat_c, xhat_c = self.coupling.inverse(v1_dec, v2_dec)
        xhat = haar_cascade_inverse(xhat_c, cfg.haar_levels)
        fhat = haar_cascade_inverse(fhat_c, cfg.haar_levels)
        fused = self.gate(xhat, fhat)
        return BlockResult(fused, tokens, loss, pre)

    def decode(self, tokens: TokenGrid, codebook) -> Tensor:
        """Token-only path used when the encoder is unavailable."""
        values = codebook.lookup(tokens)
        v2_dec = self.proj_up(Tensor(values))
        v1_dec = Tensor(np.zeros((self.half, *tokens.shape), dtype=np.float32))
        fhat_c, xhat_c = self.coupling.inverse(v1_dec, v2_dec)
        xhat = haar_cascade_inverse(xhat_c, self.cfg.haar_levels)
        fhat = haar_cascade_inverse(fhat_c, self.cfg.haar_levels)
        return self.gate(xhat, fhat)


@dataclass
class FrameResult:
    recon: Tensor
    tokens: TokenGrid | None
    vq_loss: Tensor
    embedding: np.ndarray
    pre_quant: np.ndarray | None
    losses: dict | None = None


class VideoModel(Module):
    """Encoder + decoder + VQ side branch, operating on single [3,H,W] frames."""

    def __init__(self, cfg: ModelConfig, build_encoder: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.plan = plan_decoder_channels(cfg)
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng) if build_encoder else None
        self.decoder = Decoder(cfg, self.plan, rng)
        self.vq = VQBlock(cfg, rng) if cfg.use_vq_block else None
        self.codebook_trainer = ShallowCodebookTrainer(
            ShallowCodebookConfig(cfg.codebook_size, cfg.codebook_dim,
                                  cfg.ema_decay, cfg.dead_threshold, cfg.vq_beta),
            np.random.default_rng(cfg.seed + 1)) if cfg.use_vq_block else None

    # -- parameter bookkeeping -------------------------------------------------

    def decoder_parameters(self) -> dict[str, Tensor]:
        """Everything a decoder needs at playback time (trunk + VQ side branch)."""
        out = {f"decoder.{k}": v for k, v in self.decoder.parameters().items()}
        if self.vq is not None:
            out.update({f"vq.{k}": v for k, v in self.vq.parameters().items()})
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = dict(self.decoder_parameters())
        if self.encoder is not None:
            out.update({f"encoder.{k}": v for k, v in self.encoder.parameters().items()})
        return out

    def decoder_param_count(self) -> int:
        return sum(p.data.size for p in self.decoder_parameters().values())

    # -- forward paths -----------------------------------------------------------

    def encode_frame(self, frame: Tensor | np.ndarray) -> tuple[Tensor, Tensor]:
        """Frame -> (embedding, shallow first-stage feature)."""
        frame = frame if isinstance(frame, Tensor) else Tensor(frame)
        if frame.data.shape != (3, self.cfg.height, self.cfg.width):
            raise DimensionError(
                f"frame shape {frame.data.shape} != (3,{self.cfg.height},{self.cfg.width})")
        return self.encoder(frame)

    def decode_trunk(self, embedding: Tensor | np.ndarray) -> tuple[Tensor, Tensor]:
        """Embedding -> (penultimate feature, input to the final stage).

        Both returned values are the same tensor in this architecture; the
        pair keeps the two roles explicit at call sites.
        """
        embedding = embedding if isinstance(embedding, Tensor) else Tensor(embedding)
        f_d = self.decoder.trunk(embedding)
        return f_d, f_d

    def reconstruct_frame(self, trunk_out: Tensor, fused: Tensor | None) -> Tensor:
        """Final stage; with ``fused`` absent this is the plain baseline decoder."""
        if fused is not None:
            trunk_out = trunk_out + self.vq.adapter(fused)
        return self.decoder.head(trunk_out)

    def forward_frame(self, frame, f_d_tm1: Tensor | None = None,
                      passthrough: bool = False) -> FrameResult:
        """Training-path forward for one frame given the previous frame's feature."""
        embedding, f_e = self.encode_frame(frame)
        f_d, trunk_out = self.decode_trunk(embedding)
        if f_d_tm1 is None:
            f_d_tm1 = f_d
        if self.vq is not None:
            block = self.vq(f_e, f_d, f_d_tm1, self.codebook_trainer.state,
                            passthrough=passthrough)
            recon = self.reconstruct_frame(trunk_out, block.fused)
            return FrameResult(recon, block.tokens, block.vq_loss,
                               embedding.data.copy(), block.pre_quant)
        recon = self.reconstruct_frame(trunk_out, None)
        return FrameResult(recon, None, Tensor(np.float32(0.0)), embedding.data.copy(), None)

    def forward_video(self, frames: np.ndarray, alpha: float | None = None
                      ) -> list[FrameResult]:
        """Process frames in order; frame 0 substitutes itself as its predecessor.

        The penultimate decoder feature of each frame is cached and reused
        as the next frame's context, which is exactly what a sequential
        decode would compute. With ``alpha`` given, each result also
        carries its reconstruction/vq/total loss values.
        """
        results = []
        with no_grad():
            f_d_prev = None
            for t in range(len(frames)):
                embedding, f_e = self.encode_frame(frames[t])
                f_d, trunk_out = self.decode_trunk(embedding)
                ctx = f_d if f_d_prev is None else f_d_prev
                if self.vq is not None:
                    block = self.vq(f_e, f_d, ctx, self.codebook_trainer.state)
                    recon = self.reconstruct_frame(trunk_out, block.fused)
                    result = FrameResult(recon, block.tokens, block.vq_loss,
                                         embedding.data.copy(), block.pre_quant)
                else:
                    recon = self.reconstruct_frame(trunk_out, None)
                    result = FrameResult(recon, None, Tensor(np.float32(0.0)),
                                         embedding.data.copy(), None)
                if alpha is not None:
                    from .losses import reconstruction_loss
                    rec = float(reconstruction_loss(recon, Tensor(frames[t]), alpha).data)
                    vq = float(result.vq_loss.data)
                    result.losses = {"reconstruction": rec, "vq": vq, "total": rec + vq}
                results.append(result)
                f_d_prev = f_d
        return results

    def decode_frames(self, embeddings: list[np.ndarray],
                      tokens: list[TokenGrid] | None,
                      codebook=None) -> list[np.ndarray]:
        """Decoder-only inference from embeddings (+ tokens when the VQ branch is on)."""
        codebook = codebook if codebook is not None else (
            self.codebook_trainer.state if self.codebook_trainer else None)
        out = []
        with no_grad():
            f_d_prev = None
            for t, emb in enumerate(embeddings):
                f_d, trunk_out = self.decode_trunk(Tensor(emb))
                if self.vq is not None:
                    fused = self.vq.decode(tokens[t], codebook)
                    recon = self.reconstruct_frame(trunk_out, fused)
                else:
                    recon = self.reconstruct_frame(trunk_out, None)
                out.append(recon.data.copy())
                f_d_prev = f_d
        return out


# -- checkpointing ------------------------------------------------------------------


def save_checkpoint(path: str, model: VideoModel) -> None:
    """Sectioned binary: config echo, named float32 parameters, codebook state."""
    params = model.trainable_parameters()
    manifest = {name: list(p.data.shape) for name, p in params.items()}
    blob = b"".join(np.ascontiguousarray(params[k].data, dtype="<f4").tobytes()
                    for k in manifest)
    sections = [
        (1, json.dumps(model.cfg.to_dict(), sort_keys=True).encode()),
        (2, json.dumps(manifest, sort_keys=False).encode()),
        (3, blob),
    ]
    if model.codebook_trainer is not None:
        tr = model.codebook_trainer
        cb = {
            "codes": tr.state.codes, "counts": tr.state.counts, "sums": tr.state.sums,
            "pool_nodes": tr.pool.nodes, "pool_sizes": tr.pool.node_sizes,
        }
        meta = {k: list(v.shape) for k, v in cb.items()}
        cb_blob = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in cb.values())
        sections.append((4, json.dumps(meta).encode()))
        sections.append((5, cb_blob))
        sections.append((6, json.dumps({"pool_filled": tr.pool.filled,
                                        "code_fill": tr._code_fill}).encode()))
    with open(path, "wb") as fh:
        fh.write(write_container(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, sections))


def load_checkpoint(path: str) -> VideoModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    _, sections = read_container(blob, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    sec = dict(sections)
    cfg = ModelConfig.from_dict(json.loads(sec[1].decode()))
    model = VideoModel(cfg)
    manifest = json.loads(sec[2].decode())
    params = model.trainable_parameters()
    off = 0
    raw = sec[3]
    for name, shape in manifest.items():
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += n * 4
        if name not in params:
            raise IntegrityError(f"checkpoint parameter {name} not in model")
        params[name].data[...] = arr
    if 4 in sec and model.codebook_trainer is not None:
        meta = json.loads(sec[4].decode())
        raw = sec[5]
        off = 0
        arrays = {}
        for key, shape in meta.items():
            n = int(np.prod(shape))
            arrays[key] = np.frombuffer(raw, dtype="<f4", count=n, offset=off) \
                .reshape(shape).astype(np.float32)
            off += n * 4
        tr = model.codebook_trainer
        tr.state.codes = arrays["codes"]
        tr.state.counts = arrays["counts"]
        tr.state.sums = arrays["sums"]
        tr.pool.nodes = arrays["pool_nodes"]
        tr.pool.node_sizes = arrays["pool_sizes"]
        extra = json.loads(sec[6].decode())
        tr.pool.filled = extra["pool_filled"]
        tr._code_fill = extra["code_fill"]
    return model
