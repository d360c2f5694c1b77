"""Dataset IO, mask generation, training orchestration and evaluation protocols.

A run directory always receives: the resolved config echo, a per-epoch
training log, a per-frame metrics CSV, and the best checkpoint; encode
runs additionally get the bitstream and its report. Reruns with the same
seed reproduce the CSVs byte-for-byte.
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import compression
from .autograd import Tensor, no_grad
from .errors import ConfigError, DataError, NumericError, ParameterError
from .losses import inpainting_loss, psnr, reconstruction_loss, ssim
from .model import ModelConfig, VideoModel, load_checkpoint, save_checkpoint
from .optim import Adam, cosine_lr

log = logging.getLogger(__name__)


# -- datasets -----------------------------------------------------------------


@dataclass
class VideoDataset:
    frames: np.ndarray              # [T, 3, H, W] float32 in [0, 1]
    indices: list[int]
    split: str = "all"              # all | even | odd

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]

    def subset(self, split: str) -> "VideoDataset":
        if split == "all":
            return self
        if split not in ("even", "odd"):
            raise ConfigError(f"unknown split '{split}'")
        start = 0 if split == "even" else 1
        return VideoDataset(self.frames[start::2].copy(),
                            self.indices[start::2], split)


def center_crop(frame: np.ndarray, crop_h: int, crop_w: int) -> np.ndarray:
    _, h, w = frame.shape
    if crop_h > h or crop_w > w:
        raise DataError(f"crop {crop_h}x{crop_w} larger than frame {h}x{w}")
    top = (h - crop_h) // 2
    left = (w - crop_w) // 2
    return frame[:, top:top + crop_h, left:left + crop_w]


_INDEX_RE = re.compile(r"(\d+)")


def load_frames(directory: str, crop: tuple[int, int] | None = None,
                raw_resolution: tuple[int, int] | None = None) -> VideoDataset:
    """Load numbered PNG (or raw planar RGB) frames, normalized to [0, 1].

    Frame order follows the numeric index embedded in each filename; a gap
    in the index sequence is an error naming the missing index.
    """
    if not os.path.isdir(directory):
        raise DataError(f"frame directory not found: {directory}")
    entries = []
    for name in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in (".png", ".raw", ".rgb"):
            continue
        m = _INDEX_RE.findall(stem)
        if not m:
            raise DataError(f"no numeric index in filename: {name}")
        entries.append((int(m[-1]), name, ext.lower()))
    if not entries:
        raise DataError(f"no frame files in {directory}")
    entries.sort()
    indices = [e[0] for e in entries]
    for a, b in zip(indices, indices[1:]):
        if b != a + 1:
            raise DataError(f"missing frame index {a + 1} in sequence")

    frames = []
    shape = None
    for _, name, ext in entries:
        path = os.path.join(directory, name)
        if ext == ".png":
            from PIL import Image
            img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
            frame = img.transpose(2, 0, 1)
        else:
            if raw_resolution is None:
                raise DataError("raw planar frames need an explicit resolution")
            h, w = raw_resolution
            data = np.fromfile(path, dtype=np.uint8)
            if data.size != 3 * h * w:
                raise DataError(f"raw frame {name} has {data.size} bytes, expected {3 * h * w}")
            frame = data.reshape(3, h, w).astype(np.float32) / 255.0
        if crop is not None:
            frame = center_crop(frame, *crop)
        if shape is None:
            shape = frame.shape
        elif frame.shape != shape:
            raise DataError(f"frame {name} has dims {frame.shape[1:]}, expected {shape[1:]}")
        frames.append(frame)
    return VideoDataset(np.stack(frames).astype(np.float32), indices)


def make_synthetic_video(n_frames: int = 8, height: int = 64, width: int = 128,
                         seed: int = 0) -> np.ndarray:
    """Deterministic desk-scale test content: drifting gradients, moving blobs
    and a mildly textured patch. Returns [T, 3, H, W] float32 in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    phases = rng.uniform(0, 2 * np.pi, size=3)
    blob_c = rng.uniform(0.25, 0.75, size=(2, 2))
    blob_v = rng.uniform(-0.05, 0.05, size=(2, 2))
    video = np.empty((n_frames, 3, height, width), dtype=np.float32)
    for t in range(n_frames):
        s = t / max(n_frames - 1, 1)
        base = np.stack([
            0.5 + 0.25 * np.sin(2 * np.pi * (xx + 0.15 * s) + phases[0]),
            0.5 + 0.25 * np.sin(2 * np.pi * (yy + 0.10 * s) + phases[1]),
            0.5 + 0.25 * np.sin(2 * np.pi * (xx + yy - 0.12 * s) + phases[2]),
        ])
        for b in range(2):
            cy, cx = blob_c[b] + blob_v[b] * t
            blob = np.exp(-(((yy - cy) * 4) ** 2 + ((xx - cx) * 4) ** 2))
            base[b % 3] += 0.35 * blob
        tex = 0.06 * np.sin(24 * np.pi * (xx + 0.05 * s)) * np.sin(16 * np.pi * yy)
        base += tex
        video[t] = np.clip(base, 0.0, 1.0)
    return video


# -- masks ---------------------------------------------------------------------


def make_box_mask(height: int, width: int, boxes: int = 5, box_width: int = 50,
                  seed: int = 0) -> np.ndarray:
    """Square distortion boxes (marked 1), placed uniformly; boxes may overlap."""
    if box_width > min(height, width):
        raise ParameterError(f"box width {box_width} exceeds frame {height}x{width}")
    mask = np.zeros((height, width), dtype=np.float32)
    rng = np.random.default_rng(seed)
    for _ in range(boxes):
        top = int(rng.integers(0, height - box_width + 1))
        left = int(rng.integers(0, width - box_width + 1))
        mask[top:top + box_width, left:left + box_width] = 1.0
    return mask


def make_disperse_mask(height: int, width: int, fraction: float = 0.1,
                       seed: int = 0) -> np.ndarray:
    """Seeded random pixel dropout mask (1 = distorted)."""
    rng = np.random.default_rng(seed)
    return (rng.random((height, width)) < fraction).astype(np.float32)


# -- run configuration ------------------------------------------------------------


@dataclass
class RunConfig:
    """Everything one run needs; serializes to flat key/value text."""

    model: ModelConfig = field(default_factory=ModelConfig)
    alpha: float = 0.7
    lr: float = 1e-3
    epochs: int = 300
    eval_every: int = 25
    seed: int = 0
    task: str = "regress"            # regress | inpaint | interpolate
    split: str = "all"
    data_dir: str = ""
    crop_height: int = 0             # 0 = no crop
    crop_width: int = 0
    synthetic_frames: int = 8
    prune_ratio: float = 0.1
    finetune_epochs: int = 0         # 0 = 10% of epochs
    mask_type: str = "box"
    mask_boxes: int = 5
    mask_width: int = 0              # 0 = scaled from the 50px/1920w convention
    output_dir: str = "run"

    def validate(self) -> None:
        self.model.validate()
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha {self.alpha} outside [0, 1]")
        if self.model.vq_beta < 0:
            raise ConfigError("vq_beta must be >= 0")
        if self.epochs < 1 or self.eval_every < 1:
            raise ConfigError("epochs and eval_every must be >= 1")
        if self.task not in ("regress", "inpaint", "interpolate"):
            raise ConfigError(f"unknown task '{self.task}'")
        if self.split not in ("all", "even", "odd"):
            raise ConfigError(f"unknown split '{self.split}'")
        if not 0.0 <= self.prune_ratio < 1.0:
            raise ConfigError("prune_ratio outside [0, 1)")
        if self.mask_type not in ("box", "disperse"):
            raise ConfigError(f"unknown mask_type '{self.mask_type}'")

    @property
    def effective_mask_width(self) -> int:
        if self.mask_width > 0:
            return self.mask_width
        return max(4, round(50 * self.model.width / 1920))

    @property
    def effective_finetune_epochs(self) -> int:
        return self.finetune_epochs if self.finetune_epochs > 0 else max(1, self.epochs // 10)

    # flat text round trip ---------------------------------------------------

    _MODEL_KEYS = ("height", "width", "strides", "embed_channels", "block_channels",
                   "decoder_channels", "decoder_budget", "reduction", "subnet_hidden",
                   "haar_levels", "codebook_size", "codebook_dim", "ema_decay",
                   "dead_threshold", "vq_beta", "use_vq_block", "scale_clamp")

    def to_text(self) -> str:
        lines = []
        for key in self._MODEL_KEYS:
            lines.append(f"{key} = {_fmt(getattr(self.model, key))}")
        for f in dc_fields(self):
            if f.name == "model":
                continue
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "RunConfig":
        cfg = RunConfig()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg.set_option(key, value)
        return cfg

    def set_option(self, key: str, value: str) -> None:
        if key in self._MODEL_KEYS:
            target, name = self.model, key
        elif key in {f.name for f in dc_fields(self)} - {"model"}:
            target, name = self, key
        else:
            raise ConfigError(f"unknown config key '{key}'")
        current = getattr(target, name)
        try:
            setattr(target, name, _parse_like(current, value, name))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_like(current, value: str, name: str):
    if value.lower() == "none":
        return None
    if isinstance(current, bool):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError("expected a boolean")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple) or name in ("strides", "decoder_channels"):
        return tuple(int(x) for x in value.split(",") if x.strip())
    if current is None and name in ("decoder_budget",):
        return int(value)
    if current is None and name in ("decoder_channels",):
        return tuple(int(x) for x in value.split(","))
    return value


# -- training -----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: VideoModel
    run_dir: str
    checkpoint_path: str
    best_psnr: float
    final_psnr: float
    final_ssim: float
    final_loss: float


def _load_dataset(cfg: RunConfig) -> VideoDataset:
    if cfg.data_dir:
        crop = (cfg.crop_height, cfg.crop_width) if cfg.crop_height and cfg.crop_width else None
        ds = load_frames(cfg.data_dir, crop)
        h, w = ds.resolution
        if (h, w) != (cfg.model.height, cfg.model.width):
            raise DataError(f"dataset is {h}x{w} but the model expects "
                            f"{cfg.model.height}x{cfg.model.width}")
        return ds
    frames = make_synthetic_video(cfg.synthetic_frames, cfg.model.height,
                                  cfg.model.width, cfg.seed)
    return VideoDataset(frames, list(range(len(frames))))


def _eval_metrics(model: VideoModel, inputs: np.ndarray, targets: np.ndarray
                  ) -> tuple[float, float, list[tuple[float, float]]]:
    results = model.forward_video(inputs)
    rows = []
    with no_grad():
        for r, target in zip(results, targets):
            rows.append((psnr(r.recon.data, target), float(ssim(r.recon, Tensor(target)).data)))
    mean_psnr = float(np.mean([r[0] for r in rows]))
    mean_ssim = float(np.mean([r[1] for r in rows]))
    return mean_psnr, mean_ssim, rows


def _context_feature(model: VideoModel, frame: np.ndarray) -> Tensor:
    with no_grad():
        emb, _ = model.encode_frame(frame)
        f_d, _ = model.decode_trunk(emb)
    return Tensor(f_d.data)


def train_loop(model: VideoModel, cfg: RunConfig, inputs: np.ndarray,
               targets: np.ndarray, mask: np.ndarray | None,
               epochs: int, base_lr: float,
               keep_masks: dict[str, np.ndarray] | None = None,
               log_rows: list[str] | None = None,
               eval_cb=None) -> float:
    """Epoch x frame training loop (batch size 1, fixed frame order).

    Returns the final epoch's mean loss. ``keep_masks`` pins pruned decoder
    weights at zero after every optimizer step (post-prune fine-tuning).
    """
    params = model.trainable_parameters()
    opt = Adam(params, lr=base_lr)
    n = len(inputs)
    total_steps = max(epochs * n, 1)
    step = 0
    mean_loss = 0.0
    decoder_params = model.decoder_parameters() if keep_masks else {}
    for epoch in range(epochs):
        epoch_loss = 0.0
        for t in range(n):
            ctx = None if t == 0 else _context_feature(model, inputs[t - 1])
            result = model.forward_frame(inputs[t], ctx)
            if mask is not None:
                loss = inpainting_loss(result.recon, Tensor(targets[t]), mask, cfg.alpha)
            else:
                loss = reconstruction_loss(result.recon, Tensor(targets[t]), cfg.alpha)
            loss = loss + result.vq_loss
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch} frame {t}")
            for p in params.values():
                p.grad = None
            loss.backward()
            opt.step(lr=cosine_lr(step, total_steps, base_lr))
            if model.codebook_trainer is not None and result.pre_quant is not None:
                model.codebook_trainer.update(result.pre_quant, result.tokens)
            if keep_masks:
                for name, m in keep_masks.items():
                    decoder_params[name].data *= m
            epoch_loss += value
            step += 1
        mean_loss = epoch_loss / n
        if eval_cb is not None:
            eval_cb(epoch, mean_loss)
        elif log_rows is not None:
            log_rows.append(f"{epoch},{mean_loss:.6f},,,,{cosine_lr(step, total_steps, base_lr):.8f}")
    return mean_loss


def train(cfg: RunConfig) -> TrainResult:
    """Full training run: loop, per-epoch log, periodic eval, best checkpoint."""
    cfg.validate()
    run_dir = cfg.output_dir
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())

    dataset = _load_dataset(cfg).subset(cfg.split)
    targets = dataset.frames
    mask = None
    inputs = targets
    if cfg.task == "inpaint":
        if cfg.mask_type == "box":
            mask = make_box_mask(cfg.model.height, cfg.model.width, cfg.mask_boxes,
                                 cfg.effective_mask_width, cfg.seed)
        else:
            mask = make_disperse_mask(cfg.model.height, cfg.model.width, seed=cfg.seed)
        inputs = targets * (1.0 - mask)[None, None, :, :]

    model_cfg = cfg.model
    model_cfg.seed = cfg.seed
    model = VideoModel(model_cfg)
    ckpt_path = os.path.join(run_dir, "checkpoint.vqnc")
    rows: list[str] = []
    best = {"psnr": -1.0, "epoch": -1}

    def eval_cb(epoch: int, mean_loss: float) -> None:
        lr_now = cosine_lr(min((epoch + 1) * len(inputs), cfg.epochs * len(inputs)),
                           cfg.epochs * len(inputs), cfg.lr)
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            p, s, _ = _eval_metrics(model, inputs, targets)
            usage = (model.codebook_trainer.state.usage()
                     if model.codebook_trainer is not None else 0.0)
            rows.append(f"{epoch},{mean_loss:.6f},{p:.4f},{s:.6f},{usage:.4f},{lr_now:.8f}")
            if p > best["psnr"]:
                best.update(psnr=p, epoch=epoch)
                save_checkpoint(ckpt_path, model)
        else:
            rows.append(f"{epoch},{mean_loss:.6f},,,,{lr_now:.8f}")

    try:
        final_loss = train_loop(model, cfg, inputs, targets, mask,
                                cfg.epochs, cfg.lr, eval_cb=eval_cb)
    except NumericError:
        if best["epoch"] < 0:
            save_checkpoint(ckpt_path, model)
        _write_lines(os.path.join(run_dir, "train_log.csv"),
                     ["epoch,loss,psnr,ssim,usage,lr"] + rows)
        raise

    _write_lines(os.path.join(run_dir, "train_log.csv"),
                 ["epoch,loss,psnr,ssim,usage,lr"] + rows)
    if best["epoch"] >= 0:
        model = load_checkpoint(ckpt_path)
    else:
        save_checkpoint(ckpt_path, model)
    p, s, per_frame = _eval_metrics(model, inputs, targets)
    _write_lines(os.path.join(run_dir, "metrics.csv"),
                 ["frame_index,psnr_db,ssim"] +
                 [f"{i},{pv:.4f},{sv:.6f}" for i, (pv, sv) in enumerate(per_frame)])
    return TrainResult(model, run_dir, ckpt_path, max(best["psnr"], p), p, s, final_loss)


def _write_lines(path: str, lines: list[str]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# -- compression run ------------------------------------------------------------------


def encode_run(cfg: RunConfig, model: VideoModel | None = None
               ) -> tuple[str, compression.CompressionReport]:
    """Prune, fine-tune, quantize and pack a (possibly freshly trained) model."""
    cfg.validate()
    run_dir = cfg.output_dir
    os.makedirs(run_dir, exist_ok=True)
    dataset = _load_dataset(cfg).subset(cfg.split)
    frames = dataset.frames
    if model is None:
        result = train(cfg)
        model = result.model

    if cfg.prune_ratio > 0:
        weights = {k: p.data.copy() for k, p in model.decoder_parameters().items()}
        kernels = {k: w for k, w in weights.items() if w.ndim >= 2}
        _, masks = compression.prune_global_l1(kernels, cfg.prune_ratio)
        decoder_params = model.decoder_parameters()
        for name, m in masks.items():
            decoder_params[name].data *= m
        train_loop(model, cfg, frames, frames, None,
                   cfg.effective_finetune_epochs, cfg.lr * 0.1, keep_masks=masks)

    artifacts, _ = compression.build_artifacts(model, frames, cfg.prune_ratio)
    blob = compression.pack(artifacts)
    bit_path = os.path.join(run_dir, "video.vqnv")
    with open(bit_path, "wb") as fh:
        fh.write(blob)
    decoded, report = compression.decode_video(blob, reference=frames)
    with open(os.path.join(run_dir, "report.txt"), "w") as fh:
        fh.write(report.to_text() + "\n")
    with open(os.path.join(run_dir, "report.csv"), "w") as fh:
        fh.write(report.to_csv())
    return bit_path, report


# -- evaluation protocols ----------------------------------------------------------------


def eval_regression(model: VideoModel, frames: np.ndarray, out_csv: str | None = None
                    ) -> list[tuple[float, float]]:
    _, _, rows = _eval_metrics(model, frames, frames)
    if out_csv:
        _write_lines(out_csv, ["frame_index,psnr_db,ssim"] +
                     [f"{i},{p:.4f},{s:.6f}" for i, (p, s) in enumerate(rows)])
    return rows


def eval_interpolation(model: VideoModel, frames: np.ndarray,
                       out_csv: str | None = None) -> list[tuple[int, float]]:
    """Score odd frames of a model trained on the even frames.

    Odd-frame embeddings are the average of the neighboring even-frame
    embeddings; tokens come from the nearest trained (earlier) even frame.
    """
    n = len(frames)
    even_idx = list(range(0, n, 2))
    if len(even_idx) < 2:
        raise DataError("interpolation needs at least 2 even frames")
    with no_grad():
        embeds = {}
        tokens = {}
        results = model.forward_video(frames[0::2])
        for pos, t in enumerate(even_idx):
            embeds[t] = results[pos].embedding
            tokens[t] = results[pos].tokens
        rows = []
        for t in range(1, n, 2):
            left = t - 1
            right = t + 1 if t + 1 < n else None
            emb = embeds[left] if right is None else 0.5 * (embeds[left] + embeds[right])
            f_d, trunk_out = model.decode_trunk(Tensor(emb))
            if model.vq is not None:
                fused = model.vq.decode(tokens[left], model.codebook_trainer.state)
                recon = model.reconstruct_frame(trunk_out, fused)
            else:
                recon = model.reconstruct_frame(trunk_out, None)
            rows.append((t, psnr(recon.data, frames[t])))
    if out_csv:
        _write_lines(out_csv, ["frame_index,psnr_db"] +
                     [f"{t},{p:.4f}" for t, p in rows])
    return rows


def eval_inpainting(model: VideoModel, frames: np.ndarray, mask: np.ndarray,
                    out_csv: str | None = None) -> dict[str, float]:
    """Full-frame PSNR of the model on masked inputs, against the 'Input' baseline."""
    if mask.shape != frames.shape[2:]:
        raise DataError(f"mask {mask.shape} does not match frames {frames.shape[2:]}")
    masked = frames * (1.0 - mask)[None, None, :, :]
    results = model.forward_video(masked)
    lines = ["kind,frame_index,psnr_db"]
    model_vals, input_vals = [], []
    for t, r in enumerate(results):
        pm = psnr(r.recon.data, frames[t])
        pi = psnr(masked[t], frames[t])
        model_vals.append(pm)
        input_vals.append(pi)
        lines.append(f"model,{t},{pm:.4f}")
        lines.append(f"input,{t},{pi:.4f}")
    summary = {"model": float(np.mean(model_vals)), "input": float(np.mean(input_vals))}
    lines.append(f"model,mean,{summary['model']:.4f}")
    lines.append(f"input,mean,{summary['input']:.4f}")
    if out_csv:
        _write_lines(out_csv, lines)
    return summary


def rd_curve(cfg: RunConfig, budgets: list[int], out_csv: str | None = None
             ) -> list[dict]:
    """Train + compress at each decoder budget; emit (bpp, PSNR) rows."""
    if len(budgets) < 2:
        raise ParameterError("rd_curve needs at least 2 budgets")
    rows = []
    base_dir = cfg.output_dir
    for budget in budgets:
        sub = RunConfig.from_text(cfg.to_text())
        sub.model.decoder_budget = budget
        sub.model.decoder_channels = None
        sub.output_dir = os.path.join(base_dir, f"budget_{budget}")
        _, report = encode_run(sub)
        dataset = _load_dataset(sub).subset(sub.split)
        with open(os.path.join(sub.output_dir, "video.vqnv"), "rb") as fh:
            decoded, _ = compression.decode_video(fh.read())
        s = float(np.mean([float(ssim(Tensor(d), Tensor(f)).data)
                           for d, f in zip(decoded, dataset.frames)]))
        rows.append({"budget": budget, "total_bytes": report.total_bytes,
                     "bpp": report.bpp, "psnr": report.psnr_db, "ssim": s})
    if out_csv:
        _write_lines(out_csv, ["budget,total_bytes,bpp,psnr,ssim"] +
                     [f"{r['budget']},{r['total_bytes']},{r['bpp']:.6f},"
                      f"{r['psnr']:.4f},{r['ssim']:.6f}" for r in rows])
    return rows
