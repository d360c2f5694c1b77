"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Training-based criteria share module-scoped fixtures so the whole suite
stays well inside its time budget. All runs are seeded and deterministic.
"""

import logging
import os
import tempfile
import time

import numpy as np
import pytest

from vqnerv import compression
from vqnerv.autograd import Tensor, grad_check
from vqnerv.codebook import (CodebookState, ShallowCodebookConfig, ShallowCodebookTrainer,
                             TokenGrid, ema_update)
from vqnerv.losses import reconstruction_loss
from vqnerv.model import (ModelConfig, VideoModel, load_checkpoint,
                          plan_decoder_channels, save_checkpoint)
from vqnerv.pipeline import (RunConfig, make_box_mask, make_synthetic_video, train_loop,
                             _eval_metrics, eval_inpainting)
from vqnerv.transforms import CouplingBlock, haar_cascade, haar_cascade_inverse

logging.disable(logging.WARNING)

EPOCHS_ABLATION = 300
EPOCHS_OVERFIT = 600


def report(criterion: str, passed: bool, detail: str) -> None:
    print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}", flush=True)
    assert passed, f"{criterion}: {detail}"


# -- shared training fixtures ----------------------------------------------------


@pytest.fixture(scope="module")
def desk_video():
    return make_synthetic_video(8, 64, 128, seed=0)


@pytest.fixture(scope="module")
def full_300(desk_video):
    cfg = RunConfig()
    model = VideoModel(ModelConfig())
    t0 = time.monotonic()
    train_loop(model, cfg, desk_video, desk_video, None, EPOCHS_ABLATION, cfg.lr)
    elapsed = time.monotonic() - t0
    p, _, _ = _eval_metrics(model, desk_video, desk_video)
    return model, p, elapsed


@pytest.fixture(scope="module")
def baseline_300(desk_video):
    cfg = RunConfig()
    base_cfg = ModelConfig()
    base_cfg.decoder_channels = plan_decoder_channels(ModelConfig())
    base_cfg.use_vq_block = False
    model = VideoModel(base_cfg)
    t0 = time.monotonic()
    train_loop(model, cfg, desk_video, desk_video, None, EPOCHS_ABLATION, cfg.lr)
    elapsed = time.monotonic() - t0
    p, _, _ = _eval_metrics(model, desk_video, desk_video)
    return model, p, elapsed


@pytest.fixture(scope="module")
def full_600(desk_video):
    cfg = RunConfig()
    model = VideoModel(ModelConfig())
    t0 = time.monotonic()
    train_loop(model, cfg, desk_video, desk_video, None, EPOCHS_OVERFIT, cfg.lr)
    elapsed = time.monotonic() - t0
    p, _, _ = _eval_metrics(model, desk_video, desk_video)
    return model, p, elapsed


# -- criteria ------------------------------------------------------------------------


def test_criterion_1_reversibility():
    rng = np.random.default_rng(0)
    t0 = time.monotonic()
    worst_haar = 0.0
    for _ in range(1000):
        x = rng.normal(size=(4, 16, 16)).astype(np.float32)
        back = haar_cascade_inverse(haar_cascade(Tensor(x), 3), 3)
        worst_haar = max(worst_haar, float(np.abs(back.data - x).max()))
    block = CouplingBlock(8, 8, 4, rng)
    for t in block.parameters().values():
        t.data += rng.normal(scale=0.1, size=t.data.shape).astype(np.float32)
    worst_coupling = 0.0
    for _ in range(1000):
        a = rng.normal(size=(8, 4, 4)).astype(np.float32)
        b = rng.normal(size=(8, 4, 4)).astype(np.float32)
        v1, v2 = block.forward(Tensor(a), Tensor(b))
        fb, xb = block.inverse(v1, v2)
        worst_coupling = max(worst_coupling,
                             float(np.abs(xb.data - a).max()),
                             float(np.abs(fb.data - b).max()))
    elapsed = time.monotonic() - t0
    ok = worst_haar < 1e-6 and worst_coupling < 1e-5 and elapsed < 10
    report("criterion 1 (reversibility)", ok,
           f"haar {worst_haar:.2e} < 1e-6, coupling {worst_coupling:.2e} < 1e-5, "
           f"{elapsed:.1f}s < 10s")


def test_criterion_2_gradient_correctness():
    cfg = ModelConfig(height=16, width=32, strides=(2, 2, 2), embed_channels=8,
                      block_channels=4, decoder_channels=(12, 4), decoder_budget=None,
                      subnet_hidden=3, codebook_size=16, codebook_dim=4)
    model = VideoModel(cfg)
    rng = np.random.default_rng(1)
    for p in model.trainable_parameters().values():
        p.data += rng.normal(scale=0.02, size=p.data.shape).astype(np.float32)
    frame = make_synthetic_video(1, 16, 32, seed=2)[0]
    params = model.trainable_parameters()

    def loss():
        result = model.forward_frame(frame, passthrough=True)
        return reconstruction_loss(result.recon, Tensor(frame), 0.7)

    t0 = time.monotonic()
    err = grad_check(params, loss, eps=1e-3, samples=40, seed=3)
    elapsed = time.monotonic() - t0
    ok = err < 1e-2 and elapsed < 60
    report("criterion 2 (gradient correctness)", ok,
           f"max rel err {err:.2e} < 1e-2 over 40 coords, {elapsed:.1f}s < 60s")


def test_criterion_3_codebook_usage():
    rng = np.random.default_rng(4)
    dim, n_codes, k = 8, 64, 8
    centers = rng.normal(size=(k, dim)).astype(np.float32) * 3.0

    def batch():
        assign = rng.integers(0, k, size=256)
        return (centers[assign]
                + rng.normal(scale=0.3, size=(256, dim))).astype(np.float32)

    t0 = time.monotonic()
    # the shallow procedure includes its fill-from-data init (step 1);
    # plain EMA is the classic randomly initialized codebook update
    cfg = ShallowCodebookConfig(size=n_codes, dim=dim, decay=0.99, dead_threshold=1.0)
    shallow = ShallowCodebookTrainer(cfg, np.random.default_rng(5), fill_codes=True)
    plain = CodebookState(n_codes, dim, decay=0.99, dead_threshold=1.0,
                          rng=np.random.default_rng(5))
    for step in range(500):
        b = batch()
        res_s = shallow.state.quantize(b)
        shallow.update(b, res_s.tokens)
        res_p = plain.quantize(b)
        ema_update(plain, b, res_p.tokens)
        if step == 449:
            shallow.state.reset_usage()
            plain.reset_usage()
    elapsed = time.monotonic() - t0
    reachable = (n_codes - 1) / n_codes  # the zero code sees no data here
    shallow_usage = shallow.state.usage()
    plain_usage = plain.usage()
    ok = shallow_usage >= 0.99 * reachable and plain_usage < 0.5 and elapsed < 60
    report("criterion 3 (codebook usage)", ok,
           f"shallow {shallow_usage:.3f} >= {0.99 * reachable:.3f}, "
           f"plain EMA {plain_usage:.3f} < 0.5, {elapsed:.1f}s < 60s")


def test_criterion_4_ablation_direction(full_300, baseline_300):
    _, p_full, t_full = full_300
    _, p_base, t_base = baseline_300
    gap = p_full - p_base
    elapsed = t_full + t_base
    ok = gap >= 0.2 and elapsed < 15 * 60
    report("criterion 4 (ablation direction)", ok,
           f"full {p_full:.2f} dB vs baseline {p_base:.2f} dB, gap {gap:+.2f} >= 0.2, "
           f"{elapsed:.0f}s < 900s")


def test_criterion_5_overfit_sanity(full_600):
    model, p, elapsed = full_600
    budget = ModelConfig().decoder_budget
    count = model.decoder_param_count()
    ok = p >= 35.0 and elapsed < 30 * 60 and abs(count - budget) / budget <= 0.05
    report("criterion 5 (overfit sanity)", ok,
           f"{p:.2f} dB >= 35 at {count} params (budget {budget}), "
           f"{elapsed:.0f}s < 1800s")


@pytest.fixture(scope="module")
def packed(full_600, desk_video):
    model, _, _ = full_600
    artifacts, _ = compression.build_artifacts(model, desk_video, prune_ratio=0.1)
    blob = compression.pack(artifacts)
    return artifacts, blob


def test_criterion_6_bitstream_integrity(packed, full_600, desk_video):
    artifacts, blob = packed
    t0 = time.monotonic()
    back, _ = compression.unpack(blob)
    exact = back.config == artifacts.config
    for name, q in artifacts.weights.items():
        exact &= bool(np.array_equal(back.weights[name].payload, q.payload))
        exact &= back.weights[name].minimum == q.minimum
        exact &= back.weights[name].scale == q.scale
    for a, b in zip(artifacts.embeddings, back.embeddings):
        exact &= bool(np.array_equal(a.payload, b.payload))
    for a, b in zip(artifacts.tokens, back.tokens):
        exact &= bool(np.array_equal(a, b))
    exact &= bool(np.array_equal(artifacts.codebook, back.codebook))

    frames_file, _ = compression.decode_video(blob)
    qmodel = compression.quantized_model(artifacts)
    cb = CodebookState(artifacts.codebook.shape[0], artifacts.codebook.shape[1])
    cb.codes = artifacts.codebook.copy()
    in_memory = qmodel.decode_frames([q.dequantize() for q in artifacts.embeddings],
                                     [TokenGrid(t) for t in artifacts.tokens], cb)
    bit_exact = all(np.array_equal(a, b) for a, b in zip(frames_file, in_memory))
    elapsed = time.monotonic() - t0
    ok = exact and bit_exact and elapsed < 60
    report("criterion 6 (bitstream integrity)", ok,
           f"unpack bit-exact: {exact}, file-vs-memory decode bit-exact: {bit_exact}, "
           f"{elapsed:.1f}s < 60s")


def test_criterion_7_quantization_robustness(full_600, desk_video):
    model, p_float, _ = full_600
    # prune disabled so the comparison isolates 8-bit quantization
    artifacts, _ = compression.build_artifacts(model, desk_video, prune_ratio=0.0)
    frames, rep = compression.decode_video(compression.pack(artifacts), desk_video)
    drop = p_float - rep.psnr_db
    ok = drop <= 1.0
    report("criterion 7 (quantization robustness)", ok,
           f"float {p_float:.2f} dB -> 8-bit {rep.psnr_db:.2f} dB, drop {drop:.2f} <= 1.0")


def test_criterion_8_entropy_gain(packed):
    _, blob = packed
    _, rep = compression.unpack(blob)
    compressed = rep.token_bytes + rep.embedding_bytes
    raw = rep.raw_token_bytes + rep.raw_embedding_bytes
    ok = compressed < raw
    report("criterion 8 (entropy gain)", ok,
           f"tokens+embeddings {compressed} bytes < raw {raw} bytes")


def test_criterion_9_size_equation_audit(packed):
    _, blob = packed
    _, rep = compression.unpack(blob)
    ok = (rep.total_bytes == rep.composed_total()
          and rep.total_bytes == len(blob) - rep.header_bytes)
    report("criterion 9 (size equation audit)", ok,
           f"total {rep.total_bytes} == embeddings {rep.embedding_bytes} + tokens "
           f"{rep.token_bytes} + decoder {rep.decoder_bytes} + codebook {rep.codebook_bytes}")


def test_invariant_rd_direction(desk_video):
    # two-run comparison: a larger decoder budget must not score worse
    cfg = RunConfig()
    scores = {}
    for budget in (220_000, 450_000):
        mc = ModelConfig()
        mc.decoder_budget = budget
        model = VideoModel(mc)
        train_loop(model, cfg, desk_video, desk_video, None, 100, cfg.lr)
        scores[budget], _, _ = _eval_metrics(model, desk_video, desk_video)
    ok = scores[450_000] >= scores[220_000]
    report("invariant (rate-distortion direction)", ok,
           f"450k budget {scores[450_000]:.2f} dB >= 220k budget {scores[220_000]:.2f} dB")


def test_invariant_prune_finetune_recovery(full_300, desk_video):
    # not a numbered criterion: 10% pruning + fine-tuning must stay within
    # 0.5 dB of the unpruned desk-scale PSNR
    source, p_before, _ = full_300
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "clone.vqnc")
        save_checkpoint(path, source)
        model = load_checkpoint(path)
    weights = {k: p.data.copy() for k, p in model.decoder_parameters().items()}
    kernels = {k: w for k, w in weights.items() if w.ndim >= 2}
    _, masks = compression.prune_global_l1(kernels, 0.10)
    params = model.decoder_parameters()
    for name, mask in masks.items():
        params[name].data *= mask
    cfg = RunConfig()
    train_loop(model, cfg, desk_video, desk_video, None,
               max(1, EPOCHS_ABLATION // 10), cfg.lr * 0.1, keep_masks=masks)
    p_after, _, _ = _eval_metrics(model, desk_video, desk_video)
    still_pruned = all(np.all(params[n].data[~m] == 0.0) for n, m in masks.items())
    ok = p_before - p_after <= 0.5 and still_pruned
    report("invariant (prune + fine-tune recovery)", ok,
           f"unpruned {p_before:.2f} dB -> pruned+tuned {p_after:.2f} dB "
           f"(drop {p_before - p_after:+.2f} <= 0.5), masks intact: {still_pruned}")


def test_criterion_10_inpainting_direction(desk_video):
    cfg = RunConfig()
    cfg.task = "inpaint"
    mask = make_box_mask(64, 128, boxes=5, box_width=16, seed=0)
    masked = desk_video * (1.0 - mask)[None, None, :, :]
    model = VideoModel(ModelConfig())
    t0 = time.monotonic()
    train_loop(model, cfg, masked, masked, mask, EPOCHS_ABLATION, cfg.lr)
    elapsed = time.monotonic() - t0
    summary = eval_inpainting(model, desk_video, mask)
    gain = summary["model"] - summary["input"]
    ok = gain >= 3.0
    report("criterion 10 (inpainting direction)", ok,
           f"model {summary['model']:.2f} dB vs input {summary['input']:.2f} dB, "
           f"gain {gain:+.2f} >= 3.0 ({elapsed:.0f}s)")
