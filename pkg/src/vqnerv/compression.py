"""Model-to-bitstream pipeline: pruning, 8-bit quantization, entropy coding
and the sectioned bitstream container, plus the lossless unpack/decode side.

Bitstream layout (magic "VQNV"): a config/manifest pair, the pruned +
quantized decoder weights (masks deflated, kept values Huffman coded),
8-bit per-frame embeddings and per-frame token grids (both deflated), and
the codebook restricted to the codes actually referenced by tokens (the
reserved zero code is implicit and never transmitted). Total size
accounting follows
``frames * (embedding + tokens) + decoder + codebook``.
"""

from __future__ import annotations

import heapq
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .codebook import CodebookState, TokenGrid
from .container import header_size, read_container, write_container
from .errors import IntegrityError, ParameterError
from .losses import psnr
from .model import ModelConfig, VideoModel

BITSTREAM_MAGIC = b"VQNV"
BITSTREAM_VERSION = 1

# section tags
_SEC_CONFIG = 1
_SEC_MANIFEST = 2
_SEC_MASKS = 3
_SEC_WEIGHTS = 4
_SEC_EMBED = 5
_SEC_TOKENS = 6
_SEC_CODEBOOK = 7


# -- pruning -------------------------------------------------------------------


def prune_global_l1(weights: dict[str, np.ndarray], ratio: float
                    ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Zero the globally smallest-|w| fraction of entries across all tensors.

    Exactly floor(ratio * total) entries are zeroed, ties resolved by their
    stable flattened order. Returns (masked weights, boolean keep-masks).
    """
    if not 0.0 <= ratio < 1.0:
        raise ParameterError(f"prune ratio {ratio} outside [0, 1)")
    names = list(weights)
    flat = np.concatenate([np.abs(np.asarray(weights[n], dtype=np.float32)).reshape(-1)
                           for n in names]) if names else np.zeros(0, np.float32)
    k = int(ratio * flat.size)
    keep_flat = np.ones(flat.size, dtype=bool)
    if k > 0:
        order = np.argsort(flat, kind="stable")
        keep_flat[order[:k]] = False
    masked, masks = {}, {}
    off = 0
    for n in names:
        w = np.asarray(weights[n], dtype=np.float32)
        m = keep_flat[off:off + w.size].reshape(w.shape)
        off += w.size
        masks[n] = m
        masked[n] = np.where(m, w, 0.0).astype(np.float32)
    return masked, masks


# -- 8-bit quantization -----------------------------------------------------------


@dataclass
class QuantizedTensor:
    """Min-max linear 8-bit quantization of one tensor."""

    payload: np.ndarray      # uint8 codes in [0, 255]
    minimum: float
    scale: float             # (max - min) / 255; zero for constant tensors
    shape: tuple[int, ...]

    def dequantize(self) -> np.ndarray:
        out = np.float32(self.minimum) + self.payload.astype(np.float32) * np.float32(self.scale)
        return out.reshape(self.shape)


def quantize_8bit(x: np.ndarray) -> QuantizedTensor:
    """Round-half-even linear map of [min, max] onto the 256 code points."""
    x = np.asarray(x, dtype=np.float32)
    lo = float(x.min()) if x.size else 0.0
    hi = float(x.max()) if x.size else 0.0
    if hi == lo:
        return QuantizedTensor(np.zeros(x.size, dtype=np.uint8), lo, 0.0, x.shape)
    # float64 keeps exact midpoints (e.g. 127.5) so np.rint ties-to-even holds
    codes = np.rint((x.reshape(-1).astype(np.float64) - lo) * 255.0 / (hi - lo))
    codes = np.clip(codes, 0, 255).astype(np.uint8)
    scale = np.float32((hi - lo) / 255.0)
    return QuantizedTensor(codes, lo, float(scale), x.shape)


# -- Huffman coding ------------------------------------------------------------------


def _code_lengths(freqs: dict[int, int]) -> dict[int, int]:
    if len(freqs) == 1:
        return {next(iter(freqs)): 1}
    heap = [(f, i, (s,)) for i, (s, f) in enumerate(sorted(freqs.items()))]
    heapq.heapify(heap)
    lengths = {s: 0 for s in freqs}
    counter = len(heap)
    while len(heap) > 1:
        fa, _, sa = heapq.heappop(heap)
        fb, _, sb = heapq.heappop(heap)
        for s in sa + sb:
            lengths[s] += 1
        heapq.heappush(heap, (fa + fb, counter, sa + sb))
        counter += 1
    return lengths


def _canonical_codes(lengths: dict[int, int]) -> dict[int, tuple[int, int]]:
    """Symbol -> (code, nbits), assigned in (length, symbol) order."""
    ordered = sorted(lengths.items(), key=lambda kv: (kv[1], kv[0]))
    codes = {}
    code = 0
    prev_len = ordered[0][1]
    for sym, ln in ordered:
        code <<= (ln - prev_len)
        codes[sym] = (code, ln)
        code += 1
        prev_len = ln
    return codes


def huffman_encode(data: bytes) -> bytes:
    """Self-contained canonical-Huffman blob: symbol table + packed bits."""
    data = bytes(data)
    if len(data) == 0:
        return struct.pack("<HQ", 0, 0)
    arr = np.frombuffer(data, dtype=np.uint8)
    hist = np.bincount(arr, minlength=256)
    freqs = {int(s): int(hist[s]) for s in np.nonzero(hist)[0]}
    lengths = _code_lengths(freqs)
    codes = _canonical_codes(lengths)

    header = [struct.pack("<HQ", len(lengths), len(data))]
    for sym in sorted(lengths):
        header.append(struct.pack("<BB", sym, lengths[sym]))

    code_arr = np.zeros(256, dtype=np.uint64)
    len_arr = np.zeros(256, dtype=np.uint8)
    for sym, (code, ln) in codes.items():
        code_arr[sym] = code
        len_arr[sym] = ln
    out = bytearray()
    acc = 0
    nbits = 0
    for sym in arr:
        acc = (acc << int(len_arr[sym])) | int(code_arr[sym])
        nbits += int(len_arr[sym])
        while nbits >= 8:
            nbits -= 8
            out.append((acc >> nbits) & 0xFF)
    if nbits:
        out.append((acc << (8 - nbits)) & 0xFF)
    return b"".join(header) + bytes(out)


def huffman_decode(blob: bytes) -> bytes:
    if len(blob) < 10:
        raise IntegrityError("huffman blob too short")
    n_sym, n_data = struct.unpack_from("<HQ", blob, 0)
    if n_sym == 0:
        if n_data != 0:
            raise IntegrityError("huffman: empty table with nonzero length")
        return b""
    off = 10
    lengths = {}
    for _ in range(n_sym):
        sym, ln = struct.unpack_from("<BB", blob, off)
        lengths[sym] = ln
        off += 2
    codes = _canonical_codes(lengths)
    decode_map = {v: k for k, v in codes.items()}
    max_len = max(ln for _, ln in codes.values())

    out = bytearray()
    acc = 0
    nbits = 0
    pos = off
    while len(out) < n_data:
        while nbits < max_len and pos < len(blob):
            acc = (acc << 8) | blob[pos]
            pos += 1
            nbits += 8
        for ln in range(1, max_len + 1):
            if ln > nbits:
                raise IntegrityError("huffman: bitstream exhausted")
            prefix = (acc >> (nbits - ln)) & ((1 << ln) - 1)
            if (prefix, ln) in decode_map:
                out.append(decode_map[(prefix, ln)])
                nbits -= ln
                acc &= (1 << nbits) - 1
                break
        else:
            raise IntegrityError("huffman: no code matched")
    return bytes(out)


# -- deflate ---------------------------------------------------------------------------


def deflate_encode(data: bytes) -> bytes:
    """Raw RFC-1951 deflate stream."""
    comp = zlib.compressobj(9, zlib.DEFLATED, -15)
    return comp.compress(bytes(data)) + comp.flush()


def deflate_decode(data: bytes) -> bytes:
    try:
        return zlib.decompress(bytes(data), -15)
    except zlib.error as exc:
        raise IntegrityError(f"deflate stream corrupt: {exc}") from exc


def _deflate_section(data: bytes) -> bytes:
    """Deflate with a stored fallback (1-byte method flag) for tiny payloads."""
    packed = deflate_encode(data)
    if len(packed) < len(data):
        return b"\x01" + packed
    return b"\x00" + bytes(data)


def _inflate_section(blob: bytes) -> bytes:
    if not blob:
        raise IntegrityError("empty compressed section")
    if blob[0] == 1:
        return deflate_decode(blob[1:])
    if blob[0] == 0:
        return bytes(blob[1:])
    raise IntegrityError(f"unknown section compression method {blob[0]}")


# -- pack / unpack -----------------------------------------------------------------------


@dataclass
class CompressionReport:
    frames: int
    height: int
    width: int
    decoder_bytes: int
    embedding_bytes: int
    token_bytes: int
    codebook_bytes: int
    header_bytes: int
    total_bytes: int
    raw_embedding_bytes: int = 0
    raw_token_bytes: int = 0
    psnr_db: float | None = None

    @property
    def bpp(self) -> float:
        pixels = self.frames * self.height * self.width
        return 8.0 * self.total_bytes / pixels if pixels else 0.0

    def composed_total(self) -> int:
        """Total recomputed from the size-equation terms; must equal total_bytes."""
        return (self.embedding_bytes + self.token_bytes
                + self.decoder_bytes + self.codebook_bytes)

    def to_text(self) -> str:
        lines = [
            f"frames            {self.frames} @ {self.width}x{self.height}",
            f"decoder bytes     {self.decoder_bytes}",
            f"embedding bytes   {self.embedding_bytes} (raw {self.raw_embedding_bytes})",
            f"token bytes       {self.token_bytes} (raw {self.raw_token_bytes})",
            f"codebook bytes    {self.codebook_bytes}",
            f"container header  {self.header_bytes}",
            f"total bytes       {self.total_bytes}",
            f"bpp               {self.bpp:.6f}",
        ]
        if self.psnr_db is not None:
            lines.append(f"psnr (dB)         {self.psnr_db:.4f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        cols = ["frames", "height", "width", "decoder_bytes", "embedding_bytes",
                "token_bytes", "codebook_bytes", "total_bytes", "bpp", "psnr_db"]
        vals = [self.frames, self.height, self.width, self.decoder_bytes,
                self.embedding_bytes, self.token_bytes, self.codebook_bytes,
                self.total_bytes, f"{self.bpp:.6f}",
                "" if self.psnr_db is None else f"{self.psnr_db:.4f}"]
        return ",".join(cols) + "\n" + ",".join(str(v) for v in vals) + "\n"


@dataclass
class PackedArtifacts:
    """Quantized decode-side artifacts, ready to serialize or compare."""
    config: dict
    weights: dict[str, QuantizedTensor]
    masks: dict[str, np.ndarray]
    embeddings: list[QuantizedTensor]
    tokens: list[np.ndarray]          # remapped to the compact codebook
    codebook: np.ndarray              # compact table, row 0 = zero vector


def _compact_codebook(codes: np.ndarray, token_grids: list[TokenGrid]
                      ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Keep only referenced codes, in first-use order; zero code stays row 0."""
    remap = np.full(codes.shape[0], -1, dtype=np.int32)
    remap[0] = 0
    table = [np.zeros(codes.shape[1], dtype=np.float32)]
    remapped = []
    for grid in token_grids:
        flat = grid.flat()
        out = np.empty_like(flat)
        for i, tok in enumerate(flat):
            if remap[tok] < 0:
                remap[tok] = len(table)
                table.append(codes[tok].astype(np.float32))
            out[i] = remap[tok]
        remapped.append(out.reshape(grid.shape))
    return np.stack(table, axis=0), remapped


def build_artifacts(model: VideoModel, frames: np.ndarray, prune_ratio: float = 0.1
                    ) -> tuple[PackedArtifacts, np.ndarray]:
    """Prune + quantize a trained model and collect per-frame payloads.

    Returns the artifacts plus the float-path reconstructions the
    embeddings/tokens were harvested from (useful as a comparison point).
    """
    results = model.forward_video(frames)
    embeddings = [r.embedding for r in results]
    token_grids = [r.tokens for r in results] if model.vq is not None else []

    weights = {k: p.data.copy() for k, p in model.decoder_parameters().items()}
    kernels = {k: w for k, w in weights.items() if w.ndim >= 2}
    masked, masks = prune_global_l1(kernels, prune_ratio)
    weights.update(masked)

    qweights = {}
    for name, w in weights.items():
        if name in masks:
            kept = w.reshape(-1)[masks[name].reshape(-1)]
            qweights[name] = quantize_8bit(kept)
        else:
            qweights[name] = quantize_8bit(w)

    qembeds = [quantize_8bit(e) for e in embeddings]
    if model.vq is not None:
        codes = model.codebook_trainer.state.codes
        table, remapped = _compact_codebook(codes, token_grids)
    else:
        table, remapped = np.zeros((1, model.cfg.codebook_dim), np.float32), []
    cfg = model.cfg.to_dict()
    return PackedArtifacts(cfg, qweights, masks, qembeds, remapped, table), np.stack(
        [r.recon.data for r in results])


def pack(artifacts: PackedArtifacts) -> bytes:
    """Serialize quantized artifacts into the bitstream container."""
    manifest = {
        "weights": {n: {"shape": list(artifacts.masks[n].shape if n in artifacts.masks
                                      else q.shape),
                        "min": q.minimum, "scale": q.scale,
                        "pruned": n in artifacts.masks}
                    for n, q in artifacts.weights.items()},
        "embeddings": [{"shape": list(q.shape), "min": q.minimum, "scale": q.scale}
                       for q in artifacts.embeddings],
        "token_shape": list(artifacts.tokens[0].shape) if artifacts.tokens else None,
        "codebook_used": int(artifacts.codebook.shape[0]),
        "codebook_dim": int(artifacts.codebook.shape[1]),
    }
    mask_blob = _deflate_section(b"".join(
        np.packbits(artifacts.masks[n].reshape(-1)).tobytes()
        for n in artifacts.weights if n in artifacts.masks))
    weight_blob = huffman_encode(b"".join(
        q.payload.tobytes() for q in artifacts.weights.values()))
    embed_blob = _deflate_section(b"".join(q.payload.tobytes() for q in artifacts.embeddings))
    wide = artifacts.codebook.shape[0] > 256
    tok_dtype = "<u2" if wide else "u1"
    token_blob = _deflate_section(b"".join(
        t.astype(tok_dtype).tobytes() for t in artifacts.tokens))
    cb_blob = struct.pack("<II", *artifacts.codebook.shape) + \
        np.ascontiguousarray(artifacts.codebook[1:], dtype="<f4").tobytes()
    sections = [
        (_SEC_CONFIG, json.dumps(artifacts.config, sort_keys=True).encode()),
        (_SEC_MANIFEST, json.dumps(manifest, sort_keys=False).encode()),
        (_SEC_MASKS, mask_blob),
        (_SEC_WEIGHTS, weight_blob),
        (_SEC_EMBED, embed_blob),
        (_SEC_TOKENS, token_blob),
        (_SEC_CODEBOOK, cb_blob),
    ]
    return write_container(BITSTREAM_MAGIC, BITSTREAM_VERSION, sections)


def unpack(blob: bytes) -> tuple[PackedArtifacts, CompressionReport]:
    """Exact inverse of :func:`pack`; validates structure and token references."""
    _, sections = read_container(blob, BITSTREAM_MAGIC, BITSTREAM_VERSION)
    sec = dict(sections)
    for tag in (_SEC_CONFIG, _SEC_MANIFEST, _SEC_MASKS, _SEC_WEIGHTS,
                _SEC_EMBED, _SEC_TOKENS, _SEC_CODEBOOK):
        if tag not in sec:
            raise IntegrityError(f"bitstream missing section {tag}")
    config = json.loads(sec[_SEC_CONFIG].decode())
    manifest = json.loads(sec[_SEC_MANIFEST].decode())

    mask_raw = _inflate_section(sec[_SEC_MASKS])
    masks = {}
    off = 0
    for name, meta in manifest["weights"].items():
        if meta["pruned"]:
            size = int(np.prod(meta["shape"]))
            nbytes = (size + 7) // 8
            bits = np.unpackbits(np.frombuffer(mask_raw, np.uint8, nbytes, off))[:size]
            masks[name] = bits.astype(bool).reshape(meta["shape"])
            off += nbytes

    weight_raw = huffman_decode(sec[_SEC_WEIGHTS])
    weights = {}
    off = 0
    for name, meta in manifest["weights"].items():
        size = int(np.prod(meta["shape"]))
        if meta["pruned"]:
            size = int(masks[name].sum())
        payload = np.frombuffer(weight_raw, np.uint8, size, off).copy()
        off += size
        shape = (size,) if meta["pruned"] else tuple(meta["shape"])
        weights[name] = QuantizedTensor(payload, meta["min"], meta["scale"], shape)

    embed_raw = _inflate_section(sec[_SEC_EMBED])
    embeds = []
    off = 0
    for meta in manifest["embeddings"]:
        size = int(np.prod(meta["shape"]))
        payload = np.frombuffer(embed_raw, np.uint8, size, off).copy()
        off += size
        embeds.append(QuantizedTensor(payload, meta["min"], meta["scale"],
                                      tuple(meta["shape"])))

    used, dim = struct.unpack_from("<II", sec[_SEC_CODEBOOK], 0)
    table = np.zeros((used, dim), dtype=np.float32)
    table[1:] = np.frombuffer(sec[_SEC_CODEBOOK], "<f4", (used - 1) * dim, 8) \
        .reshape(used - 1, dim)

    tokens = []
    if manifest["token_shape"]:
        tok_raw = _inflate_section(sec[_SEC_TOKENS])
        shape = tuple(manifest["token_shape"])
        n = int(np.prod(shape))
        wide = used > 256
        dtype, step = ("<u2", 2 * n) if wide else ("u1", n)
        if len(tok_raw) % step:
            raise IntegrityError("token payload length not a whole number of grids")
        for off in range(0, len(tok_raw), step):
            grid = np.frombuffer(tok_raw, dtype, n, off).astype(np.int32).reshape(shape)
            if grid.max(initial=0) >= used:
                raise IntegrityError("token references a code outside the compact table")
            tokens.append(grid)

    artifacts = PackedArtifacts(config, weights, masks, embeds, tokens, table)
    sizes = {tag: len(payload) for tag, payload in sections}
    decoder_bytes = sizes[_SEC_CONFIG] + sizes[_SEC_MANIFEST] + sizes[_SEC_MASKS] + sizes[_SEC_WEIGHTS]
    frames = len(embeds)
    report = CompressionReport(
        frames=frames, height=config["height"], width=config["width"],
        decoder_bytes=decoder_bytes, embedding_bytes=sizes[_SEC_EMBED],
        token_bytes=sizes[_SEC_TOKENS], codebook_bytes=sizes[_SEC_CODEBOOK],
        header_bytes=header_size(len(sections)), total_bytes=sum(sizes.values()),
        raw_embedding_bytes=sum(q.payload.size for q in embeds),
        raw_token_bytes=sum(t.size * (2 if used > 256 else 1) for t in tokens),
    )
    return artifacts, report


def restore_weights(artifacts: PackedArtifacts) -> dict[str, np.ndarray]:
    """Dequantized float32 decoder weights with pruned entries at exact zero."""
    out = {}
    for name, q in artifacts.weights.items():
        if name in artifacts.masks:
            mask = artifacts.masks[name]
            full = np.zeros(mask.size, dtype=np.float32)
            full[mask.reshape(-1)] = q.dequantize()
            out[name] = full.reshape(mask.shape)
        else:
            out[name] = q.dequantize()
    return out


def quantized_model(artifacts: PackedArtifacts) -> VideoModel:
    """Decode-side model carrying the dequantized weights and compact codebook."""
    cfg = ModelConfig.from_dict(artifacts.config)
    model = VideoModel(cfg, build_encoder=False)
    weights = restore_weights(artifacts)
    params = model.decoder_parameters()
    for name, arr in weights.items():
        if name not in params:
            raise IntegrityError(f"bitstream weight {name} not in model")
        params[name].data[...] = arr.reshape(params[name].data.shape)
    return model


def decode_video(blob: bytes, reference: np.ndarray | None = None
                 ) -> tuple[np.ndarray, CompressionReport]:
    """Decoder-only playback from a bitstream; optionally scores against a reference."""
    artifacts, report = unpack(blob)
    model = quantized_model(artifacts)
    codebook = CodebookState(artifacts.codebook.shape[0], artifacts.codebook.shape[1])
    codebook.codes = artifacts.codebook.copy()
    embeddings = [q.dequantize() for q in artifacts.embeddings]
    tokens = [TokenGrid(t) for t in artifacts.tokens] if artifacts.tokens else None
    frames = np.stack(model.decode_frames(embeddings, tokens, codebook))
    if reference is not None:
        report.psnr_db = psnr(frames, reference)
    return frames, report
