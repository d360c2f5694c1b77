"""Vector quantization with EMA code updates and dead-code revival.

The codebook keeps a reserved all-zero vector at index 0 that is never
updated or revived, so zero features always quantize to token 0 and need
not be transmitted. Index collapse is countered by a feature pool of the
same size as the codebook: the pool is clustered online (one Lloyd
iteration per step), and codes whose EMA cluster size falls below the
dead threshold are re-seeded from the nearest sufficiently-used pool node.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError, IntegrityError, StateError

log = logging.getLogger(__name__)

_EPS = 1e-5


@dataclass
class TokenGrid:
    """Integer code indices on a [Ht, Wt] grid.

    By convention the left half of the columns carries the current-frame
    residual stream and the right half the previous-frame stream.
    """
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int32)

    @property
    def shape(self):
        return self.indices.shape

    def flat(self) -> np.ndarray:
        return self.indices.reshape(-1)


@dataclass
class QuantizeResult:
    values: np.ndarray      # nearest codes, same layout as the query
    tokens: TokenGrid
    distances: np.ndarray   # squared distance to the chosen code per position


class CodebookState:
    """N code vectors with EMA accumulators and usage counters."""

    def __init__(self, size: int, dim: int, decay: float = 0.99,
                 dead_threshold: float = 1.0, rng: np.random.Generator | None = None,
                 init_scale: float = 0.01):
        if size < 1:
            raise StateError("codebook size must be >= 1")
        rng = rng or np.random.default_rng(0)
        self.size = size
        self.dim = dim
        self.decay = decay
        self.dead_threshold = dead_threshold
        self.codes = rng.normal(0.0, init_scale, size=(size, dim)).astype(np.float32)
        self.codes[0] = 0.0  # reserved zero vector
        self.counts = np.zeros(size, dtype=np.float32)
        self.sums = self.codes * self.counts[:, None]
        self.usage_counter = np.zeros(size, dtype=np.int64)
        self.usage_samples = 0

    # -- queries ---------------------------------------------------------------

    def quantize(self, x) -> QuantizeResult:
        """Replace each vector with its nearest code (squared Euclidean).

        Accepts [D,Ht,Wt] feature maps or flat [M,D] batches; ties break to
        the lowest code index. Usage counters are incremented.
        """
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
        if self.codes.shape[0] == 0:
            raise StateError("empty codebook")
        grid = data.ndim == 3
        if grid:
            if data.shape[0] != self.dim:
                raise DimensionError(f"quantize: feature dim {data.shape[0]} != {self.dim}")
            ht, wt = data.shape[1], data.shape[2]
            flat = data.reshape(self.dim, -1).T
        else:
            if data.shape[1] != self.dim:
                raise DimensionError(f"quantize: feature dim {data.shape[1]} != {self.dim}")
            flat = data
        d2 = (np.sum(flat * flat, axis=1, keepdims=True)
              - 2.0 * flat @ self.codes.T
              + np.sum(self.codes * self.codes, axis=1))
        tokens = np.argmin(d2, axis=1).astype(np.int32)
        dist = np.maximum(d2[np.arange(len(tokens)), tokens], 0.0).astype(np.float32)
        values = self.codes[tokens]
        np.add.at(self.usage_counter, tokens, 1)
        self.usage_samples += len(tokens)
        if grid:
            return QuantizeResult(values.T.reshape(self.dim, ht, wt),
                                  TokenGrid(tokens.reshape(ht, wt)),
                                  dist.reshape(ht, wt))
        return QuantizeResult(values, TokenGrid(tokens.reshape(1, -1)), dist)

    def lookup(self, tokens: TokenGrid) -> np.ndarray:
        """Tokens -> [D,Ht,Wt] feature map (decode-side path)."""
        idx = tokens.indices
        if idx.min(initial=0) < 0 or idx.max(initial=0) >= self.size:
            raise StateError("token index outside codebook")
        return self.codes[idx.reshape(-1)].T.reshape(self.dim, *idx.shape)

    def usage(self) -> float:
        """Fraction of codes hit at least once since the last reset (0 if no data)."""
        if self.usage_samples == 0:
            log.warning("codebook usage queried with no quantize calls since reset")
            return 0.0
        return float(np.count_nonzero(self.usage_counter)) / self.size

    def reset_usage(self) -> None:
        self.usage_counter[:] = 0
        self.usage_samples = 0

    # -- updates ---------------------------------------------------------------

    def ema_update(self, features: np.ndarray, tokens: np.ndarray) -> None:
        """EMA step toward the assigned features; code 0 is left untouched."""
        features = np.asarray(features, dtype=np.float32)
        tokens = np.asarray(tokens).reshape(-1)
        n_i = np.zeros(self.size, dtype=np.float32)
        np.add.at(n_i, tokens, 1.0)
        s_i = np.zeros_like(self.sums)
        np.add.at(s_i, tokens, features)
        g = self.decay
        self.counts = g * self.counts + (1.0 - g) * n_i
        self.sums = g * self.sums + (1.0 - g) * s_i
        self.codes[1:] = self.sums[1:] / np.maximum(self.counts[1:, None], _EPS)
        self.codes[0] = 0.0

    def serialize(self) -> bytes:
        """Little-endian (N, D) header followed by the codes as float32."""
        return struct.pack("<II", self.size, self.dim) + \
            np.ascontiguousarray(self.codes, dtype="<f4").tobytes()

    @staticmethod
    def deserialize(blob: bytes) -> "CodebookState":
        if len(blob) < 8:
            raise IntegrityError("codebook blob too short")
        n, d = struct.unpack("<II", blob[:8])
        expect = 8 + n * d * 4
        if len(blob) != expect:
            raise IntegrityError(f"codebook blob size {len(blob)} != expected {expect}")
        state = CodebookState(n, d)
        state.codes = np.frombuffer(blob[8:], dtype="<f4").reshape(n, d).astype(np.float32)
        state.sums = state.codes.copy()
        state.counts = np.ones(n, dtype=np.float32)
        return state


class FeaturePool:
    """Cluster nodes mirroring the codebook size, maintained by online k-means."""

    def __init__(self, size: int, dim: int, decay: float = 0.99):
        self.size = size
        self.dim = dim
        self.decay = decay
        self.nodes = np.zeros((size, dim), dtype=np.float32)
        self.node_sizes = np.zeros(size, dtype=np.float32)
        self.filled = 0

    def fill(self, features: np.ndarray) -> int:
        """Seed unfilled nodes from incoming features; returns how many were used."""
        take = min(self.size - self.filled, len(features))
        if take > 0:
            self.nodes[self.filled:self.filled + take] = features[:take]
            self.node_sizes[self.filled:self.filled + take] = 1.0
            self.filled += take
        return take

    def kmeans_step(self, features: np.ndarray) -> np.ndarray:
        """One Lloyd iteration on the batch, then EMA the pool toward the result.

        Empty clusters keep their previous node. Returns the batch cluster
        nodes (the per-batch Lloyd means).
        """
        features = np.asarray(features, dtype=np.float32)
        if len(features) == 0:
            return self.nodes.copy()
        d2 = (np.sum(features * features, axis=1, keepdims=True)
              - 2.0 * features @ self.nodes.T
              + np.sum(self.nodes * self.nodes, axis=1))
        assign = np.argmin(d2, axis=1)
        counts = np.zeros(self.size, dtype=np.float32)
        np.add.at(counts, assign, 1.0)
        sums = np.zeros_like(self.nodes)
        np.add.at(sums, assign, features)
        batch_nodes = self.nodes.copy()
        nonempty = counts > 0
        batch_nodes[nonempty] = sums[nonempty] / counts[nonempty, None]
        g = self.decay
        self.nodes[nonempty] = g * self.nodes[nonempty] + (1.0 - g) * batch_nodes[nonempty]
        self.node_sizes = g * self.node_sizes + (1.0 - g) * counts
        return batch_nodes


def pool_kmeans_step(pool: FeaturePool, features: np.ndarray) -> np.ndarray:
    return pool.kmeans_step(features)


def revive_dead_codes(state: CodebookState, pool: FeaturePool) -> int:
    """Replace under-used codes with their nearest well-used pool node.

    A code is dead when its EMA cluster size is below the dead threshold;
    the reserved zero code never qualifies. Eligible replacement nodes must
    have a pool cluster size above the same threshold. Returns the number
    of codes revived; codes with no eligible node are left unchanged.
    """
    dead = np.where(state.counts < state.dead_threshold)[0]
    dead = dead[dead != 0]
    if len(dead) == 0:
        return 0
    eligible = np.where(pool.node_sizes > state.dead_threshold)[0]
    if len(eligible) == 0:
        # warn once per codebook, then demote to debug to avoid per-step spam
        if not getattr(state, "_revive_warned", False):
            log.warning("revive_dead_codes: %d dead codes but no eligible pool node", len(dead))
            state._revive_warned = True
        else:
            log.debug("revive_dead_codes: %d dead codes but no eligible pool node", len(dead))
        return 0
    nodes = pool.nodes[eligible]
    d2 = (np.sum(state.codes[dead] ** 2, axis=1, keepdims=True)
          - 2.0 * state.codes[dead] @ nodes.T
          + np.sum(nodes * nodes, axis=1))
    nearest = nodes[np.argmin(d2, axis=1)]
    state.codes[dead] = nearest
    state.counts[dead] = 1.0
    state.sums[dead] = nearest
    return len(dead)


def usage(state: CodebookState) -> float:
    return state.usage()


def quantize(state: CodebookState, x) -> QuantizeResult:
    return state.quantize(x)


def ema_update(state: CodebookState, features: np.ndarray, tokens) -> None:
    toks = tokens.flat() if isinstance(tokens, TokenGrid) else np.asarray(tokens).reshape(-1)
    state.ema_update(features, toks)


def vq_loss(x: Tensor, z_q: np.ndarray, beta: float) -> Tensor:
    """Mean-squared codebook + commitment loss.

    Value is mean((sg[x]-z_q)^2) + beta*mean((x-sg[z_q])^2); only the
    commitment term backpropagates (codes are maintained by EMA, so the
    first term is monitored rather than trained).
    """
    z_q = np.asarray(z_q, dtype=np.float32)
    if z_q.shape != x.data.shape:
        raise DimensionError(f"vq_loss shapes {x.data.shape} vs {z_q.shape}")
    codebook_term = float(np.mean((x.data - z_q) ** 2))
    diff = x - Tensor(z_q)
    commit = (diff * diff).mean()
    return commit * beta + Tensor(np.float32(codebook_term))


def straight_through(x: Tensor, z_q: np.ndarray) -> Tensor:
    """Quantized values forward, identity gradient backward."""
    return ag.straight_through(x, z_q)


@dataclass
class ShallowCodebookConfig:
    size: int = 64
    dim: int = 8
    decay: float = 0.99
    dead_threshold: float = 1.0
    beta: float = 0.25


class ShallowCodebookTrainer:
    """Drives the three-step shallow optimization during training.

    Step 1: the first batches fill the feature pool (and, when ``fill_codes``
    is on, the codebook itself). Step 2: each update runs one Lloyd
    iteration of k-means on the batch, seeded from the pool nodes, then
    EMA-updates the pool. Step 3: dead codes are re-seeded from the pool.
    """

    def __init__(self, config: ShallowCodebookConfig, rng: np.random.Generator,
                 enabled: bool = True, fill_codes: bool = True):
        self.config = config
        self.enabled = enabled
        self.fill_codes = fill_codes
        self.state = CodebookState(config.size, config.dim, config.decay,
                                   config.dead_threshold, rng)
        self.pool = FeaturePool(config.size, config.dim, config.decay)
        self._code_fill = 1  # slot 0 is the reserved zero code
        self.revived_total = 0

    def update(self, features: np.ndarray, tokens) -> None:
        """EMA + pool k-means + revival after a training step's quantize call."""
        features = np.asarray(features, dtype=np.float32)
        if self.fill_codes and self._code_fill < self.state.size:
            take = min(self.state.size - self._code_fill, len(features))
            sl = slice(self._code_fill, self._code_fill + take)
            self.state.codes[sl] = features[:take]
            self.state.counts[sl] = 1.0
            self.state.sums[sl] = features[:take]
            self._code_fill += take
        ema_update(self.state, features, tokens)
        if self.enabled:
            if self.pool.filled < self.pool.size:
                self.pool.fill(features)
            else:
                self.pool.kmeans_step(features)
            self.revived_total += revive_dead_codes(self.state, self.pool)
