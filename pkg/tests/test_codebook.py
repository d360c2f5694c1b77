"""Codebook quantization, EMA updates and the shallow optimization steps."""

import logging

import numpy as np
import pytest

from vqnerv.autograd import Tensor
from vqnerv.codebook import (CodebookState, FeaturePool, ShallowCodebookConfig,
                             ShallowCodebookTrainer, TokenGrid, ema_update,
                             pool_kmeans_step, quantize, revive_dead_codes,
                             straight_through, usage, vq_loss)
from vqnerv.errors import DimensionError, IntegrityError, StateError


def make_state(codes: np.ndarray, **kw) -> CodebookState:
    state = CodebookState(len(codes), codes.shape[1], **kw)
    state.codes = codes.astype(np.float32).copy()
    state.sums = state.codes.copy()
    state.counts = np.ones(len(codes), dtype=np.float32)
    return state


def nearest_oracle(codes: np.ndarray, q: np.ndarray) -> int:
    """Exhaustive scan, lowest index on ties."""
    d = np.sum((codes - q) ** 2, axis=1)
    return int(np.flatnonzero(d == d.min())[0])


class TestQuantize:
    def test_exact_code_match(self):
        codes = np.array([[0, 0], [1, 0], [0, 1], [0.5, 0.5]])
        state = make_state(codes)
        res = state.quantize(np.array([[0.5, 0.5]], dtype=np.float32))
        assert res.tokens.flat()[0] == 3
        assert res.distances[0] == pytest.approx(0.0, abs=1e-7)
        np.testing.assert_array_equal(res.values[0], [0.5, 0.5])

    def test_two_code_example(self):
        state = make_state(np.array([[0.0, 0.0], [1.0, 1.0]]))
        res = state.quantize(np.array([[0.4, 0.4]], dtype=np.float32))
        assert res.tokens.flat()[0] == 0  # 0.32 < 0.72
        assert res.distances[0] == pytest.approx(0.32, abs=1e-6)

    def test_tie_breaks_to_lowest_index(self):
        state = make_state(np.array([[0, 0], [1.0, 0.0], [-1.0, 0.0]]))
        res = state.quantize(np.array([[0.0, 5.0]], dtype=np.float32))
        # codes 1 and 2 are equidistant from the query; 0 is closer, so shift query
        res = state.quantize(np.array([[0.0, 0.0]], dtype=np.float32))
        assert res.tokens.flat()[0] == 0
        state2 = make_state(np.array([[9.0, 9.0], [1.0, 0.0], [-1.0, 0.0]]))
        res2 = state2.quantize(np.array([[0.0, 0.0]], dtype=np.float32))
        assert res2.tokens.flat()[0] == 1  # equidistant 1 vs 2: lowest wins

    def test_grid_layout(self):
        rng = np.random.default_rng(0)
        state = make_state(rng.normal(size=(7, 4)))
        x = rng.normal(size=(4, 3, 5)).astype(np.float32)
        res = state.quantize(x)
        assert res.tokens.shape == (3, 5)
        assert res.values.shape == (4, 3, 5)
        flat = x.reshape(4, -1).T
        for i, tok in enumerate(res.tokens.flat()):
            assert tok == nearest_oracle(state.codes, flat[i])

    def test_nearest_neighbor_optimality(self):
        rng = np.random.default_rng(1)
        state = make_state(rng.normal(size=(16, 8)))
        x = rng.normal(size=(32, 8)).astype(np.float32)
        res = state.quantize(x)
        for i, tok in enumerate(res.tokens.flat()):
            d_chosen = np.sum((x[i] - state.codes[tok]) ** 2)
            d_all = np.sum((x[i][None] - state.codes) ** 2, axis=1)
            assert d_chosen <= d_all.min() + 1e-6

    def test_dim_mismatch(self):
        state = make_state(np.zeros((4, 3)))
        with pytest.raises(DimensionError):
            state.quantize(np.zeros((2, 5, 5), dtype=np.float32))

    def test_empty_codebook(self):
        with pytest.raises(StateError):
            CodebookState(0, 4)

    def test_lookup_matches_quantize(self):
        rng = np.random.default_rng(2)
        state = make_state(rng.normal(size=(9, 4)))
        x = rng.normal(size=(4, 2, 2)).astype(np.float32)
        res = state.quantize(x)
        np.testing.assert_array_equal(state.lookup(res.tokens), res.values)


class TestVQLoss:
    def test_zero_when_equal(self):
        x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
        assert float(vq_loss(x, x.data.copy(), 0.25).data) == pytest.approx(0.0)

    def test_hand_value(self):
        # x=(1,0), z=(0,0): element-mean gives 0.5 + 0.25*0.5 = 0.625
        x = Tensor(np.array([1.0, 0.0], dtype=np.float32), requires_grad=True)
        z = np.zeros(2, dtype=np.float32)
        assert float(vq_loss(x, z, 0.25).data) == pytest.approx(0.625)

    def test_beta_scales_commitment_only(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(4,)).astype(np.float32), requires_grad=True)
        z = rng.normal(size=(4,)).astype(np.float32)
        l1 = float(vq_loss(x, z, 0.25).data)
        l2 = float(vq_loss(x, z, 0.5).data)
        base = float(np.mean((x.data - z) ** 2))
        assert l2 - l1 == pytest.approx(0.25 * base, rel=1e-5)

    def test_gradient_only_through_commitment(self):
        x = Tensor(np.array([1.0, 0.0], dtype=np.float32), requires_grad=True)
        z = np.zeros(2, dtype=np.float32)
        loss = vq_loss(x, z, 0.25)
        loss.backward()
        # d/dx of 0.25 * mean((x - z)^2) = 0.25 * 2(x-z)/2 = 0.25*(x-z)
        np.testing.assert_allclose(x.grad, 0.25 * (x.data - z), rtol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            vq_loss(Tensor(np.zeros(3)), np.zeros(4, dtype=np.float32), 0.25)


class TestEMA:
    def test_unassigned_code_value_unchanged(self):
        state = make_state(np.array([[0.0, 0.0], [5.0, 5.0], [9.0, 9.0]]), decay=0.9)
        c2 = state.codes[2].copy()
        n2 = state.counts[2]
        state.ema_update(np.array([[5.2, 4.8]], dtype=np.float32), np.array([1]))
        np.testing.assert_allclose(state.codes[2], c2, atol=1e-6)
        assert state.counts[2] == pytest.approx(0.9 * n2)

    def test_full_replacement_at_zero_decay(self):
        state = make_state(np.array([[0.0, 0.0], [5.0, 5.0]]), decay=0.0)
        v = np.array([[2.0, 3.0], [2.0, 3.0]], dtype=np.float32)
        state.ema_update(v, np.array([1, 1]))
        np.testing.assert_allclose(state.codes[1], [2.0, 3.0], atol=1e-6)

    def test_geometric_convergence(self):
        # closed form: counts_k = g^k c0 + (1-g^k) n ; sums_k likewise toward n*v
        g = 0.99
        state = make_state(np.array([[0.0, 0.0], [1.0, -1.0]]), decay=g)
        v = np.array([3.0, 2.0], dtype=np.float32)
        batch = np.tile(v, (4, 1))
        k = 60
        for _ in range(k):
            state.ema_update(batch, np.array([1, 1, 1, 1]))
        c0, s0, n = 1.0, np.array([1.0, -1.0]), 4.0
        counts_k = g ** k * c0 + (1 - g ** k) * n
        sums_k = g ** k * s0 + (1 - g ** k) * n * v
        np.testing.assert_allclose(state.counts[1], counts_k, rtol=1e-4)
        np.testing.assert_allclose(state.codes[1], sums_k / counts_k, rtol=1e-4)

    def test_zero_code_untouched(self):
        state = make_state(np.array([[0.0, 0.0], [1.0, 1.0]]))
        state.ema_update(np.array([[0.2, 0.2]], dtype=np.float32), np.array([0]))
        np.testing.assert_array_equal(state.codes[0], [0.0, 0.0])

    def test_counts_sums_consistency(self):
        rng = np.random.default_rng(4)
        state = make_state(rng.normal(size=(8, 3)))
        for _ in range(10):
            feats = rng.normal(size=(20, 3)).astype(np.float32)
            toks = state.quantize(feats).tokens.flat()
            state.ema_update(feats, toks)
        alive = state.counts > 1e-3
        alive[0] = False
        ratio = state.sums[alive] / state.counts[alive, None]
        np.testing.assert_allclose(state.codes[alive], ratio, atol=1e-5)


class TestFeaturePool:
    def test_fixed_point(self):
        pool = FeaturePool(2, 2, decay=0.5)
        pool.nodes = np.array([[0.0, 0.0], [10.0, 10.0]], dtype=np.float32)
        pool.filled = 2
        batch = np.array([[0, 0], [0, 0], [10, 10], [10, 10]], dtype=np.float32)
        nodes = pool.kmeans_step(batch)
        np.testing.assert_allclose(nodes, [[0, 0], [10, 10]], atol=1e-6)
        np.testing.assert_allclose(pool.nodes, [[0, 0], [10, 10]], atol=1e-6)

    def test_hand_lloyd_iteration(self):
        pool = FeaturePool(2, 2, decay=0.99)
        pool.nodes = np.array([[1.0, 1.0], [9.0, 9.0]], dtype=np.float32)
        pool.filled = 2
        batch = np.array([[0, 0], [10, 10]], dtype=np.float32)
        nodes = pool_kmeans_step(pool, batch)
        np.testing.assert_allclose(nodes, [[0, 0], [10, 10]], atol=1e-6)

    def test_empty_cluster_keeps_node(self):
        pool = FeaturePool(2, 2, decay=0.9)
        pool.nodes = np.array([[0.0, 0.0], [100.0, 100.0]], dtype=np.float32)
        pool.filled = 2
        batch = np.array([[0.1, 0.1], [0.2, -0.1]], dtype=np.float32)
        nodes = pool.kmeans_step(batch)
        np.testing.assert_array_equal(nodes[1], [100.0, 100.0])
        np.testing.assert_array_equal(pool.nodes[1], [100.0, 100.0])

    def test_empty_batch_noop(self):
        pool = FeaturePool(2, 2)
        pool.nodes = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        before = pool.nodes.copy()
        pool.kmeans_step(np.zeros((0, 2), dtype=np.float32))
        np.testing.assert_array_equal(pool.nodes, before)


class TestRevive:
    def _pool(self, nodes, sizes):
        pool = FeaturePool(len(nodes), nodes.shape[1])
        pool.nodes = nodes.astype(np.float32)
        pool.node_sizes = np.asarray(sizes, dtype=np.float32)
        pool.filled = len(nodes)
        return pool

    def test_no_dead_codes_no_change(self):
        state = make_state(np.array([[0.0, 0.0], [1.0, 1.0]]), dead_threshold=0.5)
        pool = self._pool(np.array([[5.0, 5.0]]), [10.0])
        before = state.codes.copy()
        assert revive_dead_codes(state, pool) == 0
        np.testing.assert_array_equal(state.codes, before)

    def test_replaced_by_nearest_eligible(self):
        state = make_state(np.array([[0.0, 0.0], [0.1, 0.1]]), dead_threshold=1.0)
        state.counts[1] = 0.2  # dead
        pool = self._pool(np.array([[0.0, 0.0], [5.0, 5.0]]), [3.0, 3.0])
        assert revive_dead_codes(state, pool) == 1
        np.testing.assert_array_equal(state.codes[1], [0.0, 0.0])
        assert state.counts[1] == 1.0

    def test_zero_code_never_replaced(self):
        state = make_state(np.array([[0.0, 0.0], [1.0, 1.0]]), dead_threshold=1.0)
        state.counts[0] = 0.0
        pool = self._pool(np.array([[7.0, 7.0]]), [9.0])
        revive_dead_codes(state, pool)
        np.testing.assert_array_equal(state.codes[0], [0.0, 0.0])

    def test_ineligible_pool_warns_and_leaves(self, caplog):
        state = make_state(np.array([[0.0, 0.0], [1.0, 1.0]]), dead_threshold=1.0)
        state.counts[1] = 0.0
        pool = self._pool(np.array([[3.0, 3.0]]), [0.5])  # below threshold
        before = state.codes.copy()
        with caplog.at_level(logging.WARNING, logger="vqnerv.codebook"):
            assert revive_dead_codes(state, pool) == 0
        np.testing.assert_array_equal(state.codes, before)
        assert any("no eligible pool node" in r.message for r in caplog.records)

    def test_post_revive_no_dead_nonzero_codes(self):
        rng = np.random.default_rng(5)
        state = make_state(rng.normal(size=(8, 2)), dead_threshold=1.0)
        state.counts[1:] = 0.1
        pool = self._pool(rng.normal(size=(8, 2)), np.full(8, 5.0))
        revive_dead_codes(state, pool)
        assert np.all(state.counts[1:] >= 1.0)


class TestUsage:
    def test_all_hit(self):
        state = make_state(np.eye(4, 2))
        state.usage_counter[:] = 1
        state.usage_samples = 4
        assert usage(state) == 1.0

    def test_single_code(self):
        state = make_state(np.abs(np.random.default_rng(6).normal(size=(8, 2))) + 1)
        state.quantize(np.tile(state.codes[3], (10, 1)))
        assert usage(state) == pytest.approx(1 / 8)

    def test_uniform_codebook_samples(self):
        rng = np.random.default_rng(7)
        state = make_state(rng.normal(size=(16, 4)) * 3)
        for i in range(16):
            state.quantize(state.codes[i][None, :])
        assert usage(state) == pytest.approx(1.0)

    def test_no_data_flag(self):
        state = make_state(np.zeros((4, 2)))
        assert state.usage_samples == 0
        assert usage(state) == 0.0

    def test_reset(self):
        state = make_state(np.abs(np.random.default_rng(8).normal(size=(4, 2))) + 1)
        state.quantize(np.zeros((3, 2), dtype=np.float32))
        state.reset_usage()
        assert state.usage_samples == 0


class TestStraightThroughOp:
    def test_value_and_gradient(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(4, 2, 2)).astype(np.float32), requires_grad=True)
        z = rng.normal(size=(4, 2, 2)).astype(np.float32)
        out = straight_through(x, z)
        np.testing.assert_array_equal(out.data, z)
        (out * 2.0).sum().backward()
        np.testing.assert_allclose(x.grad, np.full_like(x.data, 2.0))


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(10)
        state = make_state(rng.normal(size=(6, 3)))
        blob = state.serialize()
        back = CodebookState.deserialize(blob)
        assert back.size == 6 and back.dim == 3
        np.testing.assert_array_equal(back.codes, state.codes)

    def test_header_little_endian(self):
        state = make_state(np.zeros((2, 5)))
        blob = state.serialize()
        assert blob[:4] == (2).to_bytes(4, "little")
        assert blob[4:8] == (5).to_bytes(4, "little")

    def test_corrupt_rejected(self):
        with pytest.raises(IntegrityError):
            CodebookState.deserialize(b"\x01\x00")


class TestShallowOptimizationDynamics:
    def test_separated_gaussians_property(self):
        # k=4 well-separated clusters, N=16 codes, 200 steps of the full loop
        rng = np.random.default_rng(11)
        k, n_codes, dim = 4, 16, 4
        centers = rng.normal(size=(k, dim)).astype(np.float32) * 6
        cfg = ShallowCodebookConfig(size=n_codes, dim=dim, decay=0.95, dead_threshold=1.0)
        trainer = ShallowCodebookTrainer(cfg, rng, fill_codes=False)
        for _ in range(200):
            assign = rng.integers(0, k, size=64)
            batch = centers[assign] + rng.normal(scale=0.1, size=(64, dim)).astype(np.float32)
            res = trainer.state.quantize(batch.astype(np.float32))
            trainer.update(batch.astype(np.float32), res.tokens)
        trainer.state.reset_usage()
        for _ in range(20):
            assign = rng.integers(0, k, size=64)
            batch = centers[assign] + rng.normal(scale=0.1, size=(64, dim)).astype(np.float32)
            res = trainer.state.quantize(batch.astype(np.float32))
        assert usage(trainer.state) >= k / n_codes
        # within-cluster quantization error below between-cluster distance
        d_between = min(np.linalg.norm(centers[i] - centers[j])
                        for i in range(k) for j in range(i + 1, k))
        assert np.sqrt(res.distances.max()) < d_between
