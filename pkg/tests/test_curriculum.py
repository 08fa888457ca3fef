import math

import numpy as np
import pytest

from dynmem import curriculum as cur
from dynmem.curriculum import (
    CurriculumConfig,
    LossBundle,
    adaptive_weight,
    delta_loss,
    flow_loss,
    make_plan,
    noise_sample,
    sigma_batch,
)
from dynmem.framegraph import FrameGraph, GraphNode
from dynmem.numerics import Tensor


def graph_with_window(n_chunks, start, end):
    nodes = []
    for i in range(n_chunks):
        if i == start - 1:
            nodes.append(GraphNode(i, "anchor", protected=True))
        elif start <= i <= end:
            nodes.append(GraphNode(i, "interruption"))
        elif i == end + 1:
            nodes.append(GraphNode(i, "recovery"))
        else:
            nodes.append(GraphNode(i, "plain"))
    edges = [(i, i + 1) for i in range(n_chunks - 1)]
    graph = FrameGraph(nodes, edges, [(end + 1, start - 1)], (start, end))
    graph.validate()
    return graph


def plain_graph(n_chunks):
    return FrameGraph(
        [GraphNode(i, "plain") for i in range(n_chunks)],
        [(i, i + 1) for i in range(n_chunks - 1)],
    )


class FixedNoise:
    """Stands in for a Generator, returning a constant field."""

    def __init__(self, value):
        self.value = value

    def standard_normal(self, shape):
        return np.full(shape, self.value)


class TestNoiseSample:
    def test_sigma_zero_endpoint(self):
        x0 = np.ones((2, 3))
        x_t, u_t = noise_sample(x0, 0.0, FixedNoise(2.0))
        np.testing.assert_array_equal(x_t, x0)
        np.testing.assert_array_equal(u_t, np.full((2, 3), 1.0))

    def test_sigma_one_endpoint(self):
        x0 = np.ones((2, 3))
        x_t, u_t = noise_sample(x0, 1.0, FixedNoise(2.0))
        np.testing.assert_array_equal(x_t, np.full((2, 3), 2.0))

    def test_halfway_scalar_arithmetic(self):
        x_t, u_t = noise_sample(np.zeros(1), 0.5, FixedNoise(2.0))
        assert x_t[0] == 1.0 and u_t[0] == 2.0

    def test_sigma_out_of_range(self):
        with pytest.raises(cur.CurriculumError):
            noise_sample(np.zeros(1), 1.5, FixedNoise(0.0))

    def test_reconstruction_identity(self):
        # x_t - sigma * u_t recovers x0 exactly under the interpolant.
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(3, 4))
        x_t, u_t = noise_sample(x0, 0.7, rng)
        np.testing.assert_allclose(x_t - 0.7 * u_t, x0, atol=1e-12)


class TestFlowLoss:
    def test_exact_prediction_zero(self):
        u = np.random.default_rng(1).normal(size=(4, 3, 2))
        loss = flow_loss(Tensor(u), u, np.ones(4))
        assert float(loss.data) == 0.0

    def test_empty_mask_rejected(self):
        with pytest.raises(cur.CurriculumError):
            flow_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 3)), np.zeros(2))

    def test_half_mask_matches_slicing_oracle(self):
        rng = np.random.default_rng(2)
        pred = rng.normal(size=(4, 5, 2))
        u = rng.normal(size=(4, 5, 2))
        mask = np.array([1.0, 0.0, 1.0, 0.0])
        got = float(flow_loss(Tensor(pred), u, mask).data)
        expect = np.mean((pred[[0, 2]] - u[[0, 2]]) ** 2)
        assert abs(got - expect) < 1e-12

    def test_prefix_predictions_do_not_leak(self):
        # Zeroing the prediction on masked-out chunks leaves the loss unchanged.
        rng = np.random.default_rng(3)
        pred = rng.normal(size=(5, 4))
        u = rng.normal(size=(5, 4))
        mask = np.array([0.0, 0.0, 0.0, 1.0, 1.0])
        before = float(flow_loss(Tensor(pred), u, mask).data)
        pred[:3] = 0.0
        after = float(flow_loss(Tensor(pred), u, mask).data)
        assert before == after


class TestDeltaLoss:
    def test_exact_reconstruction_zero(self):
        x0 = np.random.default_rng(4).normal(size=(2, 3, 4))
        assert float(delta_loss(Tensor(x0.copy()), x0).data) == 0.0

    def test_per_frame_constant_offset_invariant(self):
        x0 = np.random.default_rng(5).normal(size=(2, 3, 4))
        shifted = x0 + 7.25  # same constant on every frame: deltas unchanged
        assert float(delta_loss(Tensor(shifted), x0).data) < 1e-18

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(6)
        x_hat = rng.normal(size=(3, 4, 5))
        x0 = rng.normal(size=(3, 4, 5))
        got = float(delta_loss(Tensor(x_hat), x0).data)
        d_hat = x_hat[:, 1:] - x_hat[:, :-1]
        d_true = x0[:, 1:] - x0[:, :-1]
        expect = float(np.mean((d_hat - d_true) ** 2))
        assert abs(got - expect) < 1e-12

    def test_single_frame_rejected(self):
        with pytest.raises(cur.CurriculumError):
            delta_loss(Tensor(np.zeros((2, 1, 3))), np.zeros((2, 1, 3)))


class TestAdaptiveWeight:
    def test_zero_variance_gives_alpha(self):
        assert adaptive_weight(0.0, iteration=10_000) == 0.2

    def test_warmup_gate(self):
        assert adaptive_weight(0.0, iteration=199, warmup=200) == 0.0
        assert adaptive_weight(0.0, iteration=200, warmup=200) == 0.2

    def test_formula_value(self):
        got = adaptive_weight(0.2, iteration=10_000)
        assert abs(got - 0.2 * math.exp(-1.0)) < 1e-9

    def test_monotone_decreasing(self):
        values = [adaptive_weight(s, 10_000) for s in np.linspace(0, 2, 20)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_negative_variance_rejected(self):
        with pytest.raises(cur.CurriculumError):
            adaptive_weight(-0.1, 10_000)


class TestSigmaBatch:
    def test_static_batch_zero(self):
        x = np.ones((2, 4, 3, 2))
        assert sigma_batch(x) == 0.0

    def test_alternating_unit_deltas(self):
        x = np.array([0.0, 1.0, 0.0, 1.0, 0.0]).reshape(1, 5, 1)
        assert sigma_batch(x) == 1.0

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 3, 4, 2))  # (batch, chunks, fpc, tokens, dim)
        got = sigma_batch(x)
        flat = x.reshape(2, 9, 4, 2)
        deltas = (flat[:, 1:] - flat[:, :-1]).ravel()
        mean = deltas.sum() / deltas.size
        var = ((deltas - mean) ** 2).sum() / deltas.size
        assert abs(got - var) < 1e-12

    def test_single_frame_rejected(self):
        with pytest.raises(cur.CurriculumError):
            sigma_batch(np.zeros((1, 1, 4)))


class TestMakePlan:
    def test_all_history_full_mask(self):
        rng = np.random.default_rng(8)
        plan = make_plan(plain_graph(7), "all_history", rng)
        assert plan.loss_mask.sum() == 7
        assert len(set(np.round(plan.sigmas, 12))) > 1  # independent draws
        assert plan.drop_set == frozenset()

    def test_node_drop_example_graph(self):
        rng = np.random.default_rng(9)
        plan = make_plan(graph_with_window(7, 2, 4), "node_drop", rng)
        assert plan.drop_set == frozenset({2, 3, 4})
        assert 1 not in plan.drop_set
        assert plan.loss_mask[5] == 1 and plan.loss_mask[6] == 1
        assert plan.loss_mask[:5].sum() == 0

    def test_node_drop_requires_interruption(self):
        with pytest.raises(cur.CurriculumError):
            make_plan(plain_graph(7), "node_drop", np.random.default_rng(10))

    def test_noisy_memory_supervises_one_chunk(self):
        rng = np.random.default_rng(11)
        plan = make_plan(plain_graph(7), "noisy_memory", rng)
        assert plan.loss_mask.sum() == 1
        current = int(np.argmax(plan.loss_mask))
        history = plan.sigmas[:current]
        assert (history >= 0.8).all()

    def test_v2v_frontier_masks_suffix_after_degradation(self):
        rng = np.random.default_rng(12)
        plan = make_plan(graph_with_window(7, 2, 4), "v2v_frontier", rng)
        np.testing.assert_array_equal(plan.loss_mask, [0, 0, 0, 0, 0, 1, 1])
        np.testing.assert_array_equal(plan.sigmas[:5], np.zeros(5))

    def test_reference_cache_sets_prepend(self):
        rng = np.random.default_rng(13)
        cfg = CurriculumConfig()
        plan = make_plan(graph_with_window(7, 2, 4), "reference_cache", rng, cfg)
        refs, gap = plan.cache_prepend
        assert refs == (0,)
        assert cfg.gap_min <= gap <= cfg.gap_max
        assert gap >= len(refs)

    def test_anchor_protection_over_random_graphs(self):
        rng = np.random.default_rng(14)
        for _ in range(1000):
            n = int(rng.integers(4, 10))
            start = int(rng.integers(1, n - 2))
            end = int(rng.integers(start, n - 2))
            graph = graph_with_window(n, start, end)
            plan = make_plan(graph, "node_drop", rng)
            protected = {node.chunk_id for node in graph.nodes if node.protected}
            assert not protected & set(plan.drop_set)

    def test_unknown_regime_rejected(self):
        with pytest.raises(cur.CurriculumError):
            make_plan(plain_graph(3), "dreaming", np.random.default_rng(0))


def test_loss_bundle_total_and_validation():
    bundle = LossBundle(flow=1.0, delta=0.5, lam=0.2)
    assert abs(bundle.total - 1.1) < 1e-12
    bundle.validate()
    with pytest.raises(cur.CurriculumError):
        LossBundle(flow=float("nan"), delta=0.0, lam=0.0).validate()
