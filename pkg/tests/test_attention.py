import dataclasses
import math

import numpy as np
import pytest

from dynmem import attention as att
from dynmem import numerics as nm
from dynmem.attention import (
    AttentionConfig,
    TokenGeometry,
    camera_phase_offset,
    chunk_causal_mask,
    init_attention_params,
    init_phase_net,
    pm_attention,
    rotary_phases,
    token_geometry,
)
from dynmem.geometry import CameraPose, rotation_about_y
from dynmem.numerics import Tape, Tensor


SMALL = AttentionConfig(heads=2, head_dim=8, temporal_bands=2, row_bands=1, col_bands=1)


def make_geo(n_frames, rng, grid=(2, 2), gap_after=None, shift=0):
    positions = np.arange(n_frames)
    if gap_after is not None:
        positions = positions + np.where(np.arange(n_frames) >= gap_after, 9, 0)
    poses = [
        CameraPose(rotation_about_y(0.1 * i), rng.normal(size=3) * 0.2, 1.0, 1.0)
        for i in range(n_frames)
    ]
    return token_geometry(positions + shift, poses, *grid)


def make_qkv(geo, cfg, rng, dtype=np.float64):
    t = len(geo)
    return tuple(
        Tensor(rng.normal(size=(t, cfg.inner_dim)).astype(dtype)) for _ in range(3)
    )


class TestRotaryPhases:
    def test_position_zero_all_zero(self):
        np.testing.assert_array_equal(rotary_phases([0], 5), np.zeros((1, 5)))

    def test_single_band_linear(self):
        got = rotary_phases([0, 1, 2, 3], 1)
        np.testing.assert_allclose(got[:, 0], [0, 1, 2, 3], atol=1e-12)

    def test_gap_preserved(self):
        positions = [0, 1, 2, 12, 13]
        got = rotary_phases(positions, 3)
        freqs = att.band_frequencies(3)
        expect = np.asarray(positions, dtype=float)[:, None] * freqs[None, :]
        np.testing.assert_allclose(got, expect, atol=1e-12)

    def test_zero_bands_rejected(self):
        with pytest.raises(att.AttentionError):
            rotary_phases([0, 1], 0)


class TestCameraPhaseOffset:
    def test_zero_at_initialization(self):
        rng = np.random.default_rng(0)
        net = init_phase_net(4, rng)
        c = rng.normal(size=(6, 14))
        np.testing.assert_array_equal(camera_phase_offset(net, c).data, np.zeros((6, 4)))

    def test_zero_final_layer_kills_hidden(self):
        rng = np.random.default_rng(1)
        net = init_phase_net(4, rng)
        net.b1.data[:] = rng.normal(size=net.b1.shape)
        out = camera_phase_offset(net, np.zeros((1, 14)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_nonzero_after_one_gradient_step(self):
        rng = np.random.default_rng(2)
        net = init_phase_net(4, rng)
        c = rng.normal(size=(3, 14))
        weights = Tensor(rng.normal(size=(3, 4)))
        with Tape() as tape:
            loss = nm.sum_(nm.mul(camera_phase_offset(net, c), weights))
        params = [net.w2, net.b2]
        grads = nm.grad(loss, params, tape)
        for p, g in zip(params, grads):
            p.data -= 0.1 * g
        delta = camera_phase_offset(net, c).data
        assert np.linalg.norm(delta) > 1e-6


class TestApplyRotary:
    def test_zero_angle_identity(self):
        x = Tensor(np.arange(8.0).reshape(2, 4))
        out = att.apply_rotary(x, np.zeros((2, 2)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_pi_flips_pair(self):
        out = att.apply_rotary(Tensor([[1.0, 0.0]]), np.array([[math.pi]]))
        np.testing.assert_allclose(out.data, [[-1.0, 0.0]], atol=1e-12)

    def test_norm_preserved(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(5, 12)))
        out = att.apply_rotary(x, rng.normal(size=(5, 6)) * 3)
        np.testing.assert_allclose(
            np.linalg.norm(out.data, axis=-1),
            np.linalg.norm(x.data, axis=-1),
            atol=1e-6,
        )


class TestChunkCausalMask:
    def test_single_chunk_all_allowed(self):
        assert chunk_causal_mask(1, 3).all()

    def test_two_chunks_one_token(self):
        np.testing.assert_array_equal(
            chunk_causal_mask(2, 1), np.array([[True, False], [True, True]])
        )

    def test_matches_nested_loop_oracle(self):
        num_chunks, tokens = 3, 2
        got = chunk_causal_mask(num_chunks, tokens)
        n = num_chunks * tokens
        expect = np.zeros((n, n), dtype=bool)
        for i in range(n):
            for j in range(n):
                expect[i, j] = (j // tokens) <= (i // tokens)
        np.testing.assert_array_equal(got, expect)

    def test_zero_counts_rejected(self):
        with pytest.raises(att.AttentionError):
            chunk_causal_mask(0, 3)


class TestPmAttention:
    @pytest.mark.parametrize("mode", ["full", "qk_only", "vo_only"])
    def test_zero_init_equivalence(self, mode):
        rng = np.random.default_rng(4)
        for trial in range(5):
            geo = make_geo(4, rng)
            cfg = dataclasses.replace(SMALL, mode=mode)
            params = init_attention_params(cfg, 8, rng)
            q, k, v = make_qkv(geo, cfg, rng)
            mask = chunk_causal_mask(4, 4)
            out = pm_attention(q, k, v, geo, geo, mask, cfg, params)
            ref = pm_attention(
                q, k, v, geo, geo, mask, dataclasses.replace(cfg, mode="vanilla"), params
            )
            assert np.abs(out.data - ref.data).max() < 1e-6

    def test_single_token_is_projected_value(self):
        rng = np.random.default_rng(5)
        geo = token_geometry([0], [CameraPose.identity()], 1, 1)
        params = init_attention_params(SMALL, 8, rng)
        q, k, v = make_qkv(geo, SMALL, rng)
        out = pm_attention(q, k, v, geo, geo, np.ones((1, 1), bool), SMALL, params)
        expect = v.data @ params.w_out.data + params.b_out.data
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_position_shift_leaves_logits_unchanged(self):
        rng = np.random.default_rng(6)
        cfg = SMALL
        params = init_attention_params(cfg, 8, rng)
        params.phase_net.w2.data[:] = rng.normal(size=params.phase_net.w2.shape) * 0.1
        mask = chunk_causal_mask(3, 4)
        outs = []
        probs = []
        for shift in (0, 57):
            rng_geo = np.random.default_rng(7)
            geo = make_geo(3, rng_geo, shift=shift)
            rng_x = np.random.default_rng(8)
            q, k, v = make_qkv(geo, cfg, rng_x)
            cap = []
            outs.append(pm_attention(q, k, v, geo, geo, mask, cfg, params, capture=cap).data)
            probs.append(cap[0])
        np.testing.assert_allclose(probs[0], probs[1], atol=1e-6)
        np.testing.assert_allclose(outs[0], outs[1], atol=1e-6)

    def test_causality_bitwise(self):
        rng = np.random.default_rng(9)
        geo = make_geo(4, rng)
        params = init_attention_params(SMALL, 8, rng)
        q, k, v = make_qkv(geo, SMALL, rng)
        mask = chunk_causal_mask(4, 4)
        base = pm_attention(q, k, v, geo, geo, mask, SMALL, params).data.copy()
        # Perturb every token of the last chunk (tokens 12..15).
        for t in (q, k, v):
            t.data[12:] += rng.normal(size=t.data[12:].shape)
        bumped = pm_attention(q, k, v, geo, geo, mask, SMALL, params).data
        assert (base[:12] == bumped[:12]).all()

    def test_rows_sum_to_one_over_unmasked(self):
        rng = np.random.default_rng(10)
        geo = make_geo(3, rng)
        params = init_attention_params(SMALL, 8, rng)
        q, k, v = make_qkv(geo, SMALL, rng)
        mask = chunk_causal_mask(3, 4)
        cap = []
        pm_attention(q, k, v, geo, geo, mask, SMALL, params, capture=cap)
        p = cap[0]
        np.testing.assert_allclose(p.sum(axis=-1), np.ones(p.shape[:2]), atol=1e-6)
        assert (p[:, ~mask] == 0).all()

    @pytest.mark.parametrize("mode", ["full", "qk_only", "vo_only", "dual", "vanilla"])
    def test_gradients_match_finite_differences(self, mode):
        rng = np.random.default_rng(11)
        cfg = dataclasses.replace(SMALL, mode=mode)
        geo = make_geo(2, rng)
        params = init_attention_params(cfg, 8, rng)
        # Move residuals/phase net off their zero init so their gradients are
        # probed at a generic point.
        for _, t in params.tensors("a"):
            t.data += rng.normal(size=t.shape) * 0.05
        q, k, v = make_qkv(geo, cfg, rng)
        mask = chunk_causal_mask(2, 4)
        weights = rng.normal(size=(len(geo), 8))

        def loss_value():
            out = pm_attention(q, k, v, geo, geo, mask, cfg, params)
            return float(nm.sum_(nm.mul(out, Tensor(weights))).data)

        leaves = [("q", q), ("k", k), ("v", v)] + list(params.tensors("p"))
        with Tape() as tape:
            out = pm_attention(q, k, v, geo, geo, mask, cfg, params)
            loss = nm.sum_(nm.mul(out, Tensor(weights)))
        grads = nm.grad(loss, [t for _, t in leaves], tape)
        for (name, leaf), g in zip(leaves, grads):
            idx = tuple(rng.integers(0, s) for s in leaf.shape)
            fd = nm.finite_difference(loss_value, leaf.data, idx)
            err = abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), 1e-6)
            assert err < 1e-4, f"{mode}/{name}[{idx}]: {g[idx]} vs {fd}"

    def test_mask_shape_mismatch_rejected(self):
        rng = np.random.default_rng(12)
        geo = make_geo(2, rng)
        params = init_attention_params(SMALL, 8, rng)
        q, k, v = make_qkv(geo, SMALL, rng)
        with pytest.raises(att.AttentionError):
            pm_attention(q, k, v, geo, geo, np.ones((2, 2), bool), SMALL, params)


def test_config_band_split_validated():
    with pytest.raises(att.AttentionError):
        AttentionConfig(head_dim=8, temporal_bands=4, row_bands=1, col_bands=1)


def test_token_geometry_concat_offsets_frames():
    rng = np.random.default_rng(13)
    a = make_geo(2, rng)
    b = make_geo(3, rng, shift=10)
    both = TokenGeometry.concat([a, b])
    assert len(both) == len(a) + len(b)
    np.testing.assert_array_equal(both.frame_pos[: len(a)], a.frame_pos)
    np.testing.assert_array_equal(both.descriptors[len(a) :], b.descriptors)
