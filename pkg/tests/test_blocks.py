"""Window position features, norm/MLP primitives, and the dual-scale block."""

import numpy as np
import pytest

from factories import make_dsb, make_mlp, make_test_grid, single_step_reference
from oracles import central_diff, max_rel_err
from vxmamba.blocks import (
    DSBParams,
    SequenceTensor,
    WindowSpec,
    dsb_backward,
    dsb_forward,
    iwe_embed,
    iwe_features,
    layer_norm_bwd,
    layer_norm_fwd,
    mlp_bwd,
    mlp_fwd,
    serialize_sequence,
)
from vxmamba.errors import ContractError, RangeError, ShapeError
from vxmamba.ssm import selective_scan_fwd
from vxmamba.voxelgrid import SparseVoxelGrid


class TestWindowSpec:
    def test_shift_is_half_window(self):
        assert WindowSpec(8, 4).shift == (4, 2)
        assert WindowSpec(1, 1).shift == (0, 0)

    def test_degenerate_rejected(self):
        with pytest.raises(ContractError):
            WindowSpec(0, 4)


class TestIWEFeatures:
    def test_unshifted_example(self):
        raw = iwe_features(np.array([[10, 5, 2]]), WindowSpec(8, 4))
        assert raw[0, :5].tolist() == [2, 1, 1, 2, 1]

    def test_shifted_example(self):
        # shift (4, 2) moves the voxel to (14, 7) before the split
        raw = iwe_features(np.array([[10, 5, 2]]), WindowSpec(8, 4))
        assert raw[0, 5:].tolist() == [2, 1, 1, 6, 3]

    def test_unit_window_degenerates_to_coords(self):
        coords = np.array([[3, 7, 1], [0, 0, 0]])
        raw = iwe_features(coords, WindowSpec(1, 1))
        np.testing.assert_array_equal(raw[:, 1], coords[:, 0])
        np.testing.assert_array_equal(raw[:, 2], coords[:, 1])
        assert not raw[:, 3].any() and not raw[:, 4].any()

    def test_negative_coords_rejected(self):
        with pytest.raises(RangeError):
            iwe_features(np.array([[-1, 0, 0]]), WindowSpec(4, 4))

    def test_integer_valued_floats(self):
        rng = np.random.default_rng(0)
        coords = rng.integers(0, 50, (30, 3))
        raw = iwe_features(coords, WindowSpec(8, 4))
        assert raw.dtype == np.float64
        np.testing.assert_array_equal(raw, np.round(raw))


class TestIWEEmbed:
    def test_zero_weights_give_bias(self):
        rng = np.random.default_rng(1)
        mlp = make_mlp(rng, hidden=4, d_out=4, zero=True)
        mlp.b2[:] = [1.0, -2.0, 3.0, 0.5]
        raw = iwe_features(rng.integers(0, 9, (6, 3)), WindowSpec(4, 4))
        out = iwe_embed(raw, mlp)
        np.testing.assert_array_equal(out, np.tile(mlp.b2, (6, 1)))

    def test_identical_coords_identical_rows(self):
        rng = np.random.default_rng(2)
        mlp = make_mlp(rng)
        coords = np.array([[3, 4, 1], [3, 4, 1], [5, 5, 0]])
        out = iwe_embed(iwe_features(coords, WindowSpec(4, 4)), mlp)
        np.testing.assert_array_equal(out[0], out[1])
        assert not np.array_equal(out[0], out[2])

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        mlp = make_mlp(rng)
        raw = iwe_features(rng.integers(0, 9, (4, 3)), WindowSpec(4, 4))
        grad_like = rng.normal(size=(4, 4))

        def loss():
            return float(np.sum(mlp_fwd(raw, mlp)[0] * grad_like))

        _, cache = mlp_fwd(raw, mlp)
        grad_x, grads = mlp_bwd(cache, grad_like)
        assert max_rel_err(grad_x, central_diff(loss, raw)) < 1e-6
        for name, tensor in mlp.tensors().items():
            assert max_rel_err(grads[name], central_diff(loss, tensor)) < 1e-6

    def test_wrong_width_rejected(self):
        mlp = make_mlp(np.random.default_rng(0))
        with pytest.raises(ShapeError):
            iwe_embed(np.zeros((3, 9)), mlp)


class TestLayerNorm:
    def test_constant_row_returns_bias(self):
        gain = np.array([2.0, 3.0, 4.0])
        bias = np.array([0.5, -0.5, 1.5])
        out, _ = layer_norm_fwd(np.full((2, 3), 7.0), gain, bias)
        np.testing.assert_allclose(out, np.tile(bias, (2, 1)), atol=1e-12)

    def test_normalized_moments(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 16)) * 3 + 2
        out, (x_hat, inv, _) = layer_norm_fwd(x, np.ones(16), np.zeros(16))
        np.testing.assert_allclose(x_hat.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(x_hat.var(axis=1), 1, rtol=1e-4)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 5))
        gain = rng.normal(size=5)
        bias = rng.normal(size=5)
        grad_like = rng.normal(size=(3, 5))

        def loss():
            return float(np.sum(layer_norm_fwd(x, gain, bias)[0] * grad_like))

        _, cache = layer_norm_fwd(x, gain, bias)
        grad_x, grad_gain, grad_bias = layer_norm_bwd(cache, grad_like)
        assert max_rel_err(grad_x, central_diff(loss, x)) < 1e-6
        assert max_rel_err(grad_gain, central_diff(loss, gain)) < 1e-6
        assert max_rel_err(grad_bias, central_diff(loss, bias)) < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            layer_norm_fwd(np.zeros((2, 3)), np.ones(4), np.zeros(4))


class TestSequenceTensor:
    def test_serialize_sequence_orders_keys(self):
        rng = np.random.default_rng(6)
        grid = make_test_grid(rng)
        seq = serialize_sequence(grid, "hilbert", 3)
        assert (np.diff(seq.keys.astype(np.int64)) > 0).all()
        assert len(seq) == len(grid)

    def test_misaligned_lengths_rejected(self):
        with pytest.raises(ShapeError):
            SequenceTensor(features=np.zeros((3, 4)),
                           coords=np.zeros((2, 3), dtype=np.int64),
                           keys=np.zeros(3, dtype=np.uint64), spec=None)

    def test_descending_keys_rejected(self):
        with pytest.raises(ContractError):
            SequenceTensor(features=np.zeros((2, 4)),
                           coords=np.zeros((2, 3), dtype=np.int64),
                           keys=np.array([5, 3], dtype=np.uint64), spec=None)


def build_case(seed, n_voxels=20, d_model=4, stride=2, **dsb_kw):
    rng = np.random.default_rng(seed)
    grid = make_test_grid(rng, n_voxels=n_voxels, d_model=d_model)
    seq = serialize_sequence(grid, "hilbert", 3)
    params = make_dsb(rng, d_model=d_model, stride=stride, **dsb_kw)
    return rng, seq, params


class TestDSBForward:
    def test_zeroed_learned_parts_give_identity(self):
        _, seq, params = build_case(7, zero_learned=True)
        out, _ = dsb_forward(seq, params, "hilbert", 3)
        np.testing.assert_array_equal(out.features, seq.features)

    def test_coords_and_keys_preserved(self):
        _, seq, params = build_case(8)
        out, _ = dsb_forward(seq, params, "hilbert", 3)
        np.testing.assert_array_equal(out.coords, seq.coords)
        np.testing.assert_array_equal(out.keys, seq.keys)
        assert out.spec is seq.spec

    def test_stride_one_degenerates_to_two_directions(self):
        # with stride 1 the coarse branch is the reversed scan over the
        # same voxels; down/up reduce to a permutation round trip
        _, seq, params = build_case(9, stride=1)
        out, _ = dsb_forward(seq, params, "hilbert", 3)
        from vxmamba.blocks import layer_norm_fwd as ln
        emb_f = iwe_embed(iwe_features(seq.coords, params.win),
                          params.iwe_fine)
        fine, _ = ln(selective_scan_fwd(seq.features + emb_f,
                                        params.fwd_ssm, "forward")[0],
                     params.ln_f_gain, params.ln_f_bias)
        emb_b = iwe_embed(iwe_features(seq.coords, params.win),
                          params.iwe_coarse)
        coarse, _ = ln(selective_scan_fwd(seq.features + emb_b,
                                          params.bwd_ssm, "reversed")[0],
                       params.ln_b_gain, params.ln_b_bias)
        want = seq.features + fine + coarse
        np.testing.assert_array_equal(out.features, want)

    def test_single_voxel_composes_closed_forms(self):
        rng = np.random.default_rng(10)
        grid = make_test_grid(rng, n_voxels=1)
        seq = serialize_sequence(grid, "hilbert", 3)
        params = make_dsb(rng, stride=2)
        out, _ = dsb_forward(seq, params, "hilbert", 3)

        def ln_row(v, gain, bias):
            mu = v.mean()
            var = ((v - mu) ** 2).mean()
            return (v - mu) / np.sqrt(var + 1e-5) * gain + bias

        emb_f = iwe_embed(iwe_features(seq.coords, params.win),
                          params.iwe_fine)
        fine = ln_row(single_step_reference(params.fwd_ssm,
                                            (seq.features + emb_f)[0]),
                      params.ln_f_gain, params.ln_f_bias)
        coarse_coords = seq.coords // np.array([2, 2, 1])
        emb_b = iwe_embed(iwe_features(coarse_coords, params.win),
                          params.iwe_coarse)
        coarse = ln_row(single_step_reference(params.bwd_ssm,
                                              (seq.features + emb_b)[0]),
                        params.ln_b_gain, params.ln_b_bias)
        want = seq.features[0] + fine + coarse
        np.testing.assert_allclose(out.features[0], want, rtol=1e-10)

    def test_function_of_voxel_set_not_input_order(self):
        rng, _, params = build_case(11)
        grid = make_test_grid(np.random.default_rng(99))
        perm = rng.permutation(len(grid))
        shuffled = SparseVoxelGrid(coords=grid.coords[perm],
                                   features=grid.features[perm],
                                   spec=grid.spec)
        out1, _ = dsb_forward(serialize_sequence(grid, "hilbert", 3),
                              params, "hilbert", 3)
        out2, _ = dsb_forward(serialize_sequence(shuffled, "hilbert", 3),
                              params, "hilbert", 3)
        np.testing.assert_array_equal(out1.features, out2.features)
        np.testing.assert_array_equal(out1.coords, out2.coords)

    def test_shared_iwe_gives_identical_embeddings(self):
        rng = np.random.default_rng(12)
        shared = make_mlp(rng)
        coords = rng.integers(0, 8, (10, 3))
        raw = iwe_features(coords, WindowSpec(4, 4))
        np.testing.assert_array_equal(iwe_embed(raw, shared),
                                      iwe_embed(raw, shared))

    def test_scaled_coarse_window(self):
        _, seq, params = build_case(13, stride=2, scale_win=True)
        assert params.coarse_window() == WindowSpec(8, 8)
        out, _ = dsb_forward(seq, params, "hilbert", 3)
        assert np.isfinite(out.features).all()

    def test_empty_sequence_rejected(self):
        _, seq, params = build_case(14)
        empty = SequenceTensor(features=np.zeros((0, 4)),
                               coords=np.zeros((0, 3), dtype=np.int64),
                               keys=np.zeros(0, dtype=np.uint64),
                               spec=seq.spec)
        with pytest.raises(ContractError):
            dsb_forward(empty, params, "hilbert", 3)

    def test_width_mismatch_rejected(self):
        _, seq, params = build_case(15)
        bad = SequenceTensor(features=np.zeros((len(seq), 6)),
                             coords=seq.coords, keys=seq.keys, spec=seq.spec)
        with pytest.raises(ContractError):
            dsb_forward(bad, params, "hilbert", 3)

    def test_out_of_extent_coords_rejected(self):
        _, seq, params = build_case(16)
        coords = seq.coords.copy()
        coords[0] = (100, 0, 0)
        keys = seq.keys.copy()
        bad = SequenceTensor(features=seq.features, coords=coords,
                             keys=keys, spec=seq.spec)
        with pytest.raises(ContractError):
            dsb_forward(bad, params, "hilbert", 3)


class TestGroupedMode:
    def test_group_size_covering_sequence_matches_ungrouped(self):
        _, seq, params = build_case(30)
        plain, _ = dsb_forward(seq, params, "hilbert", 3)
        grouped, _ = dsb_forward(seq, params, "hilbert", 3,
                                 group_size=len(seq) + 5)
        np.testing.assert_array_equal(plain.features, grouped.features)

    def test_small_groups_change_the_output(self):
        _, seq, params = build_case(31)
        plain, _ = dsb_forward(seq, params, "hilbert", 3)
        grouped, _ = dsb_forward(seq, params, "hilbert", 3, group_size=4)
        assert not np.array_equal(plain.features, grouped.features)

    def test_groups_are_independent(self):
        # zero the coarse branch so only the fine causal scan is active,
        # then perturbing one group must leave every other group unchanged
        rng, seq, params = build_case(32, n_voxels=12, zero_learned=False)
        params.ln_b_gain[:] = 0.0
        params.ln_b_bias[:] = 0.0
        base, _ = dsb_forward(seq, params, "hilbert", 3, group_size=4)
        bumped_feats = seq.features.copy()
        bumped_feats[5] += 1.0  # inside group 1 (positions 4..7)
        bumped = SequenceTensor(features=bumped_feats, coords=seq.coords,
                                keys=seq.keys, spec=seq.spec)
        out, _ = dsb_forward(bumped, params, "hilbert", 3, group_size=4)
        np.testing.assert_array_equal(out.features[:4], base.features[:4])
        np.testing.assert_array_equal(out.features[8:], base.features[8:])
        assert not np.array_equal(out.features[4:8], base.features[4:8])

    def test_grouped_gradients_match_finite_differences(self):
        rng, seq, params = build_case(33, n_voxels=10)
        grad_like = rng.normal(size=(10, 4))

        def loss():
            out, _ = dsb_forward(seq, params, "hilbert", 3, group_size=3)
            return float(np.sum(out.features * grad_like))

        _, tape = dsb_forward(seq, params, "hilbert", 3, group_size=3)
        grad_seq, _ = dsb_backward(tape, grad_like)
        assert max_rel_err(grad_seq, central_diff(loss, seq.features)) < 1e-4

    def test_bad_group_size_rejected(self):
        _, seq, params = build_case(34)
        with pytest.raises(ContractError):
            dsb_forward(seq, params, "hilbert", 3, group_size=0)

    def test_no_tape_mode(self):
        _, seq, params = build_case(35)
        with_tape, tape = dsb_forward(seq, params, "hilbert", 3)
        without, none_tape = dsb_forward(seq, params, "hilbert", 3,
                                         want_tape=False)
        assert none_tape is None
        np.testing.assert_array_equal(with_tape.features, without.features)


class TestDSBBackward:
    def test_zero_grad_gives_zero(self):
        _, seq, params = build_case(17)
        _, tape = dsb_forward(seq, params, "hilbert", 3)
        grad_seq, grads = dsb_backward(tape, np.zeros((len(seq), 4)))
        assert not grad_seq.any()
        assert all(not g.any() for g in grads.values())

    def test_residual_passes_grad_through_when_zeroed(self):
        _, seq, params = build_case(18, zero_learned=True)
        _, tape = dsb_forward(seq, params, "hilbert", 3)
        rng = np.random.default_rng(0)
        grad_out = rng.normal(size=(len(seq), 4))
        grad_seq, _ = dsb_backward(tape, grad_out)
        np.testing.assert_array_equal(grad_seq, grad_out)

    def test_finite_differences_full_block(self):
        rng, seq, params = build_case(19, n_voxels=16)
        grad_like = rng.normal(size=(16, 4))

        def loss():
            out, _ = dsb_forward(seq, params, "hilbert", 3)
            return float(np.sum(out.features * grad_like))

        _, tape = dsb_forward(seq, params, "hilbert", 3)
        grad_seq, grads = dsb_backward(tape, grad_like)
        fd_seq = central_diff(loss, seq.features)
        assert max_rel_err(grad_seq, fd_seq) < 1e-4
        for name, tensor in params.tensors().items():
            fd = central_diff(loss, tensor)
            assert max_rel_err(grads[name], fd) < 1e-4, name

    def test_shared_iwe_grads_sum_to_finite_difference(self):
        # when both branches reference one MLP object, the true gradient
        # of the shared tensor is the sum of the two reported groups
        rng, seq, params = build_case(20, n_voxels=12, share_iwe=True)
        assert params.iwe_fine is params.iwe_coarse
        grad_like = rng.normal(size=(12, 4))

        def loss():
            out, _ = dsb_forward(seq, params, "hilbert", 3)
            return float(np.sum(out.features * grad_like))

        _, tape = dsb_forward(seq, params, "hilbert", 3)
        _, grads = dsb_backward(tape, grad_like)
        for name, tensor in params.iwe_fine.tensors().items():
            fd = central_diff(loss, tensor)
            total = grads[f"iwe_fine.{name}"] + grads[f"iwe_coarse.{name}"]
            assert max_rel_err(total, fd) < 1e-4, name

    def test_grad_shape_mismatch_rejected(self):
        _, seq, params = build_case(21)
        _, tape = dsb_forward(seq, params, "hilbert", 3)
        with pytest.raises(ShapeError):
            dsb_backward(tape, np.zeros((len(seq), 5)))
