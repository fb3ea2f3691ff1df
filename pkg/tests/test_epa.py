"""Structural and numerical properties of the five-branch aggregator."""
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gradcheck import assert_grads_match

from sasp import (
    EpaParams,
    Param,
    Tape,
    Tensor,
    adaptive_avg_pool,
    conv2d,
    cross_entropy,
    epa_branch_responses,
    epa_forward,
    global_avg_pool,
    linear,
    tensor_sum,
)
from sasp.epa import BRANCH_NAMES
from sasp.errors import ConfigError


def random_params(channels, seed, dtype=np.float64):
    return EpaParams(channels, rng=np.random.default_rng(seed), dtype=dtype)


class TestShapes:
    @pytest.mark.parametrize("shape", [(2, 8, 7, 7), (2, 8, 4, 5), (1, 4, 3, 9)])
    def test_output_shape_equals_input_shape(self, shape):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=shape))
        out = epa_forward(x, random_params(shape[1], seed=1))
        assert out.shape == shape

    def test_randomized_configs_preserve_shape(self):
        rng = np.random.default_rng(2)
        for trial in range(25):
            n = int(rng.integers(1, 4))
            c = 4 * int(rng.integers(1, 5))
            h = int(rng.integers(1, 9))
            w = int(rng.integers(1, 9))
            x = Tensor(rng.normal(size=(n, c, h, w)))
            out = epa_forward(x, random_params(c, seed=trial))
            assert out.shape == (n, c, h, w)

    def test_channels_not_divisible_by_reduction(self):
        with pytest.raises(ConfigError, match="divisible"):
            EpaParams(6)

    def test_input_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            epa_forward(Tensor(np.zeros((1, 4, 3, 3))), random_params(8, seed=0))


class TestResidualIdentity:
    def test_zero_init_is_identity_on_nonnegative_input(self):
        rng = np.random.default_rng(3)
        x = Tensor(np.abs(rng.normal(size=(2, 8, 4, 5))))
        out = epa_forward(x, EpaParams(8))
        assert_array_equal(out.data, x.data)

    def test_output_is_nonnegative(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 8, 5, 6)) * 3)
        out = epa_forward(x, random_params(8, seed=5))
        assert out.data.min() >= 0.0


class TestStripInvariance:
    def test_row_strip_ignores_column_permutation(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 8, 5, 7))
        perm = rng.permutation(7)
        pooled = adaptive_avg_pool(Tensor(x), 5, 1).data
        pooled_perm = adaptive_avg_pool(Tensor(x[:, :, :, perm]), 5, 1).data
        assert_allclose(pooled, pooled_perm, atol=1e-6)

    def test_column_strip_ignores_row_permutation(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 8, 6, 4))
        perm = rng.permutation(6)
        pooled = adaptive_avg_pool(Tensor(x), 1, 4).data
        pooled_perm = adaptive_avg_pool(Tensor(x[:, :, perm, :]), 1, 4).data
        assert_allclose(pooled, pooled_perm, atol=1e-6)


class TestBranchResponses:
    def test_keys_and_shapes(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(2, 8, 4, 5)))
        responses = epa_branch_responses(x, random_params(8, seed=9))
        assert tuple(responses) == BRANCH_NAMES
        for name in ("loc", "h", "v", "fused1"):
            assert responses[name].shape == (2, 8, 4, 5)
        for name in ("sh", "sv", "fused2"):
            assert responses[name].shape == (2, 2, 4, 5)

    def test_loc_matches_standalone_conv(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(1, 8, 4, 4)))
        p = random_params(8, seed=11)
        responses = epa_branch_responses(x, p)
        standalone = conv2d(x, p.k_loc, p.b_loc, pad=(1, 1))
        assert_array_equal(responses["loc"].data, standalone.data)

    def test_no_tape_recording(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.normal(size=(1, 8, 3, 3)))
        p = random_params(8, seed=13)
        with Tape() as tape:
            epa_branch_responses(x, p)
        assert len(tape) == 0


class TestConstantInput:
    """Behaviour on a spatially constant feature map.

    Strip pooling of a constant map is exactly constant, and every branch is
    constant along its stretched axis. Full-map constancy of the output only
    holds away from the zero-padded borders for general kernels (border
    cells see fewer kernel taps); with center-tap-only kernels there is no
    border effect and the whole output is constant per channel.
    """

    def _constant_input(self, c=8, h=5, w=6, value=1.5):
        return Tensor(np.full((1, c, h, w), value))

    def test_strip_pools_are_exactly_constant(self):
        x = self._constant_input()
        assert_array_equal(adaptive_avg_pool(x, 5, 1).data, np.full((1, 8, 5, 1), 1.5))
        assert_array_equal(adaptive_avg_pool(x, 1, 6).data, np.full((1, 8, 1, 6), 1.5))

    def test_branches_constant_along_stretched_axis(self):
        x = self._constant_input()
        responses = epa_branch_responses(x, random_params(8, seed=14))
        # h/sv come from a (h, 1) strip: constant along width; v/sh along height
        for name in ("h", "sv"):
            spread = np.ptp(responses[name].data, axis=3)
            assert spread.max() < 1e-12
        for name in ("v", "sh"):
            spread = np.ptp(responses[name].data, axis=2)
            assert spread.max() < 1e-12

    def test_interior_is_constant_per_channel(self):
        x = self._constant_input()
        out = epa_forward(x, random_params(8, seed=15)).data[:, :, 1:-1, 1:-1]
        spread = out.max(axis=(2, 3)) - out.min(axis=(2, 3))
        assert spread.max() < 1e-5

    def _center_tap_params(self, c, seed):
        """Kernels with only the center tap set, so zero padding is invisible."""
        rng = np.random.default_rng(seed)
        p = EpaParams(c, dtype=np.float64)
        for kernel in (p.k_loc, p.k_h, p.k_v, p.k_reduce, p.k_sh, p.k_sv, p.k_proj):
            oc, ic, kh, kw = kernel.shape
            kernel.data[:, :, kh // 2, kw // 2] = rng.normal(size=(oc, ic))
        return p

    def test_center_tap_output_constant_per_channel(self):
        x = self._constant_input()
        p = self._center_tap_params(8, seed=16)
        out = epa_forward(x, p).data
        spread = out.max(axis=(2, 3)) - out.min(axis=(2, 3))
        assert spread.max() < 1e-5

    def test_center_tap_shared_kernel_makes_h_equal_v(self):
        x = self._constant_input(h=6, w=6)
        p = self._center_tap_params(8, seed=17)
        p.k_v.data[...] = p.k_h.data
        responses = epa_branch_responses(x, p)
        assert_allclose(responses["h"].data, responses["v"].data, atol=1e-12)


class TestGradients:
    def test_all_kernels_and_biases_receive_nonzero_gradients(self):
        rng = np.random.default_rng(18)
        x = Tensor(rng.normal(size=(2, 8, 4, 5)))
        p = random_params(8, seed=19)
        with Tape() as tape:
            loss = tensor_sum(epa_forward(x, p))
        tape.backward(loss)
        for param in p.params() + [x]:
            assert param.grad is not None
            assert np.abs(param.grad).max() > 0.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(20)
        x = Tensor(rng.normal(size=(1, 8, 4, 5)))
        p = random_params(8, seed=21)
        assert_grads_match(lambda: tensor_sum(epa_forward(x, p)), p.params() + [x])

    def test_gradient_through_downstream_head(self):
        rng = np.random.default_rng(22)
        x = Tensor(rng.normal(size=(2, 4, 3, 4)))
        p = random_params(4, seed=23)
        weight = Param(rng.normal(size=(3, 4)))
        bias = Param(rng.normal(size=3))
        labels = np.array([0, 2])

        def loss():
            pooled = global_avg_pool(epa_forward(x, p))
            return cross_entropy(linear(pooled, weight, bias), labels)

        assert_grads_match(loss, p.params() + [x, weight, bias])
