import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import attention_matrix_loop, cam_loop, central_difference_check, positions, randomize_, sam_loop
from scarnet.attention import (
    ChannelAttention,
    SpatialAttention,
    cam_forward,
    channel_attention_matrix,
    fuse,
    sam_forward,
    spatial_attention_matrix,
)
from scarnet.errors import ShapeError


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


# ---------------------------------------------------------- attention matrices


def test_spatial_single_position():
    a = spatial_attention_matrix(rand(5, 1, 1), rand(5, 1, 1, seed=1))
    assert a.tolist() == [[1.0]]


def test_spatial_identical_positions_uniform():
    s1 = rand(4, 1, 1).expand(4, 3, 5).contiguous()
    a = spatial_attention_matrix(s1, rand(4, 3, 5, seed=2))
    torch.testing.assert_close(a, torch.full((15, 15), 1 / 15, dtype=torch.float64))


def test_spatial_matches_loop():
    s1, s2 = rand(3, 2, 2), rand(3, 2, 2, seed=1)
    expected = attention_matrix_loop(positions(s1.numpy()), positions(s2.numpy()))
    np.testing.assert_allclose(spatial_attention_matrix(s1, s2).numpy(), expected, atol=1e-6)


def test_spatial_shape_mismatch():
    with pytest.raises(ShapeError):
        spatial_attention_matrix(rand(3, 2, 2), rand(3, 2, 3))


def test_channel_single():
    c1 = rand(1, 6)
    assert channel_attention_matrix(c1, c1.T).tolist() == [[1.0]]


def test_channel_identical_uniform():
    c1 = rand(1, 6).expand(4, 6).contiguous()
    torch.testing.assert_close(channel_attention_matrix(c1, c1.T), torch.full((4, 4), 0.25, dtype=torch.float64))


def test_channel_matches_loop():
    c1 = rand(4, 6)
    expected = attention_matrix_loop(c1.tolist(), c1.tolist())
    np.testing.assert_allclose(channel_attention_matrix(c1, c1.T).numpy(), expected, atol=1e-6)


def test_channel_asymmetric_inputs_match_loop():
    c1, c2 = rand(3, 5), rand(5, 3, seed=9)
    expected = attention_matrix_loop(c1.tolist(), c2.T.tolist())
    np.testing.assert_allclose(channel_attention_matrix(c1, c2).numpy(), expected, atol=1e-6)


def test_channel_shape_mismatch():
    with pytest.raises(ShapeError):
        channel_attention_matrix(rand(3, 5), rand(4, 3))


def test_large_logits_stay_finite():
    s = rand(8, 3, 3) * 1e3
    a = spatial_attention_matrix(s, s)
    assert torch.isfinite(a).all()
    torch.testing.assert_close(a.sum(-1), torch.ones(9, dtype=torch.float64))


@settings(max_examples=50, deadline=None)
@given(c=st.integers(1, 8), h=st.integers(1, 6), w=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_row_stochastic(c, h, w, seed):
    s1, s2 = rand(c, h, w, seed=seed), rand(c, h, w, seed=seed + 1)
    for a in (spatial_attention_matrix(s1, s2), channel_attention_matrix(s1.flatten(1), s2.flatten(1).T)):
        assert ((a >= 0) & (a <= 1)).all()
        np.testing.assert_allclose(a.sum(-1).numpy(), 1.0, atol=1e-5)


def test_softmax_shift_invariance():
    s1, s2 = rand(4, 3, 2), rand(4, 3, 2, seed=1)
    base = spatial_attention_matrix(s1, s2)
    torch.testing.assert_close(spatial_attention_matrix(s1 + 2.5, s2), base, atol=1e-6, rtol=0)
    c1, c2 = rand(5, 7, seed=2), rand(7, 5, seed=3)
    base = channel_attention_matrix(c1, c2)
    torch.testing.assert_close(channel_attention_matrix(c1 - 1.75, c2), base, atol=1e-6, rtol=0)


# ---------------------------------------------------------------- branches


def test_zero_init_identity():
    f = rand(64, 12, 16)
    sam = SpatialAttention(64).double()
    cam = ChannelAttention(64).double()
    assert torch.equal(sam_forward(f, sam), f)
    assert torch.equal(cam_forward(f, cam), f)


def test_shape_preserved():
    f = torch.randn(2, 64, 12, 16)
    assert SpatialAttention(64)(f).shape == f.shape
    assert ChannelAttention(64)(f).shape == f.shape


def test_sam_matches_loop():
    sam = randomize_(SpatialAttention(3).double(), seed=1)
    f = rand(3, 2, 3)
    expected, _ = sam_loop(f.numpy(), sam)
    np.testing.assert_allclose(sam_forward(f, sam).detach().numpy(), expected, atol=1e-5)


def test_cam_matches_loop():
    cam = randomize_(ChannelAttention(4).double(), seed=2)
    f = rand(4, 2, 3)
    expected, _ = cam_loop(f.numpy(), cam)
    np.testing.assert_allclose(cam_forward(f, cam).detach().numpy(), expected, atol=1e-5)


def test_sam_reduction_shapes():
    sam = SpatialAttention(16, reduction=4)
    assert sam.query.out_channels == 4 and sam.value.out_channels == 16
    assert sam(torch.randn(1, 16, 3, 3)).shape == (1, 16, 3, 3)


def test_branch_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        SpatialAttention(8)(torch.randn(1, 4, 2, 2))
    with pytest.raises(ShapeError):
        ChannelAttention(8)(torch.randn(1, 4, 2, 2))


def test_sam_permutation_equivariance():
    sam = randomize_(SpatialAttention(5).double(), std=0.3, seed=3)
    f = rand(5, 4, 3)
    perm = torch.randperm(12, generator=torch.Generator().manual_seed(0))

    def permute(x):
        return x.flatten(1)[:, perm].view_as(x)

    with torch.no_grad():
        torch.testing.assert_close(sam_forward(permute(f), sam), permute(sam_forward(f, sam)), atol=1e-5, rtol=0)


@pytest.mark.parametrize("branch", [SpatialAttention, ChannelAttention])
def test_gradients_match_finite_differences(branch):
    module = randomize_(branch(3).double(), std=0.4, seed=4)
    f = rand(1, 3, 3, 3).requires_grad_()
    target = rand(1, 3, 3, 3, seed=8)

    def loss():
        return ((module(f) - target) ** 2).sum()

    params = [f, *module.parameters()]
    err, checked = central_difference_check(loss, params, step=1e-4, max_coords=30)
    assert err < 1e-3
    # the SAM query bias shifts each softmax row by a constant, so its gradient is exactly zero
    assert checked == len(params) - (branch is SpatialAttention)


# -------------------------------------------------------------------- fusion


def test_fuse_concat_order():
    a, b = torch.zeros(64, 12, 16), torch.ones(64, 12, 16)
    out = fuse(a, b, "concat")
    assert out.shape == (128, 12, 16)
    assert out[:64].sum() == 0 and out[64:].sum() == 64 * 12 * 16


def test_fuse_concat_batched():
    assert fuse(torch.zeros(2, 4, 3, 3), torch.zeros(2, 4, 3, 3)).shape == (2, 8, 3, 3)


def test_fuse_sum_identity_and_commutative():
    x, y = rand(4, 3, 3), rand(4, 3, 3, seed=1)
    assert torch.equal(fuse(x, torch.zeros_like(x), "sum"), x)
    assert torch.equal(fuse(x, y, "sum"), fuse(y, x, "sum"))


def test_fuse_errors():
    with pytest.raises(ShapeError):
        fuse(torch.zeros(4, 3, 3), torch.zeros(4, 3, 2))
    with pytest.raises(ValueError):
        fuse(torch.zeros(4, 3, 3), torch.zeros(4, 3, 3), "product")
