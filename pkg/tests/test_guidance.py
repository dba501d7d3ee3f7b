import math

import numpy as np
import pytest
import torch

from region_edit.errors import DegenerateEmbeddingError, GuidanceDivergenceError, ShapeMismatchError
from region_edit.guidance import (
    EmbeddingVector,
    GuidanceEncoders,
    GuidanceParams,
    clip_guidance,
    combine_cfg,
    nerp_loss,
    shift_mean,
    total_objective,
)
from region_edit.toyzoo.models import ToyImageEncoder, perceptual_distance


def _unit(vec):
    return EmbeddingVector.unit(torch.as_tensor(vec, dtype=torch.float64))


def test_combine_cfg_degenerate_scales():
    a = torch.randn(3, 3, 2, generator=torch.Generator().manual_seed(0))
    b = torch.randn(3, 3, 2, generator=torch.Generator().manual_seed(1))
    assert torch.equal(combine_cfg(a, b, 0.0), a)
    assert torch.equal(combine_cfg(a, b, 1.0), b)


def test_combine_cfg_hand_case():
    out = combine_cfg(torch.tensor([1.0, 1.0]), torch.tensor([2.0, 0.0]), 5.0)
    torch.testing.assert_close(out, torch.tensor([6.0, -4.0]))


def test_combine_cfg_interpolation_identity():
    for seed in range(5):
        gen = torch.Generator().manual_seed(seed)
        a = torch.randn(4, 4, 3, generator=gen, dtype=torch.float64)
        b = torch.randn(4, 4, 3, generator=gen, dtype=torch.float64)
        s = float(torch.rand((), generator=gen)) * 10.0
        torch.testing.assert_close(combine_cfg(a, b, s) - a, s * (b - a))
        # algebraically identical to the (1-s)a + s b form
        torch.testing.assert_close(combine_cfg(a, b, s), (1 - s) * a + s * b)


def test_combine_cfg_argument_symmetry():
    a = torch.randn(2, 2, 1, generator=torch.Generator().manual_seed(7))
    for s in (0.0, 0.5, 5.0, 123.0):
        assert torch.equal(combine_cfg(a, a, s), a)


def test_combine_cfg_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        combine_cfg(torch.zeros(2, 2, 1), torch.zeros(2, 2, 2), 1.0)


def test_clip_guidance_identical_and_orthogonal():
    target = _unit([1.0, 0.0, 0.0])

    def enc_same(img):
        return torch.tensor([2.0, 0.0, 0.0], dtype=torch.float64)  # scaled copy

    def enc_orth(img):
        return torch.tensor([0.0, 3.0, 0.0], dtype=torch.float64)

    x = torch.zeros(4, 4, 3, dtype=torch.float64)
    m = np.ones((4, 4), dtype=np.uint8)
    assert math.isclose(float(clip_guidance(x, target, m, enc_same)), 0.0, abs_tol=1e-12)
    assert math.isclose(float(clip_guidance(x, target, m, enc_orth)), 1.0, abs_tol=1e-12)


def test_clip_guidance_zero_norm_embedding_raises():
    with pytest.raises(DegenerateEmbeddingError):
        EmbeddingVector.unit(torch.zeros(4))
    target = _unit([0.0, 1.0])
    x = torch.zeros(2, 2, 3, dtype=torch.float64)
    m = np.ones((2, 2), dtype=np.uint8)
    with pytest.raises(DegenerateEmbeddingError):
        clip_guidance(x, target, m, lambda img: torch.zeros(2, dtype=torch.float64))


def test_clip_guidance_scale_invariance():
    torch.manual_seed(11)
    enc = ToyImageEncoder().double()
    enc.requires_grad_(False)
    x = torch.rand(8, 8, 3, dtype=torch.float64) * 1.6 - 0.8
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:6, 2:6] = 1
    target = _unit(torch.randn(64, generator=torch.Generator().manual_seed(3), dtype=torch.float64))
    base = float(clip_guidance(x, target, m, enc.embed))
    for c in (0.1, 3.0, 1000.0):
        scaled = float(clip_guidance(x, target, m, lambda img: c * enc.embed(img)))
        assert math.isclose(base, scaled, abs_tol=1e-6)


def test_nerp_loss_trivial_cases():
    x0 = torch.rand(4, 4, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    metric = lambda a, b: ((a - b) ** 2).mean()
    m = np.zeros((4, 4), dtype=np.uint8)
    assert float(nerp_loss(x0, x0.clone(), m, 0.5, 0.5, metric)) == 0.0
    ones = np.ones((4, 4), dtype=np.uint8)
    other = torch.rand(4, 4, 3, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    assert float(nerp_loss(x0, other, ones, 0.5, 0.5, metric)) == 0.0


def test_nerp_loss_brute_force_mse():
    # lambda1=0, lambda2=1, masks empty, x0 all zeros, x_hat all ones -> 1.0
    x0 = torch.zeros(2, 2, 3, dtype=torch.float64)
    x_hat = torch.ones(2, 2, 3, dtype=torch.float64)
    m = np.zeros((2, 2), dtype=np.uint8)
    val = float(nerp_loss(x0, x_hat, m, 0.0, 1.0, lambda a, b: a.new_zeros(())))
    brute = np.mean((np.zeros((2, 2, 3)) - np.ones((2, 2, 3))) ** 2)
    assert math.isclose(val, float(brute), abs_tol=1e-12)
    assert math.isclose(val, 1.0, abs_tol=1e-12)


def test_nerp_mask_locality():
    torch.manual_seed(5)
    enc = ToyImageEncoder().double()
    enc.requires_grad_(False)
    metric = lambda a, b: perceptual_distance(enc, a, b)
    gen = torch.Generator().manual_seed(6)
    x0 = torch.rand(8, 8, 3, generator=gen, dtype=torch.float64) * 1.6 - 0.8
    x_hat = torch.rand(8, 8, 3, generator=gen, dtype=torch.float64) * 1.6 - 0.8
    m = np.zeros((8, 8), dtype=np.uint8)
    m[1:5, 2:7] = 1
    before = float(nerp_loss(x0, x_hat, m, 0.7, 0.3, metric))
    edited = x_hat.clone()
    edited[torch.as_tensor(m, dtype=torch.bool)] = 0.123
    after = float(nerp_loss(x0, edited, m, 0.7, 0.3, metric))
    assert abs(before - after) <= 1e-9


def test_total_objective_is_sum_of_components():
    torch.manual_seed(8)
    enc = ToyImageEncoder().double()
    enc.requires_grad_(False)
    encoders = GuidanceEncoders(
        image_encoder=enc.embed, perceptual=lambda a, b: perceptual_distance(enc, a, b)
    )
    params = GuidanceParams(lambda1=0.4, lambda2=0.6)
    gen = torch.Generator().manual_seed(9)
    x0 = torch.rand(8, 8, 3, generator=gen, dtype=torch.float64) * 1.6 - 0.8
    x_hat = torch.rand(8, 8, 3, generator=gen, dtype=torch.float64) * 1.6 - 0.8
    m = np.zeros((8, 8), dtype=np.uint8)
    m[3:6, 3:6] = 1
    target = _unit(torch.randn(64, generator=gen, dtype=torch.float64))
    total = float(total_objective(x0, x_hat, target, m, params, encoders))
    parts = float(clip_guidance(x_hat, target, m, enc.embed)) + float(
        nerp_loss(x0, x_hat, m, 0.4, 0.6, encoders.perceptual)
    )
    assert math.isclose(total, parts, abs_tol=1e-9)


def test_total_objective_zero_at_perfect_reconstruction():
    torch.manual_seed(10)
    enc = ToyImageEncoder().double()
    enc.requires_grad_(False)
    x0 = torch.rand(8, 8, 3, generator=torch.Generator().manual_seed(12), dtype=torch.float64)
    m = np.ones((8, 8), dtype=np.uint8)
    target = EmbeddingVector.unit(enc.embed(x0).detach())
    encoders = GuidanceEncoders(
        image_encoder=enc.embed, perceptual=lambda a, b: perceptual_distance(enc, a, b)
    )
    val = float(total_objective(x0, x0.clone(), target, m, GuidanceParams(), encoders))
    assert abs(val) < 1e-9


def _fd_grad(fn, x, h=1e-6):
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def _rel_err(a, b):
    denom = max(float(torch.linalg.vector_norm(b)), 1e-12)
    return float(torch.linalg.vector_norm(a - b)) / denom


@pytest.mark.parametrize("which", ["clip", "nerp", "total"])
def test_gradients_match_finite_differences(which):
    torch.manual_seed(21)
    enc = ToyImageEncoder().double()
    enc.requires_grad_(False)
    encoders = GuidanceEncoders(
        image_encoder=enc.embed, perceptual=lambda a, b: perceptual_distance(enc, a, b)
    )
    gen = torch.Generator().manual_seed(22)
    x0 = (torch.rand(4, 4, 3, generator=gen, dtype=torch.float64) * 1.6 - 0.8)
    x = (torch.rand(4, 4, 3, generator=gen, dtype=torch.float64) * 1.6 - 0.8)
    m = np.zeros((4, 4), dtype=np.uint8)
    m[1:3, 1:3] = 1
    target = _unit(torch.randn(64, generator=gen, dtype=torch.float64))
    params = GuidanceParams(lambda1=0.5, lambda2=0.5)

    def fn(inp):
        if which == "clip":
            return clip_guidance(inp, target, m, enc.embed)
        if which == "nerp":
            return nerp_loss(x0, inp, m, 0.5, 0.5, encoders.perceptual)
        return total_objective(x0, inp, target, m, params, encoders)

    leaf = x.clone().requires_grad_(True)
    (auto,) = torch.autograd.grad(fn(leaf), leaf)
    fd = _fd_grad(fn, x.clone())
    assert _rel_err(auto, fd) < 1e-3


def test_total_objective_gradient_through_identity_decode():
    # gradient w.r.t. the latent: identity codec decode is clamp, smooth
    # inside (-1, 1), so finite differences apply there
    from region_edit.codec import IdentityCodec

    torch.manual_seed(23)
    enc = ToyImageEncoder().double()
    enc.requires_grad_(False)
    encoders = GuidanceEncoders(
        image_encoder=enc.embed, perceptual=lambda a, b: perceptual_distance(enc, a, b)
    )
    codec = IdentityCodec()
    gen = torch.Generator().manual_seed(24)
    x0 = torch.rand(4, 4, 3, generator=gen, dtype=torch.float64) * 1.6 - 0.8
    z = torch.rand(4, 4, 3, generator=gen, dtype=torch.float64) * 1.6 - 0.8
    m = np.zeros((4, 4), dtype=np.uint8)
    m[0:2, 2:4] = 1
    target = _unit(torch.randn(64, generator=gen, dtype=torch.float64))
    params = GuidanceParams()

    def fn(latent):
        return total_objective(x0, codec.decode(latent), target, m, params, encoders)

    leaf = z.clone().requires_grad_(True)
    (auto,) = torch.autograd.grad(fn(leaf), leaf)
    fd = _fd_grad(fn, z.clone())
    assert _rel_err(auto, fd) < 1e-3


def test_shift_mean_trivial_and_hand_case():
    mu = torch.randn(3, 3, 2, generator=torch.Generator().manual_seed(30))
    var = torch.full_like(mu, 0.04)
    grad = torch.randn(3, 3, 2, generator=torch.Generator().manual_seed(31))
    assert torch.equal(shift_mean(mu, var, grad, 0.0), mu)
    assert torch.equal(shift_mean(mu, var, torch.zeros_like(mu), 150.0), mu)
    scalar = shift_mean(
        torch.tensor([1.0]), torch.tensor([0.25]), torch.tensor([2.0]), 150.0
    )
    torch.testing.assert_close(scalar, torch.tensor([-74.0]))


def test_shift_mean_rejects_non_finite_gradient():
    mu = torch.zeros(2, 2, 1)
    var = torch.ones(2, 2, 1)
    bad = torch.full((2, 2, 1), float("nan"))
    with pytest.raises(GuidanceDivergenceError):
        shift_mean(mu, var, bad, 1.0)


def test_guidance_params_validation():
    with pytest.raises(ValueError):
        GuidanceParams(cfg_scale=-1.0)
    with pytest.raises(ValueError):
        GuidanceParams(grad_scale=-0.5)
    rec = GuidanceParams(cfg_scale=3.0).to_json()
    assert rec["cfg_scale"] == 3.0 and rec["lambda1"] == 0.5


def test_embedding_vector_normalized_flag_checked():
    with pytest.raises(DegenerateEmbeddingError):
        EmbeddingVector(values=torch.tensor([3.0, 4.0]), normalized=True)
    ok = EmbeddingVector(values=torch.tensor([0.6, 0.8]), normalized=True)
    assert ok.dim == 2
