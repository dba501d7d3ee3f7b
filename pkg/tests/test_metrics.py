import math

import numpy as np
import pytest
import torch

from region_edit.guidance import EmbeddingVector
from region_edit.metrics import (
    PSNR_SENTINEL_DB,
    IdentityHarmonizer,
    clip_score,
    evaluate_edits,
    ih_score,
    mse,
    preservation_lpips,
    psnr,
    sfid,
    sfid_detailed,
)
from region_edit.toyzoo.models import ToyImageEncoder, perceptual_distance


def test_mse_psnr_hand_computed_2x2():
    a = np.array([[0.0, 0.0], [0.0, 0.0]])
    b = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert mse(a, b) == 1.0
    assert math.isclose(psnr(a, b), 10 * math.log10(255.0**2), rel_tol=1e-12)
    c = np.array([[10.0, 0.0], [0.0, 0.0]])
    assert mse(a, c) == 25.0  # (100 + 0 + 0 + 0) / 4, by hand
    assert math.isclose(psnr(a, c), 10 * math.log10(255.0**2 / 25.0), rel_tol=1e-12)


def test_psnr_sentinel_on_identical():
    a = np.ones((3, 3))
    assert psnr(a, a.copy()) == PSNR_SENTINEL_DB


def _feature_images(n, dim, seed):
    """Images whose stub features are exactly controlled vectors."""
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((n, dim))
    # empirical whitening: mean 0, covariance exactly I
    feats = feats - feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False, ddof=1)
    evals, evecs = np.linalg.eigh(cov)
    white = feats @ evecs @ np.diag(evals**-0.5) @ evecs.T
    return [torch.from_numpy(row) for row in white]


def _stub_extractor(img):
    return img


def test_sfid_identical_sets_zero():
    images = _feature_images(40, 6, seed=0)
    val, mode = sfid_detailed(images, list(images), _stub_extractor)
    assert mode == "full"
    assert abs(val) <= 1e-6


def test_sfid_gaussian_shift_closed_form():
    # whitened set vs the same set shifted by e1: distance is exactly 1
    images = _feature_images(60, 5, seed=1)
    shift = torch.zeros(5, dtype=torch.float64)
    shift[0] = 1.0
    shifted = [img + shift for img in images]
    val_full, mode_full = sfid_detailed(images, shifted, _stub_extractor)
    assert mode_full == "full"
    assert math.isclose(val_full, 1.0, abs_tol=1e-3)
    val_diag, mode_diag = sfid_detailed(images, shifted, _stub_extractor, mode="diag")
    assert mode_diag == "diag"
    assert math.isclose(val_diag, 1.0, abs_tol=1e-3)


def test_sfid_symmetric_and_nonnegative():
    a = _feature_images(30, 4, seed=2)
    b = [img * 1.3 + 0.2 for img in _feature_images(30, 4, seed=3)]
    ab = sfid(a, b, _stub_extractor)
    ba = sfid(b, a, _stub_extractor)
    assert abs(ab - ba) <= 1e-6
    assert ab >= 0.0


def test_sfid_small_sample_stabilizes_not_crashes():
    a = _feature_images(12, 6, seed=4)[:2]
    b = _feature_images(12, 6, seed=5)[:2]
    val, mode = sfid_detailed(a, b, _stub_extractor)
    assert math.isfinite(val) and val >= 0.0
    assert mode in ("full", "diag")


def test_sfid_rejects_empty_sets():
    with pytest.raises(ValueError):
        sfid([], _feature_images(3, 2, seed=6), _stub_extractor)


def test_preservation_lpips_zero_and_in_mask_independence():
    torch.manual_seed(50)
    enc = ToyImageEncoder().double()
    enc.requires_grad_(False)
    metric = lambda a, b: perceptual_distance(enc, a, b)
    gen = torch.Generator().manual_seed(51)
    x0 = torch.rand(8, 8, 3, generator=gen, dtype=torch.float64) * 1.6 - 0.8
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:6, 2:6] = 1
    assert preservation_lpips(x0, x0.clone(), m, metric) == 0.0
    edited = x0.clone()
    edited[2:6, 2:6, :] = -0.5
    assert abs(preservation_lpips(x0, edited, m, metric)) <= 1e-12


def test_ih_score_identity_harmonizer_sentinel():
    x = torch.rand(8, 8, 3, generator=torch.Generator().manual_seed(52)) * 2 - 1
    m = np.ones((8, 8), dtype=np.uint8)
    assert ih_score(x, m, IdentityHarmonizer()) == PSNR_SENTINEL_DB


def test_ih_score_perturbing_harmonizer_brute_force():
    class Perturb:
        name = "perturb"

        def harmonize(self, image, mask):
            out = image.clone()
            inv = torch.as_tensor(1 - mask, dtype=image.dtype).unsqueeze(-1)
            return out + inv * (2.0 / 255.0)  # +1 unit on the 0..255 scale

    gen = torch.Generator().manual_seed(53)
    x = (torch.rand(8, 8, 3, generator=gen) * 1.6 - 0.8).double()
    m = np.zeros((8, 8), dtype=np.uint8)
    m[0:4, :] = 1  # half the pixels perturbed
    got = ih_score(x, m, Perturb())
    # brute-force oracle from the PSNR definition over the whole image
    frac = float((1 - m).mean())
    expected = 10 * math.log10(255.0**2 / (frac * 1.0**2))
    assert math.isclose(got, expected, rel_tol=1e-9)
    # full-image perturbation: the canonical ~48.13 dB value
    all_out = np.zeros((8, 8), dtype=np.uint8)
    got_full = ih_score(x, all_out, Perturb())
    assert math.isclose(got_full, 20 * math.log10(255.0), rel_tol=1e-9)


class _IdentityTextEncoder:
    def __init__(self, vec):
        self.vec = vec

    def encode(self, prompt):
        return EmbeddingVector.unit(self.vec.clone())


class _IdentityImageEncoder:
    def __init__(self, table):
        self.table = table

    def embed(self, img):
        return self.table[id(img)]


def test_clip_score_perfect_match_and_permutation_symmetry():
    vec = torch.tensor([1.0, 2.0, 2.0])
    text = _IdentityTextEncoder(vec)
    imgs = [torch.zeros(2, 2, 3) for _ in range(3)]
    table = {id(imgs[0]): vec * 3.0, id(imgs[1]): vec * 0.5, id(imgs[2]): torch.tensor([2.0, -1.0, 0.0])}
    image = _IdentityImageEncoder(table)
    one = clip_score([imgs[0]], "anything", text, image)
    assert math.isclose(one, 1.0, abs_tol=1e-6)
    forward = clip_score(imgs, "anything", text, image)
    backward = clip_score(list(reversed(imgs)), "anything", text, image)
    assert math.isclose(forward, backward, abs_tol=1e-12)


def test_evaluate_edits_report_shape():
    torch.manual_seed(54)
    enc = ToyImageEncoder()
    enc.requires_grad_(False)
    from region_edit.toyzoo.models import ToyTextEncoder

    text = ToyTextEncoder()
    gen = torch.Generator().manual_seed(55)
    originals = [torch.rand(32, 32, 3, generator=gen) * 2 - 1 for _ in range(4)]
    edited = [img.clone() for img in originals]
    masks = [np.zeros((32, 32), dtype=np.uint8) for _ in originals]
    report = evaluate_edits(
        originals,
        edited,
        masks,
        "a red square",
        text,
        enc,
        perceptual_metric=lambda a, b: perceptual_distance(enc, a, b),
    )
    rec = report.to_json()
    assert rec["preservation_lpips"] == 0.0
    assert rec["ih_score"] == PSNR_SENTINEL_DB
    assert -1.0 <= rec["clip_score"] <= 1.0
    assert rec["sfid"] <= 1e-6
    assert len(rec["per_image"]) == 4
    assert rec["flags"]["harmonizer"] == "identity"
    # aggregate equals the mean of the per-image values
    assert math.isclose(
        rec["clip_score"], float(np.mean([r["clip_score"] for r in rec["per_image"]])), abs_tol=1e-12
    )
