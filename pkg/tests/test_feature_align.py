import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from poseforge.feature_align import adain_align, masked_recon_loss, stats


def test_stats_examples():
    assert stats([0.0, 2.0]) == (stats([0.0, 2.0]).__class__(1.0, 1.0))
    s = stats(np.full((3, 2), 7.5))
    assert (s.mean, s.std) == (7.5, 0.0)
    s = stats([4.0, 8.0])
    assert (s.mean, s.std) == (6.0, 2.0)
    with pytest.raises(ValueError):
        stats([])


def test_adain_examples():
    aligned, out = adain_align([0.0, 2.0], [4.0, 8.0])
    assert aligned.tolist() == [4.0, 8.0] and out.tolist() == [8.0, 16.0]
    z = np.array([4.0, 8.0, 5.0])
    img = np.array([8.0, 4.0, 5.0])
    assert np.allclose(adain_align(z, img)[0], z, atol=1e-15)


def test_constant_face_maps_to_image_mean():
    aligned, out = adain_align(np.full(4, 3.0), np.array([1.0, 2.0, 3.0, 6.0]))
    assert aligned.tolist() == [3.0] * 4
    assert out.tolist() == [4.0, 5.0, 6.0, 9.0]


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        adain_align(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError, match="shape mismatch"):
        masked_recon_loss(np.zeros(3), np.zeros(3), np.zeros(2))


def test_per_channel_mode():
    rng = np.random.default_rng(0)
    z, img = rng.normal(size=(3, 5, 5)), rng.normal(loc=[[[1.0]], [[-2.0]], [[5.0]]], size=(3, 5, 5))
    aligned, _ = adain_align(z, img, channel_axis=0)
    assert np.allclose(aligned.mean(axis=(1, 2)), img.mean(axis=(1, 2)), atol=1e-12)
    assert np.allclose(aligned.std(axis=(1, 2)), img.std(axis=(1, 2)), atol=1e-12)


def test_masked_loss_examples():
    assert masked_recon_loss([1.0, 2.0], [1.0, 2.0], [1.0, 0.0]) == 0
    assert masked_recon_loss([1.0], [0.0], [1.0]) == 4.0
    a, b = np.array([1.0, -2.0, 0.5]), np.array([0.0, 1.0, 1.0])
    assert masked_recon_loss(a, b, np.zeros(3)) == pytest.approx(((a - b) ** 2).mean(), rel=1e-15)


tensors = arrays(np.float64, st.integers(2, 40), elements=st.floats(-10, 10))


@st.composite
def pairs(draw):
    n = draw(st.integers(2, 40))
    el = st.floats(-10, 10)
    z = draw(arrays(np.float64, n, elements=el))
    img = draw(arrays(np.float64, n, elements=el))
    return z, img


@given(pairs())
def test_aligned_stats_match_and_idempotent(pair):
    z, img = pair
    if z.std() <= 1e-8:
        return
    aligned, _ = adain_align(z, img)
    s, t = stats(aligned), stats(img)
    assert abs(s.mean - t.mean) < 1e-12 and abs(s.std - t.std) < 1e-12
    if img.std() > 1e-8:
        again, _ = adain_align(aligned, img)
        assert np.abs(again - aligned).max() < 1e-12


@given(pairs(), st.integers(0, 39), st.floats(0, 1))
def test_mask_monotone_and_bounded(pair, j, bump):
    z, img = pair
    rng = np.random.default_rng(j)
    M = rng.uniform(size=z.shape)
    base = masked_recon_loss(z, img, M)
    M2 = M.copy()
    M2[j % len(M)] = min(1.0, M2[j % len(M)] + bump)
    assert masked_recon_loss(z, img, M2) >= base
    mse = ((z - img) ** 2).mean()
    assert mse * (1 - 1e-12) <= base <= 4 * mse * (1 + 1e-12)
