import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import block_mean

from ifdreid.datamodel import Sample
from ifdreid.errors import ValidationError
from ifdreid.masking import build_clothing_mask, clothing_masked_image, clothing_region_mask, downsample_mask

PROPERTY = settings(max_examples=120, deadline=None)


@st.composite
def samples(draw):
    h = draw(st.integers(1, 12))
    w = draw(st.integers(1, 12))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    image = rng.random((h, w, 3))
    parsing = rng.integers(0, 9, size=(h, w))
    return Sample(image, parsing, 0, 0, 0)


@PROPERTY
@given(samples())
def test_mask_is_binary_and_matches_clothing_codes(sample):
    from ifdreid.datamodel import default_vocabulary

    vocab = default_vocabulary()
    m = clothing_region_mask(sample.parsing, vocab)
    assert set(np.unique(m)) <= {0, 1}
    assert np.array_equal(m == 1, np.isin(sample.parsing, [3, 4, 5]))


@PROPERTY
@given(samples(), st.floats(0.0, 1.0))
def test_masked_image_complements_mask(sample, fill):
    from ifdreid.datamodel import default_vocabulary

    vocab = default_vocabulary()
    m = clothing_region_mask(sample.parsing, vocab).astype(bool)
    masked = clothing_masked_image(sample, vocab, fill)
    # outside the clothing region the image is untouched, inside it is the fill
    assert np.array_equal(masked[~m], sample.image[~m])
    assert np.all(masked[m] == fill)
    if fill == 0.0:
        assert np.array_equal(masked + sample.image * m[..., None], sample.image)


def test_masked_image_does_not_mutate_input(vocab):
    s = Sample(np.ones((2, 2, 3)), np.array([[3, 0], [0, 4]]), 0, 0, 0)
    clothing_masked_image(s, vocab)
    assert s.image.min() == 1.0


def test_unknown_codes_listed(vocab):
    with pytest.raises(ValidationError, match=r"\[12, 40\]"):
        clothing_region_mask(np.array([[0, 12], [40, 3]]), vocab)


@PROPERTY
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_downsample_equals_block_mean(h, w, bh, bw, seed):
    mask = np.random.default_rng(seed).integers(0, 2, size=(h * bh, w * bw))
    got = downsample_mask(mask, (h, w))
    assert np.allclose(got, block_mean(mask, (h, w)), atol=1e-12, rtol=0)


@PROPERTY
@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
def test_downsample_any_ratio_preserves_mass(H, W, h, w, seed):
    mask = np.random.default_rng(seed).integers(0, 2, size=(H, W))
    got = downsample_mask(mask, (h, w))
    assert got.shape == (h, w)
    assert got.min() >= 0.0 and got.max() <= 1.0
    # every output cell covers H*W/(h*w) source pixels, so the average is preserved
    assert np.isclose(got.mean(), mask.mean(), atol=1e-9)


def test_downsample_constant_masks():
    assert np.array_equal(downsample_mask(np.ones((16, 8)), (2, 1)), np.ones((2, 1)))
    assert np.array_equal(downsample_mask(np.zeros((16, 8)), (4, 4)), np.zeros((4, 4)))


def test_downsample_rejects_empty_target():
    with pytest.raises(ValueError):
        downsample_mask(np.ones((4, 4)), (0, 2))


def test_build_clothing_mask(vocab):
    parsing = np.zeros((16, 8), dtype=int)
    parsing[8:, :] = 4
    cm = build_clothing_mask(parsing, vocab, (2, 1))
    assert cm.resolution == (2, 1)
    assert cm.feature.ravel().tolist() == [0.0, 1.0]
    assert cm.pixel.sum() == 64
