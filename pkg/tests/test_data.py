import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimgen.tooling.data import (
    BACKGROUNDS,
    COLORS,
    DatasetSpec,
    caption_for,
    caption_vocabulary,
    gen_dataset,
    quality_score,
    render,
    style_image,
)
from mimgen.tooling.imageio import ImageFormatError, decode_ppm, encode_ppm, read_image, write_image


def test_eighteen_combinations():
    combos = DatasetSpec.combinations()
    assert len(combos) == 18 == len(set(combos))
    samples = gen_dataset(DatasetSpec(count=18, image_size=16, seed=3))
    assert len({s.caption for s in samples}) == 18


def test_same_seed_same_bytes():
    a = gen_dataset(DatasetSpec(count=6, seed=5))
    b = gen_dataset(DatasetSpec(count=6, seed=5))
    c = gen_dataset(DatasetSpec(count=6, seed=6))
    assert all(x.pixels.tobytes() == y.pixels.tobytes() and x.caption == y.caption for x, y in zip(a, b))
    assert any(x.pixels.tobytes() != y.pixels.tobytes() for x, y in zip(a, c))


def test_pixels_are_eight_bit_exact():
    for s in gen_dataset(DatasetSpec(count=4)):
        assert s.pixels.dtype == np.float32 and s.pixels.shape == (32, 32, 3)
        assert np.array_equal(decode_ppm(encode_ppm(s.pixels)), s.pixels)


def _histogram_oracle(pixels):
    """Guess (color, background) from pixel statistics alone."""
    luma = pixels.mean(axis=-1)
    corners = np.concatenate([luma[:2, :2].ravel(), luma[-2:, -2:].ravel(), luma[:2, -2:].ravel(),
                              luma[-2:, :2].ravel()])
    bg = float(np.median(corners))
    background = min(BACKGROUNDS, key=lambda k: abs(BACKGROUNDS[k] - bg))
    fg = pixels[np.abs(luma - bg) > 0.2]
    channel = int(np.argmax(fg.mean(axis=0)))
    color = {0: "red", 1: "green", 2: "blue"}[channel]
    return color, background, len(fg)


def test_caption_matches_histogram():
    for s in gen_dataset(DatasetSpec(count=36, seed=1)):
        color, background, n_fg = _histogram_oracle(s.pixels)
        assert (color, background) == (s.attributes["color"], s.attributes["background"]), s.caption
        assert n_fg > 30


def test_shape_area_oracle():
    # unmix each pixel into its foreground coverage, then sum to get the area
    r = 10.0
    areas = {}
    for shape in ("circle", "square", "triangle"):
        luma = render(shape, "red", "light", 48, 48, 24.0, 24.0, r).mean(axis=-1).astype(np.float64)
        bg, fg = luma[0, 0], luma[24, 24]  # corner is pure background, center pure foreground
        areas[shape] = ((bg - luma) / (bg - fg)).sum()
    assert areas["circle"] == pytest.approx(np.pi * r * r, rel=0.01)
    assert areas["square"] == pytest.approx((1.7 * r) ** 2, rel=0.01)
    assert areas["triangle"] == pytest.approx(1.8 * r * r, rel=0.01)


def test_micro_matches_crop():
    for s in gen_dataset(DatasetSpec(count=10, seed=2)):
        m = s.micro
        assert 0 <= m.crop_top <= m.orig_height - 32 and 0 <= m.crop_left <= m.orig_width - 32
        cy, cx = s.attributes["center"]
        full = render(s.attributes["shape"], s.attributes["color"], s.attributes["background"],
                      int(m.orig_height), int(m.orig_width), cy + m.crop_top, cx + m.crop_left,
                      s.attributes["radius"])
        top, left = int(m.crop_top), int(m.crop_left)
        assert np.array_equal(full[top:top + 32, left:left + 32], s.pixels)
        assert m.quality == quality_score(s.pixels)


def test_quality_is_contrast():
    flat = np.full((8, 8, 3), 0.5, dtype=np.float32)
    assert quality_score(flat) == 0.0
    split = flat.copy()
    split[:, :4] = 0.0
    split[:, 4:] = 1.0
    assert quality_score(split) == pytest.approx(5.0)


def test_vocabulary_covers_grammar():
    vocab = caption_vocabulary()
    for color in COLORS:
        ids = vocab.encode(caption_for(color, "circle", "dark"), 4)
        assert vocab.decode(ids) == f"{color} circle dark"


def test_style_image_outside_grammar():
    img = style_image()
    assert img.shape == (32, 32, 3)
    assert len(np.unique(img.reshape(-1, 3), axis=0)) == 2
    assert np.array_equal(img, style_image())


# PPM

def test_ppm_header_and_layout():
    px = np.zeros((2, 3, 3), dtype=np.float32)
    px[1, 2] = [1.0, 0.0, 128 / 255]
    blob = encode_ppm(px)
    assert blob.startswith(b"P6\n3 2\n255\n")
    assert len(blob) == len(b"P6\n3 2\n255\n") + 2 * 3 * 3
    assert blob[-3:] == bytes([255, 0, 128])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 10 ** 6))
def test_ppm_round_trip(h, w, seed):
    rng = np.random.default_rng(seed)
    exact = (rng.integers(0, 256, size=(h, w, 3)) / 255).astype(np.float32)
    assert np.array_equal(decode_ppm(encode_ppm(exact)), exact)
    arbitrary = rng.random((h, w, 3))
    assert np.abs(decode_ppm(encode_ppm(arbitrary)) - arbitrary).max() <= 0.5 / 255 + 1e-7


def test_ppm_file_round_trip(tmp_path):
    px = style_image(size=8)
    write_image(px, tmp_path / "x.ppm")
    assert np.array_equal(read_image(tmp_path / "x.ppm"), px)


def test_ppm_comments_are_skipped():
    assert decode_ppm(b"P6\n# made by hand\n1 1\n255\n\x00\xff\x10").tolist() == [
        [[0.0, 1.0, np.float32(16 / 255)]]]


@pytest.mark.parametrize("blob", [
    b"P3\n1 1\n255\n000",
    b"P6\n1 1\n65535\n\0\0\0\0\0\0",
    b"P6\n2 2\n255\n\0\0\0",
    b"P6\n1",
    b"P6\nx 1\n255\n\0\0\0",
])
def test_malformed_ppm(blob):
    with pytest.raises(ImageFormatError):
        decode_ppm(blob)
