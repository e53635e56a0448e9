import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rslcad.pgm import read_pgm, write_pgm
from rslcad.preprocess import (
    BoundingBox,
    GrayImage,
    Laterality,
    PreprocessError,
    bilinear_resize,
    crop_normalize,
    largest_component,
    mask_bbox,
    mirror_if_right,
    otsu_threshold,
    preprocess_detailed,
    preprocess_pipeline,
    threshold_segment,
)
from rslcad.synthetic import SyntheticSpec, generate_synthetic

from oracles import bilinear_resize_direct, flood_components, iou, otsu_bruteforce


def gray(pixels, lat=Laterality.LEFT):
    return GrayImage(np.asarray(pixels, dtype=np.uint8), lat)


# --- thresholding ----------------------------------------------------------

def test_constant_image_gives_empty_mask():
    assert not threshold_segment(gray(np.full((20, 30), 77))).any()
    assert otsu_threshold(np.bincount([5] * 10, minlength=256)) is None


def test_square_on_background():
    px = np.full((100, 100), 10)
    px[40:70, 20:50] = 200
    mask = threshold_segment(gray(px))
    assert mask.sum() == 900
    assert mask[40:70, 20:50].all()


def test_zero_area_image():
    with pytest.raises(PreprocessError, match="threshold"):
        threshold_segment(GrayImage(np.zeros((0, 0), dtype=np.uint8), Laterality.LEFT))


def test_bimodal_histogram_matches_bruteforce():
    rng = np.random.default_rng(0)
    values = np.concatenate([rng.normal(50, 10, 3000), rng.normal(170, 20, 2000)])
    hist = np.bincount(np.clip(np.rint(values), 0, 255).astype(int), minlength=256)
    t = otsu_threshold(hist)
    assert t == otsu_bruteforce(hist)
    assert 60 < t < 160


@pytest.mark.parametrize("seed", range(100))
def test_otsu_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    kind = seed % 4
    if kind == 0:
        hist = rng.integers(0, 50, 256)
    elif kind == 1:
        hist = np.zeros(256, int)
        hist[rng.choice(256, size=rng.integers(2, 6), replace=False)] = rng.integers(1, 100, size=1)[0]
    elif kind == 2:
        hist = rng.multinomial(rng.integers(10, 5000), rng.dirichlet(np.full(256, 0.1)))
    else:
        hist = np.bincount(np.clip(rng.normal(rng.uniform(0, 255, 2)[rng.integers(0, 2, 800)], 15), 0, 255).astype(int),
                           minlength=256)
    assert otsu_threshold(hist) == otsu_bruteforce(hist)


# --- components ------------------------------------------------------------

def test_single_blob_unchanged():
    mask = np.zeros((10, 12), bool)
    mask[2:5, 3:9] = True
    out, box = largest_component(mask)
    np.testing.assert_array_equal(out, mask)
    assert box == BoundingBox(3, 2, 8, 4)


def test_larger_of_two_blobs_kept():
    mask = np.zeros((30, 30), bool)
    mask[1:6, 1:11] = True  # 50 pixels
    mask[20:24, 20:25] = True  # 20 pixels
    out, box = largest_component(mask)
    sizes = sorted(len(c) for c in flood_components(mask))
    assert sizes == [20, 50]
    assert out.sum() == 50 and out[1:6, 1:11].all()
    assert box == BoundingBox(1, 1, 10, 5)


def test_diagonal_pixels_are_connected():
    mask = np.eye(6, dtype=bool)
    mask[0, 5] = True
    out, _ = largest_component(mask)
    assert out.sum() == 6


def test_size_tie_goes_to_first_in_scan_order():
    mask = np.zeros((8, 8), bool)
    mask[5, 0:3] = True
    mask[1, 5:8] = True
    out, box = largest_component(mask)
    assert box == BoundingBox(5, 1, 7, 1)


def test_empty_mask_error():
    with pytest.raises(PreprocessError, match="no breast region found"):
        largest_component(np.zeros((4, 4), bool))


@pytest.mark.parametrize("seed", range(200))
def test_largest_component_subset_connected_and_maximal(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random(rng.integers(3, 20, size=2)) < rng.uniform(0.1, 0.6)
    if not mask.any():
        mask[0, 0] = True
    out, box = largest_component(mask)
    assert not (out & ~mask).any()
    comps = flood_components(out)
    assert len(comps) == 1
    assert len(comps[0]) == max(len(c) for c in flood_components(mask))
    assert box == mask_bbox(out)


# --- mirroring -------------------------------------------------------------

def test_mirror_examples():
    right = gray([[1, 2], [3, 4]], Laterality.RIGHT)
    flipped = mirror_if_right(right)
    np.testing.assert_array_equal(flipped.pixels, [[2, 1], [4, 3]])
    assert flipped.laterality is Laterality.LEFT
    left = gray([[1, 2], [3, 4]])
    assert mirror_if_right(left).pixels.tobytes() == left.pixels.tobytes()


def test_unknown_passes_through(caplog):
    img = gray([[9, 8]], Laterality.UNKNOWN)
    with caplog.at_level("DEBUG"):
        out = mirror_if_right(img)
    assert out.pixels.tobytes() == img.pixels.tobytes() and out.laterality is Laterality.UNKNOWN
    assert "unknown" in caplog.text


@pytest.mark.parametrize("seed", range(200))
def test_mirror_involution(seed):
    rng = np.random.default_rng(seed)
    px = rng.integers(0, 256, size=rng.integers(1, 16, size=2), dtype=np.uint8)
    once = mirror_if_right(GrayImage(px, Laterality.RIGHT))
    twice = mirror_if_right(GrayImage(once.pixels, Laterality.RIGHT))
    np.testing.assert_array_equal(twice.pixels, px)


# --- crop / resize ---------------------------------------------------------

def test_identity_resize_is_exact():
    px = np.random.default_rng(1).integers(0, 256, (17, 23), dtype=np.uint8)
    out = crop_normalize(gray(px), BoundingBox(0, 0, 22, 16), (17, 23))
    assert out.shape == (1, 17, 23)
    np.testing.assert_array_equal(out[0], px / 255.0)


def test_checkerboard_downscale():
    board = (np.indices((4, 4)).sum(axis=0) % 2) * 255
    out = crop_normalize(gray(board), BoundingBox(0, 0, 3, 3), (2, 2))
    np.testing.assert_allclose(out[0], bilinear_resize_direct(board, 2, 2) / 255.0, atol=1e-15)
    np.testing.assert_allclose(out[0], 0.5, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_resize_matches_pointwise_oracle(h, w, oh, ow, seed):
    src = np.random.default_rng(seed).integers(0, 256, (h, w)).astype(float)
    out = bilinear_resize(src, (oh, ow))
    assert out.shape == (oh, ow)
    np.testing.assert_allclose(out, bilinear_resize_direct(src, oh, ow), atol=1e-9)
    assert out.min() >= src.min() - 1e-9 and out.max() <= src.max() + 1e-9


def test_crop_box_outside_and_degenerate():
    img = gray(np.zeros((5, 5)))
    with pytest.raises(PreprocessError, match="crop"):
        crop_normalize(img, BoundingBox(0, 0, 5, 4), (4, 4))
    with pytest.raises(ValueError):
        BoundingBox(3, 0, 2, 4)


# --- pipeline --------------------------------------------------------------

@pytest.fixture(scope="module")
def synth():
    return generate_synthetic(SyntheticSpec(seed=5), 25)


def test_pipeline_shape_range_and_determinism(synth):
    for img in synth.images[:6]:
        a = preprocess_pipeline(img, (64, 48))
        assert a.shape == (1, 64, 48)
        assert 0.0 <= a.min() and a.max() <= 1.0
        assert a.tobytes() == preprocess_pipeline(img, (64, 48)).tobytes()


def test_pipeline_constant_image():
    with pytest.raises(PreprocessError, match=r"\[components\] no breast region found"):
        preprocess_pipeline(gray(np.full((32, 32), 100)))


def test_pipeline_region_iou(synth):
    good_mask = good_box = 0
    for img, truth in zip(synth.images, synth.masks):
        result = preprocess_detailed(img, (64, 64))
        if img.laterality is Laterality.RIGHT:
            truth = truth[:, ::-1]
        good_mask += iou(result.mask, truth) >= 0.9
        tb = mask_bbox(truth)
        a = np.zeros(truth.shape, bool)
        b = np.zeros(truth.shape, bool)
        a[result.box.y0:result.box.y1 + 1, result.box.x0:result.box.x1 + 1] = True
        b[tb.y0:tb.y1 + 1, tb.x0:tb.x1 + 1] = True
        good_box += iou(a, b) >= 0.9
    assert good_mask >= 45 and good_box >= 45


def test_right_image_matches_its_mirror(synth):
    img = next(i for i in synth.images if i.laterality is Laterality.RIGHT)
    as_left = GrayImage(img.pixels[:, ::-1].copy(), Laterality.LEFT)
    assert preprocess_pipeline(img).tobytes() == preprocess_pipeline(as_left).tobytes()


# --- PGM -------------------------------------------------------------------

def test_pgm_round_trip(tmp_path):
    px = np.random.default_rng(2).integers(0, 256, (7, 11), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", px)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), px)


def test_pgm_comments_and_errors(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x05\x0a")
    np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[5, 10]])
    (tmp_path / "t.pgm").write_bytes(b"P5\n2 2\n255\n\x01")
    with pytest.raises(ValueError, match="truncated"):
        read_pgm(tmp_path / "t.pgm")
    (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n7\n")
    with pytest.raises(ValueError, match="binary PGM"):
        read_pgm(tmp_path / "p2.pgm")
    (tmp_path / "w.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(ValueError, match="8-bit"):
        read_pgm(tmp_path / "w.pgm")
