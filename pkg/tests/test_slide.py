import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msmil.errors import (DimensionError, FormatError, GeometryError,
                          SizeError, TissueScarcityError)
from msmil.slide import (EXTENTS, PATCH_SIZE, PatchSpec, SlideImage,
                         build_multiscale_specs, dump_patches, extract_patch,
                         load_slide, sample_bag, sample_origin,
                         synthetic_slide, tissue_check, write_bag_manifest)


def gen(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------- origins

def test_sample_origin_single_valid_position():
    slide = synthetic_slide(256, 256, (0, 0, 0))
    assert sample_origin(slide, gen()) == (0, 0)


def test_sample_origin_deterministic():
    slide = synthetic_slide(4096, 4096, (0, 0, 0))
    a = [sample_origin(slide, gen(7)) for _ in range(5)]
    b = []
    r = gen(7)
    for _ in range(5):
        b.append(sample_origin(slide, r))
    r2 = gen(7)
    c = [sample_origin(slide, r2) for _ in range(5)]
    assert b == c
    assert a == [a[0]] * 5  # fresh generator, same first draw


def test_sample_origin_too_small():
    slide = synthetic_slide(255, 300, (0, 0, 0))
    with pytest.raises(DimensionError):
        sample_origin(slide, gen())


def test_sample_origin_uniform_chi_square():
    """10^6 draws on a 1280x1280 slide: empirical distribution over
    [0, 1024]^2 is uniform within chi-square tolerance."""
    slide = synthetic_slide(1280, 1280, (0, 0, 0))
    r = gen(99)
    n = 10 ** 6
    xs = np.empty(n, dtype=np.int64)
    ys = np.empty(n, dtype=np.int64)
    for i in range(n):
        xs[i], ys[i] = sample_origin(slide, r)
    assert xs.min() >= 0 and xs.max() <= 1024
    assert ys.min() >= 0 and ys.max() <= 1024
    # 25 bins per axis; binomial counts, df = 24
    for vals in (xs, ys):
        counts = np.bincount(vals * 25 // 1025, minlength=25)
        expected = n / 25
        stat = ((counts - expected) ** 2 / expected).sum()
        # 99.99th percentile of chi2(24) is ~55.2
        assert stat < 55.2, f"chi-square statistic {stat:.1f}"


# ---------------------------------------------------------------- tissue

def test_tissue_check_all_white_rejected():
    assert tissue_check(np.full((256, 256, 3), 255, np.uint8)) is False


def test_tissue_check_all_black_accepted():
    assert tissue_check(np.zeros((256, 256, 3), np.uint8)) is True


def test_tissue_check_exact_threshold_rejected():
    block = np.zeros((256, 256, 3), np.uint8)
    block[:, :, 1] = 190  # green mean exactly 190: not strictly below
    assert tissue_check(block) is False
    block[:, :, 1] = 189
    assert tissue_check(block) is True


def test_tissue_check_wrong_shape():
    with pytest.raises(DimensionError):
        tissue_check(np.zeros((128, 256, 3), np.uint8))


# ---------------------------------------------------------------- geometry

def test_specs_interior_origin_centered():
    specs = build_multiscale_specs((1920, 1920), (4096, 4096))
    assert [(s.origin_x, s.origin_y, s.extent) for s in specs] == [
        (1920, 1920, 256), (1792, 1792, 512), (1536, 1536, 1024)]


def test_specs_corner_origin_single_shift():
    specs = build_multiscale_specs((0, 0), (4096, 4096))
    assert (specs[1].origin_x, specs[1].origin_y) == (0, 0)


def test_specs_corner_origin_double_shift():
    specs = build_multiscale_specs((0, 0), (4096, 4096))
    assert (specs[2].origin_x, specs[2].origin_y) == (128, 128)


def test_specs_slide_too_small():
    with pytest.raises(DimensionError):
        build_multiscale_specs((0, 0), (1023, 4096))


def test_specs_origin_outside():
    with pytest.raises(GeometryError):
        build_multiscale_specs((4000, 0), (4096, 4096))


def test_specs_minimum_slide_always_fits():
    # 1024-wide slide: the scale-1/4 region has exactly one valid position
    for x in (0, 100, 300, 768):
        specs = build_multiscale_specs((x, x), (1024, 1024))
        assert (specs[2].origin_x, specs[2].origin_y) == (0, 0)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_specs_random_always_in_bounds(data):
    w = data.draw(st.integers(1024, 3000))
    h = data.draw(st.integers(1024, 3000))
    x = data.draw(st.integers(0, w - PATCH_SIZE))
    y = data.draw(st.integers(0, h - PATCH_SIZE))
    specs = build_multiscale_specs((x, y), (w, h))
    assert [s.extent for s in specs] == list(EXTENTS)
    for s in specs:
        assert 0 <= s.origin_x and s.origin_x + s.extent <= w
        assert 0 <= s.origin_y and s.origin_y + s.extent <= h
        assert round(s.extent * s.scale) == PATCH_SIZE
    # interior origins are never repositioned
    for s in specs[1:]:
        centered_x = x - s.extent // 2 + 128
        centered_y = y - s.extent // 2 + 128
        if 0 <= centered_x <= w - s.extent:
            assert s.origin_x == centered_x
        if 0 <= centered_y <= h - s.extent:
            assert s.origin_y == centered_y


# ---------------------------------------------------------------- patches

def test_extract_patch_scale1_identity(half_slide):
    spec = PatchSpec(100, 200, 256, 1.0)
    patch = extract_patch(half_slide, spec)
    assert np.array_equal(patch, half_slide.pixels[200:456, 100:356])


def test_extract_patch_constant_color_all_scales():
    slide = synthetic_slide(1024, 1024, (37, 141, 202))
    for spec in build_multiscale_specs((300, 300), (1024, 1024)):
        patch = extract_patch(slide, spec)
        assert patch.shape == (256, 256, 3)
        assert np.array_equal(np.unique(patch.reshape(-1, 3), axis=0),
                              [[37, 141, 202]])


def test_extract_patch_checkerboard_rounds_half_to_even():
    pixels = np.zeros((512, 512, 3), np.uint8)
    pixels[::2, 1::2] = 255
    pixels[1::2, ::2] = 255
    slide = SlideImage(id="cb", pixels=np.pad(
        pixels, ((0, 512), (0, 512), (0, 0))))
    patch = extract_patch(slide, PatchSpec(0, 0, 512, 0.5))
    # each 2x2 block averages to 127.5; round-half-to-even gives 128
    assert np.array_equal(np.unique(patch), [128])


def test_extract_patch_quarter_scale_block_means():
    rng = gen(3)
    pixels = rng.integers(0, 256, size=(1024, 1024, 3), dtype=np.uint16)
    slide = SlideImage(id="r", pixels=pixels.astype(np.uint8))
    patch = extract_patch(slide, PatchSpec(0, 0, 1024, 0.25))
    blocks = slide.pixels.reshape(256, 4, 256, 4, 3).astype(np.float64)
    means = blocks.mean(axis=(1, 3))
    # round-half-even equals numpy's rint on exact .5 fractions
    assert np.array_equal(patch, np.rint(means).astype(np.uint8))


def test_extract_patch_out_of_bounds(black_slide):
    with pytest.raises(GeometryError):
        extract_patch(black_slide, PatchSpec(900, 0, 256, 1.0))


# ---------------------------------------------------------------- bags

def test_sample_bag_all_tissue(black_slide):
    triples = sample_bag(black_slide, 10, gen(5))
    assert len(triples) == 10
    for t in triples:
        assert t.pixels[0].shape == (256, 256, 3)
        assert tissue_check(t.pixels[0])


def test_sample_bag_white_slide_scarcity(white_slide):
    with pytest.raises(TissueScarcityError) as err:
        sample_bag(white_slide, 2, gen(5), max_attempts=40)
    assert "white" in str(err.value)


def test_sample_bag_deterministic(half_slide):
    a = sample_bag(half_slide, 8, gen(11))
    b = sample_bag(half_slide, 8, gen(11))
    for ta, tb in zip(a, b):
        assert ta.specs == tb.specs
        for pa, pb in zip(ta.pixels, tb.pixels):
            assert np.array_equal(pa, pb)


def test_sample_bag_rejections_reset(half_slide):
    # plenty of white area: rejections happen, but sampling still succeeds
    triples = sample_bag(half_slide, 12, gen(2), max_attempts=500)
    assert len(triples) == 12


def test_sample_bag_np_validation(black_slide):
    with pytest.raises(SizeError):
        sample_bag(black_slide, 0, gen())


# ---------------------------------------------------------------- files

def test_load_slide_png_roundtrip(tmp_path, rng):
    from PIL import Image
    pixels = rng.integers(0, 256, size=(300, 280, 3)).astype(np.uint8)
    path = tmp_path / "s1.png"
    Image.fromarray(pixels, "RGB").save(path)
    slide = load_slide(path, label="FN")
    assert slide.id == "s1"
    assert slide.label == "FN"
    assert np.array_equal(slide.pixels, pixels)
    assert (slide.width, slide.height) == (280, 300)


def test_load_slide_tiff_roundtrip(tmp_path, rng):
    from PIL import Image
    pixels = rng.integers(0, 256, size=(260, 260, 3)).astype(np.uint8)
    path = tmp_path / "s2.tiff"
    Image.fromarray(pixels, "RGB").save(path, compression="tiff_deflate")
    assert np.array_equal(load_slide(path).pixels, pixels)


def test_load_slide_rejects_non_rgb(tmp_path):
    from PIL import Image
    path = tmp_path / "gray.png"
    Image.fromarray(np.zeros((64, 64), np.uint8), "L").save(path)
    with pytest.raises(FormatError):
        load_slide(path)


def test_load_slide_missing_file(tmp_path):
    with pytest.raises(FormatError):
        load_slide(tmp_path / "absent.png")


def test_bag_manifest_csv(tmp_path, black_slide):
    triples = sample_bag(black_slide, 3, gen(1))
    path = tmp_path / "manifest.csv"
    write_bag_manifest(path, [("black", triples)])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "slide_id,patch_index,scale,origin_x,origin_y,extent"
    assert len(lines) == 1 + 3 * 3
    assert lines[1].startswith("black,0,1,")
    assert ",1/2," in lines[2] and ",1/4," in lines[3]


def test_dump_patches_names(tmp_path, black_slide):
    triples = sample_bag(black_slide, 2, gen(1))
    written = dump_patches(tmp_path, "black", triples)
    names = sorted(p.name for p in written)
    assert names == ["black_0_s1.png", "black_0_s2.png", "black_0_s4.png",
                     "black_1_s1.png", "black_1_s2.png", "black_1_s4.png"]
