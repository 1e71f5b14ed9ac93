import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from foamfed import imaging
from foamfed.imaging import ELLIPSE, RECT, Kernel


def refl(i, n):
    # reflect-101 index, written out independently of np.pad
    if n == 1:
        return 0
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * n - 2 - i
    return i


def masks(h=32, w=32):
    return arrays(np.uint8, (h, w), elements=st.integers(0, 1))


def flood_fill_areas(m):
    h, w = m.shape
    seen = np.zeros_like(m, dtype=bool)
    areas = []
    for y in range(h):
        for x in range(w):
            if m[y, x] and not seen[y, x]:
                seen[y, x] = True
                q, n = deque([(y, x)]), 0
                while q:
                    cy, cx = q.popleft()
                    n += 1
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = cy + dy, cx + dx
                            if 0 <= ny < h and 0 <= nx < w and m[ny, nx] and not seen[ny, nx]:
                                seen[ny, nx] = True
                                q.append((ny, nx))
                areas.append(n)
    return sorted(areas)


def brute_erode(m, fp):
    h, w = m.shape
    ry, rx = fp.shape[0] // 2, fp.shape[1] // 2
    out = np.zeros_like(m)
    for y in range(h):
        for x in range(w):
            out[y, x] = all(m[refl(y + i - ry, h), refl(x + j - rx, w)]
                            for i, j in zip(*np.nonzero(fp)))
    return out


def brute_dilate(m, fp):
    h, w = m.shape
    ry, rx = fp.shape[0] // 2, fp.shape[1] // 2
    out = np.zeros_like(m)
    for y in range(h):
        for x in range(w):
            out[y, x] = any(m[refl(y - (i - ry), h), refl(x - (j - rx), w)]
                            for i, j in zip(*np.nonzero(fp)))
    return out


# -- colour and intensity ------------------------------------------------------


@pytest.mark.parametrize("rgb, expected", [((255, 255, 255), 255), ((0, 0, 0), 0), ((255, 0, 0), 76)])
def test_grayscale_single_pixel(rgb, expected):
    img = np.array([[rgb]], dtype=np.uint8)
    assert imaging.to_grayscale(img)[0, 0] == expected


def test_mean_brightness():
    assert imaging.mean_brightness(np.zeros((4, 4), np.uint8)) == 0.0
    assert imaging.mean_brightness(np.full((4, 4), 255, np.uint8)) == 255.0
    assert imaging.mean_brightness(np.array([[100, 200]], np.uint8)) == 150.0


def test_linear_scale():
    g = np.arange(256, dtype=np.uint8).reshape(16, 16)
    assert np.array_equal(imaging.linear_scale(g, 1.0, 0.0), g)
    px = np.array([[100, 200]], np.uint8)
    assert imaging.linear_scale(px, 1.5, 40).tolist() == [[190, 255]]


# -- CLAHE -----------------------------------------------------------------------


@pytest.mark.parametrize("level", [0, 37, 128, 255])
def test_clahe_constant_maps_to_single_level(level):
    out = imaging.clahe(np.full((64, 64), level, np.uint8))
    assert len(np.unique(out)) == 1


def test_clahe_one_tile_without_clip_is_histogram_equalization():
    g = np.full((64, 64), 200, np.uint8)
    g[:32, :32] = 50
    g[32:, 32:] = 50
    out = imaging.clahe(g, clip_limit=math.inf, tiles=(1, 1))
    # brute-force equalization: v -> round_half_up(255 * #(pixels <= v) / N)
    flat = g.ravel().tolist()
    expected = {v: math.floor(255 * sum(p <= v for p in flat) / len(flat) + 0.5) for v in set(flat)}
    assert expected == {50: 128, 200: 255}
    for v, e in expected.items():
        assert np.all(out[g == v] == e)


def test_clahe_rejects_grid_larger_than_image():
    with pytest.raises(ValueError):
        imaging.clahe(np.zeros((4, 4), np.uint8), tiles=(8, 8))


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, (40, 48)), st.floats(0.5, 8.0), st.integers(1, 4), st.integers(1, 4))
def test_clahe_range_and_determinism(g, clip, tx, ty):
    a = imaging.clahe(g, clip, (tx, ty))
    assert a.dtype == np.uint8 and a.shape == g.shape
    assert np.array_equal(a, imaging.clahe(g, clip, (tx, ty)))


# -- denoising -------------------------------------------------------------------


def test_nlmeans_constant_unchanged():
    g = np.full((20, 20), 93, np.uint8)
    assert np.array_equal(imaging.denoise_nlmeans(g), g)


def test_nlmeans_tiny_h_is_near_identity():
    g = np.random.default_rng(0).integers(0, 256, (24, 24)).astype(np.uint8)
    out = imaging.denoise_nlmeans(g, h=1e-3)
    assert np.abs(out.astype(int) - g).max() <= 1


def test_nlmeans_single_bright_pixel_matches_direct_loop():
    g = np.full((31, 31), 50, np.uint8)
    g[15, 15] = 200
    h, t, s = 10.0, 7, 21
    rt, rs = t // 2, s // 2
    f = g.astype(float)

    def patch(y, x):
        return np.array([[f[refl(y + i, 31), refl(x + j, 31)] for j in range(-rt, rt + 1)]
                         for i in range(-rt, rt + 1)])

    ref = patch(15, 15)
    num = den = 0.0
    for dy in range(-rs, rs + 1):
        for dx in range(-rs, rs + 1):
            y, x = refl(15 + dy, 31), refl(15 + dx, 31)
            wgt = math.exp(-np.mean((ref - patch(15 + dy, 15 + dx)) ** 2) / (h * h))
            num += wgt * f[y, x]
            den += wgt
    expected = math.floor(num / den + 0.5)
    out = imaging.denoise_nlmeans(g, h, t, s)
    assert out[15, 15] == expected
    assert out[15, 15] < 200


# -- bilateral -------------------------------------------------------------------


def test_bilateral_constant_unchanged():
    g = np.full((16, 16), 140, np.uint8)
    assert np.array_equal(imaging.bilateral_filter(g), g)


def test_bilateral_infinite_color_sigma_is_gaussian_blur():
    g = np.random.default_rng(1).integers(0, 256, (18, 22)).astype(np.uint8)
    d, ss = 5, 2.0
    r = d // 2
    out = imaging.bilateral_filter(g, d, math.inf, ss)
    hgt, wid = g.shape
    for y in range(hgt):
        for x in range(wid):
            num = den = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    wgt = math.exp(-(dy * dy + dx * dx) / (2 * ss * ss))
                    num += wgt * g[refl(y + dy, hgt), refl(x + dx, wid)]
                    den += wgt
            assert abs(int(out[y, x]) - num / den) <= 1


def test_bilateral_preserves_step_edge():
    g = np.zeros((16, 16), np.uint8)
    g[:, 8:] = 255
    out = imaging.bilateral_filter(g, 9, 10.0, 75.0)
    assert np.abs(out[:, 7:9].astype(int) - g[:, 7:9]).max() < 5


# -- adaptive threshold ------------------------------------------------------------


def direct_local_mean(g, y, x, block):
    k = imaging.gaussian_kernel_1d(block)
    r = block // 2
    h, w = g.shape
    return sum(k[i] * k[j] * float(g[refl(y + i - r, h), refl(x + j - r, w)])
               for i in range(block) for j in range(block))


def test_adaptive_threshold_matches_direct_window_mean():
    g = np.random.default_rng(2).integers(0, 256, (20, 17)).astype(np.uint8)
    out = imaging.adaptive_threshold_gaussian(g, 11, 2.0)
    for y in range(20):
        for x in range(17):
            thr = direct_local_mean(g, y, x, 11) - 2.0
            assert out[y, x] == int(g[y, x] > thr)


def test_adaptive_threshold_constant_image_is_all_foam():
    # bright-is-foam polarity: v > mean - c holds everywhere when c > 0
    out = imaging.adaptive_threshold_gaussian(np.full((12, 12), 80, np.uint8), 11, 2.0)
    assert out.all()


def test_adaptive_threshold_bright_pixel_on_dark_field():
    g = np.zeros((25, 25), np.uint8)
    g[12, 12] = 255
    out = imaging.adaptive_threshold_gaussian(g, 11, 2.0)
    assert out[12, 12] == 1
    # dark pixels drop out exactly where the spike lifts their window mean above c
    for y in range(25):
        for x in range(25):
            if (y, x) != (12, 12):
                assert out[y, x] == int(direct_local_mean(g, y, x, 11) < 2.0)
    assert out[11, 12] == 0 and out[0, 0] == 1


def test_adaptive_threshold_large_negative_c_sets_nothing():
    g = np.random.default_rng(3).integers(0, 256, (16, 16)).astype(np.uint8)
    assert not imaging.adaptive_threshold_gaussian(g, 11, -255.0).any()
    assert imaging.adaptive_threshold_gaussian(g, 11, 256.0).all()


# -- morphology --------------------------------------------------------------------


def test_ellipse_footprint_5x5():
    assert Kernel(ELLIPSE, 5, 5).footprint().astype(int).tolist() == [
        [0, 0, 1, 0, 0],
        [1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1],
        [0, 0, 1, 0, 0],
    ]


def test_kernel_rejects_even_sizes():
    with pytest.raises(ValueError):
        Kernel(RECT, 4, 3)


def test_open_removes_isolated_pixel_keeps_square():
    m = np.zeros((20, 20), np.uint8)
    m[2, 2] = 1
    m[6:16, 6:16] = 1
    out = imaging.morphology(m, "open", Kernel(RECT, 3, 3))
    assert out[2, 2] == 0
    expected = m.copy()
    expected[2, 2] = 0
    assert np.array_equal(out, expected)


def test_close_fills_one_pixel_hole():
    m = np.zeros((12, 12), np.uint8)
    m[2:10, 2:10] = 1
    m[5, 5] = 0
    fp = Kernel(RECT, 3, 3).footprint()
    expected = brute_erode(brute_dilate(m, fp), fp)
    out = imaging.morphology(m, "close", Kernel(RECT, 3, 3))
    assert out[5, 5] == 1
    assert np.array_equal(out, expected)


@settings(max_examples=30, deadline=None)
@given(masks(14, 13), st.sampled_from([Kernel(RECT, 3, 3), Kernel(ELLIPSE, 5, 5), Kernel(RECT, 5, 3)]))
def test_erode_dilate_match_brute_force(m, k):
    fp = k.footprint()
    assert np.array_equal(imaging.morphology(m, "erode", k), brute_erode(m, fp))
    assert np.array_equal(imaging.morphology(m, "dilate", k), brute_dilate(m, fp))


@settings(max_examples=50, deadline=None)
@given(masks(), st.sampled_from([Kernel(RECT, 3, 3), Kernel(ELLIPSE, 5, 5)]))
def test_erode_dilate_duality(m, k):
    assert np.array_equal(imaging.morphology(m, "dilate", k), 1 - imaging.morphology(1 - m, "erode", k))


@settings(max_examples=50, deadline=None)
@given(masks(), st.sampled_from([Kernel(RECT, 3, 3), Kernel(ELLIPSE, 5, 5)]))
def test_open_is_idempotent(m, k):
    once = imaging.morphology(m, "open", k)
    assert np.array_equal(imaging.morphology(once, "open", k), once)


# -- connected components ------------------------------------------------------------


def blob(n, shape=(40, 40), origin=(2, 2)):
    m = np.zeros(shape, np.uint8)
    y0, x0 = origin
    for i in range(n):
        m[y0 + i // 10, x0 + i % 10] = 1
    return m


def test_component_filter_threshold_is_inclusive():
    assert not imaging.connected_components_filter(blob(74), 75).any()
    assert np.array_equal(imaging.connected_components_filter(blob(75), 75), blob(75))


def test_component_filter_keeps_only_large_blob():
    big = blob(100, origin=(20, 20))
    m = big | blob(5)
    assert np.array_equal(imaging.connected_components_filter(m, 75), big)


def test_diagonal_pixels_are_one_component():
    assert imaging.component_areas(np.eye(6, dtype=np.uint8)) == [6]


@settings(max_examples=60, deadline=None)
@given(masks())
def test_component_areas_match_flood_fill(m):
    assert sorted(imaging.component_areas(m)) == flood_fill_areas(m)


@settings(max_examples=40, deadline=None)
@given(masks(), st.integers(0, 20))
def test_component_filter_is_subset(m, min_area):
    out = imaging.connected_components_filter(m, min_area)
    assert np.all(out <= m)
    assert all(a >= min_area for a in imaging.component_areas(out))


# -- resize -------------------------------------------------------------------------


def test_resize_max_dim_cases():
    img = np.zeros((1024, 1024), np.uint8)
    assert imaging.resize(img, max_dim=1024).shape == (1024, 1024)
    assert imaging.resize(np.zeros((1024, 2048), np.uint8), max_dim=1024).shape == (512, 1024)


def test_resize_constant_stays_constant():
    img = np.full((30, 50, 3), (10, 120, 250), np.uint8)
    out = imaging.resize(img, target=(17, 11))
    assert out.shape == (11, 17, 3)
    assert np.all(out == np.array([10, 120, 250], np.uint8))


@given(st.integers(1, 3000), st.integers(1, 3000), st.integers(8, 1024))
def test_fit_max_dim_keeps_aspect(w, h, max_dim):
    nw, nh = imaging.fit_max_dim(w, h, max_dim)
    assert max(nw, nh) <= max(max_dim, 1) or (nw, nh) == (w, h)
    assert nw <= w and nh <= h
    # within one pixel of the exact aspect-preserving size
    assert abs(nh - nw * h / w) <= 1 or abs(nw - nh * w / h) <= 1


# -- I/O ----------------------------------------------------------------------------


def test_png_roundtrip_and_mask_encoding(tmp_path):
    img = np.random.default_rng(4).integers(0, 256, (9, 7, 3)).astype(np.uint8)
    assert np.array_equal(imaging.decode_image(imaging.encode_png(img)), img)
    m = (img[..., 0] > 128).astype(np.uint8)
    path = imaging.write_atomic(tmp_path / "m.png", imaging.mask_to_png(m))
    raw = imaging.decode_image(path.read_bytes())
    assert set(np.unique(raw)) <= {0, 255}
    assert np.array_equal(imaging.read_mask(path), m)


def test_decode_rejects_garbage():
    with pytest.raises(imaging.ImageDecodeError):
        imaging.decode_image(b"not an image")
