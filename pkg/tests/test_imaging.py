import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glab import imaging
from glab.autodiff import Tensor, backward
from glab.errors import ContractError, FormatError
from oracles import canny_reference, central_difference, rel_err


# -- canny --------------------------------------------------------------------------

def test_constant_image_has_no_edges():
    assert imaging.canny(np.full((16, 16), 0.3), 0.0, 0.0).count() == 0


def test_vertical_step_edges_stay_next_to_the_boundary():
    img = np.zeros((32, 32))
    img[:, 16:] = 1.0
    mask = imaging.canny(img, 0.1, 0.2).mask
    assert mask.any()
    cols = set(np.nonzero(mask)[1].tolist())
    assert cols <= {15, 16}
    np.testing.assert_array_equal(mask, canny_reference(img, 0.1, 0.2))


def test_matches_reference_pipeline_on_random_images():
    rng = np.random.default_rng(7)
    for k in range(50):
        img = rng.random((12 + k % 5, 12 + k % 7))
        if k % 2:
            img = imaging.ndimage.gaussian_filter(img, 1.0)
        mag = np.hypot(*np.gradient(img)).max() * 4
        lo, hi = sorted(rng.uniform(0, mag, size=2))
        np.testing.assert_array_equal(imaging.canny(img, lo, hi).mask, canny_reference(img, lo, hi))


@given(st.integers(0, 10_000), st.sampled_from([0.25, 0.5, 2.0, 8.0]))
def test_homogeneous_in_image_and_thresholds(seed, c):
    # power-of-two factors keep every intermediate exactly scaled
    rng = np.random.default_rng(seed)
    img = rng.random((14, 14))
    np.testing.assert_array_equal(imaging.canny(img, 0.3, 0.9).mask, imaging.canny(img * c, 0.3 * c, 0.9 * c).mask)


def test_threshold_order_is_checked():
    with pytest.raises(ContractError):
        imaging.canny(np.zeros((4, 4)), 0.5, 0.1)
    with pytest.raises(ContractError):
        imaging.canny(np.zeros((4, 4)), -0.1, 0.1)


# -- baseline points ---------------------------------------------------------------

def test_gradient_point_is_scaled_to_image_coordinates():
    m = np.zeros((7, 7))
    m[3, 5] = 1.0
    p = imaging.baseline_from_gradients(m, (224, 224))
    assert (p.row, p.col, p.fallback) == (96, 160, False)


def test_constant_gradient_falls_back_to_centre():
    p = imaging.baseline_from_gradients(np.full((5, 5), 2.0), (32, 32))
    assert (p.row, p.col, p.fallback) == (16, 16, True)


def test_four_selected_entries_hand_enumeration():
    m = np.zeros((4, 4))
    for r, c in [(0, 1), (1, 2), (2, 0), (3, 3)]:
        m[r, c] = 1.0
    p = imaging.baseline_from_gradients(m, (4, 4))
    assert (p.row, p.col) == (2, 0)


def test_selection_is_range_anchored():
    m = np.array([[10.0, 10.5], [11.0, 10.1]])
    p = imaging.baseline_from_gradients(m, (2, 2))  # only 11.0 exceeds 10 + 0.6
    assert (p.row, p.col) == (1, 0)


def test_edge_point_examples():
    mask = np.zeros((10, 10), dtype=bool)
    mask[5, 7] = True
    p = imaging.baseline_from_edges(imaging.EdgeMap(mask))
    assert (p.row, p.col, p.fallback) == (5, 7, False)
    p = imaging.baseline_from_edges(imaging.EdgeMap(np.zeros((9, 6), dtype=bool)))
    assert (p.row, p.col, p.fallback) == (4, 3, True)


def test_border_ring_hand_enumeration():
    ring = np.zeros((8, 8), dtype=bool)
    ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = True
    listed = [(0, c) for c in range(8)]
    for r in range(1, 7):
        listed += [(r, 0), (r, 7)]
    listed += [(7, c) for c in range(8)]
    assert len(listed) == 28
    p = imaging.baseline_from_edges(imaging.EdgeMap(ring))
    assert (p.row, p.col) == (listed[14][0], listed[18][1]) == (4, 0)


@given(st.integers(0, 10_000), st.integers(1, 9), st.integers(1, 9), st.integers(1, 40), st.integers(1, 40))
def test_baseline_points_are_in_bounds(seed, gh, gw, ih, iw):
    rng = np.random.default_rng(seed)
    p = imaging.baseline_from_gradients(rng.normal(size=(gh, gw)), (ih, iw))
    assert 0 <= p.row < ih and 0 <= p.col < iw
    q = imaging.baseline_from_edges(imaging.EdgeMap(rng.random((ih, iw)) > 0.7))
    assert 0 <= q.row < ih and 0 <= q.col < iw


def test_matrix_view_shapes():
    assert imaging.matrix_view(np.zeros((8, 256))).shape == (8, 256)
    assert imaging.matrix_view(np.zeros((8, 4, 3, 3))).shape == (32, 9)
    assert imaging.matrix_view(np.zeros(5)).shape == (1, 5)


# -- metrics ------------------------------------------------------------------------

def test_psnr_examples(rng):
    x = rng.random((8, 8))
    assert imaging.psnr(x, x) == math.inf
    assert imaging.psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)


def test_psnr_decreases_along_noise_ladder(rng):
    x = rng.random((16, 16))
    noise = rng.normal(size=x.shape)
    vals = [imaging.psnr(x, x + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssim_identity_symmetry_and_range(rng):
    a, b = rng.random((32, 32)), rng.random((32, 32))
    assert imaging.ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert abs(imaging.ssim(a, b) - imaging.ssim(b, a)) < 1e-12
    assert -1.0 <= imaging.ssim(a, 1 - a) <= 1.0


def test_ssim_matches_scikit_image(rng):
    metrics = pytest.importorskip("skimage.metrics")
    a = rng.random((32, 32))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    ref = metrics.structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False)
    assert imaging.ssim(a, b) == pytest.approx(ref, abs=1e-12)


def test_metric_dims_must_match():
    with pytest.raises(ContractError):
        imaging.psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ContractError):
        imaging.ssim(np.zeros((4, 4)), np.zeros((5, 4)))


def test_total_variation_examples(rng):
    assert imaging.total_variation(np.array([[0.0, 1.0], [0.0, 1.0]])) == 2.0
    assert imaging.total_variation(np.full((3, 5, 5), 0.7)) == 0.0
    assert imaging.total_variation(rng.normal(size=(2, 6, 6))) >= 0.0


def test_total_variation_gradient_matches_finite_differences(rng):
    x = rng.random((2, 6, 6))
    fd = central_difference(imaging.total_variation, x, h=1e-7)
    assert rel_err(imaging.total_variation_grad(x), fd) < 1e-4
    t = Tensor(x, requires_grad=True)
    out = imaging.total_variation(t)
    assert out.item() == pytest.approx(imaging.total_variation(x))
    backward(out)
    assert rel_err(t.grad, fd) < 1e-4


# -- conversion and files -----------------------------------------------------------

def test_gray_conversion():
    assert np.all(imaging.to_gray(np.full((1, 3, 3), 0.25)).pixels == 0.25)
    np.testing.assert_allclose(imaging.to_gray(np.ones((3, 4, 4))).pixels, 1.0, atol=1e-15)
    assert imaging.to_gray(np.full((1, 2, 2), 1.7)).pixels.max() == 1.0
    with pytest.raises(ContractError):
        imaging.to_gray(np.zeros((2, 4, 4)))


@pytest.mark.parametrize("channels", [1, 3])
def test_image_files_round_trip(tmp_path, rng, channels):
    x = rng.random((channels, 9, 13))
    path = tmp_path / "img.pnm"
    imaging.write_image(path, x)
    back = imaging.read_image(path)
    assert back.shape == x.shape
    assert np.abs(back - x).max() <= 1 / 255
    imaging.write_image(path, back)
    assert np.array_equal(imaging.read_image(path), back)


def test_header_comments_and_bad_files(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(imaging.read_image(path), [[[0.0, 1.0]]])
    path.write_bytes(b"P3\n2 1\n255\n0 255")
    with pytest.raises(FormatError):
        imaging.read_image(path)
    path.write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(FormatError):
        imaging.read_image(path)
