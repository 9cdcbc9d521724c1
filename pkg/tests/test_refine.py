import numpy as np
import pytest

from wegpipe.core import netpbm
from wegpipe.core.errors import ShapeError, UsageError
from wegpipe.core.refine import (
    heatmap_levels,
    multi_scale_fuse,
    normalize01,
    refine_maps,
    rescale_image,
    resize_bilinear,
    soft_erase,
    to_pgm_bytes,
    upsample_bilinear,
)


def test_normalize_two_points() -> None:
    np.testing.assert_array_equal(normalize01(np.array([2.0, 4.0])), [0.0, 1.0])


def test_normalize_constant_map_is_zero() -> None:
    np.testing.assert_array_equal(normalize01(np.full((3, 3), 7.0)), np.zeros((3, 3)))


def test_normalize_affine_invariant_and_idempotent(rng: np.random.Generator) -> None:
    x = rng.normal(size=(5, 5))
    np.testing.assert_allclose(normalize01(3.0 * x - 2.0), normalize01(x), atol=1e-12)
    np.testing.assert_allclose(normalize01(normalize01(x)), normalize01(x), atol=1e-12)


def test_upsample_identity_and_constant(rng: np.random.Generator) -> None:
    x = rng.random((4, 4))
    np.testing.assert_allclose(upsample_bilinear(x, 4, 4), x)
    np.testing.assert_allclose(upsample_bilinear(np.full((2, 2), 0.4), 8, 8), 0.4)


def test_upsample_two_by_two_hand_weights() -> None:
    grid = np.array([[0.0, 1.0], [2.0, 3.0]])
    # align-corners-false sample positions on the source axis: -0.25, 0.25, 0.75, 1.25 (clamped)
    axis = np.array([0.0, 0.25, 0.75, 1.0])
    expected = 2.0 * axis[:, None] + axis[None, :]
    np.testing.assert_allclose(upsample_bilinear(grid, 4, 4), expected)


def test_downsample_averages_pixel_pairs() -> None:
    grid = np.arange(16, dtype=np.float64).reshape(4, 4)
    # half-pixel centres land midway between source pixels 0|1 and 2|3
    expected = np.array([[2.5, 4.5], [10.5, 12.5]])
    np.testing.assert_allclose(resize_bilinear(grid, 2, 2), expected)


def test_resize_accepts_strided_views(rng: np.random.Generator) -> None:
    stack = rng.random((3, 3, 2))
    view = stack[:, :, 1]
    out = resize_bilinear(view, 6, 5)
    assert out.dtype == np.float64 and out.shape == (6, 5)
    np.testing.assert_allclose(out, resize_bilinear(view.copy(), 6, 5))


def test_upsample_stays_within_source_range(rng: np.random.Generator) -> None:
    x = rng.random((3, 5))
    up = resize_bilinear(x, 17, 11)
    assert up.min() >= x.min() - 1e-12 and up.max() <= x.max() + 1e-12


def test_soft_erase_worked_example() -> None:
    out = soft_erase(np.array([[1.0, 0.7], [0.4, 0.0]]), 0.55)
    np.testing.assert_allclose(out, [[0.55, 0.55], [0.4, 0.0]])


def test_soft_erase_zero_map_and_identity_rate(rng: np.random.Generator) -> None:
    np.testing.assert_array_equal(soft_erase(np.zeros((3, 3)), 0.55), np.zeros((3, 3)))
    x = rng.random((4, 4))
    np.testing.assert_array_equal(soft_erase(x, 1.0), x)


@pytest.mark.parametrize("rate", [0.0, -0.1, 1.5])
def test_soft_erase_rejects_rate(rate: float) -> None:
    with pytest.raises(UsageError):
        soft_erase(np.ones((2, 2)), rate)


@pytest.mark.parametrize("rate", [0.25, 0.55, 1.0])
def test_soft_erase_properties(rate: float) -> None:
    rng = np.random.default_rng(int(rate * 100))
    for _ in range(1000):
        a = normalize01(rng.random((6, 6)) ** rng.uniform(0.5, 3.0))
        out = soft_erase(a, rate)
        assert np.all(out <= a)
        if a.max() > 0:
            assert out.max() == pytest.approx(rate * a.max())
        order = np.argsort(a, axis=None)
        assert np.all(np.diff(out.reshape(-1)[order]) >= 0)
        low = a < rate * a.max() * 0.999
        np.testing.assert_array_equal(out[low], a[low])


def test_fuse_single_and_identical(rng: np.random.Generator) -> None:
    x = rng.random((4, 4))
    np.testing.assert_allclose(multi_scale_fuse([x]), normalize01(x))
    np.testing.assert_allclose(multi_scale_fuse([normalize01(x), normalize01(x)]), normalize01(x))


def test_fuse_with_zero_map_halves_before_renormalising(rng: np.random.Generator) -> None:
    x = normalize01(rng.random((4, 4)))
    # mean is x / 2; renormalisation brings it back to x
    np.testing.assert_allclose(multi_scale_fuse([np.zeros((4, 4)), x]), x)


def test_fuse_rejects_empty_and_mismatched() -> None:
    with pytest.raises(UsageError):
        multi_scale_fuse([])
    with pytest.raises(ShapeError):
        multi_scale_fuse([np.zeros((2, 2)), np.zeros((3, 3))])


def test_rescale_image_rounds_to_patch_multiple(rng: np.random.Generator) -> None:
    image = rng.random((3, 64, 48))
    assert rescale_image(image, 0.5, 8).shape == (3, 32, 24)
    assert rescale_image(image, 1.0, 8) is image


def test_refine_maps_single_and_multi_scale(rng: np.random.Generator) -> None:
    single = rng.random((4, 4))
    stack = refine_maps({1: single, 3: [rng.random((3, 3)), rng.random((5, 5))]}, 16, 16, rate=0.5)
    assert stack.classes == [1, 3]
    assert stack.shape == (16, 16)
    assert stack.stacked().shape == (2, 16, 16)
    expected = soft_erase(upsample_bilinear(normalize01(single), 16, 16), 0.5)
    np.testing.assert_allclose(stack.maps[1], expected)
    # fusion renormalises, so the fused map peaks at exactly the erase rate
    assert stack.maps[3].min() >= 0.0 and stack.maps[3].max() == pytest.approx(0.5)


def test_refine_maps_without_erase_keeps_peak(rng: np.random.Generator) -> None:
    stack = refine_maps({2: rng.random((4, 4))}, 8, 8, erase=False)
    assert stack.rate == 1.0
    assert stack.maps[2].max() <= 1.0


def test_heatmap_levels_and_pgm() -> None:
    attention = np.array([[0.0, 0.5], [0.2, 1.0]])
    np.testing.assert_array_equal(heatmap_levels(attention), [[0, 128], [51, 255]])
    np.testing.assert_array_equal(netpbm.decode(to_pgm_bytes(attention)), heatmap_levels(attention))
