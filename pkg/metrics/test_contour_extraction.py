import numpy as np
import pytest
from scipy import ndimage

from backend.data_pipeline.contours import rasterize_contour
from metrics.contour_extraction import largest_component, mask_to_contour
from metrics.overlap import dice


def test_block_round_trip_is_exact():
    mask = np.zeros((6, 6), dtype=np.uint8)
    mask[2:4, 2:4] = 1
    contour = mask_to_contour(mask)
    assert contour is not None
    assert np.array_equal(rasterize_contour(contour, 6, 6), mask)
    # every vertex is on a cell-edge midpoint
    assert np.all((contour.points * 2) % 1 == 0)


def test_largest_component_is_kept():
    mask = np.zeros((12, 12), dtype=np.uint8)
    mask[1, 1:11] = 1  # 10 pixels
    mask[8, 1:4] = 1  # 3 pixels
    component = largest_component(mask)
    assert component.sum() == 10
    assert not component[8].any()

    contour = mask_to_contour(mask)
    assert np.array_equal(rasterize_contour(contour, 12, 12), component.astype(np.uint8))


def test_diagonal_neighbors_form_one_component():
    mask = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.uint8)
    assert largest_component(mask).sum() == 3
    contour = mask_to_contour(mask)
    assert np.array_equal(rasterize_contour(contour, 3, 3), mask)


def test_blocks_joined_at_a_corner_share_one_contour():
    mask = np.zeros((10, 10), dtype=np.uint8)
    mask[1:4, 1:4] = 1
    mask[4:6, 4:6] = 1
    component = largest_component(mask)
    assert component.sum() == 13
    restored = rasterize_contour(mask_to_contour(mask), 10, 10)
    assert restored.sum() == 13
    assert np.array_equal(restored, mask)

    # the other diagonal orientation
    flipped = mask[:, ::-1].copy()
    assert np.array_equal(rasterize_contour(mask_to_contour(flipped), 10, 10), flipped)


def test_holes_are_filled():
    mask = np.zeros((10, 10), dtype=np.uint8)
    mask[2:8, 2:8] = 1
    mask[4:6, 4:6] = 0
    filled = mask.copy()
    filled[4:6, 4:6] = 1
    assert np.array_equal(rasterize_contour(mask_to_contour(mask), 10, 10), filled)


def test_empty_mask_has_no_contour():
    assert mask_to_contour(np.zeros((8, 8), dtype=np.uint8)) is None


def test_foreground_touching_the_border():
    mask = np.zeros((5, 5), dtype=np.uint8)
    mask[0:3, 0:2] = 1
    assert np.array_equal(rasterize_contour(mask_to_contour(mask), 5, 5), mask)


@pytest.mark.parametrize("seed", range(5))
def test_random_blob_round_trip(seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:64, 0:64]
    mask = np.zeros((64, 64), dtype=bool)
    for _ in range(4):
        cx, cy = rng.uniform(20, 44, size=2)
        r = rng.uniform(6, 12)
        mask |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
    mask = ndimage.binary_fill_holes(largest_component(mask))
    restored = rasterize_contour(mask_to_contour(mask), 64, 64)
    assert dice(restored, mask) >= 0.98
