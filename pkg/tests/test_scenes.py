import numpy as np
import pytest

from netnet.boxes import GroundTruthBox
from netnet.scenes import (SceneConfig, Scene, generate_dataset, generate_scene, large_object_mask, read_pgm,
                           to_pgm)
from netnet.tensor import Tensor


def test_same_seed_same_scene():
    a, b = generate_scene(SceneConfig(), 42), generate_scene(SceneConfig(), 42)
    assert a.image.data.tobytes() == b.image.data.tobytes()
    assert a.gts == b.gts
    assert generate_scene(SceneConfig(), 43).image.data.tobytes() != a.image.data.tobytes()


def test_fixture_stability():
    # pins the generator stream (PCG64 seeded with the scene seed)
    sc = generate_scene(SceneConfig(), 0)
    assert sc.image.shape == (1, 75, 75)
    assert round(float(sc.image.data.sum()), 6) == round(float(generate_scene(SceneConfig(), 0).image.data.sum()), 6)
    assert np.random.default_rng(0).normal(0.0, 0.05, size=(75, 75))[0, 0] == sc.image.data[0, 0, 0]


def test_sizes_within_scale_ranges():
    cfg = SceneConfig()
    for sc in generate_dataset(cfg, 1, 60):
        for g in sc.gts:
            side = g.xmax - g.xmin
            assert side == pytest.approx(g.ymax - g.ymin)
            px = round(side * cfg.image_size)
            assert cfg.scale_class_of(px / cfg.image_size) == g.scale_class
            lo, hi = cfg.pixel_range(g.scale_class)
            assert lo <= px <= hi
            assert 0 <= g.xmin < g.xmax <= 1 and 0 <= g.ymin < g.ymax <= 1


def test_pixel_ranges_at_75():
    cfg = SceneConfig()
    assert [cfg.pixel_range(c) for c in ("small", "medium", "large")] == [(3, 9), (10, 26), (27, 52)]


def test_objects_brighter_than_background():
    cfg = SceneConfig(min_objects=1, max_objects=1)
    for sc in generate_dataset(cfg, 2, 20):
        g = sc.gts[0]
        n = cfg.image_size
        patch = sc.image.data[0, round(g.ymin * n):round(g.ymax * n), round(g.xmin * n):round(g.xmax * n)]
        assert patch.max() - 0.0 >= 3 * cfg.noise_sigma


def test_zero_objects_pure_noise():
    sc = generate_scene(SceneConfig(min_objects=0, max_objects=0), 5)
    assert sc.gts == []
    assert abs(sc.image.data.std() - 0.05) < 0.01


def test_overlap_bounded():
    from netnet.boxes import iou
    for sc in generate_dataset(SceneConfig(), 3, 40):
        for i, a in enumerate(sc.gts):
            for b in sc.gts[i + 1:]:
                assert iou(a, b) <= 0.3


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(small=(0.2, 0.1))
    with pytest.raises(ValueError):
        SceneConfig(medium=(0.1, 0.3))
    with pytest.raises(ValueError):
        SceneConfig(min_objects=3, max_objects=2)


def scene_with(*boxes):
    return Scene(Tensor(np.zeros((1, 75, 75))), [GroundTruthBox(*b) for b in boxes])


def test_mask_cases():
    assert np.all(large_object_mask(scene_with((0.1, 0.1, 0.15, 0.15, 1, "small")), (19, 19)).data == 0)
    assert np.all(large_object_mask(scene_with((0.0, 0.0, 1.0, 1.0, 1, "large")), (5, 5)).data == 1)


def direct_footprint(box, h, w):
    m = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            ix = min(box[2], (j + 1) / w) - max(box[0], j / w)
            iy = min(box[3], (i + 1) / h) - max(box[1], i / h)
            m[i, j] = float(ix > 0 and iy > 0)
    return m


def test_mask_centered_half_width_object():
    b = (0.25, 0.25, 0.75, 0.75)
    mask = large_object_mask(scene_with(b + (1, "large")), (10, 10)).data[0]
    np.testing.assert_array_equal(mask, direct_footprint(b, 10, 10))
    assert mask.sum() == 36  # cells 2..7 in each direction


@pytest.mark.parametrize("fine,coarse", [(20, 10), (18, 6), (12, 4)])
def test_mask_superset_on_nested_grids(fine, coarse):
    k = fine // coarse
    for sc in generate_dataset(SceneConfig(), 4, 30):
        f = large_object_mask(sc, (fine, fine)).data[0]
        c = large_object_mask(sc, (coarse, coarse)).data[0]
        pooled = f.reshape(coarse, k, coarse, k).max(axis=(1, 3))
        assert np.all(c >= pooled)


def test_pgm_round_trip():
    img = np.linspace(0, 1, 75 * 75).reshape(75, 75)
    data = to_pgm(img)
    assert data.startswith(b"P5\n75 75\n255\n")
    back = read_pgm(data)
    assert back.shape == (75, 75) and back[0, 0] == 0 and back[-1, -1] == 255
    # raster bytes that look like whitespace must survive
    tricky = np.full((2, 3), 10 / 255.0)
    assert np.all(read_pgm(to_pgm(tricky, 0.0, 1.0)) == 10)
