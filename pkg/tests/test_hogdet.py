import numpy as np
import pytest

from papmask.core import BBox, Raster, SeededRng, bbox_iou
from papmask.errors import DataError, ModelFormatError
from papmask.hogdet import (
    DEFAULT_PARAMS,
    Detection,
    HogParams,
    SvmConfig,
    TrainingImage,
    best_detection,
    cell_histograms,
    detect,
    hog_descriptor,
    load_detector,
    nms,
    save_detector,
    train_detector,
    window_descriptor,
)
from papmask.imageops import resample

COIN = DEFAULT_PARAMS["coin"]


def _disc_scene(w, h, discs, seed=0, noise=12.0):
    g = np.random.default_rng(seed)
    img = g.normal(60, noise, (h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for cx, cy, r in discs:
        inside = np.clip(r + 0.5 - np.hypot(xx - cx, yy - cy), 0, 1)
        img = img * (1 - inside) + 220 * inside
    return Raster(np.clip(img, 0, 255).astype(np.uint8))


def _disc_box(cx, cy, r):
    side = 2 * r * 1.5
    return BBox(cx - side / 2, cy - side / 2, side, side)


@pytest.fixture(scope="module")
def disc_detector():
    g = np.random.default_rng(5)
    pos = []
    for i in range(14):
        r = float(g.uniform(14, 30))
        cx, cy = float(g.uniform(r * 2, 160 - r * 2)), float(g.uniform(r * 2, 140 - r * 2))
        pos.append(TrainingImage(_disc_scene(160, 140, [(cx, cy, r)], seed=i), (_disc_box(cx, cy, r),)))
    negs = [_disc_scene(160, 140, [], seed=100 + i, noise=30) for i in range(3)]
    cfg = SvmConfig(epochs=40)
    return train_detector(pos, negs, COIN, SeededRng(7), "coin", cfg), pos, cfg


def test_descriptor_length():
    assert HogParams(window_cells=(8, 8)).descriptor_length == 7 * 7 * 2 * 2 * 9 == 1764
    img = np.random.default_rng(0).uniform(0, 255, (64, 64))
    assert hog_descriptor(img, HogParams(window_cells=(8, 8))).shape == (1764,)


def test_constant_image_gives_zero_descriptor():
    assert not np.any(hog_descriptor(np.full((48, 48), 90.0), COIN))


def test_step_edge_single_cell():
    img = np.zeros((8, 8))
    img[:, 4:] = 255.0
    h = cell_histograms(img, HogParams(window_cells=(2, 2)))
    # centred differences: columns 3 and 4 each see 255 - 0 on all 8 rows, angle 0
    expected = np.zeros(9)
    expected[0] = 2 * 8 * 255
    assert np.allclose(h[0, 0], expected)


def test_horizontal_edge_lands_in_ninety_degree_bin():
    img = np.zeros((8, 8))
    img[4:, :] = 255.0
    h = cell_histograms(img, HogParams(window_cells=(2, 2)))[0, 0]
    # 90 degrees falls between bins 4 (80) and 5 (100): half each
    assert h[4] == pytest.approx(2040) and h[5] == pytest.approx(2040)


def test_brightness_offset_invariance():
    img = np.random.default_rng(3).uniform(20, 200, (48, 64))
    assert np.allclose(hog_descriptor(img, COIN), hog_descriptor(img + 40, COIN))


def test_small_image_rejected():
    with pytest.raises(DataError):
        hog_descriptor(np.zeros((40, 40)), COIN)


def test_params_validation():
    with pytest.raises(DataError):
        HogParams(scale_factor=1.0)
    with pytest.raises(DataError):
        HogParams(window_cells=(1, 1))


def test_nms_keeps_best_and_bounds_overlap():
    d = [Detection(BBox(0, 0, 10, 10), 1.0), Detection(BBox(1, 0, 10, 10), 2.0),
         Detection(BBox(30, 30, 10, 10), 0.5)]
    kept = nms(d, 0.5)
    assert [k.score for k in kept] == [2.0, 0.5]


def test_best_detection():
    assert best_detection([]) is None
    a, b = Detection(BBox(0, 0, 1, 1), 0.2), Detection(BBox(5, 5, 1, 1), 0.9)
    assert best_detection([a]) is a and best_detection([a, b]) is b


def test_training_separates_its_data(disc_detector):
    model, pos, _ = disc_detector
    for ti in pos:
        d = window_descriptor(ti.image.gray(), ti.boxes[0], COIN)
        assert d @ model.weights + model.bias > 0
    assert model.meta["mining_rounds"] == 2 and model.meta["positives"] == 14 * 7 * 2  # shifted, rescaled and mirrored copies


def test_one_disc_one_box(disc_detector):
    model = disc_detector[0]
    dets = detect(_disc_scene(200, 160, [(90, 80, 22)], seed=50), model)
    assert len(dets) == 1
    assert bbox_iou(dets[0].box, _disc_box(90, 80, 22)) >= 0.5


def test_two_discs_two_boxes(disc_detector):
    model = disc_detector[0]
    dets = detect(_disc_scene(260, 160, [(60, 70, 20), (190, 90, 24)], seed=51), model)
    assert len(dets) == 2
    for d, truth in zip(sorted(dets, key=lambda d: d.box.x), [(60, 70, 20), (190, 90, 24)]):
        assert bbox_iou(d.box, _disc_box(*truth)) >= 0.5


def test_blank_image_has_no_detections(disc_detector):
    assert detect(Raster(np.full((120, 120, 3), 60, dtype=np.uint8)), disc_detector[0]) == []


def test_pyramid_covers_upsampled_image(disc_detector):
    model = disc_detector[0]
    img = _disc_scene(120, 100, [(60, 50, 18)], seed=52)
    big = resample(img.data.astype(float), 0, 0, 2.0, 2.0, 240, 200)
    dets = detect(Raster(np.clip(big, 0, 255).astype(np.uint8)), model)
    assert dets
    scaled = best_detection(dets).box.scaled(0.5)
    assert bbox_iou(scaled, _disc_box(60, 50, 18)) >= 0.5


def test_region_restricts_search(disc_detector):
    model = disc_detector[0]
    img = _disc_scene(260, 160, [(60, 70, 20), (190, 90, 24)], seed=51)
    dets = detect(img, model, region=BBox(130, 0, 130, 160))
    assert len(dets) == 1 and dets[0].box.x > 130


def test_training_deterministic_and_duplication(disc_detector, tmp_path):
    model, pos, cfg = disc_detector
    negs = [_disc_scene(160, 140, [], seed=100 + i, noise=30) for i in range(3)]
    again = train_detector(pos, negs, COIN, SeededRng(7), "coin", cfg)
    save_detector(model, tmp_path / "a.hogd")
    save_detector(again, tmp_path / "b.hogd")
    assert (tmp_path / "a.hogd").read_bytes() == (tmp_path / "b.hogd").read_bytes()
    doubled = train_detector(pos + pos, negs, COIN, SeededRng(7), "coin", cfg)
    for ti in pos:
        d = window_descriptor(ti.image.gray(), ti.boxes[0], COIN)
        assert np.sign(d @ doubled.weights + doubled.bias) == np.sign(d @ model.weights + model.bias)


def test_training_errors():
    pos = [TrainingImage(_disc_scene(100, 100, [(50, 50, 15)]), (_disc_box(50, 50, 15),))]
    with pytest.raises(DataError):
        train_detector(pos, [], COIN, SeededRng(0))
    flat = Raster(np.full((100, 100, 3), 50, dtype=np.uint8))
    with pytest.raises(DataError, match="identical"):
        train_detector([TrainingImage(flat, (BBox(10, 10, 48, 48),))], [flat], COIN, SeededRng(0))


def test_detector_file_round_trip(disc_detector, tmp_path):
    model = disc_detector[0]
    p = tmp_path / "m.hogd"
    save_detector(model, p)
    back = load_detector(p)
    assert np.array_equal(back.weights, model.weights) and back.bias == model.bias
    assert back.params == model.params and back.cls == "coin"
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(ModelFormatError):
        load_detector(p)
    p.write_bytes(b"XXXX" + b"\0" * 40)
    with pytest.raises(ModelFormatError):
        load_detector(p)
