import math

import numpy as np
import pytest

from papmask import nnet, pipeline
from papmask.core import ESON_CHART, BBox, LandmarkSet, Point2, Raster, SeededRng, SizeBin
from papmask.errors import DataError, InvalidMeasurement, StageFailure
from papmask.hogdet import DEFAULT_PARAMS, DetectorModel, hog_descriptor
from papmask.ingest import Manifest, SampleRecord
from papmask.pipeline import (
    CropTransform,
    denormalize_coords,
    normalize,
    predict_landmarks,
    preprocess_crop,
    recommend,
    reference_box,
    scale_px_per_mm,
)

COIN = DEFAULT_PARAMS["coin"]


def _raster(w, h, value=100):
    return Raster(np.full((h, w, 3), value, dtype=np.uint8))


def test_preprocess_square_crop():
    prep = preprocess_crop(_raster(84, 84))
    assert prep.tensor.shape == (3, 42, 42)
    assert prep.transform.scale == 0.5 and prep.transform.pad == (0.0, 0.0)
    assert np.allclose(prep.tensor, 100)


def test_preprocess_wide_crop_pads_below():
    lm = LandmarkSet({"nose_left": Point2(42, 21), "nose_right": Point2(60, 21)}, "nose")
    prep = preprocess_crop(_raster(84, 42, 200), lm)
    assert np.allclose(prep.tensor[:, :21, :], 200)
    assert not np.any(prep.tensor[:, 21:, :])
    assert prep.target[:2].tolist() == [21.0, 10.5]
    assert prep.target[2:].tolist() == [30.0, 10.5]


def test_preprocess_tall_crop_pads_right():
    prep = preprocess_crop(_raster(21, 84, 50))
    assert np.allclose(prep.tensor[:, :, :11], 50) or np.allclose(prep.tensor[:, :, :10], 50)
    assert not np.any(prep.tensor[:, :, 11:])


def test_crop_transform_round_trip():
    t = CropTransform(BBox(13.3, 7.1, 90, 60), 42 / 90)
    for p in [Point2(13.3, 7.1), Point2(50.25, 33.3), Point2(103.3, 67.1)]:
        back = t.to_image(t.to_tensor(p))
        assert abs(back.x - p.x) < 1e-9 and abs(back.y - p.y) < 1e-9


def test_normalize_examples():
    stats = nnet.NormStats(pixel_mean=0.5, coord_mean=0.5)
    x = normalize(np.full((1, 3, 42, 42), 255.0), stats)
    assert np.all(x == 0.5)
    c = np.array([[0.0, 41.0, 20.5, 7.25]])
    _, y = normalize(np.zeros((1, 3, 42, 42)), stats, c)
    assert np.all(np.abs(y) <= 0.5)
    assert np.allclose(denormalize_coords(y, stats), c, atol=1e-12, rtol=0)


def test_fit_stats():
    stats = pipeline.fit_stats(np.full((2, 3, 4, 4), 51.0), np.full((2, 4), 20.5))
    assert stats.pixel_mean == pytest.approx(0.2) and stats.coord_mean == pytest.approx(0.5)


@pytest.mark.parametrize("pts, scale", [
    (((100, 50), (157.3, 50)), 2.0),
    (((0, 0), (0, 28.65)), 1.0),
    (((0, 0), (14.325, 0)), 0.5),
])
def test_scale_examples(pts, scale):
    assert scale_px_per_mm(pts) == pytest.approx(scale)


def test_scale_coincident_points():
    with pytest.raises(InvalidMeasurement):
        scale_px_per_mm(((3, 3), (3, 3)))


def test_recommend_examples():
    r = recommend(((0, 0), (80, 0)), 2.0)
    assert r.nose_width_mm == pytest.approx(40.0) and r.size is SizeBin.MEDIUM
    r = recommend(((0, 0), (36.9, 0)), 1.0)
    assert r.size is SizeBin.SMALL
    assert r.near_boundary == (37.0, SizeBin.SMALL, SizeBin.MEDIUM)
    r = recommend(((0, 0), (50, 0)), 1.0)
    assert r.size is SizeBin.TOO_LARGE and r.near_boundary is None
    with pytest.raises(InvalidMeasurement):
        recommend(((0, 0), (50, 0)), 0.0)


def test_recommend_picks_nearest_overlapping_boundary():
    # 42.9 lies within tolerance of both 41 (1.9 away) and 45 (2.1 away)
    r = recommend(((0, 0), (42.9, 0)), 1.0)
    assert r.near_boundary[0] == 41.0


def test_result_record_fields():
    r = recommend(((0, 0), (80, 0)), 2.0)
    r.provenance = {"nose_box": BBox(1, 2, 3, 4), "nose_points": (Point2(0, 0), Point2(80, 0))}
    rec = r.record()
    assert rec["size"] == "M" and rec["near_boundary"] == "41:M/L"
    assert rec["nose_box"] == "1.00 2.00 3.00 4.00"


def test_reference_boxes():
    lm = LandmarkSet({"nose_left": Point2(80, 144), "nose_right": Point2(120, 144),
                      "eye_left": Point2(68.5, 100), "eye_right": Point2(131.5, 100)}, "nose")
    face = reference_box(lm, "face")
    assert face.w == pytest.approx(2.2 * 63) and face.center.x == pytest.approx(100)
    nose = reference_box(lm, "nose")
    assert nose.w == pytest.approx(60) and nose.h == pytest.approx(45)
    assert nose.center == (pytest.approx(100), pytest.approx(144))
    assert face.contains(nose)
    coin = LandmarkSet({"coin_left": Point2(10, 20), "coin_right": Point2(40, 20)}, "coin")
    assert reference_box(coin, "coin") == pytest.approx(BBox(5.5, 0.5, 39, 39))
    with pytest.raises(DataError):
        reference_box(coin, "face")


# -- composition with a hand-built detector and a constant regressor ------------

R = 16.0


def _disc_scene(ox, oy, w=160, h=128):
    """Disc of radius 16 centred in the 48x48 window whose top-left pixel is (ox, oy)."""
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = ox + 23.5, oy + 23.5
    inside = np.clip(R + 0.5 - np.hypot(xx - cx, yy - cy), 0, 1)
    img = 40 + 180 * inside
    return Raster(np.repeat(img[:, :, None], 3, axis=2).astype(np.uint8)), (cx, cy)


@pytest.fixture(scope="module")
def toy_models():
    template, _ = _disc_scene(0, 0, 48, 48)
    w = hog_descriptor(template, COIN)
    det = DetectorModel(COIN, w, -0.9 * float(w @ w), "coin")
    k = 42 / 48
    target = np.array([(23.5 - R) * k, 23.5 * k, (23.5 + R) * k, 23.5 * k])
    cnn = nnet.zero_model(nnet.coin_specs())
    cnn.params[-1] = (cnn.params[-1][0], target / 41.0 - 0.5)
    return det, cnn


def test_predict_landmarks_on_disc(toy_models):
    img, (cx, cy) = _disc_scene(56, 40)
    pred = predict_landmarks(img, *toy_models)
    assert pred.box == BBox(56, 40, 48, 48)
    assert math.dist(pred.left, (cx - R, cy)) < 2 and math.dist(pred.right, (cx + R, cy)) < 2


def test_predict_landmarks_translation(toy_models):
    a = predict_landmarks(_disc_scene(56, 40)[0], *toy_models)
    b = predict_landmarks(_disc_scene(72, 56)[0], *toy_models)
    for p, q in ((a.left, b.left), (a.right, b.right)):
        assert abs(q.x - p.x - 16) <= 1 and abs(q.y - p.y - 16) <= 1


def test_blank_image_is_a_stage_failure(toy_models):
    with pytest.raises(StageFailure) as err:
        predict_landmarks(_raster(160, 128, 40), *toy_models, stage="nose")
    assert err.value.kind == "nose-not-found" and err.value.exit_code == 4


def test_stage_models_missing_files(tmp_path):
    with pytest.raises(DataError, match="face.hogd"):
        pipeline.StageModels.load(tmp_path)


def test_stage_models_round_trip(tmp_path, toy_models):
    det, cnn = toy_models
    sm = pipeline.StageModels(det, det, det, cnn, cnn)
    sm.save(tmp_path)
    back = pipeline.StageModels.load(tmp_path, ESON_CHART)
    assert np.array_equal(back.coin.weights, det.weights)
    assert all(np.array_equal(x, y) for x, y in zip(back.nose_cnn.arrays(), cnn.arrays()))


def test_transfer_train_never_worse():
    """Zero extra epochs returns the base model; a short run never ends worse on validation."""
    recs = []
    for i in range(10):
        img, (cx, cy) = _disc_scene(8 * (i % 5) + 8, 8 * (i // 5) + 8)
        lm = LandmarkSet({"coin_left": Point2(cx - R, cy), "coin_right": Point2(cx + R, cy)}, "coin")
        recs.append(SampleRecord(None, lm, image=img))
    man = Manifest(recs, "coin")
    base = nnet.init_weights(nnet.coin_specs(), SeededRng(1), name="coin")
    cfg = nnet.TrainConfig(batch_size=1, max_epochs=0)
    res = pipeline.transfer_train(base, man, cfg, "coin", jitters=1)
    assert (res.n_train, res.n_val) == (9, 1)
    assert res.history.records[0].val_rmse == res.history.best_val
    res = pipeline.transfer_train(base, man, nnet.TrainConfig(batch_size=1, max_epochs=2), "coin", jitters=1)
    assert res.history.best_val <= res.history.records[0].val_rmse
