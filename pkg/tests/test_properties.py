import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from papmask import nnet
from papmask.core import BBox, ESON_CHART, LandmarkSet, Point2, Raster, SeededRng, SizeBin, bbox_iou, size_bin
from papmask.evaluate import ORDER, accumulate, accuracy, tolerant_correct, within_one
from papmask.hogdet import DEFAULT_PARAMS, Detection, hog_descriptor, nms
from papmask.ingest import Manifest, SampleRecord, crop_raster, flip_horizontal, split, uncrop_landmarks
from papmask.pipeline import CropTransform, denormalize_coords, normalize, recommend

coord = st.floats(-500, 500, allow_nan=False)
pos = st.floats(0.5, 300, allow_nan=False)
boxes = st.builds(BBox, coord, coord, pos, pos)
widths = st.floats(0, 80, allow_nan=False)
bins = st.sampled_from(ORDER)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = bbox_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == bbox_iou(b, a)
    assert abs(bbox_iou(a, a) - 1.0) <= 1e-12


@given(widths)
def test_size_bins_partition(w):
    inside = [s for s in ORDER if ESON_CHART.interval(s)[0] <= w < ESON_CHART.interval(s)[1]]
    assert inside == [size_bin(w)]


@given(st.integers(2, 300), st.floats(0.01, 0.99), st.integers(0, 2**32))
def test_split_is_a_partition(n, frac, seed):
    recs = [SampleRecord(None, LandmarkSet({"nose_left": Point2(i, 0), "nose_right": Point2(i, 0)}, "nose"),
                         image=Raster(np.zeros((1, 1, 3), dtype=np.uint8))) for i in range(n)]
    tr, va = split(Manifest(recs, "nose"), frac, SeededRng(seed))
    xs = [r.landmarks["nose_left"].x for r in list(tr) + list(va)]
    assert sorted(xs) == list(range(n))
    assert len(tr) == int(np.floor(n * frac + 0.5))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.integers(0, 2**32))
def test_flip_involution(w, h, seed):
    g = np.random.default_rng(seed)
    img = Raster(g.integers(0, 256, (h, w, 3), dtype=np.uint8))
    xs = np.sort(g.uniform(0, w - 1, 2))
    ys = g.uniform(0, h - 1, 2)
    lm = LandmarkSet({"nose_left": Point2(xs[0], ys[0]), "nose_right": Point2(xs[1], ys[1])}, "nose")
    rec = SampleRecord(None, lm, image=img)
    once = flip_horizontal(rec)
    twice = flip_horizontal(once)
    assert once.landmarks["nose_left"].x <= once.landmarks["nose_right"].x
    assert np.array_equal(twice.load().data, img.data)
    for name in lm.names:
        assert abs(twice.landmarks[name].x - lm[name].x) <= 1e-9
        assert twice.landmarks[name].y == lm[name].y


crop_boxes = st.builds(BBox, st.floats(-20, 50), st.floats(-20, 50), st.floats(22, 80), st.floats(22, 80))


@given(crop_boxes,
       st.floats(0, 59), st.floats(0, 59))
def test_crop_uncrop_restores_landmarks(box, x, y):
    img = Raster(np.zeros((60, 60, 3), dtype=np.uint8))
    lm = LandmarkSet({"nose_left": Point2(x, y), "nose_right": Point2(x, y)}, "nose")
    c = crop_raster(img, box, lm)
    back = uncrop_landmarks(c.landmarks, c)
    got, want = back["nose_left"], lm["nose_left"]
    assert abs(got.x - want.x) <= 1e-9 and abs(got.y - want.y) <= 1e-9


@given(boxes, st.floats(0.05, 20), coord, coord)
def test_crop_transform_round_trip(box, scale, x, y):
    t = CropTransform(box, scale)
    back = t.to_image(t.to_tensor(Point2(x, y)))
    assert abs(back.x - x) <= 1e-9 and abs(back.y - y) <= 1e-9


@given(st.lists(st.floats(-50, 100, allow_nan=False), min_size=4, max_size=4),
       st.floats(-1, 1), st.floats(-1, 1))
def test_normalize_denormalize_inverse(c, pm, cm):
    stats = nnet.NormStats(pixel_mean=pm, coord_mean=cm)
    _, y = normalize(np.zeros((1, 1, 1, 1)), stats, np.array([c]))
    assert np.allclose(denormalize_coords(y, stats), [c], atol=1e-12, rtol=0)


@given(st.floats(1, 200), st.floats(1, 200), st.floats(0.1, 10))
def test_recommend_monotone(a, b, scale):
    lo, hi = sorted((a, b))
    r1 = recommend(((0, 0), (lo, 0)), scale)
    r2 = recommend(((0, 0), (hi, 0)), scale)
    assert r1.size.ordinal <= r2.size.ordinal


@given(st.floats(20, 200), st.floats(10, 100), st.floats(0.1, 10))
def test_geometry_scale_invariance(nose_px, coin_px, k):
    base = recommend(((0, 0), (nose_px, 0)), coin_px / 28.65)
    scaled = recommend(((0, 0), (nose_px * k, 0)), coin_px * k / 28.65)
    assert abs(base.nose_width_mm - scaled.nose_width_mm) <= 1e-9 * base.nose_width_mm
    assert base.size == scaled.size


@given(widths)
def test_exact_implies_tolerant(w):
    assert tolerant_correct(w, size_bin(w))


@given(st.lists(st.tuples(bins, bins), min_size=1, max_size=60), st.randoms())
def test_metrics_order_free_and_consistent(pairs, rnd):
    cm = accumulate(pairs)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert accumulate(shuffled) == cm
    assert accuracy(cm) <= within_one(cm)
    for s in ORDER:
        assert cm.row(s) == sum(1 for a, _ in pairs if a is s)


@given(st.lists(st.tuples(boxes, st.floats(-5, 5)), max_size=25), st.floats(0.1, 0.9))
def test_nms_output_overlap_bounded(items, thr):
    kept = nms([Detection(b, s) for b, s in items], thr)
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert bbox_iou(kept[i].box, kept[j].box) <= thr
    assert [d.score for d in kept] == sorted((d.score for d in kept), reverse=True)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.floats(-60, 60))
def test_hog_brightness_offset(seed, k):
    img = np.random.default_rng(seed).uniform(70, 180, (48, 48))
    p = DEFAULT_PARAMS["coin"]
    assert np.allclose(hog_descriptor(img, p), hog_descriptor(img + k, p), atol=1e-12)
