import numpy as np
import pytest

from papmask.core import BBox, LandmarkSet, Point2, Raster, SeededRng, SizeBin
from papmask.errors import DataError
from papmask.ingest import (
    Manifest,
    SampleRecord,
    augment_with_flips,
    crop,
    crop_raster,
    flip_horizontal,
    load_manifest,
    split,
    split_counts,
    uncrop_landmarks,
    write_manifest,
)


def _images(tmp_path, n=2, w=100, h=60):
    paths = []
    for i in range(n):
        p = tmp_path / f"img{i}.png"
        Raster(np.full((h, w, 3), 10 * i, dtype=np.uint8)).save(p)
        paths.append(p)
    return paths


def _write(tmp_path, text):
    p = tmp_path / "m.csv"
    p.write_text(text)
    return p


def test_load_two_rows(tmp_path):
    _images(tmp_path)
    p = _write(tmp_path, "image,role,nose_left_x,nose_left_y,nose_right_x,nose_right_y,width_mm,size\n"
                         "img0.png,nose,10,20,40,21,36.5,S\n"
                         "img1.png,nose,12,22,44,22,,M\n")
    m = load_manifest(p)
    assert len(m) == 2 and m.role == "nose"
    assert m[0].landmarks["nose_right"] == Point2(40.0, 21.0)
    assert m[0].size is SizeBin.SMALL and m[1].width_mm is None
    assert m[1].path == tmp_path / "img1.png"


def test_row_arity_error_names_row(tmp_path):
    _images(tmp_path)
    p = _write(tmp_path, "image,role,nose_left_x,nose_left_y,nose_right_x,nose_right_y\n"
                         "img0.png,nose,10,20,40,21\n"
                         "img1.png,nose,10,20,40\n")
    with pytest.raises(DataError, match="row 3"):
        load_manifest(p)


def test_empty_manifest(tmp_path):
    with pytest.raises(DataError, match="empty"):
        load_manifest(_write(tmp_path, ""))
    with pytest.raises(DataError, match="empty"):
        load_manifest(_write(tmp_path, "image,role,nose_left_x,nose_left_y,nose_right_x,nose_right_y\n"))


def test_width_and_size_must_agree(tmp_path):
    _images(tmp_path)
    p = _write(tmp_path, "image,role,nose_left_x,nose_left_y,nose_right_x,nose_right_y,width_mm,size\n"
                         "img0.png,nose,10,20,40,21,38.0,S\n")
    with pytest.raises(DataError, match="row 2"):
        load_manifest(p)


def test_landmark_outside_image(tmp_path):
    _images(tmp_path)
    p = _write(tmp_path, "image,role,nose_left_x,nose_left_y,nose_right_x,nose_right_y\n"
                         "img0.png,nose,10,20,100,21\n")
    with pytest.raises(DataError, match="outside"):
        load_manifest(p)


def test_missing_role_points(tmp_path):
    _images(tmp_path)
    p = _write(tmp_path, "image,role,nose_left_x,nose_left_y,coin_left_x,coin_left_y\n"
                         "img0.png,nose,10,20,40,21\n")
    with pytest.raises(DataError, match="row 2"):
        load_manifest(p)


def test_write_then_load(tmp_path):
    paths = _images(tmp_path)
    lm = LandmarkSet({"nose_left": Point2(1.25, 2.5), "nose_right": Point2(30.125, 2.0),
                      "eye_left": Point2(5, 5)}, "nose")
    lm2 = LandmarkSet({"nose_left": Point2(3, 4), "nose_right": Point2(9, 4)}, "nose")
    m = Manifest([SampleRecord(paths[0], lm, 42.0, SizeBin.LARGE),
                  SampleRecord(paths[1], lm2, None, None, "patient-style")], "nose")
    write_manifest(m, tmp_path / "out.csv")
    back = load_manifest(tmp_path / "out.csv")
    assert [r.landmarks for r in back] == [lm, lm2]
    assert back[0].width_mm == 42.0 and back[1].source == "patient-style"


@pytest.mark.parametrize("n, frac, sizes", [
    (10, 0.7, (7, 3)),
    (10, 0.9, (9, 1)),
    (166, 0.9, (149, 17)),   # 149.4 rounds down
    (51, 0.9, (46, 5)),      # 45.9 rounds up
    (5, 0.7, (4, 1)),        # 3.5 rounds half up
])
def test_split_sizes(n, frac, sizes):
    assert (split_counts(n, frac), n - split_counts(n, frac)) == sizes


def test_split_partition_and_determinism(tmp_path):
    p = _images(tmp_path, 1)[0]
    recs = [SampleRecord(p, LandmarkSet({"nose_left": Point2(i, 1), "nose_right": Point2(i + 1, 1)}, "nose"))
            for i in range(10)]
    m = Manifest(recs, "nose")
    tr, va = split(m, 0.7, SeededRng(3))
    tr2, va2 = split(m, 0.7, SeededRng(3))
    assert list(tr) == list(tr2) and list(va) == list(va2)
    xs = sorted(r.landmarks["nose_left"].x for r in list(tr) + list(va))
    assert xs == list(range(10))
    with pytest.raises(DataError):
        split(m, 1.0, SeededRng(3))


def test_flip_example_and_involution(tmp_path):
    p = tmp_path / "f.png"
    data = np.random.default_rng(0).integers(0, 256, (20, 100, 3), dtype=np.uint8)
    Raster(data).save(p)
    lm = LandmarkSet({"nose_left": Point2(10, 20), "nose_right": Point2(60, 20)}, "nose")
    rec = SampleRecord(p, lm)
    f = flip_horizontal(rec)
    assert f.landmarks["nose_right"] == Point2(89, 20)
    assert f.landmarks["nose_left"] == Point2(39, 20)
    assert np.array_equal(f.load().data, data[:, ::-1])
    ff = flip_horizontal(f)
    assert ff.landmarks == lm and np.array_equal(ff.load().data, data)


def test_augment_doubles(tmp_path):
    p = _images(tmp_path, 1)[0]
    lm = LandmarkSet({"nose_left": Point2(10, 20), "nose_right": Point2(60, 20)}, "nose")
    m = Manifest([SampleRecord(p, lm)] * 83, "nose")
    assert len(augment_with_flips(m)) == 166


def test_crop_identity_and_translation(gradient_image):
    lm = LandmarkSet({"nose_left": Point2(5, 5), "nose_right": Point2(30, 20)}, "nose")
    c = crop_raster(gradient_image, BBox(0, 0, 40, 30), lm)
    assert c.raster == gradient_image and c.landmarks == lm and not c.outside
    c = crop_raster(gradient_image, BBox(4, 4, 20, 20), lm)
    assert c.landmarks["nose_left"] == Point2(1, 1)
    assert c.outside == frozenset({"nose_right"})


def test_crop_example_translation(tmp_path):
    p = tmp_path / "big.png"
    Raster(np.zeros((100, 100, 3), dtype=np.uint8)).save(p)
    lm = LandmarkSet({"nose_left": Point2(50, 50), "nose_right": Point2(55, 50)}, "nose")
    c = crop(SampleRecord(p, lm), BBox(40, 40, 20, 20))
    assert c.landmarks["nose_left"] == Point2(10, 10)
    assert uncrop_landmarks(c.landmarks, c) == lm


def test_crop_clipping(gradient_image):
    # 40x30 image; box (30, 20, 20, 20) keeps 10 columns and 10 rows
    c = crop_raster(gradient_image, BBox(30, 20, 20, 20))
    assert (c.raster.width, c.raster.height) == (10, 10)
    assert c.box == BBox(30, 20, 10, 10)
    assert np.array_equal(c.raster.data, gradient_image.data[20:30, 30:40])
    with pytest.raises(DataError):
        crop_raster(gradient_image, BBox(100, 100, 5, 5))
