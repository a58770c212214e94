import numpy as np
import pytest
from scipy import stats

from zsqdet.config import DatasetSpec
from zsqdet.data import (DatasetFormatError, class_histogram, format_label, generate_dataset,
                         load_dataset, load_image, load_image_bytes, load_labels, parse_label_line,
                         render_image, save_image, save_labels, tree_digest)
from zsqdet.detector import BoxLabel


def test_generation_is_byte_deterministic(tmp_path):
    spec = DatasetSpec(num_images=12, seed=7)
    generate_dataset(spec, tmp_path / "a")
    generate_dataset(spec, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    generate_dataset(DatasetSpec(num_images=12, seed=8), tmp_path / "c")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_rendering_does_not_depend_on_order():
    spec = DatasetSpec(num_images=5, seed=1)
    late = render_image(spec, 4)
    for i in range(4):
        render_image(spec, i)
    np.testing.assert_array_equal(render_image(spec, 4).pixels, late.pixels)


def test_ppm_round_trip_is_bit_exact(tmp_path):
    px = np.random.default_rng(0).integers(0, 256, (3, 10, 7), dtype=np.uint8)
    save_image(tmp_path / "x.ppm", px)
    np.testing.assert_array_equal(load_image_bytes(tmp_path / "x.ppm"), px)
    np.testing.assert_array_equal(load_image(tmp_path / "x.ppm"), px / 255.0)


def test_label_line_example():
    lb = parse_label_line("2 0.5 0.5 0.25 0.25")
    assert (lb.class_id, lb.cx, lb.cy, lb.w, lb.h) == (2, 0.5, 0.5, 0.25, 0.25)
    assert lb.xyxy() == (0.375, 0.375, 0.625, 0.625)


def test_label_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    lbs = [BoxLabel(0, int(rng.integers(6)), *map(float, rng.uniform(0, 1, 4))) for _ in range(5)]
    save_labels(tmp_path / "l.txt", lbs)
    assert load_labels(tmp_path / "l.txt") == lbs
    assert all(parse_label_line(format_label(lb)) == lb for lb in lbs)


def test_truncated_image_reports_offset(tmp_path):
    save_image(tmp_path / "x.ppm", np.zeros((3, 4, 4), dtype=np.uint8))
    buf = (tmp_path / "x.ppm").read_bytes()
    (tmp_path / "x.ppm").write_bytes(buf[:-5])
    with pytest.raises(DatasetFormatError, match=r"byte \d+"):
        load_image_bytes(tmp_path / "x.ppm")
    (tmp_path / "y.ppm").write_bytes(b"P5\n4 4\n255\n" + bytes(16))
    with pytest.raises(DatasetFormatError, match="magic"):
        load_image_bytes(tmp_path / "y.ppm")


def test_bad_label_line_reports_line_number(tmp_path):
    (tmp_path / "l.txt").write_text("1 0.5 0.5 0.1 0.1\n1 0.5 oops 0.1 0.1\n")
    with pytest.raises(DatasetFormatError, match="line 2"):
        load_labels(tmp_path / "l.txt")


def test_mask_bbox_matches_label_within_one_pixel():
    spec = DatasetSpec(num_images=40, seed=2)
    n = 0
    for i in range(spec.num_images):
        r = render_image(spec, i)
        for lb, mask in zip(r.labels, r.masks):
            ys, xs = np.nonzero(mask)
            x1, y1, x2, y2 = (v * spec.image_size for v in lb.xyxy())
            assert abs(xs.min() - x1) <= 1 and abs(xs.max() + 1 - x2) <= 1
            assert abs(ys.min() - y1) <= 1 and abs(ys.max() + 1 - y2) <= 1
            n += 1
    assert n > 40


def test_manifest_histograms(tmp_path):
    spec = DatasetSpec(num_images=30, seed=4)
    ds = generate_dataset(spec, tmp_path)
    m = load_dataset(tmp_path).manifest
    assert m["label_counts"] == [len(l) for l in ds.labels]
    assert m["class_histogram"] == class_histogram(ds.labels, spec.num_classes)
    assert sum(m["count_histogram"].values()) == 30
    assert all(len(l) >= 1 for l in ds.labels)
    lo, hi = m["split"]["val"]
    assert hi == 30 and lo == 24


def test_class_frequencies_follow_weights():
    spec = DatasetSpec(num_images=1500, seed=5)
    labels = [render_image(spec, i).labels for i in range(spec.num_images)]
    observed = np.array(class_histogram(labels, spec.num_classes))
    expected = spec.class_weights * observed.sum()
    assert stats.chisquare(observed, expected).pvalue > 1e-3
