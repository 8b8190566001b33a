"""Annotation files, PPM images, synthetic scenes and input transforms."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densefpn import Tensor
from densefpn.data import (
    AnnotationObject,
    DataError,
    hflip,
    load_annotation_dir,
    load_annotations,
    load_image,
    parse_annotation_line,
    random_hflip,
    resize_short_side,
    save_image,
    synth_scene,
    write_annotations,
)


class TestAnnotations:
    def test_conversion(self, tmp_path):
        f = tmp_path / "0001.txt"
        f.write_text("10,20,30,40,1,4,0,0\n")
        gts, objs = load_annotations(f)
        np.testing.assert_array_equal(gts[0].box, [10, 20, 40, 60])
        assert gts[0].class_id == 3 and not gts[0].ignore
        assert objs[0].truncation == 0

    @pytest.mark.parametrize("cat", [0, 11])
    def test_ignore_categories(self, cat):
        g = parse_annotation_line(f"1,2,3,4,0,{cat},0,0").ground_truth()
        assert g.ignore and g.class_id is None

    def test_empty_file(self, tmp_path):
        f = tmp_path / "e.txt"
        f.write_text("")
        assert load_annotations(f) == ([], [])

    def test_seven_fields(self, tmp_path):
        f = tmp_path / "bad.txt"
        f.write_text("1,2,3,4,1,4,0,0\n1,2,3,4,1,4,0\n")
        with pytest.raises(DataError, match="line 2"):
            load_annotations(f)

    @pytest.mark.parametrize("line", ["1,2,3,4,1,12,0,0", "1,2,3,4,1,-1,0,0", "1,2,x,4,1,4,0,0", "1,2,-3,4,1,4,0,0"])
    def test_invalid_lines(self, line):
        with pytest.raises(DataError):
            parse_annotation_line(line)

    def test_trailing_comma_tolerated(self):
        assert parse_annotation_line("1,2,3,4,1,4,0,0,").category == 4

    @given(st.lists(st.tuples(*[st.integers(0, 500)] * 4, st.integers(0, 1), st.integers(0, 11),
                              st.integers(0, 2), st.integers(0, 2)), max_size=12))
    @settings(max_examples=40, deadline=None)
    def test_round_trip(self, tmp_path_factory, rows):
        path = tmp_path_factory.mktemp("ann") / "x.txt"
        objs = [AnnotationObject(*r) for r in rows]
        write_annotations(path, objs)
        _, loaded = load_annotations(path)
        assert loaded == objs
        write_annotations(path, loaded)
        assert load_annotations(path)[1] == objs

    def test_directory(self, tmp_path):
        (tmp_path / "b.txt").write_text("0,0,5,5,1,1,0,0\n")
        (tmp_path / "a.txt").write_text("")
        assert list(load_annotation_dir(tmp_path)) == ["a", "b"]
        with pytest.raises(FileNotFoundError):
            load_annotation_dir(tmp_path / "missing")


class TestImages:
    def test_known_bytes(self, tmp_path):
        pix = bytes([0, 51, 102, 153, 204, 255, 255, 0, 0, 1, 2, 3])
        f = tmp_path / "t.ppm"
        f.write_bytes(b"P6\n# comment\n2 2\n255\n" + pix)
        img = load_image(f)
        assert img.shape == (1, 3, 2, 2) and img.dtype == np.float32
        expected = np.frombuffer(pix, np.uint8).reshape(2, 2, 3).transpose(2, 0, 1) / 255.0
        np.testing.assert_allclose(img.data[0], expected, rtol=1e-7)

    def test_bad_magic(self, tmp_path):
        f = tmp_path / "t.ppm"
        f.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(DataError, match="unsupported"):
            load_image(f)

    def test_save_load(self, tmp_path):
        scene = synth_scene(4, 32, 2)
        save_image(tmp_path / "s.ppm", scene.image)
        np.testing.assert_allclose(load_image(tmp_path / "s.ppm").data, scene.image.data, atol=0.5 / 255)


class TestSynth:
    def test_empty(self):
        s = synth_scene(0, 48, 0)
        assert s.boxes.shape == (0, 4) and s.ground_truth() == []
        assert np.unique(s.image.data).size == 1

    def test_deterministic(self):
        a, b = synth_scene(9, 96, 3), synth_scene(9, 96, 3)
        np.testing.assert_array_equal(a.image.data, b.image.data)
        np.testing.assert_array_equal(a.boxes, b.boxes)

    @given(st.integers(0, 1000), st.integers(1, 3))
    @settings(max_examples=30, deadline=None)
    def test_boxes_exact(self, seed, n):
        s = synth_scene(seed, 96, n)
        assert len(s.boxes) == n
        img = s.image.data[0]
        for (x1, y1, x2, y2), c in zip(s.boxes.astype(int), s.classes):
            patch = img[:, y1:y2, x1:x2]
            assert np.all(patch == patch[:, :1, :1])
            assert 0 <= x1 < x2 <= 96 and 0 <= y1 < y2 <= 96


class TestTransforms:
    def test_unchanged(self):
        img = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 64, 128)).astype(np.float32))
        out, boxes, scale = resize_short_side(img, np.array([[1.0, 2, 3, 4]]), 64)
        assert scale == 1.0
        np.testing.assert_array_equal(out.data, img.data)
        np.testing.assert_array_equal(boxes, [[1, 2, 3, 4]])

    def test_scale_and_pad(self):
        img = Tensor(np.ones((1, 3, 100, 250), np.float32))
        out, boxes, scale = resize_short_side(img, np.array([[10.0, 20, 50, 90]]), 64)
        assert scale == pytest.approx(0.64)
        np.testing.assert_allclose(boxes, [[6.4, 12.8, 32.0, 57.6]])
        # 250 * 0.64 = 160 is already aligned; 100 -> 64 as well
        assert out.shape == (1, 3, 64, 160)
        img = Tensor(np.ones((1, 3, 100, 220), np.float32))
        out, _, _ = resize_short_side(img, np.zeros((0, 4)), 64)
        # 220 * 0.64 = 140.8 -> 141, padded to 160
        assert out.shape == (1, 3, 64, 160)
        np.testing.assert_allclose(out.data[..., :141], 1, rtol=1e-6)
        assert np.all(out.data[..., 141:] == 0)

    def test_flip_twice_identity(self):
        img = Tensor(np.random.default_rng(1).uniform(0, 1, (1, 3, 32, 48)))
        boxes = np.array([[3.5, 1, 10, 9], [0, 0, 48, 32]])
        i1, b1, f1 = random_hflip(img, boxes, seed=0, probability=1.0)
        i2, b2, f2 = random_hflip(i1, b1, seed=0, probability=1.0)
        assert f1 and f2
        np.testing.assert_allclose(b2, boxes)
        np.testing.assert_array_equal(i2.data, img.data)

    def test_flip_mirror(self):
        img = Tensor(np.arange(8.0).reshape(1, 1, 2, 4))
        out, b = hflip(img, np.array([[1.0, 0, 3, 2]]))
        np.testing.assert_array_equal(b, [[1, 0, 3, 2]])
        np.testing.assert_array_equal(out.data[0, 0, 0], [3, 2, 1, 0])

    def test_probability_zero(self):
        img = Tensor(np.zeros((1, 3, 4, 4)))
        assert random_hflip(img, np.zeros((0, 4)), seed=5, probability=0.0)[2] is False
