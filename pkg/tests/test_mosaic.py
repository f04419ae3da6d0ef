import json

import numpy as np
import pytest

from kpreward.detector import Detector
from kpreward.geometry import Homography, corner_error
from kpreward.imaging import save_image, textured_image
from kpreward.mosaic import (MosaicState, feather_weights, fit_canvas, list_frames, load_frames, register_sequence,
                             render, synthetic_sequence, write_summary)
from kpreward.net import Unet


@pytest.fixture(scope="module")
def detector():
    return Detector(Unet(rng=np.random.default_rng(0)), nms_window=4)


def state_for(shapes, transforms):
    st = MosaicState(shapes=list(shapes), transforms=list(transforms))
    fit_canvas(st)
    return st


class TestRegisterSequence:
    def test_single_frame(self, detector, textured):
        frame = textured(48, 48, 0)
        st = register_sequence([frame], detector)
        assert st.frames_registered == 1 and st.failure_index is None
        assert (st.canvas_w, st.canvas_h) == (48, 48)
        np.testing.assert_array_equal(render(st, [frame]), frame)

    def test_identical_copies(self, detector, textured):
        frame = textured(64, 64, 1)
        st = register_sequence([frame] * 5, detector)
        assert st.frames_registered == 5
        for t in st.transforms:
            assert corner_error(t, Homography.identity(), 64, 64) < 1.0

    def test_black_frame_stops(self, detector, textured):
        frames = [textured(64, 64, 2)] * 6
        frames = frames[:3] + [np.zeros((64, 64))] + frames[4:]
        st = register_sequence(frames, detector)
        assert st.failure_index == 3
        assert st.frames_registered == 3

    def test_accumulation_identity(self, detector):
        base = textured_image(160, 160, np.random.default_rng(3))
        frames, _ = synthetic_sequence(base, 4, 64, np.random.default_rng(4))
        st = register_sequence(frames, detector)
        assert st.failure_index is None
        prod = Homography.identity()
        for k, inc in enumerate(st.increments, start=1):
            prod = prod @ inc
            np.testing.assert_allclose(st.transforms[k].m, prod.m, rtol=1e-12, atol=1e-12)

    def test_no_frames(self, detector):
        with pytest.raises(ValueError):
            register_sequence([], detector)


class TestSyntheticSequence:
    def test_truth_maps_content(self):
        base = textured_image(128, 128, np.random.default_rng(5))
        frames, truth = synthetic_sequence(base, 3, 48, np.random.default_rng(6))
        np.testing.assert_array_equal(truth[0].m, np.eye(3))
        # pixel q of frame k shows what frame 0 shows at H_0k q
        from kpreward.geometry import warp_image
        back = warp_image(frames[0], truth[2].inverse(), 48, 48)
        valid = warp_image(np.ones((48, 48)), truth[2].inverse(), 48, 48) > 0.999
        assert np.abs(back - frames[2])[valid].mean() < 0.02

    def test_leaving_base(self):
        with pytest.raises(ValueError):
            synthetic_sequence(np.zeros((50, 50)), 10, 40, np.random.default_rng(0))


class TestRender:
    def test_two_identical_frames(self, textured):
        frame = textured(32, 24, 0)
        st = state_for([(24, 32)] * 2, [Homography.identity()] * 2)
        np.testing.assert_allclose(render(st, [frame, frame]), frame, atol=1e-15)

    def test_feather_seam(self):
        h, w = 20, 40
        st = state_for([(h, w)] * 2, [Homography.identity(), Homography.translation(20, 0)])
        assert (st.canvas_w, st.canvas_h) == (60, 20)
        out = render(st, [np.full((h, w), 0.2), np.full((h, w), 0.8)])
        wt = feather_weights((h, w))
        for x in range(20, 40):
            w0, w1 = wt[:, x], wt[:, x - 20]
            np.testing.assert_allclose(out[:, x], (0.2 * w0 + 0.8 * w1) / (w0 + w1), atol=1e-12)
        row = out[h // 2, 20:40]
        assert np.all((row > 0.2) & (row < 0.8))
        assert np.all(np.diff(row) >= 0) and row[-1] > row[0]
        np.testing.assert_allclose(out[:, :20], 0.2)
        np.testing.assert_allclose(out[:, 40:], 0.8)

    def test_empty_canvas_pixels_zero(self):
        rot = Homography([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        tilt = Homography.translation(10, 0) @ Homography([[0.9, -0.4, 0], [0.4, 0.9, 0], [0, 0, 1]])
        st = state_for([(10, 10), (10, 10)], [rot, tilt])
        out = render(st, [np.ones((10, 10))] * 2)
        assert out.min() == 0.0 and out.max() == pytest.approx(1.0)

    def test_feather_weights(self):
        np.testing.assert_array_equal(feather_weights((3, 4)), [[1, 1, 1, 1], [1, 2, 2, 1], [1, 1, 1, 1]])


class TestFramesIO:
    def test_directory_order_and_manifest(self, tmp_path):
        for name in ("b.pgm", "a.pgm", "c.txt"):
            save_image(np.zeros((4, 4)), tmp_path / name) if name.endswith(".pgm") else (tmp_path / name).write_text("")
        assert [p.name for p in list_frames(tmp_path)] == ["a.pgm", "b.pgm"]
        (tmp_path / "list.txt").write_text("b.pgm\n# skip\na.pgm\n")
        assert [p.name for p in list_frames(tmp_path / "list.txt")] == ["b.pgm", "a.pgm"]

    def test_unreadable_frame_named(self, tmp_path):
        save_image(np.zeros((4, 4)), tmp_path / "a.pgm")
        (tmp_path / "b.pgm").write_bytes(b"junk")
        with pytest.raises(OSError, match="frame 1"):
            load_frames([tmp_path / "a.pgm", tmp_path / "b.pgm"])

    def test_summary_file(self, tmp_path):
        st = state_for([(8, 8)], [Homography.identity()])
        st.failure_index = 2
        write_summary(tmp_path / "s.json", st)
        assert json.loads((tmp_path / "s.json").read_text()) == {
            "frames_registered": 1, "failure_index": 2, "canvas_w": 8, "canvas_h": 8}
