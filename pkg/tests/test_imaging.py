import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpreward.imaging import (AugmentationConfig, ImageFormatError, augment, bilateral_filter, clahe,
                              decode_netpbm, encode_netpbm, load_image, motion_blur_kernel, preprocess,
                              random_crop, save_image, textured_image)

ONLY_INVERT = AugmentationConfig(noise=False, contrast=False, illumination=False, gamma=False,
                                 motion_blur=False, invert=True, invert_prob=1.0)


class TestNetpbm:
    def test_p5_two_pixels(self):
        img = decode_netpbm(b"P5\n2 1\n255\n" + bytes([0, 255]))
        np.testing.assert_array_equal(img, [[0.0, 1.0]])

    def test_p5_byte_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        raw = b"P5\n7 5\n255\n" + rng.integers(0, 256, 35, dtype=np.uint8).tobytes()
        src = tmp_path / "a.pgm"
        src.write_bytes(raw)
        save_image(load_image(src), tmp_path / "b.pgm")
        assert (tmp_path / "b.pgm").read_bytes() == raw

    def test_p2_with_comments_equals_p5(self):
        q = np.random.default_rng(1).integers(0, 256, (3, 4)).astype(np.uint8)
        p5 = b"P5\n4 3\n255\n" + q.tobytes()
        rows = "\n".join(" ".join(str(v) for v in r) + " # row" for r in q)
        p2 = f"P2\n# made by hand\n4 # width\n3\n255\n{rows}\n".encode()
        np.testing.assert_array_equal(decode_netpbm(p2), decode_netpbm(p5))

    def test_p6_rgb(self):
        img = decode_netpbm(b"P6 1 1 255\n" + bytes([255, 0, 51]))
        np.testing.assert_allclose(img, [[[1.0, 0.0, 0.2]]])

    def test_quantization_on_save(self):
        data = encode_netpbm(np.array([[0.5, -1.0, 2.0, 0.2]]))
        assert data.endswith(bytes([128, 0, 255, 51]))

    def test_ascii_encoder(self):
        img = np.array([[0.0, 1.0]])
        np.testing.assert_array_equal(decode_netpbm(encode_netpbm(img, ascii_gray=True)), img)

    def test_bad_maxval(self):
        with pytest.raises(ImageFormatError, match="maxval"):
            decode_netpbm(b"P5\n1 1\n65535\n\x00\x00")

    def test_malformed_header_names_offset(self):
        with pytest.raises(ImageFormatError, match="byte offset 3"):
            decode_netpbm(b"P5\nxx 1\n255\n\x00")

    def test_unknown_magic(self):
        with pytest.raises(ImageFormatError):
            decode_netpbm(b"P7\n1 1\n255\n\x00")

    def test_truncated_body(self):
        with pytest.raises(ImageFormatError, match="truncated"):
            decode_netpbm(b"P5\n2 2\n255\n\x00")


class TestAugment:
    def test_disabled_is_identity(self):
        img = np.random.default_rng(0).random((8, 8))
        out = augment(img, AugmentationConfig.disabled(), np.random.default_rng(1))
        np.testing.assert_array_equal(out, img)

    def test_invert_constant(self):
        out = augment(np.full((4, 4), 0.25), ONLY_INVERT, np.random.default_rng(0))
        np.testing.assert_allclose(out, 0.75)

    def test_gamma_two_on_ramp(self):
        cfg = AugmentationConfig(noise=False, contrast=False, illumination=False, gamma=True,
                                 gamma_range=(2.0, 2.0), motion_blur=False, invert=False, select_prob=1.0)
        out = augment(np.array([[0.0, 0.5, 1.0]]), cfg, np.random.default_rng(0))
        np.testing.assert_allclose(out, [[0.0, 0.25, 1.0]])

    def test_contrast_and_illumination_formulas(self):
        img = np.array([[0.2, 0.6]])
        c = AugmentationConfig(noise=False, contrast=True, contrast_gain=(1.5, 1.5), illumination=False,
                               gamma=False, motion_blur=False, invert=False, select_prob=1.0)
        np.testing.assert_allclose(augment(img, c, np.random.default_rng(0)), [[0.05, 0.65]])
        i = AugmentationConfig(noise=False, contrast=False, illumination=True, illumination_offset=(0.1, 0.1),
                               gamma=False, motion_blur=False, invert=False, select_prob=1.0)
        np.testing.assert_allclose(augment(img, i, np.random.default_rng(0)), [[0.3, 0.7]])

    def test_seeded_bytes_identical(self):
        img = textured_image(32, 32, np.random.default_rng(3))
        a = augment(img, AugmentationConfig(), np.random.default_rng(9))
        b = augment(img, AugmentationConfig(), np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_extreme_parameters_stay_in_range(self, seed):
        cfg = AugmentationConfig(noise_sigma=(0.5, 2.0), contrast_gain=(0.0, 20.0), illumination_offset=(-3, 3),
                                 gamma_range=(0.05, 20.0), select_prob=1.0)
        rng = np.random.default_rng(seed)
        out = augment(rng.random((12, 12)), cfg, rng)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_blur_kernel_normalized(self):
        for length in (1, 3, 5, 9):
            for angle in (0.0, 33.0, 90.0, 170.0):
                k = motion_blur_kernel(length, angle)
                assert k.shape == (length, length)
                assert k.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize("kw", [dict(noise_sigma=(-0.1, 0.1)), dict(gamma_range=(0.0, 1.0)),
                                    dict(blur_lengths=(4,)), dict(invert_prob=1.5)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            AugmentationConfig(**kw)


def clahe_oracle(img8, gy, gx, clip):
    """Per-tile clipped equalization plus bilinear blending, pixel by pixel."""
    h, w = img8.shape
    th, tw = h // gy, w // gx
    limit = max(clip * th * tw / 256.0, 1.0)
    luts = {}
    for i in range(gy):
        for j in range(gx):
            hist = [0.0] * 256
            for y in range(i * th, (i + 1) * th):
                for x in range(j * tw, (j + 1) * tw):
                    hist[img8[y, x]] += 1
            excess = sum(max(v - limit, 0.0) for v in hist)
            hist = [min(v, limit) + excess / 256 for v in hist]
            cdf, acc = [], 0.0
            for v in hist:
                acc += v
                cdf.append(acc)
            lo, hi = cdf[0], cdf[-1]
            luts[i, j] = [0.0 if hi == lo else min(max(round((c - lo) * 255 / (hi - lo)), 0), 255) for c in cdf]
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            fy = (y + 0.5) / th - 0.5
            fx = (x + 0.5) / tw - 0.5
            i0 = min(max(int(np.floor(fy)), 0), gy - 1)
            j0 = min(max(int(np.floor(fx)), 0), gx - 1)
            i1, j1 = min(i0 + 1, gy - 1), min(j0 + 1, gx - 1)
            ay = min(max(fy - i0, 0.0), 1.0)
            ax = min(max(fx - j0, 0.0), 1.0)
            v = img8[y, x]
            out[y, x] = ((1 - ay) * ((1 - ax) * luts[i0, j0][v] + ax * luts[i0, j1][v])
                         + ay * ((1 - ax) * luts[i1, j0][v] + ax * luts[i1, j1][v])) / 255.0
    return out


class TestPreprocess:
    def test_constant_green(self):
        rgb = np.zeros((32, 32, 3))
        rgb[..., 1] = 0.4
        out = preprocess(rgb)
        assert np.ptp(out) == 0.0

    def test_pure_red_is_zero(self):
        rgb = np.zeros((24, 24, 3))
        rgb[..., 0] = 1.0
        np.testing.assert_array_equal(preprocess(rgb), 0.0)

    def test_two_tile_clahe_matches_oracle(self):
        rng = np.random.default_rng(4)
        img8 = np.concatenate([rng.integers(0, 80, (16, 16)), rng.integers(120, 256, (16, 16))], axis=1)
        got = clahe(img8 / 255.0, grid=(1, 2), clip_limit=2.0)
        np.testing.assert_allclose(got, clahe_oracle(img8, 1, 2, 2.0), atol=1e-12)

    def test_clahe_oracle_on_full_grid(self):
        img8 = np.random.default_rng(5).integers(0, 256, (16, 24))
        np.testing.assert_allclose(clahe(img8 / 255.0, grid=(4, 3), clip_limit=3.0),
                                   clahe_oracle(img8, 4, 3, 3.0), atol=1e-12)

    def test_bilateral_keeps_constant(self):
        np.testing.assert_allclose(bilateral_filter(np.full((9, 9), 0.3)), 0.3)

    def test_bilateral_preserves_strong_edge(self):
        img = np.zeros((20, 20))
        img[:, 10:] = 1.0
        out = bilateral_filter(img)
        assert out[:, :9].max() < 0.01 and out[:, 11:].min() > 0.99

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=10, deadline=None)
    def test_output_range(self, seed):
        out = preprocess(np.random.default_rng(seed).random((20, 28, 3)))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestRandomCrop:
    def test_full_size(self):
        img = np.random.default_rng(0).random((5, 5))
        crop, off = random_crop(img, 5, np.random.default_rng(0))
        assert off == (0, 0)
        np.testing.assert_array_equal(crop, img)

    def test_single_pixel_of_ramp(self):
        ramp = np.arange(64, dtype=float).reshape(8, 8) / 64
        crop, (x0, y0) = random_crop(ramp, 1, np.random.default_rng(12))
        x_ref = int(np.random.default_rng(12).integers(0, 8))
        assert x0 == x_ref
        assert crop[0, 0] == (8 * y0 + x0) / 64

    def test_offsets_uniform(self):
        rng = np.random.default_rng(2)
        img = np.zeros((4, 4))
        counts = {}
        n = 10_000
        for _ in range(n):
            _, off = random_crop(img, 2, rng)
            counts[off] = counts.get(off, 0) + 1
        assert len(counts) == 9
        p = 1 / 9
        sigma = np.sqrt(p * (1 - p) / n)
        for c in counts.values():
            assert abs(c / n - p) <= 3 * sigma

    def test_too_large(self):
        with pytest.raises(ValueError):
            random_crop(np.zeros((4, 6)), 5, np.random.default_rng(0))


def test_textured_image_range_and_seed():
    a = textured_image(40, 30, np.random.default_rng(1))
    assert a.shape == (30, 40)
    assert a.min() >= 0 and a.max() <= 1 and a.std() > 0.05
    np.testing.assert_array_equal(a, textured_image(40, 30, np.random.default_rng(1)))
