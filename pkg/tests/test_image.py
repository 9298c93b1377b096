import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from docuforge.errors import DecodeError, InvalidArgument, IoError, NotFound
from docuforge.image import (
    ImageTensor,
    extract_patches,
    load_image,
    mse,
    normalize,
    psnr,
    reassemble,
    save_image,
)

# 10*log10(255**2 / 256) and 20*log10(255 / 256), evaluated by hand
PSNR_DIFF16_STANDARD = 24.04840395556061
PSNR_DIFF16_EQ1 = -0.03399569755788782


def uint8_image(h, w, c=1, seed=0):
    return ImageTensor(np.random.default_rng(seed).integers(0, 256, (h, w, c)), "uint8")


class TestIO:
    def test_load_grayscale_png(self, tmp_path):
        Image.fromarray(np.full((200, 200), 17, np.uint8), "L").save(tmp_path / "g.png")
        img = load_image(tmp_path / "g.png")
        assert img.shape == (200, 200, 1)
        assert img.range == "uint8"
        assert img.values.dtype == np.uint8

    def test_load_rgb_png(self, tmp_path):
        Image.fromarray(np.zeros((64, 64, 3), np.uint8), "RGB").save(tmp_path / "c.png")
        img = load_image(tmp_path / "c.png")
        assert (img.height, img.width, img.channels) == (64, 64, 3)

    def test_truncated_file(self, tmp_path):
        save_image(uint8_image(50, 50), tmp_path / "ok.png")
        data = (tmp_path / "ok.png").read_bytes()
        (tmp_path / "bad.png").write_bytes(data[: len(data) // 2])
        with pytest.raises(DecodeError):
            load_image(tmp_path / "bad.png")

    def test_garbage_bytes(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"not an image at all")
        with pytest.raises(DecodeError):
            load_image(tmp_path / "x.png")

    def test_missing(self, tmp_path):
        with pytest.raises(NotFound):
            load_image(tmp_path / "nope.png")

    @pytest.mark.parametrize("channels", [1, 3])
    def test_round_trip_bit_identical(self, tmp_path, channels):
        img = uint8_image(33, 47, channels, seed=channels)
        save_image(img, tmp_path / "r.png")
        assert np.array_equal(load_image(tmp_path / "r.png").values, img.values)

    def test_unit_range_saved_as_rounded_scale(self, tmp_path):
        v = np.random.default_rng(3).random((20, 30, 1))
        save_image(ImageTensor(v, "unit"), tmp_path / "u.png")
        expected = np.array([[[int(math.floor(x * 255 + 0.5))] for x in row] for row in v[:, :, 0]])
        assert np.array_equal(load_image(tmp_path / "u.png").values, expected)

    def test_unwritable_path(self, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(IoError):
            save_image(uint8_image(4, 4), tmp_path / "file" / "out.png")


class TestImageTensor:
    def test_rejects_out_of_range(self):
        with pytest.raises(InvalidArgument):
            ImageTensor(np.array([[1.5]]), "unit")
        with pytest.raises(InvalidArgument):
            ImageTensor(np.array([[300]]), "uint8")

    def test_rejects_bad_channels(self):
        with pytest.raises(InvalidArgument):
            ImageTensor(np.zeros((4, 4, 2)), "unit")

    def test_values_are_read_only(self):
        img = uint8_image(4, 4)
        with pytest.raises(ValueError):
            img.values[0, 0, 0] = 1


class TestNormalize:
    def test_endpoints(self):
        img = ImageTensor(np.array([[0, 255, 128]]), "uint8")
        s = normalize(img, "signed").values[0, :, 0]
        assert s[0] == -1.0
        assert s[1] == 1.0
        assert s[2] == pytest.approx(2 * 128 / 255 - 1, abs=1e-15)
        assert s[2] == pytest.approx(0.00392, abs=1e-5)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12), st.sampled_from([1, 3]))))
    def test_round_trip_within_one_level(self, a):
        img = ImageTensor(a, "uint8")
        back = normalize(normalize(img, "signed"), "uint8")
        assert np.max(np.abs(back.as_float() - img.as_float())) <= 1


def window_oracle(n, size, stride):
    return [p for p in range(0, n - size + 1) if p % stride == 0 or p == n - size]


class TestPatches:
    def test_exact_fit(self):
        ps = extract_patches(uint8_image(200, 200), 200, 200)
        assert [p.origin for p in ps] == [(0, 0)]

    def test_tiling(self):
        assert len(extract_patches(uint8_image(400, 200), 200, 200)) == 2

    def test_edge_flush(self):
        ps = extract_patches(uint8_image(250, 250), 200, 200)
        expected = {(y, x) for y in window_oracle(250, 200, 200) for x in window_oracle(250, 200, 200)}
        assert {p.origin for p in ps} == expected == {(0, 0), (0, 50), (50, 0), (50, 50)}

    def test_too_large(self):
        with pytest.raises(InvalidArgument):
            extract_patches(uint8_image(100, 300), 200, 50)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 6), st.integers(1, 5))
    def test_nonoverlapping_reassembly_is_exact(self, ny, nx, size, seed):
        img = uint8_image(ny * size, nx * size, 1, seed)
        ps = extract_patches(img, size, size)
        assert np.array_equal(reassemble(ps, img.height, img.width).values, img.values)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(5, 30), st.integers(5, 30), st.integers(1, 5), st.integers(1, 5))
    def test_windows_cover_image(self, h, w, size, stride):
        stride = min(stride, size)
        ps = extract_patches(uint8_image(h, w), size, stride)
        cover = np.zeros((h, w), bool)
        for p in ps:
            y, x = p.origin
            cover[y:y + size, x:x + size] = True
        assert cover.all()


class TestMetrics:
    def test_mse_identity(self):
        img = uint8_image(10, 10)
        assert mse(img, img) == 0

    def test_mse_uniform_16(self):
        a = ImageTensor(np.full((8, 8, 1), 100), "uint8")
        b = ImageTensor(np.full((8, 8, 1), 116), "uint8")
        assert mse(a, b) == 256

    def test_mse_brute_force(self):
        a, b = uint8_image(4, 4, seed=1), uint8_image(4, 4, seed=2)
        total = 0.0
        for i in range(4):
            for j in range(4):
                d = float(a.values[i, j, 0]) - float(b.values[i, j, 0])
                total += d * d
        assert mse(a, b) == pytest.approx(total / 16, rel=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]), st.integers(0, 10_000))
    def test_mse_matches_accumulation(self, h, w, c, seed):
        a, b = uint8_image(h, w, c, seed), uint8_image(h, w, c, seed + 1)
        acc = sum((int(x) - int(y)) ** 2 for x, y in zip(a.values.ravel(), b.values.ravel()))
        assert mse(a, b) == pytest.approx(acc / (h * w * c), rel=1e-9, abs=0)

    def test_mse_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            mse(uint8_image(4, 4), uint8_image(4, 5))

    def test_psnr_identical_is_infinite(self):
        img = uint8_image(6, 6)
        r = psnr(img, img)
        assert r.psnr_db == math.inf and r.mse == 0

    def test_psnr_uniform_16(self):
        a = ImageTensor(np.full((5, 7, 1), 10), "uint8")
        b = ImageTensor(np.full((5, 7, 1), 26), "uint8")
        std = psnr(a, b)
        assert std.peak == 255
        assert std.psnr_db == pytest.approx(PSNR_DIFF16_STANDARD, rel=1e-9)
        assert psnr(a, b, "paper-eq1").psnr_db == pytest.approx(PSNR_DIFF16_EQ1, rel=1e-9)

    def test_unit_range_peak(self):
        a = ImageTensor(np.zeros((2, 2, 1)), "unit")
        b = ImageTensor(np.full((2, 2, 1), 0.1), "unit")
        assert psnr(a, b).psnr_db == pytest.approx(20.0, rel=1e-12)

    def test_psnr_same_across_ranges(self):
        a, b = uint8_image(9, 9, seed=4), uint8_image(9, 9, seed=5)
        sa, sb = normalize(a, "signed"), normalize(b, "signed")
        assert psnr(sa, sb).psnr_db == pytest.approx(psnr(a, b).psnr_db, rel=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetric(self, seed):
        a, b = uint8_image(5, 5, 3, seed), uint8_image(5, 5, 3, seed + 7)
        assert psnr(a, b).psnr_db == psnr(b, a).psnr_db

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 40))
    def test_larger_errors_lower_psnr(self, seed, bump):
        rng = np.random.default_rng(seed)
        clean = rng.uniform(0.3, 0.7, (6, 6, 1))
        err = rng.uniform(0.01, 0.14, (6, 6, 1)) * rng.choice([-1, 1], (6, 6, 1))
        worse = err * (1 + bump / 40)
        c = ImageTensor(clean, "unit")
        p1 = psnr(c, ImageTensor(clean + err, "unit")).psnr_db
        p2 = psnr(c, ImageTensor(clean + worse, "unit")).psnr_db
        assert p2 < p1

    def test_json_record(self):
        a = ImageTensor(np.full((2, 2, 1), 0), "uint8")
        b = ImageTensor(np.full((2, 2, 1), 16), "uint8")
        rec = psnr(a, b).to_record("x.png")
        assert set(rec) == {"path", "mse", "peak", "psnr_db", "mode"}
        assert json.loads(json.dumps(rec))["mse"] == 256.0
        assert psnr(a, a).to_record()["psnr_db"] is None
