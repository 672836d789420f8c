import numpy as np
import pytest

from malimage import imaging
from malimage.errors import BadMagic, EmptyInput, TruncatedFile

from oracles import bilinear_reference


class TestWidthForSize:
    def test_table_brackets(self):
        # 25000 bytes ~ 24.4 kb falls in (10, 30]
        assert imaging.width_for_size(25_000) == 64

    def test_boundary_is_inclusive_above(self):
        # exactly 10 kb belongs to (0, 10]
        assert imaging.width_for_size(10 * 1024) == 32
        assert imaging.width_for_size(10 * 1024 + 1) == 64

    def test_above_table(self):
        assert imaging.width_for_size(3_000_000) == 2048
        assert imaging.width_for_size(2000 * 1024) == 1024
        assert imaging.width_for_size(2000 * 1024 + 1) == 2048

    def test_monotone_nondecreasing(self):
        sizes = [1, 512, 10 * 1024, 10 * 1024 + 1, 30 * 1024, 60 * 1024,
                 100 * 1024, 200 * 1024, 500 * 1024, 1000 * 1024,
                 2000 * 1024, 5000 * 1024]
        widths = [imaging.width_for_size(s) for s in sizes]
        assert widths == sorted(widths)

    def test_random_sizes_monotone(self):
        rng = np.random.default_rng(0)
        sizes = np.sort(rng.integers(1, 4_000_000, size=500))
        widths = [imaging.width_for_size(int(s)) for s in sizes]
        assert all(a <= b for a, b in zip(widths, widths[1:]))


class TestBytesToGray:
    def test_padding_arithmetic(self):
        img = imaging.bytes_to_gray(b"\xff" * 25_000)
        assert img.shape == (391, 64)  # 391 = ceil(25000 / 64)
        flat = img.reshape(-1)
        assert np.all(flat[:25_000] == 1.0)
        assert np.all(flat[25_000:] == 0.0)
        assert flat[25_000:].size == 24

    def test_all_zero_bytes(self):
        img = imaging.bytes_to_gray(b"\x00" * 32)
        assert img.shape == (1, 32)
        assert np.all(img == 0.0)

    def test_single_byte(self):
        img = imaging.bytes_to_gray(b"\x80")
        assert img.shape == (1, 32)
        assert img[0, 0] == np.float32(128) / np.float32(255)
        assert np.all(img.reshape(-1)[1:] == 0.0)

    def test_empty_raises(self):
        with pytest.raises(EmptyInput):
            imaging.bytes_to_gray(b"")

    def test_deterministic_bit_exact(self):
        rng = np.random.default_rng(1)
        data = rng.integers(0, 256, size=5000, dtype=np.uint8).tobytes()
        a = imaging.bytes_to_gray(data)
        b = imaging.bytes_to_gray(data)
        assert np.array_equal(a, b)

    def test_minimal_padding_property(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n = int(rng.integers(1, 200_000))
            img = imaging.bytes_to_gray(bytes(rng.integers(0, 256, n, dtype=np.uint8)))
            h, w = img.shape
            assert h * w >= n
            assert (h - 1) * w < n

    def test_range_and_finite(self):
        rng = np.random.default_rng(3)
        img = imaging.bytes_to_gray(bytes(rng.integers(0, 256, 4096, dtype=np.uint8)))
        assert np.all(img >= 0.0) and np.all(img <= 1.0)
        assert np.all(np.isfinite(img))


class TestResizeBilinear:
    def test_constant_image(self):
        img = np.full((17, 33), 0.5, dtype=np.float32)
        out = imaging.resize_bilinear(img, 8)
        assert out.shape == (8, 8)
        assert np.allclose(out, 0.5, atol=1e-7)

    def test_identity(self):
        rng = np.random.default_rng(4)
        img = rng.random((12, 12)).astype(np.float32)
        out = imaging.resize_bilinear(img, 12)
        assert np.array_equal(out, img)

    def test_2x2_against_reference(self):
        img = np.array([[0.0, 1.0], [0.0, 1.0]], dtype=np.float32)
        out = imaging.resize_bilinear(img, 4)
        ref = bilinear_reference(img.astype(np.float64), 4)
        assert np.allclose(out, ref, atol=1e-7)

    def test_random_against_reference(self):
        rng = np.random.default_rng(5)
        for h, w, side in [(7, 13, 5), (31, 9, 16), (4, 4, 9)]:
            img = rng.random((h, w)).astype(np.float32)
            out = imaging.resize_bilinear(img, side)
            ref = bilinear_reference(img.astype(np.float64), side)
            assert np.allclose(out, ref, atol=1e-6)

    def test_output_in_unit_range(self):
        rng = np.random.default_rng(6)
        img = rng.random((50, 20)).astype(np.float32)
        out = imaging.resize_bilinear(img, 28)
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        assert np.all(np.isfinite(out))

    def test_to_small(self):
        img = np.full((391, 64), 0.25, dtype=np.float32)
        out = imaging.to_small(img)
        assert out.shape == (28, 28)
        assert np.allclose(out, 0.25, atol=1e-7)
        ref = bilinear_reference(img.astype(np.float64), 28)
        assert np.allclose(out, ref, atol=1e-6)

    def test_to_small_identity_at_28(self):
        rng = np.random.default_rng(7)
        img = rng.random((28, 28)).astype(np.float32)
        assert np.array_equal(imaging.to_small(img), img)


class TestReplicateChannels:
    def test_three_identical_planes(self):
        rng = np.random.default_rng(8)
        img = rng.random((9, 9)).astype(np.float32)
        rgb = imaging.replicate_channels(img)
        assert rgb.shape == (9, 9, 3)
        for c in range(3):
            assert np.array_equal(rgb[:, :, c], img)

    def test_zero_image(self):
        rgb = imaging.replicate_channels(np.zeros((4, 4), dtype=np.float32))
        assert np.all(rgb == 0.0)

    def test_single_pixel_value(self):
        img = np.zeros((3, 3), dtype=np.float32)
        img[0, 0] = 0.3
        rgb = imaging.replicate_channels(img)
        assert all(rgb[0, 0, c] == np.float32(0.3) for c in range(3))


class TestImageStore:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        records = [
            ("a", rng.random((5, 7)).astype(np.float32)),
            ("sample/two.bin", rng.random((3, 3, 3)).astype(np.float32)),
            ("unicode-идентификатор", rng.random((1, 4)).astype(np.float32)),
        ]
        path = tmp_path / "t.mimg"
        imaging.write_image_store(path, records)
        loaded = imaging.read_image_store(path)
        assert [i for i, _ in loaded] == [i for i, _ in records]
        for (_, orig), (_, back) in zip(records, loaded):
            assert orig.shape == back.shape
            assert np.array_equal(orig, back)
        # writing the loaded records again reproduces identical bytes
        path2 = tmp_path / "t2.mimg"
        imaging.write_image_store(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.mimg"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(BadMagic):
            imaging.read_image_store(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.mimg"
        imaging.write_image_store(p, [("x", np.zeros((4, 4), dtype=np.float32))])
        blob = p.read_bytes()
        p.write_bytes(blob[:-7])
        with pytest.raises(TruncatedFile) as exc:
            imaging.read_image_store(p)
        assert "offset" in str(exc.value)
