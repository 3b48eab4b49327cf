import allure
import numpy as np
import pytest

from primvol.geomcore import ImageBuffer
from primvol.imagefile import (
    ImageFileError,
    linear_to_srgb,
    read_image,
    read_pfm,
    read_png,
    srgb_to_linear,
    write_pfm,
    write_png,
)


@allure.feature("PFM")
class TestPfm:
    def test_round_trip_is_exact_for_float32_values(self, tmp_path):
        data = (np.arange(4 * 5 * 3).reshape(4, 5, 3) % 9) / 8.0
        write_pfm(tmp_path / "a.pfm", ImageBuffer(data))
        loaded = read_pfm(tmp_path / "a.pfm")
        np.testing.assert_array_equal(loaded.data, data)

    def test_rows_keep_their_order(self, tmp_path):
        data = np.zeros((3, 2, 3))
        data[0] = 1.0
        write_pfm(tmp_path / "a.pfm", data)
        np.testing.assert_array_equal(read_image(tmp_path / "a.pfm").data[0], np.ones((2, 3)))

    def test_single_channel(self, tmp_path):
        write_pfm(tmp_path / "g.pfm", np.full((2, 3), 0.5))
        assert (tmp_path / "g.pfm").read_bytes().startswith(b"Pf\n")
        assert read_pfm(tmp_path / "g.pfm").shape == (2, 3, 1)

    def test_rgba_drops_alpha(self, tmp_path):
        write_pfm(tmp_path / "a.pfm", np.full((2, 2, 4), 0.25))
        assert read_pfm(tmp_path / "a.pfm").channels == 3

    def test_big_endian(self, tmp_path):
        path = tmp_path / "be.pfm"
        path.write_bytes(b"Pf\n1 1\n1.0\n" + np.array([0.75], dtype=">f4").tobytes())
        assert read_pfm(path).data[0, 0, 0] == 0.75

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.pfm"
        path.write_bytes(b"PF\nwide tall\n-1.0\n")
        with pytest.raises(ImageFileError):
            read_pfm(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.pfm"
        path.write_bytes(b"P6\n1 1\n-1.0\n" + b"\0" * 12)
        with pytest.raises(ImageFileError):
            read_pfm(path)

    def test_truncated(self, tmp_path):
        path = write_pfm(tmp_path / "a.pfm", np.zeros((2, 2, 3)))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ImageFileError):
            read_pfm(path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_pfm(tmp_path / "nope.pfm")


@allure.feature("PNG")
class TestPng:
    def test_round_trip_within_quantization(self, tmp_path, rng):
        data = rng.uniform(0.05, 1.0, size=(6, 7, 3))
        write_png(tmp_path / "a.png", data)
        loaded = read_png(tmp_path / "a.png")
        assert loaded.shape == (6, 7, 3)
        np.testing.assert_allclose(loaded.data, data, atol=0.02)

    def test_out_of_range_is_clipped(self, tmp_path):
        write_png(tmp_path / "a.png", np.full((2, 2, 3), 1.5))
        np.testing.assert_allclose(read_png(tmp_path / "a.png").data, 1.0)

    def test_greyscale(self, tmp_path):
        write_png(tmp_path / "g.png", np.full((2, 2), 0.5))
        assert read_image(tmp_path / "g.png").channels == 3

    def test_srgb_inverse(self):
        x = np.linspace(0.0, 1.0, 101)
        np.testing.assert_allclose(srgb_to_linear(linear_to_srgb(x)), x, atol=1e-12)
