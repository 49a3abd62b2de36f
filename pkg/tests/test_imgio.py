import sys

import numpy as np
import pytest

from zippypoint.errors import (
    ConfigurationError,
    FormatError,
    InvalidInputError,
    TruncatedFileError,
)
from zippypoint.imgio import read_image, read_pnm, write_image, write_pnm


def rand_img(rng, h, w, c=None):
    shape = (h, w) if c is None else (h, w, c)
    return rng.integers(0, 256, size=shape, dtype=np.uint8)


class TestPnmRoundTrip:
    def test_gray(self, tmp_path):
        img = rand_img(np.random.default_rng(0), 7, 11)
        p = tmp_path / "g.pgm"
        write_pnm(p, img)
        back = read_pnm(p)
        assert back.shape == (7, 11)
        np.testing.assert_array_equal(back, img)

    def test_color(self, tmp_path):
        img = rand_img(np.random.default_rng(1), 5, 9, 3)
        p = tmp_path / "c.ppm"
        write_pnm(p, img)
        np.testing.assert_array_equal(read_pnm(p), img)

    def test_single_channel_axis_collapses(self, tmp_path):
        img = rand_img(np.random.default_rng(2), 4, 6, 1)
        p = tmp_path / "g.pgm"
        write_pnm(p, img)
        back = read_pnm(p)
        assert back.shape == (4, 6)
        np.testing.assert_array_equal(back, img[:, :, 0])

    def test_written_header_is_canonical(self, tmp_path):
        p = tmp_path / "g.pgm"
        write_pnm(p, np.zeros((2, 3), dtype=np.uint8))
        assert p.read_bytes() == b"P5\n3 2\n255\n" + b"\x00" * 6


class TestPnmParsing:
    def test_comments_anywhere_in_header(self, tmp_path):
        pixels = bytes(range(6))
        raw = b"P5 # magic\n# a full comment line\n3 # width\n 2\n# before maxval\n255\n" + pixels
        p = tmp_path / "c.pgm"
        p.write_bytes(raw)
        np.testing.assert_array_equal(
            read_pnm(p), np.frombuffer(pixels, dtype=np.uint8).reshape(2, 3)
        )

    def test_crlf_and_tab_separators(self, tmp_path):
        p = tmp_path / "w.pgm"
        p.write_bytes(b"P5\r\n3\t2\r255\n" + bytes(6))
        assert read_pnm(p).shape == (2, 3)

    def test_low_maxval_codes_pass_through(self, tmp_path):
        # codes are returned as stored, never rescaled to the maxval
        p = tmp_path / "m.pgm"
        p.write_bytes(b"P5\n2 1\n100\n" + bytes([10, 90]))
        np.testing.assert_array_equal(read_pnm(p), [[10, 90]])

    def test_pixel_data_may_start_with_whitespace_byte(self, tmp_path):
        # only ONE byte after maxval is a delimiter; a 0x20 pixel survives
        p = tmp_path / "s.pgm"
        p.write_bytes(b"P5\n2 1\n255\n" + bytes([0x20, 7]))
        np.testing.assert_array_equal(read_pnm(p), [[0x20, 7]])


class TestPnmRejections:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.pgm"
        p.write_bytes(b"P3\n1 1\n255\n0")
        with pytest.raises(FormatError, match="not a binary"):
            read_pnm(p)

    def test_wide_maxval(self, tmp_path):
        p = tmp_path / "x.pgm"
        p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(FormatError, match="exceeds 8-bit"):
            read_pnm(p)

    def test_zero_maxval(self, tmp_path):
        p = tmp_path / "x.pgm"
        p.write_bytes(b"P5\n1 1\n0\n\x00")
        with pytest.raises(FormatError, match="bad maxval"):
            read_pnm(p)

    def test_zero_dimension(self, tmp_path):
        p = tmp_path / "x.pgm"
        p.write_bytes(b"P5\n0 4\n255\n")
        with pytest.raises(FormatError, match="bad dimensions"):
            read_pnm(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "x.pgm"
        p.write_bytes(b"P5\n3 2")
        with pytest.raises(TruncatedFileError):
            read_pnm(p)

    def test_missing_delimiter_after_maxval(self, tmp_path):
        p = tmp_path / "x.pgm"
        p.write_bytes(b"P5\n1 1\n255")
        with pytest.raises(FormatError, match="delimiter"):
            read_pnm(p)

    def test_truncated_pixels(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(TruncatedFileError, match="expected 48"):
            read_pnm(p)

    def test_write_rejects_non_uint8(self, tmp_path):
        with pytest.raises(InvalidInputError, match="uint8"):
            write_pnm(tmp_path / "x.pgm", np.zeros((2, 2), dtype=np.float32))

    def test_write_rejects_odd_shapes(self, tmp_path):
        with pytest.raises(InvalidInputError, match="cannot encode"):
            write_pnm(tmp_path / "x.pgm", np.zeros((2, 2, 4), dtype=np.uint8))


class TestSniffingAndDispatch:
    def test_read_image_ignores_extension(self, tmp_path):
        img = rand_img(np.random.default_rng(3), 3, 4)
        p = tmp_path / "actually_a.png"  # content wins over the name
        write_pnm(p, img)
        np.testing.assert_array_equal(read_image(p), img)

    def test_read_image_unknown_bytes(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"\x00\x01\x02garbage")
        with pytest.raises(FormatError, match="unrecognized"):
            read_image(p)

    def test_write_image_pnm_extensions(self, tmp_path):
        img = rand_img(np.random.default_rng(4), 4, 4, 3)
        for name in ("a.ppm", "b.pnm"):
            write_image(tmp_path / name, img)
            np.testing.assert_array_equal(read_image(tmp_path / name), img)

    def test_write_image_unknown_extension(self, tmp_path):
        with pytest.raises(InvalidInputError, match="jpg"):
            write_image(tmp_path / "x.jpg", np.zeros((2, 2), dtype=np.uint8))


class TestPng:
    pil = pytest.importorskip("PIL", reason="png path needs pillow")

    def test_round_trip_gray_and_rgb(self, tmp_path):
        rng = np.random.default_rng(5)
        for img in (rand_img(rng, 6, 5), rand_img(rng, 6, 5, 3)):
            p = tmp_path / "t.png"
            write_image(p, img)
            np.testing.assert_array_equal(read_image(p), img)

    def test_missing_pillow_names_the_extra(self, tmp_path, monkeypatch):
        img = rand_img(np.random.default_rng(6), 2, 2)
        p = tmp_path / "t.png"
        write_image(p, img)
        monkeypatch.setitem(sys.modules, "PIL", None)
        monkeypatch.setitem(sys.modules, "PIL.Image", None)
        with pytest.raises(ConfigurationError, match="pillow"):
            read_image(p)
        with pytest.raises(ConfigurationError, match="zippypoint\\[png\\]"):
            write_image(tmp_path / "u.png", img)