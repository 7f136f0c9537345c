import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra import numpy as hnp

from gensemcom.tensorio import (FormatError, load_ppm, pack_tensor, read_key_values, save_ppm,
                                unpack_tensor)


class TestTensorFormat:
    def test_header_layout(self):
        data = pack_tensor(np.arange(6, dtype=np.int32).reshape(2, 3))
        expected = b"GVTF" + bytes([1, 2, 2]) + struct.pack("<II", 2, 3)
        assert data[:15] == expected
        assert data[15:] == np.arange(6, dtype="<i4").tobytes()

    def test_float_roundtrip_is_float32_exact(self):
        x = np.random.default_rng(0).standard_normal((4, 5, 6))
        y = unpack_tensor(pack_tensor(x))
        assert y.shape == x.shape
        np.testing.assert_array_equal(y, x.astype(np.float32))

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.int32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
    def test_int_roundtrip(self, arr):
        out = unpack_tensor(pack_tensor(arr))
        assert out.dtype == np.int32
        np.testing.assert_array_equal(out, arr)

    @pytest.mark.parametrize("mutate", [
        lambda d: b"XXXX" + d[4:],
        lambda d: d[:4] + b"\x02" + d[5:],
        lambda d: d[:5] + b"\x07" + d[6:],
        lambda d: d[:-1],
        lambda d: d + b"\x00",
        lambda d: d[:9],
    ])
    def test_malformed_raises(self, mutate):
        data = pack_tensor(np.ones((2, 2), np.float32))
        with pytest.raises(FormatError):
            unpack_tensor(mutate(data))

    def test_rejects_complex(self):
        with pytest.raises(TypeError):
            pack_tensor(np.ones(3, complex))


class TestPpm:
    def test_roundtrip_and_orientation(self, tmp_path):
        img = np.random.default_rng(1).integers(0, 256, (7, 5, 3)).astype(float)
        save_ppm(tmp_path / "a.ppm", img)
        raw = (tmp_path / "a.ppm").read_bytes()
        assert raw.startswith(b"P6\n7 5\n255\n")
        # first stored pixel row walks along the first array axis
        assert raw[11:14] == bytes(img[0, 0].astype(np.uint8))
        assert raw[14:17] == bytes(img[1, 0].astype(np.uint8))
        np.testing.assert_array_equal(load_ppm(tmp_path / "a.ppm"), img)

    def test_clamps_and_rounds(self, tmp_path):
        img = np.array([[[-3.0, 254.6, 300.0]]])
        save_ppm(tmp_path / "b.ppm", img)
        np.testing.assert_array_equal(load_ppm(tmp_path / "b.ppm"), [[[0, 255, 255]]])

    def test_pgm_with_comment_is_gray_rgb(self, tmp_path):
        (tmp_path / "g.pgm").write_bytes(b"P5\n# note\n2 1\n255\n" + bytes([10, 200]))
        img = load_ppm(tmp_path / "g.pgm")
        assert img.shape == (2, 1, 3)
        np.testing.assert_array_equal(img[:, 0, 0], [10, 200])
        np.testing.assert_array_equal(img[:, :, 0], img[:, :, 2])

    def test_rejects_ascii_and_16bit(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(FormatError):
            load_ppm(tmp_path / "a.ppm")
        (tmp_path / "b.ppm").write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(FormatError):
            load_ppm(tmp_path / "b.ppm")


class TestKeyValues:
    def test_parse(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\nsnr-db = 6   # trailing\n\nt_max_ms=20\n")
        assert read_key_values(p) == {"snr_db": "6", "t_max_ms": "20"}

    def test_bad_line(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("oops\n")
        with pytest.raises(FormatError):
            read_key_values(p)
