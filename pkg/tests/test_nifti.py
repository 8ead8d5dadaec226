import dataclasses
import gzip
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from onnseg.errors import ValidationError
from onnseg.nifti import (DATATYPES, HEADER_SIZE, MAGIC_PAIR, MAGIC_SINGLE, NiftiFormatError,
                          NiftiHeader, NotNiftiError, TruncatedDataError,
                          UnsupportedDatatypeError, Volume, parse_header, read_volume,
                          slice_axial, volume_header, write_header, write_png_gray, write_volume)


def handmade_header(dims=(3, 4, 4, 2, 1, 1, 1, 1), endian="<", magic=b"n+1\x00",
                    datatype=16, bitpix=32) -> bytes:
    """Build header bytes directly from the published NIfTI-1 offsets,
    independently of the package's struct layout."""
    buf = bytearray(HEADER_SIZE)
    struct.pack_into(endian + "i", buf, 0, 348)
    struct.pack_into(endian + "8h", buf, 40, *dims)
    struct.pack_into(endian + "h", buf, 70, datatype)
    struct.pack_into(endian + "h", buf, 72, bitpix)
    struct.pack_into(endian + "8f", buf, 76, 1.0, 0.5, 0.5, 2.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(endian + "f", buf, 108, 352.0)
    struct.pack_into(endian + "f", buf, 112, 1.0)
    buf[344:348] = magic
    return bytes(buf)


f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


@st.composite
def headers(draw):
    ndim = draw(st.integers(1, 7))
    dims = [ndim] + [draw(st.integers(1, 32767)) for _ in range(ndim)] + \
        [draw(st.integers(-32768, 32767)) for _ in range(7 - ndim)]
    code = draw(st.sampled_from(sorted(DATATYPES)))
    magic = draw(st.sampled_from([MAGIC_SINGLE, MAGIC_PAIR]))
    vox = draw(st.floats(352, 1e6, width=32)) if magic == MAGIC_SINGLE else draw(f32)
    int16 = st.integers(-32768, 32767)
    return NiftiHeader(
        dim=tuple(dims), datatype=code, bitpix=DATATYPES[code][1],
        pixdim=tuple(draw(f32) for _ in range(8)), vox_offset=vox,
        scl_slope=draw(f32), scl_inter=draw(f32), magic=magic,
        data_type=draw(st.binary(min_size=10, max_size=10)),
        db_name=draw(st.binary(min_size=18, max_size=18)),
        extents=draw(st.integers(-2**31, 2**31 - 1)), session_error=draw(int16),
        regular=draw(st.binary(min_size=1, max_size=1)), dim_info=draw(st.integers(0, 255)),
        intent_p1=draw(f32), intent_p2=draw(f32), intent_p3=draw(f32),
        intent_code=draw(int16), slice_start=draw(int16), slice_end=draw(int16),
        slice_code=draw(st.integers(0, 255)), xyzt_units=draw(st.integers(0, 255)),
        cal_max=draw(f32), cal_min=draw(f32), slice_duration=draw(f32), toffset=draw(f32),
        glmax=draw(st.integers(-2**31, 2**31 - 1)), glmin=draw(st.integers(-2**31, 2**31 - 1)),
        descrip=draw(st.binary(min_size=80, max_size=80)),
        aux_file=draw(st.binary(min_size=24, max_size=24)),
        qform_code=draw(int16), sform_code=draw(int16),
        quatern_b=draw(f32), quatern_c=draw(f32), quatern_d=draw(f32),
        qoffset_x=draw(f32), qoffset_y=draw(f32), qoffset_z=draw(f32),
        srow_x=tuple(draw(f32) for _ in range(4)), srow_y=tuple(draw(f32) for _ in range(4)),
        srow_z=tuple(draw(f32) for _ in range(4)),
        intent_name=draw(st.binary(min_size=16, max_size=16)),
    )


class TestHeader:
    def test_handmade_bytes(self):
        h = parse_header(handmade_header())
        assert h.shape == (4, 4, 2)
        assert h.spacing == (0.5, 0.5, 2.0)
        assert h.datatype == 16 and h.bitpix == 32 and h.vox_offset == 352.0

    def test_byteswapped(self):
        le = parse_header(handmade_header(endian="<"))
        be = parse_header(handmade_header(endian=">"))
        assert le == be
        assert (le.endian, be.endian) == ("<", ">")

    def test_bad_magic(self):
        with pytest.raises(NiftiFormatError):
            parse_header(handmade_header(magic=b"abcd"))

    def test_not_nifti(self):
        with pytest.raises(NotNiftiError):
            parse_header(b"\x00" * 348)

    def test_unsupported_datatype_named(self):
        with pytest.raises(UnsupportedDatatypeError, match="512"):
            parse_header(handmade_header(datatype=512, bitpix=16))

    def test_short_buffer(self):
        with pytest.raises(TruncatedDataError):
            parse_header(handmade_header()[:300])

    def test_round_trip_byte_identical(self):
        raw = handmade_header()
        assert write_header(parse_header(raw)) == raw

    def test_dim0_zero_rejected(self):
        with pytest.raises(ValidationError):
            write_header(NiftiHeader(dim=(0, 1, 1, 1, 1, 1, 1, 1)))

    def test_default_vox_offset(self):
        h = NiftiHeader()
        assert h.magic == MAGIC_SINGLE and h.vox_offset >= 352
        h.validate()

    def test_bitpix_mismatch(self):
        with pytest.raises(ValidationError):
            write_header(NiftiHeader(datatype=4, bitpix=32))

    @settings(max_examples=200, deadline=None)
    @given(headers())
    def test_property_round_trip(self, h):
        raw = write_header(h)
        assert len(raw) == HEADER_SIZE
        back = parse_header(raw)
        assert back == h
        assert write_header(back) == raw

    @settings(max_examples=200, deadline=None)
    @given(headers())
    def test_property_endianness(self, h):
        assert parse_header(write_header(h, "<")) == parse_header(write_header(h, ">"))


def consecutive_volume():
    return Volume((4, 4, 2), (1.0, 1.0, 2.0), np.arange(32, dtype=float))


class TestVolume:
    def test_round_trip_x_fastest(self, tmp_path):
        p = tmp_path / "v.nii"
        write_volume(p, consecutive_volume())
        v = read_volume(p)
        assert v.extents == (4, 4, 2)
        assert v.spacing_mm == (1.0, 1.0, 2.0)
        np.testing.assert_array_equal(v.voxels, np.arange(32))
        raw = p.read_bytes()
        # first voxel of row y=1 is x=0,y=1 -> value 4, at byte 352 + 4*4
        assert struct.unpack_from("<f", raw, 352 + 16)[0] == 4.0

    def test_gzip(self, tmp_path):
        p = tmp_path / "v.nii.gz"
        write_volume(p, consecutive_volume())
        assert p.read_bytes()[:2] == b"\x1f\x8b"
        np.testing.assert_array_equal(read_volume(p).voxels, np.arange(32))

    @pytest.mark.parametrize("slope,inter,expected", [(2.0, 1.0, 7.0), (0.0, 5.0, 3.0)])
    def test_scaling(self, tmp_path, slope, inter, expected):
        vol = Volume((1, 1, 1), (1.0, 1.0, 1.0), [3.0])
        h = volume_header(vol, "i2", scl_slope=slope, scl_inter=inter)
        p = tmp_path / "s.nii"
        write_volume(p, vol, header=h)
        assert read_volume(p).voxels[0] == expected

    @pytest.mark.parametrize("dtype", ["u1", "i2", "f4", "f8"])
    def test_dtypes(self, tmp_path, dtype):
        vol = Volume((3, 2, 2), (1.0, 1.0, 1.0), np.arange(12))
        write_volume(tmp_path / "d.nii", vol, dtype)
        np.testing.assert_array_equal(read_volume(tmp_path / "d.nii").voxels, np.arange(12))

    @pytest.mark.parametrize("dtype", ["f4", "f8"])
    def test_float_round_trip_exact(self, tmp_path, dtype, rng):
        vals = rng.standard_normal(5 * 6 * 3).astype(dtype)
        vol = Volume((5, 6, 3), (0.9, 0.9, 3.0), vals)
        write_volume(tmp_path / "f.nii", vol, dtype)
        assert np.array_equal(read_volume(tmp_path / "f.nii").voxels, vals.astype(float))

    def test_big_endian_file(self, tmp_path):
        raw = handmade_header(endian=">") + b"\x00" * 4 + np.arange(32, dtype=">f4").tobytes()
        (tmp_path / "be.nii").write_bytes(raw)
        np.testing.assert_array_equal(read_volume(tmp_path / "be.nii").voxels, np.arange(32))

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.nii"
        write_volume(p, consecutive_volume())
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(TruncatedDataError) as exc:
            read_volume(p)
        assert exc.value.expected == 128 and exc.value.actual == 118

    def test_header_image_pair(self, tmp_path):
        h = dataclasses.replace(parse_header(handmade_header()), magic=MAGIC_PAIR, vox_offset=0.0)
        (tmp_path / "p.hdr").write_bytes(write_header(h))
        (tmp_path / "p.img").write_bytes(np.arange(32, dtype="<f4").tobytes())
        np.testing.assert_array_equal(read_volume(tmp_path / "p.hdr").voxels, np.arange(32))


class TestSlicing:
    def test_first_slice(self):
        img = slice_axial(consecutive_volume(), 0)
        np.testing.assert_array_equal(img, np.arange(16).reshape(4, 4))

    def test_restack(self):
        v = consecutive_volume()
        stacked = np.stack([slice_axial(v, z) for z in range(2)])
        np.testing.assert_array_equal(stacked.reshape(-1), v.voxels)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            slice_axial(consecutive_volume(), 2)


def png_ihdr(raw: bytes) -> tuple:
    assert raw[:8] == b"\x89PNG\r\n\x1a\n"
    assert raw[12:16] == b"IHDR"
    w, h, depth, color, comp, filt, interlace = struct.unpack(">IIBBBBB", raw[16:29])
    assert zlib.crc32(raw[12:29]) == struct.unpack(">I", raw[29:33])[0]
    return w, h, depth, color, interlace


class TestPng:
    def test_floor(self, tmp_path):
        write_png_gray(np.full((3, 4), -1.0), tmp_path / "a.png", (-1.0, 1.0))
        assert np.all(np.asarray(Image.open(tmp_path / "a.png")) == 0)

    def test_midpoint_rounds_half_up(self, tmp_path):
        write_png_gray(np.full((2, 2), 0.5), tmp_path / "m.png", (0.0, 1.0))
        assert np.all(np.asarray(Image.open(tmp_path / "m.png")) == 128)

    def test_range_error(self, tmp_path):
        with pytest.raises(ValidationError):
            write_png_gray(np.zeros((2, 2)), tmp_path / "e.png", (1.0, 1.0))

    def test_round_trip_and_format(self, tmp_path, rng):
        img = rng.random((7, 9))
        write_png_gray(img, tmp_path / "r.png")
        raw = (tmp_path / "r.png").read_bytes()
        assert png_ihdr(raw) == (9, 7, 8, 0, 0)
        decoded = np.asarray(Image.open(tmp_path / "r.png"))
        np.testing.assert_array_equal(decoded, np.floor(img * 255 + 0.5).astype(np.uint8))

    def test_deterministic_bytes(self, tmp_path, rng):
        img = rng.random((5, 5))
        write_png_gray(img, tmp_path / "x.png")
        write_png_gray(img, tmp_path / "y.png")
        assert (tmp_path / "x.png").read_bytes() == (tmp_path / "y.png").read_bytes()

    def test_clamps(self, tmp_path):
        write_png_gray(np.array([[-5.0, 5.0]]), tmp_path / "c.png")
        assert np.asarray(Image.open(tmp_path / "c.png")).tolist() == [[0, 255]]
