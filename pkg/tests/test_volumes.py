import struct

import numpy as np
import pytest

from longimix.errors import ParseError, ValidationError
from longimix.volumes import (
    DisplacementField,
    VoxelMask,
    load_field,
    load_mask,
    save_field,
    save_mask,
)


def mask_bytes(dims, spacing, flags):
    return struct.pack("<4sIIIIddd", b"MSK1", 1, *dims, *spacing) + bytes(flags)


def field_bytes(dims, spacing, values_f32):
    return (struct.pack("<4sIIIIddd", b"DFLD", 1, *dims, *spacing)
            + np.asarray(values_f32, dtype="<f4").tobytes())


class TestMaskFormat:
    def test_x_fastest_order(self, tmp_path):
        # flat index = ix + nx*(iy + ny*iz); set only flat index 1 -> (ix=1, iy=0, iz=0)
        dims = (2, 2, 2)
        flags = [0] * 8
        flags[1] = 1
        path = tmp_path / "m.msk1"
        path.write_bytes(mask_bytes(dims, (1.0, 1.0, 1.0), flags))
        mask = load_mask(path)
        assert mask.voxels[1, 0, 0]
        assert mask.count() == 1

        flags = [0] * 8
        flags[0 + 2 * (1 + 2 * 1)] = 1  # (ix=0, iy=1, iz=1)
        path.write_bytes(mask_bytes(dims, (1.0, 1.0, 1.0), flags))
        assert load_mask(path).voxels[0, 1, 1]

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        mask = VoxelMask((4, 3, 5), (0.5, 1.0, 2.0), rng.random((4, 3, 5)) < 0.4)
        path = tmp_path / "m.msk1"
        save_mask(mask, path)
        back = load_mask(path)
        assert back.dims == mask.dims
        assert back.spacing == mask.spacing
        assert np.array_equal(back.voxels, mask.voxels)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.msk1"
        raw = mask_bytes((1, 1, 1), (1.0, 1.0, 1.0), [0])
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(ParseError, match="magic"):
            load_mask(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.msk1"
        path.write_bytes(struct.pack("<4sIIIIddd", b"MSK1", 2, 1, 1, 1, 1.0, 1.0, 1.0) + b"\x00")
        with pytest.raises(ParseError, match="version"):
            load_mask(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "m.msk1"
        path.write_bytes(mask_bytes((2, 2, 2), (1.0, 1.0, 1.0), [0] * 7))
        with pytest.raises(ParseError, match="expected"):
            load_mask(path)

    def test_nonbinary_flag(self, tmp_path):
        path = tmp_path / "m.msk1"
        path.write_bytes(mask_bytes((1, 1, 1), (1.0, 1.0, 1.0), [2]))
        with pytest.raises(ParseError, match="0 or 1"):
            load_mask(path)

    def test_zero_dim_rejected(self, tmp_path):
        path = tmp_path / "m.msk1"
        path.write_bytes(struct.pack("<4sIIIIddd", b"MSK1", 1, 0, 1, 1, 1.0, 1.0, 1.0))
        with pytest.raises(ParseError):
            load_mask(path)


class TestFieldFormat:
    def test_per_voxel_component_order(self, tmp_path):
        # voxel (ix=1, iy=0, iz=0) is flat index 1: components land at 3..5
        dims = (2, 1, 1)
        values = [0.0, 0.0, 0.0, 1.5, -2.0, 3.25]
        path = tmp_path / "f.dfld"
        path.write_bytes(field_bytes(dims, (1.0, 1.0, 1.0), values))
        field = load_field(path)
        assert field.vectors[1, 0, 0].tolist() == [1.5, -2.0, 3.25]
        assert field.vectors[0, 0, 0].tolist() == [0.0, 0.0, 0.0]

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        # f32-representable values so the round trip is exact
        vectors = rng.standard_normal((3, 4, 2, 3)).astype(np.float32).astype(np.float64)
        field = DisplacementField((3, 4, 2), (1.0, 0.5, 2.0), vectors)
        path = tmp_path / "f.dfld"
        save_field(field, path)
        back = load_field(path)
        assert back.dims == field.dims
        assert back.spacing == field.spacing
        assert np.array_equal(back.vectors, field.vectors)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "f.dfld"
        path.write_bytes(b"DFLD\x01")
        with pytest.raises(ParseError, match="truncated"):
            load_field(path)

    def test_non_finite_rejected(self, tmp_path):
        path = tmp_path / "f.dfld"
        path.write_bytes(field_bytes((1, 1, 1), (1.0, 1.0, 1.0), [np.inf, 0.0, 0.0]))
        with pytest.raises(ParseError, match="non-finite"):
            load_field(path)


class TestTypes:
    def test_mask_shape_must_match_dims(self):
        with pytest.raises(ValidationError):
            VoxelMask((2, 2, 2), (1.0, 1.0, 1.0), np.ones((2, 2, 3), dtype=bool))

    def test_mask_must_be_boolean(self):
        with pytest.raises(ValidationError):
            VoxelMask((2, 2, 2), (1.0, 1.0, 1.0), np.ones((2, 2, 2)))

    def test_bad_spacing(self):
        with pytest.raises(ValidationError):
            VoxelMask((2, 2, 2), (0.0, 1.0, 1.0), np.ones((2, 2, 2), dtype=bool))

    def test_field_requires_finite(self):
        v = np.zeros((2, 2, 2, 3))
        v[0, 0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            DisplacementField((2, 2, 2), (1.0, 1.0, 1.0), v)

    def test_touches_boundary(self):
        inner = np.zeros((4, 4, 4), dtype=bool)
        inner[1:3, 1:3, 1:3] = True
        assert not VoxelMask((4, 4, 4), (1.0, 1.0, 1.0), inner).touches_boundary()
        edge = np.zeros((4, 4, 4), dtype=bool)
        edge[0, 2, 2] = True
        assert VoxelMask((4, 4, 4), (1.0, 1.0, 1.0), edge).touches_boundary()
        assert not VoxelMask((4, 4, 4), (1.0, 1.0, 1.0),
                             np.zeros((4, 4, 4), dtype=bool)).touches_boundary()
