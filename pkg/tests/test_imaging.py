import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chmfl.imaging import (
    ManifestError,
    Modality,
    PatientRecord,
    Volume,
    VolumeFormatError,
    extract_bounding_box,
    load_manifest,
    mask_centroid,
    normalize_intensity,
    preprocess_record,
    read_volume,
    resample_isotropic,
    restore_box,
    write_manifest,
    write_volume,
)


def vol(arr, spacing=(1.0, 1.0, 1.0), modality=Modality.CT):
    return Volume(np.asarray(arr, dtype=np.float32), spacing, modality)


def point_mask(shape, at):
    m = np.zeros(shape, dtype=np.float32)
    m[at] = 1
    return vol(m, modality=Modality.MASK)


class TestVolume:
    def test_mask_must_be_binary(self):
        with pytest.raises(ValueError, match="MASK"):
            vol(np.full((2, 2, 2), 0.5), modality=Modality.MASK)

    def test_spacing_positive(self):
        with pytest.raises(ValueError):
            vol(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))

    def test_voxels_read_only(self):
        v = vol(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            v.voxels[0, 0, 0] = 1


class TestContainer:
    def test_round_trip(self, tmp_path):
        v = vol(np.random.default_rng(0).standard_normal((4, 4, 4)), spacing=(1.5, 2.0, 3.27))
        write_volume(v, tmp_path / "a.chvl")
        back = read_volume(tmp_path / "a.chvl")
        assert back.same_as(v)
        assert back.voxels.tobytes() == v.voxels.tobytes()

    def test_header_layout(self, tmp_path):
        write_volume(vol(np.zeros((2, 3, 4)), spacing=(1, 2, 3), modality=Modality.PET), tmp_path / "h.chvl")
        raw = (tmp_path / "h.chvl").read_bytes()
        assert raw[:4] == b"CHVL" and raw[4] == 1 and raw[5] == 1
        assert struct.unpack_from("<3Q3d", raw, 6) == (2, 3, 4, 1.0, 2.0, 3.0)
        assert len(raw) == 6 + 48 + 4 * 24

    def test_truncated_payload(self, tmp_path):
        header = struct.pack("<4sBB3Q3d", b"CHVL", 1, 0, 2, 2, 2, 1.0, 1.0, 1.0)
        (tmp_path / "t.chvl").write_bytes(header + np.zeros(7, "<f4").tobytes())
        with pytest.raises(VolumeFormatError, match="truncated"):
            read_volume(tmp_path / "t.chvl")

    def test_unknown_modality(self, tmp_path):
        header = struct.pack("<4sBB3Q3d", b"CHVL", 1, 9, 1, 1, 1, 1.0, 1.0, 1.0)
        (tmp_path / "m.chvl").write_bytes(header + b"\0" * 4)
        with pytest.raises(VolumeFormatError, match="modality"):
            read_volume(tmp_path / "m.chvl")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.chvl").write_bytes(b"NOPE" + b"\0" * 60)
        with pytest.raises(VolumeFormatError, match="magic"):
            read_volume(tmp_path / "x.chvl")

    def test_invalid_mask_payload(self, tmp_path):
        header = struct.pack("<4sBB3Q3d", b"CHVL", 1, 2, 1, 1, 1, 1.0, 1.0, 1.0)
        (tmp_path / "k.chvl").write_bytes(header + np.array([0.5], "<f4").tobytes())
        with pytest.raises(VolumeFormatError, match="MASK"):
            read_volume(tmp_path / "k.chvl")


def _record(pid, label=0, shape=(6, 6, 6)):
    rng = np.random.default_rng(len(pid) + label)
    mask = np.zeros(shape, dtype=np.float32)
    mask[tuple(slice(n // 3, n // 3 + max(1, n // 3)) for n in shape)] = 1
    return PatientRecord(pid, vol(rng.random(shape), modality=Modality.PET), vol(rng.standard_normal(shape)),
                         vol(mask, modality=Modality.MASK), label)


class TestManifest:
    def test_round_trip(self, tmp_path):
        recs = [_record(f"P{i}", i % 2) for i in range(3)]
        path = write_manifest(recs, tmp_path)
        back = load_manifest(path)
        assert [r.id for r in back] == ["P0", "P1", "P2"]
        assert [r.dm_label for r in back] == [0, 1, 0]
        assert all(a.pet.same_as(b.pet) and a.mask.same_as(b.mask) for a, b in zip(recs, back))

    def test_48_entries(self, tmp_path):
        path = write_manifest([_record(f"P{i:02d}", i % 2, (2, 2, 2)) for i in range(48)], tmp_path)
        assert len(load_manifest(path)) == 48

    def test_duplicate_id(self, tmp_path):
        path = write_manifest([_record("A")], tmp_path)
        path.write_text(path.read_text() + path.read_text().splitlines()[1] + "\n")
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(path)

    def test_bad_label(self, tmp_path):
        path = write_manifest([_record("A")], tmp_path)
        path.write_text(path.read_text().replace(",0\n", ",2\n"))
        with pytest.raises(ManifestError, match="label"):
            load_manifest(path)

    def test_missing_volume_file(self, tmp_path):
        path = write_manifest([_record("A")], tmp_path)
        (tmp_path / "A_ct.chvl").unlink()
        with pytest.raises(ManifestError, match="missing ct"):
            load_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "nope.csv")

    def test_empty(self, tmp_path):
        assert load_manifest(write_manifest([], tmp_path)) == []
        (tmp_path / "blank.csv").write_text("")
        assert load_manifest(tmp_path / "blank.csv") == []


class TestResample:
    def test_identity_at_target(self):
        v = vol(np.random.default_rng(0).random((3, 4, 5)))
        assert np.array_equal(resample_isotropic(v, 1.0).voxels, v.voxels)

    def test_two_point_profile(self):
        v = vol(np.array([0.0, 2.0]).reshape(2, 1, 1), spacing=(2.0, 1.0, 1.0))
        out = resample_isotropic(v, 1.0).voxels.ravel()
        assert out.shape == (4,)
        assert out[:3].tolist() == [0.0, 1.0, 2.0]

    def test_extent_rounding(self):
        v = vol(np.zeros((10, 7, 3)), spacing=(3.27, 1.0, 0.5))
        assert resample_isotropic(v, 1.0).extents == (33, 7, 2)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-100, 100), st.tuples(*[st.floats(0.4, 3.5)] * 3), st.floats(0.5, 2.0))
    def test_constants_preserved(self, c, spacing, target):
        v = vol(np.full((4, 3, 5), c), spacing=spacing)
        assert np.all(resample_isotropic(v, target).voxels == np.float32(c))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.tuples(*[st.floats(0.4, 3.5)] * 3))
    def test_values_stay_in_range(self, seed, spacing):
        v = vol(np.random.default_rng(seed).standard_normal((5, 4, 3)) * 50, spacing=spacing)
        out = resample_isotropic(v, 1.0).voxels
        assert out.min() >= v.voxels.min() and out.max() <= v.voxels.max()

    def test_mask_stays_binary(self):
        m = np.zeros((5, 5, 5), dtype=np.float32)
        m[1:4, 2:4, 0:3] = 1
        out = resample_isotropic(vol(m, spacing=(1.7, 0.6, 2.3), modality=Modality.MASK), 1.0).voxels
        assert set(np.unique(out)) <= {0.0, 1.0}

    def test_cuboid_volume_preserved(self):
        # 10 x 10 x 10 mm cuboid sampled at 2 / 0.5 / 2.5 mm
        m = np.zeros((20, 80, 16), dtype=np.float32)
        m[5:10, 20:40, 4:8] = 1
        v = vol(m, spacing=(2.0, 0.5, 2.5), modality=Modality.MASK)
        count = resample_isotropic(v, 1.0).voxels.sum()
        assert abs(count - 1000) <= 50

    def test_degenerate_extent(self):
        with pytest.raises(ValueError):
            resample_isotropic(vol(np.zeros((1, 1, 1)), spacing=(0.2, 1, 1)), 1.0)


class TestBoundingBox:
    def test_centred_crop(self):
        shape = (40, 40, 40)
        data = np.arange(np.prod(shape), dtype=np.float32).reshape(shape)
        out = extract_bounding_box(vol(data), point_mask(shape, (20, 21, 22)), (8, 10, 12))
        assert out.extents == (8, 10, 12)
        assert out.voxels[4, 5, 6] == data[20, 21, 22]

    def test_paper_box_size(self):
        shape = (130, 130, 160)
        out = extract_bounding_box(vol(np.ones(shape)), point_mask(shape, (65, 65, 80)))
        assert out.extents == (112, 112, 144)

    def test_corner_tumor_zero_padded(self):
        shape = (10, 10, 10)
        out = extract_bounding_box(vol(np.ones(shape)), point_mask(shape, (0, 0, 9)), (6, 6, 6)).voxels
        assert out[3, 3, 3] == 1.0
        assert np.all(out[:3] == 0) and np.all(out[:, :3] == 0) and np.all(out[:, :, 4:] == 0)

    def test_single_voxel_mask(self):
        m = point_mask((9, 9, 9), (2, 6, 4))
        out = extract_bounding_box(m, m, (5, 5, 5))
        assert mask_centroid(out) == (2, 2, 2)

    def test_empty_mask(self):
        with pytest.raises(ValueError, match="empty"):
            extract_bounding_box(vol(np.ones((4, 4, 4))), vol(np.zeros((4, 4, 4)), modality=Modality.MASK), (2, 2, 2))


class TestNormalize:
    def test_zero_mean_unit_variance(self):
        out = normalize_intensity(vol(np.random.default_rng(0).gamma(2.0, 3.0, (10, 10, 10)))).voxels
        assert abs(out.astype(np.float64).mean()) < 1e-6
        assert abs(out.astype(np.float64).var() - 1) < 1e-4

    def test_outlier_clipped(self):
        x = np.random.default_rng(1).random((10, 10, 10))
        x[0, 0, 0] = 100 * np.percentile(x, 99)
        out = normalize_intensity(vol(x)).voxels
        # after clipping the outlier is no larger than the 99.5th percentile of the rest
        assert out[0, 0, 0] == out.max()
        assert out.max() < 3.0

    def test_affine_invariance(self):
        x = np.random.default_rng(2).standard_normal((8, 8, 8))
        a = normalize_intensity(vol(x)).voxels
        b = normalize_intensity(vol(3.5 * x - 20)).voxels
        assert np.max(np.abs(a - b)) < 1e-5

    def test_constant_rejected(self):
        with pytest.raises(ValueError):
            normalize_intensity(vol(np.ones((3, 3, 3))))


def test_preprocess_desk_box():
    shape = (20, 20, 12)
    rng = np.random.default_rng(3)
    m = np.zeros(shape, dtype=np.float32)
    m[8:12, 8:12, 5:8] = 1
    rec = PatientRecord("X", vol(rng.random(shape), (2.0, 2.0, 3.0), Modality.PET),
                        vol(rng.standard_normal(shape), (2.0, 2.0, 3.0)),
                        vol(m, (2.0, 2.0, 3.0), Modality.MASK), 1)
    out = preprocess_record(rec, 1.0, (32, 32, 32))
    assert out.pet.extents == out.ct.extents == out.mask.extents == (32, 32, 32)
    assert out.pet.spacing == out.mask.spacing == (1.0, 1.0, 1.0)
    assert set(np.unique(out.mask.voxels)) == {0.0, 1.0}


class TestRestoreBox:
    def test_inverts_crop_when_tumor_fits(self):
        m = np.zeros((20, 20, 20), dtype=np.float32)
        m[3:9, 10:15, 12:19] = 1
        mask = vol(m, modality=Modality.MASK)
        box = extract_bounding_box(mask, mask, (10, 10, 10)).voxels
        assert np.array_equal(restore_box(box, mask), m)

    def test_anisotropic_grid_extents(self):
        m = np.zeros((12, 30, 8), dtype=np.float32)
        m[4:8, 10:20, 3:5] = 1
        mask = vol(m, spacing=(2.0, 0.5, 3.0), modality=Modality.MASK)
        res = resample_isotropic(mask, 1.0)
        box = extract_bounding_box(res, res, (16, 16, 16)).voxels
        back = restore_box(box, mask)
        assert back.shape == m.shape
        # downsampling the 0.5 mm axis loses one edge slab at most
        assert (back * m).sum() >= 0.8 * m.sum() and back.sum() <= m.sum()
