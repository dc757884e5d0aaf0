import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttas import synthdata as sd
from ttas.synthdata import MaskVolume, PhantomParams, VolumeFormatError


class TestPhantomParams:
    @pytest.mark.parametrize("kwargs", [
        dict(effusion_area_range=(0.0, 0.1)),
        dict(effusion_area_range=(0.2, 0.1)),
        dict(effusion_area_range=(0.1, 0.5)),
        dict(intensity_levels=(0.2, 0.2, 0.8)),
        dict(noise_sigma=-1.0),
        dict(spacing_mm=(1.0, 0.0, 1.0)),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            PhantomParams(**kwargs)


class TestGenerateCase:
    def test_deterministic(self):
        a = sd.generate_case(PhantomParams(seed=4), 7)
        b = sd.generate_case(PhantomParams(seed=4), 7)
        assert np.array_equal(a.image, b.image) and a.mask == b.mask and a.id == b.id

    def test_noise_free_effusion_intensity(self):
        p = PhantomParams(noise_sigma=0.0)
        c = sd.generate_case(p, 3)
        inside = c.image[0][c.mask.voxels[0] == 1]
        assert inside.size > 0
        assert np.all(inside == np.float32(p.intensity_levels[2]))
        assert set(np.unique(c.image).tolist()) <= {float(np.float32(v)) for v in p.intensity_levels}

    def test_fixed_area_volume(self):
        p = PhantomParams(effusion_area_range=(0.05, 0.05))
        c = sd.generate_case(p, 0)
        assert c.true_volume_ml == pytest.approx(1.024, rel=0.15)

    def test_volume_is_count_times_spacing(self):
        c = sd.generate_case(PhantomParams(spacing_mm=(0.5, 0.7, 3.0)), 2)
        assert c.true_volume_ml == c.mask.count() * 0.5 * 0.7 * 3.0 / 1000.0

    def test_shapes(self):
        c = sd.generate_case(PhantomParams(image_size=(40, 52)), 1)
        assert c.image.shape == (1, 40, 52)
        assert c.mask.dims == (52, 40, 1)

    def test_effusion_hugs_a_lung_from_below(self):
        p = PhantomParams(noise_sigma=0.0)
        for idx in range(5):
            c = sd.generate_case(p, idx)
            ys, xs = np.nonzero(c.mask.voxels[0])
            assert ys.size > 0
            lung = np.isclose(c.image[0], np.float32(p.intensity_levels[1]))
            # part of the lung lies above the effusion's lowest row, in the same columns
            assert lung[: ys.max(), xs.min():xs.max() + 1].any()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 500))
    def test_nonempty_and_within_range(self, seed, idx):
        p = PhantomParams(seed=seed)
        c = sd.generate_case(p, idx)
        frac = c.mask.count() / (64 * 64)
        assert c.mask.count() > 0
        assert 0.7 * p.effusion_area_range[0] <= frac <= 1.15 * p.effusion_area_range[1]


class TestSplit:
    def test_disjoint_ids(self):
        s = sd.generate_split(PhantomParams(), 10, 90, 30)
        ids = [c.id for c in s.labeled + s.unlabeled + s.test]
        assert len(ids) == len(set(ids)) == 130

    def test_unlabeled_have_no_masks(self):
        s = sd.generate_split(PhantomParams(), 2, 3, 3)
        assert all(c.mask is None and c.true_volume_ml is None for c in s.unlabeled)
        assert all(c.mask is not None for c in s.labeled + s.test)

    def test_no_labeled_is_allowed(self):
        s = sd.generate_split(PhantomParams(), 0, 5, 3)
        assert not s.labeled and len(s.test) == 3

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            sd.generate_split(PhantomParams(), 0, 5, 0)
        with pytest.raises(ValueError):
            sd.generate_split(PhantomParams(), -1, 5, 3)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_test_terciles_by_volume(self, seed):
        s = sd.generate_split(PhantomParams(seed=seed), 10, 0, 30)
        b1, b2 = s.stratum_bounds_ml
        vols = np.array([c.true_volume_ml for c in s.test])
        counts = [(vols <= b1).sum(), ((vols > b1) & (vols <= b2)).sum(), (vols > b2).sum()]
        assert counts == [10, 10, 10]

    def test_labeled_prefix_is_stable(self):
        a = sd.generate_split(PhantomParams(), 10, 4, 3)
        b = sd.generate_split(PhantomParams(), 10, 4, 3)
        assert [c.id for c in a.labeled[:5]] == [c.id for c in b.labeled[:5]]
        assert all(np.array_equal(x.image, y.image) for x, y in zip(a.test, b.test))


class TestMaskVolume:
    def test_x_fastest_order(self):
        m = MaskVolume((3, 2, 1), (1, 1, 1), [0, 1, 0, 0, 0, 1])
        assert m.voxels.shape == (1, 2, 3)
        assert m.voxels[0, 0, 1] == 1 and m.voxels[0, 1, 2] == 1

    def test_length_mismatch(self):
        with pytest.raises(VolumeFormatError):
            MaskVolume((2, 2, 1), (1, 1, 1), [0, 1, 0])

    def test_non_binary(self):
        with pytest.raises(VolumeFormatError):
            MaskVolume((2, 1, 1), (1, 1, 1), [0, 2])

    def test_volume_ml(self):
        m = MaskVolume((1000, 1, 1), (1.0, 1.0, 2.0), np.r_[np.ones(500), np.zeros(500)])
        assert sd.volume_ml(m) == 1.0


class TestFileFormats:
    def test_mask_round_trip(self, tmp_path):
        m = sd.generate_case(PhantomParams(), 0).mask
        sd.write_mask(tmp_path / "m.ssv", m)
        assert sd.read_mask(tmp_path / "m.ssv") == m

    def test_mask_layout(self, tmp_path):
        m = MaskVolume((2, 1, 1), (1.0, 2.0, 3.0), [1, 0])
        sd.write_mask(tmp_path / "m.ssv", m)
        raw = (tmp_path / "m.ssv").read_bytes()
        assert raw[:4] == b"SSV1"
        assert len(raw) == 4 + 4 + 12 + 24 + 2 and raw[-2:] == b"\x01\x00"

    def test_image_round_trip_is_lossless(self, tmp_path):
        c = sd.generate_case(PhantomParams(), 1)
        sd.write_image(tmp_path / "i.ssf", c.image, (1, 1, 5))
        img, spacing = sd.read_image(tmp_path / "i.ssf")
        assert np.array_equal(img, c.image) and spacing == (1.0, 1.0, 5.0)

    def test_image_rejects_nan(self, tmp_path):
        with pytest.raises(VolumeFormatError):
            sd.write_image(tmp_path / "i.ssf", np.array([[np.nan, 1.0]]))

    def test_bad_magic(self, tmp_path):
        sd.write_mask(tmp_path / "m.ssv", MaskVolume((2, 1, 1), (1, 1, 1), [1, 0]))
        raw = bytearray((tmp_path / "m.ssv").read_bytes())
        raw[0:1] = b"X"
        (tmp_path / "m.ssv").write_bytes(bytes(raw))
        with pytest.raises(VolumeFormatError, match="magic"):
            sd.read_mask(tmp_path / "m.ssv")

    def test_image_file_is_not_a_mask(self, tmp_path):
        sd.write_image(tmp_path / "i.ssf", np.zeros((2, 2)))
        with pytest.raises(VolumeFormatError, match="magic"):
            sd.read_mask(tmp_path / "i.ssf")

    @pytest.mark.parametrize("cut", [0, 10, 44, 46])
    def test_truncated(self, tmp_path, cut):
        sd.write_mask(tmp_path / "m.ssv", MaskVolume((3, 1, 1), (1, 1, 1), [1, 0, 1]))
        raw = (tmp_path / "m.ssv").read_bytes()
        (tmp_path / "t.ssv").write_bytes(raw[:cut])
        with pytest.raises(VolumeFormatError, match="truncated"):
            sd.read_mask(tmp_path / "t.ssv")

    def test_excess_payload(self, tmp_path):
        sd.write_mask(tmp_path / "m.ssv", MaskVolume((3, 1, 1), (1, 1, 1), [1, 0, 1]))
        raw = (tmp_path / "m.ssv").read_bytes()
        (tmp_path / "t.ssv").write_bytes(raw + b"\x00")
        with pytest.raises(VolumeFormatError, match="dims"):
            sd.read_mask(tmp_path / "t.ssv")

    def test_dataset_manifest(self, tmp_path):
        p = PhantomParams(seed=2)
        split = sd.generate_split(p, 2, 3, 3)
        manifest = sd.write_dataset(tmp_path, split, p)
        entries = sd.read_manifest(manifest)
        assert [e.split for e in entries] == ["labeled"] * 2 + ["unlabeled"] * 3 + ["test"] * 3
        assert all(e.mask_path is None for e in entries if e.split == "unlabeled")
        test = sd.load_cases(manifest, "test")
        assert [c.id for c in test] == [c.id for c in split.test]
        assert all(a.mask == b.mask and np.array_equal(a.image, b.image) for a, b in zip(test, split.test))

    def test_bad_manifest_line(self, tmp_path):
        (tmp_path / "manifest.tsv").write_text("a\tb\tc\n")
        with pytest.raises(VolumeFormatError, match="4 tab-separated"):
            sd.read_manifest(tmp_path / "manifest.tsv")
