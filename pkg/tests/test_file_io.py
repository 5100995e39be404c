import json
import logging

import numpy as np
import pytest
from pydantic import ValidationError

import file_io
from errors import FormatError, InvalidInputError, LandmarkError
from optimizer import OptimConfig
from volume import AffineParams, DeformationGrid, Landmark, LandmarkSet, Volume3


def f32_volume(rng, dims, spacing=(1.0, 1.0, 1.0)):
    """Volume whose values survive the float32 payload unchanged."""
    return Volume3(data=rng.standard_normal(dims).astype(np.float32).astype(np.float64), spacing=spacing)


class TestVolumeFormat:

    def test_round_trip(self, tmp_path, rng):
        v = f32_volume(rng, (3, 4, 5), spacing=(2.5, 1.0, 0.75))
        path = tmp_path / "vol.raw"
        file_io.write_volume(path, v)
        back = file_io.read_volume(path)
        assert np.array_equal(back.data, v.data)
        assert back.spacing == v.spacing

    def test_layout(self, tmp_path):
        data = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
        path = tmp_path / "vol.raw"
        file_io.write_volume(path, Volume3(data=data))
        raw = path.read_bytes()
        assert len(raw) == 24 * 4
        assert np.array_equal(np.frombuffer(raw, dtype="<f4"), np.arange(24, dtype=np.float32))
        sidecar = json.loads((tmp_path / "vol.json").read_text())
        assert sidecar == {"dims": [2, 3, 4], "spacing": [1.0, 1.0, 1.0], "dtype": "f32le"}

    def test_short_payload(self, tmp_path, rng):
        path = tmp_path / "vol.raw"
        file_io.write_volume(path, f32_volume(rng, (2, 2, 2)))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError):
            file_io.read_volume(path)

    def test_trailing_partial_value(self, tmp_path, rng):
        path = tmp_path / "vol.raw"
        file_io.write_volume(path, f32_volume(rng, (4, 4, 4)))
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00")
        with pytest.raises(FormatError):
            file_io.read_volume(path)

    def test_non_utf8_sidecar(self, tmp_path, rng):
        path = tmp_path / "vol.raw"
        file_io.write_volume(path, f32_volume(rng, (2, 2, 2)))
        (tmp_path / "vol.json").write_bytes(b"\xff\xfe{\"dims\": [2, 2, 2]}")
        with pytest.raises(FormatError):
            file_io.read_volume(path)

    def test_sidecar_not_an_object(self, tmp_path, rng):
        path = tmp_path / "vol.raw"
        file_io.write_volume(path, f32_volume(rng, (2, 2, 2)))
        (tmp_path / "vol.json").write_text("[2, 2, 2]")
        with pytest.raises(FormatError):
            file_io.read_volume(path)

    def test_missing_dims(self, tmp_path, rng):
        path = tmp_path / "vol.raw"
        file_io.write_volume(path, f32_volume(rng, (2, 2, 2)))
        (tmp_path / "vol.json").write_text(json.dumps({"spacing": [1, 1, 1], "dtype": "f32le"}))
        with pytest.raises(FormatError):
            file_io.read_volume(path)

    def test_malformed_sidecar(self, tmp_path, rng):
        path = tmp_path / "vol.raw"
        file_io.write_volume(path, f32_volume(rng, (2, 2, 2)))
        (tmp_path / "vol.json").write_text("{dims: [2, 2")
        with pytest.raises(FormatError):
            file_io.read_volume(path)

    def test_wrong_dtype(self, tmp_path, rng):
        path = tmp_path / "vol.raw"
        file_io.write_volume(path, f32_volume(rng, (2, 2, 2)))
        (tmp_path / "vol.json").write_text(json.dumps({"dims": [2, 2, 2], "dtype": "f64le"}))
        with pytest.raises(FormatError):
            file_io.read_volume(path)

    def test_no_temp_files_left(self, tmp_path, rng):
        file_io.write_volume(tmp_path / "vol.raw", f32_volume(rng, (2, 2, 2)))
        assert sorted(p.name for p in tmp_path.iterdir()) == ["vol.json", "vol.raw"]

    def test_mask_must_be_binary(self, tmp_path):
        path = tmp_path / "mask.raw"
        file_io.write_volume(path, Volume3(data=np.full((2, 2, 2), 0.5)))
        with pytest.raises(InvalidInputError):
            file_io.read_mask(path)


class TestChannels:

    def test_grid_round_trip(self, tmp_path, rng):
        g = DeformationGrid(data=rng.uniform(-2, 6, (3, 3, 4, 5)).astype(np.float32).astype(np.float64))
        file_io.write_grid(tmp_path / "grid", g)
        for axis in "zyx":
            assert (tmp_path / f"grid_{axis}.raw").exists()
        assert np.array_equal(file_io.read_grid(tmp_path / "grid").data, g.data)

    def test_affine_round_trip(self, tmp_path, rng):
        a = AffineParams(matrix=np.hstack([np.eye(3), np.zeros((3, 1))]) + rng.uniform(-0.1, 0.1, (3, 4)))
        file_io.write_affine(tmp_path / "affine.json", a)
        assert np.array_equal(file_io.read_affine(tmp_path / "affine.json").matrix, a.matrix)


class TestPreprocess:

    def test_window_top(self):
        v = Volume3(data=np.full((3, 3, 3), 1300.0))
        out = file_io.preprocess(v, scale_factor=1.0)
        assert np.all(out.data == 1.0)

    def test_clamp(self):
        data = np.zeros((3, 3, 3))
        data[0, 0, 0] = 2600.0
        data[1, 1, 1] = -50.0
        data[2, 2, 2] = 650.0
        out = file_io.preprocess(Volume3(data=data), scale_factor=1.0)
        assert out.data[0, 0, 0] == 1.0
        assert out.data[1, 1, 1] == 0.0
        assert out.data[2, 2, 2] == pytest.approx(0.5)

    def test_scale_one_keeps_dims(self, rng):
        v = Volume3(data=rng.uniform(0, 1300, (4, 5, 6)))
        out = file_io.preprocess(v, scale_factor=1.0)
        assert out.dims == (4, 5, 6)
        np.testing.assert_allclose(out.data, v.data / 1300.0, rtol=1e-15)

    def test_default_scale(self, rng):
        v = Volume3(data=rng.uniform(0, 1300, (9, 12, 3)))
        out = file_io.preprocess(v)
        assert out.dims == (6, 8, 2)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    @pytest.mark.parametrize("kwargs", [
        {"window_lo": 100.0, "window_hi": 100.0},
        {"scale_factor": 0.0},
        {"scale_factor": 1.5},
    ])
    def test_invalid_arguments(self, kwargs):
        with pytest.raises(InvalidInputError):
            file_io.preprocess(Volume3(data=np.zeros((2, 2, 2))), **kwargs)


class TestLandmarks:

    def make_set(self, rng, n=11):
        return LandmarkSet(points=[
            Landmark(label=f"L{i + 1:02d}", z=float(z), y=float(y), x=float(x))
            for i, (z, y, x) in enumerate(rng.uniform(0, 15, (n, 3)))
        ])

    def test_round_trip(self, tmp_path, rng):
        pts = self.make_set(rng)
        file_io.write_landmarks(tmp_path / "lm.csv", pts)
        back = file_io.read_landmarks(tmp_path / "lm.csv")
        assert len(back) == 11
        assert back == pts

    def test_duplicate_label(self, tmp_path):
        (tmp_path / "lm.csv").write_text("label,z,y,x\nA,1,2,3\nA,2,3,4\n")
        with pytest.raises(LandmarkError):
            file_io.read_landmarks(tmp_path / "lm.csv")

    def test_non_numeric(self, tmp_path):
        (tmp_path / "lm.csv").write_text("label,z,y,x\nA,1,two,3\n")
        with pytest.raises(FormatError):
            file_io.read_landmarks(tmp_path / "lm.csv")

    def test_spaced_header(self, tmp_path):
        (tmp_path / "lm.csv").write_text("label, z, y, x\nA, 1, 2.5, 3\n")
        pts = file_io.read_landmarks(tmp_path / "lm.csv")
        assert pts.labels == ["A"]
        assert (pts.points[0].z, pts.points[0].y, pts.points[0].x) == (1.0, 2.5, 3.0)

    def test_short_row(self, tmp_path):
        (tmp_path / "lm.csv").write_text("label,z,y,x\nA,1,2\n")
        with pytest.raises(FormatError):
            file_io.read_landmarks(tmp_path / "lm.csv")

    def test_not_utf8(self, tmp_path):
        (tmp_path / "lm.csv").write_bytes(b"label,z,y,x\n\xff\xfe,1,2,3\n")
        with pytest.raises(FormatError):
            file_io.read_landmarks(tmp_path / "lm.csv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "lm.csv").write_text("name,x,y,z\nA,1,2,3\n")
        with pytest.raises(FormatError):
            file_io.read_landmarks(tmp_path / "lm.csv")

    def test_out_of_bounds_warns(self, tmp_path, caplog):
        (tmp_path / "lm.csv").write_text("label,z,y,x\nA,1,2,3\nB,1,2,30\n")
        with caplog.at_level(logging.WARNING, logger="file_io"):
            pts = file_io.read_landmarks(tmp_path / "lm.csv", dims=(8, 8, 8))
        assert len(pts) == 2
        assert "B" in caplog.text


class TestConfig:

    def test_round_trip(self, tmp_path):
        cfg = OptimConfig(lr0=0.01, pyramid_levels=[4, 2, 1], use_affine=False, seed=3)
        file_io.write_config(tmp_path / "cfg.json", cfg)
        assert file_io.read_config(tmp_path / "cfg.json") == cfg

    def test_default_when_missing(self):
        assert file_io.read_config(None) == OptimConfig()

    def test_unknown_key(self, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"lr": 0.1}))
        with pytest.raises(ValidationError):
            file_io.read_config(tmp_path / "cfg.json")
