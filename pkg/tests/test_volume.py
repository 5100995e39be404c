import numpy as np
import pytest

from errors import InvalidInputError, LandmarkError, ShapeMismatchError
from volume import (
    IDENTITY_AFFINE,
    AffineParams,
    DeformationGrid,
    GradientField,
    Landmark,
    LandmarkSet,
    Mask3,
    Volume3,
    identity_grid,
    new_volume,
    require_same_dims,
    residual_deformation,
)


class TestNewVolume:

    def test_zero_fill(self):
        v = new_volume((4, 4, 4))
        assert v.data.size == 64
        assert np.all(v.data == 0.0)

    def test_constant_fill(self):
        v = new_volume((2, 2, 2), fill=1.5)
        assert v.data.size == 8
        assert np.all(v.data == 1.5)

    def test_degenerate_axis_rejected(self):
        with pytest.raises(InvalidInputError):
            new_volume((1, 4, 4))

    def test_non_finite_fill_rejected(self):
        with pytest.raises(InvalidInputError):
            new_volume((2, 2, 2), fill=np.nan)

    def test_spacing_kept(self):
        v = new_volume((2, 3, 4), spacing=(2.0, 1.0, 0.5))
        assert v.dims == (2, 3, 4)
        assert v.spacing == (2.0, 1.0, 0.5)


class TestVolume3:

    def test_non_finite_rejected(self):
        data = np.zeros((3, 3, 3))
        data[1, 1, 1] = np.inf
        with pytest.raises(InvalidInputError):
            Volume3(data=data)

    def test_wrong_rank_rejected(self):
        with pytest.raises(InvalidInputError):
            Volume3(data=np.zeros((3, 3)))

    def test_bad_spacing_rejected(self):
        with pytest.raises(InvalidInputError):
            Volume3(data=np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))

    def test_data_is_read_only_copy(self):
        src = np.ones((2, 2, 2))
        v = Volume3(data=src)
        src[0, 0, 0] = 5.0
        assert v.data[0, 0, 0] == 1.0
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 2.0


class TestMask3:

    def test_non_binary_rejected(self):
        with pytest.raises(InvalidInputError):
            Mask3(data=np.full((2, 2, 2), 0.5))

    def test_from_volume_thresholds(self):
        v = Volume3(data=np.array([[[0.2, 0.5], [0.7, 0.0]], [[1.0, 0.49], [0.51, 0.0]]]))
        m = Mask3.from_volume(v)
        assert m.count == 4


class TestTransformTypes:

    @pytest.mark.parametrize("value", [0.0, 2.0, -0.1, 2.5])
    def test_gradient_field_range(self, value):
        data = np.ones((3, 2, 2, 2))
        data[1, 0, 0, 0] = value
        with pytest.raises(InvalidInputError):
            GradientField(data=data)

    def test_gradient_field_identity(self):
        phi = GradientField.identity((2, 3, 4))
        assert phi.dims == (2, 3, 4)
        assert np.all(phi.data == 1.0)

    def test_channel_layout_checked(self):
        with pytest.raises(InvalidInputError):
            DeformationGrid(data=np.zeros((2, 4, 4, 4)))

    def test_affine_shape_checked(self):
        with pytest.raises(InvalidInputError):
            AffineParams(matrix=np.eye(3))

    def test_affine_identity(self):
        a = AffineParams.identity()
        assert np.array_equal(a.matrix, IDENTITY_AFFINE)
        assert a.to_list()[2] == [0.0, 0.0, 1.0, 0.0]


class TestGrids:

    def test_identity_grid_values(self):
        g = identity_grid((2, 2, 2))
        assert g.gx[0, 0, 1] == 1.0
        assert g.gz[1, 0, 1] == 1.0
        assert g.gy[1, 0, 1] == 0.0

    def test_identity_residual_is_zero(self):
        for dims in [(2, 2, 2), (3, 5, 4), (7, 2, 6)]:
            assert np.all(residual_deformation(identity_grid(dims)).data == 0.0)

    def test_constant_shift_residual(self):
        data = identity_grid((3, 4, 5)).data.copy()
        data[2] += 0.5
        res = residual_deformation(DeformationGrid(data=data))
        assert np.all(res.gx == 0.5)
        assert np.all(res.gy == 0.0)

    def test_residual_reconstructs_grid(self, rng):
        g = DeformationGrid(data=rng.uniform(-1.0, 5.0, (3, 4, 4, 4)))
        res = residual_deformation(g)
        np.testing.assert_allclose(res.data + identity_grid(g.dims).data, g.data, rtol=0, atol=1e-14)

    def test_require_same_dims(self):
        a, b = new_volume((2, 2, 2)), new_volume((2, 2, 3))
        assert require_same_dims(a, a) == (2, 2, 2)
        with pytest.raises(ShapeMismatchError):
            require_same_dims(a, b)


class TestLandmarks:

    def test_duplicate_labels_rejected(self):
        with pytest.raises(LandmarkError):
            LandmarkSet(points=[Landmark(label="A", z=0, y=0, x=0), Landmark(label="A", z=1, y=1, x=1)])

    def test_coords_order(self):
        s = LandmarkSet(points=[Landmark(label="A", z=1, y=2, x=3)])
        assert s.coords().tolist() == [[1.0, 2.0, 3.0]]
        assert s.labels == ["A"]

    def test_bounds(self):
        s = LandmarkSet(points=[Landmark(label="in", z=1, y=1, x=1), Landmark(label="out", z=0, y=0, x=3.5)])
        assert s.out_of_bounds((4, 4, 4)) == ["out"]
        with pytest.raises(LandmarkError):
            s.check_bounds((4, 4, 4))
