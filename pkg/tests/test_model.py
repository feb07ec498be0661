"""Tests for loadings, design rows and prediction."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from core import model
from core.model import Dataset
from simulation.designs import error_law, gen_example1
from splines.basis import IndexRescaler, basis_matrix, eval_basis, make_basis
from utils.errors import ConstraintViolationError, DataError


class TestDataset:
    def test_shapes(self, rng):
        data = Dataset(y=rng.standard_normal(5), x=np.ones((5, 1)), z=rng.standard_normal((5, 3)))
        assert (data.n, data.d, data.p) == (5, 1, 3)
        assert data.z_names == ("z1", "z2", "z3")

    def test_first_column_must_be_one(self, rng):
        with pytest.raises(DataError):
            Dataset(y=np.zeros(4), x=rng.standard_normal((4, 2)), z=np.ones((4, 2)))

    def test_row_mismatch(self):
        with pytest.raises(DataError):
            Dataset(y=np.zeros(4), x=np.ones((3, 1)), z=np.ones((4, 2)))

    def test_non_finite(self):
        z = np.ones((3, 2))
        z[1, 1] = np.nan
        with pytest.raises(DataError):
            Dataset(y=np.zeros(3), x=np.ones((3, 1)), z=z)

    def test_subset_keeps_names(self, rng):
        data = Dataset(y=np.arange(6.0), x=np.ones((6, 1)), z=rng.standard_normal((6, 2)), z_names=("a", "b"))
        part = data.subset([0, 2, 4])
        assert_allclose(part.y, [0.0, 2.0, 4.0])
        assert part.z_names == ("a", "b")


class TestExpand:
    def test_zero_row(self):
        assert_allclose(model.expand([[0.0, 0.0]]), [[1.0, 0.0, 0.0]])

    def test_pythagoras(self):
        assert_allclose(model.expand([[0.6, 0.0]]), [[0.8, 0.6, 0.0]])

    def test_published_direction(self):
        full = model.expand([[1 / np.sqrt(14), 3 / np.sqrt(14)]])
        assert_allclose(full, [[0.53452, 0.26726, 0.80178]], atol=1e-5)

    def test_reduce_inverts(self, rng):
        reduced = rng.uniform(-0.4, 0.4, size=(3, 4))
        assert_allclose(model.reduce(model.expand(reduced)), reduced)

    def test_outside_ball(self):
        with pytest.raises(ConstraintViolationError):
            model.expand([[0.8, 0.6]])

    def test_reduce_rejects_invalid(self):
        with pytest.raises(ConstraintViolationError):
            model.reduce([[0.6, 0.6]])
        with pytest.raises(ConstraintViolationError):
            model.reduce([[-0.6, 0.8]])

    def test_single_column(self):
        assert_allclose(model.expand(np.zeros((2, 0))), [[1.0], [1.0]])

    def test_shrink_to_feasible(self):
        shrunk = model.shrink_to_feasible([[0.8, 0.6], [0.3, 0.0]])
        assert np.linalg.norm(shrunk[0]) < 1.0
        assert_allclose(shrunk[0] / np.linalg.norm(shrunk[0]), [0.8, 0.6])
        assert_allclose(shrunk[1], [0.3, 0.0])

    def test_orient_rows(self):
        assert_allclose(model.orient_rows([[-3.0, 4.0]]), [[0.6, -0.8]])


class TestJacobian:
    def test_zero_row(self):
        assert_allclose(model.loading_jacobian([0.0, 0.0]), [[0, 0], [1, 0], [0, 1]])

    def test_top_row(self):
        assert_allclose(model.loading_jacobian([0.6, 0.0])[0], [-0.75, 0.0])

    def test_finite_differences(self, rng):
        row = rng.standard_normal(3)
        row *= 0.5 / np.linalg.norm(row)
        step = 1e-6
        numeric = np.column_stack([
            (model.expand([row + step * e])[0] - model.expand([row - step * e])[0]) / (2 * step)
            for e in np.eye(3)
        ])
        assert_allclose(model.loading_jacobian(row), numeric, rtol=1e-6, atol=1e-9)

    def test_stacked_is_block_diagonal(self):
        reduced = np.array([[0.1, 0.2], [0.3, -0.1]])
        stacked = model.stacked_jacobian(reduced)
        assert stacked.shape == (6, 4)
        assert_allclose(stacked[3:, 2:], model.loading_jacobian(reduced[1]))
        assert np.all(stacked[:3, 2:] == 0)


class TestDesign:
    def setup_method(self):
        self.basis = make_basis(4, 2)
        self.rescalers = [IndexRescaler(-3.0, 3.0), IndexRescaler(-2.0, 2.0)]

    def test_single_component(self):
        loadings = np.array([[0.6, 0.8]])
        z = np.array([0.5, -0.25])
        row = model.design_vector(self.basis, self.rescalers[:1], [1.0], z, loadings)
        assert_allclose(row, eval_basis(self.basis, self.rescalers[0].rescale(z @ loadings[0])))

    def test_zero_covariate_zeros_block(self):
        loadings = model.expand([[0.2], [-0.3]])
        row = model.design_vector(self.basis, self.rescalers, [1.0, 0.0], [0.4, 1.0], loadings)
        assert np.all(row[self.basis.dim:] == 0)

    def test_blocks(self, rng):
        loadings = model.expand(rng.uniform(-0.5, 0.5, size=(2, 1)))
        x, z = np.array([1.0, -1.7]), rng.standard_normal(2)
        row = model.design_vector(self.basis, self.rescalers, x, z, loadings)
        blocks = [basis_matrix(self.basis, r.rescale(z @ loadings[l]))[0] * x[l] for l, r in enumerate(self.rescalers)]
        assert_allclose(row, np.concatenate(blocks))


class TestPredict:
    def test_zero_coefficients(self):
        basis = make_basis(4, 1)
        value = model.predict_quantile(np.array([[1.0, 0.0]]), np.zeros((1, 5)), basis,
                                       [IndexRescaler(-1.0, 1.0)], [1.0], [0.3, 0.2])
        assert value == 0.0

    def test_constant_function(self):
        basis = make_basis(4, 1)
        value = model.predict_quantile(np.array([[1.0, 0.0]]), np.full((1, 5), 2.5), basis,
                                       [IndexRescaler(-1.0, 1.0)], [1.0], [0.3, 0.2])
        assert value == pytest.approx(2.5)

    def test_example1_truth_interpolated(self, rng):
        data, truth = gen_example1(400, error_law("sn"), rng, sigma=0.0)
        basis = make_basis(4, 20)
        index = model.index_values(data.z, truth.loadings)
        rescalers = model.fit_rescalers(index)
        grid = np.linspace(0, 1, 200)
        coeffs = []
        for l, r in enumerate(rescalers):
            b = basis_matrix(basis, grid)
            coeffs.append(np.linalg.lstsq(b, truth.curve(l + 1, r.raw(grid)), rcond=None)[0])
        coeffs = np.array(coeffs)
        for i in range(5):
            direct = sum(truth.curve(l + 1, index[i, l]) * data.x[i, l] for l in range(3))
            fitted = model.predict_quantile(truth.loadings, coeffs, basis, rescalers, data.x[i], data.z[i])
            assert fitted == pytest.approx(direct, abs=0.01)
        assert_allclose(model.predict(truth.loadings, coeffs, basis, rescalers, data.x, data.z), data.y, atol=0.02)


class TestDestandardize:
    def test_scale_only(self):
        raw = model.destandardize_loadings(np.array([[0.6, 0.8]]), np.array([2.0, 1.0]))
        assert_allclose(raw, model.orient_rows([[0.3, 0.8]]))
