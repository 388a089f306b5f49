import numpy as np
import pytest

from fields import A0
from mixedray.gauge import GaugeSystem
from mixedray.geometry import BallShellChart
from mixedray.inversion import (ConfigMismatch, Reconstructor, _stitched_error, box_bump,
                                gauge_sensitivity, interior_potential, layer_sweep, nested_layers,
                                noise_sweep, operator_norm, reconstruct)
from mixedray.normal_op import CutoffProfile, QuadratureSpec, assemble_normal_matrices, assemble_normal_matrix
from mixedray.tensors import Grid

pytestmark = pytest.mark.filterwarnings("ignore:weight exponent reached:RuntimeWarning")

CHEAP = QuadratureSpec(6, 8, 1e-2)
GRID = Grid((0.12, -0.3, -0.3), (0.28, 0.3, 0.3), (5, 5, 5))


@pytest.fixture(scope="module")
def setup():
    chart = BallShellChart(3, 1.0, 0.3, 0.6, "outward")
    mats = assemble_normal_matrices(("T1", "L11"), chart, GRID, 5.0, CutoffProfile(), CHEAP)
    gauge = GaugeSystem(chart, GRID, 5.0)
    bump = box_bump(GRID)
    return {"chart": chart, "gauge": gauge, **mats,
            "T1_truth": bump[:, None] * np.array([0.3, 1.0, -0.5]),
            "L11_truth": bump[:, None, None] * A0}


@pytest.fixture(scope="module")
def solvers(setup):
    return {"T1": Reconstructor(setup["T1"]), "L11": Reconstructor(setup["L11"], setup["gauge"])}


def gaussian_truth(p):
    c, w = np.array([0.86, 0.0, 0.0]), np.array([0.06, 0.12, 0.12])
    return np.exp(-np.sum(((p - c) / w) ** 2, axis=-1))[:, None] * np.array([0.3, 1.0, -0.5])


class TestReconstructor:
    @pytest.mark.parametrize("mode", ["T1", "L11"])
    def test_zero_data(self, setup, solvers, mode):
        rec = solvers[mode](np.zeros(setup[mode].matrix.shape[0]))
        assert not np.any(rec.values)
        assert rec.report.iterations == 0

    def test_t1_recovery(self, setup, solvers):
        truth = setup["T1_truth"]
        rec = solvers["T1"](setup["T1"].apply(truth), truth)
        assert rec.report.converged
        assert rec.report.relative_error <= 1e-4
        assert rec.values.shape == truth.shape

    def test_l11_recovery(self, setup, solvers):
        truth = setup["L11_truth"]
        rec = solvers["L11"](setup["L11"].apply(truth), truth)
        assert rec.report.converged
        assert rec.report.relative_error <= 5e-2
        # the fitted field reproduces the data, potential included
        resid = setup["L11"].apply(rec.fit) - setup["L11"].apply(truth)
        assert np.linalg.norm(resid) <= 1e-3 * np.linalg.norm(setup["L11"].apply(truth))

    def test_l11_ignores_potentials(self, setup, solvers):
        truth, gauge = setup["L11_truth"], setup["gauge"]
        du = interior_potential(gauge, 1, (1.0, -0.5, 0.3))
        du *= np.linalg.norm(gauge.split(truth)[0]) / np.linalg.norm(du)
        assert np.abs(gauge.split(du)[0]).max() <= 1e-9 * np.abs(du).max()
        res = gauge_sensitivity(solvers["L11"], truth, du)
        assert res["change"] <= 1e-3

    def test_regularization_scale(self, setup, solvers):
        assert solvers["T1"].norm == pytest.approx(np.linalg.norm(setup["T1"].matrix, 2), rel=1e-8)
        assert solvers["T1"].reg == pytest.approx(1e-6 * solvers["T1"].norm)
        assert operator_norm(np.zeros((3, 3))) == 0.0

    def test_noise_sweep(self, setup, solvers):
        truth = setup["T1_truth"]
        rows = noise_sweep(solvers["T1"], truth, [0.0, 1e-2])
        assert [r["noise"] for r in rows] == [0.0, 1e-2]
        assert rows[0]["relative_error"] == pytest.approx(
            solvers["T1"](setup["T1"].apply(truth), truth).report.relative_error, rel=1e-12)
        assert rows[1]["relative_error"] > rows[0]["relative_error"]


class TestMismatches:
    def test_l11_needs_gauge(self, setup):
        with pytest.raises(ConfigMismatch):
            Reconstructor(setup["L11"])

    def test_gauge_weight_must_match(self, setup):
        with pytest.raises(ConfigMismatch):
            Reconstructor(setup["L11"], GaugeSystem(setup["chart"], GRID, 2.0))

    def test_mode_must_match(self, setup):
        with pytest.raises(ConfigMismatch):
            reconstruct("L11", setup["T1"], np.zeros(setup["T1"].matrix.shape[0]))

    def test_data_length(self, solvers):
        with pytest.raises(ConfigMismatch):
            solvers["T1"](np.zeros(7))


class TestLayers:
    def test_geometry(self):
        layers = nested_layers([0.15, 0.3], (5, 5, 5))
        assert layers[0].grid.lower[0] == pytest.approx(0.0225)
        assert layers[0].grid.upper[0] == pytest.approx(0.1275)
        assert layers[1].grid.upper[0] == pytest.approx(0.15)
        with pytest.raises(ValueError):
            nested_layers([0.3, 0.15], (5, 5, 5))

    def test_single_layer_is_plain_reconstruction(self):
        (layer,) = nested_layers([0.15], (5, 5, 5))
        sweep = layer_sweep([layer], gaussian_truth, F=5.0, cutoff=CutoffProfile(), quadspec=CHEAP)
        chart = BallShellChart(3, 1.0, layer.depth, 0.6, "outward")
        M = assemble_normal_matrix("T1", chart, layer.grid, 5.0, CutoffProfile(), CHEAP)
        truth = gaussian_truth(layer.grid.nodes + [1.0 - layer.depth, 0.0, 0.0])
        direct = Reconstructor(M)(M.apply(truth), truth)
        np.testing.assert_allclose(sweep.values[0], direct.values, atol=1e-12)
        assert sweep.stitched_error == pytest.approx(direct.report.relative_error, rel=1e-9)

    def test_deeper_layer_does_not_disturb_shallower(self):
        layers = nested_layers([0.15, 0.3], (5, 5, 5))
        one = layer_sweep(layers[:1], gaussian_truth, F=5.0, cutoff=CutoffProfile(), quadspec=CHEAP)
        two = layer_sweep(layers, gaussian_truth, F=5.0, cutoff=CutoffProfile(), quadspec=CHEAP)
        np.testing.assert_array_equal(two.values[0], one.values[0])
        assert len(two.reports) == 2
        assert two.stitched_error <= 1e-4

    def test_stitched_error_counts_shared_nodes_once(self):
        # with no gap the top face of layer 1 is the bottom face of layer 0
        layers = nested_layers([0.15, 0.3], (5, 5, 5), gap=0.0)
        truth = [np.ones((L.grid.size, 3)) for L in layers]
        got = [t.copy() for t in truth]
        shared = layers[1].grid.nodes[:, 0] == layers[1].grid.upper[0]
        got[1][shared] = 100.0
        assert _stitched_error(layers, got, truth, 1.0) == 0.0
        got[1][~shared] = 2.0
        # 100 off-by-one vectors among 125 + 100 unique nodes
        assert _stitched_error(layers, got, truth, 1.0) == pytest.approx(np.sqrt(100 / 225))
