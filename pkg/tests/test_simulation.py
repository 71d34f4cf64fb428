import csv
import json
import math

import numpy as np
import pytest

from fdqma.flqr import fit_qr
from fdqma.simulation import (DesignSpec, eigenvalues, generate, implied_r2, run_experiment,
                              run_replication, signal_variances, theta_from_r2, true_parameters,
                              with_n, _signal_coefficients)
from fdqma.averaging import parse_method


class TestDesignSpec:
    def test_defaults(self):
        assert DesignSpec().j_max == 20 and DesignSpec().candidates is None
        two = DesignSpec(design="ii")
        assert two.design == "II" and two.j_max == 8 and two.candidates == tuple(range(7))
        assert two.n_signal == 3 and DesignSpec().n_signal == 20

    @pytest.mark.parametrize("kw", [{"design": "III"}, {"r_squared": 1.0}, {"tau": 0.0},
                                    {"n": 3}, {"n_test": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            DesignSpec(**kw)

    def test_from_config(self):
        spec = DesignSpec.from_config({"design": "II", "n": "50", "tau": "0.1",
                                       "candidates": "0, 1,2", "unused": "x"})
        assert (spec.design, spec.n, spec.tau, spec.candidates) == ("II", 50, 0.1, (0, 1, 2))

    def test_with_n(self):
        assert with_n(DesignSpec(seed=4), 77) == DesignSpec(seed=4, n=77)


class TestSignalStrength:
    @pytest.mark.parametrize("design", ["I", "II"])
    @pytest.mark.parametrize("r2", [0.2, 0.5, 0.8])
    def test_theta_reproduces_r2(self, design, r2):
        spec = DesignSpec(design=design, r_squared=r2)
        assert implied_r2(spec, theta_from_r2(spec)) == pytest.approx(r2, abs=1e-12)

    def test_theta_closed_form(self):
        spec = DesignSpec(r_squared=0.5)
        v1, v2 = signal_variances(spec)
        assert theta_from_r2(spec) == pytest.approx(math.sqrt(v2 / v1))

    @pytest.mark.parametrize("design,r2", [("I", 0.5), ("II", 0.2), ("I", 0.8)])
    def test_monte_carlo_r2(self, design, r2):
        spec = DesignSpec(design=design, r_squared=r2, n=200_000, n_test=1, seed=8)
        data = generate_responses_only(spec)
        signal, y = data
        assert np.var(signal) / np.var(y) == pytest.approx(r2, abs=0.01)


def generate_responses_only(spec):
    """Latent signal and responses from the same law as ``generate`` without building curves."""
    rng = np.random.default_rng(spec.seed)
    c1, c2, a2 = _signal_coefficients(spec)
    xi = rng.uniform(-math.sqrt(3), math.sqrt(3), (spec.n, spec.j_max)) * np.sqrt(eigenvalues(spec))
    signal = theta_from_r2(spec) * (xi @ c1)
    sigma = a2 + xi @ c2
    return signal, signal + sigma * rng.standard_normal(spec.n)


class TestGenerate:
    def test_deterministic(self):
        spec = DesignSpec(n=30, n_test=10, seed=3)
        a, b = generate(spec, 2), generate(spec, 2)
        np.testing.assert_array_equal(a.train_responses, b.train_responses)
        for x, y in zip(a.train_curves + a.test_curves, b.train_curves + b.test_curves):
            np.testing.assert_array_equal(x.times, y.times)
            np.testing.assert_array_equal(x.values, y.values)
        c = generate(spec, 3)
        assert not np.array_equal(a.train_responses, c.train_responses)

    def test_shapes_and_sampling(self):
        data = generate(DesignSpec(n=200, n_test=50, seed=1))
        assert len(data.train_curves) == 200 and len(data.test_curves) == 50
        sizes = {len(c) for c in data.train_curves}
        assert sizes <= {10, 11, 12}
        assert all(0 <= c.times[0] and c.times[-1] <= 1 for c in data.train_curves)
        assert data.train_scores.shape == (200, 20)
        ids = [c.subject_id for c in data.train_curves + data.test_curves]
        assert ids == list(range(250))

    def test_standardized_scores_have_unit_variance(self):
        spec = DesignSpec(n=20_000, n_test=1, seed=2)
        data = generate(spec)
        z = data.train_scores / np.sqrt(eigenvalues(spec))
        np.testing.assert_allclose(z.var(axis=0), 1.0, atol=0.05)
        assert np.abs(z).max() <= math.sqrt(3)

    @pytest.mark.parametrize("design", ["I", "II"])
    def test_scale_function_positive(self, design):
        spec = DesignSpec(design=design)
        _, c2, a2 = _signal_coefficients(spec)
        # smallest possible sigma over the support of the uniform scores
        worst = a2 - math.sqrt(3) * np.sum(np.abs(c2) * np.sqrt(eigenvalues(spec)))
        assert worst > 0

    def test_measurement_noise_level(self):
        data = generate(DesignSpec(n=2000, n_test=1, seed=4))
        from fdqma.simulation import eigenfunctions
        resid = np.concatenate([c.values - eigenfunctions(c.times, 20) @ s
                                for c, s in zip(data.train_curves, data.train_scores)])
        assert resid.var() == pytest.approx(0.8, rel=0.05)


class TestTrueQuantile:
    def test_median_slope_is_scaled_b1(self):
        spec = DesignSpec(tau=0.5)
        a, b = true_parameters(spec)
        c1, _, _ = _signal_coefficients(spec)
        assert a == 0.0
        np.testing.assert_allclose(b, theta_from_r2(spec) * c1)

    @pytest.mark.parametrize("design", ["I", "II"])
    def test_quadrature_route_agrees(self, design):
        data = generate(DesignSpec(design=design, n=50, n_test=20, seed=9))
        np.testing.assert_allclose(data.quadrature_quantile(data.test_scores),
                                   data.test_quantiles, atol=1e-10)

    def test_empirical_coverage(self):
        data = generate(DesignSpec(n=40_000, n_test=1, tau=0.05, seed=12))
        rate = np.mean(data.train_responses <= data.train_quantiles)
        assert rate == pytest.approx(0.05, abs=3 * math.sqrt(0.05 * 0.95 / 40_000))

    def test_design_two_truncation_recovers_truth(self):
        """Fit on the three latent scores and compare with statsmodels' quantile regression."""
        sm = pytest.importorskip("statsmodels.api")
        data = generate(DesignSpec(design="II", n=2000, n_test=1, seed=13))
        x = data.train_scores[:, :3]
        fit = fit_qr(data.train_responses, x, 0.05)
        ref = sm.QuantReg(data.train_responses, sm.add_constant(x)).fit(q=0.05, max_iter=5000)
        ours = np.concatenate([[fit.intercept], fit.coefficients])
        np.testing.assert_allclose(ours, ref.params, atol=0.05 * np.abs(ref.params).max())
        truth = np.concatenate([[data.true_intercept], data.true_coefficients[:3]])
        assert np.all(np.abs(ours - truth) <= 4 * np.maximum(ref.bse, 1e-3))
        np.testing.assert_allclose(data.true_coefficients[3:], 0.0)


class TestExperiment:
    def test_single_replication(self, tmp_path):
        spec = DesignSpec(n=80, n_test=40, seed=5)
        res = run_experiment(spec, ["MA(FVE90±2,K4)", "FVE90", "FVE(0.9)", "SAIC"], 1)
        assert res.failures == []
        assert res.methods == ("MA(FVE90±2,K4)", "FVE90", "FVE(0.9)", "SAIC", "ORACLE")
        np.testing.assert_array_equal(res.values("FVE90"), res.values("FVE(0.9)"))
        assert res.values("ORACLE")[0] == pytest.approx(0.0, abs=1e-12)
        res.write(tmp_path / "s.csv", tmp_path / "s.json")
        rows = list(csv.reader(open(tmp_path / "s.csv")))
        assert rows[0] == ["replication", "method", "metric", "value"] and len(rows) == 6
        doc = json.loads((tmp_path / "s.json").read_text())
        assert doc["methods"]["SAIC"]["efpe"]["count"] == 1

    def test_rerun_is_identical(self):
        spec = DesignSpec(n=60, n_test=20, seed=6)
        methods = [parse_method("BIC")]
        assert run_replication(spec, methods, 1) == run_replication(spec, methods, 1)

    def test_design_two_reports_slope_error(self):
        res = run_experiment(DesignSpec(design="II", n=100, n_test=20, seed=7),
                             ["MA(BIC±1,K4)", "BIC"], 2)
        assert res.values("BIC", "ise").size == 2
        assert np.all(res.values("MA(BIC±1,K4)", "ise") >= 0)

    def test_duplicate_labels(self):
        with pytest.raises(ValueError):
            run_experiment(DesignSpec(n=40), ["BIC", " BIC"], 1)
