import json

import numpy as np
import pytest

from swjm.design import build_standard_design
from swjm.estimate import (RATE_FLOOR, FitOptions, _Objective, fit, initial_values, wald_ci)
from swjm.likelihood import LikelihoodWorkspace
from swjm.model import ModelSpec, icc_from_variances
from swjm.simulate import TrialDataset, simulate_trial

from conftest import informative_dropout, make_config

TIGHT = FitOptions(gtol=1e-7)


@pytest.fixture(scope="module")
def desk_data():
    d = build_standard_design(4, 5, 2, 20)
    return simulate_trial(make_config(d, dropout=informative_dropout(), seed=2))


@pytest.fixture(scope="module")
def lmm_fit(desk_data):
    return fit(desk_data, ModelSpec.lmm(5))


@pytest.fixture(scope="module")
def jm_fit(desk_data, lmm_fit):
    return fit(desk_data, ModelSpec.joint(5), start=lmm_fit)


class TestWaldCI:
    def test_symmetric(self):
        lo, hi = wald_ci(1.0, 0.5, 0.95)
        assert lo == pytest.approx(0.020, abs=1e-3)
        assert hi == pytest.approx(1.980, abs=1e-3)

    def test_degenerate(self):
        assert wald_ci(2.5, 0.0) == (2.5, 2.5)

    def test_log_scale(self):
        lo, hi = wald_ci(4.0, 0.5, log=True)
        assert 0 < lo < 4.0 < hi
        assert hi - 4.0 > 4.0 - lo
        assert np.sqrt(lo * hi) == pytest.approx(4.0)

    def test_bad_level(self):
        with pytest.raises(ValueError):
            wald_ci(1.0, 1.0, 1.5)


class TestInitialValues:
    def test_noise_free_betas(self):
        d = build_standard_design(4, 5, 2, 5)
        data = simulate_trial(make_config(d, variances=(0.0, 0.0, 1e-300)))
        theta = initial_values(data, ModelSpec.lmm(5))
        np.testing.assert_allclose(theta[:6], [30.0] * 5 + [5.0], atol=1e-10)

    def test_rate_floor_without_events(self):
        d = build_standard_design(4, 5, 2, 5)
        data = simulate_trial(make_config(d))
        spec = ModelSpec.joint(5)
        theta = initial_values(data, spec)
        assert theta[spec.layout.index["log_lambda"]] == pytest.approx(np.log(RATE_FLOOR))

    def test_variance_split_in_expectation(self, base_design):
        spec = ModelSpec.lmm(5)
        draws = [np.exp(initial_values(simulate_trial(make_config(base_design, seed=s)),
                                       spec)[5 + 1:5 + 4]) for s in range(50)]
        mean = np.mean(draws, axis=0)
        truth = np.array([2.0, 55.0, 40.0])
        assert np.all(mean / truth < 3) and np.all(truth / mean < 3), mean


class TestFit:
    def test_noise_free_recovery(self):
        d = build_standard_design(4, 5, 2, 5)
        data = simulate_trial(make_config(d, variances=(1e-6, 1e-6, 1e-6), seed=4))
        res = fit(data, ModelSpec.lmm(5))
        np.testing.assert_allclose(res.estimates.beta, 30.0, atol=1e-3)
        assert res.estimates["delta"] == pytest.approx(5.0, abs=1e-3)

    @pytest.mark.slow
    def test_large_lmm_within_three_se(self, base_design):
        data = simulate_trial(make_config(base_design, seed=31))
        res = fit(data, ModelSpec.lmm(5))
        assert res.converged, res.reason
        truth = np.r_[[30.0] * 5, 5.0, np.log([2.0, 55.0, 40.0])]
        z = np.abs(res.theta - truth) / np.sqrt(np.diag(res.vcov))
        # familywise bound for nine roughly normal statistics
        assert np.all(z < 3.5), dict(zip(res.names, z))

    @pytest.mark.slow
    def test_joint_treatment_effect(self, base_design):
        data = simulate_trial(make_config(base_design, dropout=informative_dropout(), seed=9))
        res = fit(data, ModelSpec.joint(5))
        assert res.converged, res.reason
        assert abs(res.estimates["delta"] - 5.0) < 3 * res.se[5]

    def test_result_contract(self, jm_fit):
        res = jm_fit
        assert res.converged, res.reason
        frame = res.to_frame()
        assert list(frame.columns) == ["name", "estimate", "se", "ci_lo", "ci_hi"]
        assert list(frame.name) == list(res.names) + ["rho_a", "rho_d"]
        summary = json.loads(res.to_json())
        assert {"loglik", "converged", "iterations", "reason"} <= set(summary)
        assert res.vcov.shape == (len(res.names),) * 2
        iv = res.spec.layout.variances
        assert np.all(res.ci_lo[iv] > 0)
        assert np.all(res.ci_lo <= res.estimates.values)
        assert np.all(res.estimates.values <= res.ci_hi)

    def test_gradient_and_monotone_path(self, desk_data, jm_fit):
        res = jm_fit
        assert np.max(np.abs(res.gradient)) <= 1e-4
        assert all(b >= a for a, b in zip(res.history, res.history[1:]))
        ws = LikelihoodWorkspace(desk_data.longitudinal, desk_data.survival, res.spec)
        half = FitOptions(fd_step=FitOptions().fd_step / 2)
        obj = _Objective(ws, res.theta, np.ones(len(res.theta), bool), half)
        g_half, _ = obj.gradient(res.theta)
        assert np.max(np.abs(-g_half - res.gradient)) <= 10 * 1e-4

    def test_icc_delta_method(self, lmm_fit):
        res = lmm_fit
        iv = res.spec.layout.variances
        theta = res.theta[iv]

        def rho(t):
            return np.array(icc_from_variances(*np.exp(t)))

        e = 1e-6
        jac = np.array([(rho(theta + e * np.eye(3)[i]) - rho(theta - e * np.eye(3)[i])) / (2 * e)
                        for i in range(3)]).T
        cov = res.vcov[np.ix_(iv, iv)]
        se = np.sqrt(np.diag(jac @ cov @ jac.T))
        assert res.icc["rho_a"][1] == pytest.approx(se[0], rel=1e-6)
        assert res.icc["rho_d"][1] == pytest.approx(se[1], rel=1e-6)
        assert res.icc["rho_a"][0] == pytest.approx(rho(theta)[0])

    def test_variance_se_delta_method(self, lmm_fit):
        res = lmm_fit
        i = res.spec.layout.index["var_eps"]
        assert res.se[i] == pytest.approx(res.estimates.values[i] * np.sqrt(res.vcov[i, i]))

    def test_separability(self):
        d = build_standard_design(4, 5, 2, 15)
        # a larger cluster variance keeps the fit off the boundary
        data = simulate_trial(make_config(d, variances=(10.0, 55.0, 40.0), seed=12))
        lmm = fit(data, ModelSpec.lmm(5), TIGHT)
        jm = fit(data, ModelSpec.joint(5, association="none"), TIGHT)
        # no events, so only the longitudinal part has a finite optimum
        assert lmm.converged
        n = len(lmm.names)
        assert jm.names[:n] == lmm.names
        np.testing.assert_allclose(jm.estimates.values[:n], lmm.estimates.values[:n],
                                   atol=1e-6, rtol=0)

    @pytest.mark.parametrize("relabel", [False, True])
    def test_cluster_order_invariance(self, desk_data, lmm_fit, relabel):
        lon = desk_data.longitudinal.sample(frac=1, random_state=1)
        surv = desk_data.survival.sample(frac=1, random_state=2)
        if relabel:
            ids = np.sort(lon.cluster_id.unique())
            perm = dict(zip(ids, np.random.default_rng(3).permutation(ids)))
            lon = lon.assign(cluster_id=lon.cluster_id.map(perm))
            surv = surv.assign(cluster_id=surv.cluster_id.map(perm))
        res = fit(TrialDataset(lon, surv), ModelSpec.lmm(5))
        np.testing.assert_allclose(res.estimates.values, lmm_fit.estimates.values,
                                   atol=1e-8, rtol=0)

    def test_start_values(self, desk_data, lmm_fit):
        res = fit(desk_data, ModelSpec.lmm(5), start=lmm_fit.estimates)
        assert res.converged
        assert res.iterations <= 2
        np.testing.assert_allclose(res.theta, lmm_fit.theta, atol=1e-3)

    def test_iteration_cap_reports_failure(self, desk_data):
        res = fit(desk_data, ModelSpec.joint(5), FitOptions(max_iter=1))
        assert not res.converged
        assert res.reason == "iteration limit"

    def test_dropped_exposure_column(self, desk_data):
        lon = desk_data.longitudinal.copy()
        late = (lon.cluster_id <= 2) & (lon.period == 5)
        lon.loc[late, "observed"] = False
        spec = ModelSpec.lmm(5, outcome="gtot", max_exposure=3)
        res = fit(TrialDataset(lon, desk_data.survival), spec, FitOptions(max_iter=200))
        assert res.dropped == ["delta_3"]
        assert np.isnan(res.estimates["delta_3"])
        assert np.isfinite(res.estimates["delta_2"])
        assert res.converged, res.reason

    def test_boundary_flag(self):
        d = build_standard_design(4, 5, 2, 20)
        data = simulate_trial(make_config(d, variances=(0.0, 55.0, 40.0), seed=4))
        res = fit(data, ModelSpec.lmm(5))
        if res.boundary:
            assert not res.converged
            assert res.reason == "variance at boundary"
        else:
            assert res.theta[res.spec.layout.index["var_alpha"]] >= -12
