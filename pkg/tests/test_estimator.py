import numpy as np
import pytest

from sativ.design import SaturationDesign
from sativ.dgp import ExperimentData, GroupData, SimConfig, oracle_subpopulation_means, simulate_experiment
from sativ.errors import ValidationError
from sativ.estimator import (
    TARGET_COMPLIER_PSI,
    TARGET_COMPLIER_THETA,
    TARGET_JOINT,
    TARGET_NEVER_TAKER,
    TARGET_POPULATION,
    EstimateResult,
    build_instruments,
    complier_theta,
    compliance_rate,
    estimate_all,
    estimate_chat,
    ingest_csv,
    ior_test,
    naive_iv,
    rsiv_complier_theta,
    rsiv_estimate,
    rsiv_pure_control,
)
from sativ.model import linear_basis
from sativ.streams import replication_seed, substream

LIN = linear_basis()
INTERIOR = SaturationDesign.from_probs((0.25, 0.5, 0.75), (1 / 3, 1 / 3, 1 / 3))
WITH_ZERO = SaturationDesign.from_probs((0.0, 0.25, 0.5, 0.75), (0.25,) * 4)
TRUTH = (0.5, 0.2, -0.7, 0.8)


def noiseless_config(design=INTERIOR, G=50, n=20, seed=7) -> SimConfig:
    return SimConfig(G=G, n=n, design=design, means=TRUTH, seed=seed)


def noisy_sec6_config(G=235, n=116, seed=42, design=None) -> SimConfig:
    if design is None:
        counts = (G // 5,) * 5
        design = SaturationDesign.from_counts((0.0, 0.25, 0.5, 0.75, 1.0), counts)
    return SimConfig(
        G=G,
        n=n,
        design=design,
        means=TRUTH,
        kappa=(0.0, 0.0, 1.2, 1.5),
        sigma=(0.3, 0.3, 0.2, 0.4),
        seed=seed,
    )


class TestEstimateChat:
    def test_basic_ratio(self):
        # neighbors: 4 offered of whom 2 took up
        z = np.array([0, 1, 1, 1, 1, 0])
        d = np.array([0, 1, 1, 0, 0, 0])
        chat = estimate_chat(z, d)
        assert chat[0] == pytest.approx(0.5)

    def test_no_offered_neighbors(self):
        z = np.zeros(5)
        d = np.zeros(5)
        assert np.all(estimate_chat(z, d) == 0.0)

    def test_full_take_up(self):
        z = np.ones(6)
        d = np.ones(6)
        assert np.all(estimate_chat(z, d) == 1.0)

    def test_leave_one_out(self):
        z = np.array([1, 1])
        d = np.array([1, 0])
        chat = estimate_chat(z, d)
        assert chat[0] == pytest.approx(0.0)  # the other member did not take up
        assert chat[1] == pytest.approx(1.0)


class TestBuildInstruments:
    def setup_method(self):
        self.data = simulate_experiment(noiseless_config(seed=3))

    def test_unoffered_rows_inert_for_complier_psi(self):
        inst = build_instruments(self.data, LIN, INTERIOR, TARGET_COMPLIER_PSI)
        unoffered = self.data.z == 0
        assert np.all(inst.w[unoffered] == 0.0)
        assert np.all(inst.zhat[unoffered] == 0.0)

    def test_takers_inert_for_never_taker(self):
        inst = build_instruments(self.data, LIN, INTERIOR, TARGET_NEVER_TAKER)
        takers = self.data.d == 1
        assert np.all(inst.w[takers] == 0.0)

    def test_chat_zero_triggers_pseudo_inverse(self):
        # one group where no neighbor took up: R(0, n) is rank deficient
        groups = [
            GroupData(0, 0.5, np.array([1, 1, 0, 0]), np.zeros(4, dtype=np.int8), np.ones(4)),
            GroupData(1, 0.5, np.array([1, 0, 1, 1]), np.array([1, 0, 1, 0]), np.ones(4)),
        ]
        data = ExperimentData(groups)
        dsn = SaturationDesign.from_probs((0.5,), (1.0,))
        inst = build_instruments(data, LIN, dsn, TARGET_POPULATION)
        assert inst.n_pseudo_inverted >= 4  # the whole chat=0 group
        assert inst.min_abs_det_r < 1e-12

    def test_rejects_no_interior_design(self):
        dsn = SaturationDesign.from_probs((0.0, 1.0), (0.5, 0.5))
        cfg = noiseless_config()
        with pytest.raises(ValidationError):
            build_instruments(self.data, LIN, dsn, TARGET_JOINT)


@pytest.fixture(scope="module")
def noiseless_data():
    return simulate_experiment(noiseless_config())


class TestExactRecovery:
    """Zero-residual data solves every target exactly."""

    @pytest.fixture
    def data(self, noiseless_data):
        return noiseless_data

    def test_all_targets(self, data):
        res = estimate_all(data, LIN, INTERIOR)
        a, b, g, dl = TRUTH
        assert np.allclose(res[TARGET_JOINT].coefficients, [a, g, b, dl], atol=1e-8)
        assert np.allclose(res[TARGET_COMPLIER_PSI].coefficients, [a + b, g + dl], atol=1e-8)
        assert np.allclose(res[TARGET_NEVER_TAKER].coefficients, [a, g], atol=1e-8)
        assert np.allclose(res[TARGET_POPULATION].coefficients, [a, g], atol=1e-8)
        assert np.allclose(res[TARGET_COMPLIER_THETA].coefficients, [a, g], atol=1e-8)
        assert np.allclose(res["naive_iv"].coefficients, [a, b, g, dl], atol=1e-8)

    def test_vcov_properties(self, data):
        res = estimate_all(data, LIN, INTERIOR)
        for r in res.values():
            assert np.abs(r.vcov - r.vcov.T).max() < 1e-10
            assert np.linalg.eigvalsh(r.vcov)[0] > -1e-10

    def test_coefficient_lengths(self, data):
        res = estimate_all(data, LIN, INTERIOR)
        assert len(res[TARGET_JOINT].coefficients) == 4
        assert len(res[TARGET_COMPLIER_PSI].coefficients) == 2
        assert len(res[TARGET_NEVER_TAKER].coefficients) == 2
        assert len(res[TARGET_POPULATION].coefficients) == 2
        assert len(res[TARGET_COMPLIER_THETA].coefficients) == 2
        assert len(res["naive_iv"].coefficients) == 4

    def test_full_compliance(self):
        cfg = noiseless_config(seed=11)
        cfg = SimConfig(
            G=cfg.G, n=cfg.n, design=cfg.design, means=TRUTH,
            complier_shares=(1.0,), seed=11,
        )
        data = simulate_experiment(cfg)
        a, b, g, dl = TRUTH
        psi = rsiv_estimate(data, LIN, INTERIOR, TARGET_COMPLIER_PSI)
        pop = rsiv_estimate(data, LIN, INTERIOR, TARGET_POPULATION)
        assert np.allclose(psi.coefficients, [a + b, g + dl], atol=1e-8)
        assert np.allclose(pop.coefficients, [a, g], atol=1e-8)
        with pytest.raises(ValidationError):
            rsiv_complier_theta(data, LIN, INTERIOR)  # full compliance degenerate

    def test_quadratic_basis_recovers_linear_truth(self):
        # a linear outcome is expressible in the quadratic basis with zero
        # curvature; all targets recover it exactly on noiseless data
        from sativ.model import quadratic_basis

        dsn = SaturationDesign.from_probs((0.2, 0.4, 0.6, 0.8), (0.25,) * 4)
        cfg = SimConfig(
            G=80, n=25, design=dsn, means=TRUTH, complier_shares=(0.2, 0.4), seed=123
        )
        data = simulate_experiment(cfg)
        res = estimate_all(data, quadratic_basis(), dsn, include_naive=False)
        a, b, g, dl = TRUTH
        assert np.allclose(res[TARGET_JOINT].coefficients, [a, g, 0, b, dl, 0], atol=1e-7)
        assert np.allclose(res[TARGET_POPULATION].coefficients, [a, g, 0], atol=1e-7)
        assert np.allclose(res[TARGET_COMPLIER_PSI].coefficients, [a + b, g + dl, 0], atol=1e-7)

    def test_pure_control_variants(self):
        data = simulate_experiment(noiseless_config(design=WITH_ZERO, seed=5))
        a, b, g, dl = TRUTH
        gmm = rsiv_pure_control(data, LIN, WITH_ZERO, TARGET_JOINT)
        drop = rsiv_estimate(data, LIN, WITH_ZERO, TARGET_JOINT, pure_control="drop")
        assert np.allclose(gmm.coefficients, [a, g, b, dl], atol=1e-8)
        assert np.allclose(drop.coefficients, [a, g, b, dl], atol=1e-8)
        pop = rsiv_pure_control(data, LIN, WITH_ZERO, TARGET_POPULATION)
        assert np.allclose(pop.coefficients, [a, g], atol=1e-8)


class TestComplierTheta:
    def _result(self, coefs):
        k = len(coefs)
        return EstimateResult("x", np.asarray(coefs, dtype=float), np.zeros((k, k)), 10, 100)

    def test_identity_arithmetic(self):
        pop = self._result([0.5, -0.7])
        nt = self._result([0.53, -0.64])
        out = complier_theta(pop, nt, 0.3)
        assert out.theta_mean == pytest.approx((0.43, -0.84))
        assert out.label == "complier"

    def test_no_selection(self):
        pop = self._result([0.5, -0.7])
        nt = self._result([0.5, -0.7])
        out = complier_theta(pop, nt, 0.42)
        assert out.theta_mean == pytest.approx((0.5, -0.7))

    def test_degenerate_rates(self):
        pop, nt = self._result([0.5]), self._result([0.4])
        with pytest.raises(ValidationError):
            complier_theta(pop, nt, 1.0)
        with pytest.raises(ValidationError):
            complier_theta(pop, nt, 0.0)


class TestLargeSampleAgreement:
    def test_joint_slopes_near_oracle_truth(self):
        cfg = noisy_sec6_config(G=2000, seed=100)
        data = simulate_experiment(cfg)
        res = rsiv_estimate(data, LIN, cfg.design, TARGET_JOINT)
        means = oracle_subpopulation_means(cfg, n_draws=10**6, seed=1000)
        truth = [
            means["population"].theta_mean[0],
            means["population"].theta_mean[1],
            means["complier"].contrast_mean[0],
            means["complier"].contrast_mean[1],
        ]
        for est, se, tr in zip(res.coefficients, res.se, truth):
            assert abs(est - tr) < 3 * se

    def test_moment_normalization_with_known_cbar(self):
        # with the true Cbar, the average Zhat X' equals its population value:
        # the identity for the population target, and a block-diagonal with
        # E[C] scaling the contrast block for the joint target.  Rows within a
        # group share neighbor sums, so sampling error is assessed at the
        # cluster level (near-singular Q amplifies it far beyond 1/sqrt(N)).
        cfg = noisy_sec6_config(G=500, n=200, seed=55, design=INTERIOR)
        data = simulate_experiment(cfg)
        ec = 0.3
        cases = [
            (TARGET_POPULATION, np.eye(2)),
            (TARGET_JOINT, np.block(
                [[np.eye(2), np.zeros((2, 2))], [np.zeros((2, 2)), ec * np.eye(2)]]
            )),
        ]
        for target, expected in cases:
            inst = build_instruments(data, LIN, INTERIOR, target, chat_policy="oracle")
            prods = np.einsum("ni,nj->nij", inst.zhat, inst.x)
            gmeans = np.zeros((data.n_groups,) + prods.shape[1:])
            np.add.at(gmeans, data.group_index, prods)
            gmeans /= data.sizes[:, None, None]
            mean = gmeans.mean(axis=0)
            se = gmeans.std(axis=0, ddof=1) / np.sqrt(data.n_groups)
            z = np.abs(mean - expected) / np.maximum(se, 1e-10)
            assert z.max() < 5.0

    def test_feasible_tracks_infeasible(self):
        # substituting the true Cbar changes estimates by O(sqrt(log G / n))
        dsn = SaturationDesign.from_counts((0.25, 0.5, 0.75, 1.0), (59, 59, 59, 58))
        close = 0
        reps = 10
        for r in range(reps):
            cfg = SimConfig(
                G=235, n=1000, design=dsn, means=TRUTH,
                kappa=(0.0, 0.0, 1.2, 1.5), sigma=(0.3, 0.3, 0.2, 0.4),
                seed=replication_seed(17, r),
            )
            data = simulate_experiment(cfg)
            feas = rsiv_estimate(data, LIN, dsn, TARGET_JOINT)
            infeas = rsiv_estimate(data, LIN, dsn, TARGET_JOINT, chat_policy="oracle")
            if np.abs(feas.coefficients - infeas.coefficients).max() < 0.05:
                close += 1
        assert close >= 0.9 * reps


class TestNaiveIV:
    def test_recovers_homogeneous_truth(self):
        data = simulate_experiment(noiseless_config(seed=21))
        res = naive_iv(data)
        assert np.allclose(res.coefficients, TRUTH, atol=1e-8)

    def test_spillover_bias_direction(self):
        # positive kappa_gamma drags the naive gamma toward zero
        cfg = noisy_sec6_config(G=1000, seed=31)
        data = simulate_experiment(cfg)
        res = naive_iv(data)
        assert res.coefficients[2] > -0.68


class TestIORTest:
    def test_null_distribution_basic(self):
        data = simulate_experiment(noisy_sec6_config(seed=61))
        res = ior_test(data)
        assert res.df == 3  # offers occur at 0.25, 0.5, 0.75, 1.0
        assert 0.0 <= res.p_value <= 1.0
        assert all(0.0 <= r <= 1.0 for r in res.take_up_rates)

    def test_single_bin_rejected(self):
        dsn = SaturationDesign.from_probs((0.5,), (1.0,))
        data = simulate_experiment(noiseless_config(design=dsn, seed=71))
        with pytest.raises(ValidationError):
            ior_test(data)

    def test_matches_reference_cluster_ols(self):
        sm = pytest.importorskip("statsmodels.api")
        from sativ.estimator import _Rows

        dsn = SaturationDesign.from_counts((0.0, 0.25, 0.5, 0.75, 1.0), (10,) * 5)
        cfg = noisy_sec6_config(G=50, n=30, seed=31, design=dsn)
        data = simulate_experiment(cfg)
        res = ior_test(data)

        rows = _Rows(data)
        offered = rows.z == 1.0
        sats = np.unique(rows.saturation[offered])
        d = rows.d[offered]
        sat = rows.saturation[offered]
        x = np.column_stack(
            [np.ones_like(d)] + [(sat == s).astype(float) for s in sats[1:]]
        )
        fit = sm.OLS(d, x).fit(
            cov_type="cluster", cov_kwds={"groups": rows.gidx[offered]}
        )
        restriction = np.hstack([np.zeros((len(sats) - 1, 1)), np.eye(len(sats) - 1)])
        ftest = fit.f_test(restriction)
        assert res.wald == pytest.approx(float(ftest.fvalue) * res.df, rel=1e-8)
        assert res.p_value == pytest.approx(float(ftest.pvalue), rel=1e-6)

    def test_power_against_saturation_dependent_take_up(self):
        # violation fixture: take-up probability c * (0.5 + 0.5 s)
        rng = substream(81)
        groups = []
        n = 60
        for gid in range(200):
            s = [0.25, 0.5, 0.75, 1.0][gid % 4]
            z = (rng.random(n) < s).astype(np.int8)
            take_prob = 0.3 * (0.5 + 0.5 * s)
            d = (z * (rng.random(n) < take_prob)).astype(np.int8)
            groups.append(GroupData(gid, s, z, d, rng.standard_normal(n)))
        res = ior_test(ExperimentData(groups))
        assert res.p_value < 0.01


class TestBitStability:
    def test_within_group_permutation_leaves_estimates_unchanged(self):
        data = simulate_experiment(noisy_sec6_config(G=40, n=30, seed=91,
                                                     design=INTERIOR))
        rng = substream(92)
        shuffled = []
        for g in data.groups:
            perm = rng.permutation(g.n)
            shuffled.append(
                GroupData(g.group_id, g.saturation, g.z[perm], g.d[perm], g.y[perm])
            )
        data2 = ExperimentData(shuffled)
        for target in (TARGET_JOINT, TARGET_POPULATION):
            r1 = rsiv_estimate(data, LIN, INTERIOR, target)
            r2 = rsiv_estimate(data2, LIN, INTERIOR, target)
            assert np.array_equal(r1.coefficients, r2.coefficients)
            assert np.array_equal(r1.vcov, r2.vcov)
        n1 = naive_iv(data)
        n2 = naive_iv(data2)
        assert np.array_equal(n1.coefficients, n2.coefficients)


class TestValidationErrors:
    def test_two_cluster_minimum(self):
        g = GroupData(0, 0.5, np.array([1, 0, 1]), np.array([1, 0, 0]), np.ones(3))
        data = ExperimentData([g])
        dsn = SaturationDesign.from_probs((0.5, 0.25), (0.5, 0.5))
        with pytest.raises(ValidationError):
            rsiv_estimate(data, LIN, dsn, TARGET_POPULATION)

    def test_saturation_not_in_design(self):
        data = simulate_experiment(noiseless_config(seed=3))
        other = SaturationDesign.from_probs((0.1, 0.9), (0.5, 0.5))
        with pytest.raises(ValidationError):
            rsiv_estimate(data, LIN, other, TARGET_JOINT)

    def test_pure_control_requires_zero_groups(self):
        data = simulate_experiment(noiseless_config(seed=3))
        with pytest.raises(ValidationError):
            rsiv_pure_control(data, LIN, WITH_ZERO, TARGET_JOINT)

    def test_all_pure_control_unidentified(self):
        dsn = SaturationDesign.from_probs((0.0, 0.5), (0.5, 0.5))
        rng = substream(7)
        groups = [
            GroupData(i, 0.0, np.zeros(4, dtype=np.int8), np.zeros(4, dtype=np.int8),
                      rng.standard_normal(4))
            for i in range(5)
        ]
        data = ExperimentData(groups)
        with pytest.raises(ValidationError):
            rsiv_estimate(data, LIN, dsn, TARGET_JOINT)

    def test_compliance_rate_requires_offers(self):
        groups = [
            GroupData(i, 0.0, np.zeros(3, dtype=np.int8), np.zeros(3, dtype=np.int8),
                      np.ones(3))
            for i in range(3)
        ]
        with pytest.raises(ValidationError):
            compliance_rate(ExperimentData(groups))


class TestIngestCsv(object):
    def _write(self, tmp_path, text):
        path = tmp_path / "data.csv"
        path.write_text(text, encoding="utf-8")
        return path

    def test_well_formed(self, tmp_path):
        text = "group_id,saturation,z,d,y\n"
        for gid in range(3):
            for z, d, y in ((1, 1, 0.5), (0, 0, 0.1), (1, 0, -0.2)):
                text += f"{gid},0.5,{z},{d},{y}\n"
        data = ingest_csv(self._write(tmp_path, text))
        assert data.n_groups == 3
        assert data.n_individuals == 9

    def test_one_sided_violation_names_row(self, tmp_path):
        text = (
            "group_id,saturation,z,d,y\n"
            "0,0.5,1,0,0.1\n"
            "0,0.5,0,1,0.2\n"
        )
        with pytest.raises(ValidationError, match="row 3"):
            ingest_csv(self._write(tmp_path, text))

    def test_single_member_group(self, tmp_path):
        text = (
            "group_id,saturation,z,d,y\n"
            "0,0.5,1,0,0.1\n"
            "0,0.5,0,0,0.3\n"
            "1,0.25,1,1,0.2\n"
        )
        with pytest.raises(ValidationError, match="group 1"):
            ingest_csv(self._write(tmp_path, text))

    def test_saturation_varies_within_group(self, tmp_path):
        text = (
            "group_id,saturation,z,d,y\n"
            "0,0.5,1,0,0.1\n"
            "0,0.25,0,0,0.3\n"
        )
        with pytest.raises(ValidationError, match="row 3"):
            ingest_csv(self._write(tmp_path, text))

    def test_bad_header(self, tmp_path):
        with pytest.raises(ValidationError, match="header"):
            ingest_csv(self._write(tmp_path, "a,b,c,d,e\n1,0.5,1,1,0.0\n"))

    def test_non_binary_flag(self, tmp_path):
        text = "group_id,saturation,z,d,y\n0,0.5,2,0,0.1\n0,0.5,0,0,0.1\n"
        with pytest.raises(ValidationError, match="row 2"):
            ingest_csv(self._write(tmp_path, text))
