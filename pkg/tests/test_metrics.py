"""Cost metrics against Monte-Carlo, explicit-inverse, and grid oracles."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxicp.metrics import (
    Correspondence,
    CostKind,
    CostParams,
    SingularCovarianceError,
    cost,
    e_cov,
    e_icp,
    fused_covariance,
    kl_divergence,
    sym_kl,
    weights,
)
from voxicp.se3 import Pose, exp_map, so3_exp
from voxicp.voxel import GaussianVoxel


def gv(mean, cov, count=10):
    return GaussianVoxel(np.asarray(mean, float), np.asarray(cov, float), count)


def random_spd(rng, scale=1.0):
    a = rng.standard_normal((3, 3))
    return scale * (a @ a.T + 0.1 * np.eye(3))


def random_pose(rng, angle=1.0, shift=1.0):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    twist = np.concatenate([axis * rng.uniform(0, angle), rng.standard_normal(3) * shift])
    return exp_map(twist)


spd_strategy = st.integers(0, 2**32 - 1)


class TestKlDivergence:
    def test_zero_when_identical(self):
        rng = np.random.default_rng(0)
        c = random_spd(rng)
        mu = rng.standard_normal(3)
        assert kl_divergence(mu, c, mu, c) == pytest.approx(0.0, abs=1e-12)

    def test_unit_covariance_mean_offset(self):
        val = kl_divergence(np.zeros(3), np.eye(3), np.array([1.0, 0, 0]), np.eye(3))
        assert val == pytest.approx(1.0, abs=1e-12)

    def test_matches_monte_carlo(self):
        # Oracle: E_p[2 log(p/q)] estimated by direct sampling; our value is
        # the doubled KL so the factor two sits on the estimator side.
        rng = np.random.default_rng(1)
        mu_p = np.array([0.2, -0.1, 0.4])
        mu_q = np.array([-0.3, 0.25, 0.1])
        cov_p = random_spd(rng, 0.8)
        cov_q = random_spd(rng, 1.2)
        n = 1_000_000
        samples = rng.multivariate_normal(mu_p, cov_p, size=n)
        inv_p = np.linalg.inv(cov_p)
        inv_q = np.linalg.inv(cov_q)
        _, logdet_p = np.linalg.slogdet(cov_p)
        _, logdet_q = np.linalg.slogdet(cov_q)
        dp = samples - mu_p
        dq = samples - mu_q
        per_sample = (
            logdet_q - logdet_p
            + np.einsum("ni,ij,nj->n", dq, inv_q, dq)
            - np.einsum("ni,ij,nj->n", dp, inv_p, dp)
        )
        estimate = per_sample.mean()
        stderr = per_sample.std(ddof=1) / np.sqrt(n)
        ours = kl_divergence(mu_p, cov_p, mu_q, cov_q)
        assert abs(ours - estimate) <= 3.0 * stderr

    def test_singular_covariance_raises(self):
        singular = np.diag([1.0, 1.0, 0.0])
        with pytest.raises(SingularCovarianceError):
            kl_divergence(np.zeros(3), np.eye(3), np.zeros(3), singular)

    def test_regularization_keeps_zero_at_equality(self):
        rng = np.random.default_rng(2)
        c = random_spd(rng)
        mu = rng.standard_normal(3)
        assert kl_divergence(mu, c, mu, c, reg=1e-6) == pytest.approx(0.0, abs=1e-12)


class TestSymKl:
    def test_zero_when_identical(self):
        rng = np.random.default_rng(3)
        c = random_spd(rng)
        mu = rng.standard_normal(3)
        assert sym_kl(mu, c, mu, c) == pytest.approx(0.0, abs=1e-12)

    def test_unit_covariance_mean_offset(self):
        val = sym_kl(np.zeros(3), np.eye(3), np.array([1.0, 0, 0]), np.eye(3))
        assert val == pytest.approx(0.5, abs=1e-12)

    def test_diagonal_covariance_case(self):
        val = sym_kl(np.zeros(3), np.eye(3), np.zeros(3), np.diag([2.0, 1.0, 1.0]))
        assert val == pytest.approx(0.5, abs=1e-12)

    @given(spd_strategy)
    @settings(max_examples=100, deadline=None)
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        mu_p = rng.standard_normal(3)
        mu_q = rng.standard_normal(3)
        cov_p = random_spd(rng)
        cov_q = random_spd(rng)
        forward = sym_kl(mu_p, cov_p, mu_q, cov_q)
        backward = sym_kl(mu_q, cov_q, mu_p, cov_p)
        assert abs(forward - backward) <= 1e-12 * max(1.0, abs(forward))

    @given(spd_strategy)
    @settings(max_examples=100, deadline=None)
    def test_non_negative_and_zero_only_at_equality(self, seed):
        rng = np.random.default_rng(seed)
        mu_p = rng.standard_normal(3)
        mu_q = rng.standard_normal(3)
        cov_p = random_spd(rng)
        cov_q = random_spd(rng)
        val = sym_kl(mu_p, cov_p, mu_q, cov_q)
        assert val >= -1e-12
        if np.linalg.norm(mu_p - mu_q) > 1e-4 or np.abs(cov_p - cov_q).max() > 1e-4:
            assert val > 1e-9


class TestFusedCovariance:
    def test_identity_covariances(self):
        out = fused_covariance(np.eye(3), np.eye(3), np.eye(3), lam=1e-6)
        np.testing.assert_allclose(out, np.eye(3) / np.sqrt(3.0), atol=1e-7)

    def test_zero_covariances_regularizer_only(self):
        out = fused_covariance(np.zeros((3, 3)), np.zeros((3, 3)), np.eye(3), lam=1e-6)
        np.testing.assert_allclose(out, np.eye(3) / np.sqrt(3.0), atol=1e-14)

    def test_unit_frobenius_norm(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            rot = random_pose(rng).rotation
            out = fused_covariance(random_spd(rng), random_spd(rng), rot)
            assert abs(np.linalg.norm(out, "fro") - 1.0) <= 1e-12

    def test_matches_direct_inverse_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            cov_p = random_spd(rng)
            cov_q = random_spd(rng)
            rot = random_pose(rng).rotation
            lam = 1e-6
            pooled = cov_q + rot @ cov_p @ rot.T + lam * np.eye(3)
            oracle = np.linalg.inv(pooled)
            oracle /= np.sqrt((oracle * oracle).sum())
            out = fused_covariance(cov_p, cov_q, rot, lam)
            np.testing.assert_allclose(out, oracle, atol=1e-10)

    def test_spd_output(self):
        rng = np.random.default_rng(6)
        out = fused_covariance(random_spd(rng), random_spd(rng), np.eye(3))
        assert (np.linalg.eigvalsh(out) > 0).all()


class TestEIcp:
    def test_zero_residual(self):
        rng = np.random.default_rng(7)
        mean = rng.standard_normal(3)
        corr = Correspondence(gv(mean, random_spd(rng)), gv(mean, random_spd(rng)))
        assert e_icp(corr, Pose.identity(), CostParams()) == pytest.approx(0.0, abs=1e-15)

    def test_unit_covariances_unit_residual(self):
        corr = Correspondence(gv(np.zeros(3), np.eye(3)), gv([1.0, 0, 0], np.eye(3)))
        val = e_icp(corr, Pose.identity(), CostParams())
        # normalization cancels the 2+lam scale exactly
        assert val == pytest.approx(1.0 / np.sqrt(3.0), abs=1e-12)

    def test_joint_rigid_invariance(self):
        rng = np.random.default_rng(8)
        params = CostParams()
        for _ in range(10):
            corr = Correspondence(
                gv(rng.standard_normal(3), random_spd(rng)),
                gv(rng.standard_normal(3), random_spd(rng)),
            )
            pose = random_pose(rng)
            motion = random_pose(rng)
            base = e_icp(corr, pose, params)
            moved = Correspondence(
                gv(*_transform_gv(motion, corr.source)),
                gv(*_transform_gv(motion, corr.target)),
            )
            conjugated = motion @ pose @ motion.inverse()
            assert e_icp(moved, conjugated, params) == pytest.approx(base, abs=1e-9)


def _transform_gv(pose: Pose, voxel: GaussianVoxel):
    mean = pose.transform(voxel.mean)
    cov = pose.rotation @ voxel.cov @ pose.rotation.T
    return mean, 0.5 * (cov + cov.T)


class TestECov:
    def test_zero_when_target_is_rotated_source(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            cov_p = random_spd(rng)
            pose = random_pose(rng)
            cov_q = pose.rotation @ cov_p @ pose.rotation.T
            corr = Correspondence(
                gv(np.zeros(3), cov_p), gv(pose.translation, 0.5 * (cov_q + cov_q.T))
            )
            s, s_sq = e_cov(corr, pose, reg=1e-6)
            assert abs(s) <= 1e-10
            assert s_sq <= 1e-20

    def test_diagonal_case(self):
        corr = Correspondence(gv(np.zeros(3), np.eye(3)), gv(np.zeros(3), np.diag([2.0, 1, 1])))
        s, s_sq = e_cov(corr, Pose.identity())
        assert s == pytest.approx(0.5, abs=1e-12)
        assert s_sq == pytest.approx(0.25, abs=1e-12)

    def test_matches_explicit_inverse_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            cov_p = random_spd(rng)
            cov_q = random_spd(rng)
            pose = random_pose(rng)
            corr = Correspondence(gv(np.zeros(3), cov_p), gv(np.zeros(3), cov_q))
            s, s_sq = e_cov(corr, pose)
            rot = pose.rotation
            oracle = (
                np.trace(rot @ np.linalg.inv(cov_p) @ rot.T @ cov_q)
                + np.trace(np.linalg.inv(cov_q) @ rot @ cov_p @ rot.T)
                - 6.0
            )
            assert s == pytest.approx(oracle, rel=1e-10, abs=1e-10)
            assert s_sq == pytest.approx(oracle**2, rel=1e-9, abs=1e-10)

    def test_non_negative_for_spd_inputs(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            corr = Correspondence(
                gv(np.zeros(3), random_spd(rng)), gv(np.zeros(3), random_spd(rng))
            )
            s, _ = e_cov(corr, random_pose(rng))
            assert s >= -1e-12


class TestWeights:
    def test_zero_error_full_weight(self):
        w_icp, w_cov = weights(0.0, 0.0, CostParams())
        assert w_icp == 1.0 and w_cov == 1.0

    def test_half_weight_at_sigma_squared(self):
        w_icp, _ = weights(0.25, 0.0, CostParams())
        assert w_icp == pytest.approx(0.5, abs=1e-15)
        _, w_cov = weights(0.0, 9.0, CostParams())
        assert w_cov == pytest.approx(0.5, abs=1e-15)

    def test_large_error_vanishing_weight(self):
        w_icp, _ = weights(1e6, 0.0, CostParams())
        assert w_icp < 1e-6

    @given(
        st.floats(0.0, 1e6, allow_nan=False),
        st.floats(min_value=1e-6, max_value=1e5, allow_nan=False),
    )
    @settings(max_examples=200, deadline=None)
    def test_strictly_decreasing_and_bounded(self, e, bump):
        params = CostParams()
        # keep the gap resolvable in float64 for very large errors
        bump = max(bump, 1e-6 * e)
        w_lo, _ = weights(e + bump, 0.0, params)
        w_hi, _ = weights(e, 0.0, params)
        assert 0.0 < w_lo < w_hi <= 1.0

    def test_negative_error_rejected(self):
        with pytest.raises(ValueError):
            weights(-1.0, 0.0, CostParams())


class TestCost:
    def kinds(self):
        return list(CostKind)

    def test_zero_at_perfect_match_every_kind(self):
        rng = np.random.default_rng(12)
        mean = rng.standard_normal(3)
        cov = random_spd(rng)
        corr = Correspondence(gv(mean, cov), gv(mean, cov.copy()))
        for kind in self.kinds():
            out = cost(corr, Pose.identity(), CostParams(kind=kind))
            assert out.value == pytest.approx(0.0, abs=1e-9), kind
            assert out.w_icp == pytest.approx(1.0, abs=1e-9)

    def test_standard_icp_is_squared_residual(self):
        corr = Correspondence(gv(np.zeros(3), np.eye(3)), gv([1.0, 2.0, 2.0], np.eye(3)))
        out = cost(corr, Pose.identity(), CostParams(kind=CostKind.STANDARD_ICP))
        assert out.value == pytest.approx(9.0, abs=1e-12)

    def test_gicp_pinned_value(self):
        corr = Correspondence(gv(np.zeros(3), np.eye(3)), gv([1.0, 0, 0], np.eye(3)))
        out = cost(corr, Pose.identity(), CostParams(kind=CostKind.GICP))
        assert out.value == pytest.approx(0.5, abs=1e-6)

    def test_ndt_uses_target_covariance(self):
        corr = Correspondence(
            gv(np.zeros(3), np.eye(3)), gv([1.0, 0, 0], np.diag([4.0, 1, 1]))
        )
        out = cost(corr, Pose.identity(), CostParams(kind=CostKind.NDT))
        assert out.value == pytest.approx(0.25, abs=1e-6)

    def test_litamin_normalized_metric(self):
        corr = Correspondence(
            gv(np.zeros(3), np.eye(3)), gv([1.0, 0, 0], np.eye(3))
        )
        out = cost(corr, Pose.identity(), CostParams(kind=CostKind.LITAMIN))
        # metric = I/sqrt(3) after normalization, residual (1,0,0)
        assert out.value == pytest.approx(1.0 / np.sqrt(3.0), abs=1e-6)

    def test_litamin2_icp_weighted(self):
        corr = Correspondence(gv(np.zeros(3), np.eye(3)), gv([1.0, 0, 0], np.eye(3)))
        params = CostParams(kind=CostKind.LITAMIN2_ICP)
        out = cost(corr, Pose.identity(), params)
        e = 1.0 / np.sqrt(3.0)
        w = 1.0 - e / (e + params.sigma_icp**2)
        assert out.e_icp == pytest.approx(e, abs=1e-12)
        assert out.w_icp == pytest.approx(w, abs=1e-12)
        assert out.value == pytest.approx(w * e, abs=1e-12)

    def test_litamin2_cov_reduces_to_icp_when_shapes_agree(self):
        rng = np.random.default_rng(13)
        cov_p = random_spd(rng)
        pose = random_pose(rng)
        cov_q = pose.rotation @ cov_p @ pose.rotation.T
        corr = Correspondence(
            gv(rng.standard_normal(3), cov_p),
            gv(rng.standard_normal(3), 0.5 * (cov_q + cov_q.T)),
        )
        full = cost(corr, pose, CostParams(kind=CostKind.LITAMIN2_ICP_COV))
        icp_only = cost(corr, pose, CostParams(kind=CostKind.LITAMIN2_ICP))
        assert full.value == pytest.approx(icp_only.value, abs=1e-9)
        assert full.shape_residual == pytest.approx(0.0, abs=1e-10)
        assert full.w_cov == pytest.approx(1.0, abs=1e-10)

    def test_joint_rigid_invariance_every_kind(self):
        rng = np.random.default_rng(14)
        for kind in self.kinds():
            params = CostParams(kind=kind)
            corr = Correspondence(
                gv(rng.standard_normal(3), random_spd(rng)),
                gv(rng.standard_normal(3), random_spd(rng)),
            )
            pose = random_pose(rng)
            motion = random_pose(rng)
            base = cost(corr, pose, params).value
            moved = Correspondence(
                gv(*_transform_gv(motion, corr.source)),
                gv(*_transform_gv(motion, corr.target)),
            )
            conjugated = (motion @ pose @ motion.inverse()).orthonormalized()
            moved_val = cost(moved, conjugated, params).value
            assert moved_val == pytest.approx(base, rel=1e-9, abs=1e-9), kind

    def test_degenerate_covariances_reduce_to_scaled_standard_icp(self):
        rng = np.random.default_rng(15)
        zero = np.zeros((3, 3))
        for _ in range(10):
            corr = Correspondence(
                gv(rng.standard_normal(3), zero), gv(rng.standard_normal(3), zero)
            )
            pose = random_pose(rng)
            out = cost(corr, pose, CostParams(kind=CostKind.LITAMIN2_ICP))
            r = corr.target.mean - pose.transform(corr.source.mean)
            assert out.e_icp == pytest.approx((r @ r) / np.sqrt(3.0), rel=1e-9)

    def test_degenerate_argmin_matches_standard_icp_grid(self):
        # 1-D pose grid over x-translation: the litamin2 objective and plain
        # ICP must pick the same minimizer when covariances are degenerate.
        rng = np.random.default_rng(16)
        sources = rng.uniform(-2, 2, size=(12, 3))
        true_shift = np.array([0.31, 0.0, 0.0])
        targets = sources + true_shift + rng.standard_normal((12, 3)) * 0.01
        zero = np.zeros((3, 3))
        corrs = [
            Correspondence(gv(sources[i], zero), gv(targets[i], zero))
            for i in range(12)
        ]
        grid = np.linspace(0.0, 0.6, 601)
        lit_params = CostParams(kind=CostKind.LITAMIN2_ICP)
        icp_params = CostParams(kind=CostKind.STANDARD_ICP)
        lit_total = []
        icp_total = []
        for tx in grid:
            pose = Pose(np.eye(3), np.array([tx, 0.0, 0.0]))
            lit_total.append(sum(cost(c, pose, lit_params).value for c in corrs))
            icp_total.append(sum(cost(c, pose, icp_params).value for c in corrs))
        lit_arg = grid[int(np.argmin(lit_total))]
        icp_arg = grid[int(np.argmin(icp_total))]
        assert abs(lit_arg - icp_arg) <= 1e-3

    def test_cost_kind_parsing(self):
        assert CostKind.from_string("icp") is CostKind.STANDARD_ICP
        assert CostKind.from_string("litamin2-icp-cov") is CostKind.LITAMIN2_ICP_COV
        with pytest.raises(ValueError, match="unknown cost kind"):
            CostKind.from_string("chamfer")

    def test_params_validation(self):
        with pytest.raises(ValueError):
            CostParams(lam=0.0)
        with pytest.raises(ValueError):
            CostParams(sigma_icp=-1.0)
