"""Head-level contracts: estimators, the blend schedule, and every metric.

Covariance estimators are pinned to the independent two-pass oracle; the
distance/probability pipeline is pinned to the Gauss-Jordan reference, the
mixture-responsibility oracle, and the generic Bregman evaluator.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot.autodiff import Tensor, finite_difference_check
from fewshot.datasets import ConfigurationError
from fewshot.heads import (AdaptiveLinearHead, FixedMetricHead, MahalanobisHead,
                           ProjectedHead, Projection, blend_covariance,
                           class_covariance, class_means, classify,
                           episode_stats, mahalanobis_distances,
                           mahalanobis_logits, metric_logits,
                           pooled_task_covariance, shot_weight, task_covariance)
from fewshot.oracles import (dense_reference_covariance, dense_reference_inverse,
                             gmm_responsibilities_shared,
                             quadratic_form_generator, bregman_divergence,
                             reference_softmax)
from fewshot.verify import _fixed_reg, random_spd


class TestClassMeans:
    def test_single_point_is_its_embedding(self):
        emb = Tensor([[1.5, -2.0, 0.25]])
        (mean,) = class_means(emb, np.array([0]), 1)
        np.testing.assert_array_equal(mean.data, [1.5, -2.0, 0.25])

    def test_two_point_arithmetic(self):
        emb = Tensor([[0.0, 0.0], [2.0, 2.0]])
        (mean,) = class_means(emb, np.array([0, 0]), 1)
        np.testing.assert_array_equal(mean.data, [1.0, 1.0])

    def test_matches_independent_sum_oracle(self):
        rng = np.random.default_rng(0)
        emb = rng.standard_normal((23, 4))
        labels = rng.integers(0, 5, size=23)
        labels[:5] = np.arange(5)  # every class present
        means = class_means(Tensor(emb), labels, 5)
        for k in range(5):
            rows = emb[labels == k]
            acc = np.zeros(4)
            for row in rows:
                acc += row
            np.testing.assert_allclose(means[k].data, acc / len(rows),
                                       atol=1e-12, rtol=0)

    def test_missing_class_rejected(self):
        with pytest.raises(ConfigurationError):
            class_means(Tensor(np.zeros((2, 2))), np.array([0, 0]), 2)


class TestCovarianceEstimators:
    def test_single_shot_is_zero_matrix(self):
        emb = Tensor([[3.0, 4.0]])
        cov = class_covariance(emb, Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(cov.data, np.zeros((2, 2)))

    def test_one_dimensional_hand_case(self):
        emb = Tensor([[0.0], [2.0]])
        cov = class_covariance(emb, Tensor([1.0]))
        assert cov.data[0, 0] == 2.0  # ((0-1)^2 + (2-1)^2) / 1

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(1)
        pts = rng.multivariate_normal(np.zeros(3), random_spd(rng, 3), size=50)
        mean = Tensor(pts.mean(axis=0))
        cov = class_covariance(Tensor(pts), mean).data
        np.testing.assert_allclose(cov, dense_reference_covariance(pts),
                                   atol=1e-12, rtol=0)

    def test_task_covariance_of_identical_points_is_zero(self):
        emb = Tensor(np.tile([1.0, 2.0], (6, 1)))
        np.testing.assert_allclose(task_covariance(emb).data, np.zeros((2, 2)),
                                   atol=1e-15)

    def test_task_covariance_two_point_hand_case(self):
        emb = Tensor([[0.0, 0.0], [2.0, 0.0]])
        np.testing.assert_array_equal(task_covariance(emb).data,
                                      [[2.0, 0.0], [0.0, 0.0]])

    def test_task_covariance_matches_oracle(self):
        rng = np.random.default_rng(2)
        pts = rng.standard_normal((30, 4))
        np.testing.assert_allclose(task_covariance(Tensor(pts)).data,
                                   dense_reference_covariance(pts),
                                   atol=1e-12, rtol=0)

    def test_task_covariance_needs_two_points(self):
        with pytest.raises(ConfigurationError):
            task_covariance(Tensor([[1.0, 2.0]]))

    def test_pooled_variant_removes_between_class_scatter(self):
        # Two tight clusters far apart: global covariance is dominated by
        # the between-class separation, pooled covariance is not.
        rng = np.random.default_rng(3)
        a = rng.standard_normal((10, 2)) * 0.1
        b = rng.standard_normal((10, 2)) * 0.1 + np.array([100.0, 0.0])
        emb = Tensor(np.vstack([a, b]))
        labels = np.repeat([0, 1], 10)
        pooled = pooled_task_covariance(emb, labels, 2).data
        globl = task_covariance(emb).data
        assert globl[0, 0] > 1000 * pooled[0, 0]


class TestBlendSchedule:
    def test_shot_weight_known_values(self):
        assert shot_weight(1) == 0.5
        assert shot_weight(2) == pytest.approx(2.0 / 3.0, abs=0)
        assert shot_weight(5, task_reg=False) == 1.0

    @given(st.integers(min_value=1, max_value=10_000))
    def test_shot_weight_strictly_increasing_to_one(self, n):
        assert shot_weight(n) < shot_weight(n + 1) < 1.0

    def test_single_shot_blend_formula_exact(self):
        rng = np.random.default_rng(4)
        task_cov = random_spd(rng, 3)
        zero = Tensor(np.zeros((3, 3)))
        reg = blend_covariance(zero, Tensor(task_cov), count=1, beta=0.7)
        assert reg.lam == 0.5
        np.testing.assert_array_equal(reg.q.data,
                                      0.5 * task_cov + 0.7 * np.eye(3))

    def test_zero_inputs_give_scaled_identity(self):
        zero = Tensor(np.zeros((2, 2)))
        reg = blend_covariance(zero, zero, count=3, beta=1.0)
        np.testing.assert_array_equal(reg.q.data, np.eye(2))

    def test_task_reg_off_keeps_ridge(self):
        rng = np.random.default_rng(5)
        cov_k = random_spd(rng, 3)
        reg = blend_covariance(Tensor(cov_k), None, count=4, beta=0.3,
                               task_reg=False)
        assert reg.lam == 1.0
        np.testing.assert_array_equal(reg.q.data, cov_k + 0.3 * np.eye(3))

    def test_nonpositive_beta_rejected(self):
        zero = Tensor(np.zeros((2, 2)))
        for beta in (0.0, -1.0):
            with pytest.raises(ConfigurationError):
                blend_covariance(zero, zero, count=1, beta=beta)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1),
           st.sampled_from([0.1, 1.0, 10.0]))
    def test_blend_is_spd_for_any_positive_beta(self, seed, beta):
        # Rank-deficient inputs included: the ridge term dominates.
        rng = np.random.default_rng(seed)
        d = int(rng.integers(2, 6))
        n_k = int(rng.integers(1, 4))  # fewer points than dimensions
        pts = rng.standard_normal((n_k, d))
        mean = Tensor(pts.mean(axis=0))
        cov_k = class_covariance(Tensor(pts), mean)
        task_pts = rng.standard_normal((max(n_k + 1, 3), d))
        cov_t = task_covariance(Tensor(task_pts))
        reg = blend_covariance(cov_k, cov_t, count=n_k, beta=beta)
        np.linalg.cholesky(reg.q.data)  # raises if not SPD
        assert reg.cholesky is not None


class TestMahalanobisDistances:
    def test_identity_covariance_hand_case(self):
        reg = _fixed_reg(np.eye(2))
        d = mahalanobis_distances(Tensor([[3.0, 4.0]]), Tensor([0.0, 0.0]), reg)
        assert d.data[0] == 12.5

    def test_diagonal_covariance_hand_case(self):
        reg = _fixed_reg(np.diag([4.0, 1.0]))
        d = mahalanobis_distances(Tensor([[2.0, 0.0]]), Tensor([0.0, 0.0]), reg)
        assert d.data[0] == pytest.approx(0.5, abs=1e-15)

    def test_matches_dense_inverse_oracle(self):
        rng = np.random.default_rng(6)
        q = random_spd(rng, 3)
        inv = dense_reference_inverse(q)
        reg = _fixed_reg(q)
        for _ in range(100):
            x = rng.standard_normal(3)
            mu = rng.standard_normal(3)
            got = mahalanobis_distances(Tensor(x[None]), Tensor(mu), reg).data[0]
            expected = 0.5 * float((x - mu) @ inv @ (x - mu))
            assert got == pytest.approx(expected, abs=1e-9)

    def test_is_a_bregman_divergence(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            q = random_spd(rng, 4)
            gen = quadratic_form_generator(q)
            z, zp = rng.standard_normal(4), rng.standard_normal(4)
            dist = mahalanobis_distances(Tensor(z[None]), Tensor(zp),
                                         _fixed_reg(q)).data[0]
            assert dist == pytest.approx(bregman_divergence(gen, z, zp), abs=1e-9)


class TestClassify:
    def test_equal_distances_uniform(self):
        probs = classify(Tensor(np.zeros((3, 4)))).data
        np.testing.assert_allclose(probs, 0.25, atol=1e-15)

    def test_two_class_hand_case(self):
        # distances (0, ln 3) -> logits (0, -ln 3) -> probabilities (3/4, 1/4)
        probs = classify(Tensor([[0.0, -np.log(3.0)]])).data[0]
        np.testing.assert_allclose(probs, [0.75, 0.25], atol=1e-15)

    def test_matches_exp_normalize_oracle(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(0, 3, size=(50, 6))
        got = classify(Tensor(logits)).data
        np.testing.assert_allclose(got, reference_softmax(logits),
                                   atol=1e-12, rtol=0)

    def test_needs_two_classes(self):
        with pytest.raises(ConfigurationError):
            classify(Tensor(np.zeros((3, 1))))


class TestSharedCovarianceCorrespondence:
    def test_head_probabilities_equal_responsibilities(self):
        # One covariance for every class: determinant terms cancel and the
        # head's softmax IS the mixture responsibility vector.
        rng = np.random.default_rng(9)
        for _ in range(200):
            d = int(rng.integers(2, 6))
            k = int(rng.integers(2, 5))
            means = rng.uniform(-3, 3, (k, d))
            cov = random_spd(rng, d)
            x = rng.uniform(-3, 3, d)
            dists = [mahalanobis_distances(Tensor(x[None]), Tensor(means[j]),
                                           _fixed_reg(cov)).data[0]
                     for j in range(k)]
            probs = classify(Tensor(-np.array(dists)[None])).data[0]
            expected = gmm_responsibilities_shared(x, means, cov)
            np.testing.assert_allclose(probs, expected, atol=1e-10, rtol=0)


class TestMetricHeads:
    def test_l1_hand_case(self):
        logits = metric_logits("l1", Tensor([[0.0, 0.0]]), [Tensor([1.0, 2.0])])
        assert logits.data[0, 0] == -3.0

    def test_cosine_of_vector_with_itself(self):
        v = Tensor([0.6, -0.8])
        logits = metric_logits("cosine", Tensor([[0.6, -0.8]]), [v])
        assert logits.data[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_cosine_zero_norm_rejected(self):
        with pytest.raises(ConfigurationError):
            metric_logits("cosine", Tensor([[0.0, 0.0]]), [Tensor([1.0, 0.0])])

    def test_dot_logits_are_raw_similarities(self):
        logits = metric_logits("dot", Tensor([[2.0, 1.0]]), [Tensor([3.0, -1.0])])
        assert logits.data[0, 0] == 5.0

    def test_euclidean_reduction_probabilities_at_half_identity(self):
        # (I/2)^-1 doubles the quadratic form, cancelling the 1/2 factor:
        # the two heads' probabilities coincide to machine precision.
        rng = np.random.default_rng(10)
        means = [Tensor(rng.standard_normal(4)) for _ in range(3)]
        queries = Tensor(rng.standard_normal((20, 4)))
        reg = _fixed_reg(0.5 * np.eye(4))
        stats_means = means
        mah_logits = np.column_stack(
            [-mahalanobis_distances(queries, m, reg).data for m in stats_means])
        l2_logits = metric_logits("l2", queries, means).data
        p_mah = classify(Tensor(mah_logits)).data
        p_l2 = classify(Tensor(l2_logits)).data
        np.testing.assert_allclose(p_mah, p_l2, atol=1e-12, rtol=0)

    def test_euclidean_reduction_decisions_at_twice_identity(self):
        # Q = 2I rescales distances by 1/4: probabilities differ but the
        # argmax decision is identical.
        rng = np.random.default_rng(11)
        means = [Tensor(rng.standard_normal(3)) for _ in range(4)]
        queries = Tensor(rng.standard_normal((500, 3)))
        reg = _fixed_reg(2.0 * np.eye(3))
        mah_logits = np.column_stack(
            [-mahalanobis_distances(queries, m, reg).data for m in means])
        l2_logits = metric_logits("l2", queries, means).data
        assert np.array_equal(mah_logits.argmax(axis=1), l2_logits.argmax(axis=1))


class TestMahalanobisHead:
    def _episode(self, rng, way=3, shots=4, d=3, queries=5):
        sup = rng.standard_normal((way * shots, d))
        sup_y = np.repeat(np.arange(way), shots)
        qry = rng.standard_normal((way * queries, d))
        return Tensor(sup), sup_y, Tensor(qry)

    def test_head_has_zero_parameters(self):
        assert MahalanobisHead().parameters() == {}
        assert FixedMetricHead("l2").parameters() == {}

    def test_tr_equals_base_when_covariances_coincide_exactly(self):
        # All support embeddings identical: class and task covariances are
        # bit-exactly zero, so both variants see Q = beta I.
        sup = Tensor(np.tile([1.0, -2.0], (6, 1)))
        sup_y = np.repeat([0, 1, 2], 2)
        qry = Tensor(np.random.default_rng(12).standard_normal((4, 2)))
        base = MahalanobisHead(beta=0.8)(sup, sup_y, 3, qry)
        tr = MahalanobisHead(beta=0.8, task_reg=False)(sup, sup_y, 3, qry)
        np.testing.assert_array_equal(base.data, tr.data)

    def test_tr_equals_base_on_isotropic_simplex_episode(self):
        # Non-degenerate construction with class scatter == task scatter to
        # machine precision: equilateral-triangle means of radius 1/sqrt(3),
        # four points per class at mean +- sqrt(1.5) e_i.
        r = 1.0 / np.sqrt(3.0)
        angles = [np.pi / 2 + 2 * np.pi * k / 3 for k in range(3)]
        means = np.array([[r * np.cos(a), r * np.sin(a)] for a in angles])
        c = np.sqrt(1.5)
        offsets = np.array([[c, 0.0], [-c, 0.0], [0.0, c], [0.0, -c]])
        sup = np.concatenate([means[k] + offsets for k in range(3)])
        sup_y = np.repeat(np.arange(3), 4)
        stats, task = episode_stats(Tensor(sup), sup_y, 3)
        np.testing.assert_allclose(task.cov.data, np.eye(2), atol=1e-14)
        for s in stats:
            np.testing.assert_allclose(s.cov.data, np.eye(2), atol=1e-14)
        qry = Tensor(np.random.default_rng(13).standard_normal((6, 2)))
        base = classify(MahalanobisHead(beta=1.0)(Tensor(sup), sup_y, 3, qry)).data
        tr = classify(MahalanobisHead(beta=1.0, task_reg=False)(
            Tensor(sup), sup_y, 3, qry)).data
        np.testing.assert_allclose(base, tr, atol=1e-12, rtol=0)

    def test_tr_differs_on_generic_episode(self):
        rng = np.random.default_rng(14)
        sup, sup_y, qry = self._episode(rng)
        base = classify(MahalanobisHead()(sup, sup_y, 3, qry)).data
        tr = classify(MahalanobisHead(task_reg=False)(sup, sup_y, 3, qry)).data
        assert np.abs(base - tr).max() > 1e-6

    def test_beta_sweep_keeps_head_functional(self):
        rng = np.random.default_rng(15)
        sup, sup_y, qry = self._episode(rng, shots=1)  # rank-zero class covs
        for beta in (0.1, 1.0, 10.0):
            logits = MahalanobisHead(beta=beta)(sup, sup_y, 3, qry)
            assert np.isfinite(logits.data).all()

    def test_condition_numbers_recorded(self):
        rng = np.random.default_rng(16)
        sup, sup_y, qry = self._episode(rng)
        head = MahalanobisHead()
        head(sup, sup_y, 3, qry)
        assert len(head.last_condition_numbers) == 3
        assert all(c >= 1.0 for c in head.last_condition_numbers)


class TestAdaptiveLinearHead:
    def test_identity_like_init_reduces_to_dot_product(self):
        # fc1 = fc2 = 0 and fc3 = [I; 0] makes each weight row (mu_k, 0).
        rng = np.random.default_rng(17)
        head = AdaptiveLinearHead(3, rng)
        head.fc1.w.data = np.zeros((3, 3))
        head.fc1.b.data = np.zeros(3)
        head.fc2.w.data = np.zeros((3, 3))
        head.fc2.b.data = np.zeros(3)
        head.fc3.w.data = np.hstack([np.eye(3), np.zeros((3, 1))])
        head.fc3.b.data = np.zeros(4)
        sup = Tensor(rng.standard_normal((6, 3)))
        sup_y = np.repeat([0, 1], 3)
        qry = Tensor(rng.standard_normal((5, 3)))
        logits = head(sup, sup_y, 2, qry).data
        expected = metric_logits("dot", qry,
                                 class_means(sup, sup_y, 2)).data
        np.testing.assert_allclose(logits, expected, atol=1e-12, rtol=0)

    def test_has_trainable_parameters(self):
        head = AdaptiveLinearHead(4, np.random.default_rng(0))
        n = sum(p.data.size for p in head.parameters().values())
        assert n > 0

    def test_gradient_check(self):
        rng = np.random.default_rng(18)
        head = AdaptiveLinearHead(3, rng)
        sup = Tensor(rng.standard_normal((4, 3)))
        sup_y = np.array([0, 0, 1, 1])
        qry = Tensor(rng.standard_normal((3, 3)))
        from fewshot.autodiff import softmax_cross_entropy
        labels = np.array([0, 1, 0])

        def loss():
            return softmax_cross_entropy(head(sup, sup_y, 2, qry), labels)

        params = list(head.parameters().values())
        assert finite_difference_check(loss, params) <= 1e-4


class TestProjection:
    def test_identity_weights_on_positive_data_match_base_head(self):
        # ELU is the identity on positive inputs, so identity matrices give
        # an exactly transparent projection there.
        rng = np.random.default_rng(19)
        proj = Projection(3, 3, 3, rng)
        proj.w1.data = np.eye(3)
        proj.w2.data = np.eye(3)
        proj.w3.data = np.eye(3)
        inner = MahalanobisHead()
        wrapped = ProjectedHead(inner, proj)
        sup = Tensor(rng.uniform(0.5, 2.0, size=(8, 3)))
        sup_y = np.repeat([0, 1], 4)
        qry = Tensor(rng.uniform(0.5, 2.0, size=(5, 3)))
        np.testing.assert_array_equal(wrapped(sup, sup_y, 2, qry).data,
                                      MahalanobisHead()(sup, sup_y, 2, qry).data)

    def test_downstream_stats_use_projected_dimension(self):
        rng = np.random.default_rng(20)
        proj = Projection(4, 5, 2, rng)
        wrapped = ProjectedHead(MahalanobisHead(), proj)
        sup = Tensor(rng.standard_normal((6, 4)))
        sup_y = np.repeat([0, 1], 3)
        qry = Tensor(rng.standard_normal((3, 4)))
        logits = wrapped(sup, sup_y, 2, qry)
        assert logits.data.shape == (3, 2)

    def test_gradient_check_through_all_three_matrices(self):
        rng = np.random.default_rng(21)
        proj = Projection(3, 3, 3, rng)
        wrapped = ProjectedHead(FixedMetricHead("l2"), proj)
        sup = Tensor(rng.standard_normal((4, 3)))
        sup_y = np.array([0, 0, 1, 1])
        qry = Tensor(rng.standard_normal((3, 3)))
        from fewshot.autodiff import softmax_cross_entropy
        labels = np.array([0, 1, 1])

        def loss():
            return softmax_cross_entropy(wrapped(sup, sup_y, 2, qry), labels)

        assert finite_difference_check(
            loss, [proj.w1, proj.w2, proj.w3]) <= 1e-4
