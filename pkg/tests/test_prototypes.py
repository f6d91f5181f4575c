"""Prototype-core tests: k-means, EM fitting, scoring, deltas, outliers."""

import numpy as np
import pytest

from pcx import prototypes
from pcx.errors import InputError, NumericalError


def two_blob_points(rng, n=60, gap=10.0, dim=1, spread=0.01):
    a = rng.normal(0.0, spread, (n, dim))
    b = rng.normal(gap, spread, (n, dim))
    return np.concatenate([a, b])


class TestKmeans:
    def test_separated_blobs_recovered(self, rng):
        pts = two_blob_points(rng)
        centroids, labels = prototypes.kmeans(pts, 2, seed=0)
        lo, hi = sorted(float(c[0]) for c in centroids)
        assert abs(lo - 0.0) < 0.05 and abs(hi - 10.0) < 0.05
        assert len(np.unique(labels)) == 2

    def test_k1_is_global_mean(self, rng):
        pts = rng.standard_normal((40, 3))
        centroids, labels = prototypes.kmeans(pts, 1, seed=0)
        assert np.array_equal(centroids[0], pts.mean(axis=0))
        assert np.all(labels == 0)

    def test_k_equals_samples_zero_distance(self, rng):
        pts = rng.standard_normal((6, 2))
        centroids, labels = prototypes.kmeans(pts, 6, seed=0)
        assigned = centroids[labels]
        assert np.abs(assigned - pts).max() <= 1e-12

    def test_fewer_distinct_points_rejected(self):
        pts = np.zeros((5, 2))
        pts[0] = [1, 1]
        with pytest.raises(InputError):
            prototypes.kmeans(pts, 3, seed=0)

    def test_deterministic_given_seed(self, rng):
        pts = rng.standard_normal((50, 4))
        a, la = prototypes.kmeans(pts, 3, seed=7)
        b, lb = prototypes.kmeans(pts, 3, seed=7)
        assert np.array_equal(a, b) and np.array_equal(la, lb)


class TestFitGmm:
    def test_k1_closed_form_exact(self, rng):
        pts = rng.standard_normal((30, 4))
        reg = 1e-6
        model = prototypes.fit_gmm(pts, 1, seed=0, reg=reg)
        mu = pts.mean(axis=0)
        diff = pts - mu
        cov = diff.T @ diff / pts.shape[0]
        cov = cov + reg * (np.trace(cov) / 4) * np.eye(4)
        comp = model.components[0]
        assert comp.weight == 1.0
        assert np.array_equal(comp.mean, mu)
        assert np.array_equal(comp.covariance, cov)

    def test_two_cluster_recovery(self, rng):
        n = 300
        a = rng.normal(0.0, 1.0, (n, 2))
        b = rng.normal(8.0, 1.0, (2 * n, 2))
        model = prototypes.fit_gmm(np.concatenate([a, b]), 2, seed=1)
        means = sorted(model.components, key=lambda c: float(c.mean[0]))
        se = 1.0 / np.sqrt(n)
        assert np.abs(means[0].mean - 0.0).max() < 3 * se
        assert np.abs(means[1].mean - 8.0).max() < 3 * se / np.sqrt(2)
        weights = sorted(c.weight for c in model.components)
        assert abs(weights[0] - 1 / 3) < 0.05 and abs(weights[1] - 2 / 3) < 0.05

    def test_weights_sum_to_one_and_cholesky_valid(self, rng):
        for k in (1, 2, 3):
            pts = rng.standard_normal((60, 3))
            model = prototypes.fit_gmm(pts, k, seed=2)
            assert abs(sum(c.weight for c in model.components) - 1.0) <= 1e-9
            for c in model.components:
                assert np.allclose(c.chol @ c.chol.T, c.covariance, atol=1e-5)

    def test_monotone_log_likelihood(self, rng):
        for trial in range(10):
            k = int(rng.integers(1, 4))
            pts = rng.standard_normal((50 + 10 * trial, int(rng.integers(2, 5))))
            model = prototypes.fit_gmm(pts, k, seed=trial)
            hist = model.metadata["log_likelihood_history"]
            for prev, cur in zip(hist[:-1], hist[1:]):
                assert cur >= prev - 1e-7

    def test_degenerate_data_single_point_model(self):
        pts = np.ones((10, 3))
        model = prototypes.fit_gmm(pts, 3, seed=0, reg=1e-6)
        assert len(model.components) == 1
        assert "degenerate-data" in model.metadata["warnings"]
        assert np.allclose(model.components[0].covariance, 1e-6 * np.eye(3))

    def test_too_few_samples_rejected(self, rng):
        with pytest.raises(InputError):
            prototypes.fit_gmm(rng.standard_normal((2, 2)), 3, seed=0)

    def test_diagonal_fallback_when_data_scarce(self, rng):
        pts = rng.standard_normal((10, 8))  # fewer than 2*m samples
        model = prototypes.fit_gmm(pts, 1, seed=0)
        assert model.metadata["covariance_type"] == "diag"
        cov = model.components[0].covariance
        off = cov - np.diag(np.diag(cov))
        assert np.abs(off).max() == 0.0

    def test_bitwise_deterministic(self, rng):
        pts = rng.standard_normal((80, 3))
        a = prototypes.fit_gmm(pts, 2, seed=9)
        b = prototypes.fit_gmm(pts, 2, seed=9)
        for ca, cb in zip(a.components, b.components):
            assert ca.weight == cb.weight
            assert np.array_equal(ca.mean, cb.mean)
            assert np.array_equal(ca.covariance, cb.covariance)


class TestLogLikelihood:
    def test_standard_normal_peak(self):
        comp = prototypes.PrototypeComponent.create(1.0, np.zeros(1), np.eye(1))
        model = prototypes.PrototypeModel(0, -1, "lrp-eps", (comp,))
        got = prototypes.log_likelihood_class(model, np.zeros(1))
        assert abs(got - np.log(1.0 / np.sqrt(2 * np.pi))) <= 1e-9

    def test_single_component_equals_gaussian_logpdf(self, rng):
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        comp = prototypes.PrototypeComponent.create(1.0, np.array([1.0, -1.0]), cov)
        model = prototypes.PrototypeModel(0, -1, "lrp-eps", (comp,))
        v = rng.standard_normal(2)
        assert abs(prototypes.log_likelihood_class(model, v) - comp.log_pdf(v)) <= 1e-12

    def test_two_component_matches_direct_density_sum(self):
        # direct summation of the densities, no log-sum-exp
        c1 = prototypes.PrototypeComponent.create(0.3, np.array([0.0]), np.array([[1.0]]))
        c2 = prototypes.PrototypeComponent.create(0.7, np.array([3.0]), np.array([[4.0]]))
        model = prototypes.PrototypeModel(0, -1, "lrp-eps", (c1, c2))
        for v in (-1.0, 0.0, 1.5, 3.0, 10.0):
            direct = 0.3 * np.exp(-0.5 * v**2) / np.sqrt(2 * np.pi) + 0.7 * np.exp(
                -0.5 * (v - 3.0) ** 2 / 4.0
            ) / np.sqrt(2 * np.pi * 4.0)
            got = prototypes.log_likelihood_class(model, np.array([v]))
            assert abs(got - np.log(direct)) <= 1e-10

    def test_dimension_mismatch(self):
        comp = prototypes.PrototypeComponent.create(1.0, np.zeros(2), np.eye(2))
        model = prototypes.PrototypeModel(0, -1, "lrp-eps", (comp,))
        with pytest.raises(InputError):
            prototypes.log_likelihood_class(model, np.zeros(3))

    def test_density_integrates_to_one_1d(self, rng):
        pts = np.concatenate([rng.normal(0, 1, (60, 1)), rng.normal(6, 2, (40, 1))])
        model = prototypes.fit_gmm(pts, 2, seed=0)
        lo = min(float(c.mean[0]) - 10 * np.sqrt(c.covariance[0, 0]) for c in model.components)
        hi = max(float(c.mean[0]) + 10 * np.sqrt(c.covariance[0, 0]) for c in model.components)
        xs = np.linspace(lo, hi, 200_001)
        pdf = np.exp([prototypes.log_likelihood_class(model, np.array([x])) for x in xs[::100]])
        integral = np.trapezoid(pdf, xs[::100])
        assert abs(integral - 1.0) <= 1e-3

    def test_density_integrates_to_one_2d(self, rng):
        pts = rng.multivariate_normal([1.0, -2.0], [[2.0, 0.8], [0.8, 1.0]], 200)
        model = prototypes.fit_gmm(pts, 2, seed=3)
        sig = max(np.sqrt(np.diag(c.covariance)).max() for c in model.components)
        mid = np.mean([c.mean for c in model.components], axis=0)
        half = 10 * sig + 5
        grid = np.linspace(-half, half, 401)
        xx, yy = np.meshgrid(grid + mid[0], grid + mid[1], indexing="ij")
        vals = np.empty(xx.shape)
        for i in range(xx.shape[0]):
            for j in range(xx.shape[1]):
                vals[i, j] = prototypes.log_likelihood_class(
                    model, np.array([xx[i, j], yy[i, j]])
                )
        pdf = np.exp(vals)
        integral = np.trapezoid(np.trapezoid(pdf, grid, axis=1), grid)
        assert abs(integral - 1.0) <= 1e-3


class TestAssignPrototype:
    def _two_models(self):
        mk = prototypes.PrototypeComponent.create
        model0 = prototypes.PrototypeModel(
            0, -1, "m", (mk(0.5, np.array([0.0, 0.0]), np.eye(2)),
                         mk(0.5, np.array([4.0, 0.0]), np.eye(2)))
        )
        model1 = prototypes.PrototypeModel(
            1, -1, "m", (mk(1.0, np.array([0.0, 9.0]), np.eye(2)),)
        )
        return {0: model0, 1: model1}

    def test_exact_mean_wins(self):
        models = self._two_models()
        assert prototypes.assign_prototype(models, np.array([4.0, 0.0])) == (0, 1)
        assert prototypes.assign_prototype(models, np.array([0.0, 9.0])) == (1, 0)

    def test_midpoint_tie_breaks_to_first_component(self):
        models = self._two_models()
        assert prototypes.assign_prototype(models, np.array([2.0, 0.0])) == (0, 0)

    def test_matches_brute_force(self, rng):
        mk = prototypes.PrototypeComponent.create
        models = {}
        for cls in range(3):
            comps = []
            weights = rng.dirichlet(np.ones(2))
            for i in range(2):
                mean = rng.standard_normal(3) * 3
                a = rng.standard_normal((3, 3)) * 0.4
                cov = a @ a.T + np.eye(3)
                comps.append(mk(weights[i], mean, cov))
            models[cls] = prototypes.PrototypeModel(cls, -1, "m", tuple(comps))
        for _ in range(25):
            v = rng.standard_normal(3) * 4
            got = prototypes.assign_prototype(models, v)
            scores = {
                (cls, i): np.log(c.weight) + c.log_pdf(v)
                for cls, m in models.items()
                for i, c in enumerate(m.components)
            }
            want = max(sorted(scores), key=lambda key: scores[key])
            assert got == want

    def test_unweighted_variant_drops_mixture_weight(self):
        mk = prototypes.PrototypeComponent.create
        model = prototypes.PrototypeModel(
            0, -1, "m",
            (mk(0.99, np.array([0.0]), np.eye(1)), mk(0.01, np.array([2.0]), np.eye(1))),
        )
        v = np.array([1.4])
        assert prototypes.assign_prototype({0: model}, v, weighted=True) == (0, 0)
        assert prototypes.assign_prototype({0: model}, v, weighted=False) == (0, 1)

    def test_permutation_invariance(self, rng):
        mk = prototypes.PrototypeComponent.create
        mean = rng.standard_normal(4)
        a = rng.standard_normal((4, 4)) * 0.3
        cov = a @ a.T + np.eye(4)
        other = mk(0.5, mean + 3, cov)
        models = {0: prototypes.PrototypeModel(0, -1, "m", (mk(0.5, mean, cov), other))}
        perm = rng.permutation(4)
        pmodels = {
            0: prototypes.PrototypeModel(
                0, -1, "m",
                tuple(
                    mk(c.weight, c.mean[perm], c.covariance[np.ix_(perm, perm)])
                    for c in models[0].components
                ),
            )
        }
        for _ in range(10):
            v = rng.standard_normal(4) * 2
            assert prototypes.assign_prototype(models, v) == prototypes.assign_prototype(
                pmodels, v[perm]
            )


class TestDistances:
    def test_scaled_axis(self):
        comp = prototypes.PrototypeComponent.create(
            1.0, np.zeros(2), np.diag([4.0, 1.0])
        )
        assert abs(prototypes.mahalanobis(comp, np.array([2.0, 0.0])) - 1.0) <= 1e-12

    def test_identity_covariance_matches_euclidean(self, rng):
        comp = prototypes.PrototypeComponent.create(1.0, rng.standard_normal(3), np.eye(3))
        v = rng.standard_normal(3)
        assert abs(
            prototypes.mahalanobis(comp, v) - prototypes.euclidean(comp, v)
        ) <= 1e-12

    def test_zero_at_mean(self):
        comp = prototypes.PrototypeComponent.create(1.0, np.ones(2), np.eye(2) * 2)
        assert prototypes.mahalanobis(comp, np.ones(2)) == 0.0
        assert prototypes.euclidean(comp, np.ones(2)) == 0.0


class TestExplainDelta:
    def test_at_mean_everything_similar(self):
        comp = prototypes.PrototypeComponent.create(1.0, np.ones(3), np.eye(3))
        expl = prototypes.explain_delta(comp, np.ones(3))
        assert expl.total == 0.0
        assert set(expl.labels) == {"similar"}

    def test_diagonal_covariance_has_no_inter_terms(self):
        comp = prototypes.PrototypeComponent.create(
            1.0, np.zeros(2), np.diag([2.0, 0.5])
        )
        v = np.array([1.0, -0.5])
        expl = prototypes.explain_delta(comp, v, similar_band=0.1)
        assert np.abs(expl.inter).max() <= 1e-12
        want = 1.0 / 2.0 + 0.25 / 0.5
        assert abs(expl.total - want) <= 1e-12
        assert expl.labels == ("overused", "underused")

    def test_correlated_2x2_matches_hand_inverse(self):
        # covariance [[1, .5], [.5, 1]]; inverse = (1/.75) * [[1, -.5], [-.5, 1]]
        comp = prototypes.PrototypeComponent.create(
            1.0, np.zeros(2), np.array([[1.0, 0.5], [0.5, 1.0]])
        )
        delta = np.array([0.3, -0.2])
        expl = prototypes.explain_delta(comp, delta)
        inv = np.array([[1.0, -0.5], [-0.5, 1.0]]) / 0.75
        assert np.allclose(expl.intra, [delta[0] ** 2 * inv[0, 0], delta[1] ** 2 * inv[1, 1]])
        assert np.allclose(expl.inter[0, 1], delta[0] * inv[0, 1] * delta[1])
        assert abs(expl.total - delta @ inv @ delta) <= 1e-12

    def test_decomposition_sums_to_squared_mahalanobis(self, rng):
        a = rng.standard_normal((4, 4)) * 0.5
        cov = a @ a.T + np.eye(4)
        comp = prototypes.PrototypeComponent.create(1.0, rng.standard_normal(4), cov)
        v = rng.standard_normal(4)
        expl = prototypes.explain_delta(comp, v)
        total = expl.intra.sum() + expl.inter.sum()
        assert abs(total - expl.total) <= 1e-6 * max(abs(expl.total), 1e-12)
        assert abs(expl.total - prototypes.mahalanobis(comp, v) ** 2) <= 1e-6 * max(
            abs(expl.total), 1e-12
        )
        assert np.all(expl.intra >= 0)


class TestClassSimilarity:
    def _model(self, cls, mean):
        comp = prototypes.PrototypeComponent.create(1.0, np.asarray(mean, float), np.eye(len(mean)))
        return prototypes.PrototypeModel(cls, -1, "m", (comp,))

    def test_identical_and_orthogonal(self):
        models = [self._model(0, [1, 0]), self._model(1, [1, 0]), self._model(2, [0, 1])]
        mat = prototypes.class_similarity_matrix(models)
        assert mat[0, 1] == pytest.approx(1.0)
        assert mat[0, 2] == pytest.approx(0.0)
        assert np.array_equal(np.diag(mat), np.ones(3))
        assert np.array_equal(mat, mat.T)

    def test_hand_cosine(self):
        models = [self._model(0, [1, 0]), self._model(1, [1, 1])]
        mat = prototypes.class_similarity_matrix(models)
        assert mat[0, 1] == pytest.approx(1 / np.sqrt(2))

    def test_zero_norm_mean_rejected(self):
        models = [self._model(0, [0, 0])]
        with pytest.raises(NumericalError):
            prototypes.class_similarity_matrix(models)


class TestOutlierClusters:
    def test_percentile_flags_expected_fraction(self, rng):
        pts = rng.standard_normal((500, 3))
        model = prototypes.fit_gmm(pts, 1, seed=0)
        result = prototypes.outlier_clusters(pts, model, percentile=1.0, k=1, seed=0)
        flagged = sum(len(c) for c in result.clusters)
        assert abs(flagged - 5) <= 1

    def test_planted_blob_flagged_and_grouped(self, rng):
        base = rng.standard_normal((480, 4))
        blob = rng.standard_normal((20, 4)) * 0.2 + 8.0
        pts = np.concatenate([base, blob])
        model = prototypes.fit_gmm(pts[:480], 1, seed=0)
        result = prototypes.outlier_clusters(pts, model, percentile=5.0, k=2, seed=0)
        flagged = set(i for c in result.clusters for i in c)
        assert set(range(480, 500)) <= flagged
        blob_cluster = [c for c in result.clusters if 480 in c]
        assert len(blob_cluster) == 1
        assert set(range(480, 500)) <= set(blob_cluster[0])

    def test_percentile_zero_empty(self, rng):
        pts = rng.standard_normal((50, 2))
        model = prototypes.fit_gmm(pts, 1, seed=0)
        result = prototypes.outlier_clusters(pts, model, percentile=0, k=2, seed=0)
        assert result.clusters == ()

    def test_fewer_outliers_than_k_returns_ungrouped(self, rng):
        pts = rng.standard_normal((40, 2))
        model = prototypes.fit_gmm(pts, 1, seed=0)
        result = prototypes.outlier_clusters(pts, model, percentile=5.0, k=10, seed=0)
        assert result.ungrouped
