import numpy as np
import pytest

from destpred.geometry import PixelFrame, ego_to_pixel
from destpred.mixture import (
    LOG_PDF_FLOOR,
    GaussComponent,
    Mixture2D,
    MixtureError,
    component_log_density,
    log_pdf,
    log_pdf_many,
    nll_grad,
    nll_loss,
    render_heatmap,
    sample,
    top_k_truncate,
)

from oracles import (
    component_density,
    quadrature_mixture_mass,
    separated_modes_entropy,
)


def random_mixture(rng, n, kind):
    means = rng.uniform(-30.0, 30.0, (n, 2))
    if kind == "diag":
        scales = rng.uniform(0.3, 5.0, (n, 2))
    else:
        scales = np.zeros((n, 2, 2))
        scales[:, 0, 0] = rng.uniform(0.3, 4.0, n)
        scales[:, 1, 1] = rng.uniform(0.3, 4.0, n)
        scales[:, 1, 0] = rng.uniform(-2.0, 2.0, n)
    logw = rng.uniform(-3.0, 3.0, n)
    return Mixture2D(means, scales, logw)


class TestConstruction:
    def test_kind_inferred_from_scale_shape(self):
        diag = Mixture2D([[0, 0]], [[1, 1]], [0.0])
        chol = Mixture2D([[0, 0]], [[[1, 0], [0.5, 1]]], [0.0])
        assert diag.kind == "diag"
        assert chol.kind == "chol"

    def test_rejects_empty(self):
        with pytest.raises(MixtureError):
            Mixture2D(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(MixtureError):
            Mixture2D([[0, 0]], [[1, 0]], [0.0])

    def test_rejects_upper_triangle(self):
        with pytest.raises(MixtureError):
            Mixture2D([[0, 0]], [[[1, 0.5], [0, 1]]], [0.0])

    def test_rejects_non_finite(self):
        with pytest.raises(MixtureError):
            Mixture2D([[np.nan, 0]], [[1, 1]], [0.0])

    def test_weights_softmax(self):
        m = Mixture2D([[0, 0], [1, 1]], [[1, 1], [1, 1]], [0.0, 0.0])
        np.testing.assert_allclose(m.weights, [0.5, 0.5])
        assert m.weights.sum() == pytest.approx(1.0)

    def test_component_round_trip(self):
        rng = np.random.default_rng(3)
        m = random_mixture(rng, 4, "chol")
        back = Mixture2D.from_components(m.components())
        np.testing.assert_array_equal(back.means, m.means)
        np.testing.assert_array_equal(back.scales, m.scales)
        np.testing.assert_array_equal(back.log_weights, m.log_weights)

    def test_sigma_bounds_chol(self):
        m = Mixture2D([[0, 0]], [[[2.0, 0.0], [3.0, 4.0]]], [0.0])
        # marginal sigmas are the row norms of the Cholesky factor
        np.testing.assert_allclose(m.sigma_bounds(), [[2.0, 5.0]])


class TestDensity:
    def test_standard_normal_at_origin(self):
        m = Mixture2D([[0, 0]], [[1, 1]], [0.0])
        assert log_pdf(m, (0, 0)) == pytest.approx(-np.log(2 * np.pi))

    def test_matches_component_oracle(self):
        rng = np.random.default_rng(7)
        for kind in ("diag", "chol"):
            m = random_mixture(rng, 5, kind)
            pts = rng.uniform(-30, 30, (20, 2))
            got = np.exp(log_pdf_many(m, pts))
            w = m.weights
            want = [
                sum(
                    w[i] * component_density(p, m.means[i], m.scales[i])
                    for i in range(m.n_components)
                )
                for p in pts
            ]
            np.testing.assert_allclose(got, want, rtol=1e-10)

    def test_log_weight_shift_invariance(self):
        rng = np.random.default_rng(11)
        m = random_mixture(rng, 6, "diag")
        shifted = Mixture2D(m.means, m.scales, m.log_weights + 123.4)
        pts = rng.uniform(-30, 30, (10, 2))
        np.testing.assert_allclose(log_pdf_many(m, pts), log_pdf_many(shifted, pts))

    def test_far_point_floored_not_nan(self):
        m = Mixture2D([[0, 0]], [[0.5, 0.5]], [0.0])
        val = log_pdf(m, (1e6, 1e6))
        assert val == LOG_PDF_FLOOR
        assert np.isfinite(val)
        assert 0.0 <= np.exp(val) < 1e-300

    def test_rejects_non_finite_point(self):
        m = Mixture2D([[0, 0]], [[1, 1]], [0.0])
        with pytest.raises(MixtureError):
            log_pdf(m, (np.inf, 0.0))

    def test_component_log_density_shape(self):
        rng = np.random.default_rng(13)
        m = random_mixture(rng, 3, "chol")
        out = component_log_density(m, rng.uniform(-5, 5, (7, 2)))
        assert out.shape == (7, 3)


class TestNormalization:
    @pytest.mark.parametrize("kind", ["diag", "chol"])
    def test_quadrature_mass_is_one(self, kind):
        rng = np.random.default_rng(17)
        for _ in range(5):
            n = int(rng.integers(1, 9))
            m = random_mixture(rng, n, kind)
            mass = quadrature_mixture_mass(m.means, m.scales, m.weights)
            assert mass == pytest.approx(1.0, abs=1e-3)


class TestNll:
    def test_nll_is_mean_neg_log(self):
        rng = np.random.default_rng(19)
        m = random_mixture(rng, 4, "diag")
        t = rng.uniform(-20, 20, (3, 2))
        want = -np.mean([log_pdf(m, p) for p in t])
        assert nll_loss(m, t) == pytest.approx(want)

    def test_nll_rejects_empty(self):
        m = Mixture2D([[0, 0]], [[1, 1]], [0.0])
        with pytest.raises(MixtureError):
            nll_loss(m, np.zeros((0, 2)))


class TestNllGrad:
    @pytest.mark.parametrize("kind", ["diag", "chol"])
    @pytest.mark.parametrize("n_targets", [1, 3])
    def test_matches_central_differences(self, kind, n_targets):
        rng = np.random.default_rng(23)
        m = random_mixture(rng, 3, kind)
        idx = rng.integers(0, 3, n_targets)
        targets = m.means[idx] + rng.uniform(-4, 4, (n_targets, 2))
        grad = nll_grad(m, targets)

        def loss_with(means=None, scales=None, logw=None):
            return nll_loss(
                Mixture2D(
                    m.means if means is None else means,
                    m.scales if scales is None else scales,
                    m.log_weights if logw is None else logw,
                ),
                targets,
            )

        h = 1e-6
        for i in range(m.n_components):
            for j in range(2):
                mm = m.means.copy()
                mm[i, j] += h
                up = loss_with(means=mm)
                mm[i, j] -= 2 * h
                dn = loss_with(means=mm)
                assert grad.means[i, j] == pytest.approx((up - dn) / (2 * h), rel=1e-4, abs=1e-8)
            lw = m.log_weights.copy()
            lw[i] += h
            up = loss_with(logw=lw)
            lw[i] -= 2 * h
            dn = loss_with(logw=lw)
            assert grad.log_weights[i] == pytest.approx((up - dn) / (2 * h), rel=1e-4, abs=1e-8)
            coords = [(0,), (1,)] if kind == "diag" else [(0, 0), (1, 0), (1, 1)]
            for c in coords:
                sc = m.scales.copy()
                sc[(i, *c)] += h
                up = loss_with(scales=sc)
                sc[(i, *c)] -= 2 * h
                dn = loss_with(scales=sc)
                assert grad.scales[(i, *c)] == pytest.approx(
                    (up - dn) / (2 * h), rel=1e-4, abs=1e-8
                )


class TestSampling:
    def test_component_frequencies(self):
        m = Mixture2D(
            [[0.0, 0.0], [100.0, 0.0]], [[0.1, 0.1], [0.1, 0.1]], np.log([0.65, 0.35])
        )
        pts = sample(m, 20000, np.random.default_rng(5))
        frac_a = np.mean(pts[:, 0] < 50.0)
        # binomial standard error at n=20000 is ~0.0034; allow 4 sigma
        assert frac_a == pytest.approx(0.65, abs=0.014)

    def test_sample_moments_diag(self):
        m = Mixture2D([[3.0, -2.0]], [[1.5, 0.5]], [0.0])
        pts = sample(m, 50000, np.random.default_rng(6))
        np.testing.assert_allclose(pts.mean(axis=0), [3.0, -2.0], atol=0.03)
        np.testing.assert_allclose(pts.std(axis=0), [1.5, 0.5], atol=0.03)

    def test_sample_covariance_chol(self):
        l = np.array([[[1.0, 0.0], [0.8, 0.6]]])
        m = Mixture2D([[0.0, 0.0]], l, [0.0])
        pts = sample(m, 100000, np.random.default_rng(7))
        want = l[0] @ l[0].T
        got = np.cov(pts.T)
        np.testing.assert_allclose(got, want, atol=0.02)

    def test_rejects_zero_samples(self):
        m = Mixture2D([[0, 0]], [[1, 1]], [0.0])
        with pytest.raises(MixtureError):
            sample(m, 0, np.random.default_rng(0))

    def test_seed_reproducible(self):
        rng_a = np.random.default_rng(42)
        rng_b = np.random.default_rng(42)
        m = Mixture2D([[0, 0], [5, 5]], [[1, 1], [2, 2]], [0.0, -1.0])
        np.testing.assert_array_equal(sample(m, 100, rng_a), sample(m, 100, rng_b))

    def test_empirical_nll_matches_separated_mode_entropy(self):
        # two modes 60 m apart: overlap is negligible, so the analytic
        # decomposition H = sum w (H_gauss - log w) holds to high accuracy
        m = Mixture2D(
            [[0.0, 0.0], [60.0, 0.0]],
            [[1.5, 1.5], [1.5, 1.5]],
            np.log([0.65, 0.35]),
        )
        pts = sample(m, 10000, np.random.default_rng(8))
        empirical = -np.mean(log_pdf_many(m, pts))
        analytic = separated_modes_entropy(m.scales, m.weights)
        assert empirical == pytest.approx(analytic, abs=0.1)


class TestTopK:
    def test_kept_weights_renormalize(self):
        rng = np.random.default_rng(29)
        m = random_mixture(rng, 20, "diag")
        t = top_k_truncate(m, 5)
        assert t.n_components == 5
        assert t.weights.sum() == pytest.approx(1.0, abs=1e-9)

    def test_kept_set_is_k_largest(self):
        rng = np.random.default_rng(31)
        m = random_mixture(rng, 20, "diag")
        t = top_k_truncate(m, 7)
        kept = sorted(np.argsort(-m.weights, kind="stable")[:7])
        np.testing.assert_array_equal(t.means, m.means[kept])
        # relative weights among survivors are preserved
        w_orig = m.weights[kept]
        np.testing.assert_allclose(t.weights, w_orig / w_orig.sum())

    def test_k_equals_n_is_identity(self):
        rng = np.random.default_rng(37)
        m = random_mixture(rng, 6, "chol")
        t = top_k_truncate(m, 6)
        np.testing.assert_array_equal(t.means, m.means)
        np.testing.assert_array_equal(t.scales, m.scales)
        np.testing.assert_allclose(t.weights, m.weights)

    def test_ties_break_to_lower_index(self):
        m = Mixture2D(
            [[0, 0], [1, 1], [2, 2]], [[1, 1], [1, 1], [1, 1]], [0.0, 0.0, 0.0]
        )
        t = top_k_truncate(m, 2)
        np.testing.assert_array_equal(t.means, [[0, 0], [1, 1]])

    def test_out_of_range_k(self):
        m = Mixture2D([[0, 0]], [[1, 1]], [0.0])
        with pytest.raises(MixtureError):
            top_k_truncate(m, 0)
        with pytest.raises(MixtureError):
            top_k_truncate(m, 2)


class TestHeatmap:
    def test_peak_at_mode_and_unit_max(self):
        m = Mixture2D([[30.0, 10.0]], [[2.0, 2.0]], [0.0])
        grid = render_heatmap(m, (96, 144))
        assert grid.shape == (96, 144)
        assert grid.max() == pytest.approx(1.0)
        v, u = np.unravel_index(np.argmax(grid), grid.shape)
        frame = PixelFrame(width=144, height=96)
        want_uv = ego_to_pixel((30.0, 10.0), frame)
        assert abs(u + 0.5 - want_uv[0]) <= 1.0
        assert abs(v + 0.5 - want_uv[1]) <= 1.0

    def test_mass_ordering_between_modes(self):
        m = Mixture2D(
            [[20.0, 0.0], [80.0, 0.0]],
            [[2.0, 2.0], [2.0, 2.0]],
            np.log([0.8, 0.2]),
        )
        grid = render_heatmap(m, (96, 144))
        frame = PixelFrame(width=144, height=96)
        u1, v1 = ego_to_pixel((20.0, 0.0), frame).astype(int)
        u2, v2 = ego_to_pixel((80.0, 0.0), frame).astype(int)
        assert grid[v1, u1] > grid[v2, u2]
