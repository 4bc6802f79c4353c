"""Generators and analytic oracles for the synthetic concept worlds."""

import numpy as np
import pytest
from scipy.special import logsumexp

from eraselab import toyworld as tw
from eraselab.errors import ConfigError, StructuralError


def make_mixture(means, sigma=0.1, weights=None):
    k = len(means)
    if weights is None:
        weights = tuple([1.0 / k] * k)
    return tw.PointMixtureSpec(means=tuple(means), sigma=sigma, weights=tuple(weights))


class TestConceptVocab:
    def test_dense_ids_and_null(self):
        vocab = tw.ConceptVocab.from_names(["a", "b", "c"])
        assert vocab.size == 3
        assert vocab.null_id == 3
        assert vocab.id_of("b") == 1
        assert vocab.name_of(3) == "<null>"

    def test_duplicate_names_rejected(self):
        with pytest.raises(ConfigError):
            tw.ConceptVocab.from_names(["a", "a"])

    def test_validate_id_null_gating(self):
        vocab = tw.ConceptVocab.from_names(["a", "b"])
        vocab.validate_id(2, allow_null=True)
        with pytest.raises(ConfigError):
            vocab.validate_id(2, allow_null=False)


class TestSpecs:
    def test_weights_must_normalize(self):
        with pytest.raises(ConfigError):
            tw.PointMixtureSpec(means=((0, 0),), sigma=0.1, weights=(0.5,))

    def test_sigma_positive(self):
        with pytest.raises(ConfigError):
            make_mixture([(0, 0)], sigma=0.0)

    def test_empty_means_rejected(self):
        with pytest.raises(ConfigError):
            tw.PointMixtureSpec(means=(), sigma=0.1, weights=())

    def test_unknown_shape_rejected(self):
        with pytest.raises(ConfigError):
            tw.GlyphSpec(shape_kinds=("hexagon",))


class TestGenPoints2d:
    def test_monte_carlo_mean(self):
        spec = make_mixture([(0.0, 0.0)], sigma=0.1)
        ds = tw.gen_points2d(spec, 10 ** 5, seed=11)
        bound = 3.0 * 0.1 / np.sqrt(10 ** 5)
        assert np.all(np.abs(ds.samples.mean(axis=0)) < bound)

    def test_seed_determinism(self):
        spec = make_mixture([(1, 0), (-1, 0)])
        a = tw.gen_points2d(spec, 50, seed=7)
        b = tw.gen_points2d(spec, 50, seed=7)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_zero_count_rejected(self):
        spec = make_mixture([(0, 0)])
        with pytest.raises(ConfigError):
            tw.gen_points2d(spec, 0, seed=0)

    def test_labels_balanced(self):
        spec = make_mixture([(1, 0), (-1, 0), (0, 1)])
        ds = tw.gen_points2d(spec, 40, seed=3)
        assert [int((ds.labels == i).sum()) for i in range(3)] == [40, 40, 40]


class TestGenGlyphs:
    def test_zero_jitter_matches_canonical_template(self):
        spec = tw.GlyphSpec(shape_kinds=tw.KNOWN_SHAPES, jitter_pos=0.0,
                            jitter_scale=0.0, intensity_low=1.0, intensity_high=1.0)
        ds = tw.gen_glyphs(spec, 3, seed=5)
        for cid in range(spec.n_concepts):
            tmpl = tw.canonical_template(spec, cid)
            for row in ds.of_concept(cid):
                np.testing.assert_allclose(row, tmpl)

    def test_pixel_range(self):
        spec = tw.default_glyph_vocab()[1]
        ds = tw.gen_glyphs(spec, 20, seed=9)
        assert ds.samples.min() >= 0.0 and ds.samples.max() <= 1.0

    def test_seed_determinism(self):
        spec = tw.default_glyph_vocab()[1]
        a = tw.gen_glyphs(spec, 8, seed=2)
        b = tw.gen_glyphs(spec, 8, seed=2)
        np.testing.assert_array_equal(a.samples, b.samples)


class TestMixtureScore:
    def test_single_component_closed_form(self):
        spec = make_mixture([(0.3, -0.7)], sigma=0.25)
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.uniform(-1, 1, size=2)
            expect = -(x - np.array([0.3, -0.7])) / 0.25 ** 2
            np.testing.assert_allclose(tw.mixture_log_density_grad(spec, x), expect,
                                       rtol=1e-12)

    def test_symmetric_midpoint_zero_along_axis(self):
        spec = make_mixture([(1.0, 0.0), (-1.0, 0.0)], sigma=0.4)
        grad = tw.mixture_log_density_grad(spec, np.array([0.0, 0.3]))
        assert abs(grad[0]) < 1e-14

    def test_matches_finite_differences(self):
        spec = make_mixture([(1, 0), (-0.4, 0.8), (0.2, -0.9)], sigma=0.3,
                            weights=(0.5, 0.2, 0.3))
        h = 1e-5
        rng = np.random.default_rng(42)

        def log_density(pt, alpha_bar):
            means, var = tw._noised_params(spec, alpha_bar)
            d2 = ((pt - means) ** 2).sum(axis=1)
            return logsumexp(np.log(spec.weights) - d2 / (2 * var))

        for alpha_bar in (None, 1.0, 0.7, 0.2):
            for _ in range(25):
                x = rng.uniform(-1.5, 1.5, size=2)
                grad = tw.mixture_log_density_grad(spec, x, alpha_bar=alpha_bar)
                num = np.zeros(2)
                for i in range(2):
                    e = np.zeros(2)
                    e[i] = h
                    num[i] = (log_density(x + e, alpha_bar)
                              - log_density(x - e, alpha_bar)) / (2 * h)
                scale = max(1.0, float(np.abs(num).max()))
                assert np.abs(grad - num).max() / scale <= 1e-6

    def test_alpha_bar_range_checked(self):
        spec = make_mixture([(0, 0)])
        with pytest.raises(ConfigError):
            tw.mixture_log_density_grad(spec, np.zeros(2), alpha_bar=0.0)
        with pytest.raises(ConfigError):
            tw.mixture_log_density_grad(spec, np.zeros(2), alpha_bar=1.2)


class TestBayesClassify:
    def test_component_mean_high_posterior(self):
        vocab, spec = tw.default_points_vocab()
        for k in range(spec.n_components):
            label, posterior = tw.bayes_classify(spec, spec.mean_array()[k])
            assert label == k
            assert posterior[k] > 0.99

    def test_posterior_normalized(self):
        spec = make_mixture([(1, 0), (-1, 0), (0, 1)], sigma=0.5)
        rng = np.random.default_rng(1)
        for _ in range(30):
            _, posterior = tw.bayes_classify(spec, rng.uniform(-2, 2, size=2))
            np.testing.assert_allclose(posterior.sum(), 1.0, atol=1e-12)

    def test_tie_breaks_to_lowest_id(self):
        spec = make_mixture([(1.0, 0.0), (-1.0, 0.0)], sigma=0.3)
        label, posterior = tw.bayes_classify(spec, np.array([0.0, 0.5]))
        np.testing.assert_allclose(posterior[0], posterior[1], atol=1e-12)
        assert label == 0

    def test_calibration_against_bayes_rate(self):
        vocab, spec = tw.default_points_vocab()
        rate = tw.bayes_rate_quadrature(spec)
        ds = tw.gen_points2d(spec, 1250, seed=17)   # 8 * 1250 = 10^4
        hits = sum(tw.bayes_classify(spec, x)[0] == l
                   for x, l in zip(ds.samples, ds.labels))
        assert abs(hits / len(ds.labels) - rate) <= 0.02


class TestTemplateClassify:
    def test_self_match(self):
        spec = tw.default_glyph_vocab()[1]
        for cid in range(spec.n_concepts):
            label, conf = tw.template_classify(spec, tw.canonical_template(spec, cid))
            assert label == cid
            assert conf >= 0.99

    def test_zero_image_degenerate(self):
        spec = tw.default_glyph_vocab()[1]
        label, conf = tw.template_classify(spec, np.zeros(256))
        assert conf == 0.0

    def test_confidence_decreases_with_noise(self):
        spec = tw.default_glyph_vocab()[1]
        tmpl = tw.canonical_template(spec, 0)
        rng = np.random.default_rng(23)
        noise = rng.standard_normal(256)
        confs = []
        for amp in (0.0, 0.3, 0.8, 2.0, 6.0):
            confs.append(tw.template_classify(spec, tmpl + amp * noise)[1])
        assert all(a > b for a, b in zip(confs, confs[1:]))

    def test_wrong_length_rejected(self):
        spec = tw.default_glyph_vocab()[1]
        with pytest.raises(StructuralError):
            tw.template_classify(spec, np.zeros(100))

    def test_jittered_data_recognized(self):
        vocab, spec = tw.default_glyph_vocab()
        ds = tw.gen_glyphs(spec, 40, seed=31)
        hits = sum(tw.template_classify(spec, x)[0] == l
                   for x, l in zip(ds.samples, ds.labels))
        assert hits / len(ds.labels) >= 0.97


class TestDatasetCsv:
    def test_round_trip(self, tmp_path):
        spec = make_mixture([(1, 0), (-1, 0)])
        ds = tw.gen_points2d(spec, 10, seed=4)
        path = tmp_path / "pts.csv"
        tw.dataset_to_csv(ds, path)
        back = tw.dataset_from_csv(path, mode="points2d", n_concepts=2)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_allclose(back.samples, ds.samples, rtol=0, atol=0)

    def test_header_checked(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("foo,bar\n1,2\n")
        with pytest.raises(ConfigError):
            tw.dataset_from_csv(path, mode="points2d", n_concepts=2)
