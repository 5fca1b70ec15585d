import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fuzzyseg.densecrf import (
    DEFAULT_VECTORS,
    AnatomyCRF,
    ContextConstraintError,
    ContextLabelSet,
    CrfParams,
    GaussianFilter,
    brute_force_mean_field,
    build_context_map,
    context_slots,
    energy,
    exact_gaussian_filter,
    gaussian_filter_highdim,
    mean_field,
    solve_context_labels,
)


def random_instance(rng, h=8, w=8, r=5):
    prob = rng.dirichlet(np.ones(r), size=(h, w)).transpose(2, 0, 1)
    image = rng.uniform(0, 1, (1, h, w))
    context = build_context_map(prob.argmax(axis=0))
    return prob, image, context


class TestContextVectors:
    def test_tumor_distances(self):
        ctx = solve_context_labels()
        assert ctx.distance(6, 3) == pytest.approx(math.sqrt(30**2 + 26.5**2))
        assert round(ctx.distance(6, 3), 2) == 40.03
        assert round(ctx.distance(6, 2), 2) == round(ctx.distance(6, 4), 2) == 31.27
        assert round(ctx.distance(6, 1), 2) == 26.11
        assert round(ctx.distance(6, 5), 2) == 25.85

    def test_layer_distances(self):
        groups = ContextLabelSet().layer_distances()
        d1 = [round(d, 2) for _, d in groups[1]]
        assert d1 == [42.75, 40.02, 40.02, 42.48]
        assert [round(d, 2) for _, d in groups[2]] == [32.78, 30.0, 33.21]
        assert [round(d, 2) for _, d in groups[3]] == [23.58, 23.07]

    def test_orderings_hold(self):
        ctx = ContextLabelSet()
        assert ctx.violations() == []
        groups = ctx.layer_distances()
        assert min(d for _, d in groups[1]) > max(d for _, d in groups[2])
        assert min(d for _, d in groups[2]) > max(d for _, d in groups[3])

    def test_norm_not_squared_norm(self):
        # the target values 40 / 30 / 23 are plain norms of the vectors
        ctx = ContextLabelSet()
        assert abs(ctx.distance(6, 3) - 40.0) < 0.1
        assert ctx.distance(6, 3) ** 2 > 1000

    def test_infeasible_custom_set(self):
        vectors = [list(v) for v in DEFAULT_VECTORS]
        vectors[5] = [40.0, 0.0, 0.0]  # tumor on top of mammary
        with pytest.raises(ContextConstraintError, match="tumor"):
            solve_context_labels(vectors)

    def test_rederive(self):
        ctx = solve_context_labels(rederive=True, seed=3)
        assert ctx.violations() == []
        assert ctx.array().shape == (6, 3)

    def test_bad_shape(self):
        with pytest.raises(ValueError, match="six"):
            ContextLabelSet(((0, 0, 0),))


class TestContextMap:
    def test_all_background(self):
        np.testing.assert_array_equal(context_slots(np.zeros((4, 3), int)), 1)
        v = build_context_map(np.zeros((2, 2), int))
        np.testing.assert_array_equal(v[:, 0, 0], DEFAULT_VECTORS[0])

    def test_column_sequence(self):
        col = np.array([0, 0, 2, 3, 3, 4, 0, 0])[:, None]
        np.testing.assert_array_equal(context_slots(col)[:, 0], [1, 1, 2, 3, 3, 4, 5, 5])

    def test_tumor_anywhere(self):
        lab = np.zeros((5, 5), int)
        lab[0, 0] = lab[4, 4] = lab[2, 3] = 1
        slots = context_slots(lab)
        assert slots[0, 0] == slots[4, 4] == slots[2, 3] == 6

    def test_enclosed_background(self):
        col = np.array([0, 2, 0, 3, 0])[:, None]
        np.testing.assert_array_equal(context_slots(col)[:, 0], [1, 2, 1, 3, 5])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.int64, (6, 5), elements=st.integers(0, 4)))
    def test_every_vector_is_a_label(self, lab):
        v = build_context_map(lab).reshape(3, -1).T
        table = np.asarray(DEFAULT_VECTORS)
        assert all(any(np.array_equal(row, t) for t in table) for row in v)


class TestFilter:
    def test_identical_features(self):
        rng = np.random.default_rng(0)
        v = rng.uniform(0, 1, (50, 2))
        out = gaussian_filter_highdim(v, np.full((50, 3), 0.7))
        np.testing.assert_allclose(out, np.broadcast_to(v.sum(axis=0), v.shape), rtol=1e-2)

    def test_far_clusters(self):
        rng = np.random.default_rng(1)
        a = rng.normal(0, 0.5, (40, 3))
        b = rng.normal(0, 0.5, (40, 3)) + 60.0
        feats = np.concatenate([a, b])
        values = np.concatenate([np.zeros(40), np.ones(40)])
        out = gaussian_filter_highdim(values, feats)
        within = out[40:].min()
        assert np.abs(out[:40]).max() < 1e-6 * within

    @pytest.mark.parametrize("d", [2, 3, 5])
    def test_random_instance_accuracy(self, d):
        rng = np.random.default_rng(d)
        feats = rng.uniform(0, 4, (1024, d))
        values = rng.uniform(0, 1, (1024, 2))
        approx = gaussian_filter_highdim(values, feats)
        exact = exact_gaussian_filter(values, feats)
        assert np.linalg.norm(approx - exact) / np.linalg.norm(exact) < 1e-2

    def test_exact_filter_loop_oracle(self):
        rng = np.random.default_rng(2)
        f = rng.normal(size=(7, 2))
        v = rng.normal(size=7)
        loop = [sum(math.exp(-0.5 * float(((f[i] - f[j]) ** 2).sum())) * v[j] for j in range(7)) for i in range(7)]
        np.testing.assert_allclose(exact_gaussian_filter(v, f, block=3), loop, atol=1e-12)

    def test_dimension_guard(self):
        with pytest.raises(ValueError, match="dimension"):
            GaussianFilter(np.zeros((4, 9)))
        with pytest.raises(ValueError, match="finite"):
            GaussianFilter(np.full((2, 2), np.nan))


def pair_kernel(params, pi, pj, ii, ij, vi, vj):
    dp = (pi[0] - pj[0]) ** 2 + (pi[1] - pj[1]) ** 2
    di = sum((a - b) ** 2 for a, b in zip(ii, ij))
    dv = sum((a - b) ** 2 for a, b in zip(vi, vj))
    return (
        params.w1 * math.exp(-dp / (2 * params.sigma_alpha**2) - di / (2 * params.sigma_beta**2))
        + params.w2 * math.exp(-dp / (2 * params.sigma_gamma**2))
        + params.w3 * math.exp(-dp / (2 * params.sigma_tau**2) - dv / (2 * params.sigma_lambda**2))
    )


def loop_mean_field(prob, image, context, params):
    """Mean-field update written as explicit loops over pixel pairs."""
    r, h, w = prob.shape
    pix = [(y, x) for y in range(h) for x in range(w)]
    q = prob.reshape(r, -1).copy()
    unary = -np.log(np.maximum(prob.reshape(r, -1), 1e-12))
    for _ in range(params.iterations):
        new = np.empty_like(q)
        for i, pi in enumerate(pix):
            logits = []
            for label in range(r):
                msg = 0.0
                for j, pj in enumerate(pix):
                    if i != j:
                        k = pair_kernel(params, pi, pj, image[:, pi[0], pi[1]], image[:, pj[0], pj[1]],
                                        context[:, pi[0], pi[1]], context[:, pj[0], pj[1]])
                        msg += k * q[label, j]
                logits.append(-unary[label, i] + msg)
            e = np.exp(np.array(logits) - max(logits))
            new[:, i] = e / e.sum()
        q = new
    return q.reshape(prob.shape)


class TestMeanField:
    def test_zero_weights_identity(self):
        prob, image, context = random_instance(np.random.default_rng(0))
        params = CrfParams(w1=0, w2=0, w3=0)
        for fn in (mean_field, brute_force_mean_field):
            out = fn(prob, image, context, params)
            np.testing.assert_array_equal(out.prob, prob)

    def test_single_pixel_identity(self):
        prob = np.array([0.1, 0.2, 0.3, 0.15, 0.25]).reshape(5, 1, 1)
        out = brute_force_mean_field(prob, np.zeros((1, 1, 1)), np.zeros((3, 1, 1)))
        np.testing.assert_allclose(out.prob, prob, atol=1e-15)

    def test_two_pixel_hand_iteration(self):
        prob = np.array([[[0.8, 0.3]], [[0.2, 0.7]]])
        params = CrfParams(w1=0, w2=2.0, w3=0, sigma_gamma=1.0, iterations=2)
        k = 2.0 * math.exp(-0.5)
        q = prob[:, 0, :].copy()
        for _ in range(2):
            a = prob[:, 0, 0] * np.exp(k * q[:, 1])
            b = prob[:, 0, 1] * np.exp(k * q[:, 0])
            q = np.stack([a / a.sum(), b / b.sum()], axis=1)
        for fn in (mean_field, brute_force_mean_field):
            out = fn(prob, np.zeros((1, 1, 2)), None, params)
            np.testing.assert_allclose(out.prob[:, 0, :], q, atol=1e-12)

    def test_three_by_three_loop_table(self):
        rng = np.random.default_rng(5)
        prob, image, context = random_instance(rng, 3, 3)
        params = CrfParams(w1=1.0, w2=0.6, w3=0.4, sigma_alpha=2.0, sigma_beta=0.3, sigma_gamma=1.0,
                           sigma_tau=2.0, sigma_lambda=20.0, iterations=3)
        expected = loop_mean_field(prob, image, context, params)
        np.testing.assert_allclose(brute_force_mean_field(prob, image, context, params).prob, expected, atol=1e-12)
        fast = mean_field(prob, image, context, params).prob
        assert np.abs(fast - expected).max() < 1e-2

    def test_fast_matches_brute_small(self):
        rng = np.random.default_rng(6)
        prob, image, context = random_instance(rng, 16, 16)
        fast = mean_field(prob, image, context)
        brute = brute_force_mean_field(prob, image, context)
        assert np.mean(fast.labels == brute.labels) >= 0.99
        assert np.abs(fast.prob - brute.prob).max() <= 1e-2

    def test_two_kernel_model(self):
        rng = np.random.default_rng(7)
        prob, image, _ = random_instance(rng, 12, 12)
        params = CrfParams(w3=0.0)
        fast = mean_field(prob, image, None, params)
        brute = brute_force_mean_field(prob, image, None, params)
        assert np.abs(fast.prob - brute.prob).max() <= 1e-2
        # context features are ignored once the context weight is zero
        other = mean_field(prob, image, rng.uniform(0, 50, (3, 12, 12)), params)
        np.testing.assert_array_equal(other.prob, fast.prob)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_marginals_normalized(self, seed):
        prob, image, context = random_instance(np.random.default_rng(seed), 10, 9)
        out = mean_field(prob, image, context, CrfParams(iterations=4))
        np.testing.assert_allclose(out.prob.sum(axis=0), 1.0, atol=1e-9)
        assert len(out.max_change) == 4

    def test_context_required(self):
        prob, image, _ = random_instance(np.random.default_rng(8), 4, 4)
        with pytest.raises(ValueError, match="context features are required"):
            mean_field(prob, image, None, CrfParams(w3=1.0))

    def test_brute_force_size_guard(self):
        prob = np.full((5, 65, 64), 0.2)
        with pytest.raises(ValueError, match="limited to 4096"):
            brute_force_mean_field(prob, np.zeros((1, 65, 64)), None, CrfParams(w3=0))

    @pytest.mark.parametrize("field, value", [("w1", -1.0), ("sigma_beta", 0.0), ("iterations", 0)])
    def test_param_validation(self, field, value):
        with pytest.raises(ValueError):
            CrfParams(**{field: value}).validate()


class TestEnergy:
    def test_unary_only(self):
        prob, image, context = random_instance(np.random.default_rng(9), 3, 3)
        labels = np.random.default_rng(10).integers(0, 5, (3, 3))
        expected = -sum(math.log(prob[labels[i, j], i, j]) for i in range(3) for j in range(3))
        e = energy(labels, prob, image, context, CrfParams(w1=0, w2=0, w3=0))
        assert e == pytest.approx(expected, abs=1e-12)

    def test_uniform_labelling(self):
        prob, image, context = random_instance(np.random.default_rng(11), 3, 3)
        labels = np.full((3, 3), 2)
        assert energy(labels, prob, image, context) == pytest.approx(-np.log(prob[2]).sum(), abs=1e-12)

    def test_three_pixel_hand_sum(self):
        prob = np.array([[[0.6, 0.5, 0.1]], [[0.4, 0.5, 0.9]]])
        image = np.array([[[0.1, 0.2, 0.9]]])
        context = np.array([[[40.0, 40.0, 40.0]], [[0.0, 0.0, 30.0]], [[0.0, 0.0, 26.5]]])
        labels = np.array([[0, 0, 1]])
        params = CrfParams(w1=1.0, w2=0.5, w3=0.25, sigma_alpha=2.0, sigma_beta=0.5, sigma_gamma=1.0,
                           sigma_tau=3.0, sigma_lambda=20.0)
        unary = -(math.log(0.6) + math.log(0.5) + math.log(0.9))
        # differing pairs: (0, 2) and (1, 2), each counted in both orders
        d_v = 30.0**2 + 26.5**2
        k02 = (math.exp(-4 / 8 - 0.64 / 0.5) + 0.5 * math.exp(-4 / 2)
               + 0.25 * math.exp(-4 / 18 - d_v / 800))
        k12 = (math.exp(-1 / 8 - 0.49 / 0.5) + 0.5 * math.exp(-1 / 2)
               + 0.25 * math.exp(-1 / 18 - d_v / 800))
        expected = unary + 2 * (k02 + k12)
        assert energy(labels, prob, image, context, params) == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="do not match"):
            energy(np.zeros((2, 2), int), np.full((5, 3, 3), 0.2), np.zeros((1, 3, 3)))


class TestEstimator:
    def test_params_and_context_switch(self):
        crf = AnatomyCRF(w3=2.0, use_context=False)
        assert crf.get_params()["w3"] == 2.0
        assert crf.fit().params_.w3 == 0.0
        assert AnatomyCRF(w3=2.0).fit().params_.w3 == 2.0

    def test_predict_batch(self):
        rng = np.random.default_rng(12)
        probs, images = zip(*[random_instance(rng, 8, 8)[:2] for _ in range(3)])
        probs, images = np.stack(probs), np.stack(images)
        crf = AnatomyCRF().fit()
        out = crf.predict_proba(probs, images)
        assert out.shape == probs.shape
        np.testing.assert_array_equal(crf.predict(probs, images), out.argmax(axis=1))
        ref = mean_field(probs[1], images[1], build_context_map(probs[1].argmax(0)), crf.params_)
        np.testing.assert_array_equal(out[1], ref.prob)

    def test_batch_shape_error(self):
        with pytest.raises(ValueError, match="paired"):
            AnatomyCRF().predict_proba(np.zeros((2, 5, 4, 4)), np.zeros((3, 1, 4, 4)))
