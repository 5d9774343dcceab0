import math

import numpy as np
import pytest

from nightfuse.core import (
    IGNORE,
    AllIgnored,
    DimensionMismatch,
    GrayImage,
    InvalidParams,
    LabelMask,
    NonFiniteInput,
    SignedMap,
)
from nightfuse.model import (
    ModelDims,
    ModelParams,
    ce_loss,
    decode,
    encode,
    forward,
    fuse,
    init_params,
    sgd_step,
    weighted_loss,
)

from oracles import fd_gradient, o_forward, rel_err

DIMS = ModelDims(patch=3, feat=5, attn=4, classes=3)


def rand_problem(seed, h=4, w=5, dims=DIMS, ignore_frac=0.0):
    rng = np.random.default_rng(seed)
    image = GrayImage(w, h, rng.random((h, w)))
    aux = SignedMap(w, h, rng.uniform(-1, 1, (h, w)))
    labels = rng.integers(0, dims.classes, size=(h, w)).astype(np.int32)
    if ignore_frac > 0:
        labels[rng.random((h, w)) < ignore_frac] = IGNORE
    params = init_params(dims, seed + 1000)
    return image, aux, LabelMask(w, h, labels, dims.classes), params


class TestDimsAndParams:
    def test_patch_must_be_odd(self):
        with pytest.raises(InvalidParams):
            ModelDims(patch=4)

    def test_vector_length(self):
        d = ModelDims(3, 5, 4, 3)
        assert d.vector_length() == 2 * (9 * 5 + 5) + 2 * 5 * 4 + 5 * 3 + 3

    def test_vector_length_enforced(self):
        with pytest.raises(DimensionMismatch):
            ModelParams(DIMS, np.zeros(DIMS.vector_length() + 1))

    def test_params_must_be_finite(self):
        vec = np.zeros(DIMS.vector_length())
        vec[0] = np.inf
        with pytest.raises(NonFiniteInput):
            ModelParams(DIMS, vec)

    def test_init_seeded_and_bounded(self):
        a = init_params(DIMS, 7)
        b = init_params(DIMS, 7)
        c = init_params(DIMS, 8)
        assert np.array_equal(a.vector, b.vector)
        assert not np.array_equal(a.vector, c.vector)
        blocks = a.blocks()
        assert np.abs(blocks["w_image"]).max() <= 1 / math.sqrt(DIMS.d_in)
        assert np.abs(blocks["w_decoder"]).max() <= 1 / math.sqrt(DIMS.feat)


class TestEncode:
    def test_zero_params_zero_features(self):
        image, _, _, _ = rand_problem(0)
        out = encode(image, "image", ModelParams.zeros(DIMS))
        assert np.all(out == 0.0)

    def test_zero_input_gives_tanh_bias(self):
        blocks = {k: v.copy() for k, v in ModelParams.zeros(DIMS).blocks().items()}
        blocks["b_events"][:] = np.linspace(-1, 1, DIMS.feat)
        from nightfuse.model import _pack
        params = ModelParams(DIMS, _pack(DIMS, blocks))
        aux = SignedMap(4, 3, np.zeros(12))
        out = encode(aux, "events", params)
        assert np.allclose(out, np.tanh(np.linspace(-1, 1, DIMS.feat)), atol=1e-15)

    def test_matches_scalar_oracle(self):
        image, aux, _, params = rand_problem(1)
        _, probs = o_forward(image.data.tolist(), aux.data.tolist(), params.blocks(), DIMS.patch)
        out = encode(image, "image", params)
        # oracle features are implicit in its logits; check via decode instead
        logits = decode(out, params)
        expected = np.array([row for row in __import__("oracles").o_forward(
            image.data.tolist(), aux.data.tolist(), params.blocks(), DIMS.patch)[0]["image"]])
        assert np.allclose(logits.reshape(-1, DIMS.classes), expected, atol=1e-12)

    def test_nonfinite_input(self):
        with pytest.raises(NonFiniteInput):
            encode(np.array([[np.nan]]), "image", init_params(DIMS, 0))

    def test_unknown_encoder(self):
        with pytest.raises(InvalidParams):
            encode(np.zeros((2, 2)), "both", init_params(DIMS, 0))


class TestFuse:
    def test_equal_features_fixed_point(self):
        rng = np.random.default_rng(2)
        f = rng.normal(size=(3, 4, DIMS.feat))
        params = init_params(DIMS, 3)
        assert np.allclose(fuse(f, f, params), f, atol=1e-12)

    def test_zero_query_gives_mean(self):
        rng = np.random.default_rng(4)
        f1 = rng.normal(size=(2, 2, DIMS.feat))
        f2 = rng.normal(size=(2, 2, DIMS.feat))
        blocks = {k: v.copy() for k, v in init_params(DIMS, 5).blocks().items()}
        blocks["w_query"][:] = 0.0
        from nightfuse.model import _pack
        params = ModelParams(DIMS, _pack(DIMS, blocks))
        assert np.allclose(fuse(f1, f2, params), 0.5 * (f1 + f2), atol=1e-12)

    def test_convex_combination(self):
        rng = np.random.default_rng(6)
        f1 = rng.normal(size=(3, 3, DIMS.feat))
        f2 = rng.normal(size=(3, 3, DIMS.feat))
        fused = fuse(f1, f2, init_params(DIMS, 7))
        lo = np.minimum(f1, f2) - 1e-12
        hi = np.maximum(f1, f2) + 1e-12
        assert np.all((fused >= lo) & (fused <= hi))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            fuse(np.zeros((2, 2, DIMS.feat)), np.zeros((2, 3, DIMS.feat)), init_params(DIMS, 0))


class TestDecode:
    def test_zero_weights_bias_everywhere(self):
        blocks = {k: v.copy() for k, v in ModelParams.zeros(DIMS).blocks().items()}
        blocks["b_decoder"][:] = [0.5, -0.25, 1.0]
        from nightfuse.model import _pack
        params = ModelParams(DIMS, _pack(DIMS, blocks))
        out = decode(np.zeros((2, 2, DIMS.feat)), params)
        assert np.allclose(out, [0.5, -0.25, 1.0])

    def test_bias_argmax_constant(self):
        blocks = {k: v.copy() for k, v in ModelParams.zeros(DIMS).blocks().items()}
        blocks["b_decoder"][:] = [0.0, 3.0, 0.0]
        from nightfuse.model import _pack
        params = ModelParams(DIMS, _pack(DIMS, blocks))
        rng = np.random.default_rng(8)
        out = decode(rng.normal(size=(3, 3, DIMS.feat)), params)
        assert np.all(out.argmax(axis=2) == 1)


class TestForward:
    def test_zero_params_uniform(self):
        image, aux, _, _ = rand_problem(9)
        probs = forward(image, aux, ModelParams.zeros(DIMS))
        for head in (probs.p_image, probs.p_aux, probs.p_fused):
            assert np.allclose(head.probs, 1.0 / DIMS.classes, atol=1e-15)

    def test_matches_scalar_oracle(self):
        image, aux, _, params = rand_problem(10)
        probs = forward(image, aux, params)
        _, expected = o_forward(image.data.tolist(), aux.data.tolist(),
                                params.blocks(), DIMS.patch)
        for head, key in ((probs.p_image, "image"), (probs.p_aux, "aux"),
                          (probs.p_fused, "fused")):
            assert np.allclose(head.probs.reshape(-1, DIMS.classes),
                               np.array(expected[key]), atol=1e-12)

    def test_deterministic(self):
        image, aux, _, params = rand_problem(11)
        a = forward(image, aux, params)
        b = forward(image, aux, params)
        assert np.array_equal(a.p_fused.probs, b.p_fused.probs)


class TestCeLoss:
    def test_uniform_logits_ln_c(self):
        labels = LabelMask(4, 3, np.zeros((3, 4), dtype=np.int32), DIMS.classes)
        loss, _ = ce_loss(np.zeros((3, 4, DIMS.classes)), labels)
        assert loss == pytest.approx(math.log(DIMS.classes), abs=1e-12)

    def test_saturated_correct_prediction(self):
        h, w, c = 2, 3, 4
        rng = np.random.default_rng(12)
        y = rng.integers(0, c, size=(h, w)).astype(np.int32)
        logits = np.full((h, w, c), -30.0)
        for i in range(h):
            for j in range(w):
                logits[i, j, y[i, j]] = 30.0
        loss, _ = ce_loss(logits, LabelMask(w, h, y, c))
        assert loss < 1e-9

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        h, w, c = 3, 4, 3
        y = rng.integers(0, c, size=(h, w)).astype(np.int32)
        y[0, 0] = IGNORE
        labels = LabelMask(w, h, y, c)
        logits = rng.normal(size=(h, w, c))
        _, grad = ce_loss(logits, labels)

        def f(vec):
            return ce_loss(vec.reshape(h, w, c), labels)[0]

        fd = fd_gradient(f, logits.ravel()).reshape(h, w, c)
        assert rel_err(grad, fd) < 1e-5
        assert np.all(grad[0, 0] == 0.0)

    def test_all_ignored(self):
        labels = LabelMask(2, 1, np.full((1, 2), IGNORE, dtype=np.int32), 3)
        with pytest.raises(AllIgnored):
            ce_loss(np.zeros((1, 2, 3)), labels)

    def test_shift_invariance(self):
        rng = np.random.default_rng(14)
        h, w, c = 3, 3, 4
        y = rng.integers(0, c, size=(h, w)).astype(np.int32)
        labels = LabelMask(w, h, y, c)
        logits = rng.normal(size=(h, w, c))
        shifted = logits + rng.normal(size=(h, w, 1))
        l0, g0 = ce_loss(logits, labels)
        l1, g1 = ce_loss(shifted, labels)
        assert l0 == pytest.approx(l1, abs=1e-12)
        assert np.allclose(g0, g1, atol=1e-12)


class TestWeightedLoss:
    def test_all_lambdas_zero(self):
        image, aux, labels, params = rand_problem(15)
        loss, grad, _ = weighted_loss(image, aux, labels, params, 0.0, 0.0, 0.0)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_image_only_equals_ce(self):
        image, aux, labels, params = rand_problem(16)
        loss, _, heads = weighted_loss(image, aux, labels, params, 1.0, 0.0, 0.0)
        logits = decode(encode(image, "image", params), params)
        expected, _ = ce_loss(logits, labels)
        assert loss == pytest.approx(expected, abs=1e-12)
        assert heads["image"] == pytest.approx(expected, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        image, aux, labels, params = rand_problem(17, ignore_frac=0.15)
        lams = (0.5, 0.25, 0.5)
        _, grad, _ = weighted_loss(image, aux, labels, params, *lams)

        def f(vec):
            return weighted_loss(image, aux, labels, params.with_vector(vec), *lams)[0]

        fd = fd_gradient(f, params.vector)
        assert rel_err(grad, fd) < 1e-5

    def test_negative_lambda_rejected(self):
        image, aux, labels, params = rand_problem(18)
        with pytest.raises(InvalidParams):
            weighted_loss(image, aux, labels, params, -0.1, 0.0, 0.0)

    def test_single_pixel_sgd_descends_with_halving(self):
        image, aux, labels, params = rand_problem(19, h=1, w=1)
        loss0, grad, _ = weighted_loss(image, aux, labels, params, 0.5, 0.25, 0.5)
        lr = 1.0
        for _ in range(20):
            candidate = sgd_step(params, grad, lr)
            loss1, _, _ = weighted_loss(image, aux, labels, candidate, 0.5, 0.25, 0.5)
            if loss1 < loss0:
                break
            lr *= 0.5
        else:
            pytest.fail("no descent within 20 halvings")
