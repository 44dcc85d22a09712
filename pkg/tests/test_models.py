import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cafv.autodiff import ParamStore, RngStream
from cafv.models import (
    ContextEmbedding,
    ContextError,
    ContextInterval,
    Critic,
    Generator,
    ModelBundle,
    SoftmaxClassifier,
    context_weight,
    embed_context,
    predict_from_logits,
)


def test_interval_reverse_and_zero():
    assert ContextInterval(3).reverse() == ContextInterval(-3)
    with pytest.raises(ContextError):
        ContextInterval(0)


def test_one_hot_embedding():
    emb = ContextEmbedding((-2, -1, 1, 2))
    np.testing.assert_array_equal(embed_context(emb, ContextInterval(1)), [0, 0, 1, 0])
    with pytest.raises(ContextError):
        embed_context(emb, ContextInterval(3))


def test_learned_table_rows():
    emb = ContextEmbedding((-1, 1), mode="learned-table", table_dim=4)
    store = ParamStore()
    emb.init(store, RngStream(0, "init"))
    a = embed_context(emb, ContextInterval(1), store)
    np.testing.assert_array_equal(a, embed_context(emb, ContextInterval(1), store))
    np.testing.assert_array_equal(a, store["emb.table"][1])
    assert a.shape == (4,)


def test_context_weight_cases():
    wbar = np.eye(2)
    v = np.zeros((2, 2, 2))
    v[:, :, 0] = [[0.5, 0.0], [0.0, -0.5]]
    v[:, :, 1] = [[9.0, 9.0], [9.0, 9.0]]
    np.testing.assert_array_equal(context_weight(wbar, v, [0, 0]), wbar)
    np.testing.assert_array_equal(context_weight(wbar, v, [1, 0]), [[1.5, 0.0], [0.0, 0.5]])
    np.testing.assert_array_equal(context_weight(wbar, v, [0, 1]), wbar + v[:, :, 1])
    with pytest.raises(ValueError):
        context_weight(wbar, v, [1, 0, 0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_context_weight_is_affine_in_e(seed, a):
    rs = RngStream(seed, "affine")
    wbar, v = rs.normal((3, 4)), rs.normal((3, 4, 2))
    e1, e2 = rs.normal((2,)), rs.normal((2,))
    lin = lambda e: context_weight(wbar, v, e) - wbar
    np.testing.assert_allclose(lin(e1 + e2), lin(e1) + lin(e2), atol=1e-12)
    np.testing.assert_allclose(lin(a * e1), a * lin(e1), atol=1e-12)


def make_generator(seed=0, d=4, dz=3, h=5):
    emb = ContextEmbedding((-1, 1))
    gen = Generator("g", d, dz, h, emb)
    store = ParamStore()
    gen.init(store, RngStream(seed, "init"))
    return gen, store


def test_generator_zero_weights_give_zero():
    gen, store = make_generator()
    for n in gen.param_names():
        store.set(n, np.zeros_like(store[n]))
    out = gen(store, np.ones(4), np.ones(3), ContextInterval(1))
    np.testing.assert_array_equal(out, np.zeros((1, 4)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_generator_output_non_negative(seed):
    gen, store = make_generator(seed)
    rs = RngStream(seed, "x")
    out = gen(store, 3 * rs.normal((6, 4)), rs.normal((6, 3)), ContextInterval(-1))
    assert out.shape == (6, 4)
    assert out.min() >= 0


def test_generator_deterministic_and_checks_dims():
    gen, store = make_generator(2)
    f, z = np.arange(4.0), np.ones(3)
    assert gen(store, f, z, ContextInterval(1)).tobytes() == gen(store, f, z, ContextInterval(1)).tobytes()
    with pytest.raises(ValueError):
        gen(store, np.ones(5), z, ContextInterval(1))
    with pytest.raises(ContextError):
        gen(store, f, z, ContextInterval(2))


def test_generator_conditioning_changes_output():
    gen, store = make_generator(1)
    store.set("g.b", np.ones(4))
    v = np.zeros_like(store["g.V"])
    v[:, :, 0] = 1.0
    v[:, :, 1] = -1.0
    store.set("g.V", v)
    f, z = np.ones(4), np.zeros(3)
    assert not np.array_equal(gen(store, f, z, ContextInterval(-1)), gen(store, f, z, ContextInterval(1)))


def test_cycle_composability():
    gen_xy, store = make_generator(3)
    gen_yx = Generator("h", 4, 3, 5, gen_xy.emb)
    gen_yx.init(store, RngStream(4, "init"))
    y = gen_xy(store, np.ones((2, 4)), np.zeros((2, 3)), ContextInterval(1))
    x = gen_yx(store, y, np.zeros((2, 3)), ContextInterval(1).reverse())
    assert x.shape == (2, 4)


def hand_critic(w1, w2=3.0):
    c = Critic("d", 2, 1, ContextEmbedding(()))
    store = ParamStore()
    store.add("d.W1", np.array([w1], dtype=float))
    store.add("d.b1", np.zeros(1))
    store.add("d.w2", np.array([[w2]]))
    store.add("d.b2", np.zeros(1))
    return c, store


def test_critic_hand_values():
    c, store = hand_critic([2.0, -1.0])
    assert c(store, [1.0, 0.0], None)[0] == pytest.approx(6.0, abs=1e-15)
    np.testing.assert_allclose(c.input_gradient(store, [1.0, 0.0], None), [[6.0, -3.0]], atol=1e-15)
    np.testing.assert_allclose(c.input_gradient(store, [-1.0, 0.0], None), [[1.2, -0.6]], atol=1e-15)


def test_critic_zero_weights():
    c = Critic("d", 3, 4, ContextEmbedding((-1, 1)))
    store = ParamStore()
    c.init(store, RngStream(0, "init"))
    for n in c.param_names():
        store.set(n, np.zeros_like(store[n]))
    assert c(store, np.ones(3), ContextInterval(1))[0] == 0.0


def test_critic_context_matters():
    c = Critic("d", 3, 4, ContextEmbedding((-1, 1)))
    store = ParamStore()
    c.init(store, RngStream(0, "init"))
    w1 = store["d.W1"].copy()
    w1[:, 3], w1[:, 4] = 1.0, -1.0
    store.set("d.W1", w1)
    f = np.ones(3)
    assert c(store, f, ContextInterval(1))[0] != c(store, f, ContextInterval(-1))[0]


@pytest.mark.parametrize("seed", range(10))
def test_critic_input_gradient_matches_finite_differences(seed):
    c = Critic("d", 4, 6, ContextEmbedding((-1, 1)))
    store = ParamStore()
    c.init(store, RngStream(seed, "init"))
    store.set("d.b1", RngStream(seed, "b").normal((6,)))
    f = RngStream(seed, "f").normal((4,))
    eps = 1e-5
    num = np.array([(c(store, f + eps * e, ContextInterval(1))[0] - c(store, f - eps * e, ContextInterval(1))[0])
                    / (2 * eps) for e in np.eye(4)])
    np.testing.assert_allclose(c.input_gradient(store, f, ContextInterval(1))[0], num, rtol=1e-6)


def test_classifier_uniform_and_known_softmax():
    cls = SoftmaxClassifier("cls", 3, (10, 11, 12, 13))
    store = ParamStore()
    cls.init(store)
    np.testing.assert_allclose(cls.proba(store, np.ones(3)), [[0.25] * 4], atol=1e-15)
    two = SoftmaxClassifier("two", 1, (1, 2))
    s2 = ParamStore()
    s2.add("two.W", np.zeros((1, 2)))
    s2.add("two.b", np.log([1.0, 3.0]))
    np.testing.assert_allclose(two.proba(s2, [0.0]), [[0.25, 0.75]], atol=1e-15)
    with pytest.raises(ValueError):
        cls.proba(store, np.ones(4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-100, 100), st.floats(0.01, 100))
def test_classifier_rows_sum_and_predict_invariance(seed, shift, scale):
    rs = RngStream(seed, "cls")
    cls = SoftmaxClassifier("cls", 3, (5, 7, 9))
    store = ParamStore()
    cls.init(store, rs)
    f = rs.normal((4, 3))
    p = cls.proba(store, f)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    logits = cls.logits(store, f)
    base = predict_from_logits(logits, cls.labels)
    np.testing.assert_array_equal(predict_from_logits(logits + shift, cls.labels), base)
    np.testing.assert_array_equal(predict_from_logits(logits * scale, cls.labels), base)


def test_predict_argmax_and_tie_break():
    assert predict_from_logits(np.log([[0.1, 0.7, 0.2]]), [14, 16, 17])[0] == 16
    assert predict_from_logits([[0.0, 1.0, 1.0]], [14, 16, 17])[0] == 16
    assert predict_from_logits([[1.0, 1.0, 0.0]], [17, 16, 14])[0] == 16


def test_bundle_shapes_and_frozen_classifier():
    b = ModelBundle.create(feature_dim=4, noise_dim=3, generator_hidden=5, critic_hidden=6, intervals=(-1, 1),
                           labels=(1, 2, 3), seed=0)
    assert b.store["gxy.V"].shape == (4, 5, 2)
    assert b.store["dx.W1"].shape == (6, 6)
    assert not b.store.trainable["cls.W"]
    assert set(b.generator_params()).isdisjoint(b.critic_params())
    assert b.store["gxy.W0"].shape == b.store["gyx.W0"].shape
    assert not np.array_equal(b.store["gxy.W0"], b.store["gyx.W0"])
