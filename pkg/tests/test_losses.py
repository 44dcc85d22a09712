import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cafv.autodiff import Graph, ParamStore, RngStream, optimizer_step
from cafv.losses import (
    BREAKDOWN_KEYS,
    EmptyBatchError,
    LossWeights,
    build_critic_objective,
    build_generator_adversarial,
    build_l1,
    classification_loss,
    combine_total,
    critic_objective,
    cycle_loss,
    full_objective,
    generator_adversarial,
    gradient_penalty,
)
from cafv.models import ContextEmbedding, ContextInterval, Critic, Generator, ModelBundle, SoftmaxClassifier


def linear_critic(w):
    """D(f) = w.f, built as a one-unit critic whose activation has slope 1."""
    w = np.asarray(w, dtype=float)
    c = Critic("lin", len(w), 1, ContextEmbedding(()), slope=1.0)
    store = ParamStore()
    store.add("lin.W1", w[None, :])
    store.add("lin.b1", np.zeros(1))
    store.add("lin.w2", np.ones((1, 1)))
    store.add("lin.b2", np.zeros(1))
    return c, store


def test_penalty_linear_critic_closed_form():
    c, store = linear_critic([3.0, 4.0])
    real = np.array([[1.0, 2.0], [0.0, -1.0]])
    fake = np.array([[5.0, 5.0], [2.0, 3.0]])
    assert gradient_penalty(store, c, real, fake, None, RngStream(0, "alpha")) == pytest.approx(16.0, abs=1e-10)


def test_penalty_unit_norm_is_zero():
    c, store = linear_critic([0.6, 0.8])
    assert gradient_penalty(store, c, np.ones((3, 2)), np.zeros((3, 2)), None, RngStream(1, "alpha")) < 1e-20


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 7))
def test_penalty_closed_form_any_batch(seed, d, n):
    rs = RngStream(seed, "pen")
    w = rs.normal((d,)) * 2
    c, store = linear_critic(w)
    pen = gradient_penalty(store, c, rs.normal((n, d)), rs.normal((n, d)), None, rs)
    assert abs(pen - (np.linalg.norm(w) - 1) ** 2) <= 1e-10


def test_empty_batch_rejected():
    c, store = linear_critic([1.0])
    with pytest.raises(EmptyBatchError):
        gradient_penalty(store, c, np.zeros((0, 1)), np.zeros((0, 1)), None, RngStream(0, "a"))
    with pytest.raises(EmptyBatchError):
        generator_adversarial(store, c, np.zeros((0, 1)), None)


def zero_critic(d=3):
    c = Critic("d", d, 4, ContextEmbedding((-1, 1)))
    store = ParamStore()
    c.init(store, RngStream(0, "init"))
    for n in c.param_names():
        store.set(n, np.zeros_like(store[n]))
    return c, store


def test_constant_critic_objective_is_minus_lambda2():
    c, store = zero_critic()
    w = LossWeights(lambda2=7.0)
    obj = critic_objective(store, c, np.ones((2, 3)), np.zeros((2, 3)), ContextInterval(1), w, RngStream(0, "a"))
    assert obj == -7.0
    assert generator_adversarial(store, c, np.ones((2, 3)), ContextInterval(1)) == 0.0


def test_identical_batches_cancel():
    c = Critic("d", 3, 4, ContextEmbedding((-1, 1)))
    store = ParamStore()
    c.init(store, RngStream(2, "init"))
    x = RngStream(2, "x").normal((5, 3))
    pen = gradient_penalty(store, c, x, x, ContextInterval(-1), RngStream(9, "a"))
    obj = critic_objective(store, c, x, x, ContextInterval(-1), LossWeights(lambda2=2.0), RngStream(9, "a"))
    assert obj == -2.0 * pen


def test_adversarial_is_negated_fake_term():
    c = Critic("d", 3, 4, ContextEmbedding((-1, 1)))
    store = ParamStore()
    c.init(store, RngStream(3, "init"))
    real, fake = RngStream(3, "r").normal((4, 3)), RngStream(3, "f").normal((4, 3))
    obj = critic_objective(store, c, real, fake, ContextInterval(1), LossWeights(lambda2=0.0), RngStream(0, "a"))
    d_real = float(np.mean(c(store, real, ContextInterval(1))))
    adv = generator_adversarial(store, c, fake, ContextInterval(1))
    assert adv == pytest.approx(obj - d_real, abs=1e-12)


def test_critic_training_separates_toy_data():
    c = Critic("d", 2, 8, ContextEmbedding((-1, 1)))
    store = ParamStore()
    c.init(store, RngStream(4, "init"))
    g = Graph(store)
    e = c.emb.node(g, "e")
    obj, _, _ = build_critic_objective(g, c, g.input("real"), g.input("fake"), g.input("alpha"), e, 10.0)
    neg = g.affine(obj, -1.0)
    rs = RngStream(4, "data")
    for _ in range(200):
        real = rs.normal((16, 2)) * 0.1 + [2.0, 0.0]
        fake = rs.normal((16, 2)) * 0.1 - [2.0, 0.0]
        g.forward({"real": real, "fake": fake, "alpha": rs.uniform((16, 1)), "e": c.emb.indicator(1)}, root=neg)
        optimizer_step(store, g.backward(root=neg), "sgd", 1e-2)
    real = rs.normal((64, 2)) * 0.1 + [2.0, 0.0]
    fake = rs.normal((64, 2)) * 0.1 - [2.0, 0.0]
    assert c(store, real, ContextInterval(1)).mean() > c(store, fake, ContextInterval(1)).mean()


def test_generator_step_raises_critic_score():
    emb = ContextEmbedding((-1, 1))
    gen = Generator("g", 3, 2, 5, emb)
    crit = Critic("d", 3, 6, emb)
    store = ParamStore()
    gen.init(store, RngStream(5, "init"))
    crit.init(store, RngStream(6, "init"))
    store.set("g.b", np.full(3, 0.5))
    store.freeze("d.")
    g = Graph(store)
    e = emb.node(g, "e")
    build_generator_adversarial(g, crit, gen.build(g, g.input("f"), g.input("z"), e), e)
    rs = RngStream(5, "x")
    bind = {"f": np.abs(rs.normal((8, 3))), "z": rs.normal((8, 2)), "e": emb.indicator(1)}
    before = g.forward(bind)
    optimizer_step(store, g.backward(wrt=gen.param_names()), "sgd", 1e-4)
    assert g.forward(bind) <= before


def identity_generators(d=3, dz=2, shift_back=0.0):
    emb = ContextEmbedding((-1, 1))
    store = ParamStore()
    gens = []
    for name, shift in (("gxy", 0.0), ("gyx", shift_back)):
        gen = Generator(name, d, dz, d, emb)
        gen.init(store, RngStream(0, "init"))
        w0 = np.zeros((d, d + dz))
        w0[:, :d] = np.eye(d)
        store.set(f"{name}.W0", w0)
        store.set(f"{name}.Wbar", np.eye(d))
        store.set(f"{name}.V", np.zeros((d, d, 2)))
        store.set(f"{name}.b", np.full(d, shift))
        gens.append(gen)
    return store, gens


def test_cycle_identity_is_zero():
    store, (gxy, gyx) = identity_generators()
    fx, fy = np.abs(RngStream(1, "x").normal((4, 3))), np.abs(RngStream(1, "y").normal((4, 3)))
    assert cycle_loss(store, gxy, gyx, fx, fy, ContextInterval(1), RngStream(0, "noise")) == 0.0


def test_cycle_off_by_one():
    # one translation adds 1 to every coordinate, so each side reconstructs f + 1
    store, (gxy, gyx) = identity_generators(shift_back=1.0)
    fx, fy = np.abs(RngStream(1, "x").normal((4, 3))), np.abs(RngStream(1, "y").normal((4, 3)))
    assert cycle_loss(store, gxy, gyx, fx, fy, ContextInterval(1), RngStream(0, "noise")) == pytest.approx(2.0)
    g = Graph()
    build_l1(g, g.const(fx + 1.0), g.const(fx))
    assert g.forward() == pytest.approx(1.0)


def test_classification_uniform_and_certain():
    cls = SoftmaxClassifier("cls", 3, (1, 2, 3, 4))
    store = ParamStore()
    cls.init(store)
    assert classification_loss(store, cls, np.ones((2, 3)), 2) == pytest.approx(math.log(4), abs=1e-12)
    store.set("cls.b", np.array([0.0, 1e3, 0.0, 0.0]))
    assert classification_loss(store, cls, np.ones((2, 3)), 2) == 0.0
    with pytest.raises(ValueError):
        classification_loss(store, cls, np.ones((2, 3)), 9)


def small_bundle(seed=0):
    b = ModelBundle.create(feature_dim=4, noise_dim=3, generator_hidden=5, critic_hidden=6, intervals=(-1, 1),
                           labels=(10, 11, 12), seed=seed)
    b.store.set("cls.W", RngStream(seed, "cls").normal((4, 3)))
    rs = RngStream(seed, "batch")
    return b, np.abs(rs.normal((5, 4))), np.abs(rs.normal((5, 4)))


def test_classifier_is_frozen_in_objective():
    from cafv.losses import build_full_objective, objective_bindings
    b, fx, fy = small_bundle(1)
    g = Graph(b.store)
    nodes = build_full_objective(g, b, LossWeights())
    g.forward(objective_bindings(b, fx, fy, 10, 11, ContextInterval(1), RngStream(0, "n"), RngStream(0, "a")))
    grads = g.backward(root=nodes.cls_y)
    assert "cls.W" not in grads
    assert any(np.abs(grads[n]).sum() > 0 for n in b.gxy.param_names())


def test_full_objective_zero_weights():
    b, fx, fy = small_bundle(2)
    br = full_objective(b, fx, fy, 10, 11, ContextInterval(1), LossWeights(0.0, 10.0, 0.0),
                        RngStream(0, "n"), RngStream(0, "a"))
    assert br.total == br.gan_xy + br.gan_yx


def test_full_objective_recombines_bit_exactly():
    b, fx, fy = small_bundle(3)
    w = LossWeights()
    br = full_objective(b, fx, fy, 11, 12, ContextInterval(1), w, RngStream(1, "n"), RngStream(1, "a"))
    assert combine_total(br.gan_xy, br.gan_yx, br.cycle, br.cls_y, br.cls_x, w) == br.total
    assert (br.weights.lambda1, br.weights.lambda2, br.weights.beta) == (10.0, 10.0, 0.001)
    assert br.cycle >= 0 and br.cls_x >= 0 and br.cls_y >= 0
    assert br.penalty_x >= 0 and br.penalty_y >= 0
    row = json.loads(br.to_json_line(7))
    assert set(row) == {"step", *BREAKDOWN_KEYS}
    assert row["step"] == 7


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(beta=-1.0)
