"""Objective terms of the context-aware CycleGAN as differentiable graphs.

Sign conventions: critics ascend ``critic_objective`` (mean real score minus
mean fake score minus the weighted gradient penalty); generators descend
``generator_adversarial + lambda1 * cycle + beta * classification``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from cafv.autodiff import Graph, ParamStore, RngStream, Value
from cafv.models import ContextInterval, Critic, Generator, ModelBundle, SoftmaxClassifier


class EmptyBatchError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 10.0
    beta: float = 0.001

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


BREAKDOWN_KEYS = ("gan_xy", "gan_yx", "cycle", "cls_x", "cls_y", "penalty_x", "penalty_y", "total")


@dataclass
class LossBreakdown:
    gan_xy: float
    gan_yx: float
    cycle: float
    cls_y: float
    cls_x: float
    penalty_x: float
    penalty_y: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)

    def to_json_line(self, step: int) -> str:
        row = {"step": step}
        row.update({k: getattr(self, k) for k in BREAKDOWN_KEYS})
        return json.dumps(row)

    def finite(self) -> bool:
        return all(np.isfinite(getattr(self, k)) for k in BREAKDOWN_KEYS)


def combine_total(gan_xy, gan_yx, cycle, cls_y, cls_x, w: LossWeights) -> float:
    """The weighted full objective, summed in the same order as the graph."""
    return ((gan_xy + gan_yx) + w.lambda1 * cycle) + w.beta * (cls_y + cls_x)


# ---------------------------------------------------------------------------
# graph builders


def _check_batch(*arrays):
    for a in arrays:
        if a is None or np.asarray(a).shape[0] == 0:
            raise EmptyBatchError("empty batch")


def build_interpolate(g: Graph, real: Value, fake: Value, alpha: Value) -> Value:
    """alpha * real + (1 - alpha) * fake, with no gradient reaching the fake side."""
    return g.add(g.mul(alpha, real), g.mul(g.affine(alpha, -1.0, 1.0), g.detach(fake)))


def build_gradient_penalty(g: Graph, critic: Critic, f_hat: Value, e: Value) -> Value:
    grad = critic.build_input_gradient(g, f_hat, e)
    return g.mean(g.square(g.affine(g.row_norm(grad), 1.0, -1.0)))


def build_critic_objective(g, critic: Critic, real, fake, alpha, e, lambda2: float):
    """Returns (objective, penalty, mean fake score) nodes."""
    d_real = g.mean(critic.build(g, real, e))
    d_fake = g.mean(critic.build(g, fake, e))
    pen = build_gradient_penalty(g, critic, build_interpolate(g, real, fake, alpha), e)
    obj = g.sub(g.sub(d_real, d_fake), g.affine(pen, lambda2))
    return obj, pen, d_fake


def build_generator_adversarial(g, critic: Critic, fake, e) -> Value:
    return g.affine(g.mean(critic.build(g, fake, e)), -1.0)


def build_classification(g, cls: SoftmaxClassifier, fake, targets) -> Value:
    return g.mean(g.softmax_xent(cls.build_logits(g, fake), targets))


def build_l1(g, rec, orig) -> Value:
    return g.mean(g.abs(g.sub(rec, orig)))


@dataclass
class ObjectiveNodes:
    fake_y: Value
    fake_x: Value
    gan_xy: Value
    gan_yx: Value
    penalty_x: Value
    penalty_y: Value
    critic_loss: Value
    cycle: Value
    cls_y: Value
    cls_x: Value
    adv: Value
    generator_loss: Value
    total: Value


OBJECTIVE_INPUTS = ("fx", "fy", "z_xy", "z_yx", "z_cyc_x", "z_cyc_y", "e_xy", "e_yx", "t_x", "t_y",
                    "alpha_x", "alpha_y")


def build_full_objective(g: Graph, bundle: ModelBundle, w: LossWeights) -> ObjectiveNodes:
    """Every term of the full objective in one graph.

    Critic-side nodes come first so a critic step can stop the forward pass at
    ``critic_loss`` without evaluating the cycle and classification terms.
    """
    fx, fy = g.input("fx"), g.input("fy")
    e_xy = bundle.emb.node(g, "e_xy")
    e_yx = bundle.emb.node(g, "e_yx")
    fake_y = bundle.gxy.build(g, fx, g.input("z_xy"), e_xy)
    fake_x = bundle.gyx.build(g, fy, g.input("z_yx"), e_yx)

    gan_xy, pen_y, score_y = build_critic_objective(g, bundle.dy, fy, fake_y, g.input("alpha_y"), e_xy,
                                                    w.lambda2)
    gan_yx, pen_x, score_x = build_critic_objective(g, bundle.dx, fx, fake_x, g.input("alpha_x"), e_yx,
                                                    w.lambda2)
    critic_loss = g.affine(g.add(gan_xy, gan_yx), -1.0)

    rec_x = bundle.gyx.build(g, fake_y, g.input("z_cyc_x"), e_yx)
    rec_y = bundle.gxy.build(g, fake_x, g.input("z_cyc_y"), e_xy)
    cycle = g.add(build_l1(g, rec_x, fx), build_l1(g, rec_y, fy))
    cls_y = build_classification(g, bundle.cls, fake_y, g.input("t_y"))
    cls_x = build_classification(g, bundle.cls, fake_x, g.input("t_x"))
    cls_sum = g.add(cls_y, cls_x)

    # same critic scores as the Wasserstein terms, negated: the generator's share of the objective
    adv = g.add(g.affine(score_y, -1.0), g.affine(score_x, -1.0))
    generator_loss = g.add(g.add(adv, g.affine(cycle, w.lambda1)), g.affine(cls_sum, w.beta))
    total = g.add(g.add(g.add(gan_xy, gan_yx), g.affine(cycle, w.lambda1)), g.affine(cls_sum, w.beta))
    return ObjectiveNodes(fake_y, fake_x, gan_xy, gan_yx, pen_x, pen_y, critic_loss, cycle, cls_y, cls_x,
                          adv, generator_loss, total)


def breakdown_from(nodes: ObjectiveNodes, w: LossWeights) -> LossBreakdown:
    val = lambda n: float(n.payload)
    return LossBreakdown(
        gan_xy=val(nodes.gan_xy), gan_yx=val(nodes.gan_yx), cycle=val(nodes.cycle),
        cls_y=val(nodes.cls_y), cls_x=val(nodes.cls_x),
        penalty_x=val(nodes.penalty_x), penalty_y=val(nodes.penalty_y),
        total=val(nodes.total), weights=w,
    )


# ---------------------------------------------------------------------------
# eager wrappers


def _alphas(alpha_rng: RngStream, n: int) -> np.ndarray:
    return alpha_rng.uniform((n, 1))


def _context_row(critic: Critic, c: Optional[ContextInterval]) -> np.ndarray:
    return critic.emb.indicator(c) if c is not None else np.zeros((1, 0))


def gradient_penalty(store: ParamStore, critic: Critic, f_real, f_fake, c, alpha_rng: RngStream) -> float:
    """Mean of (||dD/df at the interpolate|| - 1)^2 with one alpha per sample."""
    _check_batch(f_real, f_fake)
    f_real, f_fake = np.atleast_2d(f_real), np.atleast_2d(f_fake)
    if f_real.shape != f_fake.shape:
        raise ValueError(f"real batch {f_real.shape} and fake batch {f_fake.shape} differ")
    g = Graph(store)
    e = critic.emb.node(g, "e")
    build_gradient_penalty(g, critic, build_interpolate(g, g.input("real"), g.input("fake"), g.input("alpha")), e)
    return float(g.forward({"real": f_real, "fake": f_fake, "alpha": _alphas(alpha_rng, len(f_real)),
                            "e": _context_row(critic, c)}))


def critic_objective(store, critic: Critic, f_real, f_fake, c, weights: LossWeights, alpha_rng: RngStream) -> float:
    _check_batch(f_real, f_fake)
    f_real, f_fake = np.atleast_2d(f_real), np.atleast_2d(f_fake)
    g = Graph(store)
    e = critic.emb.node(g, "e")
    obj, _, _ = build_critic_objective(g, critic, g.input("real"), g.input("fake"), g.input("alpha"), e,
                                    weights.lambda2)
    return float(g.forward({"real": f_real, "fake": f_fake, "alpha": _alphas(alpha_rng, len(f_real)),
                            "e": _context_row(critic, c)}, root=obj))


def generator_adversarial(store, critic: Critic, f_fake, c) -> float:
    _check_batch(f_fake)
    g = Graph(store)
    build_generator_adversarial(g, critic, g.input("fake"), critic.emb.node(g, "e"))
    return float(g.forward({"fake": np.atleast_2d(f_fake), "e": _context_row(critic, c)}))


def cycle_loss(store, g_xy: Generator, g_yx: Generator, f_x, f_y, c: ContextInterval, noise_rng: RngStream) -> float:
    """Mean-L1 reconstruction error of X->Y->X plus that of Y->X->Y."""
    _check_batch(f_x, f_y)
    f_x, f_y = np.atleast_2d(f_x), np.atleast_2d(f_y)
    emb = g_xy.emb
    g = Graph(store)
    e_xy, e_yx = emb.node(g, "e_xy"), emb.node(g, "e_yx")
    fx, fy = g.input("fx"), g.input("fy")
    rec_x = g_yx.build(g, g_xy.build(g, fx, g.input("z1"), e_xy), g.input("z2"), e_yx)
    rec_y = g_xy.build(g, g_yx.build(g, fy, g.input("z3"), e_yx), g.input("z4"), e_xy)
    g.add(build_l1(g, rec_x, fx), build_l1(g, rec_y, fy))
    dz = g_xy.noise_dim
    bind = {"fx": f_x, "fy": f_y, "e_xy": emb.indicator(c), "e_yx": emb.indicator(c.reverse())}
    for k, n in (("z1", len(f_x)), ("z2", len(f_x)), ("z3", len(f_y)), ("z4", len(f_y))):
        bind[k] = noise_rng.normal((n, dz))
    return float(g.forward(bind))


def classification_loss(store, cls: SoftmaxClassifier, f_fake, s_target: int) -> float:
    _check_batch(f_fake)
    f_fake = np.atleast_2d(f_fake)
    targets = np.repeat(cls.onehot([s_target]), len(f_fake), axis=0)
    g = Graph(store)
    build_classification(g, cls, g.input("fake"), g.input("t"))
    return float(g.forward({"fake": f_fake, "t": targets}))


def objective_bindings(bundle: ModelBundle, fx, fy, s_x: int, s_y: int, c: ContextInterval,
                       noise_rng: RngStream, alpha_rng: RngStream) -> Dict[str, np.ndarray]:
    """Draw noise and interpolation weights and assemble the inputs of the full objective."""
    fx, fy = np.atleast_2d(fx), np.atleast_2d(fy)
    _check_batch(fx, fy)
    dz = bundle.gxy.noise_dim
    return {
        "fx": fx, "fy": fy,
        "z_xy": noise_rng.normal((len(fx), dz)),
        "z_yx": noise_rng.normal((len(fy), dz)),
        "z_cyc_x": noise_rng.normal((len(fx), dz)),
        "z_cyc_y": noise_rng.normal((len(fy), dz)),
        "e_xy": bundle.emb.indicator(c),
        "e_yx": bundle.emb.indicator(c.reverse()),
        "t_x": np.repeat(bundle.cls.onehot([s_x]), len(fy), axis=0),
        "t_y": np.repeat(bundle.cls.onehot([s_y]), len(fx), axis=0),
        "alpha_x": alpha_rng.uniform((len(fx), 1)),
        "alpha_y": alpha_rng.uniform((len(fy), 1)),
    }


def full_objective(bundle: ModelBundle, fx, fy, s_x, s_y, c, weights: LossWeights,
                   noise_rng: RngStream, alpha_rng: RngStream) -> LossBreakdown:
    if len(np.atleast_2d(fx)) != len(np.atleast_2d(fy)):
        raise ValueError("source and target batches must have the same size")
    g = Graph(bundle.store)
    nodes = build_full_objective(g, bundle, weights)
    g.forward(objective_bindings(bundle, fx, fy, s_x, s_y, c, noise_rng, alpha_rng), root=nodes.total)
    return breakdown_from(nodes, weights)
