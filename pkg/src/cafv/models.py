"""Context-aware generators, conditional Wasserstein critics, the softmax classifier
and the context embedding, all expressed as graphs over :mod:`cafv.autodiff`.

Weights follow the (out, in) convention; activations are row batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from cafv.autodiff import DEFAULT_SLOPE, Graph, ParamStore, RngStream, Value, xavier_uniform


class ContextError(ValueError):
    pass


@dataclass(frozen=True)
class ContextInterval:
    """Signed intensity difference s_target - s_source in m/s."""

    delta: int

    def __post_init__(self):
        if int(self.delta) != self.delta or self.delta == 0:
            raise ContextError(f"context delta must be a nonzero integer, got {self.delta!r}")

    def reverse(self) -> "ContextInterval":
        return ContextInterval(-self.delta)


@dataclass
class ContextEmbedding:
    """E(c): an indicator over the allowed intervals, or a learned table row."""

    intervals: Tuple[int, ...]
    mode: str = "one-hot"
    table_dim: int = 16
    name: str = "emb"

    def __post_init__(self):
        self.intervals = tuple(int(d) for d in self.intervals)
        if len(set(self.intervals)) != len(self.intervals):
            raise ContextError(f"duplicate deltas in interval set {self.intervals}")
        if 0 in self.intervals:
            raise ContextError("interval set may not contain 0")
        if self.mode not in ("one-hot", "learned-table"):
            raise ContextError(f"unknown embedding mode {self.mode!r}")

    @property
    def dim(self) -> int:
        return len(self.intervals) if self.mode == "one-hot" else self.table_dim

    def index(self, c) -> int:
        delta = c.delta if isinstance(c, ContextInterval) else int(c)
        try:
            return self.intervals.index(delta)
        except ValueError:
            raise ContextError(f"delta {delta} not in interval set {list(self.intervals)}") from None

    def indicator(self, c) -> np.ndarray:
        out = np.zeros((1, len(self.intervals)))
        out[0, self.index(c)] = 1.0
        return out

    def init(self, store: ParamStore, rng: RngStream) -> None:
        if self.mode == "learned-table":
            shape = (len(self.intervals), self.table_dim)
            store.add(f"{self.name}.table", xavier_uniform(rng, shape, shape[0], shape[1]))

    def node(self, graph: Graph, input_name: str) -> Value:
        """Embedding node of shape (1, dim) fed by an indicator input."""
        onehot = graph.input(input_name)
        if self.mode == "one-hot":
            return onehot
        return graph.matmul(onehot, graph.param(f"{self.name}.table"))

    def embed(self, store: ParamStore, c) -> np.ndarray:
        if self.mode == "one-hot":
            return self.indicator(c)[0]
        return store[f"{self.name}.table"][self.index(c)].copy()

    def param_names(self):
        return [f"{self.name}.table"] if self.mode == "learned-table" else []


def embed_context(emb: ContextEmbedding, c: ContextInterval, store: Optional[ParamStore] = None):
    if emb.mode == "learned-table" and store is None:
        raise ContextError("learned-table embedding needs a parameter store")
    return emb.embed(store, c)


def context_weight(wbar, v, e) -> np.ndarray:
    """W^c = W̄ + Σ_k e_k V[:, :, k], evaluated through the graph op."""
    g = Graph()
    g.context_weight(g.const(wbar), g.const(v), g.const(np.asarray(e, dtype=float).reshape(-1)))
    return g.forward()


@dataclass
class Generator:
    """One hidden LeakyReLU layer followed by the context-aware relu transform."""

    name: str
    feature_dim: int
    noise_dim: int
    hidden: int
    emb: ContextEmbedding
    slope: float = DEFAULT_SLOPE

    def shapes(self):
        d, h = self.feature_dim, self.hidden
        return {
            "W0": (h, d + self.noise_dim),
            "b0": (h,),
            "Wbar": (d, h),
            "V": (d, h, self.emb.dim),
            "b": (d,),
        }

    def init(self, store: ParamStore, rng: RngStream) -> None:
        d, h = self.feature_dim, self.hidden
        store.add(f"{self.name}.W0", xavier_uniform(rng, (h, d + self.noise_dim), d + self.noise_dim, h))
        store.add(f"{self.name}.b0", np.zeros(h))
        store.add(f"{self.name}.Wbar", xavier_uniform(rng, (d, h), h, d))
        store.add(f"{self.name}.V", xavier_uniform(rng, (d, h, self.emb.dim), h, d))
        store.add(f"{self.name}.b", np.zeros(d))

    def param_names(self):
        return [f"{self.name}.{k}" for k in self.shapes()]

    def build(self, g: Graph, f: Value, z: Value, e: Value) -> Value:
        p = lambda k: g.param(f"{self.name}.{k}")
        h = g.leaky_relu(g.linear(g.concat(f, z), p("W0"), p("b0")), self.slope)
        wc = g.context_weight(p("Wbar"), p("V"), e)
        return g.relu(g.linear(h, wc, p("b")))

    def __call__(self, store: ParamStore, f, z, c) -> np.ndarray:
        """Translate a batch (or one vector) of features under context ``c``."""
        f = np.atleast_2d(np.asarray(f, dtype=float))
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if f.shape[1] != self.feature_dim or z.shape[1] != self.noise_dim:
            raise ValueError(
                f"{self.name}: expected feature/noise widths {self.feature_dim}/{self.noise_dim}, "
                f"got {f.shape[1]}/{z.shape[1]}"
            )
        g = Graph(store)
        self.build(g, g.input("f"), g.input("z"), self.emb.node(g, "e"))
        return g.forward({"f": f, "z": z, "e": self.emb.indicator(c)})


@dataclass
class Critic:
    """Conditional Wasserstein critic: LeakyReLU hidden layer, linear scalar output."""

    name: str
    feature_dim: int
    hidden: int
    emb: ContextEmbedding
    slope: float = DEFAULT_SLOPE

    def shapes(self):
        return {
            "W1": (self.hidden, self.feature_dim + self.emb.dim),
            "b1": (self.hidden,),
            "w2": (1, self.hidden),
            "b2": (1,),
        }

    def init(self, store: ParamStore, rng: RngStream) -> None:
        fan_in = self.feature_dim + self.emb.dim
        store.add(f"{self.name}.W1", xavier_uniform(rng, (self.hidden, fan_in), fan_in, self.hidden))
        store.add(f"{self.name}.b1", np.zeros(self.hidden))
        store.add(f"{self.name}.w2", xavier_uniform(rng, (1, self.hidden), self.hidden, 1))
        store.add(f"{self.name}.b2", np.zeros(1))

    def param_names(self):
        return [f"{self.name}.{k}" for k in self.shapes()]

    def _pre(self, g: Graph, f: Value, e: Value) -> Value:
        # W1 @ concat(f, e) split by columns so a single context row serves the whole batch
        w1 = g.param(f"{self.name}.W1")
        d = self.feature_dim
        shift = g.param(f"{self.name}.b1")
        if self.emb.dim:
            shift = g.add(g.matmul(e, g.transpose(g.slice_cols(w1, d, d + self.emb.dim))), shift)
        return g.add(g.matmul(f, g.transpose(g.slice_cols(w1, 0, d))), shift)

    def build(self, g: Graph, f: Value, e: Value) -> Value:
        """Scores of shape (batch, 1)."""
        h = g.leaky_relu(self._pre(g, f, e), self.slope)
        return g.linear(h, g.param(f"{self.name}.w2"), g.param(f"{self.name}.b2"))

    def build_input_gradient(self, g: Graph, f: Value, e: Value) -> Value:
        """dD/df per row, W1_f^T (mask * w2), with the activation mask held constant."""
        pre = self._pre(g, f, e)
        gh = g.mask_mul(g.param(f"{self.name}.w2"), pre, self.slope)
        return g.matmul(gh, g.slice_cols(g.param(f"{self.name}.W1"), 0, self.feature_dim))

    def _run(self, store, f, c, which):
        f = np.atleast_2d(np.asarray(f, dtype=float))
        if f.shape[1] != self.feature_dim:
            raise ValueError(f"{self.name}: expected feature width {self.feature_dim}, got {f.shape[1]}")
        g = Graph(store)
        e = self.emb.node(g, "e")
        which(g, g.input("f"), e)
        bind = {"f": f, "e": self.emb.indicator(c) if c is not None else np.zeros((1, 0))}
        return g.forward(bind)

    def __call__(self, store: ParamStore, f, c) -> np.ndarray:
        return self._run(store, f, c, self.build)[:, 0]

    def input_gradient(self, store: ParamStore, f, c) -> np.ndarray:
        return self._run(store, f, c, self.build_input_gradient)


@dataclass
class SoftmaxClassifier:
    """Linear softmax over the sorted label set; weight is (feature_dim, K)."""

    name: str
    feature_dim: int
    labels: Tuple[int, ...]

    def __post_init__(self):
        self.labels = tuple(sorted(int(s) for s in self.labels))

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def init(self, store: ParamStore, rng: Optional[RngStream] = None) -> None:
        k, d = self.n_classes, self.feature_dim
        w = np.zeros((d, k)) if rng is None else xavier_uniform(rng, (d, k), d, k)
        store.add(f"{self.name}.W", w)
        store.add(f"{self.name}.b", np.zeros(k))

    def param_names(self):
        return [f"{self.name}.W", f"{self.name}.b"]

    def label_index(self, label: int) -> int:
        try:
            return self.labels.index(int(label))
        except ValueError:
            raise ValueError(f"label {label} not in classifier label set {list(self.labels)}") from None

    def onehot(self, labels) -> np.ndarray:
        labels = np.atleast_1d(labels)
        out = np.zeros((len(labels), self.n_classes))
        for i, s in enumerate(labels):
            out[i, self.label_index(s)] = 1.0
        return out

    def build_logits(self, g: Graph, f: Value) -> Value:
        return g.add(g.matmul(f, g.param(f"{self.name}.W")), g.param(f"{self.name}.b"))

    def logits(self, store: ParamStore, f) -> np.ndarray:
        f = np.atleast_2d(np.asarray(f, dtype=float))
        if f.shape[1] != self.feature_dim:
            raise ValueError(f"{self.name}: expected feature width {self.feature_dim}, got {f.shape[1]}")
        return f @ store[f"{self.name}.W"] + store[f"{self.name}.b"]

    def proba(self, store: ParamStore, f) -> np.ndarray:
        f = np.atleast_2d(np.asarray(f, dtype=float))
        if f.shape[1] != self.feature_dim:
            raise ValueError(f"{self.name}: expected feature width {self.feature_dim}, got {f.shape[1]}")
        g = Graph(store)
        g.softmax(self.build_logits(g, g.input("f")))
        return g.forward({"f": f})

    def predict(self, store: ParamStore, f) -> np.ndarray:
        return predict_from_logits(self.logits(store, f), self.labels)


def predict_from_logits(logits, labels: Sequence[int]) -> np.ndarray:
    """Argmax label per row; np.argmax keeps the first maximum, i.e. the smallest label."""
    logits = np.atleast_2d(logits)
    order = np.argsort(labels, kind="stable")
    idx = np.argmax(logits[:, order], axis=1)
    return np.asarray(labels)[order][idx]


@dataclass
class ModelBundle:
    """Both generators, both critics, the context embedding and the frozen classifier."""

    store: ParamStore
    emb: ContextEmbedding
    gxy: Generator
    gyx: Generator
    dx: Critic
    dy: Critic
    cls: SoftmaxClassifier

    @classmethod
    def create(cls, *, feature_dim: int, noise_dim: int, generator_hidden: int, critic_hidden: int,
               intervals: Sequence[int], labels: Sequence[int], seed: int,
               embedding_mode: str = "one-hot", embedding_dim: int = 16,
               slope: float = DEFAULT_SLOPE, classifier_store: Optional[ParamStore] = None,
               classifier_name: str = "cls") -> "ModelBundle":
        emb = ContextEmbedding(tuple(intervals), embedding_mode, embedding_dim)
        bundle = cls(
            store=ParamStore(),
            emb=emb,
            gxy=Generator("gxy", feature_dim, noise_dim, generator_hidden, emb, slope),
            gyx=Generator("gyx", feature_dim, noise_dim, generator_hidden, emb, slope),
            dx=Critic("dx", feature_dim, critic_hidden, emb, slope),
            dy=Critic("dy", feature_dim, critic_hidden, emb, slope),
            cls=SoftmaxClassifier("cls", feature_dim, tuple(labels)),
        )
        rng = RngStream(seed, "init")
        for part in (emb, bundle.gxy, bundle.gyx, bundle.dx, bundle.dy):
            part.init(bundle.store, rng)
        if classifier_store is None:
            bundle.cls.init(bundle.store)
        else:
            for suffix in ("W", "b"):
                bundle.store.add(f"cls.{suffix}", classifier_store[f"{classifier_name}.{suffix}"])
        bundle.store.freeze("cls.")
        return bundle

    def generator_params(self):
        return self.gxy.param_names() + self.gyx.param_names() + self.emb.param_names()

    def critic_params(self):
        return self.dx.param_names() + self.dy.param_names()
