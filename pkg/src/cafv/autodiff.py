"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Graphs are declared once and evaluated many times: build nodes through the
``Graph`` methods, then call :meth:`Graph.forward` with input bindings and
:meth:`Graph.backward` to get parameter gradients.  Parameters live in a
:class:`ParamStore` which also carries optimizer state.

Nodes are appended in creation order, so that order is always a valid
topological order and evaluation never reassociates a reduction.
"""

from __future__ import annotations

import logging
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_SLOPE = 0.2


class GraphError(ValueError):
    """Shape mismatch, unbound input, or misuse of the forward/backward cycle."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a place where it must never appear."""


# ---------------------------------------------------------------------------
# parameters and randomness


class ParamStore:
    """Named float64 parameters, each trainable or frozen, plus optimizer state."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.trainable: Dict[str, bool] = {}
        self.state: Dict[str, dict] = {}

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.trainable[name] = trainable
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self, prefix: str = "", trainable_only: bool = False) -> List[str]:
        return [
            n
            for n in self.params
            if n.startswith(prefix) and (self.trainable[n] or not trainable_only)
        ]

    def set(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self.params[name].shape:
            raise GraphError(
                f"parameter {name!r}: expected shape {self.params[name].shape}, got {arr.shape}"
            )
        self.params[name][...] = arr

    def freeze(self, prefix: str = "") -> None:
        for n in self.names(prefix):
            self.trainable[n] = False

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, v in self.params.items():
            out.add(n, v.copy(), self.trainable[n])
        out.state = {
            n: {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in s.items()}
            for n, s in self.state.items()
        }
        return out


@dataclass
class RngStream:
    """A labelled PCG64 stream: the same (seed, label) always gives the same draws."""

    seed: int
    label: str
    algorithm: str = "PCG64"
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.algorithm != "PCG64":
            raise ValueError(f"unsupported RNG algorithm {self.algorithm!r}")
        key = zlib.crc32(self.label.encode("utf-8"))
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, key])))

    def normal(self, shape) -> np.ndarray:
        return self.gen.standard_normal(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.gen.uniform(low, high, shape)

    def integers(self, high: int, size=None) -> np.ndarray:
        return self.gen.integers(0, high, size=size)

    def get_state(self) -> dict:
        return {"seed": self.seed, "label": self.label, "algorithm": self.algorithm,
                "state": self.gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state["state"]

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(state["seed"], state["label"], state.get("algorithm", "PCG64"))
        rng.set_state(state)
        return rng


def xavier_uniform(rng: RngStream, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(tuple(shape), -bound, bound)


# ---------------------------------------------------------------------------
# graph


@dataclass(eq=False)
class Value:
    """One node of a graph; ``payload`` and ``grad`` are filled by forward/backward."""

    id: int
    op: str
    parents: tuple
    attrs: dict = field(default_factory=dict)
    name: Optional[str] = None
    payload: Optional[np.ndarray] = None
    grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return None if self.payload is None else self.payload.shape


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _slope_mask(a: np.ndarray, slope: float) -> np.ndarray:
    """1 where a > 0, ``slope`` elsewhere (the LeakyReLU derivative)."""
    m = (a > 0).astype(np.float64)
    m *= 1.0 - slope
    m += slope
    return m


def _broadcastable(a, b) -> bool:
    try:
        np.broadcast_shapes(a, b)
    except ValueError:
        return False
    return True


class Graph:
    """A declared computation over named inputs and parameters of a ParamStore."""

    def __init__(self, store: Optional[ParamStore] = None):
        self.store = store if store is not None else ParamStore()
        self.nodes: List[Value] = []
        self.root: Optional[Value] = None
        self._params: Dict[str, Value] = {}
        self._inputs: Dict[str, Value] = {}
        self._ran = False
        self._reach_cache: Dict[frozenset, List[bool]] = {}

    def _node(self, op, parents=(), name=None, **attrs) -> Value:
        for p in parents:
            if not isinstance(p, Value) or p.id >= len(self.nodes) or self.nodes[p.id] is not p:
                raise GraphError(f"{op}: parent is not a node of this graph")
        v = Value(len(self.nodes), op, tuple(p.id for p in parents), attrs, name)
        self.nodes.append(v)
        self.root = v
        self._reach_cache.clear()
        return v

    # leaves
    def input(self, name: str) -> Value:
        if name not in self._inputs:
            self._inputs[name] = self._node("input", name=name)
        return self._inputs[name]

    def param(self, name: str) -> Value:
        if name not in self.store:
            raise GraphError(f"unknown parameter {name!r}")
        if name not in self._params:
            self._params[name] = self._node("param", name=name)
        return self._params[name]

    def const(self, value) -> Value:
        return self._node("const", value=np.array(value, dtype=np.float64))

    # primitives
    def add(self, a, b):
        return self._node("add", (a, b))

    def sub(self, a, b):
        return self._node("sub", (a, b))

    def mul(self, a, b):
        return self._node("mul", (a, b))

    def matmul(self, a, b):
        return self._node("matmul", (a, b))

    def transpose(self, a):
        return self._node("transpose", (a,))

    def concat(self, *xs):
        return self._node("concat", tuple(xs))

    def slice_cols(self, a, start: int, stop: int):
        return self._node("slice_cols", (a,), start=start, stop=stop)

    def relu(self, a):
        return self._node("relu", (a,))

    def leaky_relu(self, a, slope: float = DEFAULT_SLOPE):
        return self._node("leaky_relu", (a,), slope=slope)

    def abs(self, a):
        return self._node("abs", (a,))

    def mask_mul(self, x, pre, slope: float = DEFAULT_SLOPE):
        """x times the LeakyReLU derivative at ``pre``; no gradient reaches ``pre``."""
        return self._node("mask_mul", (x, pre), slope=slope)

    def detach(self, a):
        return self._node("detach", (a,))

    def softmax(self, logits):
        return self._node("softmax", (logits,))

    def softmax_xent(self, logits, targets):
        """Per-row cross entropy -sum(t * log softmax(logits)), fused for stability."""
        return self._node("softmax_xent", (logits, targets))

    def row_norm(self, a):
        return self._node("row_norm", (a,))

    def mean(self, a):
        return self._node("mean", (a,))

    def sum(self, a):
        return self._node("sum", (a,))

    def affine(self, a, scale: float = 1.0, shift: float = 0.0):
        return self._node("affine", (a,), scale=float(scale), shift=float(shift))

    def square(self, a):
        return self.mul(a, a)

    def context_weight(self, wbar, v, e):
        """W^c = wbar + sum_k e_k * v[:, :, k]."""
        return self._node("context_weight", (wbar, v, e))

    def linear(self, x, w, b=None):
        """x @ w.T + b for torch-style (out, in) weights."""
        y = self.matmul(x, self.transpose(w))
        return y if b is None else self.add(y, b)

    # evaluation
    def forward(self, bindings: Optional[Dict[str, np.ndarray]] = None, root: Optional[Value] = None):
        bindings = bindings or {}
        root = root if root is not None else self.root
        if root is None:
            raise GraphError("empty graph")
        for v in self.nodes:
            v.grad = None
            v.payload = None
        for v in self.nodes[: root.id + 1]:
            try:
                v.payload = self._eval(v, bindings)
            except GraphError:
                raise
            except ValueError as exc:
                shapes = [self.nodes[p].shape for p in v.parents]
                raise GraphError(f"node {v.id} ({v.op}): incompatible shapes {shapes}: {exc}") from None
        self._ran = True
        self._forward_root = root
        return root.payload

    def _eval(self, v: Value, bindings) -> np.ndarray:
        op = v.op
        xs = [self.nodes[p].payload for p in v.parents]
        if op == "input":
            if v.name not in bindings:
                raise GraphError(f"unbound input {v.name!r}")
            return np.asarray(bindings[v.name], dtype=np.float64)
        if op == "param":
            return self.store[v.name]
        if op == "const":
            return v.attrs["value"]
        if op in ("add", "sub", "mul", "mask_mul"):
            a, b = xs
            if not _broadcastable(a.shape, b.shape):
                raise GraphError(f"node {v.id} ({op}): shapes {a.shape} and {b.shape} do not broadcast")
            if op == "add":
                return a + b
            if op == "sub":
                return a - b
            if op == "mul":
                return a * b
            v.attrs["_mask"] = _slope_mask(b, v.attrs["slope"])
            return a * v.attrs["_mask"]
        if op == "matmul":
            a, b = xs
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                raise GraphError(f"node {v.id} (matmul): expected (n,k)@(k,m), got {a.shape}@{b.shape}")
            return a @ b
        if op == "transpose":
            return xs[0].T
        if op == "concat":
            rows = {x.shape[:-1] for x in xs}
            if len(rows) != 1:
                raise GraphError(f"node {v.id} (concat): leading shapes differ {sorted(rows)}")
            return np.concatenate(xs, axis=-1)
        if op == "slice_cols":
            a = xs[0]
            if v.attrs["stop"] > a.shape[-1]:
                raise GraphError(f"node {v.id} (slice_cols): stop {v.attrs['stop']} > width {a.shape[-1]}")
            return a[..., v.attrs["start"] : v.attrs["stop"]]
        if op == "relu":
            return np.maximum(xs[0], 0.0)
        if op == "leaky_relu":
            v.attrs["_mask"] = _slope_mask(xs[0], v.attrs["slope"])
            return xs[0] * v.attrs["_mask"]
        if op == "abs":
            return np.abs(xs[0])
        if op == "detach":
            return xs[0]
        if op == "softmax":
            z = xs[0] - xs[0].max(axis=-1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=-1, keepdims=True)
        if op == "softmax_xent":
            logits, t = xs
            if logits.shape != t.shape:
                raise GraphError(f"node {v.id} (softmax_xent): logits {logits.shape} vs targets {t.shape}")
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            v.attrs["_logp"] = logp
            return -(t * logp).sum(axis=-1)
        if op == "row_norm":
            return np.sqrt((xs[0] * xs[0]).sum(axis=-1))
        if op == "mean":
            return np.array(xs[0].mean())
        if op == "sum":
            return np.array(xs[0].sum())
        if op == "affine":
            return xs[0] * v.attrs["scale"] + v.attrs["shift"]
        if op == "context_weight":
            wbar, vv, e = xs
            e = e.reshape(-1)
            if vv.ndim != 3 or vv.shape[:2] != wbar.shape or vv.shape[2] != e.shape[0]:
                raise GraphError(
                    f"node {v.id} (context_weight): base {wbar.shape}, aux {vv.shape}, context {e.shape}"
                )
            return wbar + np.tensordot(vv, e, axes=([2], [0]))
        raise GraphError(f"unknown op {op!r}")

    def _reach(self, wrt: frozenset) -> List[bool]:
        if wrt not in self._reach_cache:
            reach = []
            for v in self.nodes:
                if v.op == "param":
                    reach.append(v.name in wrt)
                elif v.op in ("input", "const", "detach"):
                    reach.append(False)
                elif v.op == "mask_mul":
                    reach.append(reach[v.parents[0]])
                else:
                    reach.append(any(reach[p] for p in v.parents))
            self._reach_cache[wrt] = reach
        return self._reach_cache[wrt]

    def backward(self, wrt: Optional[Iterable[str]] = None, root: Optional[Value] = None) -> Dict[str, np.ndarray]:
        """Gradients of a scalar node (default: the forward root) w.r.t. trainable parameters."""
        if not self._ran:
            raise GraphError("backward called before forward")
        root = root if root is not None else self._forward_root
        if root.payload is None:
            raise GraphError(f"node {root.id} was not evaluated by the last forward")
        if root.payload.size != 1:
            raise GraphError(f"root node {root.id} is not scalar (shape {root.payload.shape})")
        if wrt is None:
            wrt = [n for n in self._params if self.store.trainable[n]]
        wrt = frozenset(n for n in wrt if self.store.trainable.get(n, False))
        reach = self._reach(wrt)
        for v in self.nodes:
            v.grad = None
        root.grad = np.ones_like(root.payload)
        for v in reversed(self.nodes[: root.id + 1]):
            if v.grad is None or not reach[v.id] or not v.parents:
                continue
            for pid, g in zip(v.parents, self._local_grads(v)):
                if g is None or not reach[pid]:
                    continue
                p = self.nodes[pid]
                p.grad = g if p.grad is None else p.grad + g
        out = {}
        for name in sorted(wrt):
            node = self._params.get(name)
            if node is None or node.grad is None:
                out[name] = np.zeros_like(self.store[name])
            else:
                out[name] = np.array(node.grad, dtype=np.float64).reshape(self.store[name].shape)
        return out

    def _local_grads(self, v: Value):
        g = v.grad
        xs = [self.nodes[p].payload for p in v.parents]
        op = v.op
        if op == "add":
            return _unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)
        if op == "sub":
            return _unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)
        if op == "mul":
            a, b = xs
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
        if op == "mask_mul":
            return _unbroadcast(g * v.attrs["_mask"], xs[0].shape), None
        if op == "matmul":
            a, b = xs
            return g @ b.T, a.T @ g
        if op == "transpose":
            return (g.T,)
        if op == "concat":
            out, start = [], 0
            for x in xs:
                w = x.shape[-1]
                out.append(g[..., start : start + w])
                start += w
            return out
        if op == "slice_cols":
            full = np.zeros_like(xs[0])
            full[..., v.attrs["start"] : v.attrs["stop"]] = g
            return (full,)
        if op == "relu":
            return (g * (xs[0] > 0),)
        if op == "leaky_relu":
            return (g * v.attrs["_mask"],)
        if op == "abs":
            return (g * np.sign(xs[0]),)
        if op == "detach":
            return (None,)
        if op == "softmax":
            s = v.payload
            return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
        if op == "softmax_xent":
            logp = v.attrs["_logp"]
            t = xs[1]
            gl = g[..., None] * (np.exp(logp) * t.sum(axis=-1, keepdims=True) - t)
            gt = -g[..., None] * logp
            return gl, gt
        if op == "row_norm":
            n = v.payload[..., None]
            safe = np.where(n > 0, n, 1.0)
            return (g[..., None] * np.where(n > 0, xs[0] / safe, 0.0),)
        if op == "mean":
            return (np.full_like(xs[0], float(g) / xs[0].size),)
        if op == "sum":
            return (np.full_like(xs[0], float(g)),)
        if op == "affine":
            return (g * v.attrs["scale"],)
        if op == "context_weight":
            wbar, vv, e = xs
            ge = np.tensordot(vv, g, axes=([0, 1], [0, 1])).reshape(e.shape)
            return g, g[:, :, None] * e.reshape(-1)[None, None, :], ge
        raise GraphError(f"no backward rule for {op!r}")


# ---------------------------------------------------------------------------
# gradient oracle and optimizers


def finite_diff_grad(
    loss_fn: Callable[[], float],
    store: ParamStore,
    epsilon: float = 1e-5,
    names: Optional[Iterable[str]] = None,
) -> Dict[str, np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. every coordinate of the named parameters.

    ``loss_fn`` may return an array of several losses; each gradient then gets
    the output shape appended to the parameter shape.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    names = store.names(trainable_only=True) if names is None else list(names)
    grads = {}
    for name in names:
        p = store[name]
        flat = p.reshape(-1)
        rows = []
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            up = np.asarray(loss_fn(), dtype=np.float64)
            flat[i] = old - epsilon
            down = np.asarray(loss_fn(), dtype=np.float64)
            flat[i] = old
            if not (np.all(np.isfinite(up)) and np.all(np.isfinite(down))):
                raise NonFiniteError(f"non-finite loss perturbing {name}[{i}]")
            rows.append((up - down) / (2.0 * epsilon))
        out_shape = rows[0].shape if rows else ()
        grads[name] = np.array(rows).reshape(p.shape + out_shape)
    return grads


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def optimizer_step(store: ParamStore, grads: Dict[str, np.ndarray], rule: str, lr: float) -> None:
    """Apply one SGD (no momentum) or Adam update in place.

    The whole step is validated before any parameter changes, so a bad
    gradient leaves the store untouched.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if rule not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer rule {rule!r}")
    active = []
    for name, g in grads.items():
        if name not in store:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if not store.trainable[name]:
            warnings.warn(f"ignoring gradient for frozen parameter {name!r}", stacklevel=2)
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != store[name].shape:
            raise GraphError(f"gradient for {name!r} has shape {g.shape}, expected {store[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}; step aborted")
        active.append((name, g))

    updates = {}
    for name, g in active:
        p = store[name]
        if rule == "sgd":
            updates[name] = (p - lr * g, None)
            continue
        st = store.state.get(name) or {"m": np.zeros_like(p), "v": np.zeros_like(p), "t": 0}
        t = st["t"] + 1
        m = ADAM_BETA1 * st["m"] + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * st["v"] + (1 - ADAM_BETA2) * g * g
        mhat = m / (1 - ADAM_BETA1**t)
        vhat = v / (1 - ADAM_BETA2**t)
        updates[name] = (p - lr * mhat / (np.sqrt(vhat) + ADAM_EPS), {"m": m, "v": v, "t": t})

    for name, (new, _) in updates.items():
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"update produced non-finite values in {name!r}; step aborted")
    for name, (new, st) in updates.items():
        store.params[name][...] = new
        if st is not None:
            store.state[name] = st
