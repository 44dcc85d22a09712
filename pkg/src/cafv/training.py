"""Classifier pretraining, the alternating CycleGAN loop, synthesis, and retraining."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from cafv.autodiff import Graph, NonFiniteError, ParamStore, RngStream, optimizer_step
from cafv.checkpoint import load_checkpoint, save_checkpoint
from cafv.data import Dataset
from cafv.losses import (
    LossBreakdown,
    LossWeights,
    breakdown_from,
    build_full_objective,
    objective_bindings,
)
from cafv.models import ContextInterval, ModelBundle, SoftmaxClassifier

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    feature_dim: int = 512
    noise_dim: int = 128
    generator_hidden: int = 4096
    critic_hidden: int = 4096
    interval_set: Tuple[int, ...] = (-1, 1)
    embedding_mode: str = "one-hot"
    embedding_dim: int = 16
    batch_size: int = 64
    generator_lr: float = 1e-4
    critic_lr: float = 1e-4
    classifier_lr: float = 1e-4
    classifier_lr_decay: float = 0.9
    classifier_decay_every: int = 10
    classifier_epochs: int = 100
    classifier_batch_size: int = 16
    n_critic: int = 5
    epochs: int = 1
    max_generator_steps: Optional[int] = None
    seed: int = 0
    lambda1: float = 10.0
    lambda2: float = 10.0
    beta: float = 0.001
    leaky_slope: float = 0.2
    synth_per_class: int = 200
    hist_bin_width: float = 1.0

    def __post_init__(self):
        self.interval_set = tuple(int(d) for d in self.interval_set)

    def validate(self) -> "TrainConfig":
        for k in ("feature_dim", "noise_dim", "generator_hidden", "critic_hidden", "batch_size",
                  "classifier_batch_size", "classifier_decay_every", "embedding_dim"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")
        for k in ("generator_lr", "critic_lr", "classifier_lr", "hist_bin_width"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        if not 0 < self.classifier_lr_decay <= 1:
            raise ConfigError("classifier_lr_decay must be in (0, 1]")
        if self.n_critic < 1:
            raise ConfigError("n_critic must be >= 1")
        if self.epochs < 0 or self.classifier_epochs < 0 or self.synth_per_class < 0:
            raise ConfigError("epoch and count settings must be >= 0")
        if self.max_generator_steps is not None and self.max_generator_steps < 0:
            raise ConfigError("max_generator_steps must be >= 0")
        if not self.interval_set or 0 in self.interval_set:
            raise ConfigError("interval_set must be non-empty and exclude 0")
        if any(-d not in self.interval_set for d in self.interval_set):
            raise ConfigError(f"interval_set {list(self.interval_set)} is not symmetric")
        if self.embedding_mode not in ("one-hot", "learned-table"):
            raise ConfigError(f"unknown embedding_mode {self.embedding_mode!r}")
        LossWeights(self.lambda1, self.lambda2, self.beta)
        return self

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.beta)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interval_set"] = list(self.interval_set)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            cfg = cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg.validate()

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig.from_dict(d)


def benchmark_config(seed: int = 0, **overrides) -> TrainConfig:
    """Settings for the 16-dimensional synthetic benchmark.

    The loss weights, noise width and optimizer kinds stay at their defaults.
    Widths are reduced to fit the tiny feature space, and the learning rates are
    raised because features here have unit scale and the run is capped at 2000
    generator steps.
    """
    base = dict(feature_dim=16, generator_hidden=256, critic_hidden=512, batch_size=32,
                generator_lr=1e-2, critic_lr=5e-2, classifier_lr=1e-2, epochs=32,
                max_generator_steps=2000, seed=seed)
    base.update(overrides)
    return TrainConfig.from_dict(base)


# ---------------------------------------------------------------------------
# classifier


@dataclass
class TrainedClassifier:
    model: SoftmaxClassifier
    store: ParamStore
    train_accuracy: float
    class_counts: Dict[int, int]
    lr_by_epoch: List[float] = field(default_factory=list)

    def predict(self, features) -> np.ndarray:
        return self.model.predict(self.store, features)

    def proba(self, features) -> np.ndarray:
        return self.model.proba(self.store, features)


def classifier_lr(config: TrainConfig, epoch: int) -> float:
    """Step decay: lr * decay ** (epoch // decay_every)."""
    return config.classifier_lr * config.classifier_lr_decay ** (epoch // config.classifier_decay_every)


def pretrain_classifier(dataset: Dataset, config: TrainConfig, name: str = "cls") -> TrainedClassifier:
    """Softmax regression with Adam on cross entropy, returned frozen."""
    if len(dataset) == 0:
        raise ValueError("cannot train a classifier on an empty dataset")
    labels = dataset.label_set
    if len(labels) < 2:
        raise ValueError(f"need at least 2 classes, dataset has {list(labels)}")
    model = SoftmaxClassifier(name, dataset.feature_dim, labels)
    store = ParamStore()
    # convex problem: a zero start needs no symmetry breaking and keeps the small lr budget for learning
    model.init(store)
    order_rng = RngStream(config.seed, "classifier-batches")

    g = Graph(store)
    g.mean(g.softmax_xent(model.build_logits(g, g.input("f")), g.input("t")))
    targets = model.onehot(dataset.labels)
    n, bs = len(dataset), config.classifier_batch_size
    lrs = []
    for epoch in range(config.classifier_epochs):
        lr = classifier_lr(config, epoch)
        lrs.append(lr)
        order = order_rng.gen.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            g.forward({"f": dataset.features[idx], "t": targets[idx]})
            optimizer_step(store, g.backward(), "adam", lr)
    store.freeze()
    acc = float(np.mean(model.predict(store, dataset.features) == dataset.labels))
    counts = {int(s): int(c) for s, c in zip(*np.unique(dataset.labels, return_counts=True))}
    log.info("classifier trained: %d records, %d classes, train accuracy %.4f", n, len(labels), acc)
    return TrainedClassifier(model, store, acc, counts, lrs)


def train_final_classifier(real: Dataset, synthetic: Optional[Dataset], config: TrainConfig) -> TrainedClassifier:
    """Fresh classifier on real + synthetic records, same recipe as pretraining."""
    combined = real if synthetic is None or len(synthetic) == 0 else real.union(synthetic)
    return pretrain_classifier(combined, config)


def save_classifier(path, clf: TrainedClassifier, config: TrainConfig) -> Path:
    return save_checkpoint(
        path, clf.store, kind="classifier", labels=list(clf.model.labels),
        hyperparameters=config.to_dict(), seed=config.seed, interval_set=list(config.interval_set),
        train_accuracy=clf.train_accuracy, class_counts={str(k): v for k, v in clf.class_counts.items()},
    )


def load_classifier(path) -> TrainedClassifier:
    store, doc = load_checkpoint(path)
    if doc.get("kind") != "classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    w = store["cls.W"]
    model = SoftmaxClassifier("cls", w.shape[0], tuple(doc["labels"]))
    counts = {int(k): v for k, v in doc.get("class_counts", {}).items()}
    return TrainedClassifier(model, store, doc.get("train_accuracy", float("nan")), counts)


# ---------------------------------------------------------------------------
# pair sampling


@dataclass
class PairBatch:
    fx: np.ndarray
    s_x: int
    fy: np.ndarray
    s_y: int
    c: ContextInterval
    idx_x: np.ndarray
    idx_y: np.ndarray


def realizable_pairs(dataset: Dataset, interval_set: Sequence[int]) -> Dict[int, List[Tuple[int, int]]]:
    present = set(dataset.label_set)
    out = {}
    for d in interval_set:
        pairs = [(s, s + d) for s in sorted(present) if s + d in present]
        if pairs:
            out[int(d)] = pairs
    return out


def _draw_instances(dataset: Dataset, label: int, n: int, rng: RngStream) -> np.ndarray:
    pool = dataset.class_indices(label)
    replace = len(pool) < n
    return pool[rng.gen.choice(len(pool), size=n, replace=replace)]


def sample_pair_batch(dataset: Dataset, interval_set: Sequence[int], batch_size: int, rng: RngStream,
                      pairs: Optional[Dict[int, List[Tuple[int, int]]]] = None) -> PairBatch:
    """Delta uniform over realizable deltas, then a class pair uniform among its pairs,
    then independent (unpaired) instance draws for each side."""
    pairs = realizable_pairs(dataset, interval_set) if pairs is None else pairs
    if not pairs:
        raise ValueError(f"no class pair in {list(dataset.label_set)} realizes any delta in {list(interval_set)}")
    deltas = sorted(pairs)
    d = deltas[int(rng.integers(len(deltas)))]
    s_x, s_y = pairs[d][int(rng.integers(len(pairs[d])))]
    ix = _draw_instances(dataset, s_x, batch_size, rng)
    iy = _draw_instances(dataset, s_y, batch_size, rng)
    return PairBatch(dataset.features[ix], s_x, dataset.features[iy], s_y, ContextInterval(s_y - s_x), ix, iy)


# ---------------------------------------------------------------------------
# GAN loop


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return math.ceil(n_train / batch_size)


class GanTrainer:
    """Alternating critic ascent / generator descent with plain SGD.

    One graph holds the whole objective; critic steps evaluate it only up to
    the critic loss and differentiate w.r.t. critic parameters, generator
    steps evaluate everything and differentiate w.r.t. generator parameters.
    """

    def __init__(self, dataset: Dataset, classifier: TrainedClassifier, config: TrainConfig,
                 bundle: Optional[ModelBundle] = None):
        config.validate()
        if dataset.feature_dim != config.feature_dim:
            raise ConfigError(f"dataset has feature dim {dataset.feature_dim}, config says {config.feature_dim}")
        self.dataset = dataset
        self.config = config
        self.classifier = classifier
        if bundle is None:
            bundle = ModelBundle.create(
                feature_dim=config.feature_dim, noise_dim=config.noise_dim,
                generator_hidden=config.generator_hidden, critic_hidden=config.critic_hidden,
                intervals=config.interval_set, labels=classifier.model.labels, seed=config.seed,
                embedding_mode=config.embedding_mode, embedding_dim=config.embedding_dim,
                slope=config.leaky_slope, classifier_store=classifier.store,
                classifier_name=classifier.model.name,
            )
        self.bundle = bundle
        self.weights = config.weights
        self.rng = {k: RngStream(config.seed, k) for k in ("data", "noise", "alpha")}
        self.pairs = realizable_pairs(dataset, config.interval_set)
        if not self.pairs:
            raise ValueError("no realizable class pair for the configured interval set")
        self.graph = Graph(bundle.store)
        self.nodes = build_full_objective(self.graph, bundle, self.weights)
        self._gen_params = bundle.generator_params()
        self._critic_params = bundle.critic_params()
        self.step = 0
        self.history: List[LossBreakdown] = []

    @property
    def total_steps(self) -> int:
        n = self.config.epochs * steps_per_epoch(len(self.dataset), self.config.batch_size)
        if self.config.max_generator_steps is not None:
            n = min(n, self.config.max_generator_steps)
        return n

    def _bindings(self):
        b = sample_pair_batch(self.dataset, self.config.interval_set, self.config.batch_size,
                              self.rng["data"], self.pairs)
        return objective_bindings(self.bundle, b.fx, b.fy, b.s_x, b.s_y, b.c, self.rng["noise"], self.rng["alpha"])

    def train_step(self) -> LossBreakdown:
        g, nodes, store = self.graph, self.nodes, self.bundle.store
        for _ in range(self.config.n_critic):
            g.forward(self._bindings(), root=nodes.critic_loss)
            if not np.isfinite(nodes.critic_loss.payload):
                raise NonFiniteError(f"step {self.step}: non-finite critic loss")
            grads = g.backward(self._critic_params, root=nodes.critic_loss)
            optimizer_step(store, grads, "sgd", self.config.critic_lr)
        g.forward(self._bindings(), root=nodes.total)
        br = breakdown_from(nodes, self.weights)
        if not br.finite():
            raise NonFiniteError(f"step {self.step}: non-finite loss {br.to_json_line(self.step)}")
        grads = g.backward(self._gen_params, root=nodes.generator_loss)
        optimizer_step(store, grads, "sgd", self.config.generator_lr)
        self.history.append(br)
        self.step += 1
        return br

    def run(self, steps: Optional[int] = None, log_every: int = 100) -> List[LossBreakdown]:
        target = self.total_steps if steps is None else self.step + steps
        while self.step < target:
            br = self.train_step()
            if log_every and self.step % log_every == 0:
                log.info("gan step %d: cycle %.4f gan_xy %.4f gan_yx %.4f", self.step, br.cycle, br.gan_xy, br.gan_yx)
        return self.history

    def loss_lines(self) -> str:
        return "".join(br.to_json_line(i) + "\n" for i, br in enumerate(self.history))

    def save(self, path) -> Path:
        path = save_checkpoint(
            path, self.bundle.store, kind="gan",
            hyperparameters=self.config.to_dict(), seed=self.config.seed,
            interval_set=list(self.config.interval_set), labels=list(self.bundle.cls.labels),
            state={"step": self.step, "rng": {k: r.get_state() for k, r in self.rng.items()}},
            classifier_train_accuracy=self.classifier.train_accuracy,
        )
        (path / "losses.jsonl").write_text(self.loss_lines(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path, dataset: Dataset) -> "GanTrainer":
        store, doc = load_checkpoint(path)
        if doc.get("kind") != "gan":
            raise ValueError(f"{path} is not a GAN checkpoint")
        config = TrainConfig.from_dict(doc["hyperparameters"])
        bundle = bundle_from_store(store, config, doc["labels"])
        clf_store = ParamStore()
        for n in ("cls.W", "cls.b"):
            clf_store.add(n, store[n], trainable=False)
        clf = TrainedClassifier(bundle.cls, clf_store, doc.get("classifier_train_accuracy", float("nan")), {})
        tr = cls(dataset, clf, config, bundle)
        tr.step = doc["state"]["step"]
        for k, st in doc["state"]["rng"].items():
            tr.rng[k].set_state(st)
        hist_path = Path(path) / "losses.jsonl"
        if hist_path.exists():
            for line in hist_path.read_text(encoding="utf-8").splitlines():
                row = json.loads(line)
                row.pop("step")
                tr.history.append(LossBreakdown(**row, weights=config.weights))
        return tr


def bundle_from_store(store: ParamStore, config: TrainConfig, labels) -> ModelBundle:
    """Rebuild model descriptions around loaded parameters."""
    from cafv.models import ContextEmbedding, Critic, Generator

    emb = ContextEmbedding(config.interval_set, config.embedding_mode, config.embedding_dim)
    s = config.leaky_slope
    return ModelBundle(
        store=store, emb=emb,
        gxy=Generator("gxy", config.feature_dim, config.noise_dim, config.generator_hidden, emb, s),
        gyx=Generator("gyx", config.feature_dim, config.noise_dim, config.generator_hidden, emb, s),
        dx=Critic("dx", config.feature_dim, config.critic_hidden, emb, s),
        dy=Critic("dy", config.feature_dim, config.critic_hidden, emb, s),
        cls=SoftmaxClassifier("cls", config.feature_dim, tuple(labels)),
    )


def load_bundle(path) -> Tuple[ModelBundle, TrainConfig, dict]:
    store, doc = load_checkpoint(path)
    config = TrainConfig.from_dict(doc["hyperparameters"])
    return bundle_from_store(store, config, doc["labels"]), config, doc


def train_gan(dataset: Dataset, classifier: TrainedClassifier, config: TrainConfig) -> GanTrainer:
    """Run the configured number of generator steps; the trainer carries bundle and history."""
    trainer = GanTrainer(dataset, classifier, config)
    trainer.run()
    return trainer


# ---------------------------------------------------------------------------
# synthesis


def admissible_sources(dataset: Dataset, target_label: int, interval_set: Sequence[int]) -> List[int]:
    present = set(dataset.label_set)
    return sorted(target_label - d for d in interval_set if target_label - d in present)


def synthesize_features(bundle: ModelBundle, dataset: Dataset, target_label: int, count: int,
                        rng: RngStream, start_id: int = 0) -> Dataset:
    """``count`` single-step translations into ``target_label`` from adjacent real classes."""
    if count <= 0:
        raise ValueError("count must be positive")
    sources = admissible_sources(dataset, target_label, bundle.emb.intervals)
    if not sources:
        raise ValueError(
            f"no source class within {list(bundle.emb.intervals)} of target {target_label}"
        )
    pick = rng.gen.integers(0, len(sources), size=count)
    src_idx = np.empty(count, dtype=np.int64)
    for i, k in enumerate(pick):
        pool = dataset.class_indices(sources[k])
        src_idx[i] = pool[rng.gen.integers(0, len(pool))]
    z = rng.normal((count, bundle.gxy.noise_dim))
    deltas = target_label - dataset.labels[src_idx]
    out = np.zeros((count, dataset.feature_dim))
    for d in sorted(set(int(x) for x in deltas)):
        rows = np.flatnonzero(deltas == d)
        out[rows] = bundle.gxy(bundle.store, dataset.features[src_idx[rows]], z[rows], ContextInterval(d))
    return Dataset(out, np.full(count, target_label), np.arange(start_id, start_id + count),
                   dataset.ids[src_idx], deltas)
