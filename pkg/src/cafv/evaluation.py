"""Intensity-estimation metrics and the baseline-vs-augmented experiment."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from cafv.autodiff import RngStream
from cafv.data import Dataset, Prototypes
from cafv.models import ModelBundle
from cafv.training import (
    TrainConfig,
    TrainedClassifier,
    synthesize_features,
    train_final_classifier,
    train_gan,
)

log = logging.getLogger(__name__)


def _f1(tp: int, fp: int, fn: int) -> float:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def _pairs(predictions) -> Tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    if len(arr) == 0:
        raise ValueError("no predictions")
    return arr[:, 0], arr[:, 1]


def histogram_of_errors(errors, bin_width: float = 1.0) -> Dict[int, int]:
    """Counts of errors in [k*w, (k+1)*w), keyed by bin index k."""
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("no errors to bin")
    bins, counts = np.unique(np.floor(errors / bin_width).astype(np.int64), return_counts=True)
    return {int(b): int(c) for b, c in zip(bins, counts)}


def error_histogram(predictions, bin_width: float = 1.0) -> Dict[int, int]:
    pred, true = _pairs(predictions)
    return histogram_of_errors(np.abs(pred - true), bin_width)


def histogram_to_csv(hist: Dict[int, int], bin_width: float) -> str:
    rows = ["bin_lower,count"]
    rows += [f"{k * bin_width:g},{v}" for k, v in sorted(hist.items())]
    return "\n".join(rows) + "\n"


@dataclass
class MetricsReport:
    labels: List[int]
    per_class_f1: Dict[int, float]
    per_class_support: Dict[int, int]
    per_class_mae: Dict[int, float]
    per_class_rmse: Dict[int, float]
    macro_f1: float
    weighted_f1: float
    mae: float
    rmse: float
    abs_error_histogram: Dict[int, int]
    bin_width: float
    confusion: List[List[int]]
    excluded_from_macro: List[int]

    def to_dict(self) -> dict:
        key = lambda d: {str(k): v for k, v in sorted(d.items())}
        return {
            "labels": self.labels,
            "per_class_f1": key(self.per_class_f1),
            "per_class_support": key(self.per_class_support),
            "per_class_mae": key(self.per_class_mae),
            "per_class_rmse": key(self.per_class_rmse),
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "mae": self.mae,
            "rmse": self.rmse,
            "abs_error_histogram": key(self.abs_error_histogram),
            "bin_width": self.bin_width,
            "confusion": self.confusion,
            "excluded_from_macro": self.excluded_from_macro,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def summary_csv(self) -> str:
        rows = ["label,support,f1,mae,rmse"]
        for s in self.labels:
            if s in self.per_class_support:
                rows.append(f"{s},{self.per_class_support[s]},{self.per_class_f1[s]!r},"
                            f"{self.per_class_mae[s]!r},{self.per_class_rmse[s]!r}")
        rows.append(f"macro,,{self.macro_f1!r},{self.mae!r},{self.rmse!r}")
        rows.append(f"weighted,,{self.weighted_f1!r},,")
        return "\n".join(rows) + "\n"

    def rare_macro_f1(self, rare: Sequence[int]) -> float:
        return float(np.mean([self.per_class_f1.get(int(s), 0.0) for s in rare]))


def compute_metrics(predictions, bin_width: float = 1.0) -> MetricsReport:
    """Metrics over (predicted, true) intensity pairs in m/s."""
    pred, true = _pairs(predictions)
    err = pred - true
    labels = sorted({int(x) for x in np.concatenate([pred, true])})
    index = {s: i for i, s in enumerate(labels)}
    conf = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, t in zip(pred, true):
        conf[index[int(t)], index[int(p)]] += 1

    f1, support, cmae, crmse = {}, {}, {}, {}
    for s, i in index.items():
        tp = int(conf[i, i])
        fp = int(conf[:, i].sum()) - tp
        fn = int(conf[i, :].sum()) - tp
        f1[s] = _f1(tp, fp, fn)
        n = int(conf[i, :].sum())
        if n:
            support[s] = n
            e = err[true == s]
            cmae[s] = float(np.mean(np.abs(e)))
            crmse[s] = float(math.sqrt(np.mean(e * e)))
    present = sorted(support)
    total = sum(support.values())
    return MetricsReport(
        labels=labels,
        per_class_f1=f1,
        per_class_support=support,
        per_class_mae=cmae,
        per_class_rmse=crmse,
        macro_f1=float(np.mean([f1[s] for s in present])),
        weighted_f1=float(sum(f1[s] * support[s] for s in present) / total),
        mae=float(np.mean(np.abs(err))),
        rmse=float(math.sqrt(np.mean(err * err))),
        abs_error_histogram=histogram_of_errors(np.abs(err), bin_width),
        bin_width=bin_width,
        confusion=conf.tolist(),
        excluded_from_macro=[s for s in labels if s not in support],
    )


def evaluate_classifier(clf: TrainedClassifier, test: Dataset, bin_width: float = 1.0) -> MetricsReport:
    pred = clf.predict(test.features)
    return compute_metrics(np.column_stack([pred, test.labels]), bin_width)


# ---------------------------------------------------------------------------
# synthesis quality


@dataclass
class SynthesisQuality:
    target: int
    n: int
    closer_to_target: float
    ranked_above_source: float
    source_counts: Dict[int, int]

    def to_dict(self) -> dict:
        return {"target": self.target, "n": self.n, "closer_to_target": self.closer_to_target,
                "ranked_above_source": self.ranked_above_source,
                "source_counts": {str(k): v for k, v in sorted(self.source_counts.items())}}


def quality_of(synth: Dataset, dataset: Dataset, prototypes: Prototypes, target: int,
               classifier: TrainedClassifier) -> SynthesisQuality:
    if prototypes is None:
        raise ValueError("synthesis quality needs oracle prototypes")
    pos = np.searchsorted(dataset.ids, synth.source_ids)
    src = dataset.labels[pos]
    mu_t = prototypes.mean_of(target)
    mu_s = np.stack([prototypes.mean_of(s) for s in src])
    closer = np.linalg.norm(synth.features - mu_t, axis=1) < np.linalg.norm(synth.features - mu_s, axis=1)
    logits = classifier.model.logits(classifier.store, synth.features)
    ti = classifier.model.label_index(target)
    si = np.array([classifier.model.label_index(s) for s in src])
    above = logits[:, ti] > logits[np.arange(len(si)), si]
    labels, counts = np.unique(src, return_counts=True)
    return SynthesisQuality(int(target), len(synth), float(closer.mean()), float(above.mean()),
                            {int(s): int(c) for s, c in zip(labels, counts)})


def synthesis_quality(bundle: ModelBundle, dataset: Dataset, prototypes: Prototypes, target_label: int,
                      n: int, classifier: TrainedClassifier, rng: RngStream) -> SynthesisQuality:
    """Fraction of synthesized features nearer the target prototype than their source's,
    and fraction the pretrained classifier scores above the source label."""
    if prototypes is None:
        raise ValueError("synthesis quality needs oracle prototypes")
    synth = synthesize_features(bundle, dataset, target_label, n, rng)
    return quality_of(synth, dataset, prototypes, target_label, classifier)


# ---------------------------------------------------------------------------
# experiment


@dataclass
class ExperimentResult:
    seed: int
    config_hash: str
    config: dict
    rare_labels: List[int]
    synth_count: int
    baseline: MetricsReport
    augmented: MetricsReport
    rare_deltas: Dict[int, Dict[str, float]]
    quality: List[SynthesisQuality] = field(default_factory=list)
    cycle_initial: Optional[float] = None
    cycle_final: Optional[float] = None
    all_losses_finite: bool = True
    generator_steps: int = 0
    baseline_train_accuracy: float = float("nan")

    @property
    def baseline_rare_f1(self) -> float:
        return self.baseline.rare_macro_f1(self.rare_labels)

    @property
    def augmented_rare_f1(self) -> float:
        return self.augmented.rare_macro_f1(self.rare_labels)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": self.config,
            "rare_labels": self.rare_labels,
            "synth_count": self.synth_count,
            "baseline": self.baseline.to_dict(),
            "augmented": self.augmented.to_dict(),
            "baseline_rare_macro_f1": self.baseline_rare_f1,
            "augmented_rare_macro_f1": self.augmented_rare_f1,
            "rare_deltas": {str(k): v for k, v in sorted(self.rare_deltas.items())},
            "quality": [q.to_dict() for q in self.quality],
            "cycle_initial": self.cycle_initial,
            "cycle_final": self.cycle_final,
            "all_losses_finite": self.all_losses_finite,
            "generator_steps": self.generator_steps,
            "baseline_train_accuracy": self.baseline_train_accuracy,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def table_csv(results: Sequence[Tuple[str, MetricsReport]], labels: Sequence[int]) -> str:
    """One row per method: f1 (%), MAE and RMSE for each class, laid out like the rare-class table."""
    head = ["method"]
    for metric in ("f1", "mae", "rmse"):
        head += [f"{metric}_{s}" for s in labels]
    rows = [",".join(head)]
    for name, rep in results:
        cells = [name]
        cells += [f"{100 * rep.per_class_f1.get(s, 0.0):.2f}" for s in labels]
        cells += [f"{rep.per_class_mae[s]:.2f}" if s in rep.per_class_mae else "" for s in labels]
        cells += [f"{rep.per_class_rmse[s]:.2f}" if s in rep.per_class_rmse else "" for s in labels]
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"


def augmentation_experiment(train: Dataset, test: Dataset, rare_labels: Sequence[int], config: TrainConfig,
                            prototypes: Optional[Prototypes] = None, synth_count: Optional[int] = None,
                            return_trainer: bool = False):
    """Baseline (real only) vs augmented (real + synthesized rare-class features) on one test set."""
    config.validate()
    rare = sorted(int(s) for s in rare_labels)
    missing = [s for s in rare if s not in train.label_set]
    if missing:
        raise ValueError(f"rare labels {missing} not in the training label set")
    count = config.synth_per_class if synth_count is None else synth_count

    baseline = train_final_classifier(train, None, config)
    synthetic = Dataset.empty(train.feature_dim)
    trainer = None
    quality = []
    if count > 0:
        # same recipe and seed as pretraining, so the baseline doubles as the frozen classifier
        pretrained = baseline
        trainer = train_gan(train, pretrained, config)
        parts = []
        next_id = int(train.ids.max()) + 1
        for s in rare:
            part = synthesize_features(trainer.bundle, train, s, count, RngStream(config.seed, f"synth-{s}"),
                                       start_id=next_id)
            next_id += count
            parts.append(part)
            if prototypes is not None:
                quality.append(quality_of(part, train, prototypes, s, pretrained))
        for p in parts:
            synthetic = synthetic.union(p) if len(synthetic) else p
    augmented = train_final_classifier(train, synthetic, config)

    base_rep = evaluate_classifier(baseline, test, config.hist_bin_width)
    aug_rep = evaluate_classifier(augmented, test, config.hist_bin_width)
    deltas = {}
    for s in rare:
        deltas[s] = {
            "f1": aug_rep.per_class_f1.get(s, 0.0) - base_rep.per_class_f1.get(s, 0.0),
            "mae": aug_rep.per_class_mae.get(s, float("nan")) - base_rep.per_class_mae.get(s, float("nan")),
            "rmse": aug_rep.per_class_rmse.get(s, float("nan")) - base_rep.per_class_rmse.get(s, float("nan")),
        }
    hist = trainer.history if trainer is not None else []
    result = ExperimentResult(
        seed=config.seed, config_hash=config.digest(), config=config.to_dict(), rare_labels=rare,
        synth_count=count, baseline=base_rep, augmented=aug_rep, rare_deltas=deltas, quality=quality,
        cycle_initial=float(np.mean([b.cycle for b in hist[:10]])) if hist else None,
        cycle_final=float(np.mean([b.cycle for b in hist[-10:]])) if hist else None,
        all_losses_finite=all(b.finite() for b in hist),
        generator_steps=len(hist),
        baseline_train_accuracy=baseline.train_accuracy,
    )
    return (result, trainer) if return_trainer else result


def median_summary(results: Sequence[ExperimentResult]) -> dict:
    """Medians across seeds of the headline numbers."""
    med = lambda xs: float(np.median(xs)) if len(xs) else None
    qa = [np.mean([q.closer_to_target for q in r.quality]) for r in results if r.quality]
    qb = [np.mean([q.ranked_above_source for q in r.quality]) for r in results if r.quality]
    return {
        "seeds": [r.seed for r in results],
        "baseline_rare_macro_f1": med([r.baseline_rare_f1 for r in results]),
        "augmented_rare_macro_f1": med([r.augmented_rare_f1 for r in results]),
        "baseline_macro_f1": med([r.baseline.macro_f1 for r in results]),
        "augmented_macro_f1": med([r.augmented.macro_f1 for r in results]),
        "baseline_mae": med([r.baseline.mae for r in results]),
        "augmented_mae": med([r.augmented.mae for r in results]),
        "baseline_rmse": med([r.baseline.rmse for r in results]),
        "augmented_rmse": med([r.augmented.rmse for r in results]),
        "quality_closer_to_target": med(qa),
        "quality_ranked_above_source": med(qb),
        "cycle_ratio": med([r.cycle_final / r.cycle_initial for r in results if r.cycle_initial]),
    }
