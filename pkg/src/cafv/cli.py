"""``cafv`` command line: data generation, training, synthesis, evaluation and checks.

Each subcommand runs in two phases. ``prepare`` parses configs and reads every
input; failures there exit 1 and leave no output behind. The returned action
does the work and writes files; failures there exit 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

from cafv import __version__
from cafv.autodiff import RngStream
from cafv.checkpoint import CheckpointError, dumps_canonical, read_manifest
from cafv.data import (
    Dataset,
    FeatureFileError,
    Prototypes,
    SyntheticSpec,
    class_histogram,
    histogram_csv,
    load_features,
    make_synthetic_benchmark,
    save_features,
)
from cafv.evaluation import (
    augmentation_experiment,
    evaluate_classifier,
    histogram_to_csv,
    median_summary,
    table_csv,
)
from cafv.gradcheck import format_table, run_gradcheck
from cafv.plotting import error_histogram_svg
from cafv.training import (
    ConfigError,
    GanTrainer,
    TrainConfig,
    load_bundle,
    load_classifier,
    pretrain_classifier,
    save_classifier,
    synthesize_features,
)

log = logging.getLogger("cafv")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
EXTENSIONS = {"csv": ".csv", "binary": ".cafv"}
# printed by inspect-checkpoint, in this order
INSPECT_KEYS = ("lambda1", "lambda2", "beta", "noise_dim", "generator_hidden", "critic_hidden",
                "classifier_lr", "classifier_lr_decay", "classifier_decay_every", "generator_lr",
                "critic_lr", "n_critic", "interval_set", "embedding_mode", "feature_dim", "seed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> float:
    # SOURCE_DATE_EPOCH pins the timestamps so whole output trees can be compared byte for byte
    pinned = os.environ.get("SOURCE_DATE_EPOCH")
    return float(pinned) if pinned else time.time()


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Optional[dict]
    seed: Optional[int]
    inputs: List[str]
    out_dir: Path
    started: float = field(default_factory=_now)

    def write(self, outputs: List[Path]) -> Path:
        doc = {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seed": self.seed,
            "inputs": [{"path": p, "sha256": sha256_file(Path(p))} for p in self.inputs if Path(p).is_file()],
            "outputs": [{"path": str(p.relative_to(self.out_dir)), "sha256": sha256_file(p)}
                        for p in sorted(outputs)],
            "started": self.started,
            "finished": _now(),
            "tool_version": __version__,
        }
        path = self.out_dir / "run_manifest.json"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(dumps_canonical(doc), encoding="utf-8")
        os.replace(tmp, path)
        return path


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path


def _files_under(root: Path) -> List[Path]:
    return [p for p in root.rglob("*") if p.is_file() and p.name != "run_manifest.json"]


# ---------------------------------------------------------------------------
# shared input handling


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg.validate()


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    return out


def _dataset(path, split="train") -> Dataset:
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such feature file: {path}")
    return load_features(path, split=split)


def _check_dim(ds: Dataset, cfg: TrainConfig, what: str) -> None:
    if ds.feature_dim != cfg.feature_dim:
        raise ConfigError(f"{what} has feature dim {ds.feature_dim}, config says {cfg.feature_dim}")


def _find_split(data_dir: Path, split: str) -> Path:
    for ext in EXTENSIONS.values():
        p = data_dir / f"{split}{ext}"
        if p.is_file():
            return p
    raise FileNotFoundError(f"{data_dir}: no {split}.csv or {split}.cafv")


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands; each returns (config snapshot, seed, inputs, action)

Action = Callable[[Path], List[Path]]


def prep_gen_data(args):
    spec = SyntheticSpec()
    if args.spec:
        try:
            doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.spec}: invalid JSON: {exc}") from None
        spec = SyntheticSpec.from_dict(doc)
    if args.seed is not None:
        spec = SyntheticSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    spec.validate()
    ext = EXTENSIONS[args.format]

    def action(out: Path):
        train, test, proto = make_synthetic_benchmark(spec)
        paths = [out / f"train{ext}", out / f"test{ext}"]
        save_features(train, paths[0], args.format)
        save_features(test, paths[1], args.format)
        paths.append(_write(out / "prototypes.csv", proto.to_csv()))
        paths.append(_write(out / "class_histogram.csv", histogram_csv(class_histogram(train))))
        log.info("wrote %d train / %d test records to %s", len(train), len(test), out)
        return paths

    return spec.to_dict(), spec.seed, [args.spec] if args.spec else [], action


def prep_train_classifier(args):
    cfg = _load_config(args)
    ds = _dataset(args.data)
    _check_dim(ds, cfg, args.data)
    if len(ds.label_set) < 2:
        raise ConfigError("classifier training needs at least two classes")

    def action(out: Path):
        clf = pretrain_classifier(ds, cfg)
        save_classifier(out / "classifier", clf, cfg)
        log.info("classifier train accuracy %.4f", clf.train_accuracy)
        return _files_under(out / "classifier")

    return cfg.to_dict(), cfg.seed, [args.data], action


def prep_train_gan(args):
    ds = _dataset(args.data)
    if args.resume:
        trainer = GanTrainer.load(args.resume, ds)
        cfg = trainer.config
        if args.seed is not None or args.config:
            raise UsageError("--resume takes config and seed from the checkpoint")
    else:
        cfg = _load_config(args)
        _check_dim(ds, cfg, args.data)
        if not args.classifier:
            raise UsageError("train-gan needs --classifier (or --resume)")
        clf = load_classifier(args.classifier)
        if tuple(clf.model.labels) != tuple(ds.label_set):
            raise ConfigError(f"classifier labels {list(clf.model.labels)} differ from data labels "
                              f"{list(ds.label_set)}")
        trainer = GanTrainer(ds, clf, cfg)
    steps = args.steps
    if steps is not None and steps < 0:
        raise UsageError("--steps must be >= 0")

    def action(out: Path):
        todo = trainer.total_steps - trainer.step if steps is None else steps
        trainer.run(steps=max(todo, 0))
        trainer.save(out / "gan")
        if trainer.history:
            last = trainer.history[-1]
            log.info("step %d: cycle %.4f total %.4f", trainer.step, last.cycle, last.total)
        return _files_under(out / "gan")

    inputs = [args.data] + ([args.classifier] if args.classifier else [])
    return cfg.to_dict(), cfg.seed, inputs, action


def prep_synthesize(args):
    bundle, cfg, doc = load_bundle(args.checkpoint)
    ds = _dataset(args.data)
    _check_dim(ds, cfg, args.data)
    if args.count is None or args.count <= 0:
        raise UsageError("--count must be positive")
    if args.target is None:
        raise UsageError("synthesize needs --target")
    seed = cfg.seed if args.seed is None else args.seed
    ext = EXTENSIONS[args.format]

    def action(out: Path):
        synth = synthesize_features(bundle, ds, args.target, args.count, RngStream(seed, f"synth-{args.target}"),
                                    start_id=int(ds.ids.max()) + 1 if len(ds) else 0)
        path = out / f"synthetic_{args.target}{ext}"
        out.mkdir(parents=True, exist_ok=True)
        save_features(synth, path, args.format)
        return [path]

    return cfg.to_dict(), seed, [args.data], action


def prep_evaluate(args):
    clf = load_classifier(args.classifier)
    ds = _dataset(args.data, split="test")
    if ds.feature_dim != clf.model.feature_dim:
        raise ConfigError(f"{args.data} has feature dim {ds.feature_dim}, classifier expects "
                          f"{clf.model.feature_dim}")
    if not args.bin_width > 0:
        raise UsageError("--bin-width must be positive")

    def action(out: Path):
        rep = evaluate_classifier(clf, ds, args.bin_width)
        return [
            _write(out / "metrics.json", rep.to_json()),
            _write(out / "summary.csv", rep.summary_csv()),
            _write(out / "error_histogram.csv", histogram_to_csv(rep.abs_error_histogram, args.bin_width)),
        ]

    return None, None, [args.data], action


def prep_augment_eval(args):
    cfg = _load_config(args)
    data_dir = Path(args.data)
    train = _dataset(_find_split(data_dir, "train"))
    test = _dataset(_find_split(data_dir, "test"), split="test")
    _check_dim(train, cfg, "train split")
    _check_dim(test, cfg, "test split")
    proto_path = data_dir / "prototypes.csv"
    proto = Prototypes.from_csv(proto_path.read_text(encoding="utf-8")) if proto_path.is_file() else None
    if not args.rare:
        raise UsageError("augment-eval needs --rare")
    rare = _int_list(args.rare)
    missing = [s for s in rare if s not in train.label_set]
    if missing:
        raise ConfigError(f"rare labels {missing} are not training labels")
    seeds = _int_list(args.seeds) if args.seeds else [cfg.seed]

    def action(out: Path):
        paths, results = [], []
        for seed in sorted(seeds):
            res = augmentation_experiment(train, test, rare, cfg.replace(seed=seed), prototypes=proto)
            results.append(res)
            d = out / f"seed-{seed}"
            hists = {"baseline": res.baseline.abs_error_histogram, "augmented": res.augmented.abs_error_histogram}
            paths += [
                _write(d / "result.json", res.to_json()),
                _write(d / "table.csv", table_csv([("baseline", res.baseline), ("augmented", res.augmented)],
                                                  sorted(train.label_set))),
                _write(d / "error_histogram_baseline.csv", histogram_to_csv(hists["baseline"], cfg.hist_bin_width)),
                _write(d / "error_histogram_augmented.csv",
                       histogram_to_csv(hists["augmented"], cfg.hist_bin_width)),
                _write(d / "error_histogram.svg", error_histogram_svg(hists, cfg.hist_bin_width)),
            ]
            log.info("seed %d: rare macro f1 %.4f -> %.4f", seed, res.baseline_rare_f1, res.augmented_rare_f1)
        paths.append(_write(out / "summary.json", dumps_canonical(median_summary(results))))
        return paths

    inputs = [str(p) for p in sorted(data_dir.iterdir()) if p.is_file()]
    return cfg.to_dict(), cfg.seed, inputs, action


def prep_gradcheck(args):
    base = 0 if args.seed is None else args.seed
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    seeds = list(range(base, base + args.count))

    def action(out: Optional[Path]):
        rows = run_gradcheck(seeds)
        table = format_table(rows)
        sys.stdout.write(table)
        action.ok = all(r.ok for r in rows)
        return [_write(out / "gradcheck.csv", table)] if out is not None else []

    return None, base, [], action


def prep_inspect(args):
    doc = read_manifest(args.checkpoint)

    def action(out: Optional[Path]):
        hp = doc.get("hyperparameters", {})
        lines = [f"kind: {doc.get('kind', 'unknown')}", f"format_version: {doc['format_version']}",
                 f"parameters: {len(doc['params'])}"]
        for k in INSPECT_KEYS:
            if k in hp:
                lines.append(f"{k}: {json.dumps(hp[k])}")
        if "state" in doc:
            lines.append(f"step: {doc['state']['step']}")
        text = "\n".join(lines) + "\n"
        sys.stdout.write(text)
        return [_write(out / "inspect.txt", text)] if out is not None else []

    return None, None, [str(Path(args.checkpoint) / "manifest.json")], action


COMMANDS = {
    "gen-data": prep_gen_data,
    "train-classifier": prep_train_classifier,
    "train-gan": prep_train_gan,
    "synthesize": prep_synthesize,
    "evaluate": prep_evaluate,
    "augment-eval": prep_augment_eval,
    "gradcheck": prep_gradcheck,
    "inspect-checkpoint": prep_inspect,
}
# commands that print instead of writing files; --out is optional for them
PRINTING = {"gradcheck", "inspect-checkpoint"}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--config")
    common.add_argument("--format", choices=("csv", "binary"), default="csv")
    common.add_argument("--quiet", action="store_true")

    p = _Parser(prog="cafv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="write the synthetic benchmark")
    s.add_argument("--spec", help="JSON file with SyntheticSpec fields")

    s = sub.add_parser("train-classifier", parents=[common], help="pretrain the softmax classifier")
    s.add_argument("--data", required=True)

    s = sub.add_parser("train-gan", parents=[common], help="train the context-aware CycleGAN")
    s.add_argument("--data", required=True)
    s.add_argument("--classifier", help="classifier checkpoint directory")
    s.add_argument("--resume", help="GAN checkpoint directory to continue from")
    s.add_argument("--steps", type=int, help="generator steps to run (default: to the configured end)")

    s = sub.add_parser("synthesize", parents=[common], help="synthesize features for a target class")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--target", type=int)
    s.add_argument("--count", type=int)

    s = sub.add_parser("evaluate", parents=[common], help="metrics of a classifier on a feature file")
    s.add_argument("--classifier", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--bin-width", type=float, default=1.0)

    s = sub.add_parser("augment-eval", parents=[common], help="baseline vs augmented classifier")
    s.add_argument("--data", required=True, help="directory written by gen-data")
    s.add_argument("--rare")
    s.add_argument("--seeds")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss")
    s.add_argument("--count", type=int, default=20, help="number of random models")

    s = sub.add_parser("inspect-checkpoint", parents=[common], help="print a checkpoint's manifest")
    s.add_argument("checkpoint")
    return p


def _setup_logging(quiet: bool) -> None:
    level = os.environ.get("CAFV_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.ERROR if quiet else levels.get(level, logging.INFO))
    log.propagate = False


VALIDATION_ERRORS = (UsageError, ConfigError, FeatureFileError, CheckpointError, FileNotFoundError,
                     ValueError, KeyError, json.JSONDecodeError)


def run(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    _setup_logging(args.quiet)

    try:
        out = Path(args.out) if args.out else None
        if args.command not in PRINTING:
            out = _require_out(args)
        config, seed, inputs, action = COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(f"cafv {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE

    manifest = RunManifest(args.command, argv, config, seed, [str(p) for p in inputs], out) if out else None
    try:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        outputs = action(out)
        if manifest is not None:
            manifest.write(outputs)
    except Exception as exc:  # runtime failure after validation
        log.debug("traceback", exc_info=True)
        print(f"cafv {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.command == "gradcheck" and not action.ok:
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())
