"""Command-line pipeline: one subcommand per stage, deterministic given ``--seed``.

Exit status is 0 on success, 1 for usage, validation and configuration
errors, 2 for I/O and file-format errors.  Errors go to stderr as a single
line starting with ``error:``.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np

from .bench import DEFAULT_FRACTIONS, bench_hyperparams, run_classification_experiment, run_detection_experiment
from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import Classifier, ClassifierConfig, alternating_train, sample_weights, train_classifier
from .data import (
    Hyperparams,
    NoisyDataset,
    ReferenceSet,
    load_dataset,
    save_features,
    save_labels,
    split_dataset,
)
from .detection import make_report, read_report, select_threshold
from .errors import CleanNetError, FormatError, ValidationError
from .model import CleanNet, train_cleannet
from .references import build_reference_sets
from .synthetic import SyntheticSpec, choose_held_out, generate_dataset

log = logging.getLogger("cleannet")

USAGE_ERROR = 1
IO_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ helpers


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _omega(text: str):
    return text if text == "auto" else float(text)


def _read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _apply_config(parser: argparse.ArgumentParser, config: dict[str, str]) -> None:
    """Config values become parser defaults, so explicit flags still win."""
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in config.items():
        action = actions.get(key)
        if action is None:
            raise ValidationError(f"config key {key!r} is not an option of this subcommand")
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in _TRUE | _FALSE:
                raise ValidationError(f"config key {key!r} needs a boolean")
            defaults[key] = value.lower() in _TRUE
        else:
            defaults[key] = value
    parser.set_defaults(**defaults)


def _require(args, parser, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        parser.error("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _check_outputs(args, inputs, outputs):
    ins = {Path(getattr(args, n)).resolve() for n in inputs if getattr(args, n, None)}
    for n in outputs:
        if getattr(args, n, None) and Path(getattr(args, n)).resolve() in ins:
            raise ValidationError(f"--{n.replace('_', '-')} would overwrite an input file")


def _load_data(features, labels, classes=None, l2=False) -> NoisyDataset:
    ds = load_dataset(features, labels, classes)
    return ds.l2_normalized() if l2 else ds


def _load_kind(path, kind):
    obj = load_checkpoint(path)
    ok = {"cleannet": CleanNet, "classifier": Classifier}.get(kind)
    if kind == "references":
        if not isinstance(obj, dict):
            raise FormatError(f"{path}: expected a references checkpoint")
    elif not isinstance(obj, ok):
        raise FormatError(f"{path}: expected a {kind} checkpoint")
    return obj


def _hyperparams(args) -> Hyperparams:
    values = {}
    for f in fields(Hyperparams):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    values["seed"] = args.seed
    return Hyperparams(**values)


def _classifier_config(args) -> ClassifierConfig:
    base = ClassifierConfig(seed=args.seed)
    for f in fields(ClassifierConfig):
        v = getattr(args, "clf_" + f.name, None)
        if v is not None:
            setattr(base, f.name, v)
    return base


def _spec(args) -> SyntheticSpec:
    values = dict(classes=args.classes, dim=args.dim, per_class=args.per_class, noise_rate=args.noise,
                  separation=args.separation, std=args.std, centroid_rank=args.centroid_rank,
                  verified_fraction=args.verified, seed=args.seed)
    values = {k: v for k, v in values.items() if v is not None}
    if values.get("centroid_rank") == 0:
        values["centroid_rank"] = None
    spec = SyntheticSpec(**values)
    held = _int_list(args.held_out_classes) if args.held_out_classes else ()
    if args.held_out:
        held = tuple(sorted(set(held) | set(choose_held_out(spec.classes, args.held_out, args.seed))))
    if held:
        spec = SyntheticSpec(**{**spec.to_dict(), "held_out_classes": held})
    return spec


def _write_tsv(path, header, rows):
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
                               for v in row))
    text = "\n".join(lines) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    return text


def _log_rows(history):
    if not history:
        return [], []
    header = list(history[0])
    return header, [[r[k] for k in header] for r in history]


def _read_weights(path, n):
    w = np.ones(n)
    seen = np.zeros(n, bool)
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("sample_index"):
            continue
        parts = line.split("\t")
        try:
            i, v = int(parts[0]), float(parts[1])
        except (ValueError, IndexError):
            raise FormatError(f"{path}: malformed weight record", offset=lineno) from None
        if not 0 <= i < n or not math.isfinite(v) or v < 0:
            raise ValidationError(f"{path}:{lineno}: bad sample index or weight")
        w[i], seen[i] = v, True
    if not seen.all():
        raise ValidationError(f"{path}: {int((~seen).sum())} samples have no weight")
    return w


# -------------------------------------------------------------- subcommands


def cmd_gen(args, parser):
    _require(args, parser, "out")
    spec = _spec(args)
    ds, true = generate_dataset(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_features(out / "features.bin", ds.features)
    save_labels(out / "labels.tsv", ds.noisy_labels, ds.verification_labels)
    _write_tsv(out / "truth.tsv", ["sample_index", "true_class"], enumerate(true.tolist()))
    _write_tsv(out / "spec.tsv", ["key", "value"], sorted(spec.to_dict().items()))
    print(f"wrote {len(ds)} samples, {ds.dim} dims, {ds.class_count} classes to {out}")


def cmd_select_ref(args, parser):
    _require(args, parser, "features", "labels", "out")
    _check_outputs(args, ["features", "labels"], ["out"])
    ds = _load_data(args.features, args.labels, args.classes, args.l2_normalize)
    K = args.K if args.K is not None else Hyperparams().K
    refs = build_reference_sets(ds, K, args.method, seed=args.seed, max_iter=args.max_iter)
    save_checkpoint(refs, args.out)
    print(f"{len(refs)} reference sets ({args.method}, K={K}) -> {args.out}")


def cmd_train_cleannet(args, parser):
    _require(args, parser, "features", "labels", "refs", "out")
    _check_outputs(args, ["features", "labels", "refs", "init"], ["out", "log"])
    hp = _hyperparams(args)
    ds = _load_data(args.features, args.labels, args.classes, hp.l2_normalize)
    refs = _load_kind(args.refs, "references")
    init = _load_kind(args.init, "cleannet") if args.init else None
    model, history = train_cleannet(ds, refs, hp, init=init)
    save_checkpoint(model, args.out)
    header, rows = _log_rows(history)
    text = _write_tsv(args.log, header, rows) if header else ""
    sys.stdout.write(text)


def _scored(args):
    model = _load_kind(args.model, "cleannet")
    refs = _load_kind(args.refs, "references")
    ds = _load_data(args.features, args.labels, args.classes, model.hp.l2_normalize)
    return model, refs, ds, model.score(ds.features, ds.noisy_labels, refs)


def cmd_detect(args, parser):
    _require(args, parser, "model", "refs", "features", "labels", "out")
    _check_outputs(args, ["model", "refs", "features", "labels"], ["out"])
    model, refs, ds, scores = _scored(args)
    delta = args.delta if args.delta is not None else model.hp.rho
    report = make_report(scores, ds.noisy_labels, ds.verification_labels, delta)
    report.save(args.out)
    print(f"delta {delta!r} average_error {report.average_error!r}")


def cmd_select_threshold(args, parser):
    if args.report:
        rep = read_report(args.report)
        scores, labels, cls = rep.scores, rep.verification_labels, rep.class_ids
        default = args.default if args.default is not None else Hyperparams().rho
    else:
        _require(args, parser, "model", "refs", "features", "labels")
        model, _, ds, scores = _scored(args)
        labels, cls = ds.verification_labels, ds.noisy_labels
        default = args.default if args.default is not None else model.hp.rho
    delta = select_threshold(scores, labels, cls, default=default)
    print(repr(delta))
    if args.out:
        Path(args.out).write_text(repr(delta) + "\n", encoding="utf-8")


def cmd_weigh(args, parser):
    _require(args, parser, "model", "refs", "features", "labels", "out")
    _check_outputs(args, ["model", "refs", "features", "labels"], ["out"])
    if args.mode == "hard" and args.delta is None:
        parser.error("--mode hard needs --delta")
    model = _load_kind(args.model, "cleannet")
    refs = _load_kind(args.refs, "references")
    ds = _load_data(args.features, args.labels, args.classes, model.hp.l2_normalize)
    w = sample_weights(args.mode, ds.features, ds.noisy_labels, model, refs, args.delta)
    _write_tsv(args.out, ["sample_index", "weight"], enumerate(w.tolist()))
    print(f"{args.mode} weights: mean {float(w.mean())!r} -> {args.out}")


def cmd_train_classifier(args, parser):
    _require(args, parser, "features", "labels", "out")
    _check_outputs(args, ["features", "labels", "weights", "init"], ["out", "log"])
    ds = _load_data(args.features, args.labels, args.classes)
    w = _read_weights(args.weights, len(ds)) if args.weights else None
    init = _load_kind(args.init, "classifier") if args.init else None
    clf, history = train_classifier(ds, w, _classifier_config(args), init=init)
    save_checkpoint(clf, args.out)
    header, rows = _log_rows(history)
    sys.stdout.write(_write_tsv(args.log, header, rows))


def cmd_alt_train(args, parser):
    _require(args, parser, "features", "labels", "out")
    ds = _load_data(args.features, args.labels, args.classes)
    if args.val_features or args.val_labels:
        _require(args, parser, "val_features", "val_labels")
        train, val = ds, _load_data(args.val_features, args.val_labels, ds.class_count)
    else:
        train, val = split_dataset(ds, (1 - args.val_fraction, args.val_fraction), seed=args.seed)
    result = alternating_train(train, val, _hyperparams(args), _classifier_config(args), mode=args.mode,
                               patience=args.patience, max_rounds=args.max_rounds,
                               warm_start=not args.fresh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.classifier, out / "classifier.ckpt")
    save_checkpoint(result.cleannet, out / "cleannet.ckpt")
    save_checkpoint(result.refs, out / "refs.ckpt")
    header, rows = _log_rows(result.rounds)
    sys.stdout.write(_write_tsv(out / "rounds.tsv", header, rows))
    print(f"best round {result.best_round}, delta {result.delta!r}")


def _bench(args, parser, runner):
    spec = _spec(args)
    base = bench_hyperparams()
    for f in fields(Hyperparams):
        if getattr(args, f.name, None) is None:
            setattr(args, f.name, getattr(base, f.name))
    report = runner(spec, _hyperparams(args), _classifier_config(args), DEFAULT_FRACTIONS, args.ref_method)
    if args.out:
        Path(args.out).write_text(report.to_tsv(), encoding="utf-8")
    print(report.summary())


def cmd_bench_detect(args, parser):
    _bench(args, parser, run_detection_experiment)


def cmd_bench_classify(args, parser):
    _bench(args, parser, run_classification_experiment)


def cmd_eval(args, parser):
    _require(args, parser, "report")
    rep = read_report(args.report)
    labels = rep.verification_labels
    if args.truth:
        true = np.zeros(int(rep.sample_index.max()) + 1 if len(rep.sample_index) else 0, dtype=np.int64)
        for lineno, line in enumerate(Path(args.truth).read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip() or line.startswith("sample_index"):
                continue
            try:
                i, c = (int(t) for t in line.split("\t"))
            except ValueError:
                raise FormatError(f"{args.truth}: malformed record", offset=lineno) from None
            if i < true.size:
                true[i] = c
        labels = (rep.class_ids == true[rep.sample_index]).astype(np.int64)
    rep = make_report(rep.scores, rep.class_ids, labels, rep.delta, method=rep.method,
                      sample_index=rep.sample_index)
    print(f"method\t{rep.method}")
    print(f"delta\t{rep.delta!r}")
    print(f"average_error\t{rep.average_error!r}")
    for c in sorted(rep.per_class_error):
        print(f"class_error\t{c}\t{rep.per_class_error[c]!r}")
    if rep.excluded_classes:
        print("excluded_classes\t" + ",".join(map(str, rep.excluded_classes)))


# ------------------------------------------------------------------- parser


def _hp_flags(p):
    g = p.add_argument_group("CleanNet hyperparameters")
    g.add_argument("--rho", type=float)
    g.add_argument("--omega", type=_omega, help="positive number or 'auto'")
    g.add_argument("--beta", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--K", type=int, dest="K", help="reference set size")
    g.add_argument("--hidden", type=int)
    g.add_argument("--embed", type=int)
    g.add_argument("--ae-hidden", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--unverified-fraction", type=float)
    g.add_argument("--l2-normalize", action="store_true", default=None)


def _clf_flags(p):
    g = p.add_argument_group("classifier")
    g.add_argument("--clf-hidden", type=int)
    g.add_argument("--clf-lr", type=float)
    g.add_argument("--clf-momentum", type=float)
    g.add_argument("--clf-epochs", type=int)
    g.add_argument("--clf-finetune-epochs", type=int)
    g.add_argument("--clf-batch-size", type=int)


def _spec_flags(p):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--classes", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--per-class", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--separation", type=float)
    g.add_argument("--std", type=float)
    g.add_argument("--centroid-rank", type=int, help="0 for full rank")
    g.add_argument("--verified", type=float, help="verified fraction per class")
    g.add_argument("--held-out", type=int, default=0, help="number of random classes to hold out")
    g.add_argument("--held-out-classes", help="comma-separated class ids to hold out")


def _data_flags(p):
    p.add_argument("--features")
    p.add_argument("--labels")
    p.add_argument("--classes", type=int, help="class count (default: largest label)")


def _model_flags(p):
    p.add_argument("--model")
    p.add_argument("--refs")
    _data_flags(p)


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="key=value file; flags override it")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="cleannet", description="CleanNet label-noise pipeline")
    subs = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    def sub(name, fn, help):
        p = subs.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=fn)
        return p

    p = sub("gen", cmd_gen, "generate a synthetic noisy dataset")
    _spec_flags(p)
    p.add_argument("--out", help="output directory")

    p = sub("select-ref", cmd_select_ref, "build per-class reference sets")
    _data_flags(p)
    p.add_argument("--method", choices=("kmeans", "random"), default="kmeans")
    p.add_argument("--K", type=int, dest="K")
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--l2-normalize", action="store_true")
    p.add_argument("--out")

    p = sub("train-cleannet", cmd_train_cleannet, "train CleanNet")
    _data_flags(p)
    p.add_argument("--refs")
    p.add_argument("--init", help="warm-start checkpoint")
    _hp_flags(p)
    p.add_argument("--out")
    p.add_argument("--log", help="per-epoch loss TSV")

    p = sub("detect", cmd_detect, "score samples and write a detection report")
    _model_flags(p)
    p.add_argument("--delta", type=float)
    p.add_argument("--out")

    p = sub("select-threshold", cmd_select_threshold, "choose delta on verified samples")
    _model_flags(p)
    p.add_argument("--report", help="reuse scores from a detection report")
    p.add_argument("--default", type=float)
    p.add_argument("--out")

    p = sub("weigh", cmd_weigh, "CleanNet sample weights")
    _model_flags(p)
    p.add_argument("--mode", choices=("soft", "hard"), default="soft")
    p.add_argument("--delta", type=float)
    p.add_argument("--out")

    p = sub("train-classifier", cmd_train_classifier, "train the (weighted) softmax classifier")
    _data_flags(p)
    p.add_argument("--weights", help="weight TSV from 'weigh'")
    p.add_argument("--init", help="warm-start checkpoint")
    _clf_flags(p)
    p.add_argument("--out")
    p.add_argument("--log")

    p = sub("alt-train", cmd_alt_train, "alternating classifier / CleanNet training")
    _data_flags(p)
    p.add_argument("--val-features")
    p.add_argument("--val-labels")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--mode", choices=("soft", "hard", "none"), default="soft")
    p.add_argument("--patience", type=int, default=1)
    p.add_argument("--max-rounds", type=int, default=5)
    p.add_argument("--fresh", action="store_true", help="retrain CleanNet from scratch each round")
    _hp_flags(p)
    _clf_flags(p)
    p.add_argument("--out", help="output directory")

    for name, fn, text in (("bench-detect", cmd_bench_detect, "synthetic detection benchmark"),
                           ("bench-classify", cmd_bench_classify, "synthetic classification benchmark")):
        p = sub(name, fn, text)
        _spec_flags(p)
        _hp_flags(p)
        _clf_flags(p)
        p.add_argument("--ref-method", choices=("kmeans", "random"), default="kmeans")
        p.add_argument("--out", help="report TSV")

    p = sub("eval", cmd_eval, "summarise a detection report")
    p.add_argument("--report")
    p.add_argument("--truth", help="truth.tsv from 'gen'; scores every sample")
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(name)
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
            if args.command is None:
                parser.error("a command is required")
            sp = _subparser(parser, args.command)
            if args.config:
                _apply_config(sp, _read_config(args.config))
                args = parser.parse_args(argv)
        except UsageError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return USAGE_ERROR
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        logging.captureWarnings(True)
        args.func(args, sp)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (FormatError, OSError) as exc:
        print(f"error: {exc}".replace("\n", " "), file=sys.stderr)
        return IO_ERROR
    except (CleanNetError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}".replace("\n", " "), file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
