"""Command-line entry point: ``routerad <subcommand> ...``.

Exit status: 0 success, 1 usage error, 2 data or configuration error,
3 solver non-convergence. Every run writes a reproducibility stamp (tool
version, config hash, seed) to stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .detector import SvmConfig, score, train
from .errors import ConvergenceError, RouterAdError, SchemaMismatchError
from .experiment import EvalConfig, kfold_eval, load_grid, resolve_config, run_grid, stamp
from .features import (FeatureConfig, FeatureSet, Vocabulary, build_vocabulary, concat_rows,
                       featurize, read_features, write_features)
from .ingest import build_trace, parse_flow_csv, parse_syscall_log
from .persist import MAGIC, check_model, is_model_file, load_model, save_model
from .simulator import load_scenario, simulate
from .trace import read_trace, validate_trace, write_trace

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _gamma(text: str):
    return text if text == "scale" else float(text)


def _svm_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nu", type=float, default=0.05, help="outlier fraction bound (default 0.05)")
    p.add_argument("--gamma", type=_gamma, default="scale", help="RBF width or 'scale' (default)")
    p.add_argument("--pca-variance", type=float, default=0.95,
                   help="explained-variance target for PCA (default 0.95)")
    p.add_argument("--tol", type=float, default=1e-6, help="solver KKT tolerance")
    p.add_argument("--max-iter", type=int, default=100_000, help="solver iteration cap")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="routerad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"routerad {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="generate a synthetic router trace")
    p.add_argument("--scenario", required=True, help="scenario TOML file or shipped name")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--benign-only", action="store_true", help="drop the [malware] section")
    p.add_argument("--out", required=True)

    p = sub.add_parser("featurize", help="turn traces into a window feature matrix")
    p.add_argument("--trace", nargs="*", default=[], help="native trace files")
    p.add_argument("--syscall-log", help="external syscall log (native S lines or strace)")
    p.add_argument("--flow-csv", help="external flow/packet CSV")
    p.add_argument("--router", help="router address for src/dst flow CSVs")
    p.add_argument("--window", type=float, default=5.0, help="window length L in seconds")
    p.add_argument("--ngram", type=int, default=2)
    p.add_argument("--bin", type=float, default=1.0, help="flow bin m in seconds")
    p.add_argument("--set", choices=[f.value for f in FeatureSet], default="both")
    p.add_argument("--label-min-events", type=int, default=1)
    p.add_argument("--vocab", help="vocabulary JSON or model file to reuse")
    p.add_argument("--save-vocab", help="write the vocabulary built from the inputs here")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="fit scaler, PCA and one-class SVM on benign windows")
    p.add_argument("--features", required=True)
    p.add_argument("--drop-malicious", action="store_true",
                   help="discard malicious windows instead of refusing them")
    _svm_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("score", help="score windows with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="k-fold evaluation of benign vs malicious windows")
    p.add_argument("--benign", required=True, help="benign feature file")
    p.add_argument("--malicious", required=True, help="malicious feature file")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--threshold", type=float, default=0.0)
    _svm_flags(p)
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("experiment", help="run an experiment grid")
    p.add_argument("--config", required=True, help="grid TOML file or shipped name")
    p.add_argument("--out", required=True, help="results directory")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, help="override the grid master seed")

    p = sub.add_parser("validate", help="check trace, feature or model files")
    p.add_argument("files", nargs="+")
    return parser


def config_hash(args: argparse.Namespace, files=()) -> str:
    h = hashlib.sha256(json.dumps(vars(args), sort_keys=True, default=str).encode("utf-8"))
    for path in files:
        if path and os.path.isfile(path):
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def _emit_stamp(args, seed, files=()) -> None:
    print(stamp(config_hash(args, files), seed), file=sys.stderr)


def cmd_simulate(args) -> int:
    path = resolve_config(args.scenario)
    scenario = load_scenario(path, args.seed)
    if args.benign_only:
        scenario = replace(scenario, malware=None)
    _emit_stamp(args, scenario.seed, [path])
    write_trace(simulate(scenario), args.out)
    return EXIT_OK


def _load_vocab(path: str) -> Vocabulary | None:
    if is_model_file(path):
        return load_model(path).vocabulary
    with open(path, encoding="utf-8") as fh:
        return Vocabulary.from_json(json.load(fh))


def cmd_featurize(args) -> int:
    config = FeatureConfig(args.window, args.ngram, args.bin, FeatureSet(args.set),
                           args.label_min_events)
    _emit_stamp(args, 0, args.trace)
    traces = [read_trace(p) for p in args.trace]
    if args.syscall_log or args.flow_csv:
        sc, fl = [], []
        if args.syscall_log:
            with open(args.syscall_log, encoding="utf-8") as fh:
                log = parse_syscall_log(fh)
            sc = log.events
            if log.other_count:
                print(f"note: {log.other_count} calls outside the catalog mapped to 'other'",
                      file=sys.stderr)
        if args.flow_csv:
            with open(args.flow_csv, encoding="utf-8", newline="") as fh:
                table = parse_flow_csv(fh, args.router)
            fl = table.records
            if table.ignored_columns:
                print(f"note: ignored {len(table.ignored_columns)} unknown column(s)", file=sys.stderr)
        traces.append(build_trace(sc, fl, scenario_id=os.path.basename(args.syscall_log or args.flow_csv)))
    if not traces:
        raise UsageError("featurize: give --trace, --syscall-log or --flow-csv")
    vocab = None
    if config.feature_set is not FeatureSet.NETWORK:
        vocab = _load_vocab(args.vocab) if args.vocab else build_vocabulary(traces, config)
        if vocab is None:
            raise UsageError("featurize: the given model carries no vocabulary")
        if vocab.n != config.ngram_n:
            raise UsageError(f"featurize: vocabulary holds {vocab.n}-grams, --ngram is {config.ngram_n}")
        if args.save_vocab:
            with open(args.save_vocab, "w", encoding="utf-8", newline="\n") as fh:
                json.dump(vocab.to_json(), fh, sort_keys=True)
                fh.write("\n")
    fm = concat_rows([featurize(t, config, vocab) for t in traces])
    write_features(fm, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    _emit_stamp(args, args.seed, [args.features])
    fm = read_features(args.features)
    if args.drop_malicious:
        fm = fm.take(np.flatnonzero(fm.labels == 0))
    model = train(fm, SvmConfig(nu=args.nu, gamma=args.gamma, tol=args.tol, max_iter=args.max_iter), args.pca_variance, args.seed)
    save_model(model, args.out)
    md = model.metadata
    print(f"trained on {md['n_train']} windows: {md['n_support']} support vectors, "
          f"pca k={md['pca_k']}", file=sys.stderr)
    return EXIT_OK


def cmd_score(args) -> int:
    _emit_stamp(args, 0, [args.model, args.features])
    model = load_model(args.model)
    fm = read_features(args.features)
    f = score(model, fm)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("window\tlabel\tscore\tpredicted\n")
        for w, lab, s in zip(fm.window_index.tolist(), fm.labels.tolist(), f.tolist()):
            fh.write(f"{w}\t{'M' if lab else 'B'}\t{s!r}\t{'M' if s < args.threshold else 'B'}\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    _emit_stamp(args, args.seed, [args.benign, args.malicious])
    benign, malicious = read_features(args.benign), read_features(args.malicious)
    cfg = EvalConfig(SvmConfig(nu=args.nu, gamma=args.gamma, tol=args.tol, max_iter=args.max_iter), args.pca_variance, args.threshold,
                     args.folds)
    cell, _ = kfold_eval(benign, malicious, cfg, args.seed)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(cell.to_dict(), fh, sort_keys=True, indent=1, allow_nan=False)
        fh.write("\n")
    print(f"mean AUC {cell.mean_auc:.4f} (std {cell.std_auc:.4f}), F1 {cell.f1:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_experiment(args) -> int:
    spec = load_grid(args.config)
    if args.seed is not None:
        spec = replace(spec, master_seed=args.seed)
    if args.jobs < 1:
        raise UsageError("experiment: --jobs must be >= 1")
    print(stamp(spec.source_digest, spec.master_seed), file=sys.stderr)
    os.makedirs(args.out, exist_ok=True)
    report = run_grid(spec, args.jobs, args.out)
    failed = [c for _, c in report.cells if c.error]
    print(f"{len(report.cells)} cells, {len(failed)} failed; results in {args.out}", file=sys.stderr)
    return EXIT_OK


def _sniff(path: str) -> str:
    with open(path, "rb") as fh:
        head = fh.read(16)
    if head.startswith(MAGIC):
        return "model"
    if head.startswith(b"#trace"):
        return "trace"
    if head.startswith(b"#features"):
        return "features"
    return "unknown"


def validate_file(path: str) -> list[str]:
    """Problems found in one file (empty when it passes)."""
    kind = _sniff(path)
    if kind == "trace":
        return [v.reason for v in validate_trace(read_trace(path))]
    if kind == "features":
        fm = read_features(path)
        problems = []
        if not np.all(np.isfinite(fm.values)):
            problems.append("non-finite feature values")
        if np.any(fm.window_index < 0):
            problems.append("negative window index")
        return problems
    if kind == "model":
        return check_model(load_model(path))
    return ["unrecognized file type"]


def cmd_validate(args) -> int:
    _emit_stamp(args, 0, args.files)
    status = EXIT_OK
    for path in args.files:
        try:
            problems = validate_file(path)
        except (RouterAdError, OSError) as exc:
            problems = [str(exc)]
        print(f"{path}: {'ok' if not problems else 'INVALID'}")
        for p in problems:
            print(f"  {p}")
        if problems:
            status = EXIT_DATA
    return status


COMMANDS = {"simulate": cmd_simulate, "featurize": cmd_featurize, "train": cmd_train,
            "score": cmd_score, "eval": cmd_eval, "experiment": cmd_experiment,
            "validate": cmd_validate}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SchemaMismatchError as exc:
        print(f"error: feature schema does not match the model: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RouterAdError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
