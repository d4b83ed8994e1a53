"""Cross-validated evaluation and the experiment grid.

k-fold protocol: benign windows are split into ``k`` folds. For each fold the
vocabulary, scaler, PCA and SVM are fitted on the other ``k - 1`` folds only;
the held-out benign fold plus every window of the malware traces are scored.
Malware windows therefore appear in every fold's test set and are never
trained on.

Fold membership is a function of row content and the fold seed (rows are
ordered by a keyed SHA-256 digest and dealt round-robin), so reordering the
input rows changes neither the folds nor any metric.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, NamedTuple

import numpy as np

from . import __version__
from . import rng as rng_mod
from .detector import DetectorModel, SvmConfig, train
from .errors import ConfigError, InsufficientDataError, RouterAdError
from .features import (FeatureConfig, FeatureMatrix, FeatureSet, build_vocabulary, combine,
                       concat_rows, featurize_flows, featurize_syscalls, restrict_vocabulary)
from .metrics import Confusion, RocPoint, f1_at_zero, roc_auc
from .persist import model_to_bytes
from .simulator import Family, Scenario, load_scenario, simulate
from .trace import Trace, write_trace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


@dataclass(frozen=True)
class EvalConfig:
    svm: SvmConfig = SvmConfig()
    pca_variance: float = 0.95
    threshold: float = 0.0
    folds: int = 5


class FoldResult(NamedTuple):
    model: DetectorModel
    decision: np.ndarray  # f(x) for every test row
    labels: np.ndarray
    auc: float
    f1: float
    f1_undefined: bool
    confusion: Confusion


@dataclass
class EvalCell:
    key: dict[str, Any]
    fold_seed: int
    fold_digest: str = ""
    fold_sizes: list[int] = field(default_factory=list)
    n_benign: int = 0
    n_test_malicious: int = 0
    n_test_benign_extra: int = 0
    fold_aucs: list[float] = field(default_factory=list)
    mean_auc: float = math.nan
    std_auc: float = math.nan
    fold_f1: list[float] = field(default_factory=list)
    f1: float = math.nan
    f1_undefined_folds: int = 0
    confusion: Confusion = Confusion(0, 0, 0, 0)
    pca_k: list[int] = field(default_factory=list)
    model_digests: list[str] = field(default_factory=list)
    roc: list[RocPoint] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["confusion"] = self.confusion._asdict()
        d["roc"] = [[p.fpr, p.tpr, None if math.isinf(p.threshold) else p.threshold]
                    for p in self.roc]
        for k in ("mean_auc", "std_auc", "f1"):
            if isinstance(d[k], float) and math.isnan(d[k]):
                d[k] = None
        return d


def _row_keys(values: np.ndarray, seed: int) -> list[bytes]:
    prefix = int(seed).to_bytes(8, "little")
    return [hashlib.sha256(prefix + row.tobytes()).digest() for row in np.ascontiguousarray(values)]


def assign_folds(fm: FeatureMatrix, k: int, seed: int) -> list[np.ndarray]:
    """Row indices of each fold; every fold's rows listed in canonical order."""
    if k < 2:
        raise ConfigError("folds", "need at least 2 folds")
    n = fm.n_rows
    if n < k:
        raise InsufficientDataError(f"{k} folds need at least {k} benign rows, got {n}")
    keys = _row_keys(fm.values, seed)
    order = sorted(range(n), key=keys.__getitem__)
    return [np.array(order[f::k], dtype=np.int64) for f in range(k)]


def min_benign_rows(k: int) -> int:
    n = k
    while n - math.ceil(n / k) < 10:
        n += 1
    return n


def evaluate_fold(benign_fm: FeatureMatrix, malicious_fm: FeatureMatrix, train_idx, test_idx,
                  config: EvalConfig = EvalConfig(), seed: int = 0) -> FoldResult:
    """Fit on ``benign_fm[train_idx]``; score ``benign_fm[test_idx]`` and all of ``malicious_fm``."""
    train_fm = benign_fm.take(train_idx)
    fit_fm = restrict_vocabulary(train_fm, train_fm)
    model = train(fit_fm, config.svm, config.pca_variance, seed)
    test = concat_rows([restrict_vocabulary(benign_fm.take(test_idx), train_fm),
                        restrict_vocabulary(malicious_fm, train_fm)])
    f = model.decision(test.values)
    _, auc = roc_auc(-f, test.labels)
    f1 = f1_at_zero(f, test.labels, config.threshold)
    return FoldResult(model, f, test.labels.copy(), auc, f1.f1, f1.undefined, f1.confusion)


def kfold_eval(benign_fm: FeatureMatrix, malicious_fm: FeatureMatrix, config: EvalConfig = EvalConfig(),
               seed: int = 0, key: dict | None = None,
               keep_models: bool = False) -> tuple[EvalCell, list[DetectorModel]]:
    """k-fold one-class evaluation; returns the report cell and (optionally) the fold models."""
    k = config.folds
    if benign_fm.columns != malicious_fm.columns:
        raise ConfigError("features", "benign and malicious matrices must share columns")
    need = min_benign_rows(k)
    if benign_fm.n_rows < need:
        raise InsufficientDataError(
            f"{k}-fold evaluation needs at least {need} benign rows, got {benign_fm.n_rows}")
    if np.any(benign_fm.labels != 0):
        raise ConfigError("benign", "benign matrix contains malicious windows")
    folds = assign_folds(benign_fm, k, seed)
    fold_of = np.empty(benign_fm.n_rows, dtype=np.int64)
    for f, rows in enumerate(folds):
        fold_of[rows] = f
    keys = _row_keys(benign_fm.values, seed)
    digest = hashlib.sha256(b"".join(sorted(kk + bytes([int(fo)]) for kk, fo in zip(keys, fold_of)))).hexdigest()
    cell = EvalCell(dict(key or {}), int(seed), digest, [int(r.size) for r in folds], benign_fm.n_rows,
                    int(malicious_fm.labels.sum()), int((malicious_fm.labels == 0).sum()))
    models, scores, labels = [], [], []
    tp = fp = tn = fn = 0
    for f in range(k):
        train_idx = np.concatenate([folds[g] for g in range(k) if g != f])
        train_idx = np.array(sorted(train_idx.tolist(), key=keys.__getitem__), dtype=np.int64)
        res = evaluate_fold(benign_fm, malicious_fm, train_idx, folds[f], config, seed)
        cell.fold_aucs.append(float(res.auc))
        cell.fold_f1.append(float(res.f1))
        cell.f1_undefined_folds += int(res.f1_undefined)
        cell.pca_k.append(res.model.pca.k)
        cell.model_digests.append(hashlib.sha256(model_to_bytes(res.model)).hexdigest())
        tp, fp, tn, fn = (a + b for a, b in zip((tp, fp, tn, fn), res.confusion))
        scores.append(-res.decision)
        labels.append(res.labels)
        if keep_models:
            models.append(res.model)
    cell.mean_auc = float(np.mean(cell.fold_aucs))
    cell.std_auc = float(np.std(cell.fold_aucs))
    cell.f1 = float(np.mean(cell.fold_f1))
    cell.confusion = Confusion(tp, fp, tn, fn)
    cell.roc, _ = roc_auc(np.concatenate(scores), np.concatenate(labels))
    return cell, models


# ---------------------------------------------------------------------------
# experiment grid

class MalwareSetting(NamedTuple):
    family: Family
    exfil_intervals: tuple[float, ...]
    exfil_size: int = 1


@dataclass(frozen=True)
class GridSpec:
    name: str
    master_seed: int
    seeds: int
    scenario: Scenario
    malware: tuple[MalwareSetting, ...]
    window_sizes: tuple[float, ...] = (5.0,)
    feature_sets: tuple[FeatureSet, ...] = (FeatureSet.SYSCALLS, FeatureSet.NETWORK, FeatureSet.COMBINED)
    trace_duration: float = 60.0
    benign_traces: int = 5
    malware_start: float = 0.0
    ngram: int = 2
    bin_m: float = 1.0
    label_min_events: int = 1
    eval: EvalConfig = EvalConfig()
    source_digest: str = ""


class CellKey(NamedTuple):
    family: str
    exfil_interval: float
    window_L: float
    feature_set: str
    seed_index: int

    def label(self) -> str:
        return (f"{self.family}_x{self.exfil_interval:g}_L{self.window_L:g}_"
                f"{self.feature_set}_s{self.seed_index}")


def resolve_config(name_or_path: str, suffix: str = ".toml") -> str:
    if os.path.exists(name_or_path):
        return name_or_path
    shipped = os.path.join(DATA_DIR, name_or_path + suffix)
    if os.path.exists(shipped):
        return shipped
    raise ConfigError("config", f"no such file or shipped config: {name_or_path}")


def load_grid(name_or_path: str) -> GridSpec:
    path = resolve_config(name_or_path)
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(path, f"not valid TOML ({exc})") from None
    if doc.get("schema") != 1:
        raise ConfigError("schema", "expected schema = 1")
    try:
        det = dict(doc.get("detector", {}))
        svm = SvmConfig(nu=det.pop("nu", 0.05), kernel=det.pop("kernel", "rbf"),
                        gamma=det.pop("gamma", "scale"), tol=det.pop("tol", 1e-6),
                        max_iter=det.pop("max_iter", 100_000))
        ev = EvalConfig(svm, det.pop("pca_variance", 0.95), det.pop("threshold", 0.0),
                        doc.get("folds", 5))
        if det:
            raise ConfigError(f"detector.{sorted(det)[0]}", "unknown key")
        malware = tuple(MalwareSetting(Family(m["family"]), tuple(float(x) for x in m["exfil_intervals"]),
                                       int(m.get("exfil_size", 1))) for m in doc["malware"])
        scenario = load_scenario(resolve_config(doc.get("scenario", "default_scenario")))
        spec = GridSpec(
            name=str(doc.get("name", os.path.splitext(os.path.basename(path))[0])),
            master_seed=int(doc["master_seed"]), seeds=int(doc.get("seeds", 5)),
            scenario=scenario, malware=malware,
            window_sizes=tuple(float(x) for x in doc.get("window_sizes", [5.0])),
            feature_sets=tuple(FeatureSet(x) for x in doc.get("feature_sets", ["sys", "net", "both"])),
            trace_duration=float(doc.get("trace_duration", 60.0)),
            benign_traces=int(doc.get("benign_traces", 5)),
            malware_start=float(doc.get("malware_start", 0.0)),
            ngram=int(doc.get("ngram", 2)), bin_m=float(doc.get("bin", 1.0)),
            label_min_events=int(doc.get("label_min_events", 1)), eval=ev,
            source_digest=hashlib.sha256(raw).hexdigest())
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(path, f"bad grid spec ({exc})") from None
    if spec.scenario.malware is None:
        raise ConfigError("scenario", "base scenario needs a [malware] section for its knobs")
    return spec


def benign_scenario(spec: GridSpec, seed_index: int, j: int) -> Scenario:
    return replace(spec.scenario, duration=spec.trace_duration, malware=None, malware_start=0.0,
                   seed=rng_mod.mix(spec.master_seed, f"benign/s{seed_index}/{j}"),
                   scenario_id=f"benign-s{seed_index}-{j}")


def malware_scenario(spec: GridSpec, family: Family, interval: float, size: int,
                     seed_index: int) -> Scenario:
    mw = replace(spec.scenario.malware, family=family, exfil_interval=interval, exfil_size=size)
    return replace(spec.scenario, duration=spec.trace_duration, malware=mw,
                   malware_start=spec.malware_start,
                   seed=rng_mod.mix(spec.master_seed, f"malware/{family.value}/{interval!r}/s{seed_index}"),
                   scenario_id=f"{family.value}-x{interval:g}-s{seed_index}")


class _Unit(NamedTuple):
    family: Family
    interval: float
    size: int
    seed_index: int
    window_L: float


def _run_unit(spec: GridSpec, unit: _Unit) -> list[tuple[CellKey, EvalCell, bytes | None]]:
    benign = [_traces_benign(spec, unit.seed_index, j) for j in range(spec.benign_traces)]
    malware = simulate(malware_scenario(spec, unit.family, unit.interval, unit.size, unit.seed_index))
    out = []
    try:
        base = FeatureConfig(unit.window_L, spec.ngram, spec.bin_m, FeatureSet.COMBINED,
                             spec.label_min_events)
        vocab = build_vocabulary(benign + [malware], base)
        sys_b = concat_rows([featurize_syscalls(t, vocab, base) for t in benign])
        sys_m = featurize_syscalls(malware, vocab, base)
        net_b = concat_rows([featurize_flows(t, base) for t in benign])
        net_m = featurize_flows(malware, base)
    except RouterAdError as exc:
        sys_b = None
        err = f"{type(exc).__name__}: {exc}"
    for fs in spec.feature_sets:
        key = CellKey(unit.family.value, unit.interval, unit.window_L, fs.value, unit.seed_index)
        fold_seed = rng_mod.mix(spec.master_seed, "cell/" + key.label())
        if sys_b is None:
            out.append((key, EvalCell(key._asdict(), fold_seed, error=err), None))
            continue
        if fs is FeatureSet.SYSCALLS:
            b, m = sys_b, sys_m
        elif fs is FeatureSet.NETWORK:
            b, m = net_b, net_m
        else:
            b, m = combine(sys_b, net_b), combine(sys_m, net_m)
        try:
            cell, models = kfold_eval(b, m, spec.eval, fold_seed, key._asdict(), keep_models=True)
            out.append((key, cell, model_to_bytes(models[0])))
        except RouterAdError as exc:
            out.append((key, EvalCell(key._asdict(), fold_seed, error=f"{type(exc).__name__}: {exc}"), None))
    return out


_BENIGN_CACHE: dict[str, Trace] = {}


def _traces_benign(spec: GridSpec, seed_index: int, j: int) -> Trace:
    scenario = benign_scenario(spec, seed_index, j)
    key = repr(scenario)
    if key not in _BENIGN_CACHE:
        if len(_BENIGN_CACHE) > 64:
            _BENIGN_CACHE.clear()
        _BENIGN_CACHE[key] = simulate(scenario)
    return _BENIGN_CACHE[key]


def grid_units(spec: GridSpec) -> list[_Unit]:
    return [_Unit(m.family, x, m.exfil_size, s, L)
            for m in spec.malware for x in m.exfil_intervals
            for s in range(spec.seeds) for L in spec.window_sizes]


def cell_order(spec: GridSpec):
    fam = {m.family.value: i for i, m in enumerate(spec.malware)}
    L = {w: i for i, w in enumerate(spec.window_sizes)}
    fs = {f.value: i for i, f in enumerate(spec.feature_sets)}

    def sort_key(k: CellKey):
        xs = next(m.exfil_intervals for m in spec.malware if m.family.value == k.family)
        return (fam[k.family], xs.index(k.exfil_interval), L[k.window_L], fs[k.feature_set], k.seed_index)
    return sort_key


@dataclass
class EvalReport:
    name: str
    master_seed: int
    stamp: str
    cells: list[tuple[CellKey, EvalCell]]

    def summary(self) -> list[dict[str, Any]]:
        """Seed-averaged view: one row per (family, interval, window, feature set)."""
        groups: dict[tuple, list[EvalCell]] = {}
        for key, cell in self.cells:
            groups.setdefault(key[:4], []).append(cell)
        rows = []
        for (fam, x, L, fs), cells in groups.items():
            ok = [c for c in cells if c.error is None]
            aucs = [c.mean_auc for c in ok]
            rows.append({"family": fam, "exfil_interval": x, "window_L": L, "feature_set": fs,
                         "seeds": len(ok), "failed": len(cells) - len(ok),
                         "mean_auc": float(np.mean(aucs)) if aucs else None,
                         "std_auc": float(np.std(aucs)) if aucs else None,
                         "mean_f1": float(np.mean([c.f1 for c in ok])) if ok else None})
        return rows

    def mean_auc(self, family: str, interval: float, window_L: float, feature_set: str) -> float:
        for row in self.summary():
            if (row["family"], row["exfil_interval"], row["window_L"], row["feature_set"]) == (
                    family, interval, window_L, feature_set):
                return row["mean_auc"]
        raise KeyError((family, interval, window_L, feature_set))

    def to_json(self) -> str:
        doc = {"name": self.name, "master_seed": self.master_seed, "stamp": self.stamp,
               "cells": [cell.to_dict() for _, cell in self.cells], "summary": self.summary()}
        return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"

    def cells_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(CellKey._fields) + ["mean_auc", "std_auc", "f1", "tp", "fp", "tn", "fn",
                                           "n_benign", "n_test_malicious", "error"])
        for key, c in self.cells:
            w.writerow(list(key) + [_fmt(c.mean_auc), _fmt(c.std_auc), _fmt(c.f1), *c.confusion,
                                    c.n_benign, c.n_test_malicious, c.error or ""])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        rows = self.summary()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["family"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()


def _fmt(v: float | None) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def stamp(config_digest: str, seed: int) -> str:
    return f"routerad {__version__} config={config_digest[:16]} seed={seed}"


def _run_unit_star(args):
    return _run_unit(*args)


def run_grid(spec: GridSpec, jobs: int = 1, out_dir: str | os.PathLike | None = None,
             progress=None) -> EvalReport:
    """Evaluate every (family, interval, window, feature set, seed) cell.

    Cells are independent; with ``jobs > 1`` they run in worker processes and
    are merged in canonical key order, so the report does not depend on
    ``jobs``. A failing cell records its error and the grid carries on.
    """
    units = grid_units(spec)
    if out_dir is not None:
        _write_traces(spec, out_dir)
    results = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for i, res in enumerate(pool.map(_run_unit_star, [(spec, u) for u in units])):
                results.extend(res)
                if progress:
                    progress(i + 1, len(units))
    else:
        for i, u in enumerate(units):
            results.extend(_run_unit(spec, u))
            if progress:
                progress(i + 1, len(units))
    results.sort(key=lambda r: cell_order(spec)(r[0]))
    report = EvalReport(spec.name, spec.master_seed, stamp(spec.source_digest, spec.master_seed),
                        [(k, c) for k, c, _ in results])
    if out_dir is not None:
        _write_outputs(report, results, out_dir)
    return report


def _write_traces(spec: GridSpec, out_dir) -> None:
    tdir = os.path.join(out_dir, "traces")
    os.makedirs(tdir, exist_ok=True)
    for s in range(spec.seeds):
        for j in range(spec.benign_traces):
            t = _traces_benign(spec, s, j)
            write_trace(t, os.path.join(tdir, t.scenario_id + ".trace"))
        for m in spec.malware:
            for x in m.exfil_intervals:
                t = simulate(malware_scenario(spec, m.family, x, m.exfil_size, s))
                write_trace(t, os.path.join(tdir, t.scenario_id + ".trace"))


def _write_outputs(report: EvalReport, results, out_dir) -> None:
    mdir = os.path.join(out_dir, "models")
    rdir = os.path.join(out_dir, "roc")
    os.makedirs(mdir, exist_ok=True)
    os.makedirs(rdir, exist_ok=True)
    for key, cell, blob in results:
        if blob is not None:
            with open(os.path.join(mdir, key.label() + ".model"), "wb") as fh:
                fh.write(blob)
        if cell.roc:
            with open(os.path.join(rdir, key.label() + ".csv"), "w", encoding="utf-8", newline="\n") as fh:
                fh.write("fpr,tpr,threshold\n")
                fh.writelines(f"{p.fpr!r},{p.tpr!r},{p.threshold!r}\n" for p in cell.roc)
    for name, text in (("report.json", report.to_json()), ("cells.csv", report.cells_csv()),
                       ("summary.csv", report.summary_csv())):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
