"""Window featurization: syscall bag-of-n-grams and binned flow statistics.

Windows are tumbling ``[w*L, (w+1)*L)`` spans; a trailing partial window is
dropped. All boundary arithmetic is done on integer microseconds so bin and
window edges are exact for any decimal ``L`` and ``m``.

n-grams are formed over each pid's consecutive calls inside one window, never
across pids or window boundaries. Column 0 of every syscall block is ``unk``,
which counts n-grams absent from the vocabulary.

Flow block: per ``m``-second bin and per direction, 15 statistics are
computed. Count-type statistics are summed over the bins of a window, the
rest are averaged (empty bins contribute zeros).
"""
from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple, Sequence, TextIO

import numpy as np

from .errors import AlignmentError, ConfigError, EmptyDataError, TraceParseError
from .trace import FLAG_ORDER, TOKEN_ID, TOKENS, Label, Origin, Trace, WindowLabel

BASE = len(TOKENS)
MAX_NGRAM = 11  # BASE ** n must fit in int64
STD_FLOOR = 1e-12

COUNT_STATS = ("pkt_count", "byte_sum", "syn", "ack", "fin", "rst", "psh",
               "distinct_peers", "distinct_ports")
MEAN_STATS = ("bytes_mean", "bytes_std", "bytes_min", "bytes_max", "iat_mean", "iat_std")
DIRECTIONS = ("in", "out")


class FeatureSet(str, enum.Enum):
    SYSCALLS = "sys"
    NETWORK = "net"
    COMBINED = "both"


@dataclass(frozen=True)
class FeatureConfig:
    window_L: float = 5.0
    ngram_n: int = 2
    bin_m: float = 1.0
    feature_set: FeatureSet = FeatureSet.COMBINED
    label_min_events: int = 1

    def __post_init__(self):
        object.__setattr__(self, "feature_set", FeatureSet(self.feature_set))
        if not self.window_L > 0:
            raise ConfigError("window_L", "must be > 0")
        if not self.bin_m > 0:
            raise ConfigError("bin_m", "must be > 0")
        if not 1 <= self.ngram_n <= MAX_NGRAM:
            raise ConfigError("ngram_n", f"must lie in 1..{MAX_NGRAM}")
        if self.label_min_events < 1:
            raise ConfigError("label_min_events", "must be >= 1")
        if self.bin_m > self.window_L or self.window_us % self.bin_us:
            raise ConfigError("bin_m", "window_L must be an integer multiple of bin_m")

    @property
    def window_us(self) -> int:
        return round(self.window_L * 1e6)

    @property
    def bin_us(self) -> int:
        return round(self.bin_m * 1e6)

    @property
    def bins_per_window(self) -> int:
        return self.window_us // self.bin_us

    def n_windows(self, duration: float) -> int:
        return round(duration * 1e6) // self.window_us


class Column(NamedTuple):
    name: str
    kind: str  # "unk", "ngram" or "flow"
    agg: str   # "count", "sum" or "mean"


UNK_COLUMN = Column("unk", "unk", "count")


def column_from_name(name: str) -> Column:
    if name == "unk":
        return UNK_COLUMN
    if name.startswith("ngram:"):
        return Column(name, "ngram", "count")
    parts = name.split(":")
    if len(parts) == 4 and parts[0] == "net" and parts[3] in ("sum", "mean"):
        return Column(name, "flow", parts[3])
    raise ValueError(f"unknown column name {name!r}")


def flow_columns() -> tuple[Column, ...]:
    cols = [Column(f"net:{d}:{s}:sum", "flow", "sum") for d in DIRECTIONS for s in COUNT_STATS]
    cols += [Column(f"net:{d}:{s}:mean", "flow", "mean") for d in DIRECTIONS for s in MEAN_STATS]
    return tuple(cols)


def encode(gram: Sequence[str]) -> int:
    code = 0
    for name in gram:
        code = code * BASE + TOKEN_ID[name]
    return code


def decode(code: int, n: int) -> tuple[str, ...]:
    out = []
    for _ in range(n):
        code, r = divmod(code, BASE)
        out.append(TOKENS[r])
    return tuple(reversed(out))


@dataclass(frozen=True, eq=False)
class Vocabulary:
    """Ordered n-gram columns; ``unk`` is always column 0."""

    ngrams: tuple[tuple[str, ...], ...]
    n: int

    def __post_init__(self):
        if len(set(self.ngrams)) != len(self.ngrams):
            raise ValueError("duplicate n-grams in vocabulary")
        if any(len(g) != self.n for g in self.ngrams):
            raise ValueError("n-gram length does not match n")
        codes = np.array([encode(g) for g in self.ngrams], dtype=np.int64)
        order = np.argsort(codes)
        object.__setattr__(self, "_sorted_codes", codes[order])
        object.__setattr__(self, "_sorted_cols", order + 1)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and (self.n, self.ngrams) == (other.n, other.ngrams)

    def __len__(self) -> int:
        return len(self.ngrams) + 1

    @property
    def columns(self) -> tuple[Column, ...]:
        return (UNK_COLUMN,) + tuple(Column("ngram:" + ",".join(g), "ngram", "count")
                                     for g in self.ngrams)

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        """Column index for each encoded n-gram; 0 (unk) when unseen."""
        if not self.ngrams:
            return np.zeros(codes.size, dtype=np.int64)
        pos = np.clip(np.searchsorted(self._sorted_codes, codes), 0, len(self.ngrams) - 1)
        hit = self._sorted_codes[pos] == codes
        return np.where(hit, self._sorted_cols[pos], 0)

    def to_json(self) -> dict:
        return {"n": self.n, "ngrams": [list(g) for g in self.ngrams]}

    @classmethod
    def from_json(cls, doc: dict) -> "Vocabulary":
        return cls(tuple(tuple(g) for g in doc["ngrams"]), int(doc["n"]))

    @classmethod
    def from_columns(cls, columns: Iterable[Column], n: int) -> "Vocabulary":
        grams = tuple(tuple(c.name[len("ngram:"):].split(",")) for c in columns if c.kind == "ngram")
        return cls(grams, n)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    columns: tuple[Column, ...]
    labels: np.ndarray
    window_index: np.ndarray
    config: FeatureConfig

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1, len(self.columns))
        labels = np.array(self.labels, dtype=np.int8, copy=True).reshape(-1)
        windex = np.array(self.window_index, dtype=np.int64, copy=True).reshape(-1)
        if not (values.shape[0] == labels.size == windex.size):
            raise AlignmentError("values, labels and window_index disagree on row count")
        for a in (values, labels, windex):
            a.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "window_index", windex)
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def window_labels(self) -> list[WindowLabel]:
        return [WindowLabel(int(w), Label(int(l))) for w, l in zip(self.window_index, self.labels)]

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows)
        return replace(self, values=self.values[rows], labels=self.labels[rows],
                       window_index=self.window_index[rows])

    def with_values(self, values: np.ndarray) -> "FeatureMatrix":
        return replace(self, values=values)


def concat_rows(matrices: Sequence[FeatureMatrix]) -> FeatureMatrix:
    """Stack windows of several traces that share one schema."""
    if not matrices:
        raise EmptyDataError("nothing to concatenate")
    first = matrices[0]
    for fm in matrices[1:]:
        if fm.columns != first.columns:
            raise AlignmentError("cannot stack matrices with different columns")
    return replace(first, values=np.vstack([m.values for m in matrices]),
                   labels=np.concatenate([m.labels for m in matrices]),
                   window_index=np.concatenate([m.window_index for m in matrices]))


# ---------------------------------------------------------------------------
# syscall n-grams

def _us(t: np.ndarray) -> np.ndarray:
    return np.round(t * 1e6).astype(np.int64)


def window_ngrams(trace: Trace, config: FeatureConfig) -> tuple[np.ndarray, np.ndarray]:
    """(window index, encoded n-gram) for every per-pid n-gram in a full window."""
    a = trace.syscall_arrays
    nw = config.n_windows(trace.duration)
    w = _us(a["timestamp"]) // config.window_us
    keep = (w >= 0) & (w < nw)
    w, pid, tok = w[keep], a["pid"][keep], a["token"][keep]
    if np.any(tok < 0):
        raise ValueError("trace contains syscall names outside the catalog")
    order = np.lexsort((np.arange(w.size), pid, w))
    w, pid, tok = w[order], pid[order], tok[order]
    n = config.ngram_n
    m = w.size - n + 1
    if m <= 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    valid = (w[n - 1:] == w[:m]) & (pid[n - 1:] == pid[:m])
    code = np.zeros(m, dtype=np.int64)
    for k in range(n):
        code = code * BASE + tok[k:k + m]
    return w[:m][valid], code[valid]


def build_vocabulary(traces: Iterable[Trace], config: FeatureConfig) -> Vocabulary:
    """Every distinct per-pid n-gram seen in the training windows, sorted by name."""
    codes = [window_ngrams(t, config)[1] for t in traces]
    codes = np.unique(np.concatenate(codes)) if codes else np.empty(0, np.int64)
    if codes.size == 0:
        raise EmptyDataError("no training events")
    grams = sorted(decode(int(c), config.ngram_n) for c in codes)
    return Vocabulary(tuple(grams), config.ngram_n)


def window_labels(trace: Trace, config: FeatureConfig) -> np.ndarray:
    """1 where a window holds at least ``label_min_events`` malware-origin events."""
    nw = config.n_windows(trace.duration)
    counts = np.zeros(nw, dtype=np.int64)
    for arrays in (trace.syscall_arrays, trace.flow_arrays):
        w = _us(arrays["timestamp"][arrays["origin"] == int(Origin.MALWARE)]) // config.window_us
        counts += np.bincount(w[w < nw], minlength=nw)[:nw]
    return (counts >= config.label_min_events).astype(np.int8)


def featurize_syscalls(trace: Trace, vocab: Vocabulary, config: FeatureConfig) -> FeatureMatrix:
    if vocab.n != config.ngram_n:
        raise ConfigError("ngram_n", f"vocabulary holds {vocab.n}-grams")
    nw = config.n_windows(trace.duration)
    w, codes = window_ngrams(trace, config)
    counts = np.zeros((nw, len(vocab)))
    np.add.at(counts, (w, vocab.lookup(codes)), 1.0)
    return FeatureMatrix(counts, vocab.columns, window_labels(trace, config), np.arange(nw),
                         replace(config, feature_set=FeatureSet.SYSCALLS))


# ---------------------------------------------------------------------------
# flow statistics

def flow_bin_stats(trace: Trace, config: FeatureConfig) -> np.ndarray:
    """Per-bin statistics, shape (bins, direction, 15) ordered COUNT_STATS + MEAN_STATS."""
    a = trace.flow_arrays
    nb = config.n_windows(trace.duration) * config.bins_per_window
    out = np.zeros((nb, 2, len(COUNT_STATS) + len(MEAN_STATS)))
    t_us = _us(a["timestamp"])
    b_all = t_us // config.bin_us
    for d in (0, 1):
        sel = (a["direction"] == d) & (b_all < nb)
        b, t = b_all[sel], t_us[sel] / 1e6
        x = a["bytes"][sel]
        if b.size == 0:
            continue
        cnt = np.bincount(b, minlength=nb).astype(float)
        nz = cnt > 0
        s = out[:, d, :]
        s[:, 0] = cnt
        s[:, 1] = np.bincount(b, weights=x, minlength=nb)
        for k, flag in enumerate(FLAG_ORDER):
            s[:, 2 + k] = np.bincount(b, weights=(a["flags"][sel] & int(flag)) > 0, minlength=nb)
        peers = np.unique(np.stack([b, a["peer"][sel]]), axis=1)[0]
        ports = np.unique(np.stack([b, a["port"][sel]]), axis=1)[0]
        s[:, 7] = np.bincount(peers, minlength=nb)
        s[:, 8] = np.bincount(ports, minlength=nb)

        mean = np.divide(s[:, 1], cnt, out=np.zeros(nb), where=nz)
        dev2 = np.bincount(b, weights=(x - mean[b]) ** 2, minlength=nb)
        bmin = np.full(nb, np.inf)
        bmax = np.full(nb, -np.inf)
        np.minimum.at(bmin, b, x)
        np.maximum.at(bmax, b, x)
        s[:, 9] = mean
        s[:, 10] = np.sqrt(np.divide(dev2, cnt, out=np.zeros(nb), where=nz))
        s[:, 11] = np.where(nz, bmin, 0.0)
        s[:, 12] = np.where(nz, bmax, 0.0)

        same = b[1:] == b[:-1]
        gap, gb = (t[1:] - t[:-1])[same], b[1:][same]
        ng = np.bincount(gb, minlength=nb).astype(float)
        has = ng > 0
        iat_mean = np.divide(np.bincount(gb, weights=gap, minlength=nb), ng,
                             out=np.zeros(nb), where=has)
        iat_dev2 = np.bincount(gb, weights=(gap - iat_mean[gb]) ** 2, minlength=nb)
        s[:, 13] = iat_mean
        s[:, 14] = np.sqrt(np.divide(iat_dev2, ng, out=np.zeros(nb), where=has))
    return out


def featurize_flows(trace: Trace, config: FeatureConfig) -> FeatureMatrix:
    nw = config.n_windows(trace.duration)
    bins = flow_bin_stats(trace, config).reshape(nw, config.bins_per_window, 2, -1)
    nc = len(COUNT_STATS)
    sums = bins[..., :nc].sum(axis=1).reshape(nw, -1)
    means = bins[..., nc:].mean(axis=1).reshape(nw, -1)
    return FeatureMatrix(np.hstack([sums, means]), flow_columns(), window_labels(trace, config),
                         np.arange(nw), replace(config, feature_set=FeatureSet.NETWORK))


def combine(syscall_fm: FeatureMatrix, flow_fm: FeatureMatrix) -> FeatureMatrix:
    """Concatenate two aligned feature blocks column-wise."""
    if syscall_fm.config.window_L != flow_fm.config.window_L:
        raise AlignmentError("window sizes differ")
    if syscall_fm.n_rows != flow_fm.n_rows:
        raise AlignmentError(f"row counts differ ({syscall_fm.n_rows} vs {flow_fm.n_rows})")
    diff = np.flatnonzero((syscall_fm.labels != flow_fm.labels)
                          | (syscall_fm.window_index != flow_fm.window_index))
    if diff.size:
        raise AlignmentError(f"labels differ at row {int(diff[0])}", int(diff[0]))
    return FeatureMatrix(np.hstack([syscall_fm.values, flow_fm.values]),
                         syscall_fm.columns + flow_fm.columns, syscall_fm.labels,
                         syscall_fm.window_index,
                         replace(syscall_fm.config, feature_set=FeatureSet.COMBINED))


def featurize(trace: Trace, config: FeatureConfig, vocab: Vocabulary | None = None) -> FeatureMatrix:
    fs = config.feature_set
    if fs is FeatureSet.NETWORK:
        return replace(featurize_flows(trace, config), config=config)
    if vocab is None:
        raise ConfigError("vocab", "syscall features need a vocabulary")
    sys_fm = featurize_syscalls(trace, vocab, config)
    if fs is FeatureSet.SYSCALLS:
        return sys_fm
    return combine(sys_fm, featurize_flows(trace, config))


def restrict_vocabulary(fm: FeatureMatrix, train: FeatureMatrix) -> FeatureMatrix:
    """Drop n-gram columns never seen in the ``train`` rows, folding their counts into unk.

    The result equals featurizing with a vocabulary built from the training
    windows alone, so one wide matrix can serve every cross-validation fold.
    ``train`` must share ``fm``'s columns.
    """
    if train.columns != fm.columns:
        raise AlignmentError("training matrix has different columns")
    kinds = np.array([c.kind for c in fm.columns])
    if "ngram" not in kinds:
        return fm
    seen = train.values.sum(axis=0) > 0
    drop = (kinds == "ngram") & ~seen
    values = fm.values[:, ~drop].copy()
    unk = int(np.flatnonzero(kinds[~drop] == "unk")[0])
    values[:, unk] += fm.values[:, drop].sum(axis=1)
    cols = tuple(c for c, d in zip(fm.columns, drop) if not d)
    return replace(fm, values=values, columns=cols)


# ---------------------------------------------------------------------------
# standardization

class ScalerStats(NamedTuple):
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / np.maximum(self.std, STD_FLOOR)


def fit_scaler(train_fm: FeatureMatrix | np.ndarray) -> ScalerStats:
    x = train_fm.values if isinstance(train_fm, FeatureMatrix) else np.asarray(train_fm, float)
    if x.shape[0] == 0:
        raise EmptyDataError("cannot fit a scaler on zero rows")
    return ScalerStats(x.mean(axis=0), x.std(axis=0))


def apply_scaler(fm: FeatureMatrix, stats: ScalerStats) -> FeatureMatrix:
    return fm.with_values(stats.transform(fm.values))


# ---------------------------------------------------------------------------
# file format

def write_features(fm: FeatureMatrix, dest: str | os.PathLike | TextIO) -> None:
    """Tab-separated text: version header, column header, one line per window."""
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            write_features(fm, fh)
        return
    c = fm.config
    dest.write(f"#features v1 window={c.window_L!r} ngram={c.ngram_n} bin={c.bin_m!r} "
               f"set={c.feature_set.value} label_min_events={c.label_min_events}\n")
    dest.write("\t".join(["window", "label"] + fm.column_names) + "\n")
    for w, lab, row in zip(fm.window_index.tolist(), fm.labels.tolist(), fm.values.tolist()):
        dest.write(f"{w}\t{'M' if lab else 'B'}\t" + "\t".join(map(repr, row)) + "\n")


def read_features(src: str | os.PathLike | TextIO) -> FeatureMatrix:
    if isinstance(src, (str, os.PathLike)):
        with open(src, encoding="utf-8") as fh:
            return read_features(fh)
    header = src.readline().split()
    if len(header) < 2 or header[0] != "#features":
        raise TraceParseError("missing '#features' header", 1)
    if header[1] != "v1":
        raise TraceParseError(f"unsupported features version {header[1]!r}", 1)
    meta = dict(p.split("=", 1) for p in header[2:])
    try:
        config = FeatureConfig(float(meta["window"]), int(meta["ngram"]), float(meta["bin"]),
                               FeatureSet(meta["set"]), int(meta["label_min_events"]))
        names = src.readline().rstrip("\n").split("\t")
        if names[:2] != ["window", "label"]:
            raise TraceParseError("bad column header", 2)
        columns = tuple(column_from_name(n) for n in names[2:])
    except (KeyError, ValueError) as exc:
        raise TraceParseError(f"bad features header ({exc})", 1) from None
    rows, labels, windex = [], [], []
    for lineno, line in enumerate(src, start=3):
        parts = line.rstrip("\n").split("\t")
        if len(parts) != len(columns) + 2 or parts[1] not in ("B", "M"):
            raise TraceParseError("row width or label is wrong", lineno)
        try:
            windex.append(int(parts[0]))
            rows.append([float(v) for v in parts[2:]])
        except ValueError as exc:
            raise TraceParseError(f"bad number ({exc})", lineno) from None
        labels.append(parts[1] == "M")
    values = np.array(rows, dtype=float).reshape(len(rows), len(columns))
    return FeatureMatrix(values, columns, np.array(labels, np.int8), np.array(windex), config)
