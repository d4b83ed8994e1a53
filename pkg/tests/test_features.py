import io
import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import bin_stats
from routerad.errors import AlignmentError, ConfigError, EmptyDataError
from routerad.features import (COUNT_STATS, MEAN_STATS, FeatureConfig, FeatureMatrix, FeatureSet,
                               Vocabulary, apply_scaler, build_vocabulary, combine, featurize,
                               featurize_flows, featurize_syscalls, fit_scaler, flow_columns,
                               read_features, restrict_vocabulary, write_features)
from routerad.trace import (CATALOG, Direction, Flag, FlowRecord, Origin, SyscallEvent, Trace)

CFG = FeatureConfig(window_L=1.0, ngram_n=2, bin_m=1.0)


def trace_of(names, pid=1, t0=0.1, dt=0.1, duration=1.0, origin=Origin.BENIGN):
    return Trace(duration, tuple(SyscallEvent(round(t0 + i * dt, 6), pid, n, origin)
                                 for i, n in enumerate(names)))


def test_vocabulary_pairs():
    v = build_vocabulary([trace_of(["read", "write", "read", "write"])], CFG)
    assert [c.name for c in v.columns] == ["unk", "ngram:read,write", "ngram:write,read"]


def test_vocabulary_unigrams():
    cfg = FeatureConfig(1.0, 1, 1.0)
    v = build_vocabulary([trace_of(["write", "read", "write"])], cfg)
    assert v.ngrams == (("read",), ("write",)) and len(v) == 3


def test_empty_training_data():
    with pytest.raises(EmptyDataError, match="no training events"):
        build_vocabulary([Trace(1.0)], CFG)


def test_ngrams_never_cross_pids():
    rng = np.random.default_rng(3)
    names = rng.choice(["read", "write", "stat", "poll"], 10)
    pids = rng.choice([4, 8], 10)
    events = tuple(SyscallEvent(round(0.05 + 0.09 * i, 6), int(p), str(n)) for i, (n, p) in enumerate(zip(names, pids)))
    t = Trace(1.0, events)
    want = Counter()
    for pid in (4, 8):
        seq = [e.name for e in events if e.pid == pid]
        want.update(zip(seq, seq[1:]))
    vocab = build_vocabulary([t], CFG)
    assert set(vocab.ngrams) == set(want)
    row = featurize_syscalls(t, vocab, CFG).values[0]
    assert {g: row[i + 1] for i, g in enumerate(vocab.ngrams)} == want


def test_row_counts_and_unk():
    vocab = build_vocabulary([trace_of(["read", "write", "read", "write"])], CFG)
    fm = featurize_syscalls(trace_of(["read", "write", "read", "write"]), vocab, CFG)
    assert fm.values.tolist() == [[0, 2, 1]]
    fm = featurize_syscalls(trace_of(["read", "write", "stat", "read"]), vocab, CFG)
    assert fm.values.tolist() == [[2, 1, 0]]


def test_empty_window_is_zero_and_benign():
    vocab = build_vocabulary([trace_of(["read", "write"])], CFG)
    t = trace_of(["read", "write"], t0=1.1, duration=3.0, origin=Origin.MALWARE)
    fm = featurize_syscalls(t, vocab, CFG)
    assert fm.values[0].tolist() == [0, 0] and fm.labels.tolist() == [0, 1, 0]


def test_row_count_drops_partial_window(tiny_trace):
    fm = featurize_flows(tiny_trace, FeatureConfig(0.75, 2, 0.25))
    assert fm.n_rows == 2  # floor(2.0 / 0.75)


def test_window_edges_are_exact():
    # 0.3 s windows: 0.6 sits on an edge and belongs to window 2
    t = Trace(0.9, (SyscallEvent(0.6, 1, "read"),), (), "edge", 0)
    vocab = Vocabulary((("read",),), 1)
    fm = featurize_syscalls(t, vocab, FeatureConfig(0.3, 1, 0.1))
    assert fm.values[:, 1].tolist() == [0, 0, 1]


@pytest.mark.parametrize("kw, field", [({"window_L": 0}, "window_L"), ({"bin_m": 2.0}, "bin_m"),
                                       ({"bin_m": 0.3}, "bin_m"), ({"ngram_n": 0}, "ngram_n"),
                                       ({"label_min_events": 0}, "label_min_events")])
def test_config_invariants(kw, field):
    with pytest.raises(ConfigError) as err:
        FeatureConfig(**{"window_L": 1.0, **kw})
    assert err.value.field == field


def test_two_packet_bin():
    t = Trace(1.0, (), (FlowRecord(0.2, Direction.OUTBOUND, "p", 1, 100),
                        FlowRecord(0.6, Direction.OUTBOUND, "p", 1, 300)))
    fm = featurize_flows(t, CFG)
    row = dict(zip(fm.column_names, fm.values[0]))
    assert row["net:out:pkt_count:sum"] == 2 and row["net:out:byte_sum:sum"] == 400
    assert row["net:out:bytes_mean:mean"] == 200
    assert row["net:out:bytes_min:mean"] == 100 and row["net:out:bytes_max:mean"] == 300
    assert row["net:out:bytes_std:mean"] == 100
    assert row["net:out:iat_mean:mean"] == pytest.approx(0.4)
    assert all(v == 0 for k, v in row.items() if k.startswith("net:in:"))


PACKETS = [  # (t, direction, peer, port, bytes, flags)
    (0.10, "O", "a", 80, 100, Flag.SYN), (0.40, "O", "a", 80, 300, Flag.ACK),
    (0.90, "I", "b", 53, 60, Flag.ACK | Flag.PSH), (1.20, "O", "c", 443, 1500, Flag.ACK),
    (1.25, "O", "a", 80, 40, Flag.FIN | Flag.ACK), (1.70, "O", "c", 443, 1500, Flag.PSH),
    (3.05, "I", "b", 53, 90, Flag.RST), (3.50, "I", "d", 53, 10, 0),
    (3.55, "I", "b", 67, 200, Flag.ACK), (4.99, "O", "a", 80, 700, Flag.ACK | Flag.PSH),
]


def test_hand_computed_window():
    flows = tuple(FlowRecord(t, Direction.OUTBOUND if d == "O" else Direction.INBOUND, p, port, b, int(f))
                  for t, d, p, port, b, f in PACKETS)
    fm = featurize_flows(Trace(5.0, (), flows), FeatureConfig(5.0, 2, 1.0))
    assert fm.width == 30 == len(flow_columns())
    expected = {}
    for d, code in (("in", "I"), ("out", "O")):
        per_bin = []
        for b in range(5):
            pk = [p for p in PACKETS if p[1] == code and b <= p[0] < b + 1]
            stats = bin_stats([p[4] for p in pk], [p[0] for p in pk])
            flags = [sum(1 for p in pk if p[5] & f) for f in (Flag.SYN, Flag.ACK, Flag.FIN, Flag.RST, Flag.PSH)]
            per_bin.append(stats[:2] + flags + [len({p[2] for p in pk}), len({p[3] for p in pk})] + stats[2:])
        cols = list(COUNT_STATS) + list(MEAN_STATS)
        for i, name in enumerate(cols):
            values = [row[i] for row in per_bin]
            if name in COUNT_STATS:
                expected[f"net:{d}:{name}:sum"] = sum(values)
            else:
                expected[f"net:{d}:{name}:mean"] = sum(values) / 5
    got = dict(zip(fm.column_names, fm.values[0]))
    assert got.keys() == expected.keys()
    for k in expected:
        assert got[k] == pytest.approx(expected[k], abs=1e-12), k
    assert got["net:out:pkt_count:sum"] == 6 and got["net:out:distinct_peers:sum"] == 4


def test_combine_width_and_alignment(tiny_trace):
    vocab = build_vocabulary([tiny_trace], CFG)
    s, f = featurize_syscalls(tiny_trace, vocab, CFG), featurize_flows(tiny_trace, CFG)
    both = combine(s, f)
    assert both.width == s.width + f.width == 3 + 30
    assert both.column_names == s.column_names + f.column_names
    assert featurize(tiny_trace, CFG, vocab).values.tolist() == both.values.tolist()
    with pytest.raises(AlignmentError, match="row counts"):
        combine(s, f.take([0]))
    flipped = FeatureMatrix(f.values, f.columns, 1 - f.labels, f.window_index, f.config)
    with pytest.raises(AlignmentError, match="labels differ at row 0") as err:
        combine(s, flipped)
    assert err.value.row == 0


def test_scaler_rules():
    fm = FeatureMatrix(np.array([[0.0, 5.0], [2.0, 5.0]]), flow_columns()[:2], [0, 0], [0, 1], CFG)
    stats = fit_scaler(fm)
    assert stats.mean.tolist() == [1.0, 5.0] and stats.std.tolist() == [1.0, 0.0]
    assert apply_scaler(fm, stats).values.tolist() == [[-1.0, 0.0], [1.0, 0.0]]
    test = fm.with_values(np.array([[10.0, 6.0], [10.0, 6.0]]))
    assert apply_scaler(test, stats).values[0, 0] == 9.0  # training stats, not the test rows'


def test_restrict_vocabulary_matches_train_only_vocabulary(scenario):
    from dataclasses import replace
    from routerad.simulator import Family, simulate
    cfg = FeatureConfig(5.0, 2, 1.0)
    benign = simulate(replace(scenario, duration=30.0, seed=1, malware=None))
    mal = simulate(replace(scenario, duration=30.0, seed=2,
                           malware=replace(scenario.malware, family=Family.CRYPTOMINER)))
    wide = build_vocabulary([benign, mal], cfg)
    fb, fm_ = featurize_syscalls(benign, wide, cfg), featurize_syscalls(mal, wide, cfg)
    train = fb.take([0, 2, 4])
    narrow = build_vocabulary([Trace(30.0, tuple(e for e in benign.syscalls if int(e.timestamp // 5) in (0, 2, 4)))], cfg)
    want = featurize_syscalls(mal, narrow, cfg)
    got = restrict_vocabulary(fm_, train)
    assert got.column_names == want.column_names
    assert np.array_equal(got.values, want.values)


def test_feature_file_round_trip(tiny_trace, tmp_path):
    vocab = build_vocabulary([tiny_trace], CFG)
    fm = featurize(tiny_trace, CFG, vocab)
    buf = io.StringIO()
    write_features(fm, buf)
    back = read_features(io.StringIO(buf.getvalue()))
    assert back.column_names == fm.column_names and back.config == fm.config
    assert np.array_equal(back.values, fm.values) and np.array_equal(back.labels, fm.labels)
    assert buf.getvalue().startswith("#features v1 window=1.0 ngram=2 bin=1.0 set=both")


def test_vocabulary_json_round_trip():
    v = Vocabulary((("read", "write"), ("close", "read")), 2)
    assert Vocabulary.from_json(v.to_json()) == v
    with pytest.raises(ValueError):
        Vocabulary((("read", "write"), ("read", "write")), 2)


# --- properties ---------------------------------------------------------------

events = st.lists(st.tuples(st.integers(0, 2_999_999), st.integers(1, 3),
                            st.sampled_from(CATALOG[:6]), st.booleans()), min_size=1, max_size=60)


def make_trace(rows):
    rows = sorted(rows, key=lambda r: (r[0], r[1]))
    return Trace(3.0, tuple(SyscallEvent(us / 1e6, pid, name, Origin(int(m)))
                            for us, pid, name, m in rows))


@settings(max_examples=60, deadline=None)
@given(events, st.integers(1, 3))
def test_ngram_mass_property(rows, n):
    cfg = FeatureConfig(1.0, n, 1.0)
    t = make_trace(rows)
    vocab = Vocabulary((tuple(CATALOG[:n]),), n)  # mostly unk
    fm = featurize_syscalls(t, vocab, cfg)
    for w in range(3):
        per_pid = Counter(e.pid for e in t.syscalls if int(round(e.timestamp * 1e6)) // 1_000_000 == w)
        assert fm.values[w].sum() == sum(max(0, c - n + 1) for c in per_pid.values())


@settings(max_examples=40, deadline=None)
@given(events, st.randoms(use_true_random=False))
def test_permutation_invariance_among_equal_times(rows, rnd):
    t = make_trace(rows)
    vocab = Vocabulary(tuple(itertools.product(CATALOG[:5], repeat=2)), 2)
    base = featurize_syscalls(t, vocab, CFG).values
    # shuffle events sharing a timestamp across different pids
    groups = [list(g) for _, g in itertools.groupby(t.syscalls, key=lambda e: e.timestamp)]
    shuffled = []
    for g in groups:
        by_pid = {}
        for e in g:
            by_pid.setdefault(e.pid, []).append(e)
        order = list(by_pid)
        rnd.shuffle(order)
        shuffled += [e for pid in order for e in by_pid[pid]]
    t2 = Trace(3.0, tuple(shuffled))
    assert np.array_equal(featurize_syscalls(t2, vocab, CFG).values, base)


@settings(max_examples=40, deadline=None)
@given(events)
def test_labels_monotone_in_threshold(rows):
    t = make_trace(rows)
    counts = [int(featurize_flows(t, FeatureConfig(1.0, 2, 1.0, label_min_events=k)).labels.sum())
              for k in range(1, 6)]
    assert counts == sorted(counts, reverse=True)
