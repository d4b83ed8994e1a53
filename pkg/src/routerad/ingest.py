"""Parsers for external captures: line-based syscall logs and flow CSVs.

Syscall logs mix two line kinds, detected per line:

    S <ts> <pid> <name> <B|M>                 native record
    <pid> <ts> <name>(<args>) = <ret>         strace ``-f -ttt`` style

``<ts>`` in strace lines may also be wall-clock ``HH:MM:SS[.ffffff]``.
Continuation lines (``<... read resumed>``), signal lines (``--- SIGCHLD``)
and exit lines (``+++ exited``) are skipped. Names outside the catalog are
mapped to ``other`` and counted.

Flow CSV columns are resolved through ``FLOW_ALIASES`` (case and
punctuation insensitive). Each CSV row becomes one FlowRecord.

=============  ==========================================================
field          accepted headers
=============  ==========================================================
timestamp      timestamp, time, ts, frame.time_epoch, Timestamp
direction      direction, dir
src            src, src_ip, source, Src IP, Source IP, ip.src
dst            dst, dst_ip, destination, Dst IP, Destination IP, ip.dst
port           port, peer_port
src_port       src_port, sport, Src Port, Source Port
dst_port       dst_port, dport, Dst Port, Destination Port
bytes          bytes, length, len, size, frame.len, Pkt Len, Packet Length,
               TotLen Fwd Pkts, Total Length of Fwd Packets
flags          flags, tcp_flags, tcp.flags, Flags
origin         origin, label, Label
=============  ==========================================================

Required: timestamp, bytes, flags, and either direction + port or
src + dst + src_port/dst_port. When ``flags`` is absent but CICFlowMeter
flag-count columns (``SYN Flag Cnt`` and friends) are present, the mask is
built from whichever counts are non-zero. Integer flag cells use the TCP
header layout (FIN=0x01, SYN=0x02, RST=0x04, PSH=0x08, ACK=0x10); letter
cells such as ``SA`` or ``AP`` are also accepted.
"""
from __future__ import annotations

import csv
import math
import re
from collections import Counter
from datetime import datetime, timezone
from typing import Iterable, NamedTuple, TextIO

from .errors import SchemaError, TraceParseError
from .trace import (CATALOG, OTHER, Direction, Flag, FlowRecord, Origin, SyscallEvent, Trace,
                    parse_native_line, quantize)

_STRACE = re.compile(r"^\s*(?:\[pid\s+)?(\d+)\]?\s+([0-9:.]+)\s+([A-Za-z_][A-Za-z0-9_]*)\((.*)$")
_SKIP = re.compile(r"^\s*(?:\[pid\s+)?\d*\]?\s*[0-9:.]*\s*(?:<\.\.\.|---|\+\+\+)")


class SyscallLog(NamedTuple):
    events: list[SyscallEvent]
    other_names: Counter  # out-of-catalog name -> occurrences
    skipped_lines: int

    @property
    def other_count(self) -> int:
        return sum(self.other_names.values())


class FlowTable(NamedTuple):
    records: list[FlowRecord]
    ignored_columns: list[str]


def _strace_time(text: str) -> float:
    if ":" in text:
        h, m, s = text.split(":")
        return int(h) * 3600 + int(m) * 60 + float(s)
    return float(text)


def parse_syscall_log(stream: Iterable[str], catalog: Iterable[str] = CATALOG,
                      rebase: bool = False) -> SyscallLog:
    """Parse native ``S`` lines and strace lines into events sorted by timestamp.

    Sorting is stable, so equal timestamps keep input order. Blank lines and
    ``#`` comments are ignored. With ``rebase`` the earliest event moves to 0.
    """
    known = frozenset(catalog)
    events: list[SyscallEvent] = []
    others: Counter = Counter()
    skipped = 0
    for lineno, line in enumerate(stream, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if text.startswith("S "):
            ev = parse_native_line(text, lineno)
            if not isinstance(ev, SyscallEvent):
                raise TraceParseError("unrecognized record", lineno)
        else:
            m = _STRACE.match(text)
            if m is None:
                if _SKIP.match(text):
                    skipped += 1
                    continue
                raise TraceParseError("unrecognized record", lineno)
            try:
                ev = SyscallEvent(_strace_time(m.group(2)), int(m.group(1)), m.group(3), Origin.BENIGN)
            except ValueError:
                raise TraceParseError(f"bad timestamp {m.group(2)!r}", lineno) from None
        if ev.name not in known:
            others[ev.name] += 1
            ev = ev._replace(name=OTHER)
        events.append(ev)
    events.sort(key=lambda e: e.timestamp)
    if rebase and events:
        t0 = events[0].timestamp
        events = [e._replace(timestamp=e.timestamp - t0) for e in events]
    return SyscallLog(events, others, skipped)


FLOW_ALIASES: dict[str, tuple[str, ...]] = {
    "timestamp": ("timestamp", "time", "ts", "frame.time_epoch"),
    "direction": ("direction", "dir"),
    "src": ("src", "src_ip", "source", "source_ip", "ip.src"),
    "dst": ("dst", "dst_ip", "destination", "destination_ip", "ip.dst"),
    "port": ("port", "peer_port"),
    "src_port": ("src_port", "sport", "source_port"),
    "dst_port": ("dst_port", "dport", "destination_port"),
    "bytes": ("bytes", "length", "len", "size", "frame.len", "pkt_len", "packet_length",
              "totlen_fwd_pkts", "total_length_of_fwd_packets"),
    "flags": ("flags", "tcp_flags", "tcp.flags"),
    "origin": ("origin", "label"),
}
CIC_FLAG_COLUMNS = {
    Flag.SYN: ("syn_flag_cnt", "syn_flag_count"),
    Flag.ACK: ("ack_flag_cnt", "ack_flag_count"),
    Flag.FIN: ("fin_flag_cnt", "fin_flag_count"),
    Flag.RST: ("rst_flag_cnt", "rst_flag_count"),
    Flag.PSH: ("psh_flag_cnt", "psh_flag_count"),
}
# TCP header bit -> internal flag
_TCP_BITS = {0x01: Flag.FIN, 0x02: Flag.SYN, 0x04: Flag.RST, 0x08: Flag.PSH, 0x10: Flag.ACK}
_FLAG_LETTERS = {"S": Flag.SYN, "A": Flag.ACK, "F": Flag.FIN, "R": Flag.RST, "P": Flag.PSH}
_DIRECTIONS = {"i": Direction.INBOUND, "in": Direction.INBOUND, "inbound": Direction.INBOUND,
               "rx": Direction.INBOUND, "o": Direction.OUTBOUND, "out": Direction.OUTBOUND,
               "outbound": Direction.OUTBOUND, "tx": Direction.OUTBOUND}
_TIME_FORMATS = ("%d/%m/%Y %H:%M:%S", "%d/%m/%Y %I:%M:%S %p", "%d/%m/%Y %H:%M", "%d/%m/%Y %I:%M %p")


def normalize_header(name: str) -> str:
    """Lower-case, trimmed, inner spaces and dashes as underscores (dots kept)."""
    return re.sub(r"[\s\-/]+", "_", name.strip().lower())


def _parse_time(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text)
    except ValueError:
        for fmt in _TIME_FORMATS:
            try:
                dt = datetime.strptime(text, fmt)
                break
            except ValueError:
                continue
        else:
            raise ValueError(f"unparsable timestamp {text!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _parse_flags(text: str) -> int:
    t = text.strip()
    if not t:
        return 0
    try:
        wire = int(t, 0)
    except ValueError:
        pass
    else:
        return sum(int(flag) for bit, flag in _TCP_BITS.items() if wire & bit)
    mask = 0
    for ch in t.upper():
        if ch not in _FLAG_LETTERS:
            raise ValueError(f"unknown flag letter {ch!r}")
        mask |= _FLAG_LETTERS[ch]
    return mask


def _parse_origin(text: str) -> Origin:
    t = text.strip().lower()
    if t in ("", "b", "benign", "0", "normal"):
        return Origin.BENIGN
    return Origin.MALWARE


def _peer(text: str) -> str:
    return re.sub(r"\s+", "_", text.strip()) or "unknown"


def _port_field(where: dict[str, int], d: Direction) -> str:
    # the remote end's port: destination when sending, source when receiving
    if "port" in where:
        return "port"
    if d is Direction.INBOUND and "src_port" in where:
        return "src_port"
    return "dst_port" if "dst_port" in where else "src_port"


def parse_flow_csv(stream: TextIO | Iterable[str], router: str | None = None,
                   rebase: bool = False) -> FlowTable:
    """Parse a flow/packet CSV into FlowRecords sorted (stably) by timestamp.

    With src/dst columns a row is outbound when ``src == router``, inbound
    otherwise, and the peer is the other endpoint. Without ``router`` the
    address occurring most often across src and dst is taken as the router.
    """
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        raise SchemaError(["timestamp", "bytes", "flags", "direction|src/dst", "port"])
    norm = [normalize_header(h) for h in header]
    where: dict[str, int] = {}
    for field, aliases in FLOW_ALIASES.items():
        for i, h in enumerate(norm):
            if h in aliases:
                where.setdefault(field, i)
                break
    flag_cols = {}
    for flag, aliases in CIC_FLAG_COLUMNS.items():
        for i, h in enumerate(norm):
            if h in aliases:
                flag_cols[flag] = i
                break
    missing = [f for f in ("timestamp", "bytes") if f not in where]
    if "flags" not in where and not flag_cols:
        missing.append("flags")
    by_direction = "direction" in where
    if by_direction:
        if not ({"port", "dst_port", "src_port"} & where.keys()):
            missing.append("port")
    else:
        missing += [f for f in ("src", "dst") if f not in where]
        if not ({"port", "dst_port"} & where.keys()):
            missing.append("dst_port")
    if missing:
        raise SchemaError(missing)
    used = set(where.values()) | set(flag_cols.values())
    ignored = [h for i, h in enumerate(header) if i not in used]

    rows = []
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        rows.append((rowno, row))
    if not by_direction and router is None:
        counts = Counter()
        for _, row in rows:
            counts[row[where["src"]].strip()] += 1
            counts[row[where["dst"]].strip()] += 1
        router = min(counts, key=lambda a: (-counts[a], a)) if counts else ""

    def cell(rowno, row, field):
        i = where[field]
        if i >= len(row):
            raise TraceParseError(f"column {header[i]!r}: missing cell", rowno)
        return row[i].strip()

    records = []
    for rowno, row in rows:
        current = "timestamp"
        try:
            ts = _parse_time(cell(rowno, row, "timestamp"))
            current = "bytes"
            size = float(cell(rowno, row, "bytes"))
            if not math.isfinite(size) or size < 0:
                raise ValueError(f"bad byte count {size}")
            current = "flags"
            if "flags" in where:
                flags = _parse_flags(cell(rowno, row, "flags"))
            else:
                flags = 0
                for flag, i in flag_cols.items():
                    current = header[i]
                    if i < len(row) and row[i].strip() and float(row[i]) > 0:
                        flags |= flag
            if by_direction:
                current = "direction"
                d = _DIRECTIONS.get(cell(rowno, row, "direction").lower())
                if d is None:
                    raise ValueError("direction must be in/out")
                peer = _peer(cell(rowno, row, "src" if d is Direction.INBOUND else "dst")) \
                    if {"src", "dst"} <= where.keys() else "peer"
            else:
                current = "src"
                src, dst = cell(rowno, row, "src"), cell(rowno, row, "dst")
                d = Direction.OUTBOUND if src == router else Direction.INBOUND
                peer = _peer(dst if d is Direction.OUTBOUND else src)
            pfield = _port_field(where, d)
            current = pfield
            text = cell(rowno, row, pfield)
            port = int(float(text)) if text else 0
            if not 0 <= port <= 65535:
                raise ValueError(f"port {port} outside 0-65535")
            origin = Origin.BENIGN
            if "origin" in where:
                current = "origin"
                origin = _parse_origin(cell(rowno, row, "origin"))
        except ValueError as exc:
            col = header[where[current]] if current in where else current
            raise TraceParseError(f"column {col!r}: {exc}", rowno) from None
        records.append(FlowRecord(ts, d, peer, port, int(round(size)), int(flags), origin))
    records.sort(key=lambda r: r.timestamp)
    if rebase and records:
        t0 = records[0].timestamp
        records = [r._replace(timestamp=r.timestamp - t0) for r in records]
    return FlowTable(records, ignored)


def build_trace(syscalls: Iterable[SyscallEvent] = (), flows: Iterable[FlowRecord] = (),
                duration: float | None = None, scenario_id: str = "ingested",
                rebase: bool = True) -> Trace:
    """Assemble parsed streams into a Trace.

    The earliest record of either stream becomes t = 0 (``rebase``) and
    timestamps are snapped to microseconds. Syscalls are ordered by (time,
    pid); the sort is stable so each pid keeps its input order. Without an
    explicit ``duration`` the trace ends 1 us after the last record.
    """
    sc, fl = list(syscalls), list(flows)
    times = [e.timestamp for e in sc] + [f.timestamp for f in fl]
    t0 = min(times) if (rebase and times) else 0.0
    sc = [e._replace(timestamp=float(quantize(e.timestamp - t0))) for e in sc]
    fl = [f._replace(timestamp=float(quantize(f.timestamp - t0))) for f in fl]
    sc.sort(key=lambda e: (e.timestamp, e.pid))
    fl.sort(key=lambda f: f.timestamp)
    if duration is None:
        last = max([e.timestamp for e in sc] + [f.timestamp for f in fl], default=0.0)
        duration = float(quantize(last + 1e-6))
    return Trace(duration, tuple(sc), tuple(fl), scenario_id, 0)
