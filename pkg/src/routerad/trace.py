"""Timestamped observations collected on the router and their container.

A trace holds two streams: syscall events (one per kernel call issued by a
router process) and flow records (one per packet sent or received by the
router). Every observation carries its ground-truth origin so windows can be
labelled later.

Native on-disk format (UTF-8, one record per line)::

    #trace v1 duration=<s> seed=<u64> scenario=<id>
    S <ts> <pid> <name> <B|M>
    F <ts> <I|O> <peer> <port> <bytes> <flagmask> <B|M>

Timestamps are printed with 6 decimal places.
"""
from __future__ import annotations

import enum
import io
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple, TextIO

import numpy as np

from .errors import TraceParseError

# Fixed 40-name catalog. Order defines token ids, do not reorder.
CATALOG: tuple[str, ...] = (
    "read", "write", "openat", "close", "stat", "fstat", "lstat", "lseek",
    "mmap", "munmap", "brk", "ioctl", "poll", "select", "epoll_wait",
    "socket", "connect", "accept", "bind", "listen", "sendto", "recvfrom",
    "sendmsg", "recvmsg", "futex", "clock_gettime", "nanosleep",
    "clock_nanosleep", "sched_yield", "getpid", "getdents64", "rename",
    "unlink", "fcntl", "dup2", "clone", "execve", "wait4", "exit_group",
    "getrandom",
)
# Collapsed token for names outside the catalog (ingested real traces only).
OTHER = "other"
TOKENS: tuple[str, ...] = CATALOG + (OTHER,)
TOKEN_ID: dict[str, int] = {name: i for i, name in enumerate(TOKENS)}

TIME_RESOLUTION = 1e-6


class Origin(enum.IntEnum):
    BENIGN = 0
    MALWARE = 1

    @property
    def code(self) -> str:
        return "B" if self is Origin.BENIGN else "M"

    @classmethod
    def from_code(cls, code: str) -> "Origin":
        if code == "B":
            return cls.BENIGN
        if code == "M":
            return cls.MALWARE
        raise ValueError(f"bad origin code {code!r}")


class Direction(enum.IntEnum):
    INBOUND = 0
    OUTBOUND = 1

    @property
    def code(self) -> str:
        return "I" if self is Direction.INBOUND else "O"

    @classmethod
    def from_code(cls, code: str) -> "Direction":
        if code == "I":
            return cls.INBOUND
        if code == "O":
            return cls.OUTBOUND
        raise ValueError(f"bad direction code {code!r}")


class Flag(enum.IntFlag):
    SYN = 1
    ACK = 2
    FIN = 4
    RST = 8
    PSH = 16


FLAG_ORDER = (Flag.SYN, Flag.ACK, Flag.FIN, Flag.RST, Flag.PSH)


class Label(enum.IntEnum):
    BENIGN = 0
    MALICIOUS = 1


class SyscallEvent(NamedTuple):
    timestamp: float
    pid: int
    name: str
    origin: Origin = Origin.BENIGN


class FlowRecord(NamedTuple):
    timestamp: float
    direction: Direction
    peer: str
    port: int
    bytes: int
    flags: int = 0
    origin: Origin = Origin.BENIGN


class WindowLabel(NamedTuple):
    window_index: int
    label: Label


class Violation(NamedTuple):
    kind: str
    index: int | None
    reason: str


def quantize(t):
    """Round seconds to the microsecond grid used by traces."""
    return np.round(np.asarray(t, dtype=float) * 1e6) / 1e6


@dataclass(frozen=True, eq=False)
class Trace:
    duration: float
    syscalls: tuple[SyscallEvent, ...] = ()
    flows: tuple[FlowRecord, ...] = ()
    scenario_id: str = "unnamed"
    seed: int = 0

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (self.duration == other.duration and self.seed == other.seed
                and self.scenario_id == other.scenario_id
                and self.syscalls == other.syscalls and self.flows == other.flows)

    __hash__ = None

    @cached_property
    def syscall_arrays(self) -> dict[str, np.ndarray]:
        """Columnar view: timestamp, pid, token (id into TOKENS), origin."""
        n = len(self.syscalls)
        ts = np.fromiter((e.timestamp for e in self.syscalls), float, n)
        pid = np.fromiter((e.pid for e in self.syscalls), np.int64, n)
        tok = np.fromiter((TOKEN_ID.get(e.name, -1) for e in self.syscalls), np.int64, n)
        org = np.fromiter((int(e.origin) for e in self.syscalls), np.int8, n)
        return {"timestamp": ts, "pid": pid, "token": tok, "origin": org}

    @cached_property
    def flow_arrays(self) -> dict[str, np.ndarray]:
        """Columnar view of the flows; peers are mapped to first-seen integer ids."""
        n = len(self.flows)
        peer_ids: dict[str, int] = {}
        return {
            "timestamp": np.fromiter((f.timestamp for f in self.flows), float, n),
            "direction": np.fromiter((int(f.direction) for f in self.flows), np.int8, n),
            "peer": np.fromiter((peer_ids.setdefault(f.peer, len(peer_ids)) for f in self.flows),
                                np.int64, n),
            "port": np.fromiter((f.port for f in self.flows), np.int64, n),
            "bytes": np.fromiter((f.bytes for f in self.flows), float, n),
            "flags": np.fromiter((int(f.flags) for f in self.flows), np.int64, n),
            "origin": np.fromiter((int(f.origin) for f in self.flows), np.int8, n),
        }

    def count(self, origin: Origin) -> int:
        return (sum(1 for e in self.syscalls if e.origin == origin)
                + sum(1 for f in self.flows if f.origin == origin))


def validate_trace(trace: Trace) -> list[Violation]:
    """Check trace invariants; one violation per broken invariant, empty if sound."""
    out: list[Violation] = []
    if not trace.duration > 0:
        out.append(Violation("duration", None, f"duration must be > 0, got {trace.duration}"))
    if not 0 <= trace.seed < 2**64:
        out.append(Violation("seed", None, "seed must be an unsigned 64-bit integer"))

    def first(pred, seq):
        return next((i for i, x in enumerate(seq) if pred(x)), None)

    sc = trace.syscalls
    checks = [
        ("syscall negative timestamp", lambda e: e.timestamp < 0, "timestamp < 0"),
        ("syscall timestamp exceeds duration", lambda e: e.timestamp > trace.duration,
         "timestamp exceeds duration"),
        ("syscall pid", lambda e: e.pid <= 0, "pid must be positive"),
        ("syscall name", lambda e: e.name not in TOKEN_ID, "name not in catalog"),
        ("syscall origin", lambda e: not isinstance(e.origin, Origin), "bad origin"),
    ]
    for kind, pred, reason in checks:
        i = first(pred, sc)
        if i is not None:
            out.append(Violation(kind, i, f"syscall {i}: {reason}"))
    for i in range(1, len(sc)):
        a, b = sc[i - 1], sc[i]
        if b.timestamp < a.timestamp or (b.timestamp == a.timestamp and b.pid < a.pid):
            out.append(Violation("syscall ordering", i, f"syscall {i}: out of order"))
            break

    fl = trace.flows
    checks = [
        ("flow negative timestamp", lambda f: f.timestamp < 0, "timestamp < 0"),
        ("flow timestamp exceeds duration", lambda f: f.timestamp > trace.duration,
         "timestamp exceeds duration"),
        ("flow bytes", lambda f: f.bytes < 0, "bytes < 0"),
        ("flow port", lambda f: not 0 <= f.port <= 65535, "port outside 0-65535"),
        ("flow flags", lambda f: not 0 <= int(f.flags) < 32, "unknown flag bits"),
        ("flow peer", lambda f: not f.peer or any(c.isspace() for c in f.peer),
         "peer id empty or contains whitespace"),
        ("flow origin", lambda f: not isinstance(f.origin, Origin), "bad origin"),
    ]
    for kind, pred, reason in checks:
        i = first(pred, fl)
        if i is not None:
            out.append(Violation(kind, i, f"flow {i}: {reason}"))
    for i in range(1, len(fl)):
        if fl[i].timestamp < fl[i - 1].timestamp:
            out.append(Violation("flow ordering", i, f"flow {i}: out of order"))
            break
    return out


def format_syscall(e: SyscallEvent) -> str:
    return f"S {e.timestamp:.6f} {e.pid} {e.name} {Origin(e.origin).code}"


def format_flow(f: FlowRecord) -> str:
    return (f"F {f.timestamp:.6f} {Direction(f.direction).code} {f.peer} {f.port} "
            f"{f.bytes} {int(f.flags)} {Origin(f.origin).code}")


def write_trace(trace: Trace, dest: str | os.PathLike | TextIO) -> None:
    """Write the native line format. Syscalls first, then flows."""
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            write_trace(trace, fh)
        return
    dest.write(f"#trace v1 duration={trace.duration!r} seed={trace.seed} "
               f"scenario={trace.scenario_id}\n")
    dest.write("".join(format_syscall(e) + "\n" for e in trace.syscalls))
    dest.write("".join(format_flow(f) + "\n" for f in trace.flows))


def trace_to_text(trace: Trace) -> str:
    buf = io.StringIO()
    write_trace(trace, buf)
    return buf.getvalue()


def parse_header(line: str) -> dict[str, str]:
    parts = line.split()
    if len(parts) < 2 or parts[0] != "#trace":
        raise TraceParseError("missing '#trace' header", 1)
    if parts[1] != "v1":
        raise TraceParseError(f"unsupported trace version {parts[1]!r}", 1)
    fields = {}
    for p in parts[2:]:
        key, sep, value = p.partition("=")
        if not sep:
            raise TraceParseError(f"bad header field {p!r}", 1)
        fields[key] = value
    missing = {"duration", "seed", "scenario"} - fields.keys()
    if missing:
        raise TraceParseError("header lacks " + ", ".join(sorted(missing)), 1)
    return fields


def parse_native_line(line: str, lineno: int) -> SyscallEvent | FlowRecord:
    parts = line.split()
    try:
        if parts[0] == "S" and len(parts) == 5:
            return SyscallEvent(float(parts[1]), int(parts[2]), parts[3],
                                Origin.from_code(parts[4]))
        if parts[0] == "F" and len(parts) == 8:
            return FlowRecord(float(parts[1]), Direction.from_code(parts[2]), parts[3],
                              int(parts[4]), int(parts[5]), int(parts[6]),
                              Origin.from_code(parts[7]))
    except ValueError as exc:
        raise TraceParseError(f"bad field ({exc})", lineno) from None
    raise TraceParseError("unrecognized record", lineno)


def read_trace(src: str | os.PathLike | TextIO | Iterable[str]) -> Trace:
    if isinstance(src, (str, os.PathLike)):
        with open(src, encoding="utf-8") as fh:
            return read_trace(fh)
    lines = iter(src)
    header = next(lines, None)
    if header is None:
        raise TraceParseError("empty trace file", 1)
    fields = parse_header(header)
    syscalls, flows = [], []
    for lineno, line in enumerate(lines, start=2):
        if not line.strip():
            continue
        rec = parse_native_line(line, lineno)
        (syscalls if isinstance(rec, SyscallEvent) else flows).append(rec)
    try:
        duration, seed = float(fields["duration"]), int(fields["seed"])
    except ValueError as exc:
        raise TraceParseError(f"bad header value ({exc})", 1) from None
    return Trace(duration, tuple(syscalls), tuple(flows), fields["scenario"], seed)
