"""Seed-controlled synthesis of router behaviour traces.

The benign background is a set of resident router daemons, each emitting
Poisson syscall arrivals drawn i.i.d. from its repertoire and Poisson packet
arrivals with log-normal payload sizes. On top of that, at most one malware
emitter runs from ``malware_start`` to the end of the trace:

keylogger
    Continuous ``select``/``read`` keypress polling. Every ``exfil_interval``
    seconds, ``exfil_size`` buffered keypresses (``bytes_per_keypress`` each)
    leave in one small outbound packet.
ransomware
    Every ``exfil_interval`` seconds one file is traversed, copied to the
    attacker as a multi-packet outbound burst, encrypted and renamed. File
    sizes are log-normal, scaled by ``exfil_size``.
cryptominer
    Mining rounds: a dense clock_gettime/futex/sched_yield burst lasting
    ``min(mine_time, exfil_interval / 2)``, then the miner idles for the rest
    of the interval before sending the tiny hash packet.

Every malware process also wakes every ``heartbeat_interval`` seconds while
resident (``clock_gettime`` then ``select``). Exfiltration instants sit on a
grid ``start + phase + j * exfil_interval`` with a random phase, so counts are
exact up to one boundary event.

Scenario files are TOML with ``schema = 1``; see ``data/default_scenario.toml``.
"""
from __future__ import annotations

import enum
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable

import numpy as np

from . import rng as rng_mod
from .errors import ConfigError
from .trace import (TOKEN_ID, TOKENS, Direction, Flag, FlowRecord, Origin,
                    SyscallEvent, Trace)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1


class Family(str, enum.Enum):
    KEYLOGGER = "keylogger"
    RANSOMWARE = "ransomware"
    CRYPTOMINER = "cryptominer"


@dataclass(frozen=True)
class ProcessProfile:
    name: str
    pid: int
    syscalls: dict[str, float]
    event_rate: float
    flow_rate: float = 0.0
    flow_size_mu: float = 5.0
    flow_size_sigma: float = 1.0
    inbound_fraction: float = 0.5
    peers: tuple[str, ...] = ("lan-host",)
    ports: tuple[int, ...] = (80,)


@dataclass(frozen=True)
class BenignProfile:
    processes: tuple[ProcessProfile, ...] = ()


@dataclass(frozen=True)
class MalwareSpec:
    family: Family
    exfil_interval: float
    exfil_size: int = 1
    pid: int = 4242
    attacker: str = "attacker"
    port: int = 0  # 0 means the family default
    heartbeat_interval: float = 1.0
    # keylogger
    keypress_poll_rate: float = 6.0
    bytes_per_keypress: int = 8
    # ransomware
    file_size_mu: float = 11.5
    file_size_sigma: float = 0.8
    mss: int = 1448
    link_rate: float = 2.0e6
    read_chunk: int = 65536
    # cryptominer
    mine_time: float = 0.01
    mine_rate: float = 1000.0
    mine_mix: dict[str, float] = field(default_factory=lambda: {
        "clock_gettime": 0.4, "futex": 0.3, "sched_yield": 0.3})
    hash_bytes: int = 64

    @property
    def exfil_port(self) -> int:
        if self.port:
            return self.port
        return {Family.KEYLOGGER: 4444, Family.RANSOMWARE: 22, Family.CRYPTOMINER: 3333}[self.family]


@dataclass(frozen=True)
class Scenario:
    duration: float
    seed: int = 0
    benign: BenignProfile = BenignProfile()
    malware: MalwareSpec | None = None
    malware_start: float = 0.0
    scenario_id: str = "scenario"


# ---------------------------------------------------------------------------
# validation and loading

def _check_distribution(where: str, dist: dict[str, float]) -> None:
    for name, p in dist.items():
        if name not in TOKEN_ID:
            raise ConfigError(f"{where}.{name}", "not a catalog syscall")
        if not p >= 0:
            raise ConfigError(f"{where}.{name}", "probability must be >= 0")
    if abs(sum(dist.values()) - 1.0) > 1e-9:
        raise ConfigError(where, f"probabilities sum to {sum(dist.values())}, expected 1")


def validate_scenario(s: Scenario) -> None:
    if not (isinstance(s.duration, (int, float)) and s.duration > 0 and math.isfinite(s.duration)):
        raise ConfigError("duration", "must be a positive number of seconds")
    if not 0 <= s.seed < 2**64:
        raise ConfigError("seed", "must be an unsigned 64-bit integer")
    if not s.scenario_id or any(c.isspace() for c in s.scenario_id):
        raise ConfigError("id", "scenario id must be non-empty without whitespace")
    pids = set()
    for i, p in enumerate(s.benign.processes):
        where = f"benign.process[{i}]"
        if p.pid <= 0 or p.pid in pids:
            raise ConfigError(f"{where}.pid", "must be positive and unique")
        pids.add(p.pid)
        for name in ("event_rate", "flow_rate", "flow_size_sigma"):
            if not getattr(p, name) >= 0:
                raise ConfigError(f"{where}.{name}", "must be >= 0")
        if not 0 <= p.inbound_fraction <= 1:
            raise ConfigError(f"{where}.inbound_fraction", "must lie in [0, 1]")
        if p.event_rate > 0:
            _check_distribution(f"{where}.syscalls", p.syscalls)
        if p.flow_rate > 0 and (not p.peers or not p.ports):
            raise ConfigError(f"{where}.peers", "flows need at least one peer and port")
        if any(not 0 <= port <= 65535 for port in p.ports):
            raise ConfigError(f"{where}.ports", "ports must lie in 0-65535")
    m = s.malware
    if m is None:
        return
    if not isinstance(m.family, Family):
        raise ConfigError("malware.family", f"unknown family {m.family!r}")
    if not m.exfil_interval > 0:
        raise ConfigError("malware.exfil_interval", "must be > 0")
    if not m.exfil_size >= 1:
        raise ConfigError("malware.exfil_size", "must be >= 1")
    if m.pid <= 0 or m.pid in pids:
        raise ConfigError("malware.pid", "must be positive and distinct from benign pids")
    if not 0 <= s.malware_start < s.duration:
        raise ConfigError("malware_start", "must satisfy 0 <= malware_start < duration")
    for name in ("heartbeat_interval", "link_rate", "mss", "read_chunk"):
        if not getattr(m, name) > 0:
            raise ConfigError(f"malware.{name}", "must be > 0")
    for name in ("keypress_poll_rate", "mine_time", "mine_rate", "file_size_sigma",
                 "bytes_per_keypress", "hash_bytes"):
        if not getattr(m, name) >= 0:
            raise ConfigError(f"malware.{name}", "must be >= 0")
    _check_distribution("malware.mine_mix", m.mine_mix)


def _build(cls, data: dict[str, Any], where: str, **fixed):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}.{sorted(unknown)[0]}", "unknown key")
    kwargs = dict(data)
    kwargs.update(fixed)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(where, str(exc)) from None


def scenario_from_dict(doc: dict[str, Any], seed: int | None = None) -> Scenario:
    doc = dict(doc)
    if doc.pop("schema", None) != SCHEMA_VERSION:
        raise ConfigError("schema", f"expected schema = {SCHEMA_VERSION}")
    procs = []
    for i, p in enumerate(doc.pop("benign", {}).get("process", [])):
        p = dict(p)
        p["peers"] = tuple(p.get("peers", ("lan-host",)))
        p["ports"] = tuple(p.get("ports", (80,)))
        procs.append(_build(ProcessProfile, p, f"benign.process[{i}]"))
    malware = None
    mdoc = doc.pop("malware", None)
    if mdoc:
        mdoc = dict(mdoc)
        try:
            family = Family(mdoc.pop("family"))
        except (KeyError, ValueError):
            raise ConfigError("malware.family", "must be keylogger, ransomware or cryptominer") from None
        malware = _build(MalwareSpec, mdoc, "malware", family=family)
    if "id" in doc:
        doc["scenario_id"] = doc.pop("id")
    if seed is not None:
        doc["seed"] = seed
    scenario = _build(Scenario, doc, "scenario", benign=BenignProfile(tuple(procs)),
                      malware=malware)
    validate_scenario(scenario)
    return scenario


def load_scenario(path: str | os.PathLike, seed: int | None = None) -> Scenario:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"not valid TOML ({exc})") from None
    return scenario_from_dict(doc, seed)


def default_scenario_path() -> str:
    return os.path.join(os.path.dirname(__file__), "data", "default_scenario.toml")


def default_scenario(**overrides) -> Scenario:
    return replace(load_scenario(default_scenario_path()), **overrides)


# ---------------------------------------------------------------------------
# event accumulation

class Emission:
    """Column buffers for generated syscalls and packets."""

    def __init__(self):
        self.sys: list[tuple[np.ndarray, ...]] = []
        self.flow: list[tuple[np.ndarray, ...]] = []

    def add_syscalls(self, t, pid: int, tokens, origin: Origin) -> None:
        t = np.asarray(t, dtype=float)
        tokens = np.asarray(tokens, dtype=np.int64)
        if t.size:
            self.sys.append((t, np.full(t.size, pid, np.int64), tokens,
                             np.full(t.size, int(origin), np.int8)))

    def add_flows(self, t, direction, peer, port, nbytes, flags, origin: Origin) -> None:
        t = np.asarray(t, dtype=float)
        n = t.size
        if not n:
            return
        bc = lambda v, dt: np.broadcast_to(np.asarray(v, dtype=dt), (n,))
        self.flow.append((t, bc(direction, np.int8), bc(peer, object), bc(port, np.int64),
                          bc(nbytes, np.int64), bc(flags, np.int64),
                          np.full(n, int(origin), np.int8)))

    def extend(self, other: "Emission") -> None:
        self.sys.extend(other.sys)
        self.flow.extend(other.flow)

    @property
    def n_syscalls(self) -> int:
        return sum(c[0].size for c in self.sys)

    @property
    def n_flows(self) -> int:
        return sum(c[0].size for c in self.flow)

    def to_trace(self, duration: float, scenario_id: str, seed: int) -> Trace:
        dur_us = round(duration * 1e6)

        def cat(chunks, i, dtype):
            if not chunks:
                return np.empty(0, dtype)
            return np.concatenate([c[i] for c in chunks])

        t_us = np.round(cat(self.sys, 0, float) * 1e6).astype(np.int64)
        pid, tok, org = cat(self.sys, 1, np.int64), cat(self.sys, 2, np.int64), cat(self.sys, 3, np.int8)
        keep = (t_us >= 0) & (t_us <= dur_us)
        seq = np.arange(t_us.size)
        order = np.lexsort((seq[keep], pid[keep], t_us[keep]))
        t_s = (t_us[keep][order] / 1e6).tolist()
        syscalls = tuple(SyscallEvent(t, p, TOKENS[k], Origin(o)) for t, p, k, o in zip(
            t_s, pid[keep][order].tolist(), tok[keep][order].tolist(), org[keep][order].tolist()))

        f_us = np.round(cat(self.flow, 0, float) * 1e6).astype(np.int64)
        cols = [cat(self.flow, i, dt) for i, dt in
                ((1, np.int8), (2, object), (3, np.int64), (4, np.int64), (5, np.int64), (6, np.int8))]
        keep = (f_us >= 0) & (f_us <= dur_us)
        order = np.lexsort((np.arange(f_us.size)[keep], f_us[keep]))
        ft = (f_us[keep][order] / 1e6).tolist()
        d, peer, port, nb, fl, o = (c[keep][order].tolist() for c in cols)
        flows = tuple(FlowRecord(*rec) for rec in zip(
            ft, map(Direction, d), peer, port, nb, fl, map(Origin, o)))
        return Trace(duration, syscalls, flows, scenario_id, seed)


def _token_ids(names) -> np.ndarray:
    return np.array([TOKEN_ID[n] for n in names], dtype=np.int64)


def _motifs(starts: np.ndarray, motif: list[str], spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Repeat ``motif`` at every start time, ``spacing`` seconds between calls."""
    starts = np.asarray(starts, dtype=float)
    k = len(motif)
    t = (starts[:, None] + spacing * np.arange(k)[None, :]).ravel()
    return t, np.tile(_token_ids(motif), starts.size)


def _draw_tokens(rng: np.random.Generator, dist: dict[str, float], n: int) -> np.ndarray:
    names = list(dist)
    p = np.array([dist[k] for k in names], dtype=float)
    return _token_ids(names)[rng.choice(len(names), size=n, p=p / p.sum())]


def _grid(rng: np.random.Generator, start: float, end: float, interval: float) -> np.ndarray:
    phase = rng.uniform(0.0, interval)
    n = int(math.floor((end - start - phase) / interval)) + 1 if end - start > phase else 0
    return start + phase + interval * np.arange(max(n, 0))


def _heartbeat(spec: MalwareSpec, rng, start: float, end: float, em: Emission) -> None:
    wake = _grid(rng, start, end, spec.heartbeat_interval)
    t, tok = _motifs(wake, ["clock_gettime", "select"], 2e-5)
    em.add_syscalls(t, spec.pid, tok, Origin.MALWARE)


def _ack_flags(n: int) -> np.ndarray:
    return np.full(n, int(Flag.ACK))


# ---------------------------------------------------------------------------
# emitters

def emit_benign_process(proc: ProcessProfile, rng: np.random.Generator,
                        timeline: tuple[float, float]) -> Emission:
    start, end = timeline
    span = end - start
    em = Emission()
    n = rng.poisson(proc.event_rate * span)
    t = np.sort(rng.uniform(start, end, n))
    if n:
        em.add_syscalls(t, proc.pid, _draw_tokens(rng, proc.syscalls, n), Origin.BENIGN)
    m = rng.poisson(proc.flow_rate * span)
    if m:
        ft = np.sort(rng.uniform(start, end, m))
        inbound = rng.random(m) < proc.inbound_fraction
        direction = np.where(inbound, int(Direction.INBOUND), int(Direction.OUTBOUND))
        peers = np.array(proc.peers, dtype=object)[rng.integers(0, len(proc.peers), m)]
        ports = np.array(proc.ports)[rng.integers(0, len(proc.ports), m)]
        nbytes = np.clip(np.round(rng.lognormal(proc.flow_size_mu, proc.flow_size_sigma, m)),
                         0, 65535).astype(np.int64)
        u = rng.random((m, 2))
        flags = (int(Flag.ACK) + np.where(nbytes > 0, int(Flag.PSH), 0)
                 + np.where(u[:, 0] < 0.02, int(Flag.SYN), 0)
                 + np.where(u[:, 1] < 0.02, int(Flag.FIN), 0))
        em.add_flows(ft, direction, peers, ports, nbytes, flags, Origin.BENIGN)
    return em


def emit_keylogger(spec: MalwareSpec, rng: np.random.Generator,
                   timeline: tuple[float, float]) -> Emission:
    start, end = timeline
    em = Emission()
    _heartbeat(spec, rng, start, end, em)
    n_poll = rng.poisson(spec.keypress_poll_rate * (end - start))
    t, tok = _motifs(np.sort(rng.uniform(start, end, n_poll)), ["select", "read"], 1e-5)
    em.add_syscalls(t, spec.pid, tok, Origin.MALWARE)

    sends = _grid(rng, start, end, spec.exfil_interval)
    t, tok = _motifs(sends, ["clock_gettime", "sendto"], 1e-5)
    em.add_syscalls(t, spec.pid, tok, Origin.MALWARE)
    payload = spec.exfil_size * spec.bytes_per_keypress
    em.add_flows(sends + 5e-5, int(Direction.OUTBOUND), spec.attacker, spec.exfil_port,
                 payload, int(Flag.ACK | Flag.PSH), Origin.MALWARE)
    em.add_flows(sends + 2e-3, int(Direction.INBOUND), spec.attacker, spec.exfil_port,
                 0, int(Flag.ACK), Origin.MALWARE)
    return em


def ransomware_file_sizes(spec: MalwareSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    sizes = np.round(rng.lognormal(spec.file_size_mu, spec.file_size_sigma, n) * spec.exfil_size)
    return np.maximum(sizes, 1).astype(np.int64)


def emit_ransomware(spec: MalwareSpec, rng: np.random.Generator,
                    timeline: tuple[float, float]) -> Emission:
    start, end = timeline
    em = Emission()
    _heartbeat(spec, rng, start, end, em)
    starts = _grid(rng, start, end, spec.exfil_interval)
    sizes = ransomware_file_sizes(spec, rng, starts.size)
    for t0, size in zip(starts.tolist(), sizes.tolist()):
        chunks = -(-size // spec.read_chunk)
        copy_time = size / spec.link_rate
        motif = (["getdents64", "lstat", "openat", "fstat"] + ["read", "sendto"] * chunks
                 + ["close", "openat"] + ["read", "write"] * chunks + ["close", "rename"])
        t = t0 + np.linspace(0.0, 2 * copy_time + 1e-3, len(motif))
        em.add_syscalls(t, spec.pid, _token_ids(motif), Origin.MALWARE)

        n_pkt = -(-size // spec.mss)
        payload = np.full(n_pkt, spec.mss, dtype=np.int64)
        payload[-1] = size - spec.mss * (n_pkt - 1)
        pt = t0 + 2e-4 + np.arange(n_pkt) * (spec.mss / spec.link_rate)
        flags = _ack_flags(n_pkt)
        flags[-1] |= int(Flag.PSH)
        em.add_flows(pt, int(Direction.OUTBOUND), spec.attacker, spec.exfil_port,
                     payload, flags, Origin.MALWARE)
        acks = pt[1::2] + 1e-3
        em.add_flows(acks, int(Direction.INBOUND), spec.attacker, spec.exfil_port,
                     0, int(Flag.ACK), Origin.MALWARE)
    return em


def emit_cryptominer(spec: MalwareSpec, rng: np.random.Generator,
                     timeline: tuple[float, float]) -> Emission:
    start, end = timeline
    em = Emission()
    _heartbeat(spec, rng, start, end, em)
    rounds = _grid(rng, start, end, spec.exfil_interval)
    mine = min(spec.mine_time, spec.exfil_interval / 2)
    counts = rng.poisson(spec.mine_rate * mine, rounds.size)
    total = int(counts.sum())
    if total:
        offsets = rng.uniform(0.0, mine, total)
        t = np.repeat(rounds, counts) + offsets
        order = np.argsort(t, kind="stable")
        em.add_syscalls(t[order], spec.pid, _draw_tokens(rng, spec.mine_mix, total), Origin.MALWARE)
    sends = rounds + spec.exfil_interval
    sends = sends[sends <= end]
    t, tok = _motifs(sends, ["socket", "connect", "sendto", "close"], 1e-5)
    em.add_syscalls(t, spec.pid, tok, Origin.MALWARE)
    payload = min(spec.hash_bytes * spec.exfil_size, 65535)
    # fire-and-forget share submission: a single outbound datagram-like packet
    em.add_flows(sends + 5e-5, int(Direction.OUTBOUND), spec.attacker, spec.exfil_port,
                 payload, int(Flag.PSH), Origin.MALWARE)
    return em


EMITTERS: dict[Family, Callable[..., Emission]] = {
    Family.KEYLOGGER: emit_keylogger,
    Family.RANSOMWARE: emit_ransomware,
    Family.CRYPTOMINER: emit_cryptominer,
}


def simulate(scenario: Scenario) -> Trace:
    """Generate the trace for ``scenario``; a pure function of its fields."""
    validate_scenario(scenario)
    em = Emission()
    for proc in scenario.benign.processes:
        sub = rng_mod.substream(scenario.seed, f"benign/{proc.name}/{proc.pid}")
        em.extend(emit_benign_process(proc, sub, (0.0, scenario.duration)))
    spec = scenario.malware
    if spec is not None:
        sub = rng_mod.substream(scenario.seed, f"malware/{spec.family.value}")
        start = math.ceil(scenario.malware_start * 1e6) / 1e6
        em.extend(EMITTERS[spec.family](spec, sub, (start, scenario.duration)))
    return em.to_trace(scenario.duration, scenario.scenario_id, scenario.seed)
