"""Offline statistics over event logs: per-transport tables, top ports,
per-AS rankings and hourly attack rates."""

from __future__ import annotations

import csv
import glob
import ipaddress
import json
import logging
import os
import random
import socket
import struct
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .codec import MalformedEvent, parse_event

log = logging.getLogger(__name__)

HOUR_MS = 3_600_000
UNKNOWN_AS = (0, "UNKNOWN")

# Port labels for the top-k table, kept as-is even where odd (3306 is
# labelled MSSQL, 445 "MS AD").
SERVICE_LABELS = {
    22: "SSH", 1433: "MSSQL", 3306: "MSSQL", 5900: "VNC", 3389: "RDP", 23: "Telnet",
    80: "HTTP", 110: "POP3", 25: "SMTP", 139: "NetBIOS", 143: "IMAP", 53: "DNS",
    1080: "SOCKS", 5060: "SIP", 445: "MS AD",
}


class EmptyInput(ValueError):
    pass


# -- ASN attribution --

class AsnDb:
    """Longest-prefix-match table from a snapshot of "prefix asn as_name" lines."""

    def __init__(self, entries=()):
        # per (version, prefixlen): {network int: (asn, name)}
        self._tables: dict[tuple, dict] = {}
        self._lengths: dict[int, list] = {4: [], 6: []}
        for prefix, asn, name in entries:
            self.add(prefix, asn, name)

    def add(self, prefix: str, asn: int, name: str = ""):
        net = ipaddress.ip_network(prefix, strict=False)
        key = (net.version, net.prefixlen)
        if key not in self._tables:
            self._tables[key] = {}
            lengths = self._lengths[net.version]
            lengths.append(net.prefixlen)
            lengths.sort(reverse=True)
        self._tables[key][int(net.network_address)] = (int(asn), name)

    def __len__(self):
        return sum(len(t) for t in self._tables.values())

    @classmethod
    def load(cls, path) -> "AsnDb":
        db = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split(None, 2)
                if len(parts) < 2:
                    raise ValueError(f"{path}:{lineno}: expected 'prefix asn as_name'")
                asn = parts[1].upper().removeprefix("AS")
                db.add(parts[0], int(asn), parts[2] if len(parts) > 2 else "")
        return db

    def dump(self, path):
        rows = []
        for (version, plen), table in self._tables.items():
            for net_int, (asn, name) in table.items():
                net = ipaddress.ip_network((net_int, plen)) if version == 4 else \
                    ipaddress.IPv6Network((net_int, plen))
                rows.append((version, net_int, plen, f"{net} {asn} {name}".rstrip()))
        rows.sort()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# prefix asn as_name\n")
            for row in rows:
                fh.write(row[3] + "\n")

    def lookup(self, ip: str) -> tuple[int, str]:
        try:
            addr = ipaddress.ip_address(ip)
        except ValueError:
            return UNKNOWN_AS
        if addr.version == 6 and addr.ipv4_mapped is not None:
            addr = addr.ipv4_mapped
        value = int(addr)
        bits = addr.max_prefixlen
        for plen in self._lengths[addr.version]:
            masked = value >> (bits - plen) << (bits - plen) if plen else 0
            hit = self._tables[(addr.version, plen)].get(masked)
            if hit is not None:
                return hit
        return UNKNOWN_AS


def _dns_query(name: str, server: tuple, timeout: float) -> list[str]:
    """Minimal DNS TXT query over UDP; returns the TXT strings of the answers."""
    qid = random.randrange(1 << 16)
    packet = struct.pack("!HHHHHH", qid, 0x0100, 1, 0, 0, 0)
    for label in name.rstrip(".").split("."):
        packet += bytes([len(label)]) + label.encode("ascii")
    packet += b"\0" + struct.pack("!HH", 16, 1)
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.settimeout(timeout)
        s.sendto(packet, server)
        data, _ = s.recvfrom(4096)
    rid, flags, qd, an, _, _ = struct.unpack("!HHHHHH", data[:12])
    if rid != qid or flags & 0x000F:
        return []
    pos = 12

    def skip_name(p):
        while True:
            n = data[p]
            if n == 0:
                return p + 1
            if n & 0xC0 == 0xC0:
                return p + 2
            p += n + 1

    for _ in range(qd):
        pos = skip_name(pos) + 4
    out = []
    for _ in range(an):
        pos = skip_name(pos)
        rtype, _, _, rdlen = struct.unpack("!HHIH", data[pos:pos + 10])
        pos += 10
        rdata = data[pos:pos + rdlen]
        pos += rdlen
        if rtype != 16:
            continue
        i, text = 0, b""
        while i < len(rdata):
            n = rdata[i]
            text += rdata[i + 1:i + 1 + n]
            i += n + 1
        out.append(text.decode("utf-8", "replace"))
    return out


class CymruClient:
    """IP-to-ASN lookups against the public DNS TXT interface."""

    def __init__(self, server=("8.8.8.8", 53), timeout: float = 3.0,
                 origin_zone="origin.asn.cymru.com", origin6_zone="origin6.asn.cymru.com",
                 names_zone="asn.cymru.com"):
        self.server = tuple(server)
        self.timeout = timeout
        self.origin_zone = origin_zone
        self.origin6_zone = origin6_zone
        self.names_zone = names_zone

    def lookup(self, ip: str) -> tuple[int, str]:
        addr = ipaddress.ip_address(ip)
        if addr.version == 4:
            name = ".".join(reversed(str(addr).split("."))) + "." + self.origin_zone
        else:
            name = ".".join(reversed(addr.exploded.replace(":", ""))) + "." + self.origin6_zone
        answers = _dns_query(name, self.server, self.timeout)
        if not answers:
            return UNKNOWN_AS
        asn = int(answers[0].split("|")[0].split()[0])
        as_name = ""
        names = _dns_query(f"AS{asn}.{self.names_zone}", self.server, self.timeout)
        if names:
            as_name = names[0].split("|")[-1].strip()
        return asn, as_name


class CachedResolver:
    """Remote lookups cached for ``ttl`` seconds, falling back to an offline table."""

    def __init__(self, db: AsnDb, remote=None, ttl: float = 86400.0, clock=time.time):
        self.db = db
        self.remote = remote
        self.ttl = ttl
        self.clock = clock
        self._cache: dict[str, tuple] = {}

    def lookup(self, ip: str) -> tuple[int, str]:
        now = self.clock()
        hit = self._cache.get(ip)
        if hit is not None and now - hit[0] < self.ttl:
            return hit[1]
        result = None
        if self.remote is not None:
            try:
                result = self.remote.lookup(ip)
            except (OSError, ValueError, IndexError, struct.error) as exc:
                log.debug("remote ASN lookup for %s failed: %s", ip, exc)
        if result is None or result[0] == 0:
            result = self.db.lookup(ip)
        self._cache[ip] = (now, result)
        return result


# -- event store --

@dataclass
class EventStore:
    """Non-excluded events in timestamp order, one list per column."""

    ts: list = field(default_factory=list)
    vantage: list = field(default_factory=list)
    transport: list = field(default_factory=list)
    src_ip: list = field(default_factory=list)
    dst_port: list = field(default_factory=list)
    event_id: list = field(default_factory=list)
    excluded: int = 0
    skipped: int = 0
    duplicates: int = 0
    files: list = field(default_factory=list)

    def __len__(self):
        return len(self.ts)

    @property
    def vantages(self) -> list[str]:
        return sorted(set(self.vantage))

    def indices(self, vantage: str | None) -> range | list:
        if vantage is None:
            return range(len(self.ts))
        return [i for i, v in enumerate(self.vantage) if v == vantage]

    @property
    def time_range(self) -> tuple[int, int] | None:
        if not self.ts:
            return None
        return self.ts[0], self.ts[-1]


def _expand(paths) -> list[str]:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    out = []
    for p in paths:
        p = os.fspath(p)
        matches = sorted(glob.glob(p)) if glob.has_magic(p) else [p]
        out.extend(matches)
    return out


def ingest(paths) -> EventStore:
    """Load NDJSON event logs.  Excluded events and duplicates are dropped;
    malformed lines are counted and skipped."""
    rows = []
    seen = set()
    store = EventStore()
    for path in _expand(paths):
        try:
            fh = open(path, "rb")
        except OSError as exc:
            log.warning("cannot read %s: %s", path, exc)
            continue
        store.files.append(path)
        with fh:
            for raw in fh:
                if not raw.strip():
                    continue
                try:
                    ev = parse_event(raw)
                except (MalformedEvent, UnicodeDecodeError):
                    store.skipped += 1
                    continue
                key = (ev.vantage, ev.event_id)
                if key in seen:
                    store.duplicates += 1
                    continue
                seen.add(key)
                if ev.excluded:
                    store.excluded += 1
                    continue
                rows.append((ev.ts_ms, ev.vantage, ev.event_id, ev.transport, ev.src_ip, ev.dst_port))
    if not store.files:
        raise EmptyInput("no readable event log files")
    rows.sort()
    for ts, vantage, eid, transport, src_ip, dst_port in rows:
        store.ts.append(ts)
        store.vantage.append(vantage)
        store.event_id.append(eid)
        store.transport.append(transport)
        store.src_ip.append(src_ip)
        store.dst_port.append(dst_port)
    return store


# -- statistics --

@dataclass
class RankedDistribution:
    """(key, count) pairs ranked by count, ties by ascending key."""

    entries: list
    labels: dict = field(default_factory=dict)
    unknown: int = 0     # observations outside the ranking (ASN 0)

    @classmethod
    def from_counts(cls, counts, k: int | None = None, labels=None, unknown: int = 0):
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if k is not None:
            ranked = ranked[:k]
        labels = {key: labels.get(key, "") for key, _ in ranked} if labels is not None else {}
        return cls(ranked, labels, unknown)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        for rank, (key, count) in enumerate(self.entries, 1):
            yield rank, key, count

    @property
    def keys(self) -> list:
        return [k for k, _ in self.entries]

    @property
    def total(self) -> int:
        return sum(c for _, c in self.entries)


def transport_summary(store: EventStore, vantage: str) -> dict:
    ports = {"tcp": set(), "udp": set()}
    attacks = {"tcp": 0, "udp": 0}
    for i in store.indices(vantage):
        t = store.transport[i]
        ports[t].add(store.dst_port[i])
        attacks[t] += 1
    return {t: (len(ports[t]), attacks[t]) for t in ("tcp", "udp")}


def top_k_ports(store: EventStore, vantage: str, k: int = 10) -> RankedDistribution:
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = Counter(store.dst_port[i] for i in store.indices(vantage))
    return RankedDistribution.from_counts(counts, k, SERVICE_LABELS)


def _asn_map(store: EventStore, idx, asn_db) -> dict:
    cache = {}
    for i in idx:
        ip = store.src_ip[i]
        if ip not in cache:
            cache[ip] = asn_db.lookup(ip)
    return cache


def attacks_per_as(store: EventStore, vantage: str, asn_db) -> RankedDistribution:
    idx = store.indices(vantage)
    asn = _asn_map(store, idx, asn_db)
    counts = Counter(asn[store.src_ip[i]][0] for i in idx)
    unknown = counts.pop(0, 0)
    names = {a: n for a, n in asn.values() if a}
    return RankedDistribution.from_counts(counts, labels=names, unknown=unknown)


def attackers_per_as(store: EventStore, vantage: str, asn_db) -> RankedDistribution:
    idx = store.indices(vantage)
    asn = _asn_map(store, idx, asn_db)
    sources = defaultdict(set)
    for i in idx:
        ip = store.src_ip[i]
        sources[asn[ip][0]].add(ip)
    counts = {a: len(s) for a, s in sources.items()}
    unknown = counts.pop(0, 0)
    names = {a: n for a, n in asn.values() if a}
    return RankedDistribution.from_counts(counts, labels=names, unknown=unknown)


@dataclass
class HourlySeries:
    start_ms: int
    counts: list
    mean: float
    short_range: bool = False

    def rows(self):
        for i, c in enumerate(self.counts):
            yield self.start_ms + i * HOUR_MS, c


def hourly_rate(store: EventStore, vantage: str) -> HourlySeries:
    """Events per calendar UTC hour.

    Buckets span the whole store's time range, so every vantage in one
    report shares the same hours and an empty vantage reads as zeros.
    """
    rng = store.time_range
    if rng is None:
        return HourlySeries(0, [0], 0.0, True)
    lo, hi = rng
    first = lo // HOUR_MS * HOUR_MS
    idx = store.indices(vantage)
    if hi - lo < HOUR_MS:
        n = len(idx)
        return HourlySeries(first, [n], float(n), True)
    buckets = (hi // HOUR_MS * HOUR_MS - first) // HOUR_MS + 1
    counts = [0] * buckets
    for i in idx:
        counts[(store.ts[i] - first) // HOUR_MS] += 1
    return HourlySeries(first, counts, len(idx) / buckets)


# -- reporting --

@dataclass
class VantageStats:
    vantage: str
    transport: dict
    top_ports: RankedDistribution
    attacks_as: RankedDistribution
    attackers_as: RankedDistribution
    hourly: HourlySeries

    @property
    def total(self) -> int:
        return sum(a for _, a in self.transport.values())

    @property
    def tcp_share(self) -> float:
        return self.transport["tcp"][1] / self.total if self.total else 0.0


def compute_stats(store: EventStore, vantages, asn_db, top_k: int = 10) -> list[VantageStats]:
    return [
        VantageStats(v, transport_summary(store, v), top_k_ports(store, v, top_k),
                     attacks_per_as(store, v, asn_db), attackers_per_as(store, v, asn_db),
                     hourly_rate(store, v))
        for v in vantages
    ]


def table1_text(stats: list[VantageStats]) -> str:
    names = [s.vantage for s in stats]
    width = max([8] + [len(n) + 2 for n in names])
    lines = []
    for title, pick in (("# Attacked ports per transport protocol", 0),
                        ("# Attacks per transport protocol", 1)):
        lines.append(title)
        lines.append("     " + "".join(f"{n:>{width}}" for n in names))
        for t in ("tcp", "udp"):
            lines.append(f"{t.upper():<5}" + "".join(f"{s.transport[t][pick]:>{width}}" for s in stats))
        lines.append("")
    return "\n".join(lines)


def table2_text(stats: list[VantageStats]) -> str:
    k = max([len(s.top_ports) for s in stats] + [1])
    label_w = max([6] + [len(s.vantage) + 1 for s in stats])
    width = max([8] + [len(lbl) + 2 for s in stats for lbl in s.top_ports.labels.values()])
    lines = ["# Top-10 of the most attacked ports" if k == 10 else f"# Top-{k} of the most attacked ports",
             f"{'Rank':<{label_w}}" + "".join(f"{r:>{width}}" for r in range(1, k + 1))]
    for s in stats:
        lines.append(f"{s.vantage:<{label_w}}" + "".join(f"{p:>{width}}" for p in s.top_ports.keys))
        lines.append(" " * label_w + "".join(f"{s.top_ports.labels.get(p, ''):>{width}}"
                                             for p in s.top_ports.keys))
    return "\n".join(lines) + "\n"


def _write_ranked(path, dist: RankedDistribution):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "key", "count"])
        for rank, key, count in dist:
            w.writerow([rank, key, count])


def _write_hourly(path, series: HourlySeries):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour", "count"])
        for start, count in series.rows():
            w.writerow([time.strftime("%Y-%m-%dT%H:00:00Z", time.gmtime(start / 1000)), count])


def summary_dict(store: EventStore, stats: list[VantageStats]) -> dict:
    total = sum(s.total for s in stats)
    tcp = sum(s.transport["tcp"][1] for s in stats)
    return {
        "events": total,
        "tcp_share": tcp / total if total else 0.0,
        "excluded_dropped": store.excluded,
        "malformed_skipped": store.skipped,
        "duplicates_dropped": store.duplicates,
        "vantages": {
            s.vantage: {
                "tcp": {"ports": s.transport["tcp"][0], "attacks": s.transport["tcp"][1]},
                "udp": {"ports": s.transport["udp"][0], "attacks": s.transport["udp"][1]},
                "tcp_share": s.tcp_share,
                "mean_per_hour": s.hourly.mean,
                "hours": len(s.hourly.counts),
                "short_range": s.hourly.short_range,
                "top_ports": [[p, c, s.top_ports.labels.get(p, "")] for p, c in s.top_ports.entries],
                "unknown_as_attacks": s.attacks_as.unknown,
                "unknown_as_attackers": s.attackers_as.unknown,
                "ases": len(s.attacks_as),
            }
            for s in stats
        },
    }


def emit_report(store: EventStore, stats: list[VantageStats], out_dir) -> list[str]:
    """Write tables, CSVs and summary.json into *out_dir*; returns the paths.

    With more than one vantage the per-vantage CSVs go to one subdirectory
    per vantage.
    """
    out_dir = os.fspath(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-test")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise OSError(f"output directory not writable: {out_dir}: {exc}") from exc
    written = []

    def put_text(name, text):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        written.append(path)

    put_text("table1.txt", table1_text(stats))
    put_text("table2.txt", table2_text(stats))
    for s in stats:
        target = out_dir if len(stats) == 1 else os.path.join(out_dir, s.vantage)
        os.makedirs(target, exist_ok=True)
        for name, dist in (("attacks_per_as.csv", s.attacks_as), ("attackers_per_as.csv", s.attackers_as)):
            _write_ranked(os.path.join(target, name), dist)
            written.append(os.path.join(target, name))
        _write_hourly(os.path.join(target, "hourly.csv"), s.hourly)
        written.append(os.path.join(target, "hourly.csv"))
    put_text("summary.json", json.dumps(summary_dict(store, stats), indent=2, sort_keys=True) + "\n")
    return written


def analyze(logs, asn_db, out_dir=None, vantages=None, top_k: int = 10):
    """Ingest, compute and (optionally) write a report.  Returns (store, stats)."""
    store = ingest(logs)
    if not vantages:
        vantages = store.vantages
    stats = compute_stats(store, vantages, asn_db, top_k)
    if out_dir is not None:
        emit_report(store, stats, out_dir)
    return store, stats


__all__ = [
    "AsnDb", "CachedResolver", "CymruClient", "EmptyInput", "EventStore", "HourlySeries",
    "RankedDistribution", "SERVICE_LABELS", "VantageStats", "analyze", "attackers_per_as",
    "attacks_per_as", "compute_stats", "emit_report", "hourly_rate", "ingest", "top_k_ports",
    "transport_summary",
]
