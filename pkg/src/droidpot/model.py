"""Event schema and counting rules shared by every trap service.

Every external TCP connection and every new UDP flow is one attack event.
The source address alone identifies the attacker.  Events coming from the
management network (the log collector) are flagged, never dropped.
"""

from __future__ import annotations

import functools
import ipaddress
import re
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone

KNOWN_VANTAGES = ("umts", "darknet", "dsl", "university")
TRANSPORTS = ("tcp", "udp")
SERVICES = ("shell", "web", "ftp", "tftp", "port_trap")
SESSION_SERVICES = ("shell", "web", "ftp")

UDP_FLOW_IDLE = 60.0

_CUSTOM_VANTAGE = re.compile(r"^[a-z0-9][a-z0-9_.-]{0,31}$")


class ConfigError(ValueError):
    """Raised for configuration the daemon must refuse to start with."""


class SessionlessService(ValueError):
    pass


def check_vantage(label: str) -> str:
    """Return *label* if it is a valid vantage name, else raise ConfigError.

    The four access types of the deployment are predefined; anything else is
    a custom label that must be lowercase and at most 32 characters.
    """
    if label in KNOWN_VANTAGES:
        return label
    if not isinstance(label, str) or not _CUSTOM_VANTAGE.match(label):
        raise ConfigError(
            f"invalid vantage {label!r}: expected one of {', '.join(KNOWN_VANTAGES)} "
            "or a lowercase custom name of at most 32 characters"
        )
    return label


@functools.lru_cache(maxsize=65536)
def canonical_ip(address: str) -> str:
    """Canonical text form: lowercase, compressed, IPv4-mapped IPv6 unwrapped."""
    ip = ipaddress.ip_address(address.strip("[]").split("%")[0])
    if ip.version == 6 and ip.ipv4_mapped is not None:
        ip = ip.ipv4_mapped
    return str(ip)


def now_ms(clock) -> int:
    return int(round(clock() * 1000))


def format_ts(ts_ms: int) -> str:
    """RFC 3339 UTC with millisecond precision, e.g. 2012-11-01T00:00:00.000Z."""
    dt = datetime.fromtimestamp(ts_ms / 1000, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ts_ms % 1000:03d}Z"


def parse_ts(text: str) -> int:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    whole = int(dt.replace(microsecond=0).timestamp())
    return whole * 1000 + dt.microsecond // 1000


@dataclass(frozen=True)
class AttackEvent:
    event_id: int
    ts_ms: int
    vantage: str
    transport: str
    src_ip: str
    src_port: int
    dst_port: int
    service: str
    session_id: str | None = None
    payload_bytes: int = 0
    excluded: bool = False

    @property
    def timestamp(self) -> datetime:
        return datetime.fromtimestamp(self.ts_ms / 1000, tz=timezone.utc)

    @property
    def flow(self) -> tuple:
        return (self.transport, self.src_ip, self.src_port, self.dst_port)


@dataclass(frozen=True)
class CapturedArtifact:
    digest: str
    size_bytes: int
    origin: dict
    first_seen: int
    session_id: str | None = None

    def to_dict(self) -> dict:
        return {
            "digest": self.digest,
            "size": self.size_bytes,
            "origin": dict(self.origin),
            "first_seen": format_ts(self.first_seen),
            "session": self.session_id,
        }


# Artifact origins.  Plain dicts so they serialize straight into the index.

def shell_download(url: str) -> dict:
    return {"kind": "shell_download", "url": url}


def web_upload(form_field: str, filename: str) -> dict:
    return {"kind": "web_upload", "form_field": form_field, "filename": filename}


def ftp_store(path: str) -> dict:
    return {"kind": "ftp_store", "path": path}


def tftp_write(filename: str) -> dict:
    return {"kind": "tftp_write", "filename": filename}


def raw_payload(dst_port: int, transport: str) -> dict:
    return {"kind": "raw_payload", "transport": transport, "dst_port": dst_port}


class ExclusionSet:
    """Address prefixes whose traffic is flagged as management traffic."""

    def __init__(self, prefixes=()):
        networks, bad = [], []
        for prefix in prefixes:
            try:
                networks.append(ipaddress.ip_network(str(prefix).strip(), strict=False))
            except ValueError:
                bad.append(prefix)
        if bad:
            raise ConfigError("malformed exclusion prefix: " + ", ".join(map(repr, bad)))
        self.networks = tuple(networks)

    def __contains__(self, src_ip) -> bool:
        try:
            ip = ipaddress.ip_address(canonical_ip(str(src_ip)))
        except ValueError:
            return False
        return any(ip.version == net.version and ip in net for net in self.networks)

    def __len__(self):
        return len(self.networks)

    def __repr__(self):
        return f"ExclusionSet({[str(n) for n in self.networks]!r})"


def is_excluded(src_ip: str, exclusion_set) -> bool:
    if not isinstance(exclusion_set, ExclusionSet):
        exclusion_set = ExclusionSet(exclusion_set)
    return src_ip in exclusion_set


class FlowTable:
    """Tracks UDP flows so that one flow yields one event.

    A flow is the (transport, src_ip, src_port, dst_port) tuple; it stays the
    same flow while datagrams keep arriving less than ``idle`` seconds apart.
    """

    def __init__(self, idle: float = UDP_FLOW_IDLE):
        self.idle = idle
        self._last: dict[tuple, float] = {}
        self._lock = threading.Lock()

    def touch(self, key, now: float) -> bool:
        """Register a datagram; True if it opens a new flow."""
        with self._lock:
            last = self._last.get(key)
            self._last[key] = now
            return last is None or now - last >= self.idle

    def expire(self, now: float) -> list:
        with self._lock:
            stale = [k for k, t in self._last.items() if now - t >= self.idle]
            for k in stale:
                del self._last[k]
            return stale

    def __len__(self):
        return len(self._last)


@dataclass
class SessionTranscript:
    """Ordered record of one interactive session.

    Mutable while the session runs; :meth:`close` freezes it.
    """

    session_id: str
    service: str
    event_id: int
    src_ip: str
    src_port: int
    dst_port: int
    start_ms: int
    end_ms: int | None = None
    login_attempts: list = field(default_factory=list)
    commands: list = field(default_factory=list)
    requests: list = field(default_factory=list)
    downloads: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()

    @property
    def closed(self) -> bool:
        return self.end_ms is not None

    def _check_open(self):
        if self.closed:
            raise RuntimeError(f"transcript {self.session_id} is closed")

    def add_login(self, username: str, password: str, outcome: str):
        with self._lock:
            self._check_open()
            self.login_attempts.append((username, password, outcome))

    def add_command(self, line: str, output: str, status: int):
        with self._lock:
            self._check_open()
            self.commands.append((line, output, status))

    def add_request(self, record: dict):
        with self._lock:
            self._check_open()
            self.requests.append(record)

    def add_download(self, url: str, result: str, digest: str | None = None):
        with self._lock:
            self._check_open()
            self.downloads.append({"url": url, "result": result, "digest": digest})

    def add_artifact(self, digest: str):
        with self._lock:
            self._check_open()
            self.artifacts.append(digest)

    def close(self, end_ms: int) -> bool:
        """Close once; later calls are no-ops returning False."""
        with self._lock:
            if self.closed:
                return False
            self.end_ms = max(end_ms, self.start_ms)
            return True

    def to_dict(self) -> dict:
        return {
            "session": self.session_id,
            "service": self.service,
            "event_id": self.event_id,
            "src_ip": self.src_ip,
            "src_port": self.src_port,
            "dst_port": self.dst_port,
            "start": format_ts(self.start_ms),
            "end": format_ts(self.end_ms) if self.end_ms is not None else None,
            "login_attempts": [
                {"username": u, "password": p, "outcome": o} for u, p, o in self.login_attempts
            ],
            "commands": [
                {"input": line, "output": out, "status": st} for line, out, st in self.commands
            ],
            "requests": list(self.requests),
            "downloads": list(self.downloads),
            "artifacts": list(self.artifacts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionTranscript":
        t = cls(
            session_id=d["session"],
            service=d["service"],
            event_id=d["event_id"],
            src_ip=d["src_ip"],
            src_port=d["src_port"],
            dst_port=d["dst_port"],
            start_ms=parse_ts(d["start"]),
            end_ms=parse_ts(d["end"]) if d.get("end") else None,
        )
        t.login_attempts = [(a["username"], a["password"], a["outcome"]) for a in d["login_attempts"]]
        t.commands = [(c["input"], c["output"], c["status"]) for c in d["commands"]]
        t.requests = list(d.get("requests", []))
        t.downloads = list(d.get("downloads", []))
        t.artifacts = list(d.get("artifacts", []))
        return t
