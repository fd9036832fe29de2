"""Scripted attackers and synthetic event corpora.

Scripts drive real sockets against a running daemon and then check what the
daemon recorded.  The corpus generator produces event logs with a known
ground truth, for validating the analysis pipeline.
"""

from __future__ import annotations

import difflib
import ipaddress
import json
import os
import random
import re
import socket
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from importlib import resources

from .codec import serialize_event
from .model import AttackEvent, check_vantage, parse_ts

STEP_OPS = ("connect", "send", "expect", "sleep", "close")


class ScriptError(ValueError):
    pass


@dataclass
class AttackScript:
    name: str
    steps: list
    fetch_stub: dict = field(default_factory=dict)   # url -> text
    expected: dict = field(default_factory=dict)
    description: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "AttackScript":
        if "name" not in d or "steps" not in d:
            raise ScriptError("script needs 'name' and 'steps'")
        for i, step in enumerate(d["steps"]):
            if not isinstance(step, dict) or step.get("op") not in STEP_OPS:
                raise ScriptError(f"step {i}: op must be one of {', '.join(STEP_OPS)}")
        if not d["steps"] or d["steps"][0]["op"] != "connect":
            raise ScriptError("first step must be connect")
        return cls(d["name"], list(d["steps"]), dict(d.get("fetch_stub", {})),
                   dict(d.get("expected", {})), d.get("description", ""))

    @classmethod
    def load(cls, path) -> "AttackScript":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @property
    def connect(self) -> dict:
        return self.steps[0]

    def stub_bytes(self) -> dict:
        return {url: text.encode("utf-8") for url, text in self.fetch_stub.items()}


def builtin_scripts() -> list[str]:
    folder = resources.files("droidpot").joinpath("data/scripts")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def load_builtin(name: str) -> AttackScript:
    path = resources.files("droidpot").joinpath(f"data/scripts/{name}.json")
    if not path.is_file():
        raise ScriptError(f"no built-in script {name!r}")
    return AttackScript.from_dict(json.loads(path.read_text("utf-8")))


@dataclass
class Targets:
    """Where the daemon under test listens and where it keeps its records."""

    host: str = "127.0.0.1"
    ports: dict = field(default_factory=dict)        # service -> port
    trap_ports: dict = field(default_factory=dict)   # nominal trap port -> actual port
    data_dir: str | None = None
    source: str | None = None                        # local address to connect from

    def resolve(self, step: dict) -> tuple[str, int]:
        service = step.get("service", "port_trap")
        if service == "port_trap":
            nominal = int(step["port"])
            return self.host, int(self.trap_ports.get(nominal, nominal))
        if "port" in step and service not in self.ports:
            return self.host, int(step["port"])
        return self.host, int(self.ports[service])


@dataclass
class ScriptResult:
    name: str
    passed: bool
    diff: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    received: bytes = b""
    local_port: int = 0
    record: dict | None = None


def _payload(step: dict, rng: random.Random) -> bytes:
    if "line" in step:
        return (step["line"] + step.get("eol", "\r\n")).encode("utf-8")
    if "text" in step:
        return step["text"].encode("utf-8")
    if "hex" in step:
        return bytes.fromhex(step["hex"])
    if "random" in step:
        return rng.randbytes(int(step["random"]))
    raise ScriptError(f"send step needs line, text, hex or random: {step}")


def _execute(script: AttackScript, targets: Targets, seed: int, result: ScriptResult) -> bool:
    rng = random.Random(seed)
    sock = None
    pending = b""
    try:
        for i, step in enumerate(script.steps):
            op = step["op"]
            if op == "connect":
                if sock is not None:
                    sock.close()
                addr = targets.resolve(step)
                sock = socket.socket(socket.AF_INET6 if ":" in addr[0] else socket.AF_INET)
                if targets.source:
                    sock.bind((targets.source, 0))
                sock.settimeout(float(step.get("timeout", 5)))
                sock.connect(addr)
                result.local_port = sock.getsockname()[1]
            elif op == "send":
                sock.sendall(_payload(step, rng))
            elif op == "sleep":
                time.sleep(float(step.get("ms", 0)) / 1000)
            elif op == "expect":
                pattern = re.compile(step["pattern"].encode("utf-8"))
                deadline = time.monotonic() + float(step.get("timeout", 5))
                while True:
                    m = pattern.search(pending)
                    if m:
                        pending = pending[m.end():]
                        break
                    left = deadline - time.monotonic()
                    if left <= 0:
                        result.errors.append(f"step {i}: timed out waiting for {step['pattern']!r}; "
                                             f"last received {pending[-200:]!r}")
                        return False
                    sock.settimeout(left)
                    try:
                        data = sock.recv(65536)
                    except socket.timeout:
                        continue
                    if not data:
                        result.errors.append(f"step {i}: connection closed waiting for "
                                             f"{step['pattern']!r}; last received {pending[-200:]!r}")
                        return False
                    result.received += data
                    pending += data
            elif op == "close":
                sock.close()
                sock = None
    except OSError as exc:
        result.errors.append(f"socket error: {exc}")
        return False
    finally:
        if sock is not None:
            sock.close()
    return True


def _find_record(path: str, match, timeout: float) -> dict | None:
    deadline = time.monotonic() + timeout
    while True:
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    try:
                        rec = json.loads(line)
                    except ValueError:
                        continue
                    if match(rec):
                        return rec
        if time.monotonic() >= deadline:
            return None
        time.sleep(0.05)


def _lines(obj) -> list[str]:
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False).splitlines()


def compare_transcript(expected: dict, actual: dict) -> list[str]:
    """Unified diff between the expected parts of a transcript and the real one."""
    want, got = {}, {}
    if "logins" in expected:
        want["logins"] = expected["logins"]
        got["logins"] = [[a["username"], a["password"], a["outcome"]] for a in actual["login_attempts"]]
    if "commands" in expected:
        want["commands"] = expected["commands"]
        got["commands"] = actual["commands"]
    if "artifacts" in expected:
        want["artifacts"] = expected["artifacts"]
        got["artifacts"] = actual["artifacts"]
    return list(difflib.unified_diff(_lines(want), _lines(got), "expected", "actual", lineterm=""))


def run_script(script: AttackScript, targets: Targets, seed: int = 0,
               settle_timeout: float = 10.0) -> ScriptResult:
    """Play *script* against the daemon and compare what it recorded."""
    result = ScriptResult(script.name, False)
    if not _execute(script, targets, seed, result):
        return result
    expected = script.expected
    if targets.data_dir is None or not expected:
        result.passed = True
        return result
    _, port = targets.resolve(script.connect)
    service = script.connect.get("service", "port_trap")
    same_conn = lambda r: r.get("src_port") == result.local_port and r.get("dst_port") == port  # noqa: E731
    if "transcript" in expected:
        rec = _find_record(os.path.join(targets.data_dir, "transcripts.ndjson"),
                           lambda r: same_conn(r) and r.get("service") == service and r.get("end"),
                           settle_timeout)
        result.record = rec
        if rec is None:
            result.errors.append("no transcript recorded for this connection")
        else:
            result.diff = compare_transcript(expected["transcript"], rec)
            for digest in rec["artifacts"]:
                blob = os.path.join(targets.data_dir, "artifacts", digest)
                if not os.path.exists(blob):
                    result.errors.append(f"artifact {digest} missing from the store")
    if "capture" in expected:
        rec = _find_record(os.path.join(targets.data_dir, "captures.ndjson"), same_conn, settle_timeout)
        result.record = rec
        if rec is None:
            result.errors.append("no capture recorded for this connection")
        else:
            want = expected["capture"]
            got = {k: rec.get(k) for k in want}
            if got != want:
                result.diff = list(difflib.unified_diff(_lines(want), _lines(got), "expected", "actual",
                                                        lineterm=""))
    result.passed = not result.diff and not result.errors
    return result


# -- corpus generation --

SERVICE_BY_PORT = {("tcp", 22): "shell", ("tcp", 2222): "shell", ("tcp", 80): "web",
                   ("tcp", 8080): "web", ("tcp", 21): "ftp", ("tcp", 2121): "ftp",
                   ("udp", 69): "tftp", ("udp", 6969): "tftp"}

DEFAULT_TCP_MIX = {22: 30, 1433: 16, 3306: 12, 5900: 7, 6666: 5, 3389: 4, 1080: 3, 23: 3,
                   5060: 2, 80: 2, 445: 2, 139: 2, 110: 1, 25: 1, 143: 1, 8080: 1, 21: 1}
DEFAULT_UDP_MIX = {5060: 5, 53: 3, 137: 2, 161: 2, 1900: 1, 69: 1}
UNKNOWN_NET = "192.0.2.0/24"     # never in the AS table


class CorpusError(ValueError):
    pass


def zipf_population(n: int = 40, s: float = 1.2, attackers: int = 400, first_asn: int = 64512):
    """AS population with Zipf(s) weights; AS i owns 10.i.0.0/16."""
    if n < 1 or n > 256:
        raise CorpusError("zipf population size must be within 1..256")
    raw = [1.0 / (rank ** s) for rank in range(1, n + 1)]
    total = sum(raw)
    pop = []
    for i, w in enumerate(raw):
        pop.append({
            "asn": first_asn + i,
            "name": f"SYNTH-AS{i + 1}",
            "prefix": f"10.{i}.0.0/16",
            "weight": w / total,
            "attackers": max(1, round(attackers * w / total)),
        })
    return pop


@dataclass
class CorpusSpec:
    seed: int = 1
    start: str = "2012-11-01T00:00:00.000Z"
    duration_hours: float = 720.0
    rates: dict = field(default_factory=lambda: {"umts": 55.0})     # vantage -> events/hour
    tcp_share: float = 0.9
    tcp_mix: dict = field(default_factory=lambda: dict(DEFAULT_TCP_MIX))
    udp_mix: dict = field(default_factory=lambda: dict(DEFAULT_UDP_MIX))
    population: list = field(default_factory=zipf_population)
    unknown_share: float = 0.0
    excluded: dict = field(default_factory=dict)        # vantage -> count of excluded events
    exclusion_prefix: str = "198.51.100.0/24"
    exact_counts: dict = field(default_factory=dict)    # vantage -> {"tcp": {port: n}, "udp": {...}}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known - {"zipf"}
        if extra:
            raise CorpusError(f"unknown spec keys: {', '.join(sorted(extra))}")
        if "zipf" in d:
            z = d.pop("zipf")
            d["population"] = zipf_population(z.get("n", 40), z.get("s", 1.2), z.get("attackers", 400))
        for key in ("tcp_mix", "udp_mix"):
            if key in d:
                d[key] = {int(k): float(v) for k, v in d[key].items()}
        if "exact_counts" in d:
            d["exact_counts"] = {
                v: {t: {int(p): int(n) for p, n in ports.items()} for t, ports in per.items()}
                for v, per in d["exact_counts"].items()
            }
        return cls(**d)

    @classmethod
    def load(cls, path) -> "CorpusSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def validate(self):
        if self.duration_hours <= 0:
            raise CorpusError("duration must be positive")
        if not self.rates and not self.exact_counts:
            raise CorpusError("no vantages to generate")
        for v, r in self.rates.items():
            check_vantage(v)
            if r < 0:
                raise CorpusError(f"negative rate for {v}")
        if not 0.0 <= self.tcp_share <= 1.0:
            raise CorpusError("tcp_share must be within [0, 1]")
        for mix in (self.tcp_mix, self.udp_mix):
            if not mix or any(w <= 0 for w in mix.values()):
                raise CorpusError("port mix weights must be positive")
        if not self.population or any(a["weight"] <= 0 or a["attackers"] < 1 for a in self.population):
            raise CorpusError("AS population weights and attacker counts must be positive")


def _attacker_ips(prefix: str, count: int) -> list[str]:
    net = ipaddress.ip_network(prefix)
    usable = net.num_addresses - 2 if net.num_addresses > 2 else net.num_addresses
    if count > usable:
        raise CorpusError(f"{prefix} cannot hold {count} attackers")
    base = int(net.network_address) + (1 if net.num_addresses > 2 else 0)
    # spread attackers over the prefix so they are not all in one /24
    step = max(1, usable // count)
    return [str(ipaddress.ip_address(base + i * step)) for i in range(count)]


@dataclass
class Corpus:
    events: dict            # vantage -> list of AttackEvent
    truth: dict
    asn_lines: list


def generate_events(spec: CorpusSpec) -> Corpus:
    """Generate the corpus in memory.  Same spec, same output."""
    spec.validate()
    rng = random.Random(spec.seed)
    start_ms = parse_ts(spec.start)
    span_ms = int(spec.duration_hours * 3_600_000)
    population = [dict(a, ips=_attacker_ips(a["prefix"], a["attackers"])) for a in spec.population]
    as_weights = [a["weight"] for a in population]
    unknown_ips = _attacker_ips(UNKNOWN_NET, 50)
    excl_ips = _attacker_ips(spec.exclusion_prefix, 4)
    tcp_ports, tcp_w = list(spec.tcp_mix), list(spec.tcp_mix.values())
    udp_ports, udp_w = list(spec.udp_mix), list(spec.udp_mix.values())

    def pick_source():
        if spec.unknown_share and rng.random() < spec.unknown_share:
            return rng.choice(unknown_ips), 0
        a = rng.choices(population, as_weights)[0]
        return rng.choice(a["ips"]), a["asn"]

    events, truth = {}, {}
    vantages = sorted(set(spec.rates) | set(spec.exact_counts) | set(spec.excluded))
    for vantage in vantages:
        check_vantage(vantage)
        draws = []   # (ts, transport, port, src_ip, asn, excluded)
        if vantage in spec.exact_counts:
            for transport in ("tcp", "udp"):
                for port, n in sorted(spec.exact_counts[vantage].get(transport, {}).items()):
                    for _ in range(n):
                        ip, asn = pick_source()
                        draws.append((start_ms + rng.randrange(span_ms), transport, port, ip, asn, False))
        else:
            rate = spec.rates.get(vantage, 0.0)
            t = 0.0
            per_ms = rate / 3_600_000
            while per_ms > 0:
                t += rng.expovariate(per_ms)
                if t >= span_ms:
                    break
                if rng.random() < spec.tcp_share:
                    transport, port = "tcp", rng.choices(tcp_ports, tcp_w)[0]
                else:
                    transport, port = "udp", rng.choices(udp_ports, udp_w)[0]
                ip, asn = pick_source()
                draws.append((start_ms + int(t), transport, port, ip, asn, False))
        for _ in range(spec.excluded.get(vantage, 0)):
            transport = "tcp"
            port = rng.choices(tcp_ports, tcp_w)[0]
            draws.append((start_ms + rng.randrange(span_ms), transport, port, rng.choice(excl_ips), 0, True))
        draws.sort(key=lambda d: d[0])

        evs = []
        per_port = Counter()
        per_transport = Counter()
        ports_by_transport = defaultdict(set)
        per_as = Counter()
        attackers_by_as = defaultdict(set)
        per_attacker = Counter()
        excluded = 0
        for eid, (ts, transport, port, ip, asn, is_excl) in enumerate(draws, 1):
            evs.append(AttackEvent(
                event_id=eid, ts_ms=ts, vantage=vantage, transport=transport, src_ip=ip,
                src_port=rng.randrange(1024, 65536), dst_port=port,
                service=SERVICE_BY_PORT.get((transport, port), "port_trap"), excluded=is_excl,
            ))
            if is_excl:
                excluded += 1
                continue
            per_port[port] += 1
            per_transport[transport] += 1
            ports_by_transport[transport].add(port)
            per_as[asn] += 1
            attackers_by_as[asn].add(ip)
            per_attacker[ip] += 1
        events[vantage] = evs
        n = sum(per_transport.values())
        truth[vantage] = {
            "events": n,
            "excluded": excluded,
            "target_rate": spec.rates.get(vantage),
            "tcp": {"ports": len(ports_by_transport["tcp"]), "attacks": per_transport["tcp"]},
            "udp": {"ports": len(ports_by_transport["udp"]), "attacks": per_transport["udp"]},
            "tcp_share": per_transport["tcp"] / n if n else 0.0,
            "per_port": {str(p): c for p, c in sorted(per_port.items())},
            "per_as": {str(a): c for a, c in sorted(per_as.items())},
            "attackers_per_as": {str(a): len(s) for a, s in sorted(attackers_by_as.items())},
            "per_attacker": dict(sorted(per_attacker.items())),
        }
    asn_lines = [f"{a['prefix']} {a['asn']} {a['name']}" for a in spec.population]
    return Corpus(events, truth, asn_lines)


def generate_corpus(spec: CorpusSpec, out_dir) -> dict:
    """Write one log per vantage, the AS snapshot and ground truth into *out_dir*.

    Returns a dict of the written paths.
    """
    corpus = generate_events(spec)
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    paths = {"logs": []}
    for vantage, evs in corpus.events.items():
        path = os.path.join(out_dir, f"events-{vantage}.ndjson")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for ev in evs:
                fh.write(serialize_event(ev) + "\n")
        paths["logs"].append(path)
    paths["asn_db"] = os.path.join(out_dir, "asn.txt")
    with open(paths["asn_db"], "w", encoding="utf-8") as fh:
        fh.write("# prefix asn as_name\n")
        fh.write("\n".join(corpus.asn_lines) + "\n")
    paths["truth"] = os.path.join(out_dir, "ground_truth.json")
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        json.dump({"seed": spec.seed, "vantages": corpus.truth}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return paths


# Reference UMTS month: 111 TCP ports / 14,954 attacks, 76 UDP ports /
# 637 attacks, top ten in this order.
UMTS_TOP10 = ((22, 4800), (1433, 2600), (3306, 1900), (5900, 1100), (6666, 800),
              (3389, 600), (1080, 450), (23, 400), (5060, 300), (80, 250))


def _spread(total: int, ports: list) -> dict:
    base, extra = divmod(total, len(ports))
    return {p: base + (1 if i < extra else 0) for i, p in enumerate(ports)}


def umts_fixture_spec(seed: int = 2012) -> CorpusSpec:
    tcp_tail_ports = [21, 25, 53, 110, 111, 135, 139, 143, 443, 445, 465, 587, 993, 995, 1723,
                      2222, 3128, 5901, 5902, 8000, 8080, 8081, 8443, 8888, 9200, 10000]
    p = 10001
    while len(tcp_tail_ports) < 101:
        tcp_tail_ports.append(p)
        p += 7
    tcp = dict(UMTS_TOP10)
    tcp.update(_spread(14954 - sum(tcp.values()), tcp_tail_ports))
    udp_ports = [53, 69, 123, 137, 138, 161, 500, 1434, 1900, 5353]
    q = 20000
    while len(udp_ports) < 76:
        udp_ports.append(q)
        q += 11
    udp = _spread(637, udp_ports)
    return CorpusSpec(seed=seed, rates={}, exact_counts={"umts": {"tcp": tcp, "udp": udp}})
