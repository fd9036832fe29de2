"""Daemon configuration: a strict JSON document with defaults for everything
except the vantage label.

Validation collects every problem before failing, so an operator fixes a
broken config in one pass.
"""

from __future__ import annotations

import base64
import ipaddress
import json
import os
from dataclasses import dataclass, field

from .model import ConfigError, ExclusionSet, check_vantage
from .porttrap import DEFAULT_PORTS, MODES, PortMode, TrapPolicy
from .shell import DEFAULT_CREDENTIALS, CredentialPolicy, Fetcher

ENV_VAR = "DROIDPOT_CONFIG"
MIN_INTERVAL = 10

DEFAULT_PORTS_BY_SERVICE = {"shell": 2222, "web": 8080, "ftp": 2121, "tftp": 6969}
SERVICE_TRANSPORT = {"shell": "tcp", "web": "tcp", "ftp": "tcp", "tftp": "udp"}
# what the unprivileged defaults stand in for on a real probe
PRIVILEGED_PORTS = {"shell": 22, "web": 80, "ftp": 21, "tftp": 69}

_TOP_KEYS = {"vantage", "data_dir", "bind", "services", "credentials", "fs_manifest", "persona",
             "traps", "exporter", "exclusion", "artifact_dir", "fetch", "log_level"}
_SERVICE_KEYS = {"enabled", "port", "passive_ports", "idle_timeout"}
_TRAP_KEYS = {"enabled", "tcp_ports", "udp_ports", "modes", "default_mode", "idle_timeout", "total_timeout"}
_EXPORT_KEYS = {"enabled", "collector", "interval", "spool_dir", "bind_address", "spool_cap_bytes",
                "rotate_bytes", "timeout"}
_FETCH_KEYS = {"mode", "allowlist", "stub", "timeout", "max_bytes"}
_CRED_KEYS = {"accepted", "accept_after_attempts"}


class ConfigInvalid(ConfigError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class ServiceConfig:
    enabled: bool = True
    port: int = 0
    passive_ports: tuple | None = None
    idle_timeout: float = 300.0


@dataclass
class ExporterConfig:
    enabled: bool = True
    collector: tuple | None = None
    interval: float = 300.0
    spool_dir: str = ""
    bind_address: str | None = None
    spool_cap_bytes: int = 1 << 30
    rotate_bytes: int = 64 * 1024 * 1024
    timeout: float = 10.0


@dataclass
class DaemonConfig:
    vantage: str
    data_dir: str = "droidpot-data"
    bind: str = "0.0.0.0"
    services: dict = field(default_factory=dict)
    credentials: CredentialPolicy = field(default_factory=CredentialPolicy)
    fs_manifest: str | None = None
    persona: str | None = None
    traps_enabled: bool = True
    trap_policy: TrapPolicy = field(default_factory=TrapPolicy)
    trap_idle: float = 30.0
    trap_total: float = 300.0
    exporter: ExporterConfig = field(default_factory=ExporterConfig)
    exclusion: tuple = ()
    artifact_dir: str = ""
    fetch_mode: str = "stub"
    fetch_allowlist: tuple = ()
    fetch_stub: dict = field(default_factory=dict)
    fetch_timeout: float = 30.0
    fetch_max_bytes: int = 16 * 1024 * 1024
    log_level: str = "INFO"
    trimmed_trap_ports: tuple = ()

    def path(self, name: str) -> str:
        return os.path.join(self.data_dir, name)

    def exclusion_set(self) -> ExclusionSet:
        prefixes = list(self.exclusion)
        if self.exporter.collector is not None:
            host = self.exporter.collector[0]
            try:
                ipaddress.ip_address(host)
                prefixes.append(host)
            except ValueError:
                pass
        return ExclusionSet(prefixes)

    def fetcher(self) -> Fetcher:
        return Fetcher(self.fetch_mode, self.fetch_stub, self.fetch_allowlist,
                       self.fetch_timeout, self.fetch_max_bytes)


def parse_endpoint(text: str, default_port: int | None = None) -> tuple[str, int]:
    """``host:port``, ``[v6]:port`` or bare host (with *default_port*)."""
    text = str(text).strip()
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        port = rest.lstrip(":")
    elif text.count(":") == 1:
        host, port = text.split(":")
    else:
        host, port = text, ""
    if not port:
        if default_port is None:
            raise ValueError(f"endpoint {text!r} lacks a port")
        return host or "0.0.0.0", default_port
    port = int(port)
    if not 0 <= port <= 65535:
        raise ValueError(f"port out of range in {text!r}")
    return host or "0.0.0.0", port


def _port_ok(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and 0 <= value <= 65535


def _number(errors, where, value, minimum=None):
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        errors.append(f"{where}: expected a number, got {value!r}")
        return None
    if minimum is not None and value < minimum:
        errors.append(f"{where}: must be >= {minimum}")
        return None
    return value


def _unknown(errors, where, d, allowed):
    for key in sorted(set(d) - allowed):
        errors.append(f"{where}: unknown key {key!r}")


def _obj(errors, where, value) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        errors.append(f"{where}: expected an object")
        return {}
    return value


def build_config(raw: dict, base_dir: str = ".") -> DaemonConfig:
    """Validate a parsed config document and fill in defaults."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigInvalid(["config must be a JSON object"])
    _unknown(errors, "config", raw, _TOP_KEYS)

    vantage = raw.get("vantage")
    if vantage is None:
        errors.append("vantage: required")
        vantage = "invalid"
    else:
        try:
            check_vantage(vantage)
        except ConfigError as exc:
            errors.append(f"vantage: {exc}")

    def rel(p):
        return p if p is None or os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))

    data_dir = rel(raw.get("data_dir", "droidpot-data"))
    cfg = DaemonConfig(vantage=vantage, data_dir=data_dir, bind=str(raw.get("bind", "0.0.0.0")))
    cfg.log_level = str(raw.get("log_level", "INFO")).upper()

    # services
    svc_raw = _obj(errors, "services", raw.get("services"))
    _unknown(errors, "services", svc_raw, set(DEFAULT_PORTS_BY_SERVICE))
    for name, default_port in DEFAULT_PORTS_BY_SERVICE.items():
        s = _obj(errors, f"services.{name}", svc_raw.get(name))
        _unknown(errors, f"services.{name}", s, _SERVICE_KEYS)
        sc = ServiceConfig(enabled=bool(s.get("enabled", True)), port=s.get("port", default_port))
        if not _port_ok(sc.port):
            errors.append(f"services.{name}.port: expected 0..65535, got {sc.port!r}")
        if "idle_timeout" in s:
            v = _number(errors, f"services.{name}.idle_timeout", s["idle_timeout"], 1)
            if v is not None:
                sc.idle_timeout = float(v)
        if "passive_ports" in s:
            pp = s["passive_ports"]
            if name != "ftp":
                errors.append(f"services.{name}.passive_ports: only valid for ftp")
            elif (not isinstance(pp, list) or len(pp) != 2 or not all(_port_ok(p) for p in pp)
                  or pp[0] > pp[1]):
                errors.append("services.ftp.passive_ports: expected [low, high]")
            else:
                sc.passive_ports = tuple(range(pp[0], pp[1] + 1))
        cfg.services[name] = sc

    claimed: dict[tuple, str] = {}
    for name, sc in cfg.services.items():
        if not sc.enabled or not _port_ok(sc.port) or sc.port == 0:
            continue
        key = (SERVICE_TRANSPORT[name], sc.port)
        if key in claimed:
            errors.append(f"port conflict: {claimed[key]} and {name} both claim {key[0]}/{key[1]}")
        else:
            claimed[key] = name
    ftp = cfg.services["ftp"]
    if ftp.enabled and ftp.passive_ports:
        for (proto, port), name in claimed.items():
            if proto == "tcp" and port in ftp.passive_ports:
                errors.append(f"port conflict: ftp passive range and {name} both claim tcp/{port}")

    # credentials
    cred = _obj(errors, "credentials", raw.get("credentials"))
    _unknown(errors, "credentials", cred, _CRED_KEYS)
    accepted = cred.get("accepted", [list(p) for p in DEFAULT_CREDENTIALS])
    quota = cred.get("accept_after_attempts", 3)
    if not isinstance(accepted, list) or not all(
            isinstance(p, list) and len(p) == 2 and all(isinstance(x, str) for x in p) for p in accepted):
        errors.append("credentials.accepted: expected a list of [username, password] pairs")
        accepted = []
    if not isinstance(quota, int) or isinstance(quota, bool) or quota < 0:
        errors.append("credentials.accept_after_attempts: expected an integer >= 0")
        quota = 3
    cfg.credentials = CredentialPolicy(tuple(tuple(p) for p in accepted), quota)

    # files
    for key in ("fs_manifest", "persona"):
        value = raw.get(key)
        if value is not None:
            path = rel(str(value))
            if not os.path.isfile(path):
                errors.append(f"{key}: file not found: {path}")
            setattr(cfg, key, path)

    # port traps
    traps = _obj(errors, "traps", raw.get("traps"))
    _unknown(errors, "traps", traps, _TRAP_KEYS)
    cfg.traps_enabled = bool(traps.get("enabled", True))
    tcp_ports = traps.get("tcp_ports", list(DEFAULT_PORTS))
    udp_ports = traps.get("udp_ports", [])
    for where, ports in (("traps.tcp_ports", tcp_ports), ("traps.udp_ports", udp_ports)):
        if not isinstance(ports, list) or not all(_port_ok(p) and p > 0 for p in ports):
            errors.append(f"{where}: expected a list of ports 1..65535")
        elif len(set(ports)) != len(ports):
            errors.append(f"{where}: duplicate ports")
    if not isinstance(tcp_ports, list):
        tcp_ports = []
    if not isinstance(udp_ports, list):
        udp_ports = []
    default_mode = traps.get("default_mode", "silent")
    if default_mode not in ("silent", "echo"):
        errors.append("traps.default_mode: expected silent or echo")
        default_mode = "silent"
    modes = {}
    for port_text, spec in _obj(errors, "traps.modes", traps.get("modes")).items():
        where = f"traps.modes.{port_text}"
        try:
            port = int(port_text)
        except ValueError:
            errors.append(f"{where}: key must be a port number")
            continue
        if isinstance(spec, str):
            spec = {"mode": spec}
        if not isinstance(spec, dict) or spec.get("mode") not in MODES:
            errors.append(f"{where}: mode must be one of {', '.join(MODES)}")
            continue
        banner = spec.get("banner", "")
        if "banner_b64" in spec:
            try:
                banner = base64.b64decode(spec["banner_b64"], validate=True)
            except ValueError:
                errors.append(f"{where}: bad banner_b64")
                continue
        elif isinstance(banner, str):
            banner = banner.encode("utf-8")
        try:
            modes[port] = PortMode(spec["mode"], banner)
        except ValueError as exc:
            errors.append(f"{where}: {exc}")
    for key, default in (("idle_timeout", 30.0), ("total_timeout", 300.0)):
        if key in traps:
            v = _number(errors, f"traps.{key}", traps[key], 1)
            default = v if v is not None else default
        setattr(cfg, "trap_idle" if key == "idle_timeout" else "trap_total", float(default))
    policy = TrapPolicy(tuple(p for p in tcp_ports if _port_ok(p)), tuple(p for p in udp_ports if _port_ok(p)),
                        modes, PortMode(default_mode))
    tcp_claimed = [p for (t, p) in claimed if t == "tcp"] + list(ftp.passive_ports or ())
    udp_claimed = [p for (t, p) in claimed if t == "udp"]
    cfg.trap_policy = policy.without(tcp_claimed, udp_claimed)
    cfg.trimmed_trap_ports = tuple(
        [("tcp", p) for p in policy.tcp_ports if p not in cfg.trap_policy.tcp_ports]
        + [("udp", p) for p in policy.udp_ports if p not in cfg.trap_policy.udp_ports])

    # exporter
    ex = _obj(errors, "exporter", raw.get("exporter"))
    _unknown(errors, "exporter", ex, _EXPORT_KEYS)
    ec = ExporterConfig(enabled=bool(ex.get("enabled", True)))
    if ex.get("collector") is not None:
        try:
            ec.collector = parse_endpoint(ex["collector"])
        except ValueError as exc:
            errors.append(f"exporter.collector: {exc}")
    interval = ex.get("interval", 300)
    if not isinstance(interval, (int, float)) or isinstance(interval, bool) or interval < MIN_INTERVAL:
        errors.append(f"exporter.interval: interval ≥ {MIN_INTERVAL} seconds required, got {interval!r}")
    else:
        ec.interval = float(interval)
    for key in ("spool_cap_bytes", "rotate_bytes"):
        if key in ex:
            v = _number(errors, f"exporter.{key}", ex[key], 1)
            if v is not None:
                setattr(ec, key, int(v))
    if "timeout" in ex:
        v = _number(errors, "exporter.timeout", ex["timeout"], 0.1)
        if v is not None:
            ec.timeout = float(v)
    ec.bind_address = ex.get("bind_address")
    ec.spool_dir = rel(ex.get("spool_dir") or os.path.join(data_dir, "spool"))
    cfg.exporter = ec

    # exclusion
    exclusion = raw.get("exclusion", [])
    if not isinstance(exclusion, list):
        errors.append("exclusion: expected a list of addresses or prefixes")
        exclusion = []
    try:
        ExclusionSet(exclusion)
    except ConfigError as exc:
        errors.append(f"exclusion: {exc}")
    cfg.exclusion = tuple(exclusion)
    cfg.artifact_dir = rel(raw.get("artifact_dir") or os.path.join(data_dir, "artifacts"))

    # fetching
    fetch = _obj(errors, "fetch", raw.get("fetch"))
    _unknown(errors, "fetch", fetch, _FETCH_KEYS)
    cfg.fetch_mode = fetch.get("mode", "stub")
    if cfg.fetch_mode not in ("stub", "live", "off"):
        errors.append("fetch.mode: expected stub, live or off")
    allow = fetch.get("allowlist", [])
    if not isinstance(allow, list) or not all(isinstance(a, str) for a in allow):
        errors.append("fetch.allowlist: expected a list of host patterns")
        allow = []
    if cfg.fetch_mode == "live" and not allow:
        errors.append("fetch.allowlist: live fetching needs a non-empty allowlist")
    cfg.fetch_allowlist = tuple(allow)
    stub = _obj(errors, "fetch.stub", fetch.get("stub"))
    for url, body in stub.items():
        if isinstance(body, str):
            cfg.fetch_stub[url] = body.encode("utf-8")
        elif isinstance(body, dict) and "b64" in body:
            cfg.fetch_stub[url] = base64.b64decode(body["b64"])
        else:
            errors.append(f"fetch.stub.{url}: expected text or {{\"b64\": ...}}")
    if "timeout" in fetch:
        v = _number(errors, "fetch.timeout", fetch["timeout"], 0.1)
        cfg.fetch_timeout = float(v) if v is not None else cfg.fetch_timeout
    if "max_bytes" in fetch:
        v = _number(errors, "fetch.max_bytes", fetch["max_bytes"], 1)
        cfg.fetch_max_bytes = int(v) if v is not None else cfg.fetch_max_bytes

    if errors:
        raise ConfigInvalid(errors)
    return cfg


def load_config(path=None) -> DaemonConfig:
    """Read and validate a config file; falls back to $DROIDPOT_CONFIG."""
    if path is None:
        path = os.environ.get(ENV_VAR)
        if not path:
            raise ConfigInvalid([f"no config file given and {ENV_VAR} is not set"])
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigInvalid([f"cannot read {path}: {exc.strerror or exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid([f"{path}: not valid JSON: {exc}"]) from exc
    return build_config(raw, os.path.dirname(os.path.abspath(path)))


def check_paths(cfg: DaemonConfig) -> list[str]:
    """Create runtime directories; returns the problems found."""
    problems = []
    for d in (cfg.data_dir, cfg.artifact_dir, cfg.exporter.spool_dir):
        try:
            os.makedirs(d, exist_ok=True)
        except OSError as exc:
            problems.append(f"cannot create {d}: {exc.strerror or exc}")
            continue
        if not os.access(d, os.W_OK):
            problems.append(f"{d} is not writable")
    return problems
