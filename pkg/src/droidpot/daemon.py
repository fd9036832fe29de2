"""Wires a validated config into running trap services."""

from __future__ import annotations

import json
import logging
import os
import signal
import threading

from . import vfs
from .config import DaemonConfig, check_paths
from .exporter import Exporter
from .ftp import FtpTrap, TftpTrap
from .model import ConfigError
from .netio import TcpService
from .porttrap import CaptureSink, PortTrapSet
from .shell import ShellTrap, load_persona
from .sink import EventSink, NdjsonLog, Recorder
from .store import ArtifactStore
from .web import WebTrap

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BIND = 3


class BindFailure(RuntimeError):
    def __init__(self, failures: list[str]):
        self.failures = failures
        super().__init__("cannot bind: " + "; ".join(failures))


class Daemon:
    """All services of one probe.  ``start`` then ``stop``; not restartable."""

    def __init__(self, config: DaemonConfig, clock=None):
        self.config = config
        self.clock = clock
        self.services: list = []
        self.traps: PortTrapSet | None = None
        self.exporter: Exporter | None = None
        self._stopped = threading.Event()

    def _path(self, name):
        return self.config.path(name)

    def start(self):
        cfg = self.config
        problems = check_paths(cfg)
        if problems:
            raise ConfigError("; ".join(problems))
        kw = {} if self.clock is None else {"clock": self.clock}
        self.sink = EventSink(self._path("events.ndjson")).open()
        if self.sink.quarantined:
            log.warning("recovered event log; partial line moved to %s", self.sink.quarantine_path)
        self.recorder = Recorder(self.sink, cfg.vantage, cfg.exclusion_set(),
                                 transcript_log=NdjsonLog(self._path("transcripts.ndjson")), **kw)
        self.store = ArtifactStore(cfg.artifact_dir, **kw)
        base = vfs.load_manifest_file(cfg.fs_manifest)
        persona = load_persona(cfg.persona)

        dedicated = []
        s = cfg.services
        if s["shell"].enabled:
            trap = ShellTrap(self.recorder, base, self.store, cfg.fetcher(), cfg.credentials, persona,
                             idle_timeout=s["shell"].idle_timeout)
            dedicated.append(TcpService("shell", cfg.bind, s["shell"].port, trap.handle))
        if s["web"].enabled:
            trap = WebTrap(self.recorder, base, self.store, NdjsonLog(self._path("requests.ndjson")),
                           idle_timeout=min(s["web"].idle_timeout, 30.0))
            dedicated.append(TcpService("web", cfg.bind, s["web"].port, trap.handle))
        if s["ftp"].enabled:
            trap = FtpTrap(self.recorder, self.store, s["ftp"].passive_ports,
                           idle_timeout=s["ftp"].idle_timeout)
            dedicated.append(TcpService("ftp", cfg.bind, s["ftp"].port, trap.handle))
        if s["tftp"].enabled:
            dedicated.append(TftpTrap(self.recorder, self.store, cfg.bind, s["tftp"].port))

        failures = []
        for svc in dedicated:
            try:
                svc.start()
                self.services.append(svc)
            except OSError as exc:
                failures.append(f"{svc.name} port {svc.requested_port}: {exc.strerror or exc}")
        if failures:
            self._shutdown_services()
            self.sink.close()
            raise BindFailure(failures)
        for proto, port in cfg.trimmed_trap_ports:
            log.info("trap port %s/%d left to its dedicated service", proto, port)

        if cfg.traps_enabled:
            self.captures = CaptureSink(self.store, NdjsonLog(self._path("captures.ndjson")), **kw)
            self.traps = PortTrapSet(self.recorder, self.captures, cfg.trap_policy, cfg.bind,
                                     cfg.trap_idle, cfg.trap_total).start()

        ec = cfg.exporter
        if ec.enabled:
            self.exporter = Exporter(self.sink.path, ec.spool_dir, cfg.vantage, ec.collector, self.sink,
                                     ec.interval, ec.spool_cap_bytes, ec.rotate_bytes, ec.timeout,
                                     ec.bind_address, **kw).start()
        log.info("%s probe up: %s", cfg.vantage, ", ".join(f"{svc.name}:{svc.port}" for svc in self.services))
        return self

    def ports(self) -> dict:
        out = {svc.name: svc.port for svc in self.services}
        if self.traps is not None:
            for svc in self.traps.services:
                out[svc.name] = svc.port
        return out

    def _shutdown_services(self):
        for svc in self.services:
            try:
                svc.stop()
            except Exception:
                log.exception("stopping %s failed", svc.name)
        self.services = []

    def stop(self):
        if self._stopped.is_set():
            return
        self._stopped.set()
        self._shutdown_services()
        if self.traps is not None:
            self.traps.stop()
        closed = self.recorder.close_all()
        if closed:
            log.info("closed %d open session(s) at shutdown", closed)
        if self.exporter is not None:
            self.exporter.stop(final=True)
        self.sink.close()


def run_daemon(config: DaemonConfig, ready=None) -> int:
    """Run until SIGTERM/SIGINT.  Returns the process exit code."""
    daemon = Daemon(config)
    try:
        daemon.start()
    except BindFailure as exc:
        for f in exc.failures:
            log.error("bind failure: %s", f)
        return EXIT_BIND
    done = threading.Event()

    def on_signal(signum, frame):
        log.info("signal %d, shutting down", signum)
        done.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    if ready is not None:
        ready(daemon)
    ports_file = os.environ.get("DROIDPOT_PORTS_FILE")
    if ports_file:
        tmp = ports_file + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(daemon.ports(), fh)
        os.replace(tmp, ports_file)
    while not done.wait(1.0):
        pass
    daemon.stop()
    return EXIT_OK
