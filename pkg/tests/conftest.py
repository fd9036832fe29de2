import contextlib
import json
import os
import socket
import subprocess
import sys
import time

import pytest

from droidpot import vfs
from droidpot.sink import EventSink, NdjsonLog, Recorder
from droidpot.store import ArtifactStore


class FakeClock:
    """Manually advanced epoch-seconds clock."""

    def __init__(self, start=1351728000.0):
        self.now = start

    def __call__(self):
        return self.now

    def advance(self, seconds):
        self.now += seconds


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture(scope="session")
def base_image():
    return vfs.load_manifest_file()


@pytest.fixture
def recorder(tmp_path):
    sink = EventSink(tmp_path / "events.ndjson").open()
    rec = Recorder(sink, "umts", ["10.99.0.0/16"], transcript_log=NdjsonLog(tmp_path / "transcripts.ndjson"))
    yield rec
    sink.close()


@pytest.fixture
def store():
    return ArtifactStore()


def read_events(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def free_port(kind=socket.SOCK_STREAM):
    s = socket.socket(socket.AF_INET, kind)
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def wait_for(predicate, timeout=5.0, step=0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(step)
    return predicate()


def recv_until(sock, marker: bytes, timeout=5.0) -> bytes:
    sock.settimeout(timeout)
    buf = b""
    while marker not in buf:
        chunk = sock.recv(65536)
        if not chunk:
            break
        buf += chunk
    return buf


def daemon_config(tmp_path, **overrides):
    """Loopback-only daemon config on ephemeral ports."""
    raw = {
        "vantage": "umts",
        "data_dir": str(tmp_path / "data"),
        "bind": "127.0.0.1",
        "services": {name: {"port": 0} for name in ("shell", "web", "ftp", "tftp")},
        "traps": {"tcp_ports": [], "udp_ports": []},
        "exporter": {"enabled": False},
    }
    for key, value in overrides.items():
        raw[key] = value
    return raw


def tree_digest(root) -> str:
    """Digest of every path, size and mtime below *root*."""
    import hashlib

    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames) + sorted(dirnames):
            p = os.path.join(dirpath, name)
            st = os.lstat(p)
            h.update(f"{p}|{st.st_size}|{st.st_mtime_ns}|{st.st_mode}\n".encode())
    return h.hexdigest()


@contextlib.contextmanager
def running_daemon(raw, clock=None):
    """Start an in-process daemon from a raw config dict; stop it on exit."""
    from droidpot.config import build_config
    from droidpot.daemon import Daemon

    daemon = Daemon(build_config(raw), clock=clock).start()
    try:
        yield daemon
    finally:
        daemon.stop()


def targets_for(daemon, trap_map=None, source=None):
    """sim Targets for a running daemon; *trap_map* maps nominal to real trap ports."""
    from droidpot.sim import Targets

    ports = daemon.ports()
    services = {k: v for k, v in ports.items() if not k.startswith("trap-")}
    return Targets("127.0.0.1", services, dict(trap_map or {}), daemon.config.data_dir, source)


def spawn_daemon(tmp_path, raw, name="probe"):
    """Run ``droidpot run`` in a child process; returns (process, ports)."""
    cfg = tmp_path / f"{name}.json"
    cfg.write_text(json.dumps(raw))
    ports_file = tmp_path / f"{name}-ports.json"
    if ports_file.exists():
        ports_file.unlink()
    env = dict(os.environ, DROIDPOT_PORTS_FILE=str(ports_file))
    proc = subprocess.Popen([sys.executable, "-m", "droidpot.cli", "run", "-c", str(cfg)], env=env,
                            stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
    if not wait_for(ports_file.exists, timeout=20):
        proc.kill()
        raise RuntimeError(f"daemon did not come up: {proc.stderr.read().decode(errors='replace')}")
    return proc, json.loads(ports_file.read_text())


# Acceptance outcomes, filled in by test_acceptance and printed after the run.
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, note = ACCEPTANCE[number]
        line = f"{'PASS' if ok else 'FAIL'} {number:>2}. {title}"
        terminalreporter.write_line(line + (f"  ({note})" if note else ""))
