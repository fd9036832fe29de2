"""Catch-all listener for ports that have no dedicated trap.

Connections are accepted and whatever the peer sends is kept (the first
64 KiB of it).  By default the trap never says a word, which is what lets us
tell apart clients that push data blindly from ones waiting for a greeting.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass, field

from .model import UDP_FLOW_IDLE, format_ts, now_ms, raw_payload
from .netio import TcpService, UdpService

log = logging.getLogger(__name__)

CAPTURE_LIMIT = 64 * 1024
IDLE_TIMEOUT = 30.0
TOTAL_TIMEOUT = 300.0
MODES = ("silent", "echo", "banner")

# observed top ports; dedicated services take theirs out at startup
DEFAULT_PORTS = (23, 25, 53, 80, 110, 139, 143, 445, 1080, 1433, 3306, 3389, 5060,
                 5900, 5901, 5902, 6666)


@dataclass(frozen=True)
class PortMode:
    kind: str = "silent"
    banner: bytes = b""

    def __post_init__(self):
        if self.kind not in MODES:
            raise ValueError(f"unknown trap mode {self.kind!r}")
        if self.kind == "banner" and not self.banner:
            raise ValueError("banner mode needs banner bytes")


SILENT = PortMode()


@dataclass
class TrapPolicy:
    """Which ports are trapped and how each one behaves."""

    tcp_ports: tuple = DEFAULT_PORTS
    udp_ports: tuple = ()
    modes: dict = field(default_factory=dict)   # port -> PortMode
    default: PortMode = SILENT

    def mode_for(self, port: int) -> PortMode:
        return self.modes.get(port, self.default)

    def without(self, tcp_claimed=(), udp_claimed=()) -> "TrapPolicy":
        """A copy with ports owned by dedicated services removed."""
        return TrapPolicy(
            tuple(p for p in self.tcp_ports if p not in set(tcp_claimed)),
            tuple(p for p in self.udp_ports if p not in set(udp_claimed)),
            dict(self.modes), self.default,
        )


@dataclass
class PayloadCapture:
    data: bytes = b""
    total: int = 0
    blind_send: bool = False
    duration: float = 0.0
    mode: str = "silent"
    sent: int = 0

    def add(self, chunk: bytes):
        if len(self.data) < CAPTURE_LIMIT:
            self.data += chunk[: CAPTURE_LIMIT - len(self.data)]
        self.total += len(chunk)


def trap_connection(conn, mode: PortMode = SILENT, idle: float = IDLE_TIMEOUT,
                    total_limit: float = TOTAL_TIMEOUT, clock=time.monotonic) -> PayloadCapture:
    """Sit on an accepted connection until the peer leaves or we time out."""
    cap = PayloadCapture(mode=mode.kind)
    start = clock()
    spoke = False
    if mode.kind == "banner":
        try:
            conn.sendall(mode.banner)
            cap.sent += len(mode.banner)
            spoke = True
        except OSError:
            pass
    while True:
        remaining = total_limit - (clock() - start)
        if remaining <= 0:
            break
        conn.settimeout(min(idle, remaining))
        try:
            chunk = conn.recv(65536)
        except (socket.timeout, OSError):
            break
        if not chunk:
            break
        if not spoke and cap.total == 0 and mode.kind == "silent":
            cap.blind_send = True
        cap.add(chunk)
        if mode.kind == "echo":
            try:
                conn.sendall(chunk)
                cap.sent += len(chunk)
                spoke = True
            except OSError:
                break
    cap.duration = clock() - start
    return cap


def trap_datagram(datagram: bytes, capture: PayloadCapture | None, mode: PortMode = SILENT):
    """Fold one datagram into its flow's capture.

    Returns (capture, reply bytes or None).  A None *capture* starts a new
    flow.
    """
    new = capture is None
    if new:
        capture = PayloadCapture(mode=mode.kind)
    if new and mode.kind == "silent" and datagram:
        capture.blind_send = True
    capture.add(datagram)
    reply = None
    if mode.kind == "echo":
        reply = datagram
    elif mode.kind == "banner" and new:
        reply = mode.banner
    if reply:
        capture.sent += len(reply)
    return capture, reply


class CaptureSink:
    """Stores capture bytes as artifacts and logs one record per capture."""

    def __init__(self, store, capture_log=None, clock=time.time):
        self.store = store
        self.capture_log = capture_log
        self.clock = clock
        self.records: list = []
        self._lock = threading.Lock()

    def save(self, event, capture: PayloadCapture) -> dict:
        digest = None
        if capture.total:
            digest = self.store.put(capture.data, raw_payload(event.dst_port, event.transport)).digest
        rec = {
            "event": event.event_id,
            "ts": format_ts(now_ms(self.clock)),
            "proto": event.transport,
            "src_ip": event.src_ip,
            "src_port": event.src_port,
            "dst_port": event.dst_port,
            "mode": capture.mode,
            "total": capture.total,
            "stored": len(capture.data),
            "blind_send": capture.blind_send,
            "duration": round(capture.duration, 3),
            "digest": digest,
        }
        with self._lock:
            self.records.append(rec)
            if len(self.records) > 10000:
                del self.records[:5000]
        if self.capture_log is not None:
            self.capture_log.append(rec)
        return rec


class TcpPortTrap:
    def __init__(self, recorder, sink: CaptureSink, mode: PortMode = SILENT,
                 idle: float = IDLE_TIMEOUT, total_limit: float = TOTAL_TIMEOUT):
        self.recorder = recorder
        self.sink = sink
        self.mode = mode
        self.idle = idle
        self.total_limit = total_limit

    def handle(self, sock, addr):
        port = sock.getsockname()[1]
        event = self.recorder.record_event("tcp", addr[0], addr[1], port, "port_trap")
        try:
            cap = trap_connection(sock, self.mode, self.idle, self.total_limit)
        finally:
            try:
                sock.close()
            except OSError:
                pass
        self.sink.save(event, cap)


class UdpPortTrap(UdpService):
    def __init__(self, recorder, sink: CaptureSink, host: str, port: int,
                 mode: PortMode = SILENT, idle: float = UDP_FLOW_IDLE):
        super().__init__(f"trap-udp-{port}", host, port, self._on_datagram)
        self.recorder = recorder
        self.sink = sink
        self.mode = mode
        self.idle = idle
        self._flows: dict = {}     # (src_ip, src_port) -> [event, capture, first, last]
        self._lock = threading.Lock()

    def _on_datagram(self, data, addr, sock):
        key = (addr[0], addr[1])
        now = self.recorder.clock()
        event = self.recorder.record_datagram(addr[0], addr[1], self.port, "port_trap", len(data))
        finished = None
        with self._lock:
            entry = self._flows.get(key)
            if event is not None:
                finished = entry
                cap, reply = trap_datagram(data, None, self.mode)
                self._flows[key] = [event, cap, now, now]
            else:
                if entry is None:
                    # flow state lost (restart); nothing to attach to
                    return
                cap, reply = trap_datagram(data, entry[1], self.mode)
                entry[3] = now
        if finished is not None:
            self._finish(finished)
        if reply:
            sock.sendto(reply, addr)

    def _finish(self, entry):
        event, cap, first, last = entry
        cap.duration = last - first
        self.sink.save(event, cap)

    def tick(self):
        self.expire(self.recorder.clock())

    def expire(self, now: float, everything: bool = False) -> int:
        with self._lock:
            done = [k for k, e in self._flows.items() if everything or now - e[3] >= self.idle]
            entries = [self._flows.pop(k) for k in done]
        for e in entries:
            self._finish(e)
        return len(entries)

    def stop(self):
        super().stop()
        self.expire(0, everything=True)


class PortTrapSet:
    """Starts one listener per trapped port; ports that fail to bind are skipped."""

    def __init__(self, recorder, sink: CaptureSink, policy: TrapPolicy, host: str = "0.0.0.0",
                 idle: float = IDLE_TIMEOUT, total_limit: float = TOTAL_TIMEOUT):
        self.recorder = recorder
        self.sink = sink
        self.policy = policy
        self.host = host
        self.idle = idle
        self.total_limit = total_limit
        self.services: list = []
        self.unavailable: list = []

    def start(self):
        for port in self.policy.tcp_ports:
            trap = TcpPortTrap(self.recorder, self.sink, self.policy.mode_for(port),
                               self.idle, self.total_limit)
            self._start(TcpService(f"trap-tcp-{port}", self.host, port, trap.handle), "tcp", port)
        for port in self.policy.udp_ports:
            svc = UdpPortTrap(self.recorder, self.sink, self.host, port, self.policy.mode_for(port),
                              self.recorder.flows.idle)
            self._start(svc, "udp", port)
        return self

    def _start(self, svc, proto, port):
        try:
            svc.start()
        except OSError as exc:
            log.error("port trap %s/%d unavailable: %s", proto, port, exc)
            self.unavailable.append((proto, port, str(exc)))
            return
        self.services.append(svc)

    def stop(self):
        for svc in self.services:
            svc.stop()
        self.services = []
