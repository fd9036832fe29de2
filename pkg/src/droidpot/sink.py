"""Append-only event log and the recorder that feeds it.

All trap services hand their connection metadata to one :class:`Recorder`.
The recorder stamps events and pushes them through a single
:class:`EventSink`, which assigns ids and writes lines under one lock, so the
order on disk is the event id order.
"""

from __future__ import annotations

import collections
import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field

from .codec import MalformedEvent, parse_event, serialize_event
from .model import (
    SESSION_SERVICES,
    UDP_FLOW_IDLE,
    AttackEvent,
    ExclusionSet,
    FlowTable,
    SessionlessService,
    SessionTranscript,
    canonical_ip,
    check_vantage,
    now_ms,
)

log = logging.getLogger(__name__)

DEFAULT_BUFFER = 10_000
_TAIL_CHUNK = 1 << 20


class NdjsonLog:
    """Thread-safe append of JSON objects, one per line."""

    def __init__(self, path):
        self.path = os.fspath(path)
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        self._lock = threading.Lock()

    def append(self, obj: dict):
        line = json.dumps(obj, separators=(",", ":"), ensure_ascii=False) + "\n"
        with self._lock:
            fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            try:
                os.write(fd, line.encode("utf-8"))
            finally:
                os.close(fd)

    def read(self) -> list[dict]:
        if not os.path.exists(self.path):
            return []
        out = []
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    try:
                        out.append(json.loads(line))
                    except ValueError:
                        continue
        return out


def _last_complete_id(fd_path) -> int | None:
    """Id of the last parsable complete line, scanning backwards."""
    size = os.path.getsize(fd_path)
    with open(fd_path, "rb") as fh:
        end = size
        carry = b""
        while end > 0:
            start = max(0, end - _TAIL_CHUNK)
            fh.seek(start)
            chunk = fh.read(end - start) + carry
            lines = chunk.split(b"\n")
            # the first piece may be cut unless we reached the file start
            carry = lines[0] if start > 0 else b""
            body = lines[1:] if start > 0 else lines
            for raw in reversed(body):
                if not raw.strip():
                    continue
                try:
                    return parse_event(raw).event_id
                except (MalformedEvent, UnicodeDecodeError):
                    continue
            end = start
    return None


def recover_log(path, quarantine_path) -> tuple[int | None, bytes]:
    """Make *path* end on a line boundary.

    A trailing partial line (left by a crash mid-write) is moved to
    *quarantine_path*.  Returns (last event id or None, quarantined bytes).
    """
    if not os.path.exists(path):
        return None, b""
    size = os.path.getsize(path)
    quarantined = b""
    if size:
        with open(path, "rb+") as fh:
            pos = size
            tail = b""
            while pos > 0:
                step = min(_TAIL_CHUNK, pos)
                fh.seek(pos - step)
                tail = fh.read(step) + tail
                pos -= step
                if b"\n" in tail:
                    break
            cut = tail.rfind(b"\n")
            keep = pos + cut + 1 if cut >= 0 else 0
            if keep < size:
                fh.seek(keep)
                quarantined = fh.read()
                fh.truncate(keep)
    if quarantined:
        with open(quarantine_path, "ab") as q:
            q.write(quarantined + b"\n")
        log.warning("quarantined %d-byte partial line from %s", len(quarantined), path)
    return _last_complete_id(path), quarantined


class EventSink:
    """Single-writer NDJSON event log.

    When the sink is closed, events are kept in a bounded in-memory queue;
    once the queue is full the oldest entries are dropped and counted in
    :attr:`dropped`.  :meth:`open` flushes whatever was queued.
    """

    def __init__(self, path, buffer_size: int = DEFAULT_BUFFER):
        self.path = os.fspath(path)
        self.quarantine_path = self.path + ".quarantine"
        self.lock = threading.RLock()
        self.dropped = 0
        self.quarantined = b""
        self._fd: int | None = None
        self._buffer: collections.deque = collections.deque()
        self._buffer_size = buffer_size
        self._next_id = 1
        self._recovered = False

    @property
    def next_id(self) -> int:
        return self._next_id

    @property
    def is_open(self) -> bool:
        return self._fd is not None

    def open(self, first_id: int | None = None):
        with self.lock:
            if self._fd is not None:
                return self
            os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
            if not self._recovered:
                last, self.quarantined = recover_log(self.path, self.quarantine_path)
                if last is None:
                    last = self._last_rotated_id()
                if last is not None:
                    self._next_id = max(self._next_id, last + 1)
                if first_id is not None:
                    self._next_id = max(self._next_id, first_id)
                self._recovered = True
            self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            while self._buffer:
                self._write(self._buffer.popleft())
        return self

    def _last_rotated_id(self) -> int | None:
        best = None
        for rotated in rotated_logs(self.path):
            last = _last_complete_id(rotated)
            if last is not None and (best is None or last > best):
                best = last
        return best

    def close(self):
        with self.lock:
            if self._fd is not None:
                os.close(self._fd)
                self._fd = None

    def _write(self, line: str):
        data = (line + "\n").encode("utf-8")
        # one write() per line keeps a crash from interleaving records
        written = os.write(self._fd, data)
        while written < len(data):
            written += os.write(self._fd, data[written:])

    def emit(self, **fields) -> AttackEvent:
        with self.lock:
            event = AttackEvent(event_id=self._next_id, **fields)
            self._next_id += 1
            line = serialize_event(event)
            if self._fd is None:
                if len(self._buffer) >= self._buffer_size:
                    self._buffer.popleft()
                    self.dropped += 1
                self._buffer.append(line)
            else:
                self._write(line)
            return event

    def size(self) -> int:
        with self.lock:
            try:
                return os.path.getsize(self.path)
            except FileNotFoundError:
                return 0

    def rotate(self, dest) -> bool:
        """Rename the live log to *dest* and start a fresh one."""
        with self.lock:
            was_open = self._fd is not None
            self.close()
            if not os.path.exists(self.path):
                return False
            os.replace(self.path, dest)
            if was_open:
                self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            return True


def rotated_logs(path) -> list[str]:
    """Rotated siblings of *path* (``events.ndjson`` -> ``events-*.ndjson``), oldest first."""
    directory = os.path.dirname(os.path.abspath(path))
    stem, ext = os.path.splitext(os.path.basename(path))
    try:
        names = os.listdir(directory)
    except FileNotFoundError:
        return []
    found = [n for n in names if n.startswith(stem + "-") and n.endswith(ext)]
    return [os.path.join(directory, n) for n in sorted(found)]


@dataclass
class LogScan:
    lines: int = 0
    first_id: int | None = None
    last_id: int | None = None
    gaps: list = field(default_factory=list)
    out_of_order: list = field(default_factory=list)
    malformed: list = field(default_factory=list)
    partial_tail: bool = False

    @property
    def ok(self) -> bool:
        return not (self.gaps or self.out_of_order or self.malformed)


def scan_log(paths) -> LogScan:
    """Check event logs for id gaps, reordering and corrupt lines.

    Files are read in the given order, as one stream.  A final line with no
    newline is reported as ``partial_tail`` rather than as malformed.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    scan = LogScan()
    prev = None
    for path in paths:
        with open(path, "rb") as fh:
            data = fh.read()
        lines = data.split(b"\n")
        if lines and lines[-1] == b"":
            lines.pop()
        elif lines:
            scan.partial_tail = True
            lines.pop()
        for lineno, raw in enumerate(lines, 1):
            if not raw.strip():
                continue
            try:
                event = parse_event(raw)
            except (MalformedEvent, UnicodeDecodeError):
                scan.malformed.append((os.fspath(path), lineno))
                continue
            scan.lines += 1
            eid = event.event_id
            if scan.first_id is None:
                scan.first_id = eid
            if prev is not None:
                if eid <= prev:
                    scan.out_of_order.append((prev, eid))
                elif eid != prev + 1:
                    scan.gaps.append((prev + 1, eid - 1))
            prev = eid
            scan.last_id = eid
    return scan


class Recorder:
    """Turns connection metadata into attack events and sessions.

    ``clock`` returns epoch seconds; it is injectable so tests can replay
    traffic on a virtual timeline.
    """

    def __init__(self, sink: EventSink, vantage: str, exclusion=None, clock=time.time,
                 udp_idle: float = UDP_FLOW_IDLE, transcript_log: NdjsonLog | None = None,
                 keep_closed: int = 4096):
        self.sink = sink
        self.vantage = check_vantage(vantage)
        self.exclusion = exclusion if isinstance(exclusion, ExclusionSet) else ExclusionSet(exclusion or ())
        self.clock = clock
        self.flows = FlowTable(udp_idle)
        self.transcript_log = transcript_log
        self._lock = threading.Lock()
        self._open: dict[str, SessionTranscript] = {}
        self._closed: collections.OrderedDict = collections.OrderedDict()
        self._keep_closed = keep_closed

    def record_event(self, transport: str, src_ip: str, src_port: int, dst_port: int,
                     service: str, payload_bytes: int = 0) -> AttackEvent:
        src_ip = canonical_ip(src_ip)
        session = uuid.uuid4().hex[:16] if service in SESSION_SERVICES else None
        return self.sink.emit(
            ts_ms=now_ms(self.clock),
            vantage=self.vantage,
            transport=transport,
            src_ip=src_ip,
            src_port=int(src_port),
            dst_port=int(dst_port),
            service=service,
            session_id=session,
            payload_bytes=int(payload_bytes),
            excluded=src_ip in self.exclusion,
        )

    def record_datagram(self, src_ip: str, src_port: int, dst_port: int, service: str,
                        size: int) -> AttackEvent | None:
        """Event for the first datagram of a UDP flow, None for the rest."""
        src_ip = canonical_ip(src_ip)
        key = ("udp", src_ip, int(src_port), int(dst_port))
        if not self.flows.touch(key, self.clock()):
            return None
        return self.record_event("udp", src_ip, src_port, dst_port, service, size)

    def open_session(self, event: AttackEvent) -> SessionTranscript:
        if event.service not in SESSION_SERVICES or event.session_id is None:
            raise SessionlessService(f"service {event.service!r} has no sessions")
        transcript = SessionTranscript(
            session_id=event.session_id,
            service=event.service,
            event_id=event.event_id,
            src_ip=event.src_ip,
            src_port=event.src_port,
            dst_port=event.dst_port,
            start_ms=event.ts_ms,
        )
        with self._lock:
            self._open[event.session_id] = transcript
        return transcript

    def close_session(self, transcript: SessionTranscript) -> bool:
        if not transcript.close(now_ms(self.clock)):
            return False
        with self._lock:
            self._open.pop(transcript.session_id, None)
            self._closed[transcript.session_id] = transcript
            while len(self._closed) > self._keep_closed:
                self._closed.popitem(last=False)
        if self.transcript_log is not None:
            self.transcript_log.append(transcript.to_dict())
        return True

    def open_sessions(self) -> list[SessionTranscript]:
        with self._lock:
            return list(self._open.values())

    def close_all(self) -> int:
        return sum(self.close_session(t) for t in self.open_sessions())

    def session_transcript(self, session_id: str) -> SessionTranscript:
        with self._lock:
            if session_id in self._closed:
                return self._closed[session_id]
            if session_id in self._open:
                raise ValueError(f"session {session_id} is still open")
        if self.transcript_log is not None:
            for d in self.transcript_log.read():
                if d.get("session") == session_id:
                    return SessionTranscript.from_dict(d)
        raise KeyError(f"unknown session {session_id}")
