"""Batch export of the event log to a collector, plus the collector itself.

The exporter keeps a byte cursor into the live event log.  Every interval it
cuts the complete lines after the cursor into a batch, spools the batch to
disk, and tries to deliver every spooled batch in order.  A batch leaves the
spool only when the collector acks it, so delivery is at-least-once; the
collector drops batches it has already stored, which makes the end result
exactly-once.

Wire format, per batch: a 4-byte big-endian length, then that many bytes
made of one JSON header line followed by the payload (the raw log lines).
The collector answers each frame with one JSON line, ``{"ack": id}`` or
``{"nack": id, "reason": ...}``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import socket
import struct
import tempfile
import threading
import time
from dataclasses import dataclass, field

from .codec import serialize_event  # noqa: F401  re-exported for callers
from .model import format_ts, now_ms
from .netio import TcpService
from .sink import EventSink

log = logging.getLogger(__name__)

DEFAULT_INTERVAL = 300.0
SPOOL_CAP = 1 << 30
ROTATE_BYTES = 64 * 1024 * 1024
MAX_FRAME = (1 << 30) + (1 << 20)
STATE = "state.json"


@dataclass(frozen=True)
class ExportBatch:
    batch_id: str
    vantage: str
    seq: int
    created: int
    payload: bytes
    count: int
    checksum: str
    cursor: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "batch_id": self.batch_id,
            "vantage": self.vantage,
            "count": self.count,
            "checksum": self.checksum,
            "seq": self.seq,
            "created": format_ts(self.created),
            "cursor": self.cursor,
        }

    def frame(self) -> bytes:
        return encode_frame(self.header(), self.payload)

    @classmethod
    def from_frame_body(cls, body: bytes) -> "ExportBatch":
        header, payload = decode_frame_body(body)
        return cls(
            batch_id=header["batch_id"], vantage=header["vantage"], seq=int(header.get("seq", 0)),
            created=0, payload=payload, count=int(header["count"]), checksum=header["checksum"],
            cursor=header.get("cursor", {}),
        )


def encode_frame(header: dict, payload: bytes) -> bytes:
    body = json.dumps(header, separators=(",", ":"), sort_keys=False).encode("utf-8") + b"\n" + payload
    return struct.pack("!I", len(body)) + body


class FrameError(ValueError):
    pass


def decode_frame_body(body: bytes) -> tuple[dict, bytes]:
    head, sep, payload = body.partition(b"\n")
    if not sep:
        raise FrameError("missing header line")
    try:
        header = json.loads(head)
    except ValueError as exc:
        raise FrameError("header is not JSON") from exc
    if not isinstance(header, dict):
        raise FrameError("header is not an object")
    for key in ("batch_id", "vantage", "count", "checksum"):
        if key not in header:
            raise FrameError(f"header lacks {key}")
    return header, payload


def _recv_exact(sock, n: int) -> bytes | None:
    chunks, have = [], 0
    while have < n:
        data = sock.recv(min(n - have, 1 << 20))
        if not data:
            return None
        chunks.append(data)
        have += len(data)
    return b"".join(chunks)


def _read_line(sock, limit: int = 65536) -> bytes | None:
    buf = bytearray()
    while not buf.endswith(b"\n"):
        data = sock.recv(1)
        if not data:
            return None
        buf += data
        if len(buf) > limit:
            return None
    return bytes(buf)


@dataclass
class DeliveryResult:
    attempted: int = 0
    acked: list = field(default_factory=list)
    nacked: list = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and not self.nacked


class Exporter:
    """Seals batches out of the event log and ships them to a collector."""

    def __init__(self, log_path, spool_dir, vantage: str, collector=None, sink: EventSink | None = None,
                 interval: float = DEFAULT_INTERVAL, spool_cap: int = SPOOL_CAP,
                 rotate_bytes: int = ROTATE_BYTES, timeout: float = 10.0, bind_address: str | None = None,
                 clock=time.time):
        self.log_path = os.fspath(log_path)
        self.spool_dir = os.fspath(spool_dir)
        self.vantage = vantage
        self.collector = collector
        self.sink = sink
        self.interval = interval
        self.spool_cap = spool_cap
        self.rotate_bytes = rotate_bytes
        self.timeout = timeout
        self.bind_address = bind_address
        self.clock = clock
        self.alarms = 0
        self.dropped_batches: list[str] = []
        self.history: list[DeliveryResult] = []
        self._lock = threading.Lock()
        self._timer: threading.Thread | None = None
        self._stop = threading.Event()
        os.makedirs(self.spool_dir, exist_ok=True)
        self._load_state()

    # -- persistent state --

    def _load_state(self):
        state = {"next_seq": 1, "cursor": {"file": os.path.basename(self.log_path), "offset": 0},
                 "rotations": 0}
        path = os.path.join(self.spool_dir, STATE)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                state.update(json.load(fh))
        # a batch spooled right before a crash may be newer than the saved state
        for seq, name in self._spooled():
            if seq >= state["next_seq"]:
                header, _ = self._read_spooled(name)
                state["next_seq"] = seq + 1
                state["cursor"] = header.get("cursor", state["cursor"])
        self.state = state

    def _save_state(self):
        fd, tmp = tempfile.mkstemp(dir=self.spool_dir, prefix=".state-")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(self.state, fh)
        os.replace(tmp, os.path.join(self.spool_dir, STATE))

    def _spooled(self) -> list[tuple[int, str]]:
        out = []
        for name in os.listdir(self.spool_dir):
            if name.startswith("batch-") and name.endswith(".frame"):
                try:
                    out.append((int(name[6:-6]), name))
                except ValueError:
                    continue
        return sorted(out)

    def _read_spooled(self, name: str) -> tuple[dict, bytes]:
        with open(os.path.join(self.spool_dir, name), "rb") as fh:
            data = fh.read()
        return decode_frame_body(data[4:])

    def pending(self) -> list[str]:
        return [name for _, name in self._spooled()]

    def spool_bytes(self) -> int:
        return sum(os.path.getsize(os.path.join(self.spool_dir, n)) for n in self.pending())

    # -- sealing --

    def _read_new(self) -> tuple[bytes, int]:
        """Complete lines after the cursor; returns (bytes, new offset)."""
        offset = self.state["cursor"]["offset"]
        try:
            with open(self.log_path, "rb") as fh:
                fh.seek(offset)
                data = fh.read()
        except FileNotFoundError:
            return b"", offset
        end = data.rfind(b"\n")
        if end < 0:
            return b"", offset
        return data[: end + 1], offset + end + 1

    def _maybe_rotate(self):
        if self.sink is None or self.rotate_bytes is None:
            return
        with self.sink.lock:
            size = self.sink.size()
            if size < self.rotate_bytes or size != self.state["cursor"]["offset"]:
                return
            self.state["rotations"] += 1
            stem, ext = os.path.splitext(self.log_path)
            dest = f"{stem}-{time.strftime('%Y%m%d%H%M%S', time.gmtime(self.clock()))}-{self.state['rotations']:06d}{ext}"
            self.sink.rotate(dest)
            self.state["cursor"] = {"file": os.path.basename(self.log_path), "offset": 0}
            self._save_state()
        log.info("rotated event log to %s", dest)

    def seal(self) -> ExportBatch:
        """Cut everything logged since the last seal into a spooled batch."""
        with self._lock:
            payload, new_offset = self._read_new()
            seq = self.state["next_seq"]
            cursor = {"file": os.path.basename(self.log_path), "offset": new_offset}
            batch = ExportBatch(
                batch_id=f"{self.vantage}-{seq:08d}",
                vantage=self.vantage,
                seq=seq,
                created=now_ms(self.clock),
                payload=payload,
                count=payload.count(b"\n"),
                checksum=hashlib.sha256(payload).hexdigest(),
                cursor=cursor,
            )
            name = os.path.join(self.spool_dir, f"batch-{seq:08d}.frame")
            fd, tmp = tempfile.mkstemp(dir=self.spool_dir, prefix=".batch-")
            with os.fdopen(fd, "wb") as fh:
                fh.write(batch.frame())
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, name)
            self.state["next_seq"] = seq + 1
            self.state["cursor"] = cursor
            self._save_state()
            self._enforce_cap()
            self._maybe_rotate()
        return batch

    def _enforce_cap(self):
        spooled = self._spooled()
        total = sum(os.path.getsize(os.path.join(self.spool_dir, n)) for _, n in spooled)
        while total > self.spool_cap and len(spooled) > 1:
            _, name = spooled.pop(0)
            path = os.path.join(self.spool_dir, name)
            total -= os.path.getsize(path)
            os.remove(path)
            self.alarms += 1
            self.dropped_batches.append(name)
            log.error("spool over capacity, dropped undelivered %s", name)

    # -- delivery --

    def deliver(self) -> DeliveryResult:
        """Send every spooled batch in order, stopping at the first failure."""
        result = DeliveryResult()
        if self.collector is None:
            result.error = "no collector configured"
            return result
        with self._lock:
            spooled = self._spooled()
        if not spooled:
            return result
        try:
            sock = socket.create_connection(tuple(self.collector), timeout=self.timeout,
                                            source_address=(self.bind_address, 0) if self.bind_address else None)
        except OSError as exc:
            result.error = f"collector unreachable: {exc}"
            log.warning("%s", result.error)
            return result
        try:
            for _, name in spooled:
                path = os.path.join(self.spool_dir, name)
                with open(path, "rb") as fh:
                    frame = fh.read()
                header, _ = decode_frame_body(frame[4:])
                result.attempted += 1
                sock.sendall(frame)
                line = _read_line(sock)
                if line is None:
                    result.error = "collector closed the connection"
                    break
                reply = json.loads(line)
                if reply.get("ack") == header["batch_id"]:
                    result.acked.append(header["batch_id"])
                    with self._lock:
                        os.remove(path)
                else:
                    result.nacked.append((header["batch_id"], reply.get("reason", "")))
                    log.warning("collector refused %s: %s", header["batch_id"], reply.get("reason"))
                    break
        except (OSError, ValueError) as exc:
            result.error = f"delivery failed: {exc}"
            log.warning("%s", result.error)
        finally:
            sock.close()
        return result

    def seal_and_export(self) -> tuple[ExportBatch, DeliveryResult]:
        batch = self.seal()
        result = self.deliver()
        self.history.append(result)
        return batch, result

    # -- timer --

    def start(self):
        self._stop.clear()
        self._timer = threading.Thread(target=self._run, name="exporter", daemon=True)
        self._timer.start()
        return self

    def _run(self):
        while not self._stop.wait(self.interval):
            try:
                self.seal_and_export()
            except Exception:
                log.exception("export cycle failed")

    def stop(self, final: bool = True):
        self._stop.set()
        if self._timer is not None:
            self._timer.join(timeout=self.timeout + 5)
            self._timer = None
        if final:
            try:
                self.seal_and_export()
            except Exception:
                log.exception("final export failed")


class CollectorStub:
    """Receives batches, verifies them and appends to per-vantage archives.

    ``corrupt_next`` makes the stub treat that many incoming batches as if
    their payload had been damaged in transit, for fault-injection tests.
    """

    def __init__(self, archive_dir, host: str = "127.0.0.1", port: int = 0):
        self.archive_dir = os.fspath(archive_dir)
        os.makedirs(self.archive_dir, exist_ok=True)
        self.corrupt_next = 0
        self.received = 0
        self.duplicates = 0
        self._lock = threading.Lock()
        self._seen: dict[str, set] = {}
        self.service = TcpService("collector", host, port, self.handle)

    @property
    def port(self) -> int:
        return self.service.port

    def start(self):
        self.service.start()
        return self

    def stop(self):
        self.service.stop()

    def _vantage_dir(self, vantage: str) -> str:
        safe = "".join(ch for ch in vantage if ch.isalnum() or ch in "._-") or "unknown"
        path = os.path.join(self.archive_dir, safe)
        os.makedirs(path, exist_ok=True)
        return path

    def _seen_ids(self, vantage: str) -> set:
        if vantage not in self._seen:
            ids = set()
            index = os.path.join(self._vantage_dir(vantage), "batches.ndjson")
            if os.path.exists(index):
                with open(index, encoding="utf-8") as fh:
                    for line in fh:
                        if line.strip():
                            ids.add(json.loads(line)["batch_id"])
            self._seen[vantage] = ids
        return self._seen[vantage]

    def accept(self, body: bytes) -> dict:
        """Process one frame body; returns the reply object."""
        try:
            header, payload = decode_frame_body(body)
        except FrameError as exc:
            return {"nack": None, "reason": f"malformed: {exc}"}
        batch_id = header["batch_id"]
        with self._lock:
            self.received += 1
            if self.corrupt_next > 0:
                self.corrupt_next -= 1
                payload = bytes([payload[0] ^ 0xFF]) + payload[1:] if payload else b"\x00"
        if hashlib.sha256(payload).hexdigest() != header["checksum"]:
            return {"nack": batch_id, "reason": "checksum"}
        if payload.count(b"\n") != header["count"]:
            return {"nack": batch_id, "reason": "count"}
        vantage = str(header["vantage"])
        with self._lock:
            seen = self._seen_ids(vantage)
            if batch_id in seen:
                self.duplicates += 1
                return {"ack": batch_id}
            vdir = self._vantage_dir(vantage)
            with open(os.path.join(vdir, "events.ndjson"), "ab") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            entry = {"batch_id": batch_id, "seq": header.get("seq"), "count": header["count"],
                     "checksum": header["checksum"], "received": format_ts(now_ms(time.time))}
            with open(os.path.join(vdir, "batches.ndjson"), "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, separators=(",", ":")) + "\n")
            seen.add(batch_id)
        return {"ack": batch_id}

    def handle(self, sock, addr):
        sock.settimeout(60)
        try:
            while True:
                head = _recv_exact(sock, 4)
                if head is None:
                    return
                length = struct.unpack("!I", head)[0]
                if length > MAX_FRAME:
                    sock.sendall(b'{"nack":null,"reason":"malformed: frame too large"}\n')
                    return
                body = _recv_exact(sock, length)
                if body is None:
                    return
                reply = self.accept(body)
                sock.sendall(json.dumps(reply, separators=(",", ":")).encode() + b"\n")
        except OSError:
            return
        finally:
            sock.close()

    def archive_path(self, vantage: str) -> str:
        return os.path.join(self._vantage_dir(vantage), "events.ndjson")
