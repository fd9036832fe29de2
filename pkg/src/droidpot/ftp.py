"""File transfer traps: a write-only FTP server and a WRQ-only TFTP server."""

from __future__ import annotations

import logging
import posixpath
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from .model import ftp_store, tftp_write
from .netio import LineReader, UdpService, send_text
from .store import ArtifactStore

log = logging.getLogger(__name__)

COMMAND_LIMIT = 1024
TRANSFER_LIMIT = 16 * 1024 * 1024
DATA_TIMEOUT = 30.0
TFTP_BLOCK = 512
TFTP_IDLE = 30.0

GREETING = "220 (vsFTPd 2.3.4)"
NEEDS_AUTH = {"SYST", "PWD", "XPWD", "CWD", "XCWD", "CDUP", "TYPE", "PASV", "LIST", "NLST", "STOR"}


# -- FTP --

class PassiveChannel:
    """Listening data socket for one PASV; accepts a single connection."""

    def __init__(self, host: str, ports=None, timeout: float = DATA_TIMEOUT):
        family = socket.AF_INET6 if ":" in host else socket.AF_INET
        self.timeout = timeout
        self.listener = socket.socket(family, socket.SOCK_STREAM)
        candidates = list(ports) if ports else [0]
        for port in candidates:
            try:
                self.listener.bind((host, port))
                break
            except OSError:
                continue
        else:
            self.listener.close()
            raise OSError("no free passive port")
        self.listener.listen(1)
        self.listener.settimeout(timeout)
        self.host = host
        self.port = self.listener.getsockname()[1]
        self._conn = None

    def _accept(self):
        if self._conn is None:
            self._conn, _ = self.listener.accept()
            self._conn.settimeout(self.timeout)
        return self._conn

    def send(self, data: bytes):
        conn = self._accept()
        if data:
            conn.sendall(data)

    def receive(self, limit: int) -> tuple[bytes, int]:
        """Read until EOF.  Returns (first *limit* bytes, total byte count)."""
        conn = self._accept()
        chunks, kept, total = [], 0, 0
        while True:
            data = conn.recv(65536)
            if not data:
                break
            total += len(data)
            if kept < limit:
                piece = data[: limit - kept]
                chunks.append(piece)
                kept += len(piece)
        return b"".join(chunks), total

    def close(self):
        for s in (self._conn, self.listener):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass


@dataclass
class FtpState:
    phase: str = "greeting"          # greeting -> need_pass -> authed
    username: str = ""
    cwd: str = "/"
    data_channel: object = None
    pending: tuple | None = None     # ("STOR", path) or ("LIST", "") awaiting transfer
    quit: bool = False
    open_channel: object = None      # callable returning a data channel
    pasv_address: str = "127.0.0.1"


def _pasv_reply(address: str, port: int) -> str:
    if ":" in address:
        address = "127.0.0.1"
    h = address.split(".")
    return f"227 Entering Passive Mode ({','.join(h)},{port >> 8},{port & 0xFF})."


def ftp_step(state: FtpState, line: str) -> tuple[list[str], FtpState]:
    """Advance the control connection by one command line.

    A STOR or LIST that is accepted answers 150 and leaves ``state.pending``
    set; the caller then runs :func:`ftp_transfer` to move the data and get
    the closing reply.
    """
    line = line[:COMMAND_LIMIT].strip()
    verb, _, arg = line.partition(" ")
    verb = verb.upper()
    arg = arg.strip()
    if verb == "QUIT":
        state.quit = True
        return ["221 Goodbye."], state
    if verb == "USER":
        state.username = arg
        state.phase = "need_pass"
        return ["331 Please specify the password."], state
    if verb == "PASS":
        if state.phase != "need_pass":
            return ["503 Login with USER first."], state
        state.phase = "authed"
        return ["230 Login successful."], state
    if verb in NEEDS_AUTH and state.phase != "authed":
        return ["530 Please login with USER and PASS."], state
    if verb == "SYST":
        return ["215 UNIX Type: L8"], state
    if verb in ("PWD", "XPWD"):
        return [f'257 "{state.cwd}" is the current directory'], state
    if verb in ("CWD", "XCWD", "CDUP"):
        target = ".." if verb == "CDUP" else (arg or "/")
        state.cwd = posixpath.normpath(posixpath.join(state.cwd, target)).replace("//", "/")
        if state.cwd.startswith("//"):
            state.cwd = state.cwd[1:]
        return ["250 Directory successfully changed."], state
    if verb == "TYPE":
        return [f"200 Switching to {'Binary' if arg.upper().startswith('I') else 'ASCII'} mode."], state
    if verb == "PASV":
        if state.data_channel is not None:
            state.data_channel.close()
            state.data_channel = None
        if state.open_channel is None:
            return ["425 Can't open passive connection."], state
        try:
            state.data_channel = state.open_channel()
        except OSError:
            return ["425 Can't open passive connection."], state
        return [_pasv_reply(state.pasv_address, state.data_channel.port)], state
    if verb in ("LIST", "NLST"):
        if state.data_channel is None:
            return ["425 Use PASV first."], state
        state.pending = ("LIST", "")
        return ["150 Here comes the directory listing."], state
    if verb == "STOR":
        if not arg:
            return ["501 Syntax error in parameters or arguments."], state
        if state.data_channel is None:
            return ["425 Use PASV first."], state
        path = posixpath.normpath(posixpath.join(state.cwd, arg))
        if path.startswith("//"):
            path = path[1:]
        state.pending = ("STOR", path)
        return ["150 Ok to send data."], state
    return ["502 Command not implemented."], state


def ftp_transfer(state: FtpState, store: ArtifactStore, session_id: str | None = None,
                 limit: int = TRANSFER_LIMIT):
    """Run the pending data transfer.  Returns (replies, state, artifact or None)."""
    kind, path = state.pending
    state.pending = None
    channel, state.data_channel = state.data_channel, None
    artifact = None
    try:
        if kind == "LIST":
            channel.send(b"")
            reply = "226 Directory send OK."
        else:
            data, total = channel.receive(limit + 1)
            if total > limit:
                reply = "552 Requested file action aborted. Exceeded storage allocation."
            else:
                artifact = store.put(data, ftp_store(path), session_id)
                reply = "226 Transfer complete."
    except OSError:
        reply = "426 Connection closed; transfer aborted."
    finally:
        channel.close()
    return [reply], state, artifact


class FtpTrap:
    """Control-connection handler driving :func:`ftp_step` over a socket."""

    def __init__(self, recorder, store: ArtifactStore, passive_ports=None,
                 idle_timeout: float = 300.0, data_timeout: float = DATA_TIMEOUT):
        self.recorder = recorder
        self.store = store
        self.passive_ports = passive_ports
        self.idle_timeout = idle_timeout
        self.data_timeout = data_timeout

    def handle(self, sock, addr):
        local = sock.getsockname()
        event = self.recorder.record_event("tcp", addr[0], addr[1], local[1], "ftp")
        transcript = self.recorder.open_session(event)
        state = FtpState(
            open_channel=lambda: PassiveChannel(local[0], self.passive_ports, self.data_timeout),
            pasv_address=local[0],
        )
        try:
            self._converse(sock, state, transcript)
        finally:
            if state.data_channel is not None:
                state.data_channel.close()
            self.recorder.close_session(transcript)
            try:
                sock.close()
            except OSError:
                pass

    def _converse(self, sock, state, transcript):
        reader = LineReader(sock, max_line=COMMAND_LIMIT, timeout=self.idle_timeout)
        if not send_text(sock, GREETING + "\r\n"):
            return
        while not state.quit:
            line = reader.readline()
            if line is None:
                return
            if not line.strip():
                continue
            was_need_pass = state.phase == "need_pass"
            replies, state = ftp_step(state, line)
            if line[:4].upper() == "PASS" and was_need_pass:
                transcript.add_login(state.username, line[5:], "granted")
            if state.pending is not None:
                send_text(sock, "\r\n".join(replies) + "\r\n")
                more, state, artifact = ftp_transfer(state, self.store, transcript.session_id)
                if artifact is not None:
                    transcript.add_artifact(artifact.digest)
                replies = replies + more
                if not send_text(sock, "\r\n".join(more) + "\r\n"):
                    return
            elif not send_text(sock, "\r\n".join(replies) + "\r\n"):
                return
            status = int(replies[-1][:3])
            transcript.add_command(line, "\n".join(replies), status)


# -- TFTP --

RRQ, WRQ, DATA, ACK, ERROR = 1, 2, 3, 4, 5
TFTP_ERRORS = {
    1: "File not found",
    3: "Disk full or allocation exceeded",
    4: "Illegal TFTP operation",
    5: "Unknown transfer ID",
}


def tftp_ack(block: int) -> bytes:
    return struct.pack("!HH", ACK, block)


def tftp_error(code: int, message: str | None = None) -> bytes:
    return struct.pack("!HH", ERROR, code) + (message or TFTP_ERRORS[code]).encode("ascii") + b"\0"


@dataclass
class TftpTransfer:
    filename: str
    mode: str
    blocks: int = 0
    complete: bool = False
    data: bytearray = field(default_factory=bytearray)
    last_seen: float = 0.0


class TftpTable:
    """Open transfers keyed by peer endpoint, with completion callback."""

    def __init__(self, store: ArtifactStore, clock=time.time, idle: float = TFTP_IDLE,
                 limit: int = TRANSFER_LIMIT):
        self.store = store
        self.clock = clock
        self.idle = idle
        self.limit = limit
        self.transfers: dict = {}
        self.completed: list = []
        self.lock = threading.Lock()

    def expire(self, now: float | None = None) -> int:
        now = self.clock() if now is None else now
        with self.lock:
            stale = [k for k, t in self.transfers.items() if now - t.last_seen > self.idle]
            for k in stale:
                del self.transfers[k]
        return len(stale)


def _parse_request(payload: bytes):
    fields = payload.split(b"\0")
    if len(fields) < 3 or not fields[0]:
        raise ValueError("malformed request")
    filename = fields[0].decode("latin-1")
    mode = fields[1].decode("latin-1").lower()
    if mode not in ("octet", "netascii"):
        raise ValueError(f"unsupported mode {mode}")
    return filename, mode


def tftp_handle(datagram: bytes, peer, table: TftpTable) -> bytes | None:
    """Process one datagram from *peer*; returns the reply datagram, if any."""
    if len(datagram) < 4:
        return tftp_error(4)
    opcode = struct.unpack("!H", datagram[:2])[0]
    now = table.clock()
    with table.lock:
        if opcode == RRQ:
            return tftp_error(1)
        if opcode == WRQ:
            try:
                filename, mode = _parse_request(datagram[2:])
            except ValueError:
                return tftp_error(4)
            table.transfers[peer] = TftpTransfer(filename, mode, last_seen=now)
            return tftp_ack(0)
        if opcode == DATA:
            transfer = table.transfers.get(peer)
            if transfer is None:
                return tftp_error(5)
            transfer.last_seen = now
            block = struct.unpack("!H", datagram[2:4])[0]
            payload = datagram[4:]
            if len(payload) > TFTP_BLOCK:
                del table.transfers[peer]
                return tftp_error(4)
            expected = (transfer.blocks + 1) & 0xFFFF
            if block != expected:
                return tftp_ack(transfer.blocks & 0xFFFF)
            if len(transfer.data) + len(payload) > table.limit:
                del table.transfers[peer]
                return tftp_error(3)
            transfer.data.extend(payload)
            transfer.blocks += 1
            if len(payload) < TFTP_BLOCK:
                transfer.complete = True
                del table.transfers[peer]
                artifact = table.store.put(bytes(transfer.data), tftp_write(transfer.filename))
                table.completed.append((peer, transfer, artifact))
            return tftp_ack(block)
        if opcode == ACK:
            return None
        if opcode == ERROR:
            table.transfers.pop(peer, None)
            return None
    return tftp_error(4)


class TftpTrap(UdpService):
    def __init__(self, recorder, store: ArtifactStore, host: str, port: int,
                 idle: float = TFTP_IDLE):
        super().__init__("tftp", host, port, self._on_datagram)
        self.recorder = recorder
        self.table = TftpTable(store, clock=recorder.clock, idle=idle)

    def _on_datagram(self, data, addr, sock):
        self.recorder.record_datagram(addr[0], addr[1], self.port, "tftp", len(data))
        reply = tftp_handle(data, (addr[0], addr[1]), self.table)
        if reply is not None:
            sock.sendto(reply, addr)

    def tick(self):
        self.table.expire()
        self.recorder.flows.expire(self.recorder.clock())
