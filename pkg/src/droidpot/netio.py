"""Socket plumbing shared by the trap services."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading

log = logging.getLogger(__name__)

IAC, DONT, DO, WONT, WILL, SB, SE = 255, 254, 253, 252, 251, 250, 240


class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    request_queue_size = 64

    def __init__(self, addr, service):
        self.service = service
        family = socket.AF_INET6 if ":" in addr[0] else socket.AF_INET
        self.address_family = family
        super().__init__(addr, _Handler)

    def handle_error(self, request, client_address):
        log.exception("%s: handler crashed for %s", self.service.name, client_address)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        svc = self.server.service
        svc._track(self.request, True)
        try:
            svc.handler(self.request, self.client_address)
        finally:
            svc._track(self.request, False)


class TcpService:
    """A threaded TCP listener calling ``handler(sock, addr)`` per connection."""

    def __init__(self, name: str, host: str, port: int, handler):
        self.name = name
        self.host = host
        self.requested_port = port
        self.handler = handler
        self._server: _TcpServer | None = None
        self._thread: threading.Thread | None = None
        self._active: set = set()
        self._lock = threading.Lock()

    def _track(self, sock, add: bool):
        with self._lock:
            (self._active.add if add else self._active.discard)(sock)

    @property
    def port(self) -> int:
        return self._server.server_address[1] if self._server else self.requested_port

    def start(self):
        self._server = _TcpServer((self.host, self.requested_port), self)
        self._thread = threading.Thread(target=self._server.serve_forever, args=(0.05,),
                                        name=f"{self.name}:{self.port}", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        if self._server is None:
            return
        self._server.shutdown()
        self._server.server_close()
        with self._lock:
            active = list(self._active)
        for sock in active:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self._server = None


class UdpService:
    """A UDP socket with one reader thread calling ``handler(data, addr, sock)``."""

    def __init__(self, name: str, host: str, port: int, handler, bufsize: int = 65535):
        self.name = name
        self.host = host
        self.requested_port = port
        self.handler = handler
        self.bufsize = bufsize
        self.sock: socket.socket | None = None
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()

    @property
    def port(self) -> int:
        return self.sock.getsockname()[1] if self.sock else self.requested_port

    def start(self):
        family = socket.AF_INET6 if ":" in self.host else socket.AF_INET
        sock = socket.socket(family, socket.SOCK_DGRAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.host, self.requested_port))
        sock.settimeout(0.5)
        self.sock = sock
        self._thread = threading.Thread(target=self._loop, name=f"{self.name}:{self.port}",
                                        daemon=True)
        self._thread.start()
        return self

    def _loop(self):
        while not self._stop.is_set():
            try:
                data, addr = self.sock.recvfrom(self.bufsize)
            except socket.timeout:
                self.tick()
                continue
            except OSError:
                break
            try:
                self.handler(data, addr, self.sock)
            except Exception:
                log.exception("%s: datagram handler crashed for %s", self.name, addr)

    def tick(self):
        """Called about twice a second while idle; subclasses expire state here."""

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
        if self.sock is not None:
            self.sock.close()
            self.sock = None


class LineReader:
    """Reads CR/LF terminated lines from a socket, stripping telnet option noise.

    Lines longer than ``max_line`` bytes are cut; the rest up to the newline
    is discarded.  ``readline`` returns None on EOF or idle timeout.
    """

    def __init__(self, sock, max_line: int = 8192, timeout: float | None = 300.0):
        self.sock = sock
        self.max_line = max_line
        self.buf = bytearray()
        self.raw_bytes = 0
        self._skip = False
        self._after_cr = False
        if timeout is not None:
            sock.settimeout(timeout)

    def _strip_telnet(self, data: bytes) -> bytes:
        out = bytearray()
        i = 0
        while i < len(data):
            b = data[i]
            if b != IAC:
                out.append(b)
                i += 1
                continue
            if i + 1 >= len(data):
                break
            cmd = data[i + 1]
            if cmd == IAC:
                out.append(IAC)
                i += 2
            elif cmd in (DO, DONT, WILL, WONT):
                i += 3
            elif cmd == SB:
                end = data.find(bytes([IAC, SE]), i)
                i = len(data) if end < 0 else end + 2
            else:
                i += 2
        return bytes(out)

    def readline(self) -> str | None:
        while True:
            if self._after_cr and self.buf[:1] in (b"\n", b"\x00"):
                del self.buf[:1]
            if self.buf:
                self._after_cr = False
            nl = self.buf.find(b"\n")
            cr = self.buf.find(b"\r")
            cut = min(x for x in (nl, cr) if x >= 0) if (nl >= 0 or cr >= 0) else -1
            if cut >= 0:
                line = bytes(self.buf[:cut])
                rest = self.buf[cut + 1:]
                if self.buf[cut:cut + 1] == b"\r":
                    if rest[:1] in (b"\n", b"\x00"):
                        rest = rest[1:]
                    elif not rest:
                        self._after_cr = True
                self.buf = bytearray(rest)
                if self._skip:
                    self._skip = False
                    line = b""
                    continue
                return line[: self.max_line].decode("utf-8", "replace")
            if len(self.buf) > self.max_line:
                if self._skip:
                    self.buf.clear()
                    continue
                line = bytes(self.buf[: self.max_line])
                self.buf.clear()
                self._skip = True
                return line.decode("utf-8", "replace")
            try:
                data = self.sock.recv(4096)
            except (socket.timeout, OSError):
                return None
            if not data:
                if self.buf and not self._skip:
                    line = bytes(self.buf[: self.max_line])
                    self.buf.clear()
                    return line.decode("utf-8", "replace")
                return None
            self.raw_bytes += len(data)
            self.buf.extend(self._strip_telnet(data))


def send_text(sock, text: str) -> bool:
    try:
        sock.sendall(text.encode("utf-8", "replace"))
        return True
    except OSError:
        return False
