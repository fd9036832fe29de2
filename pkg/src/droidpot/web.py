"""Web trap: a small media-server site with a permissive upload form."""

from __future__ import annotations

import html
import logging
import re
import urllib.parse
from dataclasses import asdict, dataclass, field

from . import vfs
from .model import format_ts, now_ms, web_upload
from .store import ArtifactStore

log = logging.getLogger(__name__)

HEADER_LIMIT = 16 * 1024
UPLOAD_LIMIT = 16 * 1024 * 1024
PREVIEW_LIMIT = 4 * 1024
UPLOAD_DIR = "/sdcard/upload"
SERVER_NAME = "Apache/2.2.22 (Unix)"
_KEPT_HEADERS = ("host", "user-agent", "content-length")
_SAFE_NAME = re.compile(r"[^A-Za-z0-9._-]")

REASONS = {200: "OK", 400: "Bad Request", 404: "Not Found", 405: "Method Not Allowed",
           413: "Request Entity Too Large", 500: "Internal Server Error"}


class BadRequest(ValueError):
    pass


class UploadError(ValueError):
    def __init__(self, status: int, message: str):
        self.status = status
        super().__init__(message)


@dataclass
class HttpRequest:
    method: str
    target: str
    version: str
    headers: dict
    body: bytes = b""

    @property
    def path(self) -> str:
        return urllib.parse.urlsplit(self.target).path or "/"

    @property
    def query(self) -> str:
        return urllib.parse.urlsplit(self.target).query

    @property
    def keep_alive(self) -> bool:
        conn = self.headers.get("connection", "").lower()
        if self.version == "HTTP/1.0":
            return conn == "keep-alive"
        return conn != "close"


@dataclass
class HttpResponse:
    status: int
    body: bytes = b""
    content_type: str = "text/html; charset=utf-8"
    close: bool = False

    def encode(self, keep_alive: bool) -> bytes:
        head = [
            f"HTTP/1.1 {self.status} {REASONS.get(self.status, 'OK')}",
            f"Server: {SERVER_NAME}",
            f"Content-Type: {self.content_type}",
            f"Content-Length: {len(self.body)}",
            "Connection: " + ("keep-alive" if keep_alive and not self.close else "close"),
        ]
        return ("\r\n".join(head) + "\r\n\r\n").encode("ascii") + self.body


@dataclass
class HttpRequestRecord:
    method: str
    path: str
    query: str
    headers: dict
    body_size: int
    ts: str
    src_ip: str
    src_port: int
    response_status: int = 0
    virtual_path: str = "/"
    traversal_attempt: bool = False
    body_preview: str = ""
    session: str | None = None
    upload: str | None = None
    credentials: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if not d["extra"]:
            del d["extra"]
        return d


def parse_head(raw: bytes) -> HttpRequest:
    """Parse a request line plus headers (without the blank line)."""
    try:
        text = raw.decode("iso-8859-1")
    except UnicodeDecodeError as exc:  # pragma: no cover - latin-1 decodes anything
        raise BadRequest("undecodable") from exc
    lines = text.split("\r\n") if "\r\n" in text else text.split("\n")
    parts = lines[0].split(" ")
    if len(parts) != 3:
        raise BadRequest("bad request line")
    method, target, version = parts
    if not re.fullmatch(r"[A-Z]{1,16}", method) or version not in ("HTTP/1.0", "HTTP/1.1"):
        raise BadRequest("bad request line")
    if not target or not (target.startswith("/") or target.startswith("http")):
        raise BadRequest("bad request target")
    headers = {}
    for line in lines[1:]:
        if not line:
            continue
        name, sep, value = line.partition(":")
        if not sep or not name or name != name.strip():
            raise BadRequest("bad header line")
        headers[name.lower()] = value.strip()
    return HttpRequest(method, target, version, headers)


def virtual_path(raw_path: str) -> tuple[str, bool]:
    """Map a request path into the site root.  Returns (path, traversal attempted)."""
    decoded = raw_path
    for _ in range(3):
        step = urllib.parse.unquote(decoded)
        if step == decoded:
            break
        decoded = step
    decoded = decoded.replace("\\", "/")
    traversal = ".." in decoded.split("/")
    return vfs.normalize(decoded), traversal


def sanitize_filename(name: str) -> str:
    name = name.replace("\\", "/").rsplit("/", 1)[-1]
    clean = _SAFE_NAME.sub("", name)
    if clean in ("", ".", ".."):
        return "upload.bin"
    return clean


def parse_multipart(body: bytes, content_type: str) -> dict:
    """Split a multipart/form-data body into {field: (filename or None, bytes)}."""
    m = re.search(r'boundary="?([^";]+)"?', content_type or "", re.I)
    if not content_type.lower().startswith("multipart/form-data") or not m:
        raise UploadError(400, "not multipart/form-data")
    delim = b"--" + m.group(1).encode("latin-1")
    parts = {}
    chunks = body.split(delim)
    if len(chunks) < 3:
        raise UploadError(400, "no parts")
    for chunk in chunks[1:]:
        if chunk.startswith(b"--"):
            break
        if chunk.startswith(b"\r\n"):
            chunk = chunk[2:]
        head, sep, data = chunk.partition(b"\r\n\r\n")
        if not sep:
            continue
        if data.endswith(b"\r\n"):
            data = data[:-2]
        disposition = ""
        for line in head.decode("latin-1").split("\r\n"):
            key, _, value = line.partition(":")
            if key.strip().lower() == "content-disposition":
                disposition = value
        name = re.search(r'\bname="([^"]*)"', disposition)
        if not name:
            continue
        filename = re.search(r'\bfilename="([^"]*)"', disposition)
        parts.setdefault(name.group(1), (filename.group(1) if filename else None, data))
    return parts


def _page(title: str, body: str) -> bytes:
    return (f"<!DOCTYPE html>\n<html><head><title>{title}</title></head>\n"
            f"<body>\n{body}\n</body></html>\n").encode("utf-8")


INDEX_PAGE = _page("Media Server", """<h1>Media Server</h1>
<p>Share photos, music and videos from your phone.</p>
<ul>
<li><a href="/upload">Upload files</a></li>
<li><a href="/admin">Administration</a></li>
</ul>""")

UPLOAD_FORM = _page("Upload", """<h1>Upload a file</h1>
<form action="/upload" method="post" enctype="multipart/form-data">
<input type="file" name="file">
<input type="submit" value="Upload">
</form>""")

ADMIN_FORM = _page("Administration", """<h1>Administration</h1>
<form action="/admin" method="post">
<input type="text" name="username"> <input type="password" name="password">
<input type="submit" value="Login">
</form>""")


class WebSession:
    """Per-connection state: an overlay view of the phone and the transcript."""

    def __init__(self, fs: vfs.OverlayFs, store: ArtifactStore, transcript=None):
        self.fs = fs
        self.store = store
        self.transcript = transcript
        self.artifacts = []


def store_upload(parts: dict, session: WebSession):
    """Capture the ``file`` part: blob into the store, file into the overlay.

    Returns (artifact, virtual path).
    """
    if "file" not in parts:
        raise UploadError(400, "missing file part")
    filename, data = parts["file"]
    if len(data) > UPLOAD_LIMIT:
        raise UploadError(413, "upload too large")
    name = sanitize_filename(filename or "")
    sid = session.transcript.session_id if session.transcript else None
    artifact = session.store.put(data, web_upload("file", name), sid)
    path = f"{UPLOAD_DIR}/{name}"
    session.fs.mkdir(UPLOAD_DIR, parents=True)
    session.fs.write_file(path, data)
    if session.transcript is not None:
        session.transcript.add_artifact(artifact.digest)
    session.artifacts.append(artifact)
    return artifact, path


def serve_request(request: HttpRequest, session: WebSession, record: HttpRequestRecord) -> HttpResponse:
    """Answer one parsed request, filling in *record* as a side effect."""
    path, traversal = virtual_path(request.path)
    record.virtual_path = path
    record.traversal_attempt = traversal
    method = request.method
    if path == "/" or path == "/index.html":
        return HttpResponse(200, INDEX_PAGE)
    if path == "/upload":
        if method in ("GET", "HEAD"):
            return HttpResponse(200, UPLOAD_FORM)
        if method != "POST":
            return HttpResponse(405, _page("405 Method Not Allowed", "<h1>Method Not Allowed</h1>"))
        try:
            parts = parse_multipart(request.body, request.headers.get("content-type", ""))
            artifact, stored = store_upload(parts, session)
        except UploadError as exc:
            return HttpResponse(exc.status, _page(f"{exc.status} {REASONS[exc.status]}",
                                                  f"<h1>{REASONS[exc.status]}</h1>"))
        record.upload = artifact.digest
        return HttpResponse(200, _page("Upload complete",
                                       f"<h1>Upload complete</h1>\n<p>Stored as {html.escape(stored)}</p>"))
    if path == "/admin":
        if method == "POST":
            form = urllib.parse.parse_qs(request.body.decode("latin-1"), keep_blank_values=True)
            record.credentials = {
                "username": form.get("username", [""])[0],
                "password": form.get("password", [""])[0],
            }
            return HttpResponse(200, _page("Administration",
                                           "<h1>Administration</h1>\n<p>Invalid username or password.</p>"))
        return HttpResponse(200, ADMIN_FORM)
    shown = html.escape(path)
    return HttpResponse(404, _page("404 Not Found", f"<h1>Not Found</h1>\n<p>The requested URL {shown} "
                                                    "was not found on this server.</p>"))


class WebTrap:
    """Connection handler: one attack event per connection, keep-alive aware."""

    def __init__(self, recorder, base: vfs.FsImage, store: ArtifactStore, request_log=None,
                 idle_timeout: float = 30.0, max_requests: int = 100):
        self.recorder = recorder
        self.base = base
        self.store = store
        self.request_log = request_log
        self.idle_timeout = idle_timeout
        self.max_requests = max_requests

    def handle(self, sock, addr):
        dst_port = sock.getsockname()[1]
        event = self.recorder.record_event("tcp", addr[0], addr[1], dst_port, "web")
        transcript = self.recorder.open_session(event)
        session = WebSession(vfs.OverlayFs(self.base, clock=self.recorder.clock), self.store, transcript)
        sock.settimeout(self.idle_timeout)
        try:
            self._serve(sock, event, session)
        finally:
            self.recorder.close_session(transcript)
            try:
                sock.close()
            except OSError:
                pass

    def _record(self, event, req: HttpRequest | None, body_size: int, body: bytes) -> HttpRequestRecord:
        headers = {}
        if req is not None:
            headers = {k: req.headers[k] for k in _KEPT_HEADERS if k in req.headers}
        return HttpRequestRecord(
            method=req.method if req else "-",
            path=req.path if req else "-",
            query=req.query if req else "",
            headers=headers,
            body_size=body_size,
            ts=format_ts(now_ms(self.recorder.clock)),
            src_ip=event.src_ip,
            src_port=event.src_port,
            session=event.session_id,
            body_preview=body[:PREVIEW_LIMIT].decode("utf-8", "replace"),
        )

    def _finish(self, session, record, response, keep_alive, sock) -> bool:
        record.response_status = response.status
        d = record.to_dict()
        if session.transcript is not None:
            session.transcript.add_request(d)
        if self.request_log is not None:
            self.request_log.append(d)
        try:
            sock.sendall(response.encode(keep_alive))
        except OSError:
            return False
        return keep_alive and not response.close

    def _serve(self, sock, event, session):
        buf = b""
        for _ in range(self.max_requests):
            head, buf, status = self._read_head(sock, buf)
            if status == "eof":
                return
            if status == "toolarge":
                record = self._record(event, None, 0, b"")
                resp = HttpResponse(400, _page("400 Bad Request", "<h1>Bad Request</h1>"), close=True)
                self._finish(session, record, resp, False, sock)
                return
            try:
                req = parse_head(head)
            except BadRequest:
                record = self._record(event, None, 0, b"")
                resp = HttpResponse(400, _page("400 Bad Request", "<h1>Bad Request</h1>"), close=True)
                self._finish(session, record, resp, False, sock)
                return
            try:
                length = int(req.headers.get("content-length", "0") or 0)
                if length < 0:
                    raise ValueError
            except ValueError:
                record = self._record(event, req, 0, b"")
                self._finish(session, record, HttpResponse(400, _page("400 Bad Request", "<h1>Bad Request</h1>"),
                                                           close=True), False, sock)
                return
            if length > UPLOAD_LIMIT + 64 * 1024:
                record = self._record(event, req, length, b"")
                resp = HttpResponse(413, _page("413 Request Entity Too Large",
                                               "<h1>Request Entity Too Large</h1>"), close=True)
                self._finish(session, record, resp, False, sock)
                return
            body, buf = self._read_body(sock, buf, length)
            if body is None:
                return
            req.body = body
            record = self._record(event, req, len(body), body)
            try:
                resp = serve_request(req, session, record)
            except Exception:
                log.exception("web request crashed")
                resp = HttpResponse(500, _page("500 Internal Server Error", "<h1>Internal Server Error</h1>"),
                                    close=True)
            if req.method == "HEAD":
                resp = HttpResponse(resp.status, b"", resp.content_type, resp.close)
            if not self._finish(session, record, resp, req.keep_alive, sock):
                return

    def _read_head(self, sock, buf: bytes):
        while True:
            end = buf.find(b"\r\n\r\n")
            sep = 4
            if end < 0:
                end = buf.find(b"\n\n")
                sep = 2
            if end >= 0:
                if end > HEADER_LIMIT:
                    return b"", b"", "toolarge"
                return buf[:end], buf[end + sep:], "ok"
            if len(buf) > HEADER_LIMIT:
                return b"", b"", "toolarge"
            try:
                data = sock.recv(65536)
            except OSError:
                data = b""
            if not data:
                if buf.strip():
                    return buf, b"", "ok"
                return b"", b"", "eof"
            buf += data

    def _read_body(self, sock, buf: bytes, length: int):
        chunks = [buf[:length]]
        have = len(chunks[0])
        rest = buf[length:]
        while have < length:
            try:
                data = sock.recv(min(1 << 20, length - have))
            except OSError:
                return None, b""
            if not data:
                return None, b""
            chunks.append(data)
            have += len(data)
        return b"".join(chunks), rest
