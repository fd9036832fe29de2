"""Android-shaped virtual filesystem with per-session copy-on-write overlays.

The base image is loaded once from a JSON manifest and never changes.  Each
attacker session gets an :class:`OverlayFs` whose delta map shadows the base:
writes land in the delta, removals leave tombstones.  Nothing here touches
the host filesystem.
"""

from __future__ import annotations

import base64
import json
import posixpath
import stat
import time
from collections import deque
from dataclasses import dataclass, replace
from importlib import resources
from types import MappingProxyType

MAX_SYMLINK_DEPTH = 16
DELTA_LIMIT = 64 * 1024 * 1024
# 2012-11-01T00:00:00Z
FIXED_EPOCH = 1351728000.0

# Base-image binaries that may "run": everything the shell trap emulates.
EMULATED_COMMANDS = frozenset({
    "ls", "cd", "pwd", "cat", "echo", "uname", "id", "whoami", "hostname", "ps",
    "mkdir", "rm", "cp", "mv", "chmod", "touch", "wget", "curl", "tar", "unzip",
    "history", "uptime", "w", "exit", "su", "sh",
})

KINDS = ("dir", "file", "symlink")


class FsError(OSError):
    """Base for emulated filesystem errors; ``str()`` is shell-ready text."""

    message = "I/O error"

    def __init__(self, path: str = "", message: str | None = None):
        self.path = path
        super().__init__(message or self.message)

    def __str__(self):
        return self.args[0]


class NotFound(FsError):
    message = "No such file or directory"


class NotADirectory(FsError):
    message = "Not a directory"


class IsADirectory(FsError):
    message = "Is a directory"


class DirectoryNotEmpty(FsError):
    message = "Directory not empty"


class FileExists(FsError):
    message = "File exists"


class SymlinkLoop(FsError):
    message = "Too many levels of symbolic links"


class NoSpace(FsError):
    message = "No space left on device"


class Refused(FsError):
    message = "Operation not permitted"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class FsNode:
    name: str
    kind: str
    content: bytes = b""
    target: str = ""
    mode: int = 0o755
    owner: str = "root"
    mtime: float = FIXED_EPOCH
    session_created: bool = False

    @property
    def is_dir(self):
        return self.kind == "dir"

    @property
    def size(self) -> int:
        if self.kind == "file":
            return len(self.content)
        if self.kind == "symlink":
            return len(self.target)
        return 4096


@dataclass(frozen=True)
class ExecDecision:
    allowed: bool
    reason: str = ""


ALLOWED = ExecDecision(True)


def denied(reason="permission denied") -> ExecDecision:
    return ExecDecision(False, reason)


def normalize(path: str, cwd: str = "/") -> str:
    """Lexical normalization to an absolute path; ``..`` never climbs above /."""
    if not path.startswith("/"):
        path = cwd.rstrip("/") + "/" + path
    parts: list[str] = []
    for comp in path.split("/"):
        if comp in ("", "."):
            continue
        if comp == "..":
            if parts:
                parts.pop()
            continue
        parts.append(comp)
    return "/" + "/".join(parts)


def _join(parent: str, name: str) -> str:
    return parent.rstrip("/") + "/" + name


def _parent(path: str) -> str:
    return posixpath.dirname(path) or "/"


class FsImage:
    """Immutable base image: canonical path -> node, plus child listings."""

    def __init__(self, nodes: dict, manifest_version: str = ""):
        children: dict[str, list] = {}
        for path in nodes:
            if path != "/":
                children.setdefault(_parent(path), []).append(nodes[path].name)
        self.nodes = MappingProxyType(dict(nodes))
        self.children = MappingProxyType({k: tuple(sorted(v)) for k, v in children.items()})
        self.manifest_version = manifest_version

    @property
    def root(self) -> FsNode:
        return self.nodes["/"]

    def __contains__(self, path):
        return path in self.nodes

    def __len__(self):
        return len(self.nodes)


def _parse_mode(value, kind) -> int:
    if value is None:
        return {"dir": 0o755, "file": 0o644, "symlink": 0o777}[kind]
    if isinstance(value, int):
        return value
    return int(str(value), 8)


def load_base_image(manifest) -> FsImage:
    """Build an image from a manifest document.

    The manifest is either an array of entries or an object
    ``{"version": ..., "entries": [...]}``.  Each entry has ``path``, ``kind``
    and optionally ``mode`` (int or octal string), ``owner``, ``content_b64``
    and ``target``.  Missing parent directories are implied.
    """
    if isinstance(manifest, (str, bytes)):
        manifest = json.loads(manifest)
    version = ""
    entries = manifest
    if isinstance(manifest, dict):
        version = str(manifest.get("version", ""))
        entries = manifest.get("entries", [])
    if not isinstance(entries, list):
        raise ManifestError("manifest must be an array of entries")

    nodes: dict[str, FsNode] = {"/": FsNode(name="", kind="dir", mode=0o755)}
    explicit: set[str] = set()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "path" not in entry:
            raise ManifestError(f"entry {i}: missing path")
        raw = str(entry["path"])
        if not raw.startswith("/"):
            raise ManifestError(f"relative path: {raw}")
        path = normalize(raw)
        kind = entry.get("kind", "file")
        if kind not in KINDS:
            raise ManifestError(f"{raw}: unknown kind {kind!r}")
        if path in explicit:
            raise ManifestError(f"duplicate path: {path}")
        if path == "/":
            if kind != "dir":
                raise ManifestError("/ must be a directory")
            explicit.add(path)
            continue
        explicit.add(path)
        try:
            content = base64.b64decode(entry.get("content_b64", ""), validate=True)
        except ValueError as exc:
            raise ManifestError(f"{raw}: bad content_b64") from exc
        try:
            mode = _parse_mode(entry.get("mode"), kind)
        except ValueError as exc:
            raise ManifestError(f"{raw}: bad mode {entry.get('mode')!r}") from exc
        if kind == "symlink" and not entry.get("target"):
            raise ManifestError(f"{raw}: symlink without target")
        # implied parents
        parent = _parent(path)
        missing = []
        while parent not in nodes:
            missing.append(parent)
            parent = _parent(parent)
        if nodes[parent].kind != "dir":
            raise ManifestError(f"{raw}: parent {parent} is not a directory")
        for p in reversed(missing):
            nodes[p] = FsNode(name=posixpath.basename(p), kind="dir")
        if path in nodes:
            # an implied directory made explicit later
            if kind != "dir" or nodes[path].kind != "dir":
                raise ManifestError(f"{raw}: conflicts with an implied directory")
        nodes[path] = FsNode(
            name=posixpath.basename(path),
            kind=kind,
            content=content if kind == "file" else b"",
            target=str(entry.get("target", "")) if kind == "symlink" else "",
            mode=mode,
            owner=str(entry.get("owner", "root")),
        )
    return FsImage(nodes, version)


def load_manifest_file(path=None) -> FsImage:
    """Load a manifest from *path*, or the bundled Android 4.x layout."""
    if path is None:
        text = resources.files("droidpot").joinpath("data/android-4.x.json").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    try:
        return load_base_image(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest does not parse: {exc}") from exc


_TOMBSTONE = None


class OverlayFs:
    """One session's view: the shared base image under a private delta."""

    def __init__(self, base: FsImage, cwd: str = "/", limit: int = DELTA_LIMIT,
                 clock=time.time):
        self.base = base
        self.delta: dict[str, FsNode | None] = {}
        self._delta_children: dict[str, set] = {}
        self.cwd = cwd
        self.limit = limit
        self.clock = clock
        self.used = 0

    # -- raw node access (canonical paths, no symlink following) --

    def _node(self, path: str) -> FsNode | None:
        if path in self.delta:
            return self.delta[path]
        return self.base.nodes.get(path)

    def _set(self, path: str, node: FsNode | None):
        old = self.delta.get(path)
        if old is not None and old.kind == "file":
            self.used -= len(old.content)
        if node is None and path not in self.base.nodes:
            self.delta.pop(path, None)
            kids = self._delta_children.get(_parent(path))
            if kids is not None:
                kids.discard(path.rsplit("/", 1)[1])
            return
        self.delta[path] = node
        if path != "/":
            self._delta_children.setdefault(_parent(path), set()).add(path.rsplit("/", 1)[1])
        if node is not None and node.kind == "file":
            self.used += len(node.content)

    # -- path resolution --

    def lookup(self, path: str, follow: bool = True) -> tuple[str, FsNode]:
        """Resolve *path* to (canonical path, node).

        Symlinks are followed (the last component only if *follow*), to a
        depth of 16.
        """
        if not path:
            raise NotFound(path)
        if path.startswith("/"):
            parts: list[str] = []
        else:
            parts = [p for p in self.cwd.split("/") if p]
        todo = deque(path.split("/"))
        hops = 0
        node = self._node("/")
        while todo:
            comp = todo.popleft()
            if comp in ("", "."):
                continue
            if comp == "..":
                if parts:
                    parts.pop()
                node = self._node("/" + "/".join(parts))
                continue
            current = "/" + "/".join(parts + [comp])
            node = self._node(current)
            if node is None:
                raise NotFound(path)
            more = bool(todo)
            if node.kind == "symlink" and (more or follow):
                hops += 1
                if hops > MAX_SYMLINK_DEPTH:
                    raise SymlinkLoop(path)
                target = node.target
                if target.startswith("/"):
                    parts = []
                todo.extendleft(reversed(target.split("/")))
                node = self._node("/" + "/".join(parts))
                continue
            if node.kind == "file" and more:
                raise NotADirectory(path)
            parts.append(comp)
        canon = "/" + "/".join(parts)
        node = self._node(canon)
        if node is None:
            raise NotFound(path)
        return canon, node

    def resolve(self, path: str, follow: bool = True) -> FsNode:
        return self.lookup(path, follow)[1]

    def exists(self, path: str) -> bool:
        try:
            self.lookup(path)
            return True
        except FsError:
            return False

    def _parent_of(self, path: str) -> tuple[str, str]:
        """Canonical parent directory and final name for a path to create."""
        stripped = path.rstrip("/")
        if not stripped:
            raise IsADirectory(path)
        head, _, name = stripped.rpartition("/")
        if name in (".", ".."):
            raise IsADirectory(path)
        if not path.startswith("/"):
            head = head if "/" in stripped else "."
        elif not head:
            head = "/"
        try:
            canon, node = self.lookup(head)
        except NotFound as exc:
            raise NotFound(path) from exc
        if node.kind != "dir":
            raise NotADirectory(path)
        return canon, name

    def listdir(self, path: str = ".") -> list[str]:
        canon, node = self.lookup(path)
        if node.kind != "dir":
            raise NotADirectory(path)
        return self._children(canon)

    def _children(self, canon: str) -> list[str]:
        names = set(self.base.children.get(canon, ()))
        names |= self._delta_children.get(canon, set())
        return sorted(n for n in names if self._node(_join(canon, n)) is not None)

    def walk(self, canon: str):
        """Yield canonical paths of the visible subtree under *canon*, parents first."""
        yield canon
        node = self._node(canon)
        if node is not None and node.kind == "dir":
            for name in self._children(canon):
                yield from self.walk(_join(canon, name))

    # -- mutations (delta only) --

    def _check_space(self, path: str, new_size: int):
        old = self.delta.get(path)
        old_size = len(old.content) if old is not None and old.kind == "file" else 0
        if self.used - old_size + new_size > self.limit:
            raise NoSpace(path)

    def write_file(self, path: str, data: bytes, mode: int | None = None) -> FsNode:
        try:
            canon, existing = self.lookup(path)
        except NotFound:
            parent, name = self._parent_of(path)
            canon, existing = _join(parent, name), None
        if existing is not None and existing.kind == "dir":
            raise IsADirectory(path)
        data = bytes(data)
        self._check_space(canon, len(data))
        if mode is None:
            mode = existing.mode if existing is not None else 0o644
        node = FsNode(
            name=posixpath.basename(canon), kind="file", content=data, mode=mode,
            owner="root", mtime=self.clock(), session_created=True,
        )
        self._set(canon, node)
        return node

    def append_file(self, path: str, data: bytes) -> FsNode:
        try:
            old = self.resolve(path)
            prefix = old.content if old.kind == "file" else b""
        except NotFound:
            prefix = b""
        return self.write_file(path, prefix + data)

    def mkdir(self, path: str, parents: bool = False) -> FsNode:
        if parents:
            canon = normalize(path, self.cwd)
            built = "/"
            node = self._node("/")
            for comp in canon.strip("/").split("/"):
                if not comp:
                    continue
                built = _join(built, comp)
                try:
                    built, node = self.lookup(built)
                except NotFound:
                    node = self._make_dir(built)
                    continue
                if node.kind != "dir":
                    raise NotADirectory(path)
            return node
        if self.exists(path):
            raise FileExists(path)
        parent, name = self._parent_of(path)
        return self._make_dir(_join(parent, name))

    def _make_dir(self, canon: str) -> FsNode:
        node = FsNode(name=posixpath.basename(canon), kind="dir", mode=0o755,
                      mtime=self.clock(), session_created=True)
        self._set(canon, node)
        return node

    def remove(self, path: str, recursive: bool = False):
        canon, node = self.lookup(path, follow=False)
        if canon == "/":
            raise Refused(path)
        if node.kind == "dir" and self._children(canon):
            if not recursive:
                raise DirectoryNotEmpty(path)
        for p in reversed(list(self.walk(canon))):
            self._set(p, _TOMBSTONE)

    def copy(self, src: str, dst: str, recursive: bool = False) -> str:
        src_canon, node = self.lookup(src)
        if node.kind == "dir" and not recursive:
            raise IsADirectory(src)
        dst_canon = self._target_path(dst, src_canon)
        if node.kind == "dir" and (dst_canon + "/").startswith(src_canon + "/"):
            raise Refused(dst)
        for p in list(self.walk(src_canon)):
            n = self._node(p)
            new = dst_canon + p[len(src_canon):]
            if n.kind == "dir":
                if self._node(new) is None:
                    self._set(new, replace(n, name=posixpath.basename(new), session_created=True,
                                           mtime=self.clock()))
            else:
                self._check_space(new, len(n.content))
                self._set(new, replace(n, name=posixpath.basename(new), session_created=True,
                                       mtime=self.clock()))
        return dst_canon

    def rename(self, src: str, dst: str) -> str:
        src_canon, node = self.lookup(src, follow=False)
        if src_canon == "/":
            raise Refused(src)
        dst_canon = self._target_path(dst, src_canon)
        if dst_canon == src_canon:
            return dst_canon
        if node.kind == "dir" and (dst_canon + "/").startswith(src_canon + "/"):
            raise Refused(dst)
        moved = [(p, self._node(p)) for p in self.walk(src_canon)]
        for p, _ in reversed(moved):
            self._set(p, _TOMBSTONE)
        for p, n in moved:
            new = dst_canon + p[len(src_canon):]
            # moved content keeps its provenance
            self._set(new, replace(n, name=posixpath.basename(new)))
        return dst_canon

    def _target_path(self, dst: str, src_canon: str) -> str:
        try:
            canon, node = self.lookup(dst)
            if node.kind == "dir":
                return _join(canon, posixpath.basename(src_canon))
            return canon
        except NotFound:
            parent, name = self._parent_of(dst)
            return _join(parent, name)

    def chmod(self, path: str, mode: int) -> FsNode:
        canon, node = self.lookup(path)
        new = replace(node, mode=mode & 0o7777)
        self._set(canon, new)
        return new

    def touch(self, path: str) -> FsNode:
        try:
            canon, node = self.lookup(path)
        except NotFound:
            return self.write_file(path, b"")
        new = replace(node, mtime=self.clock())
        self._set(canon, new)
        return new

    def chdir(self, path: str) -> str:
        canon, node = self.lookup(path)
        if node.kind != "dir":
            raise NotADirectory(path)
        self.cwd = canon
        return canon


def resolve(fs: OverlayFs, path: str) -> FsNode:
    return fs.resolve(path)


def write_file(fs: OverlayFs, path: str, data: bytes) -> FsNode:
    return fs.write_file(path, data)


def remove(fs: OverlayFs, path: str, recursive: bool = False):
    fs.remove(path, recursive)


def exec_check(fs: OverlayFs, path: str, whitelist=EMULATED_COMMANDS) -> ExecDecision:
    """May the file at *path* "run"?

    Anything the session created is denied.  Base files are allowed only when
    they are executables for a command the shell knows how to emulate.
    """
    canon, node = fs.lookup(path)
    if node.session_created:
        return denied()
    if node.kind != "file":
        return denied()
    if canon not in fs.base.nodes or fs.base.nodes[canon].session_created:
        return denied()
    if not node.mode & (stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH):
        return denied()
    if posixpath.basename(canon) not in whitelist:
        return denied()
    return ALLOWED
