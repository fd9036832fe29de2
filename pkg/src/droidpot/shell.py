"""Terminal trap: trivial logins into an emulated rooted Android shell.

The interpreter is transport-agnostic (one line in, text out).  The bundled
transport is a telnet-style TCP listener.  Everything an attacker does lands
in a copy-on-write overlay that dies with the session; downloaded files are
captured into the artifact store but can never be executed.
"""

from __future__ import annotations

import enum
import io
import json
import logging
import posixpath
import re
import shlex
import tarfile
import time
import urllib.error
import urllib.parse
import urllib.request
import zipfile
from dataclasses import dataclass, field
from fnmatch import fnmatch
from importlib import resources

from . import vfs
from .model import SessionTranscript, shell_download
from .netio import LineReader, send_text
from .store import ArtifactStore

log = logging.getLogger(__name__)

MAX_LINE = 8192
FETCH_TIMEOUT = 30.0
FETCH_LIMIT = 16 * 1024 * 1024
BUILTINS = ("cd", "pwd", "echo", "history", "exit", "logout")
DEFAULT_CREDENTIALS = (("root", "1234"), ("root", "root"))


class LoginOutcome(str, enum.Enum):
    GRANTED = "granted"
    REJECTED = "rejected"
    GRANTED_BY_ATTEMPT_QUOTA = "granted_by_attempt_quota"

    @property
    def granted(self) -> bool:
        return self is not LoginOutcome.REJECTED


@dataclass(frozen=True)
class CredentialPolicy:
    accepted: tuple = DEFAULT_CREDENTIALS
    accept_after_attempts: int = 3

    def __post_init__(self):
        object.__setattr__(self, "accepted", tuple(tuple(p) for p in self.accepted))
        if self.accept_after_attempts < 0:
            raise ValueError("accept_after_attempts must be >= 0")


def handle_login(attempt, policy: CredentialPolicy, attempt_index: int) -> LoginOutcome:
    """Decide one login attempt; ``attempt_index`` counts from 1 per connection."""
    if attempt_index < 1:
        raise ValueError("attempt_index starts at 1")
    if tuple(attempt) in policy.accepted:
        return LoginOutcome.GRANTED
    if policy.accept_after_attempts and attempt_index == policy.accept_after_attempts:
        return LoginOutcome.GRANTED_BY_ATTEMPT_QUOTA
    return LoginOutcome.REJECTED


def load_persona(path=None) -> dict:
    if path is None:
        text = resources.files("droidpot").joinpath("data/persona.json").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return json.loads(text)


class FetchError(Exception):
    """Download failed; ``kind`` is one of unreachable, timeout, oversize, invalid."""

    def __init__(self, kind: str, url: str, detail: str = ""):
        self.kind = kind
        self.url = url
        super().__init__(f"{kind}: {url} {detail}".strip())


class Fetcher:
    """Retrieves attacker-supplied URLs.

    ``stub`` mode serves bytes from a URL -> bytes map and never touches the
    network.  ``live`` mode fetches for real, but only from hosts matching
    ``allowlist`` patterns, with a timeout and a size cap.  ``off`` fails
    every download as unreachable.
    """

    def __init__(self, mode: str = "stub", stub: dict | None = None, allowlist=(),
                 timeout: float = FETCH_TIMEOUT, max_bytes: int = FETCH_LIMIT):
        if mode not in ("stub", "live", "off"):
            raise ValueError(f"unknown fetch mode {mode!r}")
        self.mode = mode
        self.stub = dict(stub or {})
        self.allowlist = tuple(allowlist)
        self.timeout = timeout
        self.max_bytes = max_bytes

    def fetch(self, url: str) -> bytes:
        parts = urllib.parse.urlsplit(url)
        if parts.scheme not in ("http", "https", "ftp") or not parts.hostname:
            raise FetchError("invalid", url)
        if self.mode == "stub":
            if url not in self.stub:
                raise FetchError("unreachable", url)
            data = self.stub[url]
            if len(data) > self.max_bytes:
                raise FetchError("oversize", url)
            return bytes(data)
        if self.mode == "off":
            raise FetchError("unreachable", url)
        if not any(fnmatch(parts.hostname, pattern) for pattern in self.allowlist):
            raise FetchError("unreachable", url, "host not in allowlist")
        try:
            with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                data = resp.read(self.max_bytes + 1)
        except TimeoutError as exc:
            raise FetchError("timeout", url) from exc
        except (urllib.error.URLError, OSError, ValueError) as exc:
            if "timed out" in str(exc):
                raise FetchError("timeout", url) from exc
            raise FetchError("unreachable", url, str(exc)) from exc
        if len(data) > self.max_bytes:
            raise FetchError("oversize", url)
        return data


def default_target_name(url: str) -> str:
    name = posixpath.basename(urllib.parse.urlsplit(url).path)
    return name or "index.html"


def capture_download(url: str, session: "ShellSession", target: str | None = None):
    """Fetch *url*, store it content-addressed and drop it into the overlay.

    Returns the artifact.  The blob is kept even if writing the overlay file
    fails, since the payload is what we are after.  Raises FetchError; the
    attempt is recorded in the transcript either way.
    """
    transcript = session.transcript
    try:
        data = session.fetcher.fetch(url)
    except FetchError as exc:
        if transcript is not None:
            transcript.add_download(url, exc.kind)
        raise
    artifact = session.store.put(data, shell_download(url),
                                 transcript.session_id if transcript else None)
    if transcript is not None:
        transcript.add_download(url, "ok", artifact.digest)
        transcript.add_artifact(artifact.digest)
    session.artifacts.append(artifact)
    if target is not None:
        session.fs.write_file(target, data)
    return artifact


_VAR = re.compile(r"\$(?:\{(\w+)\}|(\w+))")
_SEPARATORS = (";", "&&", "||", "&")
_REDIRECTS = (">", ">>", "<", ">&", "<&", ">|")
_PERM_BITS = {
    "u": {"r": 0o400, "w": 0o200, "x": 0o100, "s": 0o4000},
    "g": {"r": 0o040, "w": 0o020, "x": 0o010, "s": 0o2000},
    "o": {"r": 0o004, "w": 0o002, "x": 0o001, "t": 0o1000},
}


def parse_mode(spec: str, current: int) -> int:
    """Apply an octal or symbolic chmod spec (``755``, ``+x``, ``u+rw,go-w``)."""
    if re.fullmatch(r"[0-7]{1,4}", spec):
        return int(spec, 8)
    mode = current
    for clause in spec.split(","):
        m = re.fullmatch(r"([ugoa]*)([-+=])([rwxXst]*)", clause)
        if not m:
            raise ValueError(spec)
        who = m.group(1) or "a"
        who = "ugo" if "a" in who else who
        mask = 0
        for w in who:
            for p in m.group(3).replace("X", "x"):
                mask |= _PERM_BITS[w].get(p, 0)
        op = m.group(2)
        if op == "+":
            mode |= mask
        elif op == "-":
            mode &= ~mask
        else:
            for w in who:
                mode &= ~(_PERM_BITS[w]["r"] | _PERM_BITS[w]["w"] | _PERM_BITS[w]["x"])
            mode |= mask
    return mode


def mode_string(node: vfs.FsNode) -> str:
    kind = {"dir": "d", "symlink": "l"}.get(node.kind, "-")
    bits = ""
    for shift, special, sch in ((6, 0o4000, "s"), (3, 0o2000, "s"), (0, 0o1000, "t")):
        r = "r" if node.mode >> shift & 4 else "-"
        w = "w" if node.mode >> shift & 2 else "-"
        x = node.mode >> shift & 1
        if node.mode & special:
            xc = sch if x else sch.upper()
        else:
            xc = "x" if x else "-"
        bits += r + w + xc
    return kind + bits


def _owner_name(owner: str) -> str:
    if owner.startswith("app:"):
        try:
            return f"u0_a{int(owner[4:]) - 10000}"
        except ValueError:
            return owner
    return owner


def _split_flags(args, with_value=()):
    """Split leading dash options from operands.  Returns (flags, values, operands)."""
    flags, values, operands = set(), {}, []
    it = iter(args)
    done = False
    for a in it:
        if done or not a.startswith("-") or a == "-":
            operands.append(a)
            continue
        if a == "--":
            done = True
            continue
        if a.startswith("--"):
            name, _, val = a[2:].partition("=")
            flags.add(name)
            if val:
                values[name] = val
            continue
        letters = a[1:]
        for i, ch in enumerate(letters):
            if ch in with_value:
                rest = letters[i + 1:]
                values[ch] = rest if rest else next(it, "")
                break
            flags.add(ch)
    return flags, values, operands


@dataclass
class _Simple:
    argv: list = field(default_factory=list)
    stdout: tuple | None = None   # (path, append)
    stderr_null: bool = False
    stderr_to_stdout: bool = False


class ShellSession:
    """State of one granted shell: cwd, history, the overlay, captured files."""

    def __init__(self, fs: vfs.OverlayFs, transcript: SessionTranscript | None = None,
                 persona: dict | None = None, fetcher: Fetcher | None = None,
                 store: ArtifactStore | None = None, clock=time.time, src_ip: str = ""):
        self.fs = fs
        self.transcript = transcript
        self.persona = persona or load_persona()
        self.fetcher = fetcher or Fetcher()
        self.store = store if store is not None else ArtifactStore()
        self.clock = clock
        self.src_ip = src_ip or (transcript.src_ip if transcript else "")
        self.history: list[str] = []
        self.artifacts: list = []
        self.exited = False
        self.started = clock()
        self.env = {
            "HOME": self.persona.get("home", "/"),
            "PATH": ":".join(self.persona["path"]),
            "USER": "root",
            "LOGNAME": "root",
            "SHELL": "/system/bin/sh",
            "HOSTNAME": self.persona["hostname"],
            "ANDROID_ROOT": "/system",
            "ANDROID_DATA": "/data",
            "EXTERNAL_STORAGE": "/mnt/sdcard",
        }
        self._oldpwd = fs.cwd
        self._depth = 0

    def prompt(self) -> str:
        return self.persona["prompt"].format(cwd=self.fs.cwd)

    # -- entry point --

    def interpret(self, line: str) -> tuple[str, int]:
        """Run one input line; returns (output, exit status) and records it."""
        line = line[:MAX_LINE]
        self.history.append(line)
        try:
            output, status = self._run_line(line)
        except Exception:
            log.exception("interpreter crashed on %r", line)
            output, status = "Segmentation fault\n", 139
        if output.endswith("\n"):
            output = output[:-1]
        if self.transcript is not None and not self.transcript.closed:
            self.transcript.add_command(line, output, status)
        return output, status

    # -- parsing --

    def _expand(self, line: str) -> str:
        env = dict(self.env, PWD=self.fs.cwd)
        return _VAR.sub(lambda m: env.get(m.group(1) or m.group(2), ""), line)

    def _parse(self, line: str):
        """Return [(connector, [_Simple, ...]), ...] or raise ValueError."""
        lex = shlex.shlex(self._expand(line), posix=True, punctuation_chars=True)
        lex.whitespace_split = True
        tokens = list(lex)
        lists, pipeline, cur = [], [], _Simple()
        connector = None
        i = 0
        while i < len(tokens):
            tok = tokens[i]
            if tok in _SEPARATORS or tok == "|" or tok == ";;":
                if tok == ";;" or (not cur.argv and (tok != ";" or pipeline)):
                    raise ValueError(f"syntax error: unexpected '{tok}'")
                if cur.argv:
                    pipeline.append(cur)
                cur = _Simple()
                if tok != "|":
                    if pipeline:
                        lists.append((connector, pipeline))
                    pipeline, connector = [], tok
                i += 1
                continue
            if tok in _REDIRECTS or tok in ("2>", "&>"):
                fd2 = bool(cur.argv) and cur.argv[-1] == "2" and tokens[i - 1] == "2"
                target = tokens[i + 1] if i + 1 < len(tokens) else None
                if target is None:
                    raise ValueError("syntax error: unexpected newline")
                if fd2:
                    cur.argv.pop()
                    if tok == ">&" and target == "1":
                        cur.stderr_to_stdout = True
                    else:
                        cur.stderr_null = True
                elif tok in (">&",) and target == "2":
                    pass
                elif tok in (">", ">>", ">|"):
                    cur.stdout = (target, tok == ">>")
                i += 2
                continue
            cur.argv.append(tok)
            i += 1
        if cur.argv:
            pipeline.append(cur)
        if pipeline:
            lists.append((connector if lists or connector else None, pipeline))
        return lists

    def _run_line(self, line: str) -> tuple[str, int]:
        if not line.strip():
            return "", 0
        try:
            lists = self._parse(line)
        except ValueError as exc:
            msg = str(exc)
            if "quotation" in msg or "escaped" in msg:
                msg = "syntax error: unterminated quoted string"
            return f"sh: {msg}\n", 2
        out, status = [], 0
        for connector, pipeline in lists:
            if self.exited:
                break
            if connector == "&&" and status != 0:
                continue
            if connector == "||" and status == 0:
                continue
            text, status = self._run_pipeline(pipeline)
            out.append(text)
        return "".join(out), status

    def _run_pipeline(self, pipeline) -> tuple[str, int]:
        stdin, shown, status = "", [], 0
        for n, simple in enumerate(pipeline):
            last = n == len(pipeline) - 1
            o, e, status = self._run_simple(simple.argv, stdin)
            if simple.stderr_to_stdout:
                o, e = o + e, ""
            if simple.stderr_null:
                e = ""
            if simple.stdout is not None:
                err = self._redirect(simple.stdout, o)
                o = ""
                if err:
                    e, status = e + err, 1
            shown.append(e)
            if last:
                shown.append(o)
            stdin = o
        return "".join(shown), status

    def _redirect(self, target, text) -> str:
        path, append = target
        if path == "/dev/null":
            return ""
        data = text.encode("utf-8")
        try:
            if append:
                self.fs.append_file(path, data)
            else:
                self.fs.write_file(path, data)
        except vfs.FsError as exc:
            return f"sh: can't create {path}: {exc}\n"
        return ""

    # -- dispatch --

    def _which(self, name: str) -> str | None:
        for d in self.env["PATH"].split(":"):
            cand = posixpath.join(d, name)
            try:
                node = self.fs.resolve(cand)
            except vfs.FsError:
                continue
            if node.kind == "file":
                return cand
        return None

    def _run_simple(self, argv, stdin) -> tuple[str, str, int]:
        name = argv[0]
        if name == "busybox" and len(argv) > 1:
            argv = argv[1:]
            name = argv[0]
        if "/" not in name and name in BUILTINS:
            return getattr(self, "cmd_" + name)(argv[1:], stdin)
        path = name if "/" in name else self._which(name)
        if path is None:
            return "", f"{name}: command not found\n", 127
        try:
            decision = vfs.exec_check(self.fs, path)
        except vfs.FsError as exc:
            return "", f"sh: {name}: {exc}\n", 127
        if not decision.allowed:
            return "", f"sh: {name}: {decision.reason}\n", 126
        handler = getattr(self, "cmd_" + posixpath.basename(path), None)
        if handler is None:
            return "", f"{name}: command not found\n", 127
        try:
            return handler(argv[1:], stdin)
        except vfs.FsError as exc:
            return "", f"{posixpath.basename(path)}: {exc}\n", 1

    # -- builtins --

    def cmd_cd(self, args, stdin):
        target = args[0] if args else self.env["HOME"]
        if target == "-":
            target = self._oldpwd
        old = self.fs.cwd
        try:
            self.fs.chdir(target)
        except vfs.FsError as exc:
            return "", f"sh: cd: {target}: {exc}\n", 1
        self._oldpwd = old
        return "", "", 0

    def cmd_pwd(self, args, stdin):
        return self.fs.cwd + "\n", "", 0

    def cmd_echo(self, args, stdin):
        newline = True
        escapes = False
        while args and re.fullmatch(r"-[neE]+", args[0]):
            newline = newline and "n" not in args[0]
            escapes = escapes or "e" in args[0]
            args = args[1:]
        text = " ".join(args)
        if escapes:
            text = text.replace("\\n", "\n").replace("\\t", "\t")
        return text + ("\n" if newline else ""), "", 0

    def cmd_history(self, args, stdin):
        return "".join(f"{i:5d}  {line}\n" for i, line in enumerate(self.history, 1)), "", 0

    def cmd_exit(self, args, stdin):
        self.exited = True
        return "", "", 0

    cmd_logout = cmd_exit

    def cmd_sh(self, args, stdin):
        if not args:
            return "", "", 0
        if args[0] == "-c":
            if len(args) < 2:
                return "", "sh: -c: option requires an argument\n", 2
            self._depth += 1
            try:
                if self._depth > 8:
                    return "", "sh: too many nested shells\n", 2
                text, status = self._run_line(args[1])
            finally:
                self._depth -= 1
            return text, "", status
        script = args[0]
        try:
            node = self.fs.resolve(script)
        except vfs.FsError as exc:
            return "", f"sh: {script}: {exc}\n", 127
        if node.session_created or node.kind != "file":
            return "", f"sh: {script}: permission denied\n", 126
        return "", "", 0

    # -- emulated programs --

    def _long_line(self, node: vfs.FsNode, name: str) -> str:
        owner = _owner_name(node.owner)
        size = "" if node.kind == "dir" else str(node.size)
        date = time.strftime("%Y-%m-%d %H:%M", time.gmtime(node.mtime))
        line = f"{mode_string(node)} {owner:<8} {owner:<8} {size:>8} {date} {name}"
        if node.kind == "symlink":
            line += f" -> {node.target}"
        return line + "\n"

    def cmd_ls(self, args, stdin):
        flags, _, paths = _split_flags(args)
        long = "l" in flags
        show_all = "a" in flags or "A" in flags
        paths = paths or ["."]
        out, err, status = [], [], 0
        files, dirs = [], []
        for p in paths:
            try:
                canon, node = self.fs.lookup(p, follow=not long or p.endswith("/"))
            except vfs.FsError as exc:
                err.append(f"ls: {p}: {exc}\n")
                status = 1
                continue
            if node.kind == "symlink" and not long:
                canon, node = self.fs.lookup(p)
            if node.kind == "dir" and "d" not in flags:
                dirs.append((p, canon))
            else:
                files.append((p, node))
        for p, node in files:
            out.append(self._long_line(node, p) if long else p + "\n")
        for i, (p, canon) in enumerate(dirs):
            if len(dirs) + len(files) > 1:
                out.append(("\n" if out else "") + f"{p}:\n")
            for name in self.fs.listdir(canon):
                if name.startswith(".") and not show_all:
                    continue
                if long:
                    node = self.fs.resolve(posixpath.join(canon, name), follow=False)
                    out.append(self._long_line(node, name))
                else:
                    out.append(name + "\n")
        return "".join(out), "".join(err), status

    def cmd_cat(self, args, stdin):
        _, _, paths = _split_flags(args)
        if not paths:
            return stdin, "", 0
        out, err, status = [], [], 0
        for p in paths:
            if p == "-":
                out.append(stdin)
                continue
            try:
                node = self.fs.resolve(p)
            except vfs.FsError as exc:
                err.append(f"cat: {p}: {exc}\n")
                status = 1
                continue
            if node.kind == "dir":
                err.append(f"cat: {p}: Is a directory\n")
                status = 1
                continue
            out.append(node.content.decode("utf-8", "replace"))
        return "".join(out), "".join(err), status

    def cmd_uname(self, args, stdin):
        u = self.persona["uname"]
        flags, _, _ = _split_flags(args)
        order = [("s", "sysname"), ("n", "nodename"), ("r", "release"),
                 ("v", "version"), ("m", "machine")]
        if "a" in flags or "all" in flags:
            picked = [key for _, key in order]
        else:
            picked = [key for letter, key in order if letter in flags] or ["sysname"]
        return " ".join(u[k] for k in picked) + "\n", "", 0

    def cmd_id(self, args, stdin):
        return "uid=0(root) gid=0(root) groups=0(root)\n", "", 0

    def cmd_whoami(self, args, stdin):
        return "root\n", "", 0

    def cmd_su(self, args, stdin):
        return "", "", 0

    def cmd_hostname(self, args, stdin):
        return self.persona["hostname"] + "\n", "", 0

    def cmd_ps(self, args, stdin):
        lines = ["USER     PID   PPID  VSIZE  RSS     WCHAN    PC         NAME\n"]
        for user, pid, ppid, vsize, rss, wchan, pc, state, name in self.persona["processes"]:
            lines.append(f"{user:<8} {pid:<5} {ppid:<5} {vsize:<6} {rss:<6} "
                         f"{wchan:>8} {pc:>8} {state} {name}\n")
        return "".join(lines), "", 0

    def cmd_mkdir(self, args, stdin):
        flags, _, paths = _split_flags(args, with_value="m")
        if not paths:
            return "", "Usage: mkdir [-p] <target>...\n", 1
        err, status = [], 0
        for p in paths:
            try:
                self.fs.mkdir(p, parents="p" in flags)
            except vfs.FsError as exc:
                err.append(f"mkdir failed for {p}, {exc}\n")
                status = 1
        return "", "".join(err), status

    def cmd_rm(self, args, stdin):
        flags, _, paths = _split_flags(args)
        recursive = bool(flags & {"r", "R", "recursive"})
        force = "f" in flags or "force" in flags
        if not paths:
            return "", ("" if force else "rm: missing operand\n"), (0 if force else 1)
        err, status = [], 0
        for p in paths:
            try:
                node = self.fs.resolve(p, follow=False)
                if node.kind == "dir" and not recursive:
                    raise vfs.IsADirectory(p)
                self.fs.remove(p, recursive=recursive)
            except vfs.NotFound as exc:
                if not force:
                    err.append(f"rm failed for {p}, {exc}\n")
                    status = 1
            except vfs.FsError as exc:
                err.append(f"rm failed for {p}, {exc}\n")
                status = 1
        return "", "".join(err), status

    def _two_operand(self, cmd, args, op):
        flags, _, paths = _split_flags(args)
        if len(paths) < 2:
            return "", f"{cmd}: missing file operand\n", 1
        *sources, dest = paths
        err, status = [], 0
        if len(sources) > 1:
            try:
                if not self.fs.resolve(dest).is_dir:
                    raise vfs.NotADirectory(dest)
            except vfs.FsError as exc:
                return "", f"{cmd}: {dest}: {exc}\n", 1
        for src in sources:
            try:
                op(src, dest, flags)
            except vfs.FsError as exc:
                err.append(f"{cmd}: {exc.path or src}: {exc}\n")
                status = 1
        return "", "".join(err), status

    def cmd_cp(self, args, stdin):
        return self._two_operand(
            "cp", args,
            lambda s, d, f: self.fs.copy(s, d, recursive=bool(f & {"r", "R", "a"})))

    def cmd_mv(self, args, stdin):
        return self._two_operand("mv", args, lambda s, d, f: self.fs.rename(s, d))

    def cmd_chmod(self, args, stdin):
        recursive = False
        if args and args[0] in ("-R", "-r"):
            recursive, args = True, args[1:]
        if len(args) < 2:
            return "", "Usage: chmod [OPTION] <MODE> <FILE>\n", 1
        spec, *paths = args
        err, status = [], 0
        for p in paths:
            try:
                canon, node = self.fs.lookup(p)
                targets = list(self.fs.walk(canon)) if recursive else [canon]
                for t in targets:
                    current = self.fs.resolve(t, follow=False)
                    self.fs.chmod(t, parse_mode(spec, current.mode))
            except ValueError:
                return "", f"Bad mode\n", 10
            except vfs.FsError as exc:
                err.append(f"Unable to chmod {p}: {exc}\n")
                status = 1
        return "", "".join(err), status

    def cmd_touch(self, args, stdin):
        _, _, paths = _split_flags(args, with_value="dtr")
        if not paths:
            return "", "touch: usage: touch [-alm] [-t time_t] <file>\n", 1
        err, status = [], 0
        for p in paths:
            try:
                self.fs.touch(p)
            except vfs.FsError as exc:
                err.append(f"touch: {p}: {exc}\n")
                status = 1
        return "", "".join(err), status

    def _download(self, url: str, target: str | None):
        if "://" not in url:
            url = "http://" + url
        return url, capture_download(url, self, target)

    def cmd_wget(self, args, stdin):
        flags, values, operands = _split_flags(args, with_value="OPUTtY")
        if not operands:
            return "", "wget: missing URL\nUsage: wget [-c|--continue] [-q|--quiet] [-O|--output-document FILE] URL\n", 1
        url = operands[0] if "://" in operands[0] else "http://" + operands[0]
        document = values.get("O") or values.get("output-document")
        quiet = "q" in flags or "quiet" in flags
        parts = urllib.parse.urlsplit(url)
        host = parts.hostname or ""
        if parts.scheme not in ("http", "https", "ftp") or not host:
            return "", f"wget: not an http or ftp url: {operands[0]}\n", 1
        to_stdout = document == "-"
        target = None
        if not to_stdout:
            target = document or default_target_name(url)
            if "P" in values:
                target = posixpath.join(values["P"], target)
        port = parts.port or {"http": 80, "https": 443, "ftp": 21}[parts.scheme]
        err = "" if quiet else f"Connecting to {host} ({host}:{port})\n"
        try:
            artifact = capture_download(url, self, target)
        except FetchError as exc:
            msg = {
                "timeout": "wget: download timed out\n",
                "oversize": "wget: error getting response: Connection reset by peer\n",
            }.get(exc.kind, f"wget: bad address '{host}'\n")
            return "", err + msg, 1
        except vfs.FsError as exc:
            return "", err + f"wget: can't open '{target}': {exc}\n", 1
        if to_stdout:
            return self.store.get(artifact.digest).decode("utf-8", "replace"), err, 0
        if not quiet:
            name = posixpath.basename(target)[:20]
            err += (f"{name:<20} 100% |*******************************| "
                    f"{artifact.size_bytes:>5}   0:00:00 ETA\n")
        return "", err, 0

    def cmd_curl(self, args, stdin):
        flags, values, operands = _split_flags(args, with_value="oAdHXeurmT")
        if not operands:
            return "", "curl: try 'curl --help' for more information\n", 2
        url = operands[0] if "://" in operands[0] else "http://" + operands[0]
        host = urllib.parse.urlsplit(url).hostname or ""
        target = values.get("o") or values.get("output")
        if "O" in flags or "remote-name" in flags:
            target = default_target_name(url)
        try:
            artifact = capture_download(url, self, target)
        except FetchError as exc:
            if exc.kind == "timeout":
                return "", "curl: (28) Operation timed out\n", 28
            if exc.kind == "invalid":
                return "", f"curl: (1) Protocol not supported or disabled in libcurl\n", 1
            if exc.kind == "oversize":
                return "", "curl: (56) Recv failure: Connection reset by peer\n", 56
            return "", f"curl: (6) Couldn't resolve host '{host}'\n", 6
        except vfs.FsError as exc:
            return "", f"curl: (23) Failed writing body: {exc}\n", 23
        if target is None:
            return self.store.get(artifact.digest).decode("utf-8", "replace"), "", 0
        return "", "", 0

    def _archive_bytes(self, cmd, path):
        node = self.fs.resolve(path)
        if node.kind != "file":
            raise vfs.IsADirectory(path)
        return node.content

    def cmd_tar(self, args, stdin):
        if not args:
            return "", "tar: You must specify one of the `-Acdtrux' options\n", 2
        letters, rest = "", []
        first, *others = args
        pending = [first.lstrip("-")] + [a[1:] for a in others if a.startswith("-") and not a.startswith("--")]
        operands = [a for a in others if not a.startswith("-")]
        letters = "".join(pending)
        archive, chdir = None, None
        if "f" in letters:
            archive = operands.pop(0) if operands else None
        if "-C" in args:
            idx = args.index("-C")
            chdir = args[idx + 1] if idx + 1 < len(args) else None
            if chdir in operands:
                operands.remove(chdir)
        if archive is None:
            return "", "tar: Refusing to read archive contents from terminal\n", 2
        if "c" in letters:
            return "", f"tar: {archive}: Cannot open: Read-only file system\n", 2
        try:
            data = self._archive_bytes("tar", archive)
        except vfs.FsError as exc:
            return "", f"tar: {archive}: Cannot open: {exc}\n", 2
        try:
            tf = tarfile.open(fileobj=io.BytesIO(data), mode="r:*")
            members = tf.getmembers()
        except (tarfile.TarError, EOFError, OSError):
            return "", "tar: This does not look like a tar archive\n", 2
        out = []
        listing = "t" in letters or "v" in letters
        base = chdir or "."
        for m in members:
            rel = vfs.normalize(m.name).lstrip("/")
            if not rel:
                continue
            if listing:
                out.append(rel + ("/" if m.isdir() else "") + "\n")
            if "x" not in letters:
                continue
            dest = posixpath.join(base, rel)
            if m.isdir():
                self.fs.mkdir(dest, parents=True)
            elif m.isfile():
                parent = posixpath.dirname(dest)
                if parent and parent != ".":
                    self.fs.mkdir(parent, parents=True)
                fh = tf.extractfile(m)
                self.fs.write_file(dest, fh.read() if fh else b"", mode=m.mode & 0o777)
        return "".join(out), "", 0

    def cmd_unzip(self, args, stdin):
        _, _, operands = _split_flags(args, with_value="dx")
        if not operands:
            return "UnZip 6.00 of 20 April 2009.\nUsage: unzip [-Z] [-opts[modifiers]] file[.zip] [list] [-x xlist] [-d exdir]\n", "", 0
        name = operands[0]
        try:
            data = self._archive_bytes("unzip", name)
            zf = zipfile.ZipFile(io.BytesIO(data))
            infos = zf.infolist()
        except (vfs.FsError, zipfile.BadZipFile, OSError):
            return "", (f"unzip:  cannot find or open {name}, {name}.zip or {name}.ZIP.\n"), 9
        lines = [f"Archive:  {name}\n",
                 "  Length      Date    Time    Name\n",
                 "---------  ---------- -----   ----\n"]
        total = 0
        for info in infos:
            y, mo, d, h, mi, _ = info.date_time
            lines.append(f"{info.file_size:>9}  {mo:02d}-{d:02d}-{y:04d} {h:02d}:{mi:02d}   {info.filename}\n")
            total += info.file_size
        lines.append("---------                     -------\n")
        lines.append(f"{total:>9}                     {len(infos)} file{'s' if len(infos) != 1 else ''}\n")
        return "".join(lines), "", 0

    def _uptime_line(self) -> str:
        now = self.clock()
        up = int(self.persona.get("uptime_seconds", 0) + now - self.started)
        days, rem = divmod(up, 86400)
        hours, rem = divmod(rem, 3600)
        clock = time.strftime("%H:%M:%S", time.gmtime(now))
        return (f" {clock} up {days} day{'s' if days != 1 else ''}, {hours:2d}:{rem // 60:02d},  "
                "load average: 0.08, 0.12, 0.10\n")

    def cmd_uptime(self, args, stdin):
        return self._uptime_line(), "", 0

    def cmd_w(self, args, stdin):
        login = time.strftime("%H:%M", time.gmtime(self.started))
        return (self._uptime_line()
                + "USER     TTY      FROM             LOGIN@   IDLE   JCPU   PCPU WHAT\n"
                + f"root     pts/0    {self.src_ip:<16} {login}    0.00s  0.02s  0.00s w\n"), "", 0


class ShellTrap:
    """Telnet-style front end for :class:`ShellSession`."""

    def __init__(self, recorder, base: vfs.FsImage, store: ArtifactStore, fetcher: Fetcher,
                 policy: CredentialPolicy = CredentialPolicy(), persona: dict | None = None,
                 idle_timeout: float = 300.0, max_attempts: int = 6):
        self.recorder = recorder
        self.base = base
        self.store = store
        self.fetcher = fetcher
        self.policy = policy
        self.persona = persona or load_persona()
        self.idle_timeout = idle_timeout
        self.max_attempts = max_attempts

    def handle(self, sock, addr):
        dst_port = sock.getsockname()[1]
        event = self.recorder.record_event("tcp", addr[0], addr[1], dst_port, "shell")
        transcript = self.recorder.open_session(event)
        try:
            self._converse(sock, transcript)
        finally:
            self.recorder.close_session(transcript)
            try:
                sock.close()
            except OSError:
                pass

    def _converse(self, sock, transcript):
        reader = LineReader(sock, max_line=MAX_LINE, timeout=self.idle_timeout)
        if not send_text(sock, "\r\n" + self.persona["login_banner"] + "\r\n\r\n"):
            return
        granted = False
        for attempt in range(1, self.max_attempts + 1):
            send_text(sock, self.persona["login_prompt"])
            user = reader.readline()
            if user is None:
                return
            send_text(sock, "Password: ")
            password = reader.readline()
            if password is None:
                return
            outcome = handle_login((user, password), self.policy, attempt)
            transcript.add_login(user, password, outcome.value)
            if outcome.granted:
                granted = True
                break
            send_text(sock, "\r\nLogin incorrect\r\n")
        if not granted:
            return
        session = ShellSession(vfs.OverlayFs(self.base, clock=self.recorder.clock), transcript,
                               persona=self.persona, fetcher=self.fetcher, store=self.store,
                               clock=self.recorder.clock, src_ip=transcript.src_ip)
        while not session.exited:
            if not send_text(sock, session.prompt()):
                return
            line = reader.readline()
            if line is None:
                return
            if not line.strip():
                continue
            output, _ = session.interpret(line)
            if output and not send_text(sock, output.replace("\n", "\r\n") + "\r\n"):
                return
