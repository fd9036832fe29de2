import json
import os
import signal
import socket

import pytest

from conftest import daemon_config, free_port, read_events, recv_until, running_daemon, spawn_daemon, wait_for
from droidpot import cli, __version__
from droidpot.config import build_config
from droidpot.daemon import EXIT_BIND, BindFailure, Daemon, run_daemon
from droidpot.exporter import CollectorStub
from droidpot.sink import NdjsonLog


def closed(port, host="127.0.0.1"):
    try:
        socket.create_connection((host, port), timeout=1).close()
    except OSError:
        return True
    return False


def login(sock):
    recv_until(sock, b"login: ")
    sock.sendall(b"root\r\n")
    recv_until(sock, b"Password: ")
    sock.sendall(b"1234\r\n")
    return recv_until(sock, b"# ")


# -- in-process --

def test_shell_only_daemon_listens_on_nothing_else(tmp_path):
    ports = {"web": free_port(), "ftp": free_port()}
    raw = daemon_config(tmp_path, services={"shell": {"port": 0}, "web": {"port": ports["web"], "enabled": False},
                                            "ftp": {"port": ports["ftp"], "enabled": False},
                                            "tftp": {"enabled": False}})
    with running_daemon(raw) as d:
        assert list(d.ports()) == ["shell"]
        assert closed(ports["web"]) and closed(ports["ftp"])
        with socket.create_connection(("127.0.0.1", d.ports()["shell"]), timeout=5) as s:
            assert b"# " in login(s)


def test_occupied_dedicated_port_is_a_bind_failure(tmp_path):
    blocker = socket.socket()
    blocker.bind(("127.0.0.1", 0))
    blocker.listen(1)
    taken = blocker.getsockname()[1]
    try:
        raw = daemon_config(tmp_path, services={"shell": {"port": 0}, "web": {"port": taken},
                                                "ftp": {"port": 0}, "tftp": {"port": 0}})
        with pytest.raises(BindFailure) as e:
            Daemon(build_config(raw)).start()
        assert any(f.startswith(f"web port {taken}") for f in e.value.failures)
        assert run_daemon(build_config(raw)) == EXIT_BIND
    finally:
        blocker.close()


def test_occupied_trap_port_is_skipped(tmp_path):
    blocker = socket.socket()
    blocker.bind(("127.0.0.1", 0))
    blocker.listen(1)
    taken, other = blocker.getsockname()[1], free_port()
    try:
        raw = daemon_config(tmp_path, traps={"tcp_ports": [taken, other], "udp_ports": []})
        with running_daemon(raw) as d:
            assert [port for _, port, _ in d.traps.unavailable] == [taken]
            with socket.create_connection(("127.0.0.1", other), timeout=5) as s:
                s.sendall(b"probe")
            assert wait_for(lambda: any(e["dst_port"] == other
                                        for e in read_events(os.path.join(d.config.data_dir, "events.ndjson"))))
    finally:
        blocker.close()


def test_stop_closes_open_sessions(tmp_path):
    raw = daemon_config(tmp_path)
    with running_daemon(raw) as d:
        s = socket.create_connection(("127.0.0.1", d.ports()["shell"]), timeout=5)
        login(s)
        assert wait_for(lambda: len(d.recorder.open_sessions()) == 1)
    s.close()
    (t,) = NdjsonLog(os.path.join(d.config.data_dir, "transcripts.ndjson")).read()
    assert t["end"] is not None and t["login_attempts"][0]["outcome"] == "granted"


# -- subprocess --

def test_sigterm_mid_session_closes_transcript_and_flushes(tmp_path):
    collector = CollectorStub(tmp_path / "archive").start()
    try:
        raw = daemon_config(tmp_path, exporter={"collector": f"127.0.0.1:{collector.port}", "interval": 3600})
        proc, ports = spawn_daemon(tmp_path, raw)
        try:
            s = socket.create_connection(("127.0.0.1", ports["shell"]), timeout=5)
            login(s)
            s.sendall(b"ls /\r\n")
            recv_until(s, b"# ")
            proc.send_signal(signal.SIGTERM)
            assert proc.wait(timeout=30) == 0
            s.close()
        finally:
            if proc.poll() is None:
                proc.kill()
        data = tmp_path / "data"
        (t,) = NdjsonLog(data / "transcripts.ndjson").read()
        assert t["end"] is not None and t["commands"][0]["input"] == "ls /"
        events = read_events(data / "events.ndjson")
        archived = read_events(collector.archive_path("umts"))
        assert archived == events and len(events) == 1
    finally:
        collector.stop()


def test_cli_run_rejects_bad_config(tmp_path, monkeypatch, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"vantage": "dsl", "exporter": {"interval": 1}}))
    assert cli.main(["run", "-c", str(bad)]) == 2
    assert "interval ≥ 10 seconds required" in capsys.readouterr().err
    monkeypatch.setenv("DROIDPOT_CONFIG", str(bad))
    assert cli.main(["run"]) == 2
    monkeypatch.delenv("DROIDPOT_CONFIG")
    assert cli.main(["run"]) == 2


def test_cli_collector_bad_listen(capsys):
    assert cli.main(["collector", "--listen", "nowhere"]) == 2


def test_cli_version(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["--version"])
    assert e.value.code == 0 and __version__ in capsys.readouterr().out


def test_cli_fs_manifest_validate(tmp_path, capsys):
    assert cli.main(["fs-manifest", "validate"]) == 0
    assert capsys.readouterr().out.startswith("ok: ")
    broken = tmp_path / "m.json"
    broken.write_text('[{"path": "etc", "kind": "dir"}]')
    assert cli.main(["fs-manifest", "validate", str(broken)]) == 1


def test_cli_gen_analyze_and_scan(tmp_path, capsys):
    out = tmp_path / "corpus"
    assert cli.main(["sim", "gen", "--spec", "umts-fixture", "--out", str(out)]) == 0
    paths = json.loads(capsys.readouterr().out)
    report = tmp_path / "report"
    assert cli.main(["analyze", "--logs", *paths["logs"], "--asn-db", paths["asn_db"],
                     "--out", str(report)]) == 0
    summary = capsys.readouterr().out
    assert "umts: tcp 111 ports / 14954 attacks, udp 76 ports / 637 attacks" in summary
    assert (report / "table1.txt").exists() and (report / "summary.json").exists()
    assert cli.main(["log-scan", *paths["logs"]]) == 0
    scan = json.loads(capsys.readouterr().out)
    assert scan["gaps"] == [] and scan["malformed"] == []
    assert cli.main(["analyze", "--logs", str(tmp_path / "none.ndjson"), "--out", str(report)]) == 1


def test_cli_log_scan_flags_gaps(tmp_path, capsys):
    log = tmp_path / "events.ndjson"
    line = ('{"id":%d,"ts":"2012-11-01T00:00:00.000Z","vantage":"dsl","proto":"tcp","src_ip":"10.0.0.1",'
            '"src_port":1,"dst_port":23,"service":"port_trap","session":null,"bytes":0,"excluded":false}')
    log.write_text(line % 1 + "\n" + line % 3 + "\n" + line % 4)
    assert cli.main(["log-scan", str(log)]) == 1
    scan = json.loads(capsys.readouterr().out)
    assert scan["gaps"] and scan["partial_tail"]


def test_cli_sim_run_builtin(tmp_path, capsys):
    with running_daemon(daemon_config(tmp_path)) as d:
        shell = d.ports()["shell"]
        assert cli.main(["sim", "run", "--script", "recon", "--target", f"127.0.0.1:{shell}",
                         "--data-dir", d.config.data_dir, "--repeat", "2"]) == 0
    assert capsys.readouterr().out.count("recon: pass") == 2
    assert cli.main(["sim", "run", "--script", "no-such", "--target", "127.0.0.1"]) == 2
