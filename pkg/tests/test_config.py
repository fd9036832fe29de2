import json

import pytest

from droidpot import config
from droidpot.config import ConfigInvalid, build_config, load_config, parse_endpoint
from droidpot.porttrap import DEFAULT_PORTS


def errors_of(raw):
    with pytest.raises(ConfigInvalid) as e:
        build_config(raw)
    return e.value.errors


def test_minimal_config_gets_defaults(tmp_path):
    cfg = build_config({"vantage": "dsl"}, str(tmp_path))
    assert {n: s.port for n, s in cfg.services.items()} == {"shell": 2222, "web": 8080, "ftp": 2121, "tftp": 6969}
    assert all(s.enabled for s in cfg.services.values())
    assert cfg.exporter.interval == 300.0 and cfg.exporter.enabled and cfg.exporter.collector is None
    assert cfg.exporter.spool_cap_bytes == 1 << 30
    assert cfg.trap_policy.tcp_ports == DEFAULT_PORTS
    assert cfg.trap_policy.default.kind == "silent"
    assert cfg.data_dir == str(tmp_path / "droidpot-data")
    assert cfg.exporter.spool_dir == str(tmp_path / "droidpot-data" / "spool")
    assert cfg.artifact_dir == str(tmp_path / "droidpot-data" / "artifacts")
    assert cfg.fetch_mode == "stub"
    assert ("root", "1234") in cfg.credentials.accepted and cfg.credentials.accept_after_attempts == 3


def test_port_conflict_names_both_services():
    errs = errors_of({"vantage": "dsl", "services": {"shell": {"port": 8080}, "web": {"port": 8080}}})
    assert any("shell" in e and "web" in e and "8080" in e for e in errs)
    # tcp and udp may share a number
    build_config({"vantage": "dsl", "services": {"ftp": {"port": 6969}}})


def test_interval_bound():
    errs = errors_of({"vantage": "dsl", "exporter": {"interval": 5}})
    assert any("interval ≥ 10" in e for e in errs)
    assert build_config({"vantage": "dsl", "exporter": {"interval": 10}}).exporter.interval == 10


def test_every_problem_is_listed():
    errs = errors_of({"vantage": "Mars Base", "colour": 1, "services": {"shell": {"port": 70000, "speed": 1}},
                      "exporter": {"interval": 1, "collector": "nope"}, "fetch": {"mode": "live"},
                      "traps": {"tcp_ports": [0, 1, 1]}, "exclusion": ["10.0.0.0/33"]})
    text = "\n".join(errs)
    for fragment in ("vantage", "'colour'", "services.shell.port", "'speed'", "interval", "collector",
                     "allowlist", "traps.tcp_ports", "exclusion"):
        assert fragment in text, fragment
    assert len(errs) >= 9


def test_dedicated_ports_leave_the_trap_set():
    cfg = build_config({"vantage": "umts", "services": {"shell": {"port": 22}, "web": {"port": 80},
                                                         "ftp": {"port": 21}, "tftp": {"port": 69}},
                        "traps": {"tcp_ports": [21, 22, 23, 80, 1433], "udp_ports": [53, 69]}})
    assert cfg.trap_policy.tcp_ports == (23, 1433)
    assert cfg.trap_policy.udp_ports == (53,)
    assert set(cfg.trimmed_trap_ports) == {("tcp", 21), ("tcp", 22), ("tcp", 80), ("udp", 69)}
    assert config.PRIVILEGED_PORTS == {"shell": 22, "web": 80, "ftp": 21, "tftp": 69}


def test_disabled_service_does_not_claim_its_port():
    cfg = build_config({"vantage": "umts", "services": {"web": {"port": 80, "enabled": False}},
                        "traps": {"tcp_ports": [80]}})
    assert cfg.trap_policy.tcp_ports == (80,)


def test_ftp_passive_range():
    cfg = build_config({"vantage": "dsl", "services": {"ftp": {"passive_ports": [40000, 40002]}},
                        "traps": {"tcp_ports": [40001, 23]}})
    assert cfg.services["ftp"].passive_ports == (40000, 40001, 40002)
    assert cfg.trap_policy.tcp_ports == (23,)
    errs = errors_of({"vantage": "dsl", "services": {"ftp": {"passive_ports": [2222, 2223]}}})
    assert any("passive" in e and "shell" in e for e in errs)


def test_trap_modes():
    cfg = build_config({"vantage": "dsl", "traps": {"modes": {"25": {"mode": "banner", "banner": "220 x\r\n"},
                                                              "7": "echo",
                                                              "9": {"mode": "banner", "banner_b64": "AAE="}}}})
    assert cfg.trap_policy.mode_for(25).banner == b"220 x\r\n"
    assert cfg.trap_policy.mode_for(7).kind == "echo"
    assert cfg.trap_policy.mode_for(9).banner == b"\x00\x01"
    errs = errors_of({"vantage": "dsl", "traps": {"modes": {"x": "echo", "25": "banner", "26": "shout"}}})
    assert len(errs) == 3


def test_collector_address_is_excluded():
    cfg = build_config({"vantage": "dsl", "exporter": {"collector": "10.9.8.7:5000"},
                        "exclusion": ["192.168.0.0/16"]})
    ex = cfg.exclusion_set()
    assert "10.9.8.7" in ex and "192.168.4.4" in ex and "10.9.8.8" not in ex
    assert cfg.exporter.collector == ("10.9.8.7", 5000)


def test_fetch_stub_forms():
    cfg = build_config({"vantage": "dsl", "fetch": {"stub": {"http://a/x": "text", "http://a/y": {"b64": "AP8="}}}})
    assert cfg.fetch_stub == {"http://a/x": b"text", "http://a/y": b"\x00\xff"}
    assert cfg.fetcher().mode == "stub"


@pytest.mark.parametrize("text, default, expected", [
    ("127.0.0.1:9000", None, ("127.0.0.1", 9000)),
    ("[::1]:9000", None, ("::1", 9000)),
    ("host", 53, ("host", 53)),
    (":7000", None, ("0.0.0.0", 7000)),
])
def test_parse_endpoint(text, default, expected):
    assert parse_endpoint(text, default) == expected


@pytest.mark.parametrize("text", ["host", "h:99999", "h:x"])
def test_parse_endpoint_errors(text):
    with pytest.raises(ValueError):
        parse_endpoint(text)


def test_load_config_paths_and_env(tmp_path, monkeypatch):
    path = tmp_path / "probe.json"
    path.write_text(json.dumps({"vantage": "darknet", "data_dir": "d"}))
    assert load_config(path).data_dir == str(tmp_path / "d")
    monkeypatch.setenv("DROIDPOT_CONFIG", str(path))
    assert load_config().vantage == "darknet"
    monkeypatch.delenv("DROIDPOT_CONFIG")
    with pytest.raises(ConfigInvalid, match="DROIDPOT_CONFIG"):
        load_config()
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigInvalid, match="not valid JSON"):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigInvalid, match="cannot read"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "m.json").write_text(json.dumps({"vantage": "dsl", "fs_manifest": "nope.json"}))
    with pytest.raises(ConfigInvalid, match="fs_manifest"):
        load_config(tmp_path / "m.json")


def test_check_paths_reports_uncreatable(tmp_path):
    (tmp_path / "f").write_text("x")
    cfg = build_config({"vantage": "dsl", "data_dir": str(tmp_path / "f" / "data")})
    problems = config.check_paths(cfg)
    assert problems and str(tmp_path / "f" / "data") in problems[0]
