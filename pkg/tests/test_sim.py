import hashlib
import json
import os
from collections import Counter

import pytest

from conftest import daemon_config, free_port, read_events, running_daemon, targets_for
from droidpot import analysis, sim
from droidpot.sim import AttackScript, CorpusError, CorpusSpec, ScriptError


# -- corpus generator --

def test_same_seed_same_bytes(tmp_path):
    spec = CorpusSpec(seed=5, duration_hours=48, rates={"dsl": 21.0, "umts": 55.0}, unknown_share=0.05,
                      excluded={"umts": 7})
    a = sim.generate_corpus(spec, tmp_path / "a")
    b = sim.generate_corpus(spec, tmp_path / "b")
    for x, y in zip(a["logs"] + [a["asn_db"], a["truth"]], b["logs"] + [b["asn_db"], b["truth"]]):
        assert open(x, "rb").read() == open(y, "rb").read()
    c = sim.generate_corpus(CorpusSpec(seed=6, duration_hours=48, rates={"dsl": 21.0}), tmp_path / "c")
    assert open(c["logs"][0], "rb").read() != open(a["logs"][0], "rb").read()


def test_spec_validation():
    with pytest.raises(CorpusError):
        sim.generate_events(CorpusSpec(duration_hours=0))
    with pytest.raises(CorpusError):
        sim.generate_events(CorpusSpec(tcp_mix={22: 0}))
    with pytest.raises(CorpusError):
        sim.generate_events(CorpusSpec(rates={}))
    with pytest.raises(CorpusError):
        CorpusSpec.from_dict({"sed": 1})
    spec = CorpusSpec.from_dict({"seed": 3, "rates": {"dsl": 10}, "tcp_mix": {"22": 1}, "zipf": {"n": 5}})
    assert spec.tcp_mix == {22: 1.0} and len(spec.population) == 5


def test_zipf_population_is_heavy_tailed():
    pop = sim.zipf_population(40, 1.2)
    weights = [a["weight"] for a in pop]
    assert weights == sorted(weights, reverse=True)
    assert sum(weights) == pytest.approx(1.0)
    assert sum(weights[:4]) > 0.5       # a handful of ASes dominate


def test_tcp_share_binomial_tolerance():
    spec = CorpusSpec(seed=11, duration_hours=200, rates={"umts": 50.0}, tcp_share=0.9)
    truth = sim.generate_events(spec).truth["umts"]
    assert 9000 <= truth["events"] <= 11000
    assert abs(truth["tcp_share"] - 0.9) <= 0.02


def test_analysis_reproduces_ground_truth(tmp_path):
    spec = CorpusSpec(seed=21, duration_hours=72, rates={"dsl": 21.0, "umts": 55.0, "darknet": 83.0},
                      unknown_share=0.03, excluded={"dsl": 5, "umts": 9})
    paths = sim.generate_corpus(spec, tmp_path)
    truth = json.load(open(paths["truth"]))["vantages"]
    db = analysis.AsnDb.load(paths["asn_db"])
    store, stats = analysis.analyze(paths["logs"], db)
    assert store.excluded == 14
    for s in stats:
        t = truth[s.vantage]
        assert s.transport == {"tcp": (t["tcp"]["ports"], t["tcp"]["attacks"]),
                               "udp": (t["udp"]["ports"], t["udp"]["attacks"])}
        ports = analysis.top_k_ports(store, s.vantage, 10_000)
        assert {str(p): c for p, c in ports.entries} == t["per_port"]
        per_as = {str(a): c for a, c in s.attacks_as.entries}
        if s.attacks_as.unknown:
            per_as["0"] = s.attacks_as.unknown
        assert per_as == t["per_as"]
        who = {str(a): c for a, c in s.attackers_as.entries}
        if s.attackers_as.unknown:
            who["0"] = s.attackers_as.unknown
        assert who == t["attackers_per_as"]
        idx = store.indices(s.vantage)
        assert dict(Counter(store.src_ip[i] for i in idx)) == t["per_attacker"]
        assert s.total == t["events"]


def test_umts_fixture_matches_reference_totals():
    corpus = sim.generate_events(sim.umts_fixture_spec())
    t = corpus.truth["umts"]
    assert (t["tcp"]["ports"], t["tcp"]["attacks"]) == (111, 14954)
    assert (t["udp"]["ports"], t["udp"]["attacks"]) == (76, 637)


# -- scripts --

def test_script_validation():
    with pytest.raises(ScriptError):
        AttackScript.from_dict({"name": "x"})
    with pytest.raises(ScriptError):
        AttackScript.from_dict({"name": "x", "steps": [{"op": "send", "line": "hi"}]})
    with pytest.raises(ScriptError):
        AttackScript.from_dict({"name": "x", "steps": [{"op": "connect"}, {"op": "dance"}]})
    with pytest.raises(ScriptError):
        sim.load_builtin("nope")
    assert sim.builtin_scripts() == ["blind-worm", "blind-worm-banner", "botnet-recruit", "recon"]


def test_builtin_expected_artifact_digest_is_the_stub_digest():
    s = sim.load_builtin("botnet-recruit")
    (body,) = s.stub_bytes().values()
    assert s.expected["transcript"]["artifacts"] == [hashlib.sha256(body).hexdigest()]


@pytest.fixture
def daemon(tmp_path):
    stub = {}
    for name in ("botnet-recruit",):
        stub.update(sim.load_builtin(name).fetch_stub)
    mssql, smtp = free_port(), free_port()
    raw = daemon_config(tmp_path, traps={"tcp_ports": [mssql, smtp], "udp_ports": [],
                                         "modes": {str(smtp): {"mode": "banner", "banner": "220 mail\r\n"}},
                                         "idle_timeout": 2},
                        fetch={"mode": "stub", "stub": stub})
    with running_daemon(raw) as d:
        yield d, targets_for(d, {1433: mssql, 25: smtp})


def test_recon(daemon):
    d, targets = daemon
    r = sim.run_script(sim.load_builtin("recon"), targets)
    assert r.passed, (r.errors, r.diff)
    assert [c["input"] for c in r.record["commands"]] == ["ls /", "cat /proc/cpuinfo", "exit"]


def test_botnet_recruit_ends_in_permission_denied(daemon):
    d, targets = daemon
    r = sim.run_script(sim.load_builtin("botnet-recruit"), targets)
    assert r.passed, (r.errors, r.diff)
    assert r.record["commands"][-2]["output"] == "sh: ./bot: permission denied"


def test_blind_worm_and_banner(daemon):
    d, targets = daemon
    r = sim.run_script(sim.load_builtin("blind-worm"), targets, seed=4)
    assert r.passed, (r.errors, r.diff)
    assert r.record["blind_send"] is True and r.record["total"] == 90
    r = sim.run_script(sim.load_builtin("blind-worm-banner"), targets, seed=4)
    assert r.passed, (r.errors, r.diff)
    assert r.record["blind_send"] is False


def test_mismatch_is_reported_as_diff(daemon):
    d, targets = daemon
    script = sim.load_builtin("recon")
    script.expected = {"transcript": {"logins": [["root", "wrong", "granted"]]}}
    r = sim.run_script(script, targets)
    assert not r.passed and any("wrong" in line for line in r.diff)


def test_expect_timeout_reports_last_bytes(daemon):
    d, targets = daemon
    script = AttackScript.from_dict({"name": "t", "steps": [
        {"op": "connect", "service": "shell"},
        {"op": "expect", "pattern": "never-appears", "timeout": 0.5},
    ]})
    r = sim.run_script(script, targets)
    assert not r.passed and "timed out" in r.errors[0] and "login" in r.errors[0]


def test_repeats_give_one_session_each(daemon):
    d, targets = daemon
    events_path = os.path.join(d.config.data_dir, "events.ndjson")
    before = len(read_events(events_path))
    n = 4
    for i in range(n):
        assert sim.run_script(sim.load_builtin("recon"), targets, seed=i).passed
    events = read_events(events_path)[before:]
    assert len(events) == n
    assert len({e["session"] for e in events}) == n
