import re
import socket
import struct

import pytest
from hypothesis import given, settings, strategies as st

from conftest import FakeClock, read_events, recv_until, wait_for
from droidpot import ftp
from droidpot.netio import TcpService
from droidpot.store import ArtifactStore, sha256_hex


class FakeChannel:
    """In-memory stand-in for a passive data connection."""

    def __init__(self, incoming=b""):
        self.port = 40001
        self.incoming = incoming
        self.sent = []
        self.closed = False

    def send(self, data):
        self.sent.append(data)

    def receive(self, limit):
        return self.incoming[:limit], len(self.incoming)

    def close(self):
        self.closed = True


def authed(incoming=b""):
    chan = FakeChannel(incoming)
    state = ftp.FtpState(open_channel=lambda: chan, pasv_address="10.0.0.5")
    ftp.ftp_step(state, "USER anonymous")
    ftp.ftp_step(state, "PASS x@y")
    return state, chan


def codes(state, *lines):
    out = []
    for line in lines:
        replies, state = ftp.ftp_step(state, line)
        out.append(int(replies[-1][:3]))
    return out


def test_verb_matrix():
    state = ftp.FtpState()
    assert codes(state, "SYST", "PASS early", "USER a", "PASS b") == [530, 503, 331, 230]
    assert ftp.ftp_step(state, "SYST")[0] == ["215 UNIX Type: L8"]
    assert codes(state, "PWD", "CWD /pub", "CDUP", "TYPE I", "DELE x", "RETR /etc/passwd",
                 "PORT 10,0,0,1,4,1", "SITE EXEC id", "LIST", "STOR x", "QUIT") == \
        [257, 250, 250, 200, 502, 502, 502, 502, 425, 425, 221]
    assert state.quit


def test_any_credentials_accepted():
    for user, pw in (("root", ""), ("", "x"), ("a" * 500, "b" * 500)):
        state = ftp.FtpState()
        assert codes(state, f"USER {user}", f"PASS {pw}") == [331, 230]


def test_pasv_reply_encodes_port():
    state, chan = authed()
    (reply,), _ = ftp.ftp_step(state, "PASV")
    nums = [int(n) for n in re.search(r"\((.*)\)", reply).group(1).split(",")]
    assert nums[:4] == [10, 0, 0, 5]
    assert nums[4] * 256 + nums[5] == chan.port


def test_stor_captures_exact_bytes():
    state, chan = authed(b"0123456789")
    assert codes(state, "PASV", "STOR evil.bin") == [227, 150]
    assert state.pending == ("STOR", "/evil.bin")
    store = ArtifactStore()
    replies, state, artifact = ftp.ftp_transfer(state, store, "s1")
    assert replies == ["226 Transfer complete."]
    assert artifact.size_bytes == 10 and store.get(artifact.digest) == b"0123456789"
    assert store.references(artifact.digest)[0]["origin"] == {"kind": "ftp_store", "path": "/evil.bin"}
    assert chan.closed and state.data_channel is None
    assert codes(state, "STOR again") == [425]     # channel is single use


def test_stor_over_limit_is_552_and_keeps_nothing():
    state, _ = authed(b"x" * 11)
    codes(state, "PASV", "STOR big")
    store = ArtifactStore()
    replies, _, artifact = ftp.ftp_transfer(state, store, limit=10)
    assert replies[0].startswith("552") and artifact is None and len(store) == 0


def test_list_is_empty():
    state, chan = authed()
    codes(state, "PASV", "LIST")
    replies, _, _ = ftp.ftp_transfer(state, ArtifactStore())
    assert replies == ["226 Directory send OK."] and chan.sent == [b""]


# -- over the wire --

@pytest.fixture
def ftp_trap(recorder):
    store = ArtifactStore()
    svc = TcpService("ftp", "127.0.0.1", 0, ftp.FtpTrap(recorder, store, idle_timeout=5).handle).start()
    yield svc, recorder, store
    svc.stop()


def _cmd(s, line):
    s.sendall(line.encode() + b"\r\n")
    return recv_until(s, b"\r\n").decode()


def _pasv_port(reply):
    nums = [int(n) for n in re.search(r"\((.*)\)", reply).group(1).split(",")]
    return nums[4] * 256 + nums[5]


def test_stor_over_socket(ftp_trap, tmp_path):
    svc, recorder, store = ftp_trap
    payload = bytes(range(256)) * 40
    with socket.create_connection(("127.0.0.1", svc.port), timeout=5) as s:
        assert recv_until(s, b"\r\n").startswith(b"220")
        assert _cmd(s, "USER root").startswith("331")
        assert _cmd(s, "PASS hunter2").startswith("230")
        port = _pasv_port(_cmd(s, "PASV"))
        with socket.create_connection(("127.0.0.1", port), timeout=5) as d:
            assert _cmd(s, "STOR payload.bin").startswith("150")
            d.sendall(payload)
        assert recv_until(s, b"\r\n").startswith(b"226")
        port = _pasv_port(_cmd(s, "PASV"))
        with socket.create_connection(("127.0.0.1", port), timeout=5) as d:
            assert _cmd(s, "LIST").startswith("150")
            assert recv_until(d, b"never", timeout=2) == b""
        assert recv_until(s, b"\r\n").startswith(b"226")
        assert _cmd(s, "RETR payload.bin").startswith("502")
        assert _cmd(s, "QUIT").startswith("221")
    digest = sha256_hex(payload)
    assert store.get(digest) == payload
    assert wait_for(lambda: recorder.transcript_log.read())
    (rec,) = recorder.transcript_log.read()
    assert rec["artifacts"] == [digest]
    assert rec["login_attempts"][0]["username"] == "root"
    assert [e["service"] for e in read_events(tmp_path / "events.ndjson")] == ["ftp"]


# -- TFTP --

def wrq(name, mode="octet"):
    return struct.pack("!H", ftp.WRQ) + name.encode() + b"\0" + mode.encode() + b"\0"


def data(block, payload):
    return struct.pack("!HH", ftp.DATA, block) + payload


def ack_block(reply):
    op, block = struct.unpack("!HH", reply[:4])
    assert op == ftp.ACK, reply
    return block


def error_code(reply):
    op, code = struct.unpack("!HH", reply[:4])
    assert op == ftp.ERROR
    return code


def test_single_block_transfer():
    table = ftp.TftpTable(ArtifactStore())
    peer = ("10.0.0.2", 3000)
    assert ack_block(ftp.tftp_handle(wrq("x"), peer, table)) == 0
    assert ack_block(ftp.tftp_handle(data(1, b"a" * 100), peer, table)) == 1
    ((_, transfer, artifact),) = table.completed
    assert transfer.complete and artifact.size_bytes == 100
    assert table.store.references(artifact.digest)[0]["origin"] == {"kind": "tftp_write", "filename": "x"}
    assert peer not in table.transfers


def sequential_ack_oracle(blocks):
    """Expected replies under the in-order ACK rule, computed independently."""
    acked, out = 0, []
    for b in blocks:
        if b == acked + 1:
            acked = b
        out.append(acked)
    return out


def test_out_of_order_block_reacks_last_in_order():
    table = ftp.TftpTable(ArtifactStore())
    peer = ("10.0.0.2", 3001)
    ftp.tftp_handle(wrq("x"), peer, table)
    order = [2, 1, 1, 3, 2]
    got = [ack_block(ftp.tftp_handle(data(b, b"z" * 512), peer, table)) for b in order]
    assert got == sequential_ack_oracle(order) == [0, 1, 1, 1, 2]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 6 * 512 + 3))
def test_in_order_transfer_acks_are_gapless(size):
    store = ArtifactStore()
    table = ftp.TftpTable(store)
    payload = bytes((i * 7) % 251 for i in range(size))
    peer = ("10.0.0.3", 4000)
    acks = [ack_block(ftp.tftp_handle(wrq("f"), peer, table))]
    chunks = [payload[i:i + 512] for i in range(0, size, 512)]
    if size % 512 == 0:
        chunks.append(b"")         # a zero-length block terminates an exact multiple
    for n, chunk in enumerate(chunks, 1):
        acks.append(ack_block(ftp.tftp_handle(data(n, chunk), peer, table)))
    assert acks == list(range(len(chunks) + 1))
    ((_, _, artifact),) = table.completed
    assert artifact.size_bytes == size and store.get(artifact.digest) == payload


def test_errors_and_read_requests():
    store = ArtifactStore()
    table = ftp.TftpTable(store)
    peer = ("10.0.0.4", 1)
    ftp.tftp_handle(wrq("secret"), peer, table)
    ftp.tftp_handle(data(1, b"stolen"), peer, table)
    rrq = struct.pack("!H", ftp.RRQ) + b"secret\0octet\0"
    assert error_code(ftp.tftp_handle(rrq, peer, table)) == 1
    assert error_code(ftp.tftp_handle(b"\0", peer, table)) == 4
    assert error_code(ftp.tftp_handle(wrq("x", "mail"), peer, table)) == 4
    assert error_code(ftp.tftp_handle(struct.pack("!HH", 9, 0), peer, table)) == 4
    assert error_code(ftp.tftp_handle(data(1, b"x"), ("10.9.9.9", 2), table)) == 5
    ftp.tftp_handle(wrq("y"), peer, table)
    assert error_code(ftp.tftp_handle(data(1, b"x" * 513), peer, table)) == 4
    assert ftp.tftp_handle(struct.pack("!HH", ftp.ACK, 0), peer, table) is None


def test_transfer_cap_gives_disk_full():
    table = ftp.TftpTable(ArtifactStore(), limit=1000)
    peer = ("10.0.0.5", 1)
    ftp.tftp_handle(wrq("x"), peer, table)
    ftp.tftp_handle(data(1, b"a" * 512), peer, table)
    assert error_code(ftp.tftp_handle(data(2, b"a" * 512), peer, table)) == 3
    assert not table.transfers and not table.completed


def test_idle_transfers_expire():
    clock = FakeClock()
    table = ftp.TftpTable(ArtifactStore(), clock=clock)
    ftp.tftp_handle(wrq("x"), ("10.0.0.6", 1), table)
    clock.advance(29)
    assert table.expire() == 0
    clock.advance(2)
    assert table.expire() == 1 and not table.transfers


def test_tftp_over_udp(recorder, tmp_path):
    store = ArtifactStore()
    trap = ftp.TftpTrap(recorder, store, "127.0.0.1", 0).start()
    try:
        s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        s.settimeout(5)
        addr = ("127.0.0.1", trap.port)
        s.sendto(wrq("bot.arm"), addr)
        assert ack_block(s.recv(100)) == 0
        s.sendto(data(1, b"\x7fELF" * 128), addr)
        assert ack_block(s.recv(100)) == 1
        s.sendto(data(2, b"tail"), addr)
        assert ack_block(s.recv(100)) == 2
        s.close()
    finally:
        trap.stop()
    assert store.get(sha256_hex(b"\x7fELF" * 128 + b"tail"))
    events = read_events(tmp_path / "events.ndjson")
    assert [(e["proto"], e["service"]) for e in events] == [("udp", "tftp")]   # one flow
