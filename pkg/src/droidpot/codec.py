"""NDJSON wire form of attack events.

One event per line, UTF-8, keys in a fixed order so that the same event
always serializes to the same bytes.
"""

from __future__ import annotations

import json

from .model import AttackEvent, canonical_ip, format_ts, parse_ts

FIELDS = (
    "id", "ts", "vantage", "proto", "src_ip", "src_port",
    "dst_port", "service", "session", "bytes", "excluded",
)


class MalformedEvent(ValueError):
    pass


def serialize_event(event: AttackEvent) -> str:
    """Return the event as one JSON line (no trailing newline)."""
    record = {
        "id": event.event_id,
        "ts": format_ts(event.ts_ms),
        "vantage": event.vantage,
        "proto": event.transport,
        "src_ip": canonical_ip(event.src_ip),
        "src_port": event.src_port,
        "dst_port": event.dst_port,
        "service": event.service,
        "session": event.session_id,
        "bytes": event.payload_bytes,
        "excluded": event.excluded,
    }
    return json.dumps(record, separators=(",", ":"), ensure_ascii=False)


def parse_event(line: str | bytes) -> AttackEvent:
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        d = json.loads(line)
        if not isinstance(d, dict):
            raise MalformedEvent("not an object")
        event = AttackEvent(
            event_id=int(d["id"]),
            ts_ms=parse_ts(d["ts"]),
            vantage=str(d["vantage"]),
            transport=str(d["proto"]),
            src_ip=canonical_ip(str(d["src_ip"])),
            src_port=int(d["src_port"]),
            dst_port=int(d["dst_port"]),
            service=str(d["service"]),
            session_id=d.get("session"),
            payload_bytes=int(d.get("bytes", 0)),
            excluded=bool(d["excluded"]),
        )
    except MalformedEvent:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedEvent(str(exc)) from exc
    if event.transport not in ("tcp", "udp"):
        raise MalformedEvent(f"bad proto {event.transport!r}")
    if not (0 <= event.src_port <= 65535 and 0 <= event.dst_port <= 65535):
        raise MalformedEvent("port out of range")
    return event
