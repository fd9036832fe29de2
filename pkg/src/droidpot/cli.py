"""``droidpot`` command line: run a probe, receive its logs, analyze them."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from . import __version__

log = logging.getLogger("droidpot")


def _setup_logging(level: str = "INFO"):
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def cmd_run(args) -> int:
    from .config import load_config
    from .daemon import EXIT_CONFIG, run_daemon
    from .model import ConfigError

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"droidpot: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _setup_logging(args.log_level or cfg.log_level)
    try:
        return run_daemon(cfg)
    except ConfigError as exc:
        print(f"droidpot: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def cmd_collector(args) -> int:
    from .config import parse_endpoint
    from .exporter import CollectorStub

    _setup_logging(args.log_level or "INFO")
    try:
        host, port = parse_endpoint(args.listen)
    except ValueError as exc:
        print(f"droidpot: --listen: {exc}", file=sys.stderr)
        return 2
    stub = CollectorStub(args.archive, host, port)
    try:
        stub.start()
    except OSError as exc:
        print(f"droidpot: cannot listen on {args.listen}: {exc}", file=sys.stderr)
        return 3
    log.info("collector listening on %s:%d, archiving to %s", host, stub.port, args.archive)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        stub.stop()
    return 0


def cmd_analyze(args) -> int:
    from .analysis import AsnDb, CachedResolver, CymruClient, EmptyInput, analyze

    _setup_logging(args.log_level or "WARNING")
    db = AsnDb.load(args.asn_db) if args.asn_db else AsnDb()
    resolver = db
    if args.cymru:
        resolver = CachedResolver(db, CymruClient())
    try:
        store, stats = analyze(args.logs, resolver, args.out, args.vantage, args.top_k)
    except EmptyInput as exc:
        print(f"droidpot: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"droidpot: {exc}", file=sys.stderr)
        return 1
    for s in stats:
        tcp, udp = s.transport["tcp"], s.transport["udp"]
        print(f"{s.vantage}: tcp {tcp[0]} ports / {tcp[1]} attacks, udp {udp[0]} ports / {udp[1]} attacks, "
              f"{s.hourly.mean:.2f} per hour")
    print(f"excluded {store.excluded}, malformed {store.skipped}, duplicates {store.duplicates}; "
          f"report in {args.out}")
    return 0


def _targets(args):
    from .config import parse_endpoint
    from .sim import Targets

    host, port = parse_endpoint(args.target, 0)
    t = Targets(host=host, data_dir=args.data_dir, source=args.source)
    for item in args.port or []:
        name, _, value = item.partition("=")
        if name.isdigit():
            t.trap_ports[int(name)] = int(value)
        else:
            t.ports[name] = int(value)
    return t, port


def cmd_sim_run(args) -> int:
    from .sim import AttackScript, ScriptError, load_builtin, run_script

    try:
        script = AttackScript.load(args.script) if os.path.exists(args.script) else load_builtin(args.script)
    except (ScriptError, OSError, ValueError) as exc:
        print(f"droidpot: {exc}", file=sys.stderr)
        return 2
    targets, port = _targets(args)
    service = script.connect.get("service", "port_trap")
    if port:
        if service == "port_trap":
            targets.trap_ports.setdefault(int(script.connect["port"]), port)
        else:
            targets.ports.setdefault(service, port)
    ok = True
    for i in range(args.repeat):
        result = run_script(script, targets, args.seed + i)
        ok = ok and result.passed
        print(f"{script.name}: {'pass' if result.passed else 'FAIL'}")
        for err in result.errors:
            print("  " + err)
        for line in result.diff:
            print("  " + line)
    return 0 if ok else 1


def cmd_sim_gen(args) -> int:
    from .sim import CorpusError, CorpusSpec, generate_corpus, umts_fixture_spec

    try:
        if args.spec == "umts-fixture":
            spec = umts_fixture_spec()
        else:
            spec = CorpusSpec.load(args.spec)
        if args.seed is not None:
            spec.seed = args.seed
        paths = generate_corpus(spec, args.out)
    except (CorpusError, OSError, ValueError) as exc:
        print(f"droidpot: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(paths, indent=1))
    return 0


def cmd_fs_validate(args) -> int:
    from .vfs import ManifestError, load_manifest_file

    try:
        image = load_manifest_file(args.manifest)
    except (ManifestError, OSError) as exc:
        print(f"invalid manifest: {exc}", file=sys.stderr)
        return 1
    print(f"ok: {len(image)} nodes ({image.manifest_version or 'unversioned'})")
    return 0


def cmd_log_scan(args) -> int:
    from .sink import rotated_logs, scan_log

    paths = []
    for p in args.logs:
        if args.with_rotated:
            paths.extend(rotated_logs(p))
        paths.append(p)
    scan = scan_log(paths)
    quarantine = [p + ".quarantine" for p in args.logs if os.path.exists(p + ".quarantine")]
    print(json.dumps({
        "lines": scan.lines, "first_id": scan.first_id, "last_id": scan.last_id,
        "gaps": scan.gaps, "out_of_order": scan.out_of_order, "malformed": scan.malformed,
        "partial_tail": scan.partial_tail, "quarantine_files": quarantine,
    }, indent=1))
    return 0 if scan.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="droidpot", description=__doc__)
    p.add_argument("--version", action="version", version=f"droidpot {__version__}")
    p.add_argument("--log-level", default=None)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the honeypot daemon")
    r.add_argument("--config", "-c", help="config file (default: $DROIDPOT_CONFIG)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("collector", help="run the log collector stub")
    c.add_argument("--listen", required=True, help="host:port")
    c.add_argument("--archive", default="collector-archive", help="archive directory")
    c.set_defaults(func=cmd_collector)

    a = sub.add_parser("analyze", help="compute statistics and reports from event logs")
    a.add_argument("--logs", nargs="+", required=True, help="log files or globs")
    a.add_argument("--asn-db", help='snapshot file of "prefix asn as_name" lines')
    a.add_argument("--vantage", action="append", help="restrict to vantage (repeatable)")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--top-k", type=int, default=10)
    a.add_argument("--cymru", action="store_true", help="resolve ASNs online, snapshot as fallback")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sim", help="attack scripts and synthetic corpora")
    ssub = s.add_subparsers(dest="sim_command", required=True)
    sr = ssub.add_parser("run", help="play an attack script against a daemon")
    sr.add_argument("--script", required=True, help="script file or built-in name")
    sr.add_argument("--target", required=True, help="host[:port]")
    sr.add_argument("--port", action="append", help="service=port or trapport=actual (repeatable)")
    sr.add_argument("--data-dir", help="daemon data directory, to check what it recorded")
    sr.add_argument("--source", help="local address to connect from")
    sr.add_argument("--seed", type=int, default=0)
    sr.add_argument("--repeat", type=int, default=1)
    sr.set_defaults(func=cmd_sim_run)
    sg = ssub.add_parser("gen", help="generate a synthetic corpus with ground truth")
    sg.add_argument("--spec", required=True, help='spec file, or "umts-fixture"')
    sg.add_argument("--out", required=True)
    sg.add_argument("--seed", type=int)
    sg.set_defaults(func=cmd_sim_gen)

    f = sub.add_parser("fs-manifest", help="filesystem manifest tools")
    fsub = f.add_subparsers(dest="fs_command", required=True)
    fv = fsub.add_parser("validate", help="check a manifest file")
    fv.add_argument("manifest", nargs="?", help="manifest file (default: bundled)")
    fv.set_defaults(func=cmd_fs_validate)

    ls = sub.add_parser("log-scan", help="check event logs for id gaps and corrupt lines")
    ls.add_argument("logs", nargs="+")
    ls.add_argument("--with-rotated", action="store_true", help="include rotated siblings first")
    ls.set_defaults(func=cmd_log_scan)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
