"""Command-line entry point: ``adaptmem <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import AppConfig
from .errors import MalformedRecord, MemoryEngineError
from .evaluation import ingest_corpus, run_eval
from .pipeline import MemoryEngine, Mode, render_evidence

logger = logging.getLogger("adaptmem")


def _fresh_session(engine: MemoryEngine):
    """A session id not used by anything already stored."""
    used = [e.meta.turn_id.session for e in engine.store.all_records()]
    return engine.open_session(max(used, default=-1) + 1)


def cmd_ingest(engine: MemoryEngine, args) -> int:
    try:
        summary = ingest_corpus(args.corpus, engine)
    except MalformedRecord as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.summary is not None:
            print(json.dumps({"partial": exc.summary.to_dict()}), file=sys.stderr)
        return 2
    print(json.dumps(summary.to_dict()))
    return 0


def cmd_query(engine: MemoryEngine, args) -> int:
    session = _fresh_session(engine)
    mode = Mode.RETRIEVAL_ONLY if args.retrieval_only else Mode.FULL_INFERENCE
    out = engine.answer_query(session, args.text, mode=mode)
    if args.json:
        print(json.dumps(out.to_dict(), indent=2, ensure_ascii=False))
    elif mode is Mode.RETRIEVAL_ONLY:
        print(render_evidence(out.validated))
    else:
        print(out.response)
    return 0


def cmd_chat(engine: MemoryEngine, args) -> int:
    session = _fresh_session(engine)
    print(f"session {session.id}; empty line or /quit to exit", file=sys.stderr)
    for line in sys.stdin:
        text = line.strip()
        if not text or text == "/quit":
            break
        out = engine.process_turn(session, text)
        print(out.response)
        if out.degraded:
            print(f"(memory not updated: {'; '.join(out.errors)})", file=sys.stderr)
        sys.stdout.flush()
    return 0


def cmd_eval(engine: MemoryEngine, args) -> int:
    report = run_eval(args.qa, engine, session=_fresh_session(engine))
    print(report.to_table())
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    return 0


def cmd_serve(engine: MemoryEngine, args) -> int:
    from .service import make_server

    server = make_server(engine, args.host, args.port)
    print(f"listening on http://{args.host}:{server.server_address[1]}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_compact(engine: MemoryEngine, args) -> int:
    removed = engine.store.compact()
    print(json.dumps({"removed_tombstones": removed, "live_entries": len(engine.store)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptmem", description="Multi-granularity conversational memory.")
    p.add_argument("-c", "--config", help="JSON config file (defaults: offline backend, ./adaptmem-store)")
    p.add_argument("--store", help="override the store path from the config")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="run a JSONL corpus through the pipeline")
    s.add_argument("corpus")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("query", help="answer one question from memory without storing it")
    s.add_argument("text")
    s.add_argument("--retrieval-only", action="store_true", help="print validated evidence, skip the answer")
    s.add_argument("--json", action="store_true", help="print the full turn outcome")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("chat", help="interactive session; every line is stored")
    s.set_defaults(func=cmd_chat)

    s = sub.add_parser("eval", help="score a QA set against the store")
    s.add_argument("qa")
    s.add_argument("--report", help="write the JSON report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("serve", help="start the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("compact", help="physically drop tombstoned entries")
    s.set_defaults(func=cmd_compact)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = AppConfig.load(args.config)
        if args.store:
            cfg.store_path = args.store
        engine = cfg.build_engine()
    except (OSError, ValueError, MemoryEngineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(engine, args)
    except MemoryEngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        engine.store.close()


if __name__ == "__main__":
    sys.exit(main())
