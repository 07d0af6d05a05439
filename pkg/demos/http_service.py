"""Start the HTTP service in-process and talk to it with httpx.

Uses the offline backend and a throwaway store. Run with
``python demos/http_service.py``.
"""

from __future__ import annotations

import json
import tempfile
import threading

import httpx

from adaptmem import AppConfig
from adaptmem.service import make_server


def show(label: str, resp: httpx.Response) -> dict:
    body = resp.json()
    print(f"{label} -> {resp.status_code}")
    return body


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        engine = AppConfig(store_path=tmp, fsync=False).build_engine()
        server = make_server(engine, "127.0.0.1", 0)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        base = f"http://127.0.0.1:{server.server_address[1]}"
        try:
            with httpx.Client(base_url=base, timeout=10) as client:
                sid = show("POST /sessions", client.post("/sessions", json={}))["session_id"]
                for text in ("My brother Tomas plays the cello.", "He performs in Prague every June."):
                    out = show(f"POST /sessions/{sid}/turns", client.post(f"/sessions/{sid}/turns", json={"text": text}))
                    print(f"  actions {out['actions_taken']}, committed {out['committed_ids']}")
                q = show(f"POST /sessions/{sid}/query",
                         client.post(f"/sessions/{sid}/query", json={"question": "What instrument does Tomas play?"}))
                print(f"  answer: {q['response']}")
                mem = show(f"GET /sessions/{sid}/memory?granularity=fact",
                           client.get(f"/sessions/{sid}/memory", params={"granularity": "fact"}))
                print(json.dumps([e["content"] for e in mem["entries"]], indent=2))
                show("GET /sessions/42/memory", client.get("/sessions/42/memory"))
        finally:
            server.shutdown()
            server.server_close()
            engine.store.close()


if __name__ == "__main__":
    main()
