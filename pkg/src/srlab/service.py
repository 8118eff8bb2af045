"""Session service: search control and streaming progress over HTTP.

Each session owns one immutable dataset copy and one background search
thread.  Progress is published as an append-only event log with a
per-session sequence number; subscribers reconnect with the last number
they saw and receive exactly the missed suffix.  Control and query
handlers only ever take the session lock for snapshot reads and flag
flips, so a running search is never blocked by them.
"""
from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterator, Mapping

from fastapi import Body, FastAPI, HTTPException, Request
from fastapi.responses import StreamingResponse

from .dataset import Dataset, DatasetError
from .expr import ExpressionError, format_expression
from .runspec import RunSpec, RunSpecError, build_dataset, runspec_from_mapping
from .search import (
    Candidate,
    ProgressEvent,
    SearchError,
    residuals,
    run_search,
)

#: seconds between periodic status events
_STATUS_PERIOD = 0.5


class Session:
    """One search run: state machine, event log, archive snapshots."""

    def __init__(self, sid: str, spec: RunSpec, data: Dataset):
        self.id = sid
        self.spec = spec
        self.data = data
        self.state = "idle"
        self.created = time.time()
        self.transitions: list[dict[str, Any]] = [
            {"state": "idle", "time": self.created}]
        self.events: list[dict[str, Any]] = []
        self.frontier: list[Candidate] = []
        self.error: str | None = None
        self.closed = False
        self.cond = threading.Condition()
        self._stopping = threading.Event()
        self._thread: threading.Thread | None = None
        self._started = 0.0
        self._last_status = 0.0

    # -- event log ---------------------------------------------------------

    def _append(self, kind: str, seconds: float, payload: Mapping[str, Any]):
        # callers hold self.cond
        self.events.append({
            "seq": len(self.events) + 1,
            "time": seconds,
            "kind": kind,
            "payload": dict(payload),
        })
        self.cond.notify_all()

    def _set_state(self, state: str):
        # callers hold self.cond
        self.state = state
        self.transitions.append({"state": state, "time": time.time()})
        self._append("state", self._elapsed(), {"state": state})

    def _elapsed(self) -> float:
        return time.monotonic() - self._started if self._started else 0.0

    # -- search-thread callbacks --------------------------------------------

    def _sink(self, event: ProgressEvent):
        c = event.candidate
        with self.cond:
            self.frontier = [c2 for c2 in self.frontier
                             if c2.complexity != c.complexity]
            self.frontier.append(c)
            self.frontier.sort(key=lambda c2: c2.complexity)
            self.frontier = [c2 for c2 in self.frontier
                             if not any(o.complexity < c2.complexity
                                        and o.validation_fitness
                                        <= c2.validation_fitness
                                        for o in self.frontier)]
            self._append("frontier", event.seconds, {
                "generation": event.generation,
                "complexity": c.complexity,
                "train_fitness": c.train_fitness,
                "validation_fitness": c.validation_fitness,
                "expression": format_expression(c.expression),
            })

    def _gate(self, generation: int, evaluations: int):
        now = self._elapsed()
        with self.cond:
            if generation == 1 or now - self._last_status >= _STATUS_PERIOD:
                self._last_status = now
                best = self.frontier[-1].validation_fitness \
                    if self.frontier else None
                self._append("status", now, {
                    "generation": generation,
                    "evaluations": evaluations,
                    "evaluations_per_second": evaluations / now if now > 0
                    else 0.0,
                    "archive_size": len(self.frontier),
                    "best_validation": best,
                })
            while self.state == "paused" and not self._stopping.is_set():
                self.cond.wait(timeout=0.1)

    def _run(self):
        self._started = time.monotonic()
        try:
            run_search(self.spec.config, self.data, self.spec.template,
                       sink=self._sink, should_stop=self._stopping.is_set,
                       on_generation=self._gate)
        except (SearchError, DatasetError, ExpressionError) as exc:
            with self.cond:
                self.error = str(exc)
                self._set_state("stopped")
                self.closed = True
                self.cond.notify_all()
            return
        with self.cond:
            self._set_state("stopped" if self._stopping.is_set()
                            else "finished")
            self.closed = True
            self.cond.notify_all()

    # -- control -----------------------------------------------------------

    def start(self):
        with self.cond:
            if self.state == "idle":
                self._set_state("running")
                self._thread = threading.Thread(target=self._run, daemon=True)
                self._thread.start()
            elif self.state == "paused":
                self._set_state("running")
                self.cond.notify_all()
            elif self.state != "running":
                raise _illegal(f"cannot start a {self.state} session")

    def pause(self):
        with self.cond:
            if self.state == "running":
                self._set_state("paused")
            elif self.state != "paused":
                raise _illegal(f"cannot pause a {self.state} session")

    def stop(self):
        with self.cond:
            if self.state in ("stopped", "finished"):
                return
            if self.state == "idle":
                self._set_state("stopped")
                self.closed = True
                self.cond.notify_all()
                return
            self._stopping.set()
            self.cond.notify_all()
        thread = self._thread
        if thread is not None:
            thread.join()

    # -- queries -----------------------------------------------------------

    def descriptor(self) -> dict[str, Any]:
        with self.cond:
            template = self.spec.template
            return {
                "id": self.id,
                "state": self.state,
                "created": self.created,
                "transitions": list(self.transitions),
                "dataset": {"rows": self.data.n_rows,
                            "columns": list(self.data.names)},
                "template": {
                    "dependent": template.dependent,
                    "slots": [list(args) for args in template.slots],
                    "constraints": len(template.constraints),
                },
                "config": asdict(self.spec.config),
                "error": self.error,
                "events": len(self.events),
            }

    def archive_rows(self) -> list[dict[str, Any]]:
        with self.cond:
            return [{
                "complexity": c.complexity,
                "train_fitness": c.train_fitness,
                "validation_fitness": c.validation_fitness,
                "expression": format_expression(c.expression),
                "generation": c.generation,
            } for c in self.frontier]

    def residual_table(self, level: int) -> dict[str, Any]:
        with self.cond:
            match = [c for c in self.frontier if c.complexity == level]
        if not match:
            raise HTTPException(404, f"no archive entry at complexity {level}")
        c = match[0]
        table = residuals(c.expression, self.data,
                          self.spec.template.dependent)
        return {
            "complexity": c.complexity,
            "expression": format_expression(c.expression),
            "columns": list(table.names),
            "rows": [[float(col[i]) for col in table.columns]
                     for i in range(table.n_rows)],
        }

    def event_stream(self, since: int) -> Iterator[str]:
        last = max(0, since)
        while True:
            with self.cond:
                while len(self.events) <= last and not self.closed:
                    self.cond.wait(timeout=10.0)
                batch = self.events[last:]
                done = self.closed
            for record in batch:
                last = record["seq"]
                yield (f"id: {record['seq']}\n"
                       f"event: {record['kind']}\n"
                       f"data: {json.dumps(record)}\n\n")
            if done and not batch:
                return
            if done:
                with self.cond:
                    if last >= len(self.events):
                        return


def _illegal(message: str) -> HTTPException:
    return HTTPException(409, message)


def build_app(base_dir: Path | None = None) -> FastAPI:
    """The session service; `base_dir` anchors relative CSV paths."""
    app = FastAPI(title="srlab session service")
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()
    counter = [0]

    def lookup(sid: str) -> Session:
        with registry_lock:
            session = sessions.get(sid)
        if session is None:
            raise HTTPException(404, f"unknown session {sid!r}")
        return session

    @app.post("/sessions")
    def create_session(spec: dict = Body(...)) -> dict[str, Any]:
        try:
            parsed = runspec_from_mapping(spec, base)
            data = build_dataset(parsed)
        except (RunSpecError, DatasetError, SearchError,
                ExpressionError) as exc:
            raise HTTPException(422, str(exc)) from None
        with registry_lock:
            counter[0] += 1
            sid = f"s{counter[0]}"
            sessions[sid] = Session(sid, parsed, data)
        return {"id": sid, "state": "idle"}

    @app.get("/sessions/{sid}")
    def get_session(sid: str) -> dict[str, Any]:
        return lookup(sid).descriptor()

    @app.post("/sessions/{sid}/start")
    def start(sid: str) -> dict[str, Any]:
        session = lookup(sid)
        session.start()
        return session.descriptor()

    @app.post("/sessions/{sid}/pause")
    def pause(sid: str) -> dict[str, Any]:
        session = lookup(sid)
        session.pause()
        return session.descriptor()

    @app.post("/sessions/{sid}/stop")
    def stop(sid: str) -> dict[str, Any]:
        session = lookup(sid)
        session.stop()
        return session.descriptor()

    @app.get("/sessions/{sid}/archive")
    def get_archive(sid: str) -> dict[str, Any]:
        session = lookup(sid)
        return {"id": sid, "rows": session.archive_rows()}

    @app.get("/sessions/{sid}/residuals")
    def get_residuals(sid: str, complexity: int) -> dict[str, Any]:
        return lookup(sid).residual_table(complexity)

    @app.get("/sessions/{sid}/events")
    def subscribe(sid: str, request: Request, since: int = 0):
        session = lookup(sid)
        header = request.headers.get("last-event-id")
        if header is not None:
            try:
                since = max(since, int(header))
            except ValueError:
                raise HTTPException(400, "Last-Event-ID must be an integer") \
                    from None
        return StreamingResponse(session.event_stream(since),
                                 media_type="text/event-stream")

    return app


def serve(port: int = 8000, host: str = "127.0.0.1"):
    """Run the service until interrupted."""
    import uvicorn

    uvicorn.run(build_app(), host=host, port=port)
