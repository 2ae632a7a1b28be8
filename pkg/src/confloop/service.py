"""HTTP review service: run status, pending decisions, and trace audit.

The in-memory store is the bridge between a running pipeline thread and the
web layer: the pipeline publishes reports/traces and registers pending
review items; a POSTed decision flips the item to decided and wakes the
waiting interactive policy. Items only ever move pending -> decided.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

import uvicorn
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from .review import ACCEPT, REJECT, ReviewError, ReviewItem

log = logging.getLogger(__name__)


@dataclass
class RunState:
    run_id: str
    status: str = "running"  # running | completed | failed
    report: dict = field(default_factory=dict)
    items: dict[str, ReviewItem] = field(default_factory=dict)
    item_order: list[str] = field(default_factory=list)
    events: dict[str, threading.Event] = field(default_factory=dict)
    traces: dict[int, list[dict]] = field(default_factory=dict)


class RunStateStore:
    """Thread-safe registry of runs; implements the pipeline's status sink."""

    def __init__(self) -> None:
        self._runs: dict[str, RunState] = {}
        self._lock = threading.RLock()

    # -- pipeline side -------------------------------------------------

    def register_run(self, run_id: str) -> None:
        with self._lock:
            if run_id in self._runs:
                raise ValueError(f"run {run_id} already registered")
            self._runs[run_id] = RunState(run_id=run_id)

    def set_status(self, run_id: str, status: str) -> None:
        with self._lock:
            self._state(run_id).status = status

    def publish_report(self, run_id: str, report: dict) -> None:
        with self._lock:
            self._state(run_id).report = report

    def publish_trace(self, run_id: str, iteration: int, events: list[dict]) -> None:
        with self._lock:
            self._state(run_id).traces[iteration] = list(events)

    def publish_review(self, run_id: str, item: ReviewItem) -> None:
        with self._lock:
            state = self._state(run_id)
            if item.item_id not in state.items:
                state.item_order.append(item.item_id)
            state.items[item.item_id] = item

    def register_pending(self, run_id: str):
        """Returns the callable an interactive policy uses to park an item."""

        def register(item: ReviewItem) -> threading.Event:
            with self._lock:
                state = self._state(run_id)
                if item.item_id not in state.items:
                    state.item_order.append(item.item_id)
                state.items[item.item_id] = item
                event = threading.Event()
                state.events[item.item_id] = event
                return event

        return register

    # -- web side ------------------------------------------------------

    def list_runs(self) -> list[dict]:
        with self._lock:
            return [
                {
                    "run_id": s.run_id,
                    "status": s.status,
                    "iterations_completed": len(s.report.get("iterations", [])),
                    "pending_reviews": sum(1 for i in s.items.values() if i.status == "pending"),
                }
                for s in self._runs.values()
            ]

    def get_report(self, run_id: str) -> dict:
        with self._lock:
            state = self._state(run_id)
            return {"run_id": run_id, "status": state.status, **state.report}

    def pending_items(self, run_id: str) -> list[ReviewItem]:
        with self._lock:
            state = self._state(run_id)
            return [state.items[i] for i in state.item_order if state.items[i].status == "pending"]

    def decide(self, run_id: str, item_id: str, decisions: dict[str, str],
               feedback: str | None) -> ReviewItem:
        with self._lock:
            state = self._state(run_id)
            if item_id not in state.items:
                raise KeyError(item_id)
            item = state.items[item_id]
            item.mark_decided(decisions, "human", feedback)
            event = state.events.get(item_id)
        if event is not None:
            event.set()
        return item

    def trace(self, run_id: str, iteration: int) -> list[dict]:
        with self._lock:
            state = self._state(run_id)
            if iteration not in state.traces:
                raise KeyError(iteration)
            return list(state.traces[iteration])

    def _state(self, run_id: str) -> RunState:
        if run_id not in self._runs:
            raise KeyError(run_id)
        return self._runs[run_id]


class DecisionBody(BaseModel):
    decisions: dict[str, str]
    feedback: str | None = None


def build_app(store: RunStateStore, ui_dir: str | Path | None = None,
              cors_origins: tuple[str, ...] = ("*",)) -> FastAPI:
    app = FastAPI(title="confloop review service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=list(cors_origins),
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.get("/runs")
    def runs() -> list[dict]:
        return store.list_runs()

    @app.get("/runs/{run_id}")
    def run_report(run_id: str) -> dict:
        try:
            return store.get_report(run_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}") from None

    @app.get("/runs/{run_id}/reviews/pending")
    def pending(run_id: str) -> list[dict]:
        try:
            return [item.to_dict() for item in store.pending_items(run_id)]
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}") from None

    @app.post("/runs/{run_id}/reviews/{item_id}/decision")
    def decide(run_id: str, item_id: str, body: DecisionBody) -> dict:
        bad = {k: v for k, v in body.decisions.items() if v not in (ACCEPT, REJECT)}
        if bad:
            raise HTTPException(status_code=422, detail=f"decisions must be accept/reject: {bad}")
        try:
            item = store.decide(run_id, item_id, body.decisions, body.feedback)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=f"unknown run or item: {exc}") from None
        except ReviewError as exc:
            status = 409 if "already decided" in str(exc) else 422
            raise HTTPException(status_code=status, detail=str(exc)) from None
        return {"item_id": item.item_id, "status": item.status}

    @app.get("/runs/{run_id}/trace/{iteration}")
    def trace(run_id: str, iteration: int) -> list[dict]:
        try:
            return store.trace(run_id, iteration)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown run or iteration") from None

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


@dataclass
class ServiceHandle:
    server: uvicorn.Server
    thread: threading.Thread

    def stop(self) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=10)


def serve_review_api(store: RunStateStore, bind: str = "127.0.0.1:8000",
                     ui_dir: str | Path | None = None) -> ServiceHandle:
    """Start the API in a background thread; returns a stoppable handle."""
    host, _, port = bind.partition(":")
    app = build_app(store, ui_dir=ui_dir)
    config = uvicorn.Config(app, host=host or "127.0.0.1", port=int(port or 8000), log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True, name="confloop-review-api")
    thread.start()
    return ServiceHandle(server=server, thread=thread)
