"""Append-only run trace: every backend call, gather, and filter event.

Events are plain dicts with a ``kind`` field, order-normalized within an
iteration by (stage, leaf id, call index) so bounded parallelism cannot
change the serialized log. A recorded trace replays a full agent iteration
without any backend.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping

_STAGE_ORDER = {"explain": 0, "decompose": 1, "gather": 2, "reason": 3, "filter": 4, "ensemble": 5}


def prompt_sha(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class TraceRecorder:
    """Collects events for one run; iterations are flushed in canonical order."""

    def __init__(self) -> None:
        self.events: list[dict] = []
        self._pending: list[dict] = []

    def record(self, kind: str, **fields) -> None:
        self._pending.append({"kind": kind, **fields})

    def flush_iteration(self, iteration: int) -> list[dict]:
        """Sort the iteration's events canonically and append them to the log."""
        def sort_key(e: dict):
            return (
                _STAGE_ORDER.get(str(e.get("stage", "")), 9),
                e.get("leaf_id") if isinstance(e.get("leaf_id"), int) else -1,
                int(e.get("call_index", 0)),
            )

        batch = sorted(self._pending, key=sort_key)
        for e in batch:
            e["iteration"] = iteration
        self._pending = []
        self.events.extend(batch)
        return batch


def append_events(path: str | Path, events: Iterable[Mapping]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True, ensure_ascii=False) + "\n")


def read_events(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
