"""Deterministic discrete-event kernel.

Virtual time is in milliseconds.  Events fire in ``(fire_time, seq)`` order,
so two events scheduled for the same instant dispatch in the order they were
scheduled.  Every component draws randomness from its own child stream,
derived from the root seed and the component id.
"""
from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable

DEFAULT_SAME_INSTANT_CAP = 10**6


class LivelockError(RuntimeError):
    """Too many events fired at one virtual instant."""

    def __init__(self, time: int, count: int, target: str):
        super().__init__(
            f"livelock: {count} events at t={time} ms (last target {target!r})"
        )
        self.time = time
        self.count = count
        self.target = target


@dataclass(order=True)
class Event:
    fire_time: int
    seq: int
    target: str = field(compare=False)
    payload: Callable[[], Any] = field(compare=False)


def derive_seed(*parts: Any) -> int:
    h = hashlib.sha256(":".join(str(p) for p in parts).encode())
    return int.from_bytes(h.digest()[:8], "big")


class TraceLog:
    """Append-only record of every wire message and its outcome."""

    def __init__(self):
        self.entries: list[dict] = []
        self._occurrences: dict[tuple, int] = {}

    def record(self, time, channel, key, operation, outcome) -> dict:
        k = (channel, tuple(key))
        n = self._occurrences.get(k, 0) + 1
        self._occurrences[k] = n
        entry = {
            "time": time,
            "channel": channel,
            "key": list(key),
            "operation": operation,
            "occurrence_index": n,
            "outcome": outcome,
        }
        self.entries.append(entry)
        return entry

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)


class Kernel:
    def __init__(self, seed: int = 0, same_instant_cap: int = DEFAULT_SAME_INSTANT_CAP):
        self.seed = seed
        self.now = 0
        self.same_instant_cap = same_instant_cap
        self.trace = TraceLog()
        # controller decisions, one dict per decision with a reason string
        self.decisions: list[dict] = []
        self._queue: list[Event] = []
        self._seq = itertools.count()
        self._cancelled: set[int] = set()
        self._rngs: dict[str, random.Random] = {}
        self._instant = (-1, 0)
        self.dispatched = 0

    def rng(self, component: str) -> random.Random:
        r = self._rngs.get(component)
        if r is None:
            r = self._rngs[component] = random.Random(derive_seed(self.seed, component))
        return r

    def schedule(self, delay: int, target: str, payload: Callable[[], Any]) -> int:
        if delay < 0:
            raise ValueError(f"negative delay {delay}")
        seq = next(self._seq)
        heapq.heappush(self._queue, Event(self.now + int(delay), seq, target, payload))
        return seq

    def schedule_at(self, time: int, target: str, payload: Callable[[], Any]) -> int:
        return self.schedule(max(0, int(time) - self.now), target, payload)

    def cancel(self, event_id: int) -> None:
        self._cancelled.add(event_id)

    def pending(self) -> int:
        return len(self._queue)

    def peek_time(self) -> int | None:
        return self._queue[0].fire_time if self._queue else None

    def decide(self, component: str, action: str, reason: str, **detail) -> None:
        entry = {"time": self.now, "component": component, "action": action, "reason": reason}
        entry.update(detail)
        self.decisions.append(entry)

    def step(self) -> bool:
        """Dispatch one event; False when the queue is empty."""
        while self._queue:
            ev = heapq.heappop(self._queue)
            if ev.seq in self._cancelled:
                self._cancelled.discard(ev.seq)
                continue
            if ev.fire_time == self._instant[0]:
                count = self._instant[1] + 1
            else:
                count = 1
            self._instant = (ev.fire_time, count)
            if count > self.same_instant_cap:
                raise LivelockError(ev.fire_time, count, ev.target)
            self.now = ev.fire_time
            self.dispatched += 1
            ev.payload()
            return True
        return False

    def run_until(self, t_end: int, stop: Callable[[], bool] | None = None) -> int:
        if t_end < self.now:
            raise ValueError(f"t_end {t_end} is before now {self.now}")
        while self._queue and self._queue[0].fire_time <= t_end:
            self.step()
            if stop is not None and stop():
                return self.now
        self.now = t_end
        return self.now
