"""Transmission schedules for gossip, ring and line protocols.

A schedule is the single source of truth for the order of local training
sessions: event ``k`` says that ``receiver`` trains next, starting from the
model held by ``sender``.  Exactly one model is in flight, so every event's
sender is the previous event's receiver.  The very first sender is
``SOURCE``, the shared initial model.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ConfigError
from .rng import GOSSIP, make_rng

SOURCE = -1
PROTOCOLS = ("gossip", "ring", "line")


@dataclass(frozen=True)
class TransmissionEvent:
    round: int
    step: int
    sender: int
    receiver: int


@dataclass(frozen=True)
class Schedule:
    events: tuple[TransmissionEvent, ...]
    protocol: str
    clients: tuple[int, ...]
    rounds: int
    seed: int | None = None

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def by_round(self) -> list[list[TransmissionEvent]]:
        out: list[list[TransmissionEvent]] = [[] for _ in range(self.rounds)]
        for ev in self.events:
            out[ev.round].append(ev)
        return out

    def receivers(self) -> list[int]:
        return [ev.receiver for ev in self.events]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "step", "sender", "receiver"])
        for ev in self.events:
            sender = "SOURCE" if ev.sender == SOURCE else ev.sender
            w.writerow([ev.round, ev.step, sender, ev.receiver])
        return buf.getvalue()


def _check(clients: Iterable[int], rounds: int) -> tuple[int, ...]:
    ids = tuple(sorted(int(c) for c in clients))
    if len(ids) < 2:
        raise ConfigError(f"a schedule needs at least 2 clients, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate client ids")
    if rounds < 1:
        raise ConfigError(f"rounds must be >= 1, got {rounds}")
    return ids


def _chain(receivers: Sequence[int], per_round: int) -> tuple[TransmissionEvent, ...]:
    events = []
    holder = SOURCE
    for k, r in enumerate(receivers):
        events.append(TransmissionEvent(k // per_round, k % per_round, holder, r))
        holder = r
    return tuple(events)


def ring_schedule(clients: Iterable[int], rounds: int) -> Schedule:
    ids = _check(clients, rounds)
    return Schedule(_chain(list(ids) * rounds, len(ids)), "ring", ids, rounds)


def line_schedule(clients: Iterable[int]) -> Schedule:
    ring = ring_schedule(clients, 1)
    return Schedule(ring.events, "line", ring.clients, 1)


def gossip_schedule(clients: Iterable[int], rounds: int, seed: int) -> Schedule:
    """Random walk over clients without self-loops, ``len(clients)`` hops per round."""
    ids = _check(clients, rounds)
    rng = make_rng(seed, GOSSIP)
    n = len(ids)
    receivers = []
    current = int(rng.integers(n))
    receivers.append(ids[current])
    for _ in range(n * rounds - 1):
        # Uniform over the n - 1 clients other than the holder.
        nxt = int(rng.integers(n - 1))
        current = nxt + 1 if nxt >= current else nxt
        receivers.append(ids[current])
    return Schedule(_chain(receivers, n), "gossip", ids, rounds, seed)


def make_schedule(protocol: str, clients: Iterable[int], rounds: int, seed: int) -> Schedule:
    if protocol == "gossip":
        return gossip_schedule(clients, rounds, seed)
    if protocol == "ring":
        return ring_schedule(clients, rounds)
    if protocol == "line":
        return line_schedule(clients)
    raise ConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")


def receive_counts(schedule: Schedule) -> dict[int, int]:
    counts = dict.fromkeys(schedule.clients, 0)
    for ev in schedule.events:
        counts[ev.receiver] += 1
    return counts


def unvisited_after(schedule: Schedule) -> list[int]:
    """Number of clients still unvisited at the end of each round."""
    seen: set[int] = set()
    out = []
    for events in schedule.by_round():
        seen.update(ev.receiver for ev in events)
        out.append(len(schedule.clients) - len(seen))
    return out

