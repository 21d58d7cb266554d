"""Churn traces: parsing IRC-style event logs, repair, discretization into rounds."""

from __future__ import annotations

import bisect
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, TextIO, Tuple

import numpy as np

logger = logging.getLogger(__name__)

UserTag = str
Interval = Tuple[int, int]

EVENT_KINDS = ("JOIN", "LEAVE", "MSG", "NICK")


class TraceError(ValueError):
    pass


class TraceParseError(TraceError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class TraceEvent:
    time: int
    user: UserTag
    kind: str
    new_user: Optional[UserTag] = None  # only for NICK


@dataclass(frozen=True)
class Trace:
    """Per-user online intervals and message times over ``[0, horizon]``.

    Intervals are half-open ``[start, end)`` and sorted per user. Nick
    changes seen while parsing are kept as ``(time, old, new)`` so that
    :func:`repair_reconnects` can undo reconnect renames.
    """

    users: Tuple[UserTag, ...]
    timelines: Mapping[UserTag, Tuple[Interval, ...]]
    messages: Mapping[UserTag, Tuple[int, ...]]
    horizon: int
    nick_changes: Tuple[Tuple[int, UserTag, UserTag], ...] = ()

    def validate(self) -> None:
        for u in self.users:
            prev_end = None
            for start, end in self.timelines.get(u, ()):
                if not 0 <= start < end <= self.horizon:
                    raise TraceError(f"{u}: interval [{start},{end}) outside [0,{self.horizon}]")
                if prev_end is not None and start < prev_end:
                    raise TraceError(f"{u}: overlapping intervals")
                prev_end = end
            ivs = self.timelines.get(u, ())
            for t in self.messages.get(u, ()):
                if not any(s <= t < e for s, e in ivs):
                    raise TraceError(f"{u}: message at {t} outside online intervals")

    def online_at(self, t: int) -> frozenset:
        return frozenset(u for u in self.users if _covers(self.timelines.get(u, ()), t))


def _covers(ivs: Sequence[Interval], t: int) -> bool:
    i = bisect.bisect_right(ivs, (t, math.inf)) - 1
    return i >= 0 and ivs[i][0] <= t < ivs[i][1]


def _make_trace(timelines, messages, horizon, nick_changes=()) -> Trace:
    users = tuple(sorted(set(timelines) | set(messages)))
    return Trace(
        users=users,
        timelines={u: tuple(timelines.get(u, ())) for u in users},
        messages={u: tuple(sorted(messages.get(u, ()))) for u in users},
        horizon=horizon,
        nick_changes=tuple(nick_changes),
    )


# --------------------------------------------------------------------------
# Event log parsing

def parse_events(stream: Iterable[str]) -> Iterator[Tuple[int, TraceEvent]]:
    """Yield ``(lineno, event)`` for each non-blank line of an event log."""
    last_time = None
    for lineno, raw in enumerate(stream, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 3:
            raise TraceParseError(lineno, f"expected '<time> <KIND> <tag>', got {line!r}")
        try:
            t = int(parts[0])
        except ValueError:
            raise TraceParseError(lineno, f"bad timestamp {parts[0]!r}") from None
        if t < 0:
            raise TraceParseError(lineno, "negative timestamp")
        kind = parts[1].upper()
        if kind not in EVENT_KINDS:
            raise TraceParseError(lineno, f"unknown event kind {parts[1]!r}")
        expected = 4 if kind == "NICK" else 3
        if len(parts) != expected:
            raise TraceParseError(lineno, f"{kind} takes {expected - 2} tag(s)")
        if last_time is not None and t < last_time:
            raise TraceParseError(lineno, f"timestamp {t} goes backwards (previous {last_time})")
        last_time = t
        yield lineno, TraceEvent(t, parts[2], kind, parts[3] if kind == "NICK" else None)


def parse_trace(stream: Iterable[str]) -> Trace:
    """Build a :class:`Trace` from a line-oriented event log.

    A MSG from a user with no open interval opens one at that instant. A user
    still online at end of stream is closed at the horizon, which is the last
    event time (plus one second if anything was still open, so that the last
    instant is inside the interval).
    """
    open_at: Dict[UserTag, int] = {}
    last_msg: Dict[UserTag, int] = {}
    timelines: Dict[UserTag, List[Interval]] = {}
    messages: Dict[UserTag, List[int]] = {}
    nicks: List[Tuple[int, UserTag, UserTag]] = []
    horizon = 0

    def close(u: UserTag, t: int) -> None:
        start = open_at.pop(u)
        end = max(t, last_msg.get(u, -1) + 1)
        if end > start:
            _append_interval(timelines.setdefault(u, []), start, end)

    for lineno, ev in parse_events(stream):
        horizon = ev.time
        u = ev.user
        if ev.kind == "JOIN":
            if u in open_at:
                logger.debug("line %d: duplicate JOIN for %s ignored", lineno, u)
            else:
                open_at[u] = ev.time
        elif ev.kind == "LEAVE":
            if u in open_at:
                close(u, ev.time)
            else:
                logger.warning("line %d: LEAVE for %s who is not online", lineno, u)
        elif ev.kind == "MSG":
            if u not in open_at:
                logger.warning("line %d: MSG from %s with no open interval; opening one", lineno, u)
                open_at[u] = ev.time
            messages.setdefault(u, []).append(ev.time)
            last_msg[u] = ev.time
        else:
            new = ev.new_user
            nicks.append((ev.time, u, new))
            if u in open_at:
                close(u, ev.time)
            if new not in open_at:
                open_at[new] = ev.time

    if open_at:
        end_time = max(horizon, max(last_msg.get(u, -1) for u in open_at)) + 1
        for u in sorted(open_at):
            close(u, end_time)
        horizon = end_time
    if not timelines and not messages:
        horizon = 0
    trace = _make_trace(timelines, messages, horizon, nicks)
    return trace


def _append_interval(ivs: List[Interval], start: int, end: int) -> None:
    # A re-join at the same instant as the previous leave extends the interval.
    if ivs and start <= ivs[-1][1]:
        ivs[-1] = (ivs[-1][0], max(ivs[-1][1], end))
    else:
        ivs.append((start, end))


def to_event_log(trace: Trace) -> List[str]:
    """Re-emit a trace as JOIN/MSG/LEAVE lines (nick changes are not replayed)."""
    events: List[Tuple[int, int, UserTag, str]] = []
    # Ordering within one instant: LEAVE before JOIN before MSG.
    for u in trace.users:
        for s, e in trace.timelines.get(u, ()):
            events.append((s, 1, u, "JOIN"))
            events.append((e, 0, u, "LEAVE"))
        for t in trace.messages.get(u, ()):
            events.append((t, 2, u, "MSG"))
    events.sort()
    return [f"{t} {kind} {u}" for t, _, u, kind in events]


# --------------------------------------------------------------------------
# Canonical CSV serialization

def write_trace(trace: Trace, intervals: TextIO, messages: TextIO) -> None:
    w = csv.writer(intervals, lineterminator="\n")
    w.writerow(["user", "start", "end"])
    for u in trace.users:
        for s, e in trace.timelines.get(u, ()):
            w.writerow([u, s, e])
    w = csv.writer(messages, lineterminator="\n")
    w.writerow(["user", "time"])
    for u in trace.users:
        for t in trace.messages.get(u, ()):
            w.writerow([u, t])


def read_trace(intervals: TextIO, messages: TextIO, horizon: Optional[int] = None) -> Trace:
    """Inverse of :func:`write_trace`; the horizon defaults to the last interval end."""
    timelines: Dict[UserTag, List[Interval]] = {}
    msgs: Dict[UserTag, List[int]] = {}
    reader = csv.reader(intervals)
    if next(reader, None) != ["user", "start", "end"]:
        raise TraceError("interval CSV must start with header user,start,end")
    for row in reader:
        if row:
            timelines.setdefault(row[0], []).append((int(row[1]), int(row[2])))
    reader = csv.reader(messages)
    if next(reader, None) != ["user", "time"]:
        raise TraceError("message CSV must start with header user,time")
    for row in reader:
        if row:
            msgs.setdefault(row[0], []).append(int(row[1]))
    for ivs in timelines.values():
        ivs.sort()
    if horizon is None:
        horizon = max((ivs[-1][1] for ivs in timelines.values() if ivs), default=0)
    trace = _make_trace(timelines, msgs, horizon)
    trace.validate()
    return trace


# --------------------------------------------------------------------------
# Repair

def _nick_cycles(nick_changes: Sequence[Tuple[int, UserTag, UserTag]]) -> Dict[UserTag, UserTag]:
    """Map secondary tag -> original tag for every old->new->old rename cycle."""
    pending: Dict[UserTag, UserTag] = {}  # new -> old, awaiting the switch back
    alias: Dict[UserTag, UserTag] = {}
    for _, old, new in nick_changes:
        if pending.get(old) == new:
            del pending[old]
            if old != new:
                alias[old] = new
        else:
            pending[new] = old
    # Collapse chains so every alias points at a root tag.
    resolved = {}
    for secondary in alias:
        root = alias[secondary]
        seen = {secondary}
        while root in alias and root not in seen:
            seen.add(root)
            root = alias[root]
        resolved[secondary] = root
    return resolved


def _merge_touching(ivs: Iterable[Interval], max_gap: int = 0) -> List[Interval]:
    out: List[Interval] = []
    for s, e in sorted(ivs):
        if out and s - out[-1][1] < max(max_gap, 1):
            out[-1] = (out[-1][0], max(out[-1][1], e))
        else:
            out.append((s, e))
    return out


def repair_reconnects(trace: Trace, max_gap: int) -> Trace:
    """Merge reconnect artifacts.

    Consecutive intervals of a user separated by fewer than ``max_gap``
    seconds are joined. Users linked by an explicit old->new->old nick cycle
    are folded into the original tag.
    """
    if max_gap < 0:
        raise ValueError("max_gap must be >= 0")
    alias = _nick_cycles(trace.nick_changes)
    timelines: Dict[UserTag, List[Interval]] = {}
    messages: Dict[UserTag, List[int]] = {}
    for u in trace.users:
        root = alias.get(u, u)
        timelines.setdefault(root, []).extend(trace.timelines.get(u, ()))
        messages.setdefault(root, []).extend(trace.messages.get(u, ()))
    if alias:
        logger.info("nick-cycle repair folded %d tag(s)", len(alias))
    merged = {}
    for u, ivs in timelines.items():
        ivs.sort()
        if max_gap > 0 or u in alias.values():
            merged[u] = _merge_touching(ivs, max_gap)
        else:
            merged[u] = ivs
    return _make_trace(merged, messages, trace.horizon, trace.nick_changes)


# --------------------------------------------------------------------------
# Discretization

@dataclass
class RoundGrid:
    """Per-round online sets and message schedule.

    ``online`` has one frozenset per round; consecutive rounds with the same
    membership share a single object, which downstream code relies on to
    skip work for unchanged rounds.
    """

    interval: int
    rounds: int
    online: List[frozenset]
    scheduled_messages: Dict[int, Dict[UserTag, int]]
    users: Tuple[UserTag, ...] = ()
    _by_user: Optional[Dict[UserTag, List[Tuple[int, int]]]] = field(default=None, repr=False)

    def message_rounds(self, user: UserTag) -> List[Tuple[int, int]]:
        """Sorted ``(round, count)`` pairs for one user's scheduled messages."""
        if self._by_user is None:
            by_user: Dict[UserTag, List[Tuple[int, int]]] = {}
            for r in sorted(self.scheduled_messages):
                for u, c in self.scheduled_messages[r].items():
                    by_user.setdefault(u, []).append((r, c))
            self._by_user = by_user
        return self._by_user.get(user, [])

    def change_points(self) -> Iterator[Tuple[int, frozenset]]:
        """Yield ``(round, online)`` only where the online set object changes."""
        prev = None
        for i, o in enumerate(self.online):
            if o is not prev:
                yield i, o
                prev = o

    def max_offline_rounds(self, users: Iterable[UserTag]) -> Dict[UserTag, int]:
        """Longest run of rounds each user spends offline over the whole grid."""
        users = set(users)
        last_online = {u: -1 for u in users}
        worst = {u: 0 for u in users}
        online_now: set = set()
        for i, o in self.change_points():
            for u in users & (online_now - o):
                last_online[u] = i - 1
            for u in users & (o - online_now):
                worst[u] = max(worst[u], i - last_online[u] - 1)
            online_now = set(o)
        for u in users - online_now:
            worst[u] = max(worst[u], self.rounds - last_online[u] - 1)
        return worst


def discretize(trace: Trace, interval: int) -> RoundGrid:
    """Slice a trace into rounds of ``interval`` seconds.

    A user is in ``online[i]`` iff one of its intervals contains the round's
    start instant ``i * interval``. Messages are counted in the round whose
    window contains them.
    """
    if interval < 1:
        raise ValueError("round interval must be >= 1 second")
    rounds = -(-trace.horizon // interval)
    joins: Dict[int, List[UserTag]] = {}
    leaves: Dict[int, List[UserTag]] = {}
    for u in trace.users:
        for s, e in trace.timelines.get(u, ()):
            first = -(-s // interval)
            end = -(-e // interval)  # first round whose start is >= e
            if first < end:
                joins.setdefault(first, []).append(u)
                leaves.setdefault(end, []).append(u)
    online: List[frozenset] = []
    current: set = set()
    cur_frozen = frozenset()
    for i in range(rounds):
        if i in joins or i in leaves:
            current.difference_update(leaves.get(i, ()))
            current.update(joins.get(i, ()))
            if current != cur_frozen:
                cur_frozen = frozenset(current)
        online.append(cur_frozen)
    scheduled: Dict[int, Dict[UserTag, int]] = {}
    for u in trace.users:
        for t in trace.messages.get(u, ()):
            r = t // interval
            slot = scheduled.setdefault(r, {})
            slot[u] = slot.get(u, 0) + 1
    return RoundGrid(interval, rounds, online, scheduled, tuple(trace.users))


# --------------------------------------------------------------------------
# Synthetic traces

@dataclass(frozen=True)
class SyntheticParams:
    core: int = 0
    periodic: int = 0
    period: int = 3600
    ephemeral: int = 0
    horizon: int = 86400
    message_rate: float = 1.0
    seed: int = 0
    ephemeral_max: Optional[int] = None


def _poisson_times(rng: np.random.Generator, ivs: Sequence[Interval], rate_per_hour: float) -> List[int]:
    total = sum(e - s for s, e in ivs)
    if total == 0 or rate_per_hour <= 0:
        return []
    n = int(rng.poisson(rate_per_hour * total / 3600.0))
    if n == 0:
        return []
    # Uniform over online seconds: draw offsets into the concatenated intervals.
    offsets = np.sort(rng.integers(0, total, size=n))
    starts = np.cumsum([0] + [e - s for s, e in ivs])
    out = []
    for off in offsets.tolist():
        k = int(np.searchsorted(starts, off, side="right")) - 1
        out.append(ivs[k][0] + off - int(starts[k]))
    return out


def generate_synthetic(params: SyntheticParams | None = None, **kwargs) -> Trace:
    """Generate a churn trace with core, periodic and ephemeral users.

    Core users are online for the whole horizon. Each periodic user is online
    once per ``period`` window for a random sub-window that ends at least one
    second before the window closes. Ephemeral users get a single interval of
    at most ``ephemeral_max`` seconds (default ``horizon // 10``) that never
    spans the whole horizon. Message counts are Poisson at ``message_rate``
    per online hour with times uniform over online seconds.
    """
    p = params if params is not None else SyntheticParams(**kwargs)
    if min(p.core, p.periodic, p.ephemeral) < 0:
        raise ValueError("user counts must be >= 0")
    if p.horizon <= 0:
        raise ValueError("horizon must be > 0")
    if p.periodic and p.period < 2:
        raise ValueError("period must be >= 2 seconds")
    rng = np.random.Generator(np.random.PCG64(p.seed))
    width = len(str(max(p.core, p.periodic, p.ephemeral, 1) - 1))
    timelines: Dict[UserTag, List[Interval]] = {}

    for k in range(p.core):
        timelines[f"c{k:0{width}d}"] = [(0, p.horizon)]
    for k in range(p.periodic):
        ivs = []
        for w0 in range(0, p.horizon, p.period):
            w1 = min(w0 + p.period, p.horizon)
            if w1 - w0 < 2:
                continue
            length = int(rng.integers(1, w1 - w0))  # 1 .. span-1
            start = int(rng.integers(w0, w1 - length))
            ivs.append((start, start + length))
        timelines[f"p{k:0{width}d}"] = ivs
    eph_max = p.ephemeral_max if p.ephemeral_max is not None else max(1, p.horizon // 10)
    for k in range(p.ephemeral):
        start = int(rng.integers(0, p.horizon))
        cap = min(eph_max, p.horizon - start)
        if start == 0 and cap >= p.horizon:
            cap = p.horizon - 1
        if cap < 1:
            start, cap = p.horizon - 1, 1
        length = int(rng.integers(1, cap + 1))
        timelines[f"e{k:0{width}d}"] = [(start, start + length)]

    messages = {u: _poisson_times(rng, ivs, p.message_rate) for u, ivs in timelines.items()}
    return _make_trace(timelines, messages, p.horizon)
