"""Anonymity meters over round histories, ideal-anonymity analyses, usability stats."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .engine import RoundRecord, SimulationRun
from .trace import Trace, UserTag

INF = math.inf


@dataclass(frozen=True)
class PossinymitySet:
    members: frozenset
    as_of_round: Optional[int]

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class IndinymityReport:
    partition: List[frozenset]
    indinymity: int

    def effective_indinymity(self, colluders: int) -> int:
        """Indinymity left if ``colluders`` members of the smallest set reveal themselves."""
        return max(0, self.indinymity - colluders)


@dataclass
class UsabilityStats:
    nominal_lifetime: int
    useful_lifetime: int
    delays: List[float] = field(default_factory=list)
    squelched: bool = False


def possinymity(history: Sequence[RoundRecord], roster: Iterable[UserTag]) -> PossinymitySet:
    """Intersect the filtered sets of every non-null round, starting from the roster."""
    members = frozenset(roster)
    last = None
    for rec in history:
        if rec.non_null:
            if rec.filtered is not last:
                members = members & rec.filtered
                last = rec.filtered
    return PossinymitySet(members, history[-1].index if history else None)


class HistoryMeter:
    """Incremental possinymity and history-derived buddy classes.

    Classes are refined by each round's filtered set; refining twice by the
    same set is a no-op, so rounds that reuse the previous set object are
    skipped outright.
    """

    def __init__(self, roster: Iterable[UserTag]):
        self.roster = frozenset(roster)
        self.possible = self.roster
        self._class_of: Dict[UserTag, int] = {u: 0 for u in self.roster}
        self._members: Dict[int, set] = {0: set(self.roster)} if self.roster else {}
        self._next_id = 1
        self._min = len(self.roster)
        self._last_refine = None
        self._last_intersect = None

    def observe(self, rec: RoundRecord) -> None:
        P = rec.filtered
        if P is not self._last_refine:
            self._refine(P)
            self._last_refine = P
        if rec.non_null and P is not self._last_intersect:
            self.possible = self.possible & P
            self._last_intersect = P

    def _refine(self, P: frozenset) -> None:
        touched: Dict[int, List[UserTag]] = {}
        class_of = self._class_of
        for u in P:
            c = class_of.get(u)
            if c is not None:
                touched.setdefault(c, []).append(u)
        split = False
        for c, users in touched.items():
            members = self._members[c]
            if len(users) < len(members):
                nid = self._next_id
                self._next_id += 1
                self._members[nid] = set(users)
                members.difference_update(users)
                for u in users:
                    class_of[u] = nid
                split = True
        if split:
            self._min = min(len(m) for m in self._members.values())

    @property
    def indinymity(self) -> int:
        return self._min

    def class_of(self, user: UserTag) -> frozenset:
        return frozenset(self._members[self._class_of[user]])

    def partition(self) -> List[frozenset]:
        return sorted((frozenset(m) for m in self._members.values()), key=lambda s: (-len(s), sorted(s)))


def partition_from_history(history: Sequence[RoundRecord], roster: Iterable[UserTag]) -> IndinymityReport:
    """Group users whose membership in every round's filtered set is identical."""
    meter = HistoryMeter(roster)
    for rec in history:
        meter.observe(rec)
    part = meter.partition()
    return IndinymityReport(part, min((len(s) for s in part), default=0))


def round_series(history: Sequence[RoundRecord], roster: Iterable[UserTag]) -> Iterator[Tuple[int, int, int]]:
    """Yield ``(round, possinymity, indinymity)`` after each scheduled round."""
    meter = HistoryMeter(roster)
    for rec in history:
        meter.observe(rec)
        yield rec.index, len(meter.possible), meter.indinymity


# --------------------------------------------------------------------------
# Ideal anonymity

def _interval_arrays(trace: Trace) -> Tuple[np.ndarray, np.ndarray]:
    starts, ends = [], []
    for u in trace.users:
        for s, e in trace.timelines.get(u, ()):
            starts.append(s)
            ends.append(e)
    return np.asarray(starts, dtype=np.int64), np.asarray(ends, dtype=np.int64)


def ideal_lowlatency(trace: Trace, lifetime: int) -> List[int]:
    """Anonymity set sizes of hypothetical nyms living ``lifetime`` seconds.

    Each online interval at least ``lifetime`` long starts one nym over
    ``[start, start + lifetime)``; its set is every user with a single
    interval covering that window. A zero lifetime counts users online at
    the start instant.
    """
    if lifetime < 0:
        raise ValueError("lifetime must be >= 0")
    A, B = _interval_arrays(trace)
    if A.size == 0:
        return []
    q = np.flatnonzero(B - A >= max(lifetime, 1))
    qs = A[q]
    qe = qs + lifetime
    order = np.argsort(A, kind="stable")
    A_sorted, B_by_start = A[order], B[order]
    counts = []
    # Per-user intervals are disjoint, so counting covering intervals counts users.
    for s, e in zip(qs.tolist(), qe.tolist()):
        k = int(np.searchsorted(A_sorted, s, side="right"))
        if lifetime == 0:
            counts.append(int(np.count_nonzero(B_by_start[:k] > s)))
        else:
            counts.append(int(np.count_nonzero(B_by_start[:k] >= e)))
    return counts


def max_offline_gap(trace: Trace, user: UserTag) -> int:
    """Longest offline stretch, counting the lead-in before the first interval and the tail after the last."""
    ivs = trace.timelines.get(user, ())
    if not ivs:
        return trace.horizon
    gaps = [ivs[0][0], trace.horizon - ivs[-1][1]]
    gaps.extend(b[0] - a[1] for a, b in zip(ivs, ivs[1:]))
    return max(gaps)


def ideal_maxoffline(trace: Trace, tolerance: int) -> int:
    """Users whose every offline gap over ``[0, horizon]`` is at most ``tolerance``."""
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    return sum(1 for u in trace.users if max_offline_gap(trace, u) <= tolerance)


def nearest_rank(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: the smallest value with at least ``pct``% of the data at or below it."""
    if not values:
        raise ValueError("no values")
    ordered = sorted(values)
    if pct <= 0:
        return ordered[0]
    rank = math.ceil(pct / 100.0 * len(ordered))
    return ordered[min(len(ordered), max(rank, 1)) - 1]


# --------------------------------------------------------------------------
# Usability

def usability_stats(run: SimulationRun) -> UsabilityStats:
    """Lifetimes and per-message delays of one run.

    Undelivered messages get an infinite delay. The useful lifetime ends at
    the squelch round if the nym was squelched, else at its last delivery.
    """
    schedule = run.grid.message_rounds(run.nym.owner)
    first_sched = schedule[0][0]
    last_sched = schedule[-1][0]
    delays: List[float] = [d - s for s, d in run.deliveries]
    delays.extend([INF] * (run.scheduled_total - len(run.deliveries)))
    created = run.nym.created_round
    if run.nym.squelched_round is not None:
        end = run.nym.squelched_round
    elif run.deliveries:
        end = run.deliveries[-1][1]
    else:
        end = created
    return UsabilityStats(
        nominal_lifetime=last_sched - first_sched,
        useful_lifetime=end - created,
        delays=delays,
        squelched=run.nym.squelched_round is not None,
    )
