"""Round-by-round Anonymizer simulation for a single nym."""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Optional, TextIO

from .policy import EMPTY, PolicyOracle, PolicySpec
from .trace import RoundGrid, UserTag

logger = logging.getLogger(__name__)

USABLE = "usable"
SQUELCHED = "squelched"

HISTORY_HEADER = ["round", "scheduled_nym", "online_count", "filtered_count", "outcome", "delivered_delay_rounds"]


class EngineError(ValueError):
    pass


@dataclass
class NymState:
    """A pseudonym under simulation.

    ``owner`` is private to the engine and the evaluation harness; the policy
    oracle is constructed from the roster and spec alone.
    """

    id: str
    owner: UserTag
    roster: frozenset
    policy: PolicySpec
    created_round: int
    status: str = USABLE
    message_queue: Deque[int] = field(default_factory=deque)
    squelched_round: Optional[int] = None

    def squelch(self, i: int) -> None:
        if self.status == USABLE:
            self.status = SQUELCHED
            self.squelched_round = i


@dataclass(frozen=True, slots=True)
class RoundRecord:
    index: int
    roster: frozenset
    online: frozenset
    filtered: frozenset
    scheduled: str
    payload_len: Optional[int]  # None for a null outcome
    delayed: int
    delivered_delay: Optional[int]

    @property
    def non_null(self) -> bool:
        return self.payload_len is not None


@dataclass
class SimulationRun:
    grid: RoundGrid
    nym: NymState
    history: List[RoundRecord] = field(default_factory=list)
    rng_seed: int = 0
    oracle: Optional[PolicyOracle] = field(default=None, repr=False)
    deliveries: List[tuple] = field(default_factory=list)  # (scheduled_round, delivered_round)
    scheduled_total: int = 0
    payload_len: int = 1
    _last_online_src: Optional[frozenset] = field(default=None, repr=False)
    _last_online: frozenset = field(default=EMPTY, repr=False)
    _last_filtered: frozenset = field(default=EMPTY, repr=False)

    @property
    def finished(self) -> bool:
        return (self.nym.status == SQUELCHED
                or (self.scheduled_total > 0 and len(self.deliveries) == self.scheduled_total)
                or (self.history and self.history[-1].index >= self.grid.rounds - 1))


def new_nym(grid: RoundGrid, owner: UserTag, policy: PolicySpec, first_post_round: int,
            nym_id: str = "nym") -> NymState:
    """Create a nym whose roster is everyone online in its first post round."""
    if not 0 <= first_post_round < grid.rounds:
        raise EngineError(f"round {first_post_round} outside grid of {grid.rounds} rounds")
    online = grid.online[first_post_round]
    if owner not in online:
        raise EngineError(f"owner is offline in round {first_post_round}; a nym needs an online owner")
    return NymState(id=nym_id, owner=owner, roster=frozenset(online), policy=policy,
                    created_round=first_post_round)


def start_run(grid: RoundGrid, nym: NymState, rng_seed: int = 0, foresight=None) -> SimulationRun:
    # Reliability stats start empty at creation; only rounds the oracle observes count.
    if foresight is None and nym.policy.sacrifice_order == "oracle_max_offline":
        foresight = grid.max_offline_rounds(nym.roster)
    oracle = PolicyOracle(nym.roster, nym.policy, nym.created_round, (), foresight)
    return SimulationRun(grid=grid, nym=nym, rng_seed=rng_seed, oracle=oracle)


def run_round(run: SimulationRun, i: int) -> RoundRecord:
    """Execute one round: online set, policy filter, posting decision."""
    nym = run.nym
    if i < nym.created_round:
        raise EngineError("round precedes nym creation")
    expected = run.history[-1].index + 1 if run.history else nym.created_round
    if i != expected:
        raise EngineError(f"rounds must be run in order; expected {expected}, got {i}")

    src = run.grid.online[i]
    if src is not run._last_online_src:
        run._last_online_src = src
        online = src & nym.roster if not src <= nym.roster else src
        if online != run._last_online:
            run._last_online = online
    online = run._last_online

    filtered = run.oracle.filter(online, i)
    # Reuse the previous object for an equal set so downstream code can skip work.
    if filtered is not run._last_filtered and filtered == run._last_filtered:
        filtered = run._last_filtered
    run._last_filtered = filtered

    payload = None
    delivered_delay = None
    if nym.status == USABLE and nym.message_queue and nym.owner in filtered:
        scheduled_round = nym.message_queue.popleft()
        payload = run.payload_len
        delivered_delay = i - scheduled_round
        run.deliveries.append((scheduled_round, i))
    run.oracle.observe_outcome(filtered, payload is not None)
    if run.oracle.squelched:
        nym.squelch(i)
    rec = RoundRecord(i, nym.roster, online, filtered, nym.id, payload, len(nym.message_queue), delivered_delay)
    run.history.append(rec)
    return rec


def simulate_nym(grid: RoundGrid, owner: UserTag, policy: PolicySpec, nym_id: str = "nym",
                 rng_seed: int = 0, foresight=None) -> SimulationRun:
    """Replay one owner's message schedule as a nym under ``policy``.

    The nym is created in the first round at or after the owner's first
    message in which the owner is online, and is scheduled every round until
    every message is delivered, the policy squelches it, or the grid ends.
    """
    schedule = grid.message_rounds(owner)
    if not schedule:
        raise EngineError("owner has no messages in the grid")
    first = schedule[0][0]
    created = next((r for r in range(first, grid.rounds) if owner in grid.online[r]), None)
    if created is None:
        raise EngineError("owner is never online at or after its first message")
    if created != first:
        logger.debug("owner offline at first message round %d; nym created at %d", first, created)
    nym = new_nym(grid, owner, policy, created, nym_id)
    run = start_run(grid, nym, rng_seed, foresight)
    run.scheduled_total = sum(c for _, c in schedule)

    pending = deque(schedule)
    for i in range(created, grid.rounds):
        while pending and pending[0][0] <= i:
            r, c = pending.popleft()
            nym.message_queue.extend([r] * c)
        run_round(run, i)
        if run.finished:
            break
    return run


def write_history(run: SimulationRun, out: TextIO) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for rec in run.history:
        w.writerow([
            rec.index,
            rec.scheduled,
            len(rec.online),
            len(rec.filtered),
            "non-null" if rec.non_null else "null",
            "" if rec.delivered_delay is None else rec.delivered_delay,
        ])
