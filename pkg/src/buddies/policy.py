"""Policy Oracle: per-nym filtering of the online user set from public data only.

The oracle never learns who owns the nym it filters for. Its inputs are the
nym's roster, the online set of each round, the realized null/non-null
outcome of each round, and its own policy parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .trace import UserTag

logger = logging.getLogger(__name__)

EMPTY: frozenset = frozenset()

FORMATIONS = ("static", "lazy")
SACRIFICE_ORDERS = ("random", "least_reliable", "oracle_max_offline")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"not a boolean: {value!r}")


@dataclass(frozen=True)
class PolicySpec:
    """Mitigation parameters announced with a nym's first post.

    ``possinymity_floor`` of 0 and ``buddy_min`` of 1 disable the respective
    sub-policies. ``offline_tolerance`` counts rounds of absence; a member is
    given up in the round its absence reaches the tolerance, so 0 and 1 both
    give up immediately.
    """

    possinymity_floor: int = 0
    buddy_min: int = 1
    offline_tolerance: int = 0
    per_user_tolerance: Mapping[UserTag, int] = field(default_factory=dict)
    formation: str = "lazy"
    sacrifice_order: str = "random"
    strawman: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.possinymity_floor < 0:
            raise ValueError("possinymity_floor must be >= 0")
        if self.buddy_min < 1:
            raise ValueError("buddy_min must be >= 1")
        if self.offline_tolerance < 0:
            raise ValueError("offline_tolerance must be >= 0")
        if self.formation not in FORMATIONS:
            raise ValueError(f"formation must be one of {FORMATIONS}")
        if self.sacrifice_order not in SACRIFICE_ORDERS:
            raise ValueError(f"sacrifice_order must be one of {SACRIFICE_ORDERS}")

    @property
    def loss_limiting(self) -> bool:
        return self.offline_tolerance > 0 or bool(self.per_user_tolerance)

    def tolerance(self, user: UserTag) -> int:
        return self.per_user_tolerance.get(user, self.offline_tolerance)

    def to_config(self) -> Dict[str, str]:
        return {
            "possinymity_floor": str(self.possinymity_floor),
            "buddy_min": str(self.buddy_min),
            "offline_tolerance_rounds": str(self.offline_tolerance),
            "formation": self.formation,
            "sacrifice_order": self.sacrifice_order,
            "strawman": "true" if self.strawman else "false",
            "seed": str(self.seed),
        }

    @classmethod
    def from_config(cls, section: Mapping[str, str]) -> "PolicySpec":
        known = {"possinymity_floor", "buddy_min", "offline_tolerance_rounds",
                 "formation", "sacrifice_order", "strawman", "seed"}
        unknown = set(section) - known
        if unknown:
            raise ValueError(f"unknown policy key(s): {', '.join(sorted(unknown))}")
        kw = {}
        if "possinymity_floor" in section:
            kw["possinymity_floor"] = int(section["possinymity_floor"])
        if "buddy_min" in section:
            kw["buddy_min"] = int(section["buddy_min"])
        if "offline_tolerance_rounds" in section:
            kw["offline_tolerance"] = int(section["offline_tolerance_rounds"])
        if "formation" in section:
            kw["formation"] = section["formation"].strip()
        if "sacrifice_order" in section:
            kw["sacrifice_order"] = section["sacrifice_order"].strip()
        if "strawman" in section:
            kw["strawman"] = _parse_bool(section["strawman"])
        if "seed" in section:
            kw["seed"] = int(section["seed"])
        return cls(**kw)


@dataclass
class BuddyPartition:
    """Disjoint buddy sets covering a roster, each flagged eligible or offline."""

    sets: List[frozenset]
    eligible: List[bool]

    def __post_init__(self):
        self.version = 0
        self._index = {u: k for k, s in enumerate(self.sets) for u in s}

    def set_of(self, user: UserTag) -> frozenset:
        return self.sets[self._index[user]]

    def replace(self, k: int, parts: Sequence[Tuple[frozenset, bool]]) -> None:
        """Swap set ``k`` for the non-empty ``parts`` (a split)."""
        parts = [(s, e) for s, e in parts if s]
        self.sets[k], self.eligible[k] = parts[0]
        for s, e in parts[1:]:
            self.sets.append(s)
            self.eligible.append(e)
        for j, (s, _) in enumerate(parts):
            idx = k if j == 0 else len(self.sets) - len(parts) + j
            for u in s:
                self._index[u] = idx
        self.version += 1

    def set_eligible(self, k: int, value: bool) -> None:
        if self.eligible[k] != value:
            self.eligible[k] = value
            self.version += 1

    def sizes(self) -> List[int]:
        return sorted(len(s) for s in self.sets)


class Reliability:
    """Online/offline history of a fixed user set, updated from online-set deltas."""

    def __init__(self, users: Iterable[UserTag], start_round: int = 0):
        self.users = frozenset(users)
        self.first_seen: Dict[UserTag, int] = {}
        self.offline_since: Dict[UserTag, int] = {u: start_round for u in self.users}
        self.max_streak: Dict[UserTag, int] = {u: 0 for u in self.users}
        self.online_rounds: Dict[UserTag, int] = {u: 0 for u in self.users}
        self._online_since: Dict[UserTag, int] = {}
        self._current: frozenset = EMPTY

    def observe(self, online: frozenset, i: int) -> None:
        now = self.users & online
        if now == self._current:
            return
        for u in now - self._current:
            since = self.offline_since.pop(u)
            self.max_streak[u] = max(self.max_streak[u], i - since)
            self.first_seen.setdefault(u, i)
            self._online_since[u] = i
        for u in self._current - now:
            self.offline_since[u] = i
            self.online_rounds[u] += i - self._online_since.pop(u)
        self._current = now

    def max_offline_streak(self, u: UserTag, now: int) -> int:
        if u in self.offline_since:
            return max(self.max_streak[u], now - self.offline_since[u])
        return self.max_streak[u]

    def least_reliable_key(self, now: int) -> Callable[[UserTag], tuple]:
        # Worst max-offline streak first, then longest since first seen, then tag.
        def key(u):
            return (-self.max_offline_streak(u, now), self.first_seen.get(u, now), u)
        return key


@dataclass
class OracleState:
    roster: frozenset
    running_possinymity: Set[UserTag]
    committed: Optional[Set[UserTag]] = None  # intersection of realized posts only
    partition: Optional[BuddyPartition] = None
    waiting_since: Dict[UserTag, int] = field(default_factory=dict)
    reliability: Optional[Reliability] = None
    floor_locked: bool = False
    squelched: bool = False
    rng: Optional[np.random.Generator] = None
    foresight: Optional[Mapping[UserTag, int]] = None
    running_version: int = 0

    def __post_init__(self):
        if self.committed is None:
            self.committed = set(self.running_possinymity)

    def drop_from_running(self, users: Iterable[UserTag]) -> None:
        before = len(self.running_possinymity)
        self.running_possinymity.difference_update(users)
        if len(self.running_possinymity) != before:
            self.running_version += 1


# --------------------------------------------------------------------------
# Sub-policies

def strawman_filter(roster: frozenset, online: frozenset) -> frozenset:
    return roster if len(online) == len(roster) else EMPTY


def _absent_rounds(state: OracleState, u: UserTag, now: int) -> int:
    return now - state.waiting_since[u] + 1


def _within_tolerance(state: OracleState, spec: PolicySpec, u: UserTag, now: int) -> bool:
    return _absent_rounds(state, u, now) < spec.tolerance(u)


def possinymity_floor_filter(state: OracleState, spec: PolicySpec, online: frozenset) -> frozenset:
    """Admit ``online`` only if posting would keep possinymity at or above the floor.

    Once the floor has blocked a round, every member of the committed
    intersection is treated as critical: later rounds are admitted only when
    all of them are present, so committed possinymity stays constant.
    """
    R = spec.possinymity_floor
    if R <= 0 or not online:
        return online
    running = state.running_possinymity
    if state.floor_locked:
        return online if len(running) >= R and state.committed <= online else EMPTY
    if len(running & online) >= R:
        return online
    state.floor_locked = True
    logger.debug("possinymity floor %d reached; %d critical members", R, len(running))
    return EMPTY


def loss_rate_filter(state: OracleState, spec: PolicySpec, online: frozenset, current_round: int) -> frozenset:
    """Hold posting while a missing possinymity member is within tolerance.

    When every missing member has exhausted its tolerance they are dropped
    from the running possinymity set for good and posting resumes.
    """
    missing = state.running_possinymity - online
    if not missing:
        return online
    if any(_within_tolerance(state, spec, u, current_round) for u in missing):
        return EMPTY
    state.drop_from_running(missing)
    return online


def form_static_partition(roster: Iterable[UserTag], K: int, order: Sequence[UserTag] | None = None) -> BuddyPartition:
    """Chunk the roster into ``len(roster) // K`` sets of size >= K.

    ``order`` fixes which users land together; sizes differ by at most one.
    A roster smaller than K yields a single undersized set.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    users = list(order) if order is not None else sorted(roster)
    n = len(users)
    groups = n // K
    if groups == 0:
        return BuddyPartition([frozenset(users)], [False]) if users else BuddyPartition([], [])
    base, extra = divmod(n, groups)
    sets, pos = [], 0
    for g in range(groups):
        size = base + (1 if g < extra else 0)
        sets.append(frozenset(users[pos:pos + size]))
        pos += size
    return BuddyPartition(sets, [True] * len(sets))


def dynamic_initial_partition(state: OracleState | None, online: frozenset, roster: frozenset, K: int) -> BuddyPartition:
    """Start lazy formation with one online set and one offline set.

    An online side smaller than K is folded into the offline side. An offline
    side smaller than K is kept as a residual that never becomes eligible.
    """
    on = roster & online
    off = roster - online
    if len(on) < K:
        off, on = off | on, frozenset()
    sets, eligible = [], []
    if on:
        sets.append(frozenset(on))
        eligible.append(True)
    if off:
        sets.append(frozenset(off))
        eligible.append(False)
    return BuddyPartition(sets, eligible)


def buddy_filter(state: OracleState, spec: PolicySpec, online: frozenset) -> frozenset:
    """Keep only buddy sets whose members are all online.

    Under lazy formation an offline set rejoins (becomes eligible again) in
    the first round all of its members are online together. Sets smaller
    than K never pass.
    """
    part = state.partition
    K = spec.buddy_min
    keep: List[frozenset] = []
    for k, s in enumerate(part.sets):
        if len(s) < K or not s <= online:
            continue
        if not part.eligible[k]:
            if spec.formation != "lazy":
                continue
            part.set_eligible(k, True)
        keep.append(s)
    if not keep:
        return EMPTY
    if len(keep) == 1:
        return keep[0]
    return frozenset().union(*keep)


def _sacrifice_ranking(state: OracleState, spec: PolicySpec, candidates: Iterable[UserTag], now: int) -> List[UserTag]:
    cands = sorted(candidates)
    order = spec.sacrifice_order
    if order == "random":
        perm = state.rng.permutation(len(cands))
        return [cands[j] for j in perm]
    if order == "least_reliable":
        return sorted(cands, key=state.reliability.least_reliable_key(now))
    if state.foresight is None:
        raise ValueError("oracle_max_offline ordering needs whole-trace max offline times")
    return sorted(cands, key=lambda u: (-state.foresight.get(u, 0), u))


def lazy_split(state: OracleState, spec: PolicySpec, online: frozenset, current_round: int) -> OracleState:
    """Split eligible buddy sets around members whose absence exceeded tolerance.

    The given-up members form an offline set padded to K with sacrificed
    members of their old set. If fewer than K would remain online, the whole
    set goes offline together instead.
    """
    part = state.partition
    K = spec.buddy_min
    for k in range(len(part.sets)):
        s = part.sets[k]
        if not part.eligible[k]:
            continue
        gone = frozenset(u for u in s - online if not _within_tolerance(state, spec, u, current_round))
        if not gone:
            continue
        off = set(gone)
        rest = s - gone
        if len(off) < K:
            need = K - len(off)
            victims = _sacrifice_ranking(state, spec, rest, current_round)[:need]
            off.update(victims)
            rest = rest - set(victims)
        if len(rest) < K:
            off |= rest
            rest = frozenset()
        logger.debug("round %d: split set of %d -> online %d / offline %d",
                     current_round, len(s), len(rest), len(off))
        part.replace(k, [(frozenset(rest), True), (frozenset(off), False)])
    return state


def _waiting_on_buddies(state: OracleState, spec: PolicySpec, online: frozenset, now: int) -> bool:
    part = state.partition
    for k, s in enumerate(part.sets):
        if part.eligible[k] and len(s) >= spec.buddy_min:
            for u in s - online:
                if _within_tolerance(state, spec, u, now):
                    return True
    return False


# --------------------------------------------------------------------------
# The oracle

class PolicyOracle:
    """Filters one nym's online sets round by round.

    ``prior`` is public online history from before the nym existed, as
    ``(round, online_set)`` change points; it seeds reliability statistics.
    ``foresight`` maps users to whole-trace max offline rounds and is only
    consulted by the ``oracle_max_offline`` sacrifice order.
    """

    def __init__(self, roster: Iterable[UserTag], spec: PolicySpec, start_round: int = 0,
                 prior: Iterable[Tuple[int, frozenset]] = (), foresight: Mapping[UserTag, int] | None = None):
        roster = frozenset(roster)
        self.spec = spec
        self.state = OracleState(
            roster=roster,
            running_possinymity=set(roster),
            reliability=Reliability(roster),
            rng=np.random.Generator(np.random.PCG64(spec.seed)),
            foresight=foresight,
        )
        prior = [(i, o) for i, o in prior if i < start_round]
        self.state.reliability = Reliability(roster, prior[0][0] if prior else start_round)
        for i, o in prior:
            self.state.reliability.observe(o, i)
        self._prev_online: frozenset = roster
        self._prev_input = None
        self._last: Optional[tuple] = None
        self._last_result: frozenset = EMPTY
        self._check_squelch()
        if spec.buddy_min > 1 and spec.formation == "static":
            self.state.partition = form_static_partition(roster, spec.buddy_min, self._static_order(start_round))
            self._check_squelch()

    @property
    def roster(self) -> frozenset:
        return self.state.roster

    @property
    def squelched(self) -> bool:
        return self.state.squelched

    def _static_order(self, now: int) -> List[UserTag]:
        return _sacrifice_ranking(self.state, self.spec, self.roster, now)

    def _track_absences(self, online: frozenset, i: int) -> None:
        prev = self._prev_online
        if online is prev:
            return
        ws = self.state.waiting_since
        for u in prev - online:
            ws.setdefault(u, i)
        for u in online - prev:
            ws.pop(u, None)
        self._prev_online = online

    def _check_squelch(self) -> None:
        st, spec = self.state, self.spec
        if st.squelched:
            return
        if spec.possinymity_floor > 0 and len(st.running_possinymity) < spec.possinymity_floor:
            st.squelched = True
        elif spec.buddy_min > 1 and st.partition is not None:
            if all(len(s) < spec.buddy_min for s in st.partition.sets):
                st.squelched = True
        elif spec.buddy_min > 1 and len(st.roster) < spec.buddy_min:
            st.squelched = True
        if st.squelched:
            logger.debug("policy reports nym can never post again")

    def filter(self, online: Iterable[UserTag], i: int) -> frozenset:
        """Return the filtered set ``P_i`` for round ``i``."""
        st, spec = self.state, self.spec
        if online is self._prev_input:
            online = self._prev_online
        else:
            self._prev_input = online
            if not isinstance(online, frozenset):
                online = frozenset(online)
            if not online <= self.roster:
                online = online & self.roster
            st.reliability.observe(online, i)
            self._track_absences(online, i)
        if st.squelched:
            return EMPTY

        part_version = st.partition.version if st.partition is not None else -1
        cache_key = (id(online), part_version, st.running_version, st.floor_locked)
        if self._last is not None and self._last[0] == cache_key and i < self._last[1]:
            return self._last_result

        P = online
        if spec.strawman:
            P = strawman_filter(self.roster, online)
        if P and spec.loss_limiting:
            L = loss_rate_filter(st, spec, online, i)
            P = L if P is online else P & L
        if spec.buddy_min > 1:
            if st.partition is None:
                st.partition = dynamic_initial_partition(st, online, self.roster, spec.buddy_min)
                if not any(st.partition.eligible):
                    # Too few online at formation to ever start posting.
                    st.squelched = True
            if spec.formation == "lazy":
                lazy_split(st, spec, online, i)
                if _waiting_on_buddies(st, spec, online, i):
                    P = EMPTY
            if P:
                B = buddy_filter(st, spec, online)
                P = B if P is online else P & B
        if spec.possinymity_floor > 0:
            P = possinymity_floor_filter(st, spec, P)
        self._check_squelch()
        if st.squelched:
            P = EMPTY

        part_version = st.partition.version if st.partition is not None else -1
        cache_key = (id(online), part_version, st.running_version, st.floor_locked)
        self._last = (cache_key, self._next_deadline(online, i))
        self._last_result = P
        self._last_online = online  # keep id(online) from being recycled
        return P

    def _next_deadline(self, online: frozenset, i: int) -> float:
        """First round after ``i`` at which a tolerance clock could change the result."""
        spec, st = self.spec, self.state
        deadline = float("inf")
        watch: Set[UserTag] = set()
        if spec.loss_limiting:
            watch |= st.running_possinymity - online
        if spec.buddy_min > 1 and spec.formation == "lazy" and st.partition is not None:
            for k, s in enumerate(st.partition.sets):
                if st.partition.eligible[k]:
                    watch |= s - online
        for u in watch:
            # u stops being "within tolerance" at round since + tol - 1.
            d = st.waiting_since[u] + spec.tolerance(u) - 1
            if d > i:
                deadline = min(deadline, d)
        return deadline

    def observe_outcome(self, filtered: frozenset, non_null: bool) -> None:
        """Commit a realized outcome; only non-null rounds shrink possinymity."""
        if not non_null:
            return
        st = self.state
        if not st.committed <= filtered:
            st.committed &= filtered
            st.running_possinymity &= filtered
            st.running_version += 1
        self._check_squelch()
