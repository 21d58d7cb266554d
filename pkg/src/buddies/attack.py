"""Probabilistic intersection adversary and best-guess evaluation.

The adversary assumes the owner independently skips each round with
probability ``p``. A null round in which a user passed the filter scales
that user's likelihood by ``p``; a non-null round eliminates everyone
outside the filtered set. Since every update multiplies by ``p`` or by 0,
a user's unnormalized weight is exactly ``p ** n`` where ``n`` counts the
null rounds it passed the filter in, or 0 once eliminated. The state keeps
those counts, which is exact, immune to underflow, and independent of ``p``.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Sequence, TextIO, Tuple

from .engine import RoundRecord, SimulationRun
from .metrics import round_series
from .trace import UserTag

ATTACK_HEADER = ["round", "p", "expected_success", "possinymity", "indinymity"]


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    p: float
    weight_tolerance: float = 1e-9

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.weight_tolerance < 0:
            raise ValueError("weight_tolerance must be >= 0")

    @property
    def slack(self) -> float:
        """How many extra null-round hits a user may have and still tie the maximum weight."""
        return _slack(self.p, self.weight_tolerance)


def _slack(p: float, tol: float) -> float:
    if p >= 1.0:
        return math.inf
    if p <= 0.0 or tol <= 0.0:
        return 0
    if tol >= 1.0:
        return math.inf
    return math.floor(math.log1p(-tol) / math.log(p) + 1e-12)


@dataclass
class AttackState:
    """Sufficient statistics of the adversary's posterior.

    ``eliminated`` users have weight 0. For the rest, weight is proportional
    to ``p ** null_hits[u]``. At ``p = 0`` the weights are taken in the
    limit ``p -> 0``, so only users with the fewest hits keep weight; this
    agrees with zeroing every hit user except when that would zero everyone.
    """

    users: Tuple[UserTag, ...]
    eliminated: set = field(default_factory=set)
    null_hits: Dict[UserTag, int] = field(default_factory=dict)

    @classmethod
    def uniform(cls, roster: Iterable[UserTag]) -> "AttackState":
        users = tuple(sorted(roster))
        return cls(users, set(), {u: 0 for u in users})

    def support(self) -> List[UserTag]:
        return [u for u in self.users if u not in self.eliminated]

    def weights(self, p: float) -> Dict[UserTag, float]:
        """Normalized weights (sum 1) for a given skip probability."""
        alive = self.support()
        if not alive:
            raise AttackError("every user eliminated")
        n_min = min(self.null_hits[u] for u in alive)
        raw = {}
        for u in self.users:
            if u in self.eliminated:
                raw[u] = 0.0
            else:
                d = self.null_hits[u] - n_min
                raw[u] = (1.0 if d == 0 else 0.0) if p == 0 else p ** d
        total = math.fsum(raw.values())
        return {u: w / total for u, w in raw.items()}


def observe_round(state: AttackState, record: RoundRecord, cfg: AttackConfig | None = None) -> AttackState:
    """Fold one scheduled round into the adversary state (in place)."""
    P = record.filtered
    if record.non_null:
        alive = [u for u in state.users if u not in state.eliminated]
        if not any(u in P for u in alive):
            raise AttackError(f"round {record.index}: non-null post with every candidate eliminated")
        state.eliminated.update(u for u in alive if u not in P)
    else:
        for u in P:
            if u in state.null_hits:
                state.null_hits[u] += 1
    return state


def best_guess(state: AttackState, cfg: AttackConfig) -> Tuple[frozenset, float]:
    """The most likely class of users and the success chance if the owner is in it."""
    w = state.weights(cfg.p)
    top_w = max(w.values())
    cut = top_w * (1.0 - cfg.weight_tolerance)
    top = frozenset(u for u, x in w.items() if x > 0 and x >= cut)
    return top, 1.0 / len(top)


class AttackPoint(NamedTuple):
    round: int
    p: float
    expected_success: float
    possinymity: int
    indinymity: int
    top_size: int
    owner_in_top: bool


def _blocks(history: Sequence[RoundRecord]) -> List[Tuple[int, int, frozenset, bool]]:
    """Maximal runs of consecutive rounds with the same filtered set and outcome."""
    out = []
    start = 0
    for k in range(1, len(history) + 1):
        if k == len(history) or history[k].filtered is not history[start].filtered \
                or history[k].non_null != history[start].non_null:
            out.append((start, k, history[start].filtered, history[start].non_null))
            start = k
    return out


def _success_sequence(history: Sequence[RoundRecord], roster: frozenset, owner: UserTag,
                      slack: float) -> List[Tuple[int, bool]]:
    """Top-class size and owner membership after every round, for one slack value."""
    support = set(roster)
    hits = {u: 0 for u in roster}
    out: List[Tuple[int, bool]] = []
    for a, b, P, non_null in _blocks(history):
        if non_null:
            support &= P
            if owner not in support:
                raise AttackError("owner eliminated by a non-null round; engine history is unsound")
            if slack == math.inf:
                res = (len(support), True)
            else:
                n_min = min(hits[u] for u in support)
                lim = n_min + slack
                size = sum(1 for u in support if hits[u] <= lim)
                res = (size, hits[owner] <= lim)
            out.extend([res] * (b - a))
            continue
        X = [u for u in support if u in P]
        if slack == math.inf or not X:
            if slack == math.inf:
                res = (len(support), owner in support)
            else:
                n_min = min(hits[u] for u in support)
                lim = n_min + slack
                res = (sum(1 for u in support if hits[u] <= lim), hits[owner] <= lim)
            out.extend([res] * (b - a))
            for u in X:
                hits[u] += b - a
            continue
        cx = sorted(hits[u] for u in X)
        cy = sorted(hits[u] for u in support if u not in P)
        owner_n = hits[owner]
        owner_x = owner in P
        min_y = cy[0] if cy else math.inf
        for t in range(1, b - a + 1):
            n_min = min(cx[0] + t, min_y)
            lim = n_min + slack
            size = bisect.bisect_right(cx, lim - t) + (bisect.bisect_right(cy, lim) if cy else 0)
            out.append((size, owner_n + (t if owner_x else 0) <= lim))
        for u in X:
            hits[u] += b - a
    return out


def evaluate_attack_sweep(run: SimulationRun, ps: Sequence[float], weight_tolerance: float = 1e-9
                          ) -> Dict[float, List[AttackPoint]]:
    """Run the best-guess attack for several ``p`` values over one history.

    Rounds are processed in blocks that share a filtered set, so the cost is
    dominated by the number of distinct filtered sets, not the round count.
    """
    history = run.history
    roster = run.nym.roster
    owner = run.nym.owner
    series = list(round_series(history, roster))
    by_slack: Dict[float, List[Tuple[int, bool]]] = {}
    out: Dict[float, List[AttackPoint]] = {}
    for p in ps:
        s = AttackConfig(p, weight_tolerance).slack
        if s not in by_slack:
            by_slack[s] = _success_sequence(history, roster, owner, s)
        seq = by_slack[s]
        out[p] = [
            AttackPoint(r, p, (1.0 / size) if inside else 0.0, poss, ind, size, inside)
            for (r, poss, ind), (size, inside) in zip(series, seq)
        ]
    return out


def evaluate_attack(run: SimulationRun, cfg: AttackConfig) -> List[AttackPoint]:
    """Expected success of the best guess after each scheduled round."""
    return evaluate_attack_sweep(run, [cfg.p], cfg.weight_tolerance)[cfg.p]


def write_attack(points: Iterable[AttackPoint], out: TextIO) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(ATTACK_HEADER)
    for pt in points:
        w.writerow([pt.round, repr(pt.p), repr(pt.expected_success), pt.possinymity, pt.indinymity])
