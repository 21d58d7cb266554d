"""Batch experiment runner: ``buddies ideal|simulate|report``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attack import ATTACK_HEADER, evaluate_attack_sweep
from .config import ConfigError, ExperimentConfig, derive_seed, nym_id, run_spec
from .engine import HISTORY_HEADER, EngineError, simulate_nym, write_history
from .metrics import ideal_lowlatency, ideal_maxoffline, nearest_rank, usability_stats
from .trace import RoundGrid, Trace, discretize, generate_synthetic, parse_trace, read_trace, repair_reconnects

logger = logging.getLogger("buddies")

PERCENTILES = (0, 10, 25, 50, 75, 90, 100)
AGG_PERCENTILES = (0, 10, 50, 90, 100)

IDEAL_LIFETIME_HEADER = ["lifetime", "percentile", "value"]
IDEAL_MAXOFFLINE_HEADER = ["tolerance", "count"]
METRICS_HEADER = ["round", "possinymity", "indinymity", "attack_success_prob"]
USABILITY_HEADER = ["nym", "created_round", "nominal_lifetime_rounds", "useful_lifetime_rounds",
                    "squelched", "messages", "delivered"]
DELAYS_HEADER = ["nym", "delay_rounds"]
WORST_HEADER = ["age", "nyms", "min_possinymity", "min_indinymity", "max_expected_success"]
PCT_HEADER = ["age", "metric", "percentile", "value"]
OWNERS_HEADER = ["nym", "owner"]


class CLIError(RuntimeError):
    pass


class ReportError(CLIError):
    pass


# --------------------------------------------------------------------------
# Inputs

def load_trace(cfg: ExperimentConfig) -> Trace:
    if cfg.synthetic is not None:
        trace = generate_synthetic(cfg.synthetic)
    elif cfg.trace_path:
        if not os.path.exists(cfg.trace_path):
            raise CLIError(f"trace file not found: {cfg.trace_path}")
        with open(cfg.trace_path, encoding="utf-8") as fh:
            trace = parse_trace(fh)
    else:
        for p in (cfg.intervals_path, cfg.messages_path):
            if not p or not os.path.exists(p):
                raise CLIError(f"trace file not found: {p}")
        with open(cfg.intervals_path, encoding="utf-8") as iv, open(cfg.messages_path, encoding="utf-8") as ms:
            trace = read_trace(iv, ms)
    return repair_reconnects(trace, cfg.max_gap)


def select_owners(grid: RoundGrid, rule: str, seed: int = 0) -> List[str]:
    """Owners to replay as nyms: ``all``, ``top:N``, ``tags:a,b`` or ``random:N``.

    ``random:N`` draws N posters uniformly without replacement, seeded, for
    attack-calibration runs where nym owners should not track activity.
    """
    counts = {u: sum(c for _, c in grid.message_rounds(u)) for u in grid.users}
    posters = sorted(u for u, c in counts.items() if c > 0)
    if rule == "all":
        chosen = posters
    elif rule.startswith("top:"):
        n = int(rule[4:])
        chosen = sorted(posters, key=lambda u: (-counts[u], u))[:n]
    elif rule.startswith("tags:"):
        tags = [t.strip() for t in rule[5:].split(",") if t.strip()]
        chosen = [t for t in tags if counts.get(t, 0) > 0]
        missing = sorted(set(tags) - set(chosen))
        if missing:
            logger.warning("ignoring %d tag(s) with no messages: %s", len(missing), ", ".join(missing))
    elif rule.startswith("random:"):
        n = min(int(rule[7:]), len(posters))
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "owners")))
        chosen = sorted(posters[k] for k in rng.choice(len(posters), size=n, replace=False))
    else:
        raise ConfigError(f"unknown nym selection rule: {rule!r}")
    if not chosen:
        raise CLIError(f"nym selection {rule!r} yields zero users")
    return chosen


def _write_csv(path: str, header: Sequence[str], rows) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return "inf" if x == math.inf else repr(x)


# --------------------------------------------------------------------------
# ideal

def cmd_ideal(cfg: ExperimentConfig) -> List[str]:
    trace = load_trace(cfg)
    out = cfg.output_dir
    rows = []
    for life in cfg.lifetimes:
        sizes = ideal_lowlatency(trace, life)
        if sizes:
            rows.extend([life, pct, nearest_rank(sizes, pct)] for pct in PERCENTILES)
    p1 = os.path.join(out, "ideal_lifetime.csv")
    _write_csv(p1, IDEAL_LIFETIME_HEADER, rows)
    mrows = [[t, ideal_maxoffline(trace, t)] for t in cfg.tolerances] if trace.users else []
    p2 = os.path.join(out, "ideal_maxoffline.csv")
    _write_csv(p2, IDEAL_MAXOFFLINE_HEADER, mrows)
    return [p1, p2]


# --------------------------------------------------------------------------
# simulate

@dataclass
class RunResult:
    policy: str
    nym: str
    owner: str
    usability_row: list
    delays: List[float]
    possinymity: np.ndarray
    indinymity: np.ndarray
    success: np.ndarray


_GRID: Optional[RoundGrid] = None
_CFG: Optional[ExperimentConfig] = None


def _run_one(task: Tuple[int, str]) -> RunResult:
    pidx, owner = task
    grid, cfg = _GRID, _CFG
    name, spec = cfg.policies[pidx]
    nid = nym_id(cfg.master_seed, owner)
    spec = run_spec(spec, cfg.master_seed, owner, pidx)
    run = simulate_nym(grid, owner, spec, nym_id=nid, rng_seed=spec.seed)
    sweep = evaluate_attack_sweep(run, cfg.attack_ps, cfg.weight_tolerance)
    ps = list(cfg.attack_ps)
    n = len(run.history)
    poss = np.empty(n, dtype=np.int64)
    ind = np.empty(n, dtype=np.int64)
    succ = np.zeros(n, dtype=np.float64)
    for j, pt in enumerate(sweep[ps[0]]):
        poss[j] = pt.possinymity
        ind[j] = pt.indinymity
    for p in ps:
        succ = np.maximum(succ, np.fromiter((pt.expected_success for pt in sweep[p]), dtype=np.float64, count=n))

    rdir = os.path.join(cfg.output_dir, "runs", name, nid)
    os.makedirs(rdir, exist_ok=True)
    with open(os.path.join(rdir, "history.csv"), "w", newline="", encoding="utf-8") as fh:
        write_history(run, fh)
    rounds = [rec.index for rec in run.history]
    _write_csv(os.path.join(rdir, "metrics.csv"), METRICS_HEADER,
               ([r, int(a), int(b), repr(float(s))] for r, a, b, s in zip(rounds, poss, ind, succ)))
    _write_csv(os.path.join(rdir, "attack.csv"), ATTACK_HEADER,
               ([pt.round, repr(pt.p), repr(pt.expected_success), pt.possinymity, pt.indinymity]
                for p in ps for pt in sweep[p]))

    stats = usability_stats(run)
    delivered = sum(1 for d in stats.delays if d != math.inf)
    row = [nid, run.nym.created_round, stats.nominal_lifetime, stats.useful_lifetime,
           int(stats.squelched), len(stats.delays), delivered]
    return RunResult(name, nid, owner, row, stats.delays, poss, ind, succ)


def percentile_ages(max_age: int) -> List[int]:
    """Every age up to 100, then roughly 50 per decade; aggregation keys for percentile files."""
    ages = set(range(min(max_age, 100) + 1))
    if max_age > 100:
        ages.update(int(a) for a in np.unique(np.round(np.logspace(2, math.log10(max_age),
                                                                   int(50 * (math.log10(max_age) - 2)) + 2))))
        ages.add(max_age)
    return sorted(a for a in ages if a <= max_age)


class Aggregator:
    """Worst case and percentiles over nyms, keyed by rounds since creation."""

    def __init__(self):
        self.results: List[RunResult] = []

    def add(self, r: RunResult) -> None:
        self.results.append(r)

    def worst_rows(self):
        L = max((len(r.possinymity) for r in self.results), default=0)
        alive = np.zeros(L, dtype=np.int64)
        mp = np.full(L, np.iinfo(np.int64).max, dtype=np.int64)
        mi = mp.copy()
        ms = np.zeros(L, dtype=np.float64)
        for r in self.results:
            n = len(r.possinymity)
            alive[:n] += 1
            np.minimum(mp[:n], r.possinymity, out=mp[:n])
            np.minimum(mi[:n], r.indinymity, out=mi[:n])
            np.maximum(ms[:n], r.success, out=ms[:n])
        for a in range(L):
            yield [a, int(alive[a]), int(mp[a]), int(mi[a]), repr(float(ms[a]))]

    def percentile_rows(self):
        L = max((len(r.possinymity) for r in self.results), default=0)
        if L == 0:
            return
        for a in percentile_ages(L - 1):
            live = [r for r in self.results if len(r.possinymity) > a]
            for metric, get in (("possinymity", lambda r: int(r.possinymity[a])),
                                ("indinymity", lambda r: int(r.indinymity[a])),
                                ("expected_success", lambda r: float(r.success[a]))):
                vals = [get(r) for r in live]
                for pct in AGG_PERCENTILES:
                    v = nearest_rank(vals, pct)
                    yield [a, metric, pct, v if isinstance(v, int) else repr(v)]


def cmd_simulate(cfg: ExperimentConfig) -> List[str]:
    global _GRID, _CFG
    trace = load_trace(cfg)
    grid = discretize(trace, cfg.interval)
    owners = select_owners(grid, cfg.nyms, cfg.master_seed)
    logger.info("%d user(s), %d round(s), %d nym(s), %d policy spec(s)",
                len(grid.users), grid.rounds, len(owners), len(cfg.policies))
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_ini())

    # Execution order is irrelevant to the bytes written: seeds are per task, files per run.
    tasks = [(pidx, o) for pidx in range(len(cfg.policies))
             for o in sorted(owners, key=lambda u: nym_id(cfg.master_seed, u))]
    _GRID, _CFG = grid, cfg
    try:
        if cfg.workers > 1 and len(tasks) > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=cfg.workers, mp_context=ctx) as pool:
                results = list(pool.map(_run_one, tasks, chunksize=max(1, len(tasks) // (4 * cfg.workers))))
        else:
            results = [_run_one(t) for t in tasks]
    except EngineError as exc:
        raise CLIError(str(exc)) from None
    finally:
        _GRID, _CFG = None, None

    written = []
    for name, _ in cfg.policies:
        mine = [r for r in results if r.policy == name]
        pdir = os.path.join(out, "runs", name)
        _write_csv(os.path.join(pdir, "usability.csv"), USABILITY_HEADER, (r.usability_row for r in mine))
        _write_csv(os.path.join(pdir, "delays.csv"), DELAYS_HEADER,
                   ([r.nym, _fmt(d) if d == math.inf else int(d)] for r in mine for d in r.delays))
        agg = Aggregator()
        for r in mine:
            agg.add(r)
        adir = os.path.join(out, "aggregate", name)
        _write_csv(os.path.join(adir, "worst_case.csv"), WORST_HEADER, agg.worst_rows())
        _write_csv(os.path.join(adir, "percentiles.csv"), PCT_HEADER, agg.percentile_rows())
        written += [os.path.join(pdir, "usability.csv"), os.path.join(pdir, "delays.csv"),
                    os.path.join(adir, "worst_case.csv"), os.path.join(adir, "percentiles.csv")]
    gt = os.path.join(out, "ground_truth", "owners.csv")
    _write_csv(gt, OWNERS_HEADER, sorted({(r.nym, r.owner) for r in results}))
    written.append(gt)
    return written


# --------------------------------------------------------------------------
# report

def _read_checked(path: str, header: Sequence[str]) -> List[List[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != list(header):
        got = ",".join(rows[0]) if rows else "<empty>"
        raise ReportError(f"{path}: inconsistent header {got!r}, expected {','.join(header)!r}")
    return rows[1:]


def cdf_points(values: Sequence[int]) -> List[Tuple[int, int, int]]:
    """(value, count, cumulative) steps of an empirical CDF over finite values."""
    out = []
    cum = 0
    for v, c in sorted(_count(values).items()):
        cum += c
        out.append((v, c, cum))
    return out


def _count(values):
    d: Dict[int, int] = {}
    for v in values:
        d[v] = d.get(v, 0) + 1
    return d


def _frac(num: int, den: int) -> str:
    # Integer rounding keeps the text identical on every platform.
    q = (num * 10**6 * 2 + den) // (2 * den)
    return f"{q // 10**6}.{q % 10**6:06d}"


def cmd_report(directory: str, stream=None) -> List[str]:
    stream = stream or sys.stdout
    runs_dir = os.path.join(directory, "runs")
    if not os.path.isdir(runs_dir):
        raise ReportError(f"no runs/ directory under {directory}")
    policies = sorted(d for d in os.listdir(runs_dir) if os.path.isdir(os.path.join(runs_dir, d)))
    if not policies:
        raise ReportError(f"no policy runs under {runs_dir}")

    life_rows, delay_rows, worst_rows, summary = [], [], [], []
    for pol in policies:
        urows = _read_checked(os.path.join(runs_dir, pol, "usability.csv"), USABILITY_HEADER)
        drows = _read_checked(os.path.join(runs_dir, pol, "delays.csv"), DELAYS_HEADER)
        wpath = os.path.join(directory, "aggregate", pol, "worst_case.csv")
        wrows = _read_checked(wpath, WORST_HEADER) if os.path.exists(wpath) else []
        for kind, col in (("nominal", 2), ("useful", 3)):
            vals = [int(r[col]) for r in urows]
            for v, c, cum in cdf_points(vals):
                life_rows.append([pol, kind, v, c, cum, len(vals), _frac(cum, len(vals))])
        finite = [int(r[1]) for r in drows if r[1] != "inf"]
        undelivered = len(drows) - len(finite)
        total = len(drows)
        for v, c, cum in cdf_points(finite):
            delay_rows.append([pol, "delivered", v, c, cum, total, _frac(cum, total)])
        if total:
            delay_rows.append([pol, "undelivered", "inf", undelivered, total, total, _frac(total, total)])
        for r in wrows:
            worst_rows.append([pol] + r)
        useful = [int(r[3]) for r in urows]
        summary.append((pol, len(urows), sum(int(r[4]) for r in urows),
                        nearest_rank(useful, 50) if useful else 0, total,
                        _frac(undelivered, total) if total else "-",
                        nearest_rank(finite, 50) if finite else "-",
                        min((int(r[3]) for r in wrows), default="-"),
                        max((float(r[4]) for r in wrows), default="-")))

    rdir = os.path.join(directory, "report")
    paths = [os.path.join(rdir, "lifetime_cdf.csv"), os.path.join(rdir, "delay_cdf.csv"),
             os.path.join(rdir, "worst_case.csv")]
    _write_csv(paths[0], ["policy", "kind", "lifetime_rounds", "count", "cumulative", "total", "fraction"], life_rows)
    _write_csv(paths[1], ["policy", "kind", "delay_rounds", "count", "cumulative", "total", "fraction"], delay_rows)
    _write_csv(paths[2], ["policy"] + WORST_HEADER, worst_rows)

    cols = ["policy", "nyms", "squelched", "median_useful", "messages", "undelivered", "median_delay",
            "min_indinymity", "max_success"]
    table = [cols] + [[str(x) for x in row] for row in summary]
    widths = [max(len(r[i]) for r in table) for i in range(len(cols))]
    for row in table:
        print("  ".join(c.rjust(w) for c, w in zip(row, widths)), file=stream)
    return paths


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="buddies", description="Pseudonym anonymity experiments over online-presence traces.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("ideal", help="ideal anonymity sweeps over lifetimes and offline tolerances")
    p.add_argument("config")
    p = sub.add_parser("simulate", help="replay selected nyms under each policy and run the attack sweep")
    p.add_argument("config")
    p = sub.add_parser("report", help="fold a simulate output directory into CDFs and a summary table")
    p.add_argument("dir")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            paths = cmd_report(args.dir)
        else:
            cfg = ExperimentConfig.from_ini(args.config)
            paths = cmd_ideal(cfg) if args.command == "ideal" else cmd_simulate(cfg)
    except (CLIError, ConfigError, OSError, ValueError) as exc:
        print(f"buddies: error: {exc}", file=sys.stderr)
        return 2
    for p in paths:
        logger.info("wrote %s", p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
