"""Batch Monte Carlo runs of QSC over simulated TLC, and their statistics."""
from __future__ import annotations

import csv
import io
import json
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .qsc import QscConfig, QscNode, TicketSource
from .sim_net import DelaySet, Oblivious, SimConfig, Simulation, TicketAware
from .tlc import TlcConfig, TlcNode
from .trace import Trace
from .trace_check import check_all

ADVERSARIES = ("oblivious", "delayset", "ticketaware")
CSV_COLUMNS = ("run", "round", "node", "committed", "rounds_to_finality",
               "msgs_raw", "msgs_ack", "msgs_cert")


@dataclass
class ExperimentConfig:
    nodes: int = 3
    tm: int | None = None
    tw: int | None = None
    fd: int = 0
    rounds: int = 10
    runs: int = 1
    seed: int = 0
    adversary: str = "oblivious"
    encrypt_tickets: bool = True
    pipeline: bool = False
    check: bool = False
    out: str | None = None
    format: str = "csv"
    max_events: int | None = None
    delay_sets: list | None = None
    delay_period: int = 50
    commit_rule: str = "qsc3"
    spoiler_horizon: str = "s+3"
    self_ack: bool = True
    dump_trace: str | None = None

    def __post_init__(self):
        f = (self.nodes - 1) // 2
        if self.tm is None:
            self.tm = f + 1
        if self.tw is None:
            self.tw = f + 1
        if self.adversary not in ADVERSARIES:
            raise ConfigError(f"adversary must be one of {', '.join(ADVERSARIES)}")
        if self.format not in ("csv", "json"):
            raise ConfigError("format must be csv or json")
        if self.runs < 0 or self.rounds < 0:
            raise ConfigError("runs and rounds must be non-negative")
        if self.delay_period < 0:
            raise ConfigError("delay_period must be non-negative")
        if self.adversary != "delayset" and self.delay_sets:
            raise ConfigError("delay_sets requires the delayset adversary")
        # build once to surface threshold and delay-set errors early
        self.tlc_config()
        self.sim_config(self.seed)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def qsc_config(self) -> QscConfig:
        return QscConfig(self.rounds, pipeline=self.pipeline,
                         encrypt_tickets=self.encrypt_tickets, commit_rule=self.commit_rule,
                         spoiler_horizon=self.spoiler_horizon)

    def tlc_config(self) -> TlcConfig:
        return TlcConfig(self.nodes, self.tm, self.tw, self_ack=self.self_ack,
                         max_step=self.qsc_config().max_step)

    def schedule(self) -> tuple:
        if self.delay_sets is not None:
            return tuple(tuple(sorted(s)) for s in self.delay_sets)
        if self.fd == 0:
            return ((),)
        n = self.nodes
        return tuple(tuple(sorted((k + x) % n for x in range(self.fd))) for k in range(n))

    def sim_config(self, seed: int) -> SimConfig:
        if self.adversary == "delayset":
            adv = DelaySet(self.schedule(), self.delay_period)
        elif self.adversary == "ticketaware":
            adv = TicketAware()
        else:
            adv = Oblivious()
        n = self.nodes
        max_events = self.max_events
        if max_events is None:
            # generous: every node sends at most a Raw, n-1 Acks and a Cert per step
            max_events = 4 * n * n * (n + 1) * (self.qsc_config().max_step + 1) + 1000
        return SimConfig(n, self.fd, seed & ((1 << 64) - 1), adv, max_events)


@dataclass
class RunResult:
    run: int
    seed: int
    reason: str
    qsc: list
    tlc: list
    step_counts: list
    trace: Trace | None = None
    violations: list = field(default_factory=list)


def simulate(cfg: ExperimentConfig, run: int = 0, record: bool = False, tickets=None) -> RunResult:
    """One simulation with seed ``cfg.seed + run``."""
    seed = cfg.seed + run
    sim_cfg = cfg.sim_config(seed)
    tlc_cfg = cfg.tlc_config()
    qcfg = cfg.qsc_config()
    trace = Trace() if record else None
    sink = trace.append if trace is not None else None
    if tickets is None:
        tickets = TicketSource(seed, cfg.nodes, sealed=cfg.encrypt_tickets)
    apps = [QscNode(i, cfg.nodes, qcfg, tickets, sink, majoritarian=tlc_cfg.majoritarian)
            for i in range(cfg.nodes)]
    nodes = [TlcNode(i, tlc_cfg, apps[i], sink) for i in range(cfg.nodes)]
    meta = {"t_m": tlc_cfg.t_m, "t_w": tlc_cfg.t_w, "self_ack": tlc_cfg.self_ack,
            "max_step": tlc_cfg.max_step, "rounds": cfg.rounds, "pipeline": cfg.pipeline,
            "encrypt_tickets": cfg.encrypt_tickets, "commit_rule": cfg.commit_rule,
            "spoiler_horizon": cfg.spoiler_horizon}
    sim = Simulation(sim_cfg, nodes, trace, meta=meta, count_steps=True)
    sim.run()
    return RunResult(run, seed, sim.reason, apps, nodes, sim.step_counts, trace)


def _run_rows(cfg: ExperimentConfig, res: RunResult) -> list[tuple]:
    qcfg = cfg.qsc_config()
    rows = []
    for r in range(cfg.rounds):
        lo = qcfg.round_start(r)
        hi = qcfg.round_start(r + 1) if r + 1 < cfg.rounds else qcfg.max_step + 1
        for i, app in enumerate(res.qsc):
            view = app.views.get(r)
            fin = app.finalized_at.get(r)
            counts = [0, 0, 0]
            per_step = res.step_counts[i]
            for s in range(lo, hi):
                c = per_step.get(s)
                if c is not None:
                    counts[0] += c[0]
                    counts[1] += c[1]
                    counts[2] += c[2]
            rows.append((res.run, r, i, int(bool(view and view.committed)),
                         None if fin is None else fin - r, *counts))
    return rows


def _worker(args):
    cfg, run = args
    record = cfg.check or cfg.dump_trace is not None
    res = simulate(cfg, run, record=record)
    if cfg.check:
        res.violations = check_all(res.trace)
    if cfg.dump_trace is not None:
        res.trace.dump(trace_path(cfg.dump_trace, run, cfg.runs))
    rows = _run_rows(cfg, res)
    return run, res.reason, rows, [str(v) for v in res.violations]


def trace_path(path: str, run: int, runs: int) -> str:
    if runs <= 1:
        return path
    p = Path(path)
    return str(p.with_name(f"{p.stem}.run{run}{p.suffix}"))


def worker_count(jobs: int) -> int:
    env = os.environ.get("TLCQSC_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError("TLCQSC_THREADS must be an integer") from None
        if cap < 1:
            raise ConfigError("TLCQSC_THREADS must be >= 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, jobs))


@dataclass
class Summary:
    config: dict
    rows: list
    runs: int
    truncated: int
    commit_rate: list
    round_success_rate: float
    finality_mean: float | None
    finality_p50: float | None
    finality_p90: float | None
    msgs_per_step: dict
    streak_hist: dict
    violations: list

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rows"] = [dict(zip(CSV_COLUMNS, r)) for r in self.rows]
        d["streak_hist"] = {str(k): v for k, v in sorted(self.streak_hist.items())}
        return d


def streak_histogram(committed_by_round) -> dict[int, int]:
    """Count, for every round, the length of the non-commit streak ending there.

    A committed round contributes to bucket 0, so buckets sum to the number of rounds.
    """
    hist: dict[int, int] = {}
    k = 0
    for c in committed_by_round:
        k = 0 if c else k + 1
        hist[k] = hist.get(k, 0) + 1
    return hist


def summarize(cfg: ExperimentConfig, rows: list, truncated: int, violations: list) -> Summary:
    n = cfg.nodes
    per_node = [[0, 0] for _ in range(n)]
    success: dict[tuple, int] = {}
    finality = []
    totals = [0, 0, 0]
    series: dict[tuple, list] = {}
    for run, r, node, committed, rtf, raw, ack, cert in rows:
        per_node[node][0] += committed
        per_node[node][1] += 1
        success[(run, r)] = success.get((run, r), 0) | committed
        if rtf is not None:
            finality.append(rtf)
        totals[0] += raw
        totals[1] += ack
        totals[2] += cert
        series.setdefault((run, node), []).append((r, committed))
    hist: dict[int, int] = {}
    for key in sorted(series):
        for k, v in streak_histogram(c for _, c in sorted(series[key])).items():
            hist[k] = hist.get(k, 0) + v
    steps = cfg.runs * (cfg.qsc_config().max_step + 1) if cfg.rounds else 0
    finality.sort()

    def pct(q):
        if not finality:
            return None
        return float(finality[min(len(finality) - 1, int(q * len(finality)))])

    return Summary(
        config=cfg.to_dict(),
        rows=rows,
        runs=cfg.runs,
        truncated=truncated,
        commit_rate=[c / t if t else 0.0 for c, t in per_node],
        round_success_rate=(sum(success.values()) / len(success)) if success else 0.0,
        finality_mean=statistics.fmean(finality) if finality else None,
        finality_p50=pct(0.5),
        finality_p90=pct(0.9),
        msgs_per_step={k: (v / steps if steps else 0.0) for k, v in zip(("raw", "ack", "cert"), totals)},
        streak_hist=hist,
        violations=violations,
    )


class ViolationFound(Exception):
    def __init__(self, run: int, violations: list):
        super().__init__(f"run {run}: {len(violations)} violation(s)")
        self.run = run
        self.violations = violations


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> Summary:
    """Execute ``cfg.runs`` simulations and aggregate them in run order.

    Raises ViolationFound (after all runs finish) when ``cfg.check`` is on and a
    trace fails a property check.
    """
    jobs = [(cfg, k) for k in range(cfg.runs)]
    workers = worker_count(len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker, jobs))
    else:
        results = [_worker(j) for j in jobs]
    rows = []
    truncated = 0
    violations = []
    for run, reason, run_rows, viol in sorted(results, key=lambda x: x[0]):
        rows.extend(run_rows)
        truncated += reason == "truncated"
        violations.extend(f"run {run}: {v}" for v in viol)
    summary = summarize(cfg, rows, truncated, violations)
    if write and cfg.out:
        emit(summary, cfg.format, cfg.out)
    if violations:
        first = next(r for r, _, _, v in sorted(results, key=lambda x: x[0]) if v)
        raise ViolationFound(first, violations)
    return summary


def render(summary: Summary, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(summary.to_dict(), sort_keys=True, indent=2) + "\n"
    if fmt != "csv":
        raise ConfigError("format must be csv or json")
    buf = io.StringIO()
    buf.write("# config: " + json.dumps(summary.config, sort_keys=True, separators=(",", ":")) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in summary.rows:
        w.writerow(["" if v is None else v for v in row])
    return buf.getvalue()


def emit(summary: Summary, fmt: str, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(render(summary, fmt))
