"""Post-hoc property checks over recorded traces, and an exhaustive safety oracle.

``check_all`` replays a trace once, keeping each node's delivered-record counts
(its vector clock), and reports the first offending event for every property
that fails. ``exhaustive_safety`` enumerates every causal delivery order of a
small QSC instance.
"""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field

from .causality import CausalEndpoint, LogRecord
from .errors import ConfigError, TraceFormatError
from .qsc import GENESIS, FixedTickets, QscConfig, QscNode
from .tlc import CERT, RAW, TlcConfig, TlcNode, majority
from .trace import Trace

PROPERTIES = (
    "integrity", "monotonicity", "pacing", "tlc2", "tlc3", "causal_delivery",
    "period_bound_1", "period_bound_2", "two_step_broadcast", "liveness", "validity",
    "safety", "prefix_consistency", "irrevocability",
)


@dataclass(frozen=True)
class Violation:
    property: str
    event_index: int
    nodes: tuple
    detail: str

    def __str__(self):
        return f"[{self.property}] event {self.event_index} nodes {list(self.nodes)}: {self.detail}"


@dataclass(frozen=True)
class CheckConfig:
    n: int
    t_m: int
    t_w: int
    f_d: int = 0
    max_step: int | None = None

    @property
    def majoritarian(self) -> bool:
        return 2 * self.t_m > self.n and 2 * self.t_w > self.n

    @classmethod
    def from_trace(cls, trace: Trace) -> "CheckConfig":
        c = trace.config
        try:
            return cls(c["n"], c["t_m"], c["t_w"], c.get("f_d", 0), c.get("max_step"))
        except KeyError as exc:
            raise TraceFormatError(f"start event lacks {exc}") from None


def _coerce(config, trace) -> CheckConfig:
    if config is None:
        return CheckConfig.from_trace(trace)
    if isinstance(config, CheckConfig):
        return config
    if isinstance(config, TlcConfig):
        return CheckConfig(config.n, config.t_m, config.t_w, trace.config.get("f_d", 0),
                           config.max_step)
    if isinstance(config, dict):
        return CheckConfig(config["n"], config["t_m"], config["t_w"], config.get("f_d", 0),
                           config.get("max_step"))
    raise ConfigError(f"cannot interpret check config {config!r}")


class _Checker:
    def __init__(self, trace: Trace, cfg: CheckConfig):
        self.trace = trace
        self.cfg = cfg
        self.found: dict[str, Violation] = {}

    def flag(self, prop, e, nodes, detail):
        if prop not in self.found:
            self.found[prop] = Violation(prop, e, tuple(nodes), detail)

    def run(self) -> list[Violation]:
        cfg = self.cfg
        n = cfg.n
        maj = cfg.majoritarian
        need = majority(n)
        steps = [0] * n
        delivered = [[0] * n for _ in range(n)]
        sends: dict[tuple, tuple] = {}
        raw_steps = [set() for _ in range(n)]
        raw_seen = [set() for _ in range(n)]
        starts = {0: 0}
        top = 0
        certs = []  # (event, issuer, step, raw rid)
        reached = [dict() for _ in range(n)]  # node -> {s: delivered snapshot at first step >= s+2}
        rounds_best: dict[int, dict[int, tuple]] = {}
        commits: list[tuple] = []
        chains = [[GENESIS.hash] for _ in range(n)]
        chain_rounds = [[-1] for _ in range(n)]
        ever_delayed = False
        end = None

        for e, row in enumerate(self.trace.rows):
            kind = row[0]
            if kind == "deliver":
                _, frm, to, seq, msg, step, _t, _net = row
                sent = sends.get((frm, seq))
                if sent is None or sent[0] != msg or sent[1] != step:
                    self.flag("integrity", e, (frm, to), f"delivered record {(frm, seq)} was never sent as {msg}{{{step}}}")
                    delivered[to][frm] = max(delivered[to][frm], seq + 1)
                    continue
                d = delivered[to]
                vt = sent[2]
                if d[frm] != seq:
                    self.flag("causal_delivery", e, (frm, to),
                              f"node {to} delivered seq {seq} of node {frm} after {d[frm]} of its records (FIFO gap)")
                else:
                    for k in range(n):
                        if k != frm and vt[k] > d[k]:
                            self.flag("causal_delivery", e, (frm, to, k),
                                      f"record {(frm, seq)} depends on {vt[k]} records of node {k}, node {to} has {d[k]}")
                            break
                d[frm] = max(d[frm], seq + 1)
                if msg == "raw":
                    key = (frm, step)
                    if key in raw_seen[to]:
                        self.flag("tlc2", e, (frm, to), f"node {to} delivered a second step-{step} Raw from node {frm}")
                    raw_seen[to].add(key)
            elif kind == "send":
                _, node, seq, msg, step, vt, ref, extra = row
                if (node, seq) in sends or delivered[node][node] != seq:
                    self.flag("integrity", e, (node,), f"node {node} sent seq {seq} out of order")
                sends[(node, seq)] = (msg, step, vt, e, ref, extra)
                delivered[node][node] = max(delivered[node][node], seq + 1)
                if msg == "raw":
                    if step in raw_steps[node]:
                        self.flag("tlc3", e, (node,), f"node {node} broadcast a second Raw at step {step}")
                    raw_steps[node].add(step)
                    if step != steps[node]:
                        self.flag("tlc3", e, (node,), f"node {node} at step {steps[node]} sent a Raw labeled {step}")
                    if maj and step >= 1 and top < step - 1:
                        self.flag("period_bound_1", e, (node,),
                                  f"Raw{{{step}}} sent before time period {step - 1} began")
                elif msg == "cert":
                    certs.append((e, node, step, ref))
                    if extra is not None and len(set(extra)) < cfg.t_w:
                        self.flag("integrity", e, (node,), f"certificate with {len(set(extra))} < t_w acknowledgers")
            elif kind == "advance":
                _, node, old, new, via = row
                if old != steps[node] or new <= old:
                    self.flag("monotonicity", e, (node,), f"node {node} moved {old}->{new} while at step {steps[node]}")
                if new < steps[node]:
                    continue
                steps[node] = new
                if sum(1 for s in steps if s >= new - 1) < cfg.t_m:
                    self.flag("pacing", e, (node,),
                              f"node {node} reached step {new} while fewer than t_m={cfg.t_m} "
                              f"nodes were at step {new - 1} or later")
                if maj:
                    snap = tuple(delivered[node])
                    for s in range(max(old - 1, 0), new - 1):
                        reached[node].setdefault(s, (snap, e))
                    ranked = sorted(steps, reverse=True)
                    while top < ranked[need - 1]:
                        top += 1
                        starts[top] = e
            elif kind == "round_end":
                _, node, r, best, _ticket, _committed = row
                rounds_best.setdefault(r, {})[node] = (best, e)
            elif kind == "commit":
                _, node, r, prop, block = row
                commits.append((e, node, r, prop, block))
            elif kind == "finalize":
                _, node, height, blocks = row
                chain = chains[node]
                if height < len(chain):
                    self.flag("irrevocability", e, (node,),
                              f"node {node} rewrote its finalized chain from height {height} (length {len(chain)})")
                    del chain[height:]
                    del chain_rounds[node][height:]
                elif height > len(chain):
                    self.flag("prefix_consistency", e, (node,), f"finalize at height {height} leaves a gap")
                for h, parent, rnd, _proposer in blocks:
                    if parent != chain[-1]:
                        self.flag("prefix_consistency", e, (node,), f"block of round {rnd} does not extend node {node}'s chain")
                    chain.append(h)
                    chain_rounds[node].append(rnd)
            elif kind == "delay_set":
                if row[1]:
                    ever_delayed = True
            elif kind == "end":
                end = (e, row)

        # -- whole-trace properties --------------------------------------------
        if maj:
            for e, node, s, ref in certs:
                sent = sends.get(tuple(ref))
                if sent is None:
                    self.flag("integrity", e, (node,), f"certificate for unknown record {ref}")
                    continue
                nxt = starts.get(s + 1)
                if nxt is not None and sent[3] > nxt:
                    self.flag("period_bound_2", e, (node,),
                              f"step-{s} Raw {tuple(ref)} certified though sent after time period {s + 1} began")
                j, q = ref
                for i in range(n):
                    hit = reached[i].get(s)
                    if hit is not None and hit[0][j] <= q:
                        self.flag("two_step_broadcast", hit[1], (i, j),
                                  f"node {i} reached step {s + 2} without certified Raw {tuple(ref)} in its history")

        for e, node, r, prop, block in commits:
            for other, (best, e2) in sorted(rounds_best.get(r, {}).items()):
                if best != prop:
                    self.flag("safety", max(e, e2), (node, other),
                              f"node {node} committed {prop} in round {r} but node {other} chose {best}")
        by_round: dict[int, tuple] = {}
        for e, node, r, prop, block in commits:
            if block is None:
                continue
            prev = by_round.setdefault(r, (block, node, e))
            if prev[0] != block:
                self.flag("safety", e, (prev[1], node), f"conflicting blocks committed for round {r}")

        last = len(self.trace.rows) - 1
        for a in range(n):
            for b in range(a + 1, n):
                ca, cb = chains[a], chains[b]
                k = min(len(ca), len(cb))
                if ca[:k] != cb[:k]:
                    self.flag("prefix_consistency", last, (a, b),
                              f"finalized chains of nodes {a} and {b} diverge")

        if end is not None:
            e, (_, reason, _t, pending, delay_set, final_steps) = end
            if reason == "quiescent":
                dset = set(delay_set)
                stray = [k for k in range(n) if pending[k] and k not in dset]
                if stray:
                    self.flag("liveness", e, stray, "quiescent with pending envelopes from outside S_d")
                live_ok = cfg.t_m <= n - cfg.f_d and cfg.t_w <= n - cfg.f_d
                if live_ok and cfg.max_step is not None:
                    stuck = [k for k in range(n) if k not in dset and final_steps[k] < cfg.max_step]
                    if stuck:
                        self.flag("liveness", e, stuck,
                                  f"live nodes stuck below step {cfg.max_step} at quiescence")
                if not ever_delayed:
                    for i in range(n):
                        for j in range(n):
                            if delivered[i][j] != delivered[j][j]:
                                self.flag("validity", e, (i, j),
                                          f"node {i} delivered {delivered[i][j]} of node {j}'s {delivered[j][j]} records")
        return sorted(self.found.values(), key=lambda v: (v.event_index, v.property))


def check_all(trace: Trace, config=None) -> list[Violation]:
    """Every property violation in ``trace`` (first offending event per property)."""
    return _Checker(trace, _coerce(config, trace)).run()


# -- exhaustive exploration ---------------------------------------------------


@dataclass
class SafetyResult:
    holds: bool | None
    states: int
    transitions: int
    counterexample: list = field(default_factory=list)
    detail: str = ""

    @property
    def inconclusive(self) -> bool:
        return self.holds is None

    def __bool__(self):
        return self.holds is True


class _MNode:
    """One node's full state in the model checker; never mutated once canonical."""

    __slots__ = ("tlc", "qsc", "ep", "log", "pids", "key")


def exhaustive_safety(n: int, t_m: int, t_w: int, rounds: int = 1, depth_bound: int | None = None,
                      commit_rule: str = "qsc3", state_budget: int = 2_000_000,
                      tickets=None, spoiler_horizon: str = "s+3",
                      reduce: bool = True, time_budget: float | None = None) -> SafetyResult:
    """Explore every causal delivery order of an n-node, ``rounds``-round QSC run.

    Delivering an envelope whose causal predecessors are missing only parks it in
    the holdback buffer, so exploring orders of causal deliveries covers every
    network schedule. A node's state is memoized by exactly which records it has
    delivered and emitted, plus its round decisions.

    With ``reduce`` (the default) two outcome-preserving reductions apply:

    * An acknowledgment is silent at a node that did not send the acknowledged
      Raw, or has already left that Raw's step: it changes nothing but the node's
      vector clock. Delivering such records only when a later record depends on
      them just shrinks vector timestamps, which can only widen what other nodes
      may do, so every decision outcome stays reachable.
    * Persistent sets: when every other node has a pending record for node i (or
      can never send again), each future delivery to i starts with one of i's
      currently enabled deliveries, and deliveries to different nodes commute.
      Exploring only i's deliveries then preserves every terminal state.

    Safety decisions never change once made, so checking every reached state
    covers every terminal state. Returns holds=None if ``state_budget``,
    ``time_budget`` (seconds) or ``depth_bound`` cut the search short.
    """
    if not 1 <= n <= 4 or rounds > 2:
        raise ConfigError("exhaustive search supports n <= 4 and rounds <= 2")
    qcfg = QscConfig(rounds, commit_rule=commit_rule, spoiler_horizon=spoiler_horizon,
                     workload="none")
    tcfg = TlcConfig(n, t_m, t_w, max_step=qcfg.max_step)
    if tickets is None:
        # distinct tickets; node ids are interchangeable, so one ordering covers all
        tickets = FixedTickets([[(n - i) << 40 for i in range(n)] for _ in range(max(rounds, 1))])

    records: list[LogRecord] = []
    rec_ids: dict[tuple, int] = {}
    prefixes: dict[tuple, int] = {}
    mnodes: dict[tuple, _MNode] = {}
    trans: dict[tuple, _MNode] = {}

    def intern_rec(rec):
        c = rec.content()
        rid = rec_ids.get(c)
        if rid is None:
            rid = rec_ids[c] = len(records)
            records.append(rec)
        return rid

    def extend(pid, rid):
        k = (pid, rid)
        got = prefixes.get(k)
        if got is None:
            got = prefixes[k] = len(prefixes) + 1
        return got

    def canon(m: _MNode) -> _MNode:
        m.pids = tuple(m.pids)
        m.key = (m.pids, tuple(sorted((r, v.best, v.committed) for r, v in m.qsc.views.items())))
        got = mnodes.get(m.key)
        if got is None:
            mnodes[m.key] = m
            got = m
        return got

    def feed(m: _MNode, msgs):
        for msg in msgs:
            rec = m.ep.stamp(msg)
            rid = intern_rec(rec)
            m.log.append(rid)
            m.pids[m.ep.node] = extend(m.pids[m.ep.node], rid)
            out = m.tlc.on_receive(rec)
            if out:
                feed(m, out)

    def fresh(i):
        m = _MNode()
        m.qsc = QscNode(i, n, qcfg, tickets, None, majoritarian=tcfg.majoritarian)
        m.tlc = TlcNode(i, tcfg, m.qsc)
        m.ep = CausalEndpoint(i, n)
        m.log = []
        m.pids = [0] * n
        feed(m, m.tlc.on_start())
        return canon(m)

    def step(m: _MNode, batch: tuple) -> _MNode:
        # batch: record ids in delivery order; all but the last are silent here
        k = (m.key, batch)
        got = trans.get(k)
        if got is not None:
            return got
        c = _MNode()
        c.qsc = m.qsc.clone()
        c.tlc = m.tlc.clone(c.qsc)
        c.ep = CausalEndpoint(m.ep.node, n)
        c.ep.delivered = list(m.ep.delivered)
        c.log = list(m.log)
        c.pids = list(m.pids)
        for rid in batch:
            rec = records[rid]
            c.ep.delivered[rec.node] += 1
            c.pids[rec.node] = extend(c.pids[rec.node], rid)
        feed(c, c.tlc.on_receive(records[batch[-1]]))
        c = canon(c)
        trans[k] = c
        return c

    def deferrable(m: _MNode, rec: LogRecord) -> bool:
        # records whose arrival cannot change what the clock does next
        if not reduce:
            return False
        tlc = m.tlc
        if rec.kind == RAW or rec.kind == CERT:
            return rec.step < tlc.step
        target = rec.ref
        if target[0] != m.ep.node or rec.step < tlc.step:
            return True
        return rec.step in tlc.cert_sent

    def closure(state, i, need, want, base):
        """Extend ``need`` to cover ``want`` using only deferrable records.

        Returns the records delivered (in causal order), or None if some required
        record is not deferrable at node i.
        """
        m = state[i]
        batch = []
        while True:
            progressed = False
            done = True
            for k in range(n):
                if k == i:
                    continue
                log_k = state[k].log
                while need[k] < want[k]:
                    done = False
                    rid = log_k[need[k]]
                    rec = records[rid]
                    if not deferrable(m, rec):
                        return None
                    vt = rec.vt
                    blocked = False
                    for x in range(n):
                        if x != k and vt[x] > need[x]:
                            blocked = True
                            if vt[x] > want[x]:
                                want[x] = vt[x]
                    if blocked:
                        break
                    batch.append(rid)
                    need[k] += 1
                    progressed = True
            if done or all(need[k] >= want[k] for k in range(n) if k != i):
                return batch
            if not progressed:
                return None

    def moves_at(state, i):
        m = state[i]
        d = m.ep.delivered
        out = []
        saturated = True
        for j in range(n):
            if j == i:
                continue
            log_j = state[j].log
            q = d[j]
            while q < len(log_j) and deferrable(m, records[log_j[q]]):
                q += 1
            if q >= len(log_j):
                if not state[j].tlc.halted:
                    saturated = False
                continue
            rid = log_j[q]
            need = list(d)
            want = list(records[rid].vt)
            want[j] = q
            pre = closure(state, i, need, want, ())
            if pre is None:
                continue
            batch = tuple(pre) + (rid,)
            out.append((i, batch))
            if reduce:
                out.extend((i, b) for b in _variants(state, i, need, j, q, pre, rid))
        return out, saturated

    def _variants(state, i, need, j, q, pre, rid):
        """Alternative batches that also bring in deferred Raws/Certs first.

        Deferred records matter only to the round evaluation a delivery may
        trigger, so they are branched on only for such deliveries.
        """
        m = state[i]
        child = step(m, tuple(pre) + (rid,))
        evaluates = child.qsc.last_ended > m.qsc.last_ended
        if spoiler_horizon == "s+2" and len(child.qsc.horizon) > len(m.qsc.horizon):
            evaluates = True
        if not evaluates:
            return []
        options = []
        for k in range(n):
            if k == i:
                continue
            log_k = state[k].log
            stop = q if k == j else len(log_k)
            cands = [need[k]]
            for pos in range(need[k], stop):
                rec = records[log_k[pos]]
                if (rec.kind == RAW or rec.kind == CERT) and deferrable(m, rec):
                    cands.append(pos + 1)
            options.append((k, cands))
        out = set()
        base = tuple(pre) + (rid,)

        def walk(idx, want):
            if idx == len(options):
                nd = list(need)
                extra = closure(state, i, nd, list(want), ())
                if extra is None or nd[j] > q:
                    return
                batch = tuple(pre) + tuple(extra) + (rid,)
                if batch != base:
                    out.add(batch)
                return
            k, cands = options[idx]
            for c in cands:
                w = list(want)
                w[k] = max(w[k], c)
                walk(idx + 1, w)

        walk(0, list(need))
        return sorted(out)

    def moves(state):
        full = []
        best = None
        for i, m in enumerate(state):
            if m.tlc.halted:
                # a halted node emits nothing and has already decided every round
                continue
            out, saturated = moves_at(state, i)
            if out and saturated and (best is None or len(out) < len(best)):
                best = out
            full.extend(out)
        if reduce and best is not None:
            return best
        return full

    def unsafe(state):
        for a in state:
            for r, v in a.qsc.views.items():
                if not v.committed:
                    continue
                for b in state:
                    w = b.qsc.views.get(r)
                    if w is not None and w.best != v.best:
                        return (f"node {a.tlc.id} committed {v.best} in round {r}, "
                                f"node {b.tlc.id} chose {w.best}")
        for x in range(n):
            for y in range(x + 1, n):
                ca, cb = state[x].qsc.chain_ids, state[y].qsc.chain_ids
                k = min(len(ca), len(cb))
                if ca[:k] != cb[:k]:
                    return f"finalized chains of nodes {x} and {y} diverge"
        return None

    deadline = None if time_budget is None else time.monotonic() + time_budget
    init = tuple(fresh(i) for i in range(n))
    seen = {tuple(m.key for m in init)}
    stack = [(init, moves(init), None)]
    transitions = 0
    cut = False
    bad = unsafe(init)
    if bad:
        return SafetyResult(False, 1, 0, [], bad)
    while stack:
        state, todo, _ = stack[-1]
        if not todo:
            stack.pop()
            continue
        i, batch = todo.pop()
        if depth_bound is not None and len(stack) > depth_bound:
            cut = True
            continue
        nxt = list(state)
        nxt[i] = step(state[i], batch)
        nxt = tuple(nxt)
        transitions += 1
        key = tuple(m.key for m in nxt)
        if key in seen:
            continue
        seen.add(key)
        bad = unsafe(nxt) if nxt[i].qsc.views else None
        if bad:
            path = [frame[2] for frame in stack[1:]] + [(i, batch)]
            return SafetyResult(False, len(seen), transitions,
                                [_describe(records[r], j) for j, b in path for r in b], bad)
        if len(seen) >= state_budget:
            return SafetyResult(None, len(seen), transitions, [], "state budget exhausted")
        if deadline is not None and not transitions & 1023 and time.monotonic() > deadline:
            return SafetyResult(None, len(seen), transitions, [], "time budget exhausted")
        stack.append((nxt, moves(nxt), (i, batch)))
    if cut:
        return SafetyResult(None, len(seen), transitions, [], "depth bound reached")
    return SafetyResult(True, len(seen), transitions)


def _describe(rec: LogRecord, to: int) -> str:
    kind = ("raw", "ack", "cert")[rec.kind]
    return f"deliver {kind}{{{rec.step}}} {rec.node}#{rec.seq} to node {to}"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="tlcqsc-check", description="Check a recorded NDJSON trace.")
    ap.add_argument("trace", help="trace file written with --dump-trace")
    args = ap.parse_args(argv)
    try:
        trace = Trace.load(args.trace)
        violations = check_all(trace)
    except (TraceFormatError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    for v in violations:
        print(v)
    if violations:
        return 2
    print(f"ok: {len(trace)} events, no violations")
    return 0


if __name__ == "__main__":
    sys.exit(main())
