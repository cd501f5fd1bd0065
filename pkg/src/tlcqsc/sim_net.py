"""Deterministic discrete-event simulation of an asynchronous broadcast network.

Virtual time is the number of network deliveries so far. The adversary picks
which pending envelope arrives next. At send time every envelope gets a
committed delivery deadline, except envelopes from nodes in the indefinite-delay
set S_d, which are held without one until their sender leaves S_d.
"""
from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

from .causality import CausalEndpoint, LogRecord
from .errors import ConfigError, HarnessBug
from .prng import STREAM_SCHEDULER, SplitMix64, derive_seed
from .tlc import KIND_NAMES, RAW, CERT, TlcNode
from .trace import Trace

INDEFINITE = None


@dataclass(frozen=True)
class Oblivious:
    """Uniform pseudorandom choice among deliverable envelopes."""


@dataclass(frozen=True)
class DelaySet:
    """Pseudorandom scheduling plus an indefinite-delay set drawn from ``schedule``.

    With ``period`` > 0 the set rotates through ``schedule`` every ``period``
    deliveries, and also whenever the network would otherwise go quiescent while
    holding envelopes. With ``period`` = 0 the first set stays fixed.
    """

    schedule: tuple = ()
    period: int = 0


@dataclass(frozen=True)
class TicketAware:
    """Starve the best plaintext proposal of acknowledgments (see TicketAwarePolicy)."""


@dataclass(frozen=True)
class SimConfig:
    n: int
    f_d: int = 0
    seed: int = 0
    adversary: object = field(default_factory=Oblivious)
    max_events: int = 1_000_000
    deadline_horizon: int = 1000

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if not 0 <= self.f_d < self.n:
            raise ConfigError(f"f_d must satisfy 0 <= f_d < n, got {self.f_d}")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.max_events < 0 or self.deadline_horizon < 1:
            raise ConfigError("max_events must be >= 0 and deadline_horizon >= 1")
        if isinstance(self.adversary, DelaySet):
            for s in self.adversary.schedule:
                if len(set(s)) > self.f_d:
                    raise ConfigError(f"delay set {sorted(s)} exceeds f_d={self.f_d}")
                if any(not 0 <= x < self.n for x in s):
                    raise ConfigError(f"delay set {sorted(s)} names an unknown node")
            if self.adversary.period < 0:
                raise ConfigError("DelaySet period must be non-negative")
        elif not isinstance(self.adversary, (Oblivious, TicketAware)):
            raise ConfigError(f"unknown adversary {self.adversary!r}")


class Envelope:
    """One point-to-point copy of a broadcast record."""

    __slots__ = ("msg_id", "sender", "recipient", "payload", "send_event", "deadline", "pos", "done")

    def __init__(self, msg_id, sender, recipient, payload, send_event, deadline):
        self.msg_id = msg_id
        self.sender = sender
        self.recipient = recipient
        self.payload = payload
        self.send_event = send_event
        self.deadline = deadline
        self.pos = -1
        self.done = False

    def __repr__(self):
        return (f"Envelope(#{self.msg_id} {self.sender}->{self.recipient} "
                f"deadline={self.deadline})")


class Network:
    """Pending envelopes and the committed-deadline bookkeeping.

    Finite deadlines are handed out as distinct, increasing slots no earlier than
    ``now + horizon``, so forcing overdue envelopes one per delivery always meets
    every deadline.
    """

    def __init__(self, n: int, f_d: int, horizon: int = 1000, trace: Trace | None = None):
        self.n = n
        self.f_d = f_d
        self.horizon = horizon
        self.trace = trace
        self.now = 0
        self.next_id = 0
        self.live: list[Envelope] = []
        self.held: list[list[Envelope]] = [[] for _ in range(n)]
        self.by_deadline: deque[Envelope] = deque()
        self.urgent: list[tuple[int, int, Envelope]] = []
        self.last_slot = -1
        self.delay_set: frozenset = frozenset()
        self.send_hook = None

    # -- sending ------------------------------------------------------------

    def _slot(self) -> int:
        slot = self.now + self.horizon
        if slot <= self.last_slot:
            slot = self.last_slot + 1
        self.last_slot = slot
        return slot

    def _make_live(self, env: Envelope) -> None:
        env.deadline = self._slot()
        env.pos = len(self.live)
        self.live.append(env)
        self.by_deadline.append(env)

    def broadcast(self, sender: int, payload: LogRecord) -> list[Envelope]:
        """Enqueue one envelope per other node. Self-delivery is the caller's job."""
        out = []
        indefinite = sender in self.delay_set
        for r in range(self.n):
            if r == sender:
                continue
            env = Envelope(self.next_id, sender, r, payload, self.now, INDEFINITE)
            self.next_id += 1
            if indefinite:
                self.held[sender].append(env)
            else:
                self._make_live(env)
            if self.send_hook is not None:
                self.send_hook(env)
            out.append(env)
        return out

    # -- adversary powers -----------------------------------------------------

    def set_delay_set(self, members) -> None:
        new = frozenset(members)
        if len(new) > self.f_d:
            raise ConfigError(f"delay set of size {len(new)} exceeds f_d={self.f_d}")
        if new == self.delay_set:
            return
        leaving = sorted(self.delay_set - new)
        self.delay_set = new
        for s in leaving:
            for env in self.held[s]:
                self._make_live(env)
            self.held[s] = []
        if self.trace is not None:
            self.trace.append(("delay_set", tuple(sorted(new)), self.now))

    def advance_deadline(self, env: Envelope, deadline: int) -> None:
        """Promise earlier delivery of a live envelope; deadlines never move later."""
        if env.deadline is INDEFINITE or env.done:
            raise HarnessBug("only pending envelopes with a committed deadline can be advanced")
        if deadline > env.deadline:
            raise HarnessBug("a committed deadline cannot be postponed")
        env.deadline = max(deadline, self.now)
        heapq.heappush(self.urgent, (env.deadline, env.msg_id, env))

    # -- delivery -------------------------------------------------------------

    @property
    def pending(self) -> int:
        return len(self.live) + sum(len(h) for h in self.held)

    def overdue(self) -> Envelope | None:
        q = self.by_deadline
        while q and q[0].done:
            q.popleft()
        u = self.urgent
        while u and u[0][2].done:
            heapq.heappop(u)
        best = None
        if q and q[0].deadline <= self.now:
            best = q[0]
        if u and u[0][0] <= self.now and (best is None or u[0][0] < best.deadline):
            best = u[0][2]
        return best

    def take(self, env: Envelope) -> Envelope:
        """Remove ``env`` from the pending set."""
        if env.done:
            raise HarnessBug(f"envelope {env.msg_id} delivered twice")
        if env.deadline is INDEFINITE:
            self.held[env.sender].remove(env)
        else:
            live = self.live
            last = live.pop()
            if last is not env:
                live[env.pos] = last
                last.pos = env.pos
        env.done = True
        return env

    def next_delivery(self, policy) -> Envelope | None:
        """The next envelope to deliver, or None when quiescent."""
        env = self.overdue()
        if env is not None:
            return self.take(env)
        if not self.live:
            policy.on_quiescent(self)
            if not self.live:
                return None
        env = policy.pick(self)
        return self.take(env) if env is not None else None


class Policy:
    """Base scheduler: pick a live envelope; may adjust S_d when idle."""

    def pick(self, net: Network) -> Envelope | None:
        raise NotImplementedError

    def on_quiescent(self, net: Network) -> None:
        pass

    def before_pick(self, net: Network) -> None:
        pass

    def observe(self, env: Envelope) -> None:
        pass


class ObliviousPolicy(Policy):
    def __init__(self, seed: int):
        self.rng = SplitMix64(derive_seed(seed, STREAM_SCHEDULER))

    def pick(self, net: Network) -> Envelope | None:
        live = net.live
        return live[self.rng.below(len(live))]


class DelaySetPolicy(ObliviousPolicy):
    def __init__(self, seed: int, schedule: Sequence, period: int):
        super().__init__(seed)
        self.schedule = [frozenset(s) for s in schedule]
        self.period = period
        self.phase = 0
        self.phase_start = 0

    def install(self, net: Network) -> None:
        if self.schedule:
            net.set_delay_set(self.schedule[0])

    def _rotate(self, net: Network) -> None:
        self.phase += 1
        self.phase_start = net.now
        net.set_delay_set(self.schedule[self.phase % len(self.schedule)])

    def before_pick(self, net: Network) -> None:
        if self.period and len(self.schedule) > 1 and net.now - self.phase_start >= self.period:
            self._rotate(net)

    def on_quiescent(self, net: Network) -> None:
        if not self.period or len(self.schedule) < 2:
            return
        for _ in range(len(self.schedule)):
            if net.live or not any(net.held):
                return
            self._rotate(net)


class TicketAwarePolicy(Policy):
    """Keep the holder of the best plaintext ticket from being acknowledged.

    For each proposal step s the victim is the sender of the highest plaintext
    ticket seen so far at s. Its envelopes to a node X are held back while X has
    not yet broadcast anything beyond step s, so nobody witnesses the best
    proposal in time, yet everyone sees it soon after. Otherwise the oldest
    envelope (lowest msg_id) goes first. The policy reads only message labels
    (kind, step, sender) and unsealed ticket values.
    """

    def __init__(self, n: int):
        self.n = n
        self.observed = [-1] * n
        self.best: dict[int, tuple[int, int]] = {}  # step -> (ticket, sender)
        self.heap: list[tuple[int, Envelope]] = []

    def observe(self, env: Envelope) -> None:
        rec = env.payload
        heapq.heappush(self.heap, (env.msg_id, env))
        if rec.kind != RAW:
            return
        s = rec.step
        if s > self.observed[rec.node]:
            self.observed[rec.node] = s
        body = rec.extra.body
        p = getattr(body, "proposal", None)
        if p is None:
            return
        value = p.ticket.wire_value()
        if value is None:
            return
        cur = self.best.get(s)
        if cur is None or (value, -rec.node) > (cur[0], -cur[1]):
            self.best[s] = (value, rec.node)

    def blocked(self, env: Envelope) -> bool:
        seen = self.observed[env.recipient]
        for s, (_, victim) in self.best.items():
            if victim == env.sender and seen <= s:
                return True
        return False

    def _prune(self) -> None:
        low = min(self.observed)
        for s in [s for s in self.best if s < low]:
            del self.best[s]

    def pick(self, net: Network) -> Envelope | None:
        heap = self.heap
        self._prune()
        skipped = []
        chosen = None
        while heap:
            item = heapq.heappop(heap)
            env = item[1]
            if env.done:
                continue
            skipped.append(item)
            if env.deadline is not INDEFINITE and not self.blocked(env):
                chosen = env
                skipped.pop()
                break
        for item in skipped:
            heapq.heappush(heap, item)
        if chosen is None:
            # everything deliverable is blocked; progress beats the attack
            chosen = min(net.live, key=lambda e: e.msg_id)
        return chosen


def make_policy(cfg: SimConfig) -> Policy:
    adv = cfg.adversary
    if isinstance(adv, Oblivious):
        return ObliviousPolicy(cfg.seed)
    if isinstance(adv, DelaySet):
        return DelaySetPolicy(cfg.seed, adv.schedule, adv.period)
    if isinstance(adv, TicketAware):
        return TicketAwarePolicy(cfg.n)
    raise ConfigError(f"unknown adversary {adv!r}")


def _wire_extra(rec: LogRecord):
    if rec.kind == RAW:
        return rec.extra.basis
    if rec.kind == CERT:
        return rec.extra
    return None


class Simulation:
    """Drives TLC nodes over a Network until quiescence or the event budget."""

    def __init__(self, config: SimConfig, nodes: Sequence[TlcNode], trace: Trace | None = None,
                 policy: Policy | None = None, meta: dict | None = None,
                 count_steps: bool = False):
        if len(nodes) != config.n:
            raise ConfigError(f"expected {config.n} nodes, got {len(nodes)}")
        self.cfg = config
        self.nodes = list(nodes)
        self.trace = trace
        if trace is not None:
            for nd in self.nodes:
                if nd.sink is None:
                    nd.sink = trace.append
        self.net = Network(config.n, config.f_d, config.deadline_horizon, trace)
        self.policy = policy if policy is not None else make_policy(config)
        if type(self.policy).observe is not Policy.observe:
            self.net.send_hook = self.policy.observe
        self.endpoints = [CausalEndpoint(i, config.n) for i in range(config.n)]
        self.sent = {RAW: 0, 1: 0, CERT: 0}
        self.step_counts = [dict() for _ in range(config.n)] if count_steps else None
        self.meta = meta or {}
        self.reason = None

    def _emit(self, i: int, msgs) -> None:
        node = self.nodes[i]
        ep = self.endpoints[i]
        trace = self.trace
        for m in msgs:
            rec = ep.stamp(m)
            self.sent[rec.kind] += 1
            if self.step_counts is not None:
                c = self.step_counts[i].get(rec.step)
                if c is None:
                    c = self.step_counts[i][rec.step] = [0, 0, 0]
                c[rec.kind] += 1
            if trace is not None:
                trace.append(("send", i, rec.seq, KIND_NAMES[rec.kind], rec.step, rec.vt,
                              rec.ref, _wire_extra(rec)))
            self.net.broadcast(i, rec)
            out = node.on_receive(rec)
            if out:
                self._emit(i, out)

    def run(self) -> Trace | None:
        cfg, net, trace = self.cfg, self.net, self.trace
        if trace is not None:
            start = {"n": cfg.n, "f_d": cfg.f_d, "seed": cfg.seed,
                     "adversary": describe_adversary(cfg.adversary),
                     "max_events": cfg.max_events, "deadline_horizon": cfg.deadline_horizon}
            start.update(self.meta)
            trace.append(("start", start))
        if hasattr(self.policy, "install"):
            self.policy.install(net)
        for i, node in enumerate(self.nodes):
            self._emit(i, node.on_start())
        policy = self.policy
        endpoints = self.endpoints
        nodes = self.nodes
        before = policy.before_pick if type(policy).before_pick is not Policy.before_pick else None
        while True:
            if net.now >= cfg.max_events:
                self.reason = "truncated"
                break
            if before is not None:
                before(net)
            env = net.next_delivery(policy)
            if env is None:
                self.reason = "quiescent"
                break
            t = net.now
            net.now = t + 1
            rec = env.payload
            to = env.recipient
            ep = endpoints[to]
            if ep.deliver_direct(rec):
                if trace is not None:
                    trace.append(("deliver", rec.node, to, rec.seq, KIND_NAMES[rec.kind], rec.step,
                                  t, 1))
                out = nodes[to].on_receive(rec)
                if out:
                    self._emit(to, out)
                continue
            if not ep.offer(rec):
                continue
            first = True
            while True:
                r = ep.pop_ready()
                if r is None:
                    break
                if trace is not None:
                    if first and r is not rec:
                        trace.append(("hold", rec.node, to, rec.seq, t))
                    trace.append(("deliver", r.node, to, r.seq, KIND_NAMES[r.kind], r.step, t,
                                  1 if r is rec else 0))
                first = False
                out = nodes[to].on_receive(r)
                if out:
                    self._emit(to, out)
            if first and trace is not None:
                trace.append(("hold", rec.node, to, rec.seq, t))
        if trace is not None:
            pending = [0] * cfg.n
            for env in net.live:
                pending[env.sender] += 1
            for s, h in enumerate(net.held):
                pending[s] += len(h)
            trace.append(("end", self.reason, net.now, tuple(pending),
                          tuple(sorted(net.delay_set)), tuple(nd.step for nd in nodes)))
            trace.freeze()
        return trace


def describe_adversary(adv) -> dict:
    if isinstance(adv, DelaySet):
        return {"kind": "delayset", "schedule": [sorted(s) for s in adv.schedule],
                "period": adv.period}
    if isinstance(adv, TicketAware):
        return {"kind": "ticketaware"}
    return {"kind": "oblivious"}


def run(config: SimConfig, nodes: Sequence[TlcNode], trace: Trace | None = None) -> Trace:
    """Simulate ``nodes`` under ``config`` and return the complete, frozen trace."""
    if trace is None:
        trace = Trace()
    return Simulation(config, nodes, trace).run()
