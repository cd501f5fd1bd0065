"""Threshold logical clock state machine, TLC(t_m, t_w, n).

A node at step s broadcasts one Raw message, acknowledges every step-s Raw it
receives while still at s, turns t_w acknowledgments of its own Raw into a Cert,
and advances to s+1 once it holds t_m certified step-s messages (t_m step-s Raws
when t_w = 0). Receiving any message labeled with a later step makes it catch up
to that step at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

from .causality import LogRecord, Message
from .errors import ConfigError, ProtocolError

RAW, ACK, CERT = 0, 1, 2
KIND_NAMES = ("raw", "ack", "cert")
KIND_CODES = {name: code for code, name in enumerate(KIND_NAMES)}


@dataclass(frozen=True)
class TlcConfig:
    n: int
    t_m: int
    t_w: int
    self_ack: bool = True
    max_step: int | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if not 1 <= self.t_m <= self.n:
            raise ConfigError(f"t_m must be in [1, n], got {self.t_m}")
        if not 0 <= self.t_w <= self.n:
            raise ConfigError(f"t_w must be in [0, n], got {self.t_w}")
        if self.max_step is not None and self.max_step < 0:
            raise ConfigError("max_step must be non-negative")

    @property
    def majoritarian(self) -> bool:
        return 2 * self.t_m > self.n and 2 * self.t_w > self.n

    @property
    def witnessed(self) -> bool:
        return self.t_w > 0


class RawExtra(NamedTuple):
    """Payload of a Raw record.

    ``basis`` lists the step-(s-1) Raw ids whose certificates (or the Raws
    themselves when unwitnessed) the sender used to reach step s; it is empty
    after a viral catch-up or at step 0.
    """

    basis: tuple
    body: object = None


class TlcApp:
    """Upper-layer hooks driven by a TlcNode. The default does nothing."""

    def on_deliver(self, rec: LogRecord) -> None:
        pass

    def on_advance(self, old: int, new: int) -> None:
        pass

    def raw_body(self, step: int) -> object:
        return None


class TlcNode:
    """Clock state of one node. Handlers return the messages the node emits."""

    def __init__(self, node_id: int, config: TlcConfig, app: TlcApp | None = None,
                 sink: Callable[[tuple], None] | None = None):
        self.id = node_id
        self.cfg = config
        self.app = app if app is not None else TlcApp()
        self.sink = sink
        self.step = 0
        self.started = False
        self.raws: dict[int, dict[int, tuple]] = {}
        self.certs: dict[int, dict[tuple, tuple]] = {}
        self.own_raw: dict[int, tuple] = {}
        self.acks: dict[tuple, set] = {}
        self.cert_sent: set[int] = set()
        self.advanced_on: dict[int, tuple] = {}
        self.late_acks = 0

    @property
    def halted(self) -> bool:
        return self.cfg.max_step is not None and self.step >= self.cfg.max_step

    def _raw(self, step: int, basis: tuple) -> Message:
        return Message(RAW, step, None, RawExtra(basis, self.app.raw_body(step)))

    def on_start(self) -> list[Message]:
        if self.started:
            raise ProtocolError(f"node {self.id} already started")
        self.started = True
        self.app.on_advance(-1, 0)
        return [self._raw(0, ())]

    def _advance(self, new: int, via: str, basis: tuple) -> Message:
        old = self.step
        self.step = new
        own = self.own_raw.get(old)
        if own is not None:
            # abandon witnessing of the step we are leaving
            self.acks.pop(own, None)
        if self.sink is not None:
            self.sink(("advance", self.id, old, new, via))
        self.app.on_advance(old, new)
        return self._raw(new, basis)

    def advance_check(self) -> Message | None:
        if self.halted:
            return None
        s = self.step
        pool = self.certs.get(s) if self.cfg.t_w > 0 else self.raws.get(s)
        if not pool or len(pool) < self.cfg.t_m:
            return None
        # the first t_m arrivals, listed in id order so equal sets encode equally
        if self.cfg.t_w > 0:
            basis = tuple(sorted(list(pool)[: self.cfg.t_m]))
        else:
            basis = tuple(sorted(list(pool.values())[: self.cfg.t_m]))
        self.advanced_on[s] = basis
        return self._advance(s + 1, "threshold", basis)

    def catch_up(self, target: int, carrier: LogRecord | None = None) -> Message | None:
        if self.cfg.max_step is not None:
            target = min(target, self.cfg.max_step)
        if target <= self.step:
            return None
        return self._advance(target, "viral", ())

    def _maybe_cert(self, rid: tuple, s: int) -> Message | None:
        acks = self.acks.get(rid)
        if (acks is None or s != self.step or s in self.cert_sent or self.halted
                or len(acks) < self.cfg.t_w):
            return None
        self.cert_sent.add(s)
        ackers = tuple(sorted(acks))
        if self.sink is not None:
            self.sink(("cert", self.id, s, rid, ackers))
        return Message(CERT, s, rid, ackers)

    def on_receive(self, rec: LogRecord) -> list[Message]:
        self.app.on_deliver(rec)
        out: list[Message] = []
        kind, s = rec.kind, rec.step
        if rec.node == self.id:
            if kind == RAW:
                rid = (rec.node, rec.seq)
                self.raws.setdefault(s, {})[self.id] = rid
                self.own_raw[s] = rid
                if self.cfg.t_w > 0:
                    self.acks[rid] = {self.id} if self.cfg.self_ack else set()
                    m = self._maybe_cert(rid, s)
                    if m is not None:
                        out.append(m)
            elif kind == CERT:
                self.certs.setdefault(s, {})[rec.ref] = (rec.node, rec.seq)
            m = self.advance_check()
            if m is not None:
                out.append(m)
            return out

        if kind == RAW:
            if s > self.step:
                m = self.catch_up(s, rec)
                if m is not None:
                    out.append(m)
            step_raws = self.raws.setdefault(s, {})
            if rec.node not in step_raws:
                step_raws[rec.node] = (rec.node, rec.seq)
                if s == self.step and self.cfg.t_w > 0 and not self.halted:
                    out.append(Message(ACK, s, (rec.node, rec.seq)))
            if self.cfg.t_w == 0:
                m = self.advance_check()
                if m is not None:
                    out.append(m)
        elif kind == ACK:
            target = rec.ref
            if target[0] == self.id:
                acks = self.acks.get(target)
                if acks is None:
                    self.late_acks += 1
                else:
                    acks.add(rec.node)
                    m = self._maybe_cert(target, s)
                    if m is not None:
                        out.append(m)
        elif kind == CERT:
            if s > self.step:
                m = self.catch_up(s, rec)
                if m is not None:
                    out.append(m)
            self.certs.setdefault(s, {}).setdefault(rec.ref, (rec.node, rec.seq))
            m = self.advance_check()
            if m is not None:
                out.append(m)
        return out

    def clone(self, app: TlcApp | None = None) -> "TlcNode":
        """Independent copy of the clock state (the app is replaced, not copied)."""
        c = TlcNode.__new__(TlcNode)
        c.id, c.cfg, c.sink = self.id, self.cfg, self.sink
        c.app = app if app is not None else self.app
        c.step, c.started, c.late_acks = self.step, self.started, self.late_acks
        c.raws = {s: d.copy() for s, d in self.raws.items()}
        c.certs = {s: d.copy() for s, d in self.certs.items()}
        c.own_raw = self.own_raw.copy()
        c.acks = {k: set(v) for k, v in self.acks.items()}
        c.cert_sent = set(self.cert_sent)
        c.advanced_on = self.advanced_on.copy()
        return c

    def fingerprint(self) -> tuple:
        """Hashable summary of the mutable clock state (for state-space search)."""
        return (
            self.step,
            self.started,
            tuple(sorted((s, tuple(sorted(v.items()))) for s, v in self.raws.items())),
            tuple(sorted((s, tuple(sorted(v))) for s, v in self.certs.items())),
            tuple(sorted((r, tuple(sorted(a))) for r, a in self.acks.items())),
            tuple(sorted(self.cert_sent)),
            tuple(sorted(self.advanced_on.items())),
        )


def majority(n: int) -> int:
    """Smallest strict majority of n, i.e. ceil((n+1)/2)."""
    return n // 2 + 1


def global_periods(trace, config: TlcConfig) -> dict[int, tuple[int, int | None]]:
    """Map step s to (start_event, end_event) of the majoritarian time period s.

    Period s starts at the event where a majority of nodes has first reached step
    s or later, and ends where period s+1 starts (None if it never does).
    """
    if not config.majoritarian:
        raise ConfigError("time periods are only defined for majoritarian thresholds")
    n = config.n
    need = majority(n)
    steps = [0] * n
    starts: dict[int, int] = {0: 0}
    top = 0
    for e, row in enumerate(trace.rows):
        if row[0] != "advance":
            continue
        node, new = row[1], row[3]
        steps[node] = new
        ranked = sorted(steps, reverse=True)
        reached = ranked[need - 1]
        while top < reached:
            top += 1
            starts[top] = e
    out = {}
    for s, start in starts.items():
        out[s] = (start, starts.get(s + 1))
    return out
