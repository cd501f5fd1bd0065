"""Que Sera Consensus (QSC3) on top of majority-witnessed TLC.

Round r starts at step ``3r`` (sequential) or ``r`` (pipelined) and ends three
steps later. At the start each node proposes with a fresh lottery ticket; at the
end it picks its best confirmed proposal and decides whether the round committed.

Proposals carry only transactions. The parent of a proposal's block is whatever
its proposer picked as best confirmed in the previous round; proposers announce
those picks in the ``decisions`` field of their later Raw messages, so every node
reconstructs the same chain for the same proposal.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Callable, NamedTuple

from .causality import LogRecord
from .errors import ConfigError, HarnessBug, ProtocolError
from .prng import GOLDEN_GAMMA, MASK64, STREAM_TICKETS, derive_seed, mix64
from .tlc import CERT, RAW, TlcApp, TlcConfig

GENESIS_ID = (-1, -1)
ZERO_HASH = "0" * 64


@dataclass(frozen=True)
class Ticket:
    value: int
    sealed: bool = True

    @property
    def fraction(self) -> float:
        return self.value / 2.0**64

    def wire_value(self) -> int | None:
        """What a network observer can read: nothing when sealed."""
        return None if self.sealed else self.value


@dataclass(frozen=True)
class Tx:
    id: str
    coin: str


@dataclass(frozen=True)
class Proposal:
    round: int
    proposer: int
    ticket: Ticket
    txs: tuple = ()
    raw_msg: tuple | None = None


@dataclass(frozen=True)
class Block:
    parent_hash: str
    round: int
    proposer: int
    txs: tuple
    hash: str


def block_hash(parent_hash: str, round_: int, proposer: int, txs) -> str:
    body = json.dumps([parent_hash, round_, proposer, [[t.id, t.coin] for t in txs]],
                      separators=(",", ":"))
    return hashlib.sha256(body.encode()).hexdigest()


GENESIS = Block(ZERO_HASH, -1, -1, (), block_hash(ZERO_HASH, -1, -1, ()))


def form_block(winning: Proposal, parent: Block, spent=frozenset()) -> Block:
    """Deterministic block for ``winning`` on top of ``parent``.

    ``spent`` holds the coins already spent along the parent's chain; transactions
    touching them (or a coin spent earlier in this same block) are dropped.
    """
    kept = []
    used = set()
    for tx in winning.txs:
        if tx.coin in spent or tx.coin in used:
            continue
        used.add(tx.coin)
        kept.append(tx)
    txs = tuple(kept)
    return Block(parent.hash, winning.round, winning.proposer, txs,
                 block_hash(parent.hash, winning.round, winning.proposer, txs))


class TicketSource:
    """Lottery tickets: output ``round * n + node`` of the run's ticket stream."""

    def __init__(self, seed: int, n: int, sealed: bool = True):
        self.base = derive_seed(seed, STREAM_TICKETS)
        self.n = n
        self.sealed = sealed

    def value(self, node: int, round_: int) -> int:
        k = round_ * self.n + node + 1
        return mix64((self.base + k * GOLDEN_GAMMA) & MASK64)

    def ticket(self, node: int, round_: int) -> Ticket:
        return Ticket(self.value(node, round_), self.sealed)


class FixedTickets(TicketSource):
    """Tickets from an explicit table ``values[round][node]`` (tests, model checking)."""

    def __init__(self, values, sealed: bool = True):
        self.values = values
        self.n = len(values[0]) if values else 0
        self.sealed = sealed

    def value(self, node: int, round_: int) -> int:
        row = self.values[min(round_, len(self.values) - 1)]
        return row[node]


def synthetic_txs(node: int, round_: int) -> tuple:
    # consecutive rounds spend the same coin, so chains exercise conflict filtering
    return (Tx(f"t{round_}.{node}", f"c{round_ // 2}"),)


@dataclass(frozen=True)
class QscConfig:
    rounds: int
    pipeline: bool = False
    encrypt_tickets: bool = True
    commit_rule: str = "qsc3"
    spoiler_horizon: str = "s+3"
    workload: str = "synthetic"

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("rounds must be non-negative")
        if self.commit_rule not in ("qsc3", "confirm"):
            raise ConfigError(f"unknown commit rule {self.commit_rule!r}")
        if self.spoiler_horizon not in ("s+2", "s+3"):
            raise ConfigError(f"unknown spoiler horizon {self.spoiler_horizon!r}")
        if self.workload not in ("synthetic", "none"):
            raise ConfigError(f"unknown workload {self.workload!r}")

    def round_start(self, r: int) -> int:
        return r if self.pipeline else 3 * r

    def round_at(self, step: int) -> int | None:
        """The round that starts at ``step``, if any."""
        if self.pipeline:
            r = step
        elif step % 3 == 0:
            r = step // 3
        else:
            return None
        return r if 0 <= r < self.rounds else None

    @property
    def max_step(self) -> int:
        if self.rounds == 0:
            return 0
        return self.round_start(self.rounds - 1) + 3

    def rounds_ending_in(self, old: int, new: int) -> range:
        """Rounds whose end step lies in (old, new]."""
        return self._rounds_at_offset(old, new, 3)

    def _rounds_at_offset(self, old: int, new: int, off: int) -> range:
        if self.pipeline:
            lo, hi = old - off + 1, new - off
        else:
            lo, hi = -((off - old - 1) // 3), (new - off) // 3
        return range(max(lo, 0), min(hi, self.rounds - 1) + 1)


def tlc_config_for(n: int, qsc: QscConfig, t_m: int | None = None, t_w: int | None = None,
                   self_ack: bool = True) -> TlcConfig:
    """Majority-witnessed TLC sized for a QSC run (defaults t_m = t_w = f+1 with n = 2f+1)."""
    f = (n - 1) // 2
    return TlcConfig(n, f + 1 if t_m is None else t_m, f + 1 if t_w is None else t_w,
                     self_ack=self_ack, max_step=qsc.max_step)


class QscPayload(NamedTuple):
    proposal: Proposal | None
    decisions: tuple  # ((round, winner raw id), ...)


@dataclass(frozen=True)
class RoundView:
    round: int
    confirmed: frozenset
    reconfirmed: frozenset
    seen_any: frozenset
    best: tuple | None
    best_ticket: int | None
    committed: bool


class QscNode(TlcApp):
    """Per-node consensus bookkeeping, fed by the TLC node it rides on."""

    def __init__(self, node_id: int, n: int, cfg: QscConfig, tickets: TicketSource,
                 sink: Callable[[tuple], None] | None = None, majoritarian: bool = True):
        self.id = node_id
        self.n = n
        self.cfg = cfg
        self.tickets = tickets
        self.sink = sink
        self.strict = majoritarian
        self.proposals: dict[int, dict[tuple, Proposal]] = {}
        self.proposal_of: dict[tuple, Proposal] = {}
        self.certified: set[tuple] = set()
        self.cited_by: dict[tuple, list] = {}
        self.decisions: dict[tuple, tuple | None] = {}
        self.views: dict[int, RoundView] = {}
        self.horizon: dict[int, frozenset] = {}
        self.proposed: set[int] = set()
        self.outbox: list[tuple] = []
        self.chain: list[Block] = [GENESIS]
        self.chain_ids: list[tuple] = [GENESIS_ID]
        self.chain_index: dict[tuple, int] = {GENESIS_ID: 0}
        self.spent: set[str] = set()
        self.commits: list[tuple[int, tuple]] = []
        self.finalized_at: dict[int, int] = {}
        self.last_ended = -1

    # -- history indexing -------------------------------------------------

    def on_deliver(self, rec: LogRecord) -> None:
        kind = rec.kind
        if kind == RAW:
            rid = (rec.node, rec.seq)
            extra = rec.extra
            for b in extra.basis:
                self.cited_by.setdefault(b, []).append(rid)
            body = extra.body
            if body is not None:
                p = body.proposal
                if p is not None:
                    p = Proposal(p.round, p.proposer, p.ticket, p.txs, rid)
                    self.proposals.setdefault(p.round, {})[rid] = p
                    self.proposal_of[rid] = p
                if body.decisions:
                    for r, w in body.decisions:
                        self.decisions[(rec.node, r)] = w
                    if self.commits:
                        self._try_finalize()
        elif kind == CERT:
            self.certified.add(rec.ref)

    # -- TLC hooks --------------------------------------------------------

    def on_advance(self, old: int, new: int) -> None:
        cfg = self.cfg
        for r in cfg._rounds_at_offset(old, new, 2):
            self.horizon[r] = frozenset(self.proposals.get(r, ()))
        for r in cfg.rounds_ending_in(old, new):
            self._end_round(r)

    def raw_body(self, step: int):
        r = self.cfg.round_at(step)
        proposal = self.propose(r) if r is not None else None
        decisions = tuple(self.outbox)
        self.outbox.clear()
        if proposal is None and not decisions:
            return None
        return QscPayload(proposal, decisions)

    # -- protocol operations ----------------------------------------------

    def propose(self, round_: int) -> Proposal:
        if round_ in self.proposed:
            raise ProtocolError(f"node {self.id} already proposed in round {round_}")
        self.proposed.add(round_)
        ticket = self.tickets.ticket(self.id, round_)
        txs = synthetic_txs(self.id, round_) if self.cfg.workload == "synthetic" else ()
        if self.sink is not None:
            c = hashlib.sha256(f"{self.id}:{round_}:{ticket.value}".encode()).hexdigest()[:16]
            self.sink(("propose", self.id, round_, c))
        return Proposal(round_, self.id, ticket, txs)

    def confirm(self, p: Proposal) -> bool:
        """Does this node's history hold a certificate for ``p``'s Raw?"""
        return p.raw_msg in self.certified

    def reconfirm(self, p: Proposal) -> bool:
        """Some certified next-step Raw cites ``p``'s certificate in its basis."""
        if not self.confirm(p):
            return False
        certified = self.certified
        return any(m in certified for m in self.cited_by.get(p.raw_msg, ()))

    def confirmed(self, round_: int) -> list[Proposal]:
        certified = self.certified
        return [p for rid, p in self.proposals.get(round_, {}).items() if rid in certified]

    def best_confirmed(self, round_: int) -> Proposal:
        confirmed = self.confirmed(round_)
        if not confirmed:
            raise HarnessBug(f"node {self.id} confirmed nothing in round {round_}")
        return max(confirmed, key=lambda p: (p.ticket.value, -p.proposer))

    def seen_any(self, round_: int) -> frozenset:
        if self.cfg.spoiler_horizon == "s+2" and round_ in self.horizon:
            return self.horizon[round_]
        return frozenset(self.proposals.get(round_, ()))

    def decide_commit(self, round_: int) -> bool:
        confirmed = self.confirmed(round_)
        if not confirmed:
            return False
        best = max(confirmed, key=lambda p: (p.ticket.value, -p.proposer))
        if self.cfg.commit_rule == "confirm":
            return True
        if not self.reconfirm(best):
            return False
        props = self.proposals[round_]
        for rid in self.seen_any(round_):
            if rid != best.raw_msg and props[rid].ticket.value >= best.ticket.value:
                return False
        return True

    def _end_round(self, r: int) -> None:
        confirmed = self.confirmed(r)
        self.last_ended = max(self.last_ended, r)
        if not confirmed:
            if self.strict:
                raise HarnessBug(f"node {self.id} confirmed nothing in round {r}")
            self.views[r] = RoundView(r, frozenset(), frozenset(), self.seen_any(r), None, None, False)
            self.decisions[(self.id, r)] = None
            self.outbox.append((r, None))
            return
        best = max(confirmed, key=lambda p: (p.ticket.value, -p.proposer))
        committed = self.decide_commit(r)
        view = RoundView(
            r,
            frozenset(p.raw_msg for p in confirmed),
            frozenset(p.raw_msg for p in confirmed if self.reconfirm(p)),
            self.seen_any(r),
            best.raw_msg,
            best.ticket.value,
            committed,
        )
        self.views[r] = view
        self.decisions[(self.id, r)] = best.raw_msg
        self.outbox.append((r, best.raw_msg))
        if self.sink is not None:
            self.sink(("round_end", self.id, r, best.raw_msg, best.ticket.value, committed))
        if committed:
            self.commits.append((r, best.raw_msg))
            self._try_finalize()
            if self.sink is not None:
                h = self.chain_index.get(best.raw_msg)
                self.sink(("commit", self.id, r, best.raw_msg,
                           self.chain[h].hash if h is not None else None))

    # -- chain finalization -----------------------------------------------

    def lineage(self, rid: tuple) -> tuple[int, list[Proposal]] | None:
        """Walk parents from ``rid`` back to the finalized chain.

        Returns (height of the attachment point, proposals oldest-first), or None
        while some proposer's decision is not yet in this node's history.
        """
        path = []
        cur = rid
        while cur not in self.chain_index:
            p = self.proposal_of.get(cur)
            if p is None:
                return None
            path.append(p)
            if p.round == 0:
                cur = GENESIS_ID
            else:
                cur = self.decisions.get((p.proposer, p.round - 1))
                if cur is None:
                    return None
        path.reverse()
        return self.chain_index[cur], path

    def _try_finalize(self) -> None:
        while self.commits:
            r, rid = self.commits[0]
            found = self.lineage(rid)
            if found is None:
                return
            self.commits.pop(0)
            height, path = found
            if height < len(self.chain) - 1:
                # rewriting finalized history; only reachable with a broken commit rule
                for bid in self.chain_ids[height + 1:]:
                    del self.chain_index[bid]
                del self.chain[height + 1:]
                del self.chain_ids[height + 1:]
                self.spent = {tx.coin for b in self.chain for tx in b.txs}
            start = len(self.chain)
            for p in path:
                b = form_block(p, self.chain[-1], self.spent)
                self.spent.update(tx.coin for tx in b.txs)
                self.chain_index[p.raw_msg] = len(self.chain)
                self.chain.append(b)
                self.chain_ids.append(p.raw_msg)
                self.finalized_at.setdefault(p.round, self.last_ended)
            if path and self.sink is not None:
                blocks = tuple((b.hash, b.parent_hash, b.round, b.proposer)
                               for b in self.chain[start:])
                self.sink(("finalize", self.id, start, blocks))

    def clone(self) -> "QscNode":
        c = QscNode.__new__(QscNode)
        c.id, c.n, c.cfg, c.tickets, c.sink, c.strict = (
            self.id, self.n, self.cfg, self.tickets, self.sink, self.strict)
        c.proposals = {r: d.copy() for r, d in self.proposals.items()}
        c.proposal_of = self.proposal_of.copy()
        c.certified = set(self.certified)
        c.cited_by = {k: list(v) for k, v in self.cited_by.items()}
        c.decisions = self.decisions.copy()
        c.views = self.views.copy()
        c.horizon = self.horizon.copy()
        c.proposed = set(self.proposed)
        c.outbox = list(self.outbox)
        c.chain = list(self.chain)
        c.chain_ids = list(self.chain_ids)
        c.chain_index = self.chain_index.copy()
        c.spent = set(self.spent)
        c.commits = list(self.commits)
        c.finalized_at = self.finalized_at.copy()
        c.last_ended = self.last_ended
        return c

    def fingerprint(self) -> tuple:
        return (
            tuple(sorted((r, v.best, v.committed) for r, v in self.views.items())),
            tuple(self.chain_ids),
            tuple(sorted(self.horizon.items())) if self.cfg.spoiler_horizon == "s+2" else (),
        )
