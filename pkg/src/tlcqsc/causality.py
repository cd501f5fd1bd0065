"""Vector clocks and causally ordered (holdback) delivery.

Every protocol message a node emits becomes a LogRecord in that node's log,
numbered consecutively from 0 and stamped with the node's vector clock. A vector
clock entry ``vt[k]`` counts how many of node k's records are covered, so a
record's own entry is ``seq + 1``.
"""
from __future__ import annotations

from typing import Iterable, NamedTuple, Sequence

from .errors import CausalGapError, HarnessBug

VectorClock = tuple  # tuple[int, ...] of per-node record counts


def vc_zero(n: int) -> VectorClock:
    return (0,) * n


def vc_leq(a: Sequence[int], b: Sequence[int]) -> bool:
    """True iff ``a <= b`` component-wise (a happens-before-or-equals b)."""
    if len(a) != len(b):
        raise ValueError(f"vector clock dimension mismatch: {len(a)} vs {len(b)}")
    return all(x <= y for x, y in zip(a, b))


def vc_merge(a: Sequence[int], b: Sequence[int]) -> VectorClock:
    if len(a) != len(b):
        raise ValueError(f"vector clock dimension mismatch: {len(a)} vs {len(b)}")
    return tuple(x if x >= y else y for x, y in zip(a, b))


def vc_concurrent(a: Sequence[int], b: Sequence[int]) -> bool:
    return not vc_leq(a, b) and not vc_leq(b, a)


class Message(NamedTuple):
    """A protocol payload before it is stamped into a node's log."""

    kind: int
    step: int
    ref: tuple | None = None
    extra: object = None


class LogRecord:
    """One entry of a node's causal log; immutable once created."""

    __slots__ = ("node", "seq", "vt", "kind", "step", "ref", "extra")

    def __init__(self, node: int, seq: int, vt: VectorClock, kind: int, step: int,
                 ref: tuple | None = None, extra: object = None):
        self.node = node
        self.seq = seq
        self.vt = vt
        self.kind = kind
        self.step = step
        self.ref = ref
        self.extra = extra

    @property
    def rid(self) -> tuple[int, int]:
        return (self.node, self.seq)

    @property
    def msg(self) -> Message:
        return Message(self.kind, self.step, self.ref, self.extra)

    def content(self) -> tuple:
        return (self.node, self.seq, self.vt, self.kind, self.step, self.ref, self.extra)

    def __eq__(self, other):
        if not isinstance(other, LogRecord):
            return NotImplemented
        return self.content() == other.content()

    def __hash__(self):
        return hash((self.node, self.seq, self.vt))

    def __repr__(self):
        return (f"LogRecord(node={self.node}, seq={self.seq}, vt={self.vt}, kind={self.kind}, "
                f"step={self.step}, ref={self.ref})")


class CausalEndpoint:
    """Per-node causal delivery layer: stamps outgoing records, buffers incoming ones.

    ``delivered[k]`` is the number of node k's records delivered here, which is
    also this node's current vector clock.
    """

    __slots__ = ("node", "n", "delivered", "buffer", "store")

    def __init__(self, node: int, n: int):
        self.node = node
        self.n = n
        self.delivered = [0] * n
        self.buffer: dict[tuple[int, int], LogRecord] = {}
        self.store: dict[tuple[int, int], LogRecord] = {}

    @property
    def vt(self) -> VectorClock:
        return tuple(self.delivered)

    def stamp(self, msg: Message) -> LogRecord:
        """Append a message to this node's own log; it is delivered locally at once."""
        d = self.delivered
        seq = d[self.node]
        d[self.node] = seq + 1
        rec = LogRecord(self.node, seq, tuple(d), msg[0], msg[1], msg[2], msg[3])
        self.store[(self.node, seq)] = rec
        return rec

    def deliverable(self, rec: LogRecord) -> bool:
        d = self.delivered
        if rec.seq != d[rec.node]:
            return False
        vt = rec.vt
        for k in range(self.n):
            if k != rec.node and vt[k] > d[k]:
                return False
        return True

    def offer(self, rec: LogRecord) -> bool:
        """Accept a record from the network into the holdback buffer.

        Returns False for an exact duplicate (ignored).
        """
        rid = (rec.node, rec.seq)
        old = self.store.get(rid) or self.buffer.get(rid)
        if old is not None:
            if old.content() == rec.content():
                return False
            raise HarnessBug(f"node {self.node}: conflicting records for {rid}")
        if rec.node == self.node:
            raise HarnessBug(f"node {self.node}: received its own record {rid} from the network")
        self.buffer[rid] = rec
        return True

    def deliver_direct(self, rec: LogRecord) -> bool:
        """Deliver ``rec`` at once if it is ready and nothing is buffered.

        Equivalent to ``holdback_deliver`` returning ``[rec]``, minus the buffer
        round-trip. Returns False (changing nothing) otherwise.
        """
        if self.buffer or rec.node == self.node or not self.deliverable(rec):
            return False
        self.delivered[rec.node] += 1
        self.store[(rec.node, rec.seq)] = rec
        return True

    def pop_ready(self) -> LogRecord | None:
        """Deliver the next causally ready buffered record, if any."""
        buf = self.buffer
        if not buf:
            return None
        d = self.delivered
        # Only the next-in-sequence record of each sender can be ready; try senders in id order.
        for k in range(self.n):
            rec = buf.get((k, d[k]))
            if rec is not None and self.deliverable(rec):
                del buf[(k, rec.seq)]
                d[k] += 1
                self.store[(k, rec.seq)] = rec
                return rec
        return None

    def holdback_deliver(self, rec: LogRecord) -> list[LogRecord]:
        """Offer ``rec`` and return every record that became deliverable, in causal order."""
        out = []
        if not self.offer(rec):
            return out
        while True:
            r = self.pop_ready()
            if r is None:
                return out
            out.append(r)


def history_of(vt: Sequence[int], store: dict | Iterable[LogRecord]) -> list[LogRecord]:
    """All records ``r`` with ``r.vt <= vt``, i.e. the causal history a clock covers.

    Raises CausalGapError when the store lacks a record that ``vt`` covers.
    """
    records = store.values() if isinstance(store, dict) else list(store)
    by_node = [0] * len(vt)
    out = []
    for r in records:
        if r.seq < vt[r.node]:
            by_node[r.node] += 1
        if vc_leq(r.vt, vt):
            out.append(r)
    for k, want in enumerate(vt):
        if by_node[k] != want:
            raise CausalGapError(f"store covers {by_node[k]} of node {k}'s first {want} records")
    out.sort(key=lambda r: (sum(r.vt), r.node, r.seq))
    return out
