import pytest

from tlcqsc.causality import LogRecord
from tlcqsc.errors import ConfigError, HarnessBug, ProtocolError
from tlcqsc.experiment import ExperimentConfig, simulate
from tlcqsc.prng import STREAM_TICKETS, derive_seed
from tlcqsc.qsc import (GENESIS, FixedTickets, Proposal, QscConfig, QscNode, QscPayload, Ticket,
                        TicketSource, Tx, block_hash, form_block)
from tlcqsc.tlc import CERT, RAW, RawExtra

from test_prng import reference_splitmix64


class Feed:
    """Hand-built history for one QscNode (node 0 of 3)."""

    def __init__(self, tickets=(9, 5, 1), rule="qsc3", horizon="s+3"):
        cfg = QscConfig(1, workload="none", commit_rule=rule, spoiler_horizon=horizon)
        self.q = QscNode(0, 3, cfg, FixedTickets([list(tickets)]))
        self.seq = [0, 0, 0]
        self.tickets = tickets

    def _next(self, node):
        s = self.seq[node]
        self.seq[node] += 1
        return s

    def propose(self, node):
        seq = self._next(node)
        p = Proposal(0, node, Ticket(self.tickets[node]))
        self.q.on_deliver(LogRecord(node, seq, (), RAW, 0, None,
                                    RawExtra((), QscPayload(p, ()))))
        return (node, seq)

    def raw(self, node, step, basis=()):
        seq = self._next(node)
        self.q.on_deliver(LogRecord(node, seq, (), RAW, step, None, RawExtra(tuple(basis))))
        return (node, seq)

    def cert(self, node, step, of):
        self.q.on_deliver(LogRecord(node, self._next(node), (), CERT, step, of, (0, 1)))

    def proposal(self, rid):
        return self.q.proposal_of[rid]


def test_ticket_source_matches_stream():
    seed, n = 77, 3
    src = TicketSource(seed, n)
    base = derive_seed(seed, STREAM_TICKETS)
    stream = reference_splitmix64(base, 3 * n)
    for r in range(3):
        for node in range(n):
            assert src.value(node, r) == stream[r * n + node]
    t = src.ticket(0, 0)
    assert t.sealed and t.wire_value() is None and 0 <= t.fraction < 1
    assert TicketSource(seed, n, sealed=False).ticket(0, 0).wire_value() == stream[0]


def test_config_round_mapping():
    seq = QscConfig(4)
    assert [seq.round_start(r) for r in range(4)] == [0, 3, 6, 9] and seq.max_step == 12
    assert seq.round_at(6) == 2 and seq.round_at(7) is None and seq.round_at(12) is None
    pipe = QscConfig(4, pipeline=True)
    assert pipe.round_at(2) == 2 and pipe.max_step == 6
    assert list(seq.rounds_ending_in(2, 7)) == [0, 1]
    assert QscConfig(0).max_step == 0
    with pytest.raises(ConfigError):
        QscConfig(1, commit_rule="fast")


def test_confirmation_needs_certificate():
    f = Feed()
    a = f.propose(1)
    assert f.q.confirmed(0) == []
    assert not f.q.confirm(f.proposal(a))
    f.cert(1, 0, a)
    assert f.q.confirm(f.proposal(a))


def test_paparazzi_reconfirmation():
    f = Feed()
    a = f.propose(0)
    f.cert(0, 0, a)
    m = f.raw(1, 1, basis=[a])  # B's next-step Raw built on a's certificate
    assert not f.q.reconfirm(f.proposal(a))
    f.cert(1, 1, m)
    assert f.q.reconfirm(f.proposal(a))


def test_celebrity_without_cited_certificate_is_not_reconfirmed():
    f = Feed()
    a = f.propose(0)
    f.cert(0, 0, a)
    m = f.raw(1, 1, basis=[])  # a certified next-step Raw that does not record a's Cert
    f.cert(1, 1, m)
    assert not f.q.reconfirm(f.proposal(a))


def test_best_confirmed_picks_highest_ticket():
    f = Feed(tickets=(5, 9, 1))
    a, b = f.propose(0), f.propose(1)
    f.cert(0, 0, a)
    f.cert(1, 0, b)
    assert f.q.best_confirmed(0).proposer == 1


def test_best_confirmed_tie_breaks_to_smaller_proposer():
    f = Feed(tickets=(1, 7, 7))
    b, c = f.propose(1), f.propose(2)
    f.cert(1, 0, b)
    f.cert(2, 0, c)
    assert f.q.best_confirmed(0).proposer == 1
    assert not f.q.decide_commit(0)  # equal tickets spoil each other


def test_best_of_empty_round_is_a_bug():
    with pytest.raises(HarnessBug):
        Feed().q.best_confirmed(0)


def _reconfirmed(f, node):
    p = f.propose(node)
    f.cert(node, 0, p)
    m = f.raw((node + 1) % 3, 1, basis=[p])
    f.cert((node + 1) % 3, 1, m)
    return p


def test_commit_when_best_reconfirmed_without_spoiler():
    f = Feed(tickets=(9, 5, 1))
    _reconfirmed(f, 0)
    f.propose(1)
    assert f.q.decide_commit(0)


def test_unconfirmed_higher_ticket_spoils_commit():
    f = Feed(tickets=(5, 9, 1))
    _reconfirmed(f, 0)
    f.propose(1)  # seen but never certified, with a higher ticket
    assert f.q.best_confirmed(0).proposer == 0
    assert not f.q.decide_commit(0)


def test_weakened_rule_commits_on_confirmation_alone():
    f = Feed(tickets=(5, 9, 1), rule="confirm")
    a = f.propose(0)
    f.cert(0, 0, a)
    f.propose(1)
    assert f.q.decide_commit(0)


def test_double_propose_rejected():
    q = QscNode(0, 3, QscConfig(2), TicketSource(0, 3))
    q.propose(0)
    with pytest.raises(ProtocolError):
        q.propose(0)


def test_block_hash_deterministic_and_coin_filter():
    p = Proposal(0, 1, Ticket(3), (Tx("a", "c1"), Tx("b", "c1"), Tx("c", "c2")))
    b1 = form_block(p, GENESIS)
    assert b1 == form_block(p, GENESIS)
    assert [t.id for t in b1.txs] == ["a", "c"]
    b2 = form_block(Proposal(1, 0, Ticket(4), (Tx("d", "c1"),)), b1, spent={"c1", "c2"})
    assert b2.txs == () and b2.parent_hash == b1.hash
    assert b2.hash == block_hash(b1.hash, 1, 0, ())
    assert form_block(Proposal(0, 0, Ticket(1)), GENESIS).txs == ()


def test_single_node_wins_every_round():
    res = simulate(ExperimentConfig(nodes=1, rounds=5))
    q = res.qsc[0]
    assert all(q.views[r].committed and q.views[r].best[0] == 0 for r in range(5))
    assert len(q.chain) == 6


def test_pipelined_rounds_overlap():
    res = simulate(ExperimentConfig(rounds=6, pipeline=True, seed=4), record=True)
    rows = res.trace.rows
    first_propose_1 = next(e for e, r in enumerate(rows) if r[0] == "propose" and r[2] == 1)
    first_end_0 = next(e for e, r in enumerate(rows) if r[0] == "round_end" and r[2] == 0)
    assert first_propose_1 < first_end_0


def test_chains_agree_across_nodes():
    res = simulate(ExperimentConfig(rounds=40, seed=5))
    chains = [[b.hash for b in q.chain] for q in res.qsc]
    k = min(map(len, chains))
    assert k > 1 and all(c[:k] == chains[0][:k] for c in chains)
    # every finalized block is built by replaying the same parent decisions
    for q in res.qsc:
        for parent, child in zip(q.chain, q.chain[1:]):
            assert child.parent_hash == parent.hash


def test_clone_independent():
    f = Feed()
    c = f.q.clone()
    f.propose(0)
    assert c.proposals == {} and f.q.proposals
