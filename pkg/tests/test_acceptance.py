"""Acceptance suite. Each test carries a ``criterion`` marker; the run ends with
one PASS/FAIL line per criterion (see ``conftest.py``)."""
import csv
import itertools
import random
import time

import pytest

from oracles.selection import expected_candidates, scan_count
from porch.consensus import (
    CountReport,
    DecisionKind,
    RandomChallenge,
    build_tally,
    count_occurrences,
    make_report,
    resolve,
    verify_report,
)
from porch.dataset import sample_cycle
from porch.dnp3m import (
    BadDirection,
    Direction,
    Frame,
    Message,
    MessageAssembler,
    PayloadTooLarge,
    Truncated,
    decode_frame,
    encode_frame,
    encode_message,
    fragment,
    reassemble,
    StreamDecoder,
)
from porch.harness import TcpRunner
from porch.ledger import validate_chain
from porch.nodes import CC, DA, ProtocolMessage
from porch.runner import RunConfig, build_nodes, report, run
from tamper import FIELDS, mutate_block

criterion = pytest.mark.criterion
NODES = [f"R{i}" for i in range(1, 7)]


@criterion(1, "selection rule matches brute-force oracle, exhaustive 2..6 nodes x counts 0..8")
def test_selection_oracle_exhaustive():
    rng = random.Random(0)
    cases = 0
    started = time.perf_counter()
    for n in range(2, 7):
        names = NODES[:n]
        for counts in itertools.product(range(9), repeat=n):
            table = dict(zip(names, counts))
            kind, candidates = expected_candidates(table)
            tally = build_tally(table)
            assert (tally.decision.kind is DecisionKind.UNIQUE) == (kind == "unique")
            assert set(tally.decision.candidates) == candidates
            assert resolve(tally, rng) in candidates
            cases += 1
    elapsed = time.perf_counter() - started
    assert cases == sum(9**n for n in range(2, 7)) >= 10**5
    assert elapsed < 10, f"{elapsed:.2f} s"


@criterion(2, "count_occurrences agrees with an independent scan on 10^4 pairs")
def test_count_oracle():
    rng = random.Random(2)
    started = time.perf_counter()
    assert count_occurrences("777", RandomChallenge(77)) == 1 == scan_count("777", "77")
    for _ in range(10_000):
        digest = "%064x" % rng.getrandbits(256)
        challenge = RandomChallenge(rng.choice([rng.randint(0, 9), rng.randint(0, 99), rng.randint(0, 999)]))
        assert count_occurrences(digest, challenge) == scan_count(digest, challenge.rendered)
    assert time.perf_counter() - started < 5


@criterion(3, "every single-field block mutation and every CountReport mutation is detected")
def test_tamper_evidence(build_chain, dataset):
    chain = build_chain(20)
    assert len(chain) == 21 and validate_chain(chain) == []
    rng = random.Random(3)
    missed = []
    for trial in range(500):
        i = rng.randrange(len(chain))
        field = rng.choice(FIELDS[:-1]) if i == 0 else None
        mutated, used = mutate_block(chain, i, rng, field)
        if not validate_chain(mutated):
            missed.append((trial, i, used))
    assert missed == []

    for cycle in range(1, 26):
        sets = sample_cycle(dataset, cycle, 0)
        challenge = RandomChallenge(rng.randint(0, 9))
        for name, data in sets.items():
            honest = make_report(data, challenge)
            assert verify_report(honest, data, challenge)
            pos = rng.randrange(64)
            flipped = honest.digest[:pos] + format((int(honest.digest[pos], 16) + 1) % 16, "x") \
                + honest.digest[pos + 1:]
            for bad in (
                CountReport(honest.node, honest.digest, honest.count + rng.choice([-2, -1, 1, 2, 5])),
                CountReport(honest.node, flipped, honest.count),
                CountReport(next(n for n in sets if n != name), honest.digest, honest.count),
            ):
                assert not verify_report(bad, data, challenge), bad


@criterion(4, "1000 cycles over 10 seeds replicate identically; a dropped node commits nothing")
@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10))
def test_replication_safety(seed):
    res = run(RunConfig(cycles=100, seed=seed, record_trace=False))
    assert res.exit_code == 0
    assert all(m.committed for m in res.metrics)
    assert len(res.chain) == 101
    dumps = {n.chain.to_json() for n in res.nodes.values()}
    assert len(dumps) == 1 and len(res.nodes) == 6
    assert validate_chain(res.chain) == []


@criterion(4, "1000 cycles over 10 seeds replicate identically; a dropped node commits nothing")
@pytest.mark.parametrize("node", [CC, DA, "R1", "R2", "R3", "R4"])
def test_replication_with_dropped_node(node):
    for seed in range(3):
        res = run(RunConfig(cycles=5, seed=seed, drop={node: 1.0}, record_trace=False))
        assert not any(m.committed for m in res.metrics)
        assert all(len(n.chain) == 1 for n in res.nodes.values())
        assert res.replicas_identical and res.violations == []
        assert res.exit_code == 0


@criterion(5, "each of 4 relays mines 0.25 +/- 0.02 of 10^4 committed cycles")
@pytest.mark.slow
def test_fairness():
    started = time.perf_counter()
    res = run(RunConfig(cycles=10_000, seed=5, record_trace=False))
    elapsed = time.perf_counter() - started
    committed = [m for m in res.metrics if m.committed]
    assert len(committed) == 10_000
    for relay in ["R1", "R2", "R3", "R4"]:
        share = sum(m.miner == relay for m in committed) / len(committed)
        assert abs(share - 0.25) <= 0.02, (relay, share)
    assert elapsed < 60, f"{elapsed:.1f} s"


@criterion(6, "a localhost TCP cycle finishes in < 1000 ms; summary shows selection fraction")
@pytest.mark.tcp
def test_tcp_timing(tmp_path):
    metrics = tmp_path / "m.csv"
    res = run(RunConfig(cycles=3, period=400, transport="tcp", base_port=0, metrics_out=str(metrics)))
    assert all(m.committed for m in res.metrics)
    # wall time as the control center sees it: request out to chain update in
    starts = {e.cycle: e.tick for e in res.trace if e.kind == "send" and e.src == CC}
    ends = {e.cycle: e.tick for e in res.trace if e.kind == "deliver" and e.dst == CC}
    assert sorted(starts) == sorted(ends) == [1, 2, 3]
    for c in starts:
        assert ends[c] - starts[c] < 1000
    assert all(m.total < 1000 for m in res.metrics)
    text = report(metrics).text()
    assert "selection fraction mean:" in text and "~0.75" in text
    rows = list(csv.DictReader(metrics.open()))
    assert all(0 <= float(r["selection_fraction"]) <= 1 for r in rows)


@criterion(7, "with 32 relays, k=4 selection is faster than k=32")
def test_k_of_n_scaling():
    def mean_select(k):
        res = run(RunConfig(relays=32, cycles=20, k_eligible=k, seed=7, record_trace=False))
        assert all(m.committed for m in res.metrics)
        return sum(m.phases["selection"] for m in res.metrics) / len(res.metrics)

    small, full = mean_select(4), mean_select(32)
    assert small < full, (small, full)


@criterion(8, "codec goldens, 10^4 random round-trips and well-formed frames on the TCP wire")
def test_codec_goldens_and_round_trips():
    assert encode_frame(Frame(Direction.REQUEST, b"")) == bytes([0x00, 0x02])
    assert encode_frame(Frame(Direction.RESPONSE, b"AB")) == bytes([0x01, 0x04, 0x41, 0x42])
    with pytest.raises(PayloadTooLarge):
        encode_frame(Frame(Direction.REQUEST, bytes(254)))
    assert decode_frame(bytes([0x00, 0x02])) == (Frame(Direction.REQUEST, b""), b"")
    with pytest.raises(Truncated):
        decode_frame(bytes([0x01]))
    with pytest.raises(BadDirection):
        decode_frame(bytes([0x07, 0x03, 0xFF]))
    assert [f.total_length for f in fragment(Message(Direction.REQUEST, bytes(10)))] == [12]
    assert [f.total_length for f in fragment(Message(Direction.REQUEST, bytes(253)))] == [255, 2]
    assert [f.total_length for f in fragment(Message(Direction.REQUEST, bytes(300)))] == [255, 49]

    rng = random.Random(8)
    for _ in range(10_000):
        size = rng.choice([rng.randint(0, 300), rng.randint(0, 2000), 253 * rng.randint(1, 4)])
        msg = Message(rng.choice(list(Direction)), rng.randbytes(size))
        assert reassemble(fragment(msg)) == msg
        wire = b"".join(encode_message(msg))
        frames = StreamDecoder().feed(wire)
        assert reassemble(frames) == msg


def _walk_frames(stream: bytes) -> list[int]:
    """Step through raw bytes using only the header; returns each frame's length byte."""
    offset, lengths = 0, []
    while offset < len(stream):
        assert stream[offset] in (0x00, 0x01), f"direction byte {stream[offset]:#x} at {offset}"
        length = stream[offset + 1]
        assert 2 <= length and offset + length <= len(stream)
        offset += length
        lengths.append(length)
    assert offset == len(stream)
    return lengths


@criterion(8, "codec goldens, 10^4 random round-trips and well-formed frames on the TCP wire")
@pytest.mark.tcp
def test_tcp_wire_frames():
    nodes = build_nodes(RunConfig(cycles=2, period=300))
    runner = TcpRunner(nodes, base_port=0, keep_wire=True)
    runner.run(lambda: nodes[CC].finished, 30)
    assert all(m.committed for m in nodes[DA].metrics)
    wire = runner.transport.wire
    assert (CC, DA) in wire and (DA, CC) in wire
    lengths = []
    for stream in wire.values():
        lengths += _walk_frames(bytes(stream))
        assembler = MessageAssembler()
        messages = [m for m in map(assembler.push, StreamDecoder().feed(bytes(stream))) if m is not None]
        assert messages[0].body.startswith(b"hello|")
        for message in messages[1:]:
            ProtocolMessage.from_message(message)
    assert lengths
    # blocks exceed one frame, so multi-frame messages must have crossed the wire
    assert 255 in lengths


@criterion(9, "identical config and seed give byte-identical chain, metrics and trace")
def test_determinism(tmp_path):
    outputs = []
    for run_no in range(2):
        d = tmp_path / str(run_no)
        d.mkdir()
        cfg = RunConfig(cycles=20, seed=9, latency=(1, 5), chain_out=str(d / "chain.json"),
                        metrics_out=str(d / "metrics.csv"), trace_out=str(d / "trace.jsonl"))
        run(cfg)
        outputs.append([(d / f).read_bytes() for f in ("chain.json", "metrics.csv", "trace.jsonl")])
    assert outputs[0] == outputs[1]
    assert all(outputs[0])
