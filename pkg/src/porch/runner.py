"""Run acquisition cycles end to end and summarise their metrics."""

from __future__ import annotations

import csv
import io
import logging
import random
import statistics
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .dataset import ParseError, load_dataset, make_sources
from .harness import DEFAULT_BASE_PORT, NetworkPolicy, SimNetwork, TcpRunner, TraceEvent, write_trace
from .ledger import Chain, HashMode, validate_chain
from .nodes import (
    CC,
    DA,
    CycleMetrics,
    DEFAULT_PERIOD,
    DEFAULT_TIMEOUT,
    ControlCenter,
    METRIC_PHASES,
    ProtocolConfig,
    build_topology,
    relay_names,
)

log = logging.getLogger(__name__)

METRICS_HEADER = [
    "cycle", "total_ms", "acq_ms", "check_ms", "select_ms", "mine_ms",
    "verify_ms", "add_ms", "selection_fraction", "outcome", "miner",
]
REFERENCE_SELECTION_SHARE = 0.75


@dataclass
class RunConfig:
    relays: int = 4
    cycles: int = 10
    period: int = DEFAULT_PERIOD
    seed: int = 0
    challenge_range: tuple[int, int] = (0, 9)
    k_eligible: int | None = None
    hash_mode: HashMode = HashMode.SINGLE
    transport: str = "sim"
    latency: int | tuple[int, int] = 1
    processing_ticks: int = 1
    timeout: int = DEFAULT_TIMEOUT
    drop: dict[str, float] = field(default_factory=dict)
    faults: dict[str, dict] = field(default_factory=dict)
    dataset: str | None = None
    chain_out: str | None = None
    metrics_out: str | None = None
    trace_out: str | None = None
    realtime: bool = False
    share_via_da: bool = False
    record_trace: bool = True
    base_port: int = DEFAULT_BASE_PORT
    block_clock: Callable[[int, int], int] | None = None

    def __post_init__(self):
        if self.relays < 2:
            raise ValueError("relays must be >= 2")
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")
        if self.k_eligible is not None and not 1 <= self.k_eligible <= self.relays:
            raise ValueError("k_eligible must be in [1, relays]")
        if self.transport not in ("sim", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        lo, hi = self.challenge_range
        if lo < 0 or lo > hi:
            raise ValueError("challenge range must satisfy 0 <= lo <= hi")

    @property
    def fault_injected(self) -> bool:
        return any(p > 0 for p in self.drop.values()) or bool(self.faults)


@dataclass
class RunResult:
    config: RunConfig
    nodes: dict
    metrics: list[CycleMetrics]
    trace: list[TraceEvent]
    violations: list
    replicas_identical: bool
    exit_code: int

    @property
    def chain(self) -> Chain:
        return self.nodes[DA].chain

    def replicas(self) -> dict[str, Chain]:
        return {name: n.chain for name, n in self.nodes.items() if name != CC}


def protocol_config(cfg: RunConfig) -> ProtocolConfig:
    kwargs = {}
    if cfg.block_clock is not None:
        kwargs["block_clock"] = cfg.block_clock
    return ProtocolConfig(
        relays=relay_names(cfg.relays),
        period=cfg.period,
        timeout=cfg.timeout,
        challenge_range=tuple(cfg.challenge_range),
        k_eligible=cfg.k_eligible,
        hash_mode=cfg.hash_mode,
        share_via_da=cfg.share_via_da,
        **kwargs,
    )


def build_nodes(cfg: RunConfig) -> dict:
    pcfg = protocol_config(cfg)
    ds = load_dataset(cfg.dataset)
    sources = make_sources(ds, pcfg.relays, cfg.seed)
    return build_topology(pcfg, sources, cfg.cycles, random.Random(f"da:{cfg.seed}"), cfg.faults)


def cycle_metrics(cfg: RunConfig, nodes: dict) -> list[CycleMetrics]:
    """One row per requested cycle; cycles the DA never saw count as timeouts."""
    by_cycle = {m.cycle: m for m in nodes[DA].metrics}
    rows = []
    for c in range(1, cfg.cycles + 1):
        rows.append(by_cycle.get(c) or CycleMetrics(c, outcome="Aborted", reason="Timeout",
                                                    detail="no response from DA"))
    return rows


def replicas_identical(nodes: dict) -> bool:
    chains = [n.chain for name, n in nodes.items()]
    tips = {(len(c), c.tip.current_hash) for c in chains}
    return len(tips) == 1 and all(c.blocks == chains[0].blocks for c in chains)


def run(cfg: RunConfig) -> RunResult:
    nodes = build_nodes(cfg)
    if cfg.transport == "sim":
        policy = NetworkPolicy(latency=cfg.latency, seed=cfg.seed,
                               processing_ticks=cfg.processing_ticks, drop_nodes=dict(cfg.drop))
        net = SimNetwork(nodes, policy, record_trace=cfg.record_trace, realtime=cfg.realtime)
        trace = net.run_until_idle(10**15)
    else:
        if cfg.drop:
            raise ValueError("drop injection is only available on the simulated transport")
        cc: ControlCenter = nodes[CC]
        budget = cfg.cycles * (cfg.period / 1000.0) + 10 * cfg.timeout / 1000.0 + 10
        trace = TcpRunner(nodes, base_port=cfg.base_port).run(lambda: cc.finished, budget)
    metrics = cycle_metrics(cfg, nodes)
    violations = validate_chain(nodes[DA].chain)
    identical = replicas_identical(nodes)
    all_committed = all(m.committed for m in metrics)
    ok = not violations and identical and (all_committed or cfg.fault_injected)
    if violations:
        log.error("chain violations: %s", ", ".join(map(str, violations)))
    if not identical:
        log.error("replicas diverged")
    result = RunResult(cfg, nodes, metrics, trace, violations, identical, 0 if ok else 1)
    write_outputs(result)
    return result


def metrics_csv(metrics: list[CycleMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in metrics:
        w.writerow([m.cycle, m.total, *(m.phases[p] for p in METRIC_PHASES),
                    f"{m.selection_fraction:.6f}", m.outcome_label, m.miner])
    return buf.getvalue()


def write_outputs(result: RunResult) -> None:
    cfg = result.config
    if cfg.chain_out:
        result.chain.save(cfg.chain_out)
    if cfg.metrics_out:
        Path(cfg.metrics_out).write_text(metrics_csv(result.metrics), encoding="utf-8")
    if cfg.trace_out:
        write_trace(result.trace, cfg.trace_out)


@dataclass
class Summary:
    cycles: int
    mean_total: float
    median_total: float
    mean_selection_fraction: float
    commit_rate: float
    miners: dict[str, int]

    def text(self) -> str:
        lines = [
            f"cycles:                  {self.cycles}",
            f"commit rate:             {self.commit_rate:.3f}",
            f"cycle time mean/median:  {self.mean_total:.1f} / {self.median_total:.1f} ms",
            f"selection fraction mean: {self.mean_selection_fraction:.3f}"
            f"  (reference prototype: ~{REFERENCE_SELECTION_SHARE:.2f})",
            "miner counts:",
        ]
        total = sum(self.miners.values()) or 1
        for name in sorted(self.miners, key=lambda n: (len(n), n)):
            count = self.miners[name]
            lines.append(f"  {name:<6} {count:>7}  {count / total:.3f}")
        return "\n".join(lines)


def read_metrics(path: str | Path) -> list[dict]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != METRICS_HEADER:
        raise ParseError(f"unexpected metrics header {reader.fieldnames}")
    rows = list(reader)
    if not rows:
        raise ParseError("metrics file has no cycles")
    return rows


def report(path: str | Path) -> Summary:
    rows = read_metrics(path)
    try:
        totals = [int(r["total_ms"]) for r in rows]
        committed = [r for r in rows if r["outcome"] == "Committed"]
        fractions = [float(r["selection_fraction"]) for r in committed]
    except ValueError as exc:
        raise ParseError(str(exc)) from exc
    return Summary(
        cycles=len(rows),
        mean_total=statistics.fmean(totals),
        median_total=statistics.median(totals),
        mean_selection_fraction=statistics.fmean(fractions) if fractions else 0.0,
        commit_rate=len(committed) / len(rows),
        miners=dict(Counter(r["miner"] for r in committed)),
    )
