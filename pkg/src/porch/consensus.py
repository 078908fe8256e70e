"""Mining-node selection by counting a random challenge in measurement hashes.

Each eligible relay hashes its measurement set and counts how often the
decimal rendering of the challenge occurs in the hex digest. The relay with
the single largest count mines. A tie at the top, or an all-zero round, is
settled by a random draw.

Randomness is injected: any object with the ``random.Random`` interface works,
so a seeded ``random.Random`` gives reproducible runs and
``random.SystemRandom`` draws from OS entropy.
"""

from __future__ import annotations

import enum
import random
import re
from dataclasses import dataclass

from .ledger import MeasurementSet, sha256_hex

DEFAULT_CHALLENGE_RANGE = (0, 9)

_HEX = re.compile(r"[0-9a-f]+")


class ConsensusError(ValueError):
    pass


class BadRange(ConsensusError):
    pass


class BadDigest(ConsensusError):
    pass


class DuplicateNode(ConsensusError):
    pass


class EmptyTally(ConsensusError):
    pass


class BadConfig(ConsensusError):
    pass


@dataclass(frozen=True)
class RandomChallenge:
    value: int

    def __post_init__(self):
        if self.value < 0:
            raise BadRange(f"challenge must be non-negative, got {self.value}")

    @property
    def rendered(self) -> str:
        return str(self.value)


@dataclass(frozen=True)
class CountReport:
    node: str
    digest: str
    count: int


class DecisionKind(enum.Enum):
    UNIQUE = "Unique"
    RANDOM_AMONG = "RandomAmong"
    ABORTED = "Aborted"


@dataclass(frozen=True)
class Decision:
    kind: DecisionKind
    candidates: tuple[str, ...] = ()

    def label(self) -> str:
        """Text form exchanged in votes; equal decisions give equal labels."""
        if self.kind is DecisionKind.UNIQUE:
            return self.candidates[0]
        if self.kind is DecisionKind.RANDOM_AMONG:
            return "random:" + ",".join(self.candidates)
        return "aborted"

    @classmethod
    def from_label(cls, label: str) -> "Decision":
        if label == "aborted":
            return cls(DecisionKind.ABORTED)
        if label.startswith("random:"):
            return cls(DecisionKind.RANDOM_AMONG, tuple(label[7:].split(",")))
        return cls(DecisionKind.UNIQUE, (label,))


@dataclass(frozen=True)
class SelectionTally:
    reports: dict[str, int]
    sorted: tuple[tuple[str, int], ...]
    largest_count_multiplicity: int
    decision: Decision

    @property
    def top_count(self) -> int:
        return self.sorted[0][1]


@dataclass(frozen=True)
class EligibilityConfig:
    k: int
    n: int

    def __post_init__(self):
        if not 1 <= self.k <= self.n:
            raise BadConfig(f"need 1 <= k <= n, got k={self.k}, n={self.n}")


def generate_challenge(rng: random.Random, lo: int = 0, hi: int = 9) -> RandomChallenge:
    if lo > hi or lo < 0:
        raise BadRange(f"invalid challenge range [{lo}, {hi}]")
    return RandomChallenge(rng.randint(lo, hi))


def count_occurrences(digest: str, challenge: RandomChallenge) -> int:
    """Non-overlapping left-to-right occurrences of the challenge in ``digest``."""
    if not _HEX.fullmatch(digest):
        raise BadDigest(f"digest must be lowercase hex, got {digest[:16]!r}")
    # str.count already scans left to right without overlap
    return digest.count(challenge.rendered)


def measurement_digest(data: MeasurementSet) -> str:
    return sha256_hex(data.canonical_bytes())


def make_report(data: MeasurementSet, challenge: RandomChallenge) -> CountReport:
    digest = measurement_digest(data)
    return CountReport(data.node, digest, count_occurrences(digest, challenge))


def _decide(
    ordered: tuple[tuple[str, int], ...], multiplicity: int, tie_from_all: bool
) -> Decision:
    top = ordered[0][1]
    if top == 0 or (multiplicity > 1 and tie_from_all):
        return Decision(DecisionKind.RANDOM_AMONG, tuple(sorted(n for n, _ in ordered)))
    if multiplicity == 1:
        return Decision(DecisionKind.UNIQUE, (ordered[0][0],))
    return Decision(DecisionKind.RANDOM_AMONG, tuple(n for n, _ in ordered[:multiplicity]))


def build_tally(
    reports: list[CountReport] | dict[str, int], tie_from_all: bool = False
) -> SelectionTally:
    """Sort counts descending, ties broken by node name, and derive the decision.

    A tie at the top is settled among the tied nodes, or among every reporting
    node when ``tie_from_all`` is set. An all-zero round always draws from
    every reporting node.
    """
    if isinstance(reports, dict):
        counts = dict(reports)
    else:
        counts = {}
        for r in reports:
            if r.node in counts:
                raise DuplicateNode(f"two reports from {r.node}")
            counts[r.node] = r.count
    if not counts:
        raise EmptyTally("no reports")
    ordered = tuple(sorted(counts.items(), key=lambda item: (-item[1], item[0])))
    top = ordered[0][1]
    multiplicity = sum(1 for _, c in ordered if c == top)
    return SelectionTally(counts, ordered, multiplicity, _decide(ordered, multiplicity, tie_from_all))


def resolve(tally: SelectionTally, rng: random.Random) -> str:
    """Pick the mining node; the rng is consulted only for random branches."""
    if not tally.sorted:
        raise EmptyTally("empty tally")
    decision = tally.decision
    if decision.kind is DecisionKind.UNIQUE:
        return decision.candidates[0]
    if decision.kind is DecisionKind.RANDOM_AMONG:
        return rng.choice(decision.candidates)
    raise EmptyTally("selection was aborted")


def verify_report(
    report: CountReport, data: MeasurementSet, challenge: RandomChallenge
) -> bool:
    if report.node != data.node:
        return False
    digest = measurement_digest(data)
    if report.digest != digest:
        return False
    return report.count == count_occurrences(digest, challenge)


def choose_eligible(
    cfg: EligibilityConfig, nodes: list[str], rng: random.Random
) -> list[str]:
    if cfg.n != len(nodes):
        raise BadConfig(f"config expects {cfg.n} nodes, got {len(nodes)}")
    if len(set(nodes)) != len(nodes):
        raise BadConfig("node names must be unique")
    ordered = sorted(nodes)
    if cfg.k == cfg.n:
        return ordered
    return sorted(rng.sample(ordered, cfg.k))
