"""Relay, data aggregator and control center state machines.

Nodes never touch a transport. Each handler takes the current time and
returns a list of actions (:class:`Send`, :class:`SetTimer`,
:class:`CancelTimer`, :class:`Note`) which the driver in
:mod:`porch.harness` carries out. That keeps every node a single-threaded,
deterministic function of the events it sees.

Wire text of a protocol message::

    kind|sender|cycle|field=value;field=value

Values percent-escape ``% ; = |`` and line breaks; everything else is sent as is.
"""

from __future__ import annotations

import enum
import logging
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol
from urllib.parse import unquote

from . import consensus
from .consensus import CountReport, EligibilityConfig, RandomChallenge
from .dnp3m import Direction, Message
from .ledger import (
    Block,
    Chain,
    HashMode,
    MeasurementSet,
    create_block,
    verify_new_block,
)

log = logging.getLogger(__name__)

CC = "CC"
DA = "DA"
DEFAULT_PERIOD = 15_000
DEFAULT_TIMEOUT = 2_000
_ESCAPES = str.maketrans({c: f"%{ord(c):02X}" for c in "%;=|\r\n"})


class MsgKind(str, enum.Enum):
    DATA_REQUEST = "DataRequest"
    DATA_RESPONSE = "DataResponse"
    CHAIN_CHECK = "ChainCheck"
    CHAIN_CHECK_REPLY = "ChainCheckReply"
    CHALLENGE = "Challenge"
    COUNT_SHARE = "CountShare"
    VOTE = "Vote"
    MINING_ASSIGN = "MiningAssign"
    NEW_BLOCK = "NewBlock"
    VERIFY_REQUEST = "VerifyRequest"
    VERIFY_REPLY = "VerifyReply"
    ADD_BLOCK = "AddBlock"
    CHAIN_UPDATE = "ChainUpdate"


_REPLY_KINDS = {
    MsgKind.DATA_RESPONSE,
    MsgKind.CHAIN_CHECK_REPLY,
    MsgKind.COUNT_SHARE,
    MsgKind.VOTE,
    MsgKind.NEW_BLOCK,
    MsgKind.VERIFY_REPLY,
    MsgKind.CHAIN_UPDATE,
}


class ProtocolError(Exception):
    """A message that breaks the cycle; ``node`` is the party to flag."""

    reason = "ProtocolError"

    def __init__(self, message: str = "", node: str | None = None):
        super().__init__(message)
        self.node = node


class MessageFormatError(ProtocolError):
    reason = "MessageFormat"


class DuplicateResponse(ProtocolError):
    reason = "DuplicateResponse"


class UnknownRelay(ProtocolError):
    reason = "UnknownRelay"


class ChainMismatch(ProtocolError):
    reason = "ChainMismatch"


class CountMismatch(ProtocolError):
    reason = "CountMismatch"


class VoteDisagreement(ProtocolError):
    reason = "VoteDisagreement"


class VerificationFailed(ProtocolError):
    reason = "VerificationFailed"


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MsgKind
    sender: str
    cycle: int
    fields: tuple[tuple[str, str], ...] = ()
    direction: Direction | None = None

    def __post_init__(self):
        if isinstance(self.fields, dict):
            object.__setattr__(self, "fields", tuple(self.fields.items()))
        if self.direction is None:
            d = Direction.RESPONSE if self.kind in _REPLY_KINDS else Direction.REQUEST
            object.__setattr__(self, "direction", d)

    def get(self, key: str, default: str | None = None) -> str | None:
        for k, v in self.fields:
            if k == key:
                return v
        return default

    def __getitem__(self, key: str) -> str:
        value = self.get(key)
        if value is None:
            raise MessageFormatError(f"{self.kind.value} lacks field {key!r}", self.sender)
        return value

    def to_text(self) -> str:
        body = ";".join(f"{k}={v.translate(_ESCAPES)}" for k, v in self.fields)
        return f"{self.kind.value}|{self.sender}|{self.cycle}|{body}"

    def to_message(self) -> Message:
        return Message(self.direction, self.to_text().encode("utf-8"))

    @classmethod
    def from_text(cls, text: str, direction: Direction | None = None) -> "ProtocolMessage":
        try:
            kind, sender, cycle, body = text.split("|", 3)
            fields = []
            if body:
                for part in body.split(";"):
                    k, v = part.split("=", 1)
                    fields.append((k, unquote(v) if "%" in v else v))
            return cls(MsgKind(kind), sender, int(cycle), tuple(fields), direction)
        except ValueError as exc:
            raise MessageFormatError(f"cannot parse message {text[:60]!r}") from exc

    @classmethod
    def from_message(cls, message: Message) -> "ProtocolMessage":
        try:
            text = message.body.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MessageFormatError("message body is not UTF-8") from exc
        return cls.from_text(text, message.direction)


class Cipher(Protocol):
    def encrypt(self, data: bytes) -> bytes: ...

    def decrypt(self, data: bytes) -> bytes: ...


class IdentityCipher:
    def encrypt(self, data: bytes) -> bytes:
        return data

    def decrypt(self, data: bytes) -> bytes:
        return data


class XorCipher:
    """Keyed XOR stream. Not secure; exists to exercise the cipher hook."""

    def __init__(self, key: bytes):
        if not key:
            raise ValueError("empty key")
        self.key = key

    def encrypt(self, data: bytes) -> bytes:
        k = self.key
        return bytes(b ^ k[i % len(k)] for i, b in enumerate(data))

    decrypt = encrypt


# bytes <-> str without loss, so ciphertext can ride in a text field
def _pack(data: bytes) -> str:
    return data.decode("latin-1")


def _unpack(text: str) -> bytes:
    return text.encode("latin-1")


def encode_payload(sets: list[MeasurementSet] | tuple[MeasurementSet, ...]) -> bytes:
    return "\n".join(s.canonical() for s in sets).encode("utf-8")


def decode_payload(data: bytes) -> tuple[MeasurementSet, ...]:
    text = data.decode("utf-8")
    return tuple(MeasurementSet.parse(line) for line in text.split("\n") if line)


def aggregate(collected: dict[str, MeasurementSet]) -> tuple[MeasurementSet, ...]:
    """Ordered concatenation by node name."""
    return tuple(collected[name] for name in sorted(collected))


@dataclass(frozen=True)
class Send:
    to: str
    message: ProtocolMessage


@dataclass(frozen=True)
class SetTimer:
    key: str
    at: int


@dataclass(frozen=True)
class CancelTimer:
    key: str


@dataclass(frozen=True)
class Note:
    kind: str
    cycle: int
    detail: str


Action = Send | SetTimer | CancelTimer | Note


class Phase(enum.Enum):
    IDLE = "Idle"
    ACQUIRING = "Acquiring"
    CHAIN_CHECKING = "ChainChecking"
    SELECTING = "Selecting"
    MINING = "Mining"
    VERIFYING = "Verifying"
    ADDING = "Adding"
    DONE = "Done"
    ABORTED = "Aborted"


_ORDER = [
    Phase.IDLE,
    Phase.ACQUIRING,
    Phase.CHAIN_CHECKING,
    Phase.SELECTING,
    Phase.MINING,
    Phase.VERIFYING,
    Phase.ADDING,
    Phase.DONE,
]
TERMINAL = frozenset({Phase.IDLE, Phase.DONE, Phase.ABORTED})

ALLOWED: dict[Phase, frozenset[Phase]] = {
    p: frozenset({_ORDER[i + 1]} | ({Phase.ABORTED} if p not in TERMINAL else set()))
    for i, p in enumerate(_ORDER[:-1])
}
ALLOWED[Phase.DONE] = frozenset({Phase.ACQUIRING})
ALLOWED[Phase.ABORTED] = frozenset({Phase.ACQUIRING})


def can_transition(old: Phase, new: Phase) -> bool:
    return new in ALLOWED[old]


# metric name -> phase it measures
METRIC_PHASES = {
    "acquisition": Phase.ACQUIRING,
    "chain_check": Phase.CHAIN_CHECKING,
    "selection": Phase.SELECTING,
    "mining": Phase.MINING,
    "verification": Phase.VERIFYING,
    "addition": Phase.ADDING,
}


@dataclass
class CycleMetrics:
    cycle: int
    total: int = 0
    phases: dict[str, int] = field(default_factory=lambda: dict.fromkeys(METRIC_PHASES, 0))
    outcome: str = "Committed"
    reason: str = ""
    detail: str = ""
    miner: str = ""
    flagged: tuple[str, ...] = ()

    @property
    def committed(self) -> bool:
        return self.outcome == "Committed"

    @property
    def selection_fraction(self) -> float:
        return self.phases["selection"] / self.total if self.total else 0.0

    @property
    def outcome_label(self) -> str:
        return "Committed" if self.committed else f"Aborted({self.reason})"


@dataclass
class CycleState:
    phase: Phase = Phase.IDLE
    cycle: int = 0
    collected: dict[str, MeasurementSet] = field(default_factory=dict)
    tally: consensus.SelectionTally | None = None
    pending_block: Block | None = None


def _default_clock(cycle: int, now: int) -> int:
    return now


@dataclass
class ProtocolConfig:
    relays: list[str]
    period: int = DEFAULT_PERIOD
    timeout: int = DEFAULT_TIMEOUT
    challenge_range: tuple[int, int] = consensus.DEFAULT_CHALLENGE_RANGE
    k_eligible: int | None = None
    hash_mode: HashMode = HashMode.SINGLE
    share_via_da: bool = False
    tie_from_all: bool = False
    cipher: Cipher = field(default_factory=IdentityCipher)
    block_clock: Callable[[int, int], int] = _default_clock

    def __post_init__(self):
        if len(self.relays) < 2:
            raise ValueError("a topology needs at least two relays")
        if len(set(self.relays)) != len(self.relays) or {CC, DA} & set(self.relays):
            raise ValueError("relay names must be unique and distinct from CC/DA")
        if self.k_eligible is None:
            self.k_eligible = len(self.relays)
        EligibilityConfig(self.k_eligible, len(self.relays))

    @property
    def eligibility(self) -> EligibilityConfig:
        return EligibilityConfig(self.k_eligible, len(self.relays))


def relay_names(n: int) -> list[str]:
    return [f"R{i}" for i in range(1, n + 1)]


class Node:
    name: str

    def on_start(self, now: int) -> list[Action]:
        return []

    def on_message(self, msg: ProtocolMessage, now: int) -> list[Action]:
        raise NotImplementedError

    def on_timer(self, key: str, now: int) -> list[Action]:
        return []


class ControlCenter(Node):
    """Starts one acquisition cycle per period and keeps a copy of the chain."""

    def __init__(self, config: ProtocolConfig, cycles: int, start_at: int = 0):
        self.name = CC
        self.config = config
        self.cycles = cycles
        self.start_at = start_at
        self.chain = Chain.new(config.hash_mode)
        self.phase = Phase.IDLE
        self.cycle = 0
        self.last_start: int | None = None
        self.outcomes: dict[int, str] = {}
        self.tip_reported: str | None = None

    @property
    def finished(self) -> bool:
        return self.cycle >= self.cycles and self.phase is Phase.IDLE

    def on_start(self, now: int) -> list[Action]:
        if self.cycles <= 0:
            return []
        return [SetTimer("tick", max(now, self.start_at))]

    def tick(self, now: int) -> list[Action]:
        """Start the next cycle if a full period has elapsed since the last one."""
        if self.last_start is not None and now - self.last_start < self.config.period:
            return []
        actions: list[Action] = []
        if self.phase is not Phase.IDLE:
            self.outcomes.setdefault(self.cycle, "Aborted(Timeout)")
            actions.append(Note("lost", self.cycle, "no ChainUpdate before next period"))
        self.cycle += 1
        self.last_start = now
        self.phase = Phase.ACQUIRING
        actions.append(Send(DA, ProtocolMessage(MsgKind.DATA_REQUEST, CC, self.cycle, (("indices", "all"),))))
        return actions

    def on_timer(self, key: str, now: int) -> list[Action]:
        if key != "tick":
            return []
        if self.cycle >= self.cycles:
            if self.phase is not Phase.IDLE:
                self.outcomes.setdefault(self.cycle, "Aborted(Timeout)")
                self.phase = Phase.IDLE
            return []
        actions = self.tick(now)
        # one extra tick after the last cycle closes it out if no update arrives
        actions.append(SetTimer("tick", now + self.config.period))
        return actions

    def on_message(self, msg: ProtocolMessage, now: int) -> list[Action]:
        if msg.kind is not MsgKind.CHAIN_UPDATE or msg.cycle != self.cycle:
            return [Note("ignored", msg.cycle, f"{msg.kind.value} from {msg.sender}")]
        actions: list[Action] = []
        if msg["outcome"] == "committed":
            block = Block.from_json(msg["block"])
            problems = verify_new_block(self.chain.tip, block, self.config.hash_mode)
            if problems:
                self.outcomes[self.cycle] = "Aborted(BadUpdate)"
                actions.append(Note("reject", self.cycle, ",".join(k.value for k in problems)))
            else:
                self.chain = self.chain.append(block)
                self.outcomes[self.cycle] = "Committed"
            self.tip_reported = msg["tip"]
        else:
            self.outcomes[self.cycle] = f"Aborted({msg.get('reason', '')})"
        self.phase = Phase.IDLE
        if self.cycle >= self.cycles:
            actions.append(CancelTimer("tick"))
        return actions


class RelayServer(Node):
    """Field-side node: reports measurements, votes, mines and replicates the chain.

    ``faults`` injects misbehaviour for tests: ``inflate_count`` (int),
    ``foreign_digest`` (bool), ``equivocate`` (bool, peers see a different
    count than the DA), ``vote_for`` (str), ``corrupt_block`` (bool).
    """

    def __init__(
        self,
        name: str,
        config: ProtocolConfig,
        source: Callable[[int], MeasurementSet],
        faults: dict | None = None,
    ):
        self.name = name
        self.config = config
        self.source = source
        self.faults = dict(faults or {})
        self.chain = Chain.new(config.hash_mode)
        self.cycle = 0
        self._reset()

    def _reset(self) -> None:
        self.data: MeasurementSet | None = None
        self.challenge: RandomChallenge | None = None
        self.eligible: list[str] = []
        self.shares: dict[str, CountReport] = {}
        self.voted = False
        self.pending: Block | None = None

    def on_message(self, msg: ProtocolMessage, now: int) -> list[Action]:
        if msg.kind is MsgKind.DATA_REQUEST:
            return self._on_data_request(msg)
        if msg.cycle != self.cycle:
            return [Note("stale", msg.cycle, f"{msg.kind.value} from {msg.sender}")]
        handler = {
            MsgKind.CHAIN_CHECK: self._on_chain_check,
            MsgKind.CHALLENGE: self._on_challenge,
            MsgKind.COUNT_SHARE: self._on_count_share,
            MsgKind.MINING_ASSIGN: lambda m: self._on_mining_assign(m, now),
            MsgKind.VERIFY_REQUEST: self._on_verify_request,
            MsgKind.ADD_BLOCK: self._on_add_block,
        }.get(msg.kind)
        if handler is None:
            return [Note("ignored", msg.cycle, f"{msg.kind.value} from {msg.sender}")]
        return handler(msg)

    def _reply(self, kind: MsgKind, fields, direction: Direction | None = None) -> Send:
        return Send(DA, ProtocolMessage(kind, self.name, self.cycle, tuple(fields), direction))

    def _on_data_request(self, msg: ProtocolMessage) -> list[Action]:
        self.cycle = msg.cycle
        self._reset()
        self.data = self.source(msg.cycle)
        sealed = self.config.cipher.encrypt(self.data.canonical_bytes())
        return [self._reply(MsgKind.DATA_RESPONSE, [("set", _pack(sealed))])]

    def _on_chain_check(self, msg: ProtocolMessage) -> list[Action]:
        same = msg["tip"] == self.chain.tip.current_hash and int(msg["length"]) == len(self.chain)
        return [self._reply(MsgKind.CHAIN_CHECK_REPLY, [("status", "match" if same else "mismatch")])]

    def _on_challenge(self, msg: ProtocolMessage) -> list[Action]:
        self.challenge = RandomChallenge(int(msg["r"]))
        self.eligible = msg["eligible"].split(",")
        actions: list[Action] = []
        if self.name in self.eligible:
            report = consensus.make_report(self.data, self.challenge)
            if self.faults.get("foreign_digest"):
                report = CountReport(self.name, consensus.sha256_hex(b"foreign"), report.count)
            report = CountReport(
                report.node, report.digest, report.count + int(self.faults.get("inflate_count", 0))
            )
            share = ProtocolMessage(
                MsgKind.COUNT_SHARE,
                self.name,
                self.cycle,
                (("digest", report.digest), ("count", str(report.count))),
            )
            actions.append(Send(DA, share))
            if not self.config.share_via_da:
                peer_count = report.count + (1 if self.faults.get("equivocate") else 0)
                peer_share = ProtocolMessage(
                    MsgKind.COUNT_SHARE,
                    self.name,
                    self.cycle,
                    (("digest", report.digest), ("count", str(peer_count))),
                )
                actions.extend(
                    Send(peer, peer_share) for peer in self.config.relays if peer != self.name
                )
            self.shares[self.name] = report
        return actions + self._maybe_vote()

    def _on_count_share(self, msg: ProtocolMessage) -> list[Action]:
        origin = msg.get("origin", msg.sender)
        # a share may overtake the challenge on another link, so keep it regardless
        if origin not in self.shares:
            self.shares[origin] = CountReport(origin, msg["digest"], int(msg["count"]))
        return self._maybe_vote()

    def _maybe_vote(self) -> list[Action]:
        if self.voted or self.challenge is None:
            return []
        if any(n not in self.shares for n in self.eligible):
            return []
        self.voted = True
        tally = consensus.build_tally(
            [self.shares[n] for n in self.eligible], tie_from_all=self.config.tie_from_all
        )
        choice = self.faults.get("vote_for") or tally.decision.label()
        return [self._reply(MsgKind.VOTE, [("choice", choice)])]

    def _on_mining_assign(self, msg: ProtocolMessage, now: int) -> list[Action]:
        payload = decode_payload(self.config.cipher.decrypt(_unpack(msg["payload"])))
        stamp = max(self.config.block_clock(self.cycle, now), self.chain.tip.header.timestamp)
        block = create_block(self.chain.tip, payload, stamp, self.config.hash_mode)
        if self.faults.get("corrupt_block"):
            block = _flip_first_value(block)
        self.pending = block
        return [self._reply(MsgKind.NEW_BLOCK, [("block", block.to_json())])]

    def _on_verify_request(self, msg: ProtocolMessage) -> list[Action]:
        block = Block.from_json(msg["block"])
        problems = verify_new_block(self.chain.tip, block, self.config.hash_mode)
        if problems:
            fields = [("status", "fail"), ("kind", ",".join(k.value for k in problems))]
        else:
            self.pending = block
            fields = [("status", "ok")]
        return [self._reply(MsgKind.VERIFY_REPLY, fields)]

    def _on_add_block(self, msg: ProtocolMessage) -> list[Action]:
        if self.pending is not None and self.pending.current_hash == msg["hash"]:
            self.chain = self.chain.append(self.pending)
            self.pending = None
            fields = [("status", "added"), ("tip", self.chain.tip.current_hash)]
        else:
            fields = [("status", "missing")]
        return [self._reply(MsgKind.ADD_BLOCK, fields, Direction.RESPONSE)]


def _flip_first_value(block: Block) -> Block:
    first = block.payload[0]
    rec = first.records[0]
    bad = replace(first, records=(replace(rec, value=rec.value + 1.0),) + first.records[1:])
    return replace(block, payload=(bad,) + block.payload[1:])


class DataAggregator(Node):
    """Coordinates a cycle: acquisition, chain check, selection, mining, verification, addition."""

    def __init__(self, config: ProtocolConfig, rng: random.Random | None = None):
        self.name = DA
        self.config = config
        self.rng = rng if rng is not None else random.Random(0)
        self.chain = Chain.new(config.hash_mode)
        self.state = CycleState()
        self.metrics: list[CycleMetrics] = []
        self.transitions: list[tuple[int, Phase, Phase]] = []
        self._reset_cycle()

    @property
    def phase(self) -> Phase:
        return self.state.phase

    def _reset_cycle(self) -> None:
        self.phase_times: list[tuple[Phase, int]] = []
        self.replies: dict[str, str] = {}
        self.eligible: list[str] = []
        self.challenge: RandomChallenge | None = None
        self.reports: dict[str, CountReport] = {}
        self.votes: dict[str, str] = {}
        self.miner: str | None = None
        self.expected_payload: tuple[MeasurementSet, ...] = ()

    # --- phase bookkeeping -------------------------------------------------

    def _enter(self, phase: Phase, now: int) -> list[Action]:
        old = self.state.phase
        if not can_transition(old, phase):
            raise RuntimeError(f"illegal phase transition {old.value} -> {phase.value}")
        self.state.phase = phase
        self.transitions.append((self.state.cycle, old, phase))
        self.phase_times.append((phase, now))
        actions: list[Action] = [Note("phase", self.state.cycle, f"{old.value}->{phase.value}")]
        if phase in TERMINAL:
            actions.append(CancelTimer("await"))
        else:
            actions.append(SetTimer("await", now + self.config.timeout))
        return actions

    def _close_metrics(self, now: int, outcome: str, reason: str = "", detail: str = "",
                       flagged: tuple[str, ...] = ()) -> CycleMetrics:
        m = CycleMetrics(self.state.cycle, outcome=outcome, reason=reason, detail=detail,
                         miner=self.miner or "", flagged=flagged)
        times = self.phase_times
        for (phase, start), nxt in zip(times, times[1:] + [(None, now)]):
            for name, p in METRIC_PHASES.items():
                if p is phase:
                    m.phases[name] += nxt[1] - start
        m.total = now - times[0][1] if times else 0
        self.metrics.append(m)
        return m

    def _abort(self, now: int, reason: str, detail: str = "",
               flagged: tuple[str, ...] = ()) -> list[Action]:
        actions = self._enter(Phase.ABORTED, now)
        self._close_metrics(now, "Aborted", reason, detail, flagged)
        log.info("cycle %d aborted: %s %s", self.state.cycle, reason, detail)
        self.state.pending_block = None
        actions.append(Note("abort", self.state.cycle, f"{reason} {detail}".strip()))
        actions.append(Send(CC, self._msg(MsgKind.CHAIN_UPDATE, [
            ("outcome", "aborted"), ("reason", reason), ("detail", detail),
            ("flagged", ",".join(flagged)),
        ])))
        return actions

    def _msg(self, kind: MsgKind, fields, direction: Direction | None = None) -> ProtocolMessage:
        return ProtocolMessage(kind, DA, self.state.cycle, tuple(fields), direction)

    def _broadcast(self, kind: MsgKind, fields, targets=None) -> list[Action]:
        msg = self._msg(kind, fields)
        return [Send(r, msg) for r in (targets if targets is not None else self.config.relays)]

    # --- event entry points ------------------------------------------------

    def on_timer(self, key: str, now: int) -> list[Action]:
        if key != "await" or self.state.phase in TERMINAL:
            return []
        missing = self._missing()
        return self._abort(now, "Timeout", f"{self._missing_label()}:{','.join(missing)}",
                           tuple(missing))

    def _missing(self) -> list[str]:
        phase = self.state.phase
        relays = self.config.relays
        if phase is Phase.ACQUIRING:
            return [r for r in relays if r not in self.state.collected]
        if phase in (Phase.CHAIN_CHECKING, Phase.VERIFYING, Phase.ADDING):
            expected = self._verifiers() if phase is Phase.VERIFYING else relays
            return [r for r in expected if r not in self.replies]
        if phase is Phase.SELECTING:
            return [r for r in relays if r not in self.votes or
                    (r in self.eligible and r not in self.reports)]
        if phase is Phase.MINING:
            return [self.miner] if self.miner else []
        return []

    def _missing_label(self) -> str:
        return "MissingRelay" if self.state.phase is Phase.ACQUIRING else "Silent"

    def on_message(self, msg: ProtocolMessage, now: int) -> list[Action]:
        if msg.kind is MsgKind.DATA_REQUEST:
            return self.start_cycle(msg.cycle, now)
        if msg.cycle != self.state.cycle or self.state.phase in TERMINAL:
            return [Note("stale", msg.cycle, f"{msg.kind.value} from {msg.sender}")]
        try:
            handler = {
                MsgKind.DATA_RESPONSE: self._on_data_response,
                MsgKind.CHAIN_CHECK_REPLY: self._on_chain_reply,
                MsgKind.COUNT_SHARE: self._on_count_share,
                MsgKind.VOTE: self._on_vote,
                MsgKind.NEW_BLOCK: self._on_new_block,
                MsgKind.VERIFY_REPLY: self._on_verify_reply,
                MsgKind.ADD_BLOCK: self._on_add_ack,
            }.get(msg.kind)
            if handler is None:
                return [Note("ignored", msg.cycle, f"{msg.kind.value} from {msg.sender}")]
            return handler(msg, now)
        except ProtocolError as exc:
            flagged = (exc.node,) if exc.node else ()
            return self._abort(now, exc.reason, str(exc), flagged)

    # --- acquisition -------------------------------------------------------

    def start_cycle(self, cycle: int, now: int) -> list[Action]:
        actions: list[Action] = []
        if self.state.phase not in TERMINAL:
            actions += self._abort(now, "Superseded", f"cycle {cycle} requested")
        self.state = CycleState(phase=self.state.phase, cycle=cycle)
        self._reset_cycle()
        actions += self._enter(Phase.ACQUIRING, now)
        actions += self._broadcast(MsgKind.DATA_REQUEST, [("indices", "all")])
        return actions

    def collect(self, relay: str, data: MeasurementSet) -> None:
        if relay not in self.config.relays:
            raise UnknownRelay(f"response from unknown relay {relay}", relay)
        if relay in self.state.collected:
            raise DuplicateResponse(f"second response from {relay}", relay)
        if data.node != relay or data.cycle != self.state.cycle:
            raise MessageFormatError(f"{relay} sent data labelled {data.node}:{data.cycle}", relay)
        self.state.collected[relay] = data

    def _on_data_response(self, msg: ProtocolMessage, now: int) -> list[Action]:
        if self.state.phase is not Phase.ACQUIRING:
            raise DuplicateResponse(f"late response from {msg.sender}", msg.sender)
        try:
            data = MeasurementSet.parse(
                self.config.cipher.decrypt(_unpack(msg["set"])).decode("utf-8")
            )
        except (ValueError, UnicodeDecodeError) as exc:
            raise MessageFormatError(f"unreadable data from {msg.sender}: {exc}", msg.sender) from exc
        self.collect(msg.sender, data)
        if len(self.state.collected) < len(self.config.relays):
            return []
        return self._start_chain_check(now)

    # --- chain check -------------------------------------------------------

    def _start_chain_check(self, now: int) -> list[Action]:
        actions = self._enter(Phase.CHAIN_CHECKING, now)
        self.replies = {}
        tip = self.chain.tip.current_hash
        return actions + self._broadcast(MsgKind.CHAIN_CHECK, [("tip", tip), ("length", str(len(self.chain)))])

    def _on_chain_reply(self, msg: ProtocolMessage, now: int) -> list[Action]:
        if self.state.phase is not Phase.CHAIN_CHECKING or msg.sender in self.replies:
            raise DuplicateResponse(f"unexpected chain reply from {msg.sender}", msg.sender)
        self.replies[msg.sender] = msg["status"]
        if msg["status"] != "match":
            raise ChainMismatch(f"{msg.sender} holds a different chain", msg.sender)
        if len(self.replies) < len(self.config.relays):
            return []
        return self._start_selection(now)

    # --- selection ---------------------------------------------------------

    def _start_selection(self, now: int) -> list[Action]:
        actions = self._enter(Phase.SELECTING, now)
        self.eligible = consensus.choose_eligible(self.config.eligibility, self.config.relays, self.rng)
        lo, hi = self.config.challenge_range
        self.challenge = consensus.generate_challenge(self.rng, lo, hi)
        return actions + self._broadcast(MsgKind.CHALLENGE, [
            ("r", self.challenge.rendered), ("eligible", ",".join(self.eligible)),
        ])

    def _on_count_share(self, msg: ProtocolMessage, now: int) -> list[Action]:
        node = msg.sender
        if node not in self.eligible or node in self.reports:
            raise CountMismatch(f"unexpected count share from {node}", node)
        report = CountReport(node, msg["digest"], int(msg["count"]))
        if not consensus.verify_report(report, self.state.collected[node], self.challenge):
            raise CountMismatch(f"{node} reported count {report.count} that does not recompute", node)
        self.reports[node] = report
        actions: list[Action] = []
        if self.config.share_via_da:
            fwd = self._msg(MsgKind.COUNT_SHARE, [
                ("origin", node), ("digest", report.digest), ("count", str(report.count)),
            ], Direction.REQUEST)
            actions += [Send(r, fwd) for r in self.config.relays if r != node]
        return actions + self._maybe_resolve(now)

    def _on_vote(self, msg: ProtocolMessage, now: int) -> list[Action]:
        if msg.sender not in self.config.relays or msg.sender in self.votes:
            raise VoteDisagreement(f"unexpected vote from {msg.sender}", msg.sender)
        self.votes[msg.sender] = msg["choice"]
        return self._maybe_resolve(now)

    def _maybe_resolve(self, now: int) -> list[Action]:
        if len(self.reports) < len(self.eligible) or len(self.votes) < len(self.config.relays):
            return []
        # the DA's own tally comes from counts it recomputed itself
        own = {n: consensus.count_occurrences(consensus.measurement_digest(self.state.collected[n]),
                                              self.challenge) for n in self.eligible}
        tally = consensus.build_tally(own, tie_from_all=self.config.tie_from_all)
        self.state.tally = tally
        label = tally.decision.label()
        for relay in self.config.relays:
            if self.votes[relay] != label:
                raise VoteDisagreement(f"{relay} voted {self.votes[relay]!r}, expected {label!r}", relay)
        self.miner = consensus.resolve(tally, self.rng)
        return self.assign_mining(self.miner, now)

    # --- mining ------------------------------------------------------------

    def assign_mining(self, miner: str, now: int) -> list[Action]:
        actions = self._enter(Phase.MINING, now)
        self.miner = miner
        self.expected_payload = aggregate(self.state.collected)
        sealed = self.config.cipher.encrypt(encode_payload(self.expected_payload))
        msg = self._msg(MsgKind.MINING_ASSIGN, [("miner", miner), ("payload", _pack(sealed))])
        return actions + [Send(miner, msg)]

    # --- verification ------------------------------------------------------

    def _verifiers(self) -> list[str]:
        return [r for r in self.config.relays if r != self.miner]

    def _on_new_block(self, msg: ProtocolMessage, now: int) -> list[Action]:
        if self.state.phase is not Phase.MINING or msg.sender != self.miner:
            raise VerificationFailed(f"unsolicited block from {msg.sender}", msg.sender)
        try:
            block = Block.from_json(msg["block"])
        except ValueError as exc:
            raise VerificationFailed(f"unreadable block: {exc}", msg.sender) from exc
        self.state.pending_block = block
        actions = self._enter(Phase.VERIFYING, now)
        self.replies = {}
        return actions + self._broadcast(
            MsgKind.VERIFY_REQUEST, [("block", msg["block"]), ("miner", self.miner)], self._verifiers()
        )

    def own_verification(self, block: Block) -> list[str]:
        kinds = [k.value for k in verify_new_block(self.chain.tip, block, self.config.hash_mode)]
        if block.payload != self.expected_payload:
            kinds.append("BadPayload")
        return kinds

    def _on_verify_reply(self, msg: ProtocolMessage, now: int) -> list[Action]:
        if self.state.phase is not Phase.VERIFYING or msg.sender not in self._verifiers() \
                or msg.sender in self.replies:
            raise DuplicateResponse(f"unexpected verify reply from {msg.sender}", msg.sender)
        self.replies[msg.sender] = msg["status"]
        if msg["status"] != "ok":
            raise VerificationFailed(f"{msg.sender}: {msg.get('kind', '')}", msg.sender)
        if len(self.replies) < len(self._verifiers()):
            return []
        problems = self.own_verification(self.state.pending_block)
        if problems:
            raise VerificationFailed(f"DA: {','.join(problems)}", DA)
        actions = self._enter(Phase.ADDING, now)
        self.replies = {}
        return actions + self._broadcast(MsgKind.ADD_BLOCK, [("hash", self.state.pending_block.current_hash)])

    # --- addition ----------------------------------------------------------

    def _on_add_ack(self, msg: ProtocolMessage, now: int) -> list[Action]:
        if self.state.phase is not Phase.ADDING or msg.sender in self.replies:
            raise DuplicateResponse(f"unexpected add ack from {msg.sender}", msg.sender)
        self.replies[msg.sender] = msg["status"]
        if msg["status"] != "added":
            raise VerificationFailed(f"{msg.sender} could not add the block", msg.sender)
        if len(self.replies) < len(self.config.relays):
            return []
        return self.finish_cycle(now)

    def finish_cycle(self, now: int) -> list[Action]:
        block = self.state.pending_block
        self.chain = self.chain.append(block)
        self.state.pending_block = None
        actions = self._enter(Phase.DONE, now)
        self._close_metrics(now, "Committed")
        update = self._msg(MsgKind.CHAIN_UPDATE, [
            ("outcome", "committed"), ("tip", block.current_hash),
            ("length", str(len(self.chain))), ("block", block.to_json()),
        ])
        return actions + [Send(CC, update)]


def build_topology(
    config: ProtocolConfig,
    sources: dict[str, Callable[[int], MeasurementSet]],
    cycles: int,
    rng: random.Random | None = None,
    faults: dict[str, dict] | None = None,
) -> dict[str, Node]:
    faults = faults or {}
    nodes: dict[str, Node] = {
        CC: ControlCenter(config, cycles),
        DA: DataAggregator(config, rng),
    }
    for name in config.relays:
        nodes[name] = RelayServer(name, config, sources[name], faults.get(name))
    return nodes
