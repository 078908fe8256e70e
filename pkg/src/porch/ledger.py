"""Blocks, hashing, Merkle roots and chain validation.

Canonical byte forms (every replica must hash identical bytes):

* record: ``bus,quantity,index,value`` with ``value`` at 6 decimals
* measurement set: ``node:cycle|`` followed by its records joined with ``;``
* block header: ``index|timestamp|previous_hash|merkle_root|nonce``
"""

from __future__ import annotations

import enum
import functools
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

VALUE_DECIMALS = 6
ZERO_HASH = "0" * 64
GENESIS_ROOT_TEXT = "GENESIS"


class LedgerError(ValueError):
    pass


class EmptyLeaves(LedgerError):
    pass


class EmptyPayload(LedgerError):
    pass


class TimestampRegression(LedgerError):
    pass


class Quantity(enum.Enum):
    # declaration order is the canonical sort order
    Vm = "Vm"
    Vp = "Vp"
    P = "P"
    Q = "Q"

    @property
    def rank(self) -> int:
        return _QUANTITY_RANK[self]


_QUANTITY_RANK = {q: i for i, q in enumerate(Quantity)}


class HashMode(enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"


def _quantize(value: float) -> float:
    value = round(float(value), VALUE_DECIMALS)
    return 0.0 if value == 0 else value


@dataclass(frozen=True)
class MeasurementRecord:
    bus: int
    quantity: Quantity
    index: int
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", _quantize(self.value))
        if not isinstance(self.quantity, Quantity):
            object.__setattr__(self, "quantity", Quantity(self.quantity))

    @property
    def sort_key(self) -> tuple[int, int, int]:
        return (self.bus, self.quantity.rank, self.index)

    def canonical(self) -> str:
        return f"{self.bus},{self.quantity.value},{self.index},{self.value:.{VALUE_DECIMALS}f}"

    @classmethod
    def parse(cls, text: str) -> "MeasurementRecord":
        try:
            bus, quantity, index, value = text.split(",")
            return cls(int(bus), Quantity(quantity), int(index), float(value))
        except ValueError as exc:
            raise LedgerError(f"bad measurement record {text!r}") from exc


@dataclass(frozen=True)
class MeasurementSet:
    node: str
    cycle: int
    records: tuple[MeasurementRecord, ...]

    def __post_init__(self):
        records = tuple(sorted(self.records, key=lambda r: r.sort_key))
        keys = [r.sort_key for r in records]
        if len(set(keys)) != len(keys):
            raise LedgerError(f"duplicate (bus, quantity, index) in set from {self.node}")
        object.__setattr__(self, "records", records)

    def canonical(self) -> str:
        return self._canonical

    @functools.cached_property
    def _canonical(self) -> str:
        body = ";".join(r.canonical() for r in self.records)
        return f"{self.node}:{self.cycle}|{body}"

    def canonical_bytes(self) -> bytes:
        return self._canonical.encode("utf-8")

    @classmethod
    def parse(cls, text: str) -> "MeasurementSet":
        return _parse_set(text)

    @classmethod
    def _parse(cls, text: str) -> "MeasurementSet":
        try:
            head, body = text.split("|", 1)
            node, cycle = head.rsplit(":", 1)
            cycle = int(cycle)
        except ValueError as exc:
            raise LedgerError(f"bad measurement set header in {text[:40]!r}") from exc
        records = [MeasurementRecord.parse(r) for r in body.split(";")] if body else []
        return cls(node, cycle, tuple(records))


# every replica parses the same payload text several times per cycle
@functools.lru_cache(maxsize=512)
def _parse_set(text: str) -> MeasurementSet:
    return MeasurementSet._parse(text)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def double_sha256_hex(data: bytes) -> str:
    return hashlib.sha256(hashlib.sha256(data).digest()).hexdigest()


def merkle_root(leaves: list[bytes]) -> str:
    """Root over SHA-256 leaf hashes; parents hash the concatenated hex strings.

    An odd node at any level is paired with itself.
    """
    if not leaves:
        raise EmptyLeaves("merkle_root needs at least one leaf")
    level = [sha256_hex(leaf) for leaf in leaves]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [
            sha256_hex((level[i] + level[i + 1]).encode("ascii"))
            for i in range(0, len(level), 2)
        ]
    return level[0]


@dataclass(frozen=True)
class BlockHeader:
    index: int
    timestamp: int
    previous_hash: str
    merkle_root: str
    nonce: int = 0

    def canonical(self) -> bytes:
        return (
            f"{self.index}|{self.timestamp}|{self.previous_hash}|"
            f"{self.merkle_root}|{self.nonce}"
        ).encode("utf-8")


def block_hash(header: BlockHeader, mode: HashMode = HashMode.SINGLE) -> str:
    data = header.canonical()
    if mode is HashMode.DOUBLE:
        return double_sha256_hex(data)
    return sha256_hex(data)


def payload_root(payload: tuple[MeasurementSet, ...]) -> str:
    if not payload:
        return sha256_hex(GENESIS_ROOT_TEXT.encode("utf-8"))
    return merkle_root([s.canonical_bytes() for s in payload])


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    payload: tuple[MeasurementSet, ...]
    current_hash: str

    @property
    def index(self) -> int:
        return self.header.index

    def to_dict(self) -> dict:
        h = self.header
        return {
            "index": h.index,
            "timestamp": h.timestamp,
            "previous_hash": h.previous_hash,
            "merkle_root": h.merkle_root,
            "nonce": h.nonce,
            "current_hash": self.current_hash,
            "payload": [s.canonical() for s in self.payload],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Block":
        try:
            header = BlockHeader(
                int(d["index"]),
                int(d["timestamp"]),
                str(d["previous_hash"]),
                str(d["merkle_root"]),
                int(d["nonce"]),
            )
            payload = tuple(MeasurementSet.parse(s) for s in d["payload"])
            return cls(header, payload, str(d["current_hash"]))
        except (KeyError, TypeError) as exc:
            raise LedgerError(f"malformed block: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Block":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise LedgerError(f"block is not valid JSON: {exc}") from exc


def genesis_block(mode: HashMode = HashMode.SINGLE) -> Block:
    header = BlockHeader(0, 0, ZERO_HASH, payload_root(()), 0)
    return Block(header, (), block_hash(header, mode))


def create_block(
    parent: Block,
    payload: list[MeasurementSet] | tuple[MeasurementSet, ...],
    timestamp: int,
    mode: HashMode = HashMode.SINGLE,
) -> Block:
    payload = tuple(payload)
    if not payload:
        raise EmptyPayload("a block needs at least one measurement set")
    if timestamp < parent.header.timestamp:
        raise TimestampRegression(
            f"timestamp {timestamp} precedes parent timestamp {parent.header.timestamp}"
        )
    header = BlockHeader(
        index=parent.header.index + 1,
        timestamp=int(timestamp),
        previous_hash=parent.current_hash,
        merkle_root=payload_root(payload),
        nonce=0,
    )
    return Block(header, payload, block_hash(header, mode))


class ViolationKind(str, enum.Enum):
    BAD_LINK = "BadLink"
    BAD_INDEX = "BadIndex"
    BAD_ROOT = "BadRoot"
    BAD_HASH = "BadHash"
    BAD_TIMESTAMP = "BadTimestamp"


@dataclass(frozen=True)
class Violation:
    index: int
    kind: ViolationKind

    def __str__(self) -> str:
        return f"{self.kind.value}@{self.index}"


def check_block(block: Block, mode: HashMode) -> list[ViolationKind]:
    """Integrity of a block on its own: Merkle root and header hash."""
    kinds = []
    if block.header.merkle_root != payload_root(block.payload):
        kinds.append(ViolationKind.BAD_ROOT)
    if block.current_hash != block_hash(block.header, mode):
        kinds.append(ViolationKind.BAD_HASH)
    return kinds


def check_link(parent: Block, block: Block) -> list[ViolationKind]:
    kinds = []
    if block.header.previous_hash != parent.current_hash:
        kinds.append(ViolationKind.BAD_LINK)
    if block.header.index != parent.header.index + 1:
        kinds.append(ViolationKind.BAD_INDEX)
    if block.header.timestamp < parent.header.timestamp:
        kinds.append(ViolationKind.BAD_TIMESTAMP)
    return kinds


def verify_new_block(tip: Block, block: Block, mode: HashMode) -> list[ViolationKind]:
    """Everything a replica checks before accepting ``block`` on top of ``tip``."""
    kinds = check_link(tip, block) + check_block(block, mode)
    if not block.payload:
        kinds.append(ViolationKind.BAD_ROOT)
    return kinds


@dataclass(frozen=True)
class Chain:
    blocks: tuple[Block, ...] = field(default_factory=tuple)
    hash_mode: HashMode = HashMode.SINGLE

    @classmethod
    def new(cls, mode: HashMode = HashMode.SINGLE) -> "Chain":
        return cls((genesis_block(mode),), mode)

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    def __len__(self) -> int:
        return len(self.blocks)

    def append(self, block: Block) -> "Chain":
        return replace(self, blocks=self.blocks + (block,))

    def to_dict(self) -> dict:
        return {
            "hash_mode": self.hash_mode.value,
            "blocks": [b.to_dict() for b in self.blocks],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "Chain":
        try:
            mode = HashMode(d["hash_mode"])
            blocks = tuple(Block.from_dict(b) for b in d["blocks"])
        except (KeyError, TypeError, ValueError) as exc:
            raise LedgerError(f"malformed chain document: {exc}") from exc
        return cls(blocks, mode)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Chain":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def validate_chain(chain: Chain) -> list[Violation]:
    """Re-derive roots, hashes and links; an empty list means the chain is valid."""
    violations: list[Violation] = []
    if not chain.blocks:
        return [Violation(0, ViolationKind.BAD_INDEX)]
    mode = chain.hash_mode
    first = chain.blocks[0]
    expected = genesis_block(mode)
    if first.header.index != 0:
        violations.append(Violation(0, ViolationKind.BAD_INDEX))
    if first.header.previous_hash != ZERO_HASH:
        violations.append(Violation(0, ViolationKind.BAD_LINK))
    if first.payload or first.header.merkle_root != expected.header.merkle_root:
        violations.append(Violation(0, ViolationKind.BAD_ROOT))
    if first.current_hash != block_hash(first.header, mode):
        violations.append(Violation(0, ViolationKind.BAD_HASH))

    for i in range(1, len(chain.blocks)):
        parent, block = chain.blocks[i - 1], chain.blocks[i]
        kinds = check_link(parent, block) + check_block(block, mode)
        if not block.payload and ViolationKind.BAD_ROOT not in kinds:
            kinds.append(ViolationKind.BAD_ROOT)
        violations.extend(Violation(i, k) for k in kinds)
    return violations
