"""Permissioned-ledger data acquisition with random-count-in-hashes mining selection."""

from .consensus import (
    CountReport,
    EligibilityConfig,
    RandomChallenge,
    SelectionTally,
    build_tally,
    choose_eligible,
    count_occurrences,
    generate_challenge,
    resolve,
    verify_report,
)
from .dnp3m import Direction, Frame, Message, decode_frame, encode_frame, fragment, reassemble
from .ledger import (
    Block,
    BlockHeader,
    Chain,
    HashMode,
    MeasurementRecord,
    MeasurementSet,
    Quantity,
    block_hash,
    create_block,
    double_sha256_hex,
    merkle_root,
    sha256_hex,
    validate_chain,
)

__version__ = "0.1.0"

__all__ = [
    "Block",
    "block_hash",
    "BlockHeader",
    "build_tally",
    "Chain",
    "choose_eligible",
    "count_occurrences",
    "CountReport",
    "create_block",
    "decode_frame",
    "Direction",
    "double_sha256_hex",
    "EligibilityConfig",
    "encode_frame",
    "fragment",
    "Frame",
    "generate_challenge",
    "HashMode",
    "MeasurementRecord",
    "MeasurementSet",
    "merkle_root",
    "Message",
    "Quantity",
    "RandomChallenge",
    "reassemble",
    "resolve",
    "SelectionTally",
    "sha256_hex",
    "validate_chain",
    "verify_report",
]
