"""IEEE 9-bus measurement source.

The builtin table holds the converged AC power-flow solution of the standard
WSCC 9-bus case: voltage magnitude (pu), voltage angle (deg) and net real and
reactive injections (MW, MVAr) per bus. Each cycle adds seeded uniform jitter
so measurement hashes change from cycle to cycle.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .ledger import MeasurementRecord, MeasurementSet, Quantity

BUSES = tuple(range(1, 10))
COLUMNS = ["bus", "quantity", "index", "base", "jitter"]


class DatasetError(ValueError):
    pass


class MissingBus(DatasetError):
    def __init__(self, bus: int):
        super().__init__(f"dataset has no rows for bus {bus}")
        self.bus = bus


class BadQuantity(DatasetError):
    pass


class ParseError(DatasetError):
    pass


@dataclass(frozen=True)
class BusRow:
    bus: int
    quantity: Quantity
    index: int
    base: float
    jitter: float


@dataclass(frozen=True)
class BusDataset:
    rows: tuple[BusRow, ...]

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def base(self) -> np.ndarray:
        return np.array([r.base for r in self.rows])

    @property
    def jitter(self) -> np.ndarray:
        return np.array([r.jitter for r in self.rows])


def _parse(text: str) -> BusDataset:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != COLUMNS:
        raise ParseError(f"expected header {','.join(COLUMNS)}, got {reader.fieldnames}")
    rows = []
    for line_no, raw in enumerate(reader, start=2):
        try:
            quantity = Quantity(raw["quantity"].strip())
        except ValueError:
            raise BadQuantity(f"line {line_no}: unknown quantity {raw['quantity']!r}") from None
        try:
            row = BusRow(int(raw["bus"]), quantity, int(raw["index"]),
                         float(raw["base"]), float(raw["jitter"]))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"line {line_no}: {exc}") from exc
        if row.jitter < 0:
            raise ParseError(f"line {line_no}: negative jitter")
        rows.append(row)
    present = {r.bus for r in rows}
    for bus in BUSES:
        if bus not in present:
            raise MissingBus(bus)
    for bus in BUSES:
        have = {r.quantity for r in rows if r.bus == bus}
        if have != set(Quantity):
            missing = sorted(q.value for q in set(Quantity) - have)
            raise BadQuantity(f"bus {bus} lacks {','.join(missing)}")
    rows.sort(key=lambda r: (r.bus, r.quantity.rank, r.index))
    return BusDataset(tuple(rows))


def load_dataset(path: str | Path | None = None) -> BusDataset:
    """Load a ``bus,quantity,index,base,jitter`` CSV; ``None`` gives the builtin table."""
    if path is None or path == "builtin":
        text = resources.files("porch").joinpath("data/ieee9.csv").read_text(encoding="utf-8")
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise ParseError(f"cannot read dataset {path}: {exc}") from exc
    return _parse(text)


def default_partition(relays: list[str]) -> dict[str, tuple[int, ...]]:
    """Contiguous bus ranges, remainder to the last relays; round-robin past nine relays.

    Four relays give R1:{1,2}, R2:{3,4}, R3:{5,6}, R4:{7,8,9}.
    """
    n = len(relays)
    if n > len(BUSES):
        return {name: (BUSES[i % len(BUSES)],) for i, name in enumerate(relays)}
    size, extra = divmod(len(BUSES), n)
    out, start = {}, 0
    for i, name in enumerate(relays):
        width = size + (1 if i >= n - extra else 0)
        out[name] = BUSES[start : start + width]
        start += width
    return out


def sample_values(ds: BusDataset, cycle: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, cycle])
    return ds.base + rng.uniform(-1.0, 1.0, size=len(ds)) * ds.jitter


def sample_cycle(
    ds: BusDataset,
    cycle: int,
    seed: int,
    relays: list[str] | None = None,
    partition: dict[str, tuple[int, ...]] | None = None,
) -> dict[str, MeasurementSet]:
    relays = relays or ["R1", "R2", "R3", "R4"]
    partition = partition or default_partition(relays)
    values = sample_values(ds, cycle, seed)
    out = {}
    for name in relays:
        buses = set(partition[name])
        records = tuple(
            MeasurementRecord(r.bus, r.quantity, r.index, float(v))
            for r, v in zip(ds.rows, values)
            if r.bus in buses
        )
        out[name] = MeasurementSet(name, cycle, records)
    return out


def make_sources(ds: BusDataset, relays: list[str], seed: int,
                 partition: dict[str, tuple[int, ...]] | None = None):
    """Per-relay ``cycle -> MeasurementSet`` callables sharing one draw per cycle."""
    cache: dict[int, dict[str, MeasurementSet]] = {}

    def for_relay(name: str):
        def source(cycle: int) -> MeasurementSet:
            if cycle not in cache:
                cache.clear()
                cache[cycle] = sample_cycle(ds, cycle, seed, relays, partition)
            return cache[cycle][name]
        return source

    return {name: for_relay(name) for name in relays}
