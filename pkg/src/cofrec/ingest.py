"""Event logs: parsing, core filtering, time splits, history truncation, binarization.

An :class:`EventLog` keeps events as parallel integer arrays indexing into
sorted user/item vocabularies, so the canonical event order (timestamp, user
id, item id) is a single ``lexsort``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np
from scipy import sparse

DEFAULT_COLUMNS = ("user", "item", "timestamp")
REQUIRED_COLUMNS = frozenset(DEFAULT_COLUMNS)


class IngestError(ValueError):
    """Base class for ingest failures."""


class ParseError(IngestError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyLogError(IngestError):
    pass


class ConfigurationError(IngestError):
    pass


@dataclass(frozen=True)
class Event:
    user: str
    item: str
    timestamp: int


@dataclass(frozen=True, eq=False)
class EventLog:
    """Time-ordered consumption events.

    ``user_codes[k]`` and ``item_codes[k]`` index into ``users`` / ``items``.
    Vocabularies are sorted, so code order equals id order and ties in
    timestamp break lexically by (user, item).
    """

    users: tuple[str, ...]
    items: tuple[str, ...]
    user_codes: np.ndarray
    item_codes: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        for name in ("user_codes", "item_codes", "timestamps"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_events(cls, events: Iterable[Event | tuple], users=None, items=None) -> "EventLog":
        """Build a sorted, deduplicated log. Optional vocabularies must cover the events."""
        triples = {(str(e[0]), str(e[1]), int(e[2])) if isinstance(e, tuple)
                   else (e.user, e.item, int(e.timestamp)) for e in events}
        if users is None:
            users = sorted({t[0] for t in triples})
        if items is None:
            items = sorted({t[1] for t in triples})
        users, items = tuple(users), tuple(items)
        uidx = {u: k for k, u in enumerate(users)}
        iidx = {i: k for k, i in enumerate(items)}
        n = len(triples)
        uc = np.empty(n, dtype=np.int64)
        ic = np.empty(n, dtype=np.int64)
        ts = np.empty(n, dtype=np.int64)
        for k, (u, i, t) in enumerate(triples):
            uc[k], ic[k], ts[k] = uidx[u], iidx[i], t
        return cls._sorted(users, items, uc, ic, ts)

    @classmethod
    def _sorted(cls, users, items, uc, ic, ts) -> "EventLog":
        order = np.lexsort((ic, uc, ts))
        return cls(users, items, uc[order], ic[order], ts[order])

    def __len__(self) -> int:
        return len(self.timestamps)

    def __iter__(self):
        for u, i, t in zip(self.user_codes, self.item_codes, self.timestamps):
            yield Event(self.users[u], self.items[i], int(t))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventLog):
            return NotImplemented
        return (self.users == other.users and self.items == other.items
                and np.array_equal(self.user_codes, other.user_codes)
                and np.array_equal(self.item_codes, other.item_codes)
                and np.array_equal(self.timestamps, other.timestamps))

    @property
    def events(self) -> list[Event]:
        return list(self)

    def subset(self, mask_or_index) -> "EventLog":
        """Select events (order preserved, vocabularies unchanged)."""
        return EventLog(self.users, self.items, self.user_codes[mask_or_index],
                        self.item_codes[mask_or_index], self.timestamps[mask_or_index])

    def active_users(self) -> tuple[str, ...]:
        return tuple(self.users[k] for k in np.unique(self.user_codes))

    def active_items(self) -> tuple[str, ...]:
        return tuple(self.items[k] for k in np.unique(self.item_codes))

    def compact(self) -> "EventLog":
        """Drop vocabulary entries that have no events."""
        ucodes, uc = np.unique(self.user_codes, return_inverse=True)
        icodes, ic = np.unique(self.item_codes, return_inverse=True)
        users = tuple(self.users[k] for k in ucodes)
        items = tuple(self.items[k] for k in icodes)
        return EventLog(users, items, uc.reshape(-1), ic.reshape(-1), self.timestamps)

    def with_vocab(self, users: Sequence[str], items: Sequence[str]) -> "EventLog":
        """Re-express the log over a superset vocabulary (both must be sorted)."""
        users, items = tuple(users), tuple(items)
        umap = _lookup(self.users, users)
        imap = _lookup(self.items, items)
        return EventLog._sorted(users, items, umap[self.user_codes], imap[self.item_codes], self.timestamps)

    def per_user_items(self) -> dict[str, set[str]]:
        out: dict[str, set[str]] = {}
        for u, i in zip(self.user_codes, self.item_codes):
            out.setdefault(self.users[u], set()).add(self.items[i])
        return out


def _lookup(keys: Sequence[str], vocab: Sequence[str]) -> np.ndarray:
    index = {v: k for k, v in enumerate(vocab)}
    try:
        return np.fromiter((index[k] for k in keys), dtype=np.int64, count=len(keys))
    except KeyError as exc:
        raise IngestError(f"id {exc.args[0]!r} missing from target vocabulary") from None


def merge(*logs: EventLog) -> EventLog:
    """Union of logs (exact duplicates removed), vocabularies merged."""
    users = sorted(set().union(*(lg.users for lg in logs)))
    items = sorted(set().union(*(lg.items for lg in logs)))
    return EventLog.from_events((e for lg in logs for e in lg), users, items)


def parse_events(source: IO[str] | Iterable[str], delimiter: str = "\t",
                 columns: Sequence[str] = DEFAULT_COLUMNS) -> EventLog:
    """Parse delimited text, one event per line.

    ``columns`` names each field position; names other than user, item and
    timestamp are ignored (e.g. a rating column). Blank lines and lines
    starting with ``#`` are skipped.
    """
    columns = tuple(columns)
    missing = REQUIRED_COLUMNS - set(columns)
    if missing:
        raise ConfigurationError(f"columns must include {sorted(missing)}")
    pos = {name: columns.index(name) for name in REQUIRED_COLUMNS}
    width = len(columns)
    triples = []
    for line_no, line in enumerate(source, start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split(delimiter)
        if len(fields) < width:
            raise ParseError(line_no, f"expected {width} fields, got {len(fields)}")
        user, item = fields[pos["user"]].strip(), fields[pos["item"]].strip()
        if not user or not item:
            raise ParseError(line_no, "empty user or item id")
        raw_ts = fields[pos["timestamp"]].strip()
        try:
            ts = int(raw_ts)
        except ValueError:
            raise ParseError(line_no, f"timestamp {raw_ts!r} is not an integer") from None
        triples.append((user, item, ts))
    if not triples:
        raise EmptyLogError("no events in input")
    return EventLog.from_events(triples)


def write_events(log: EventLog, sink: IO[str], delimiter: str = "\t") -> None:
    for e in log:
        sink.write(f"{e.user}{delimiter}{e.item}{delimiter}{e.timestamp}\n")


def core_filter(log: EventLog, min_user_events: int, min_item_events: int) -> EventLog:
    """Iteratively drop users and items with fewer events than the thresholds."""
    if min_user_events < 0 or min_item_events < 0:
        raise ConfigurationError("thresholds must be >= 0")
    keep = np.ones(len(log), dtype=bool)
    while True:
        uc, ic = log.user_codes[keep], log.item_codes[keep]
        ucount = np.bincount(uc, minlength=len(log.users))
        icount = np.bincount(ic, minlength=len(log.items))
        bad = (ucount[log.user_codes] < min_user_events) | (icount[log.item_codes] < min_item_events)
        new_keep = keep & ~bad
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
    return log.subset(keep).compact()


def split_by_time(log: EventLog, fractions: Sequence[float] = (0.7, 0.15, 0.15)
                  ) -> tuple[EventLog, EventLog, EventLog]:
    """Partition by global event order: ceil(f_train*n) events, then ceil(f_valid*n), then the rest."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must be three positive numbers summing to 1, got {tuple(fractions)}")
    n = len(log)
    a = min(n, math.ceil(fractions[0] * n - 1e-9))
    b = min(n, a + math.ceil(fractions[1] * n - 1e-9))
    return log.subset(slice(0, a)), log.subset(slice(a, b)), log.subset(slice(b, n))


def truncate_history(log: EventLog, H: int | None) -> EventLog:
    """Keep each user's H most recent events. ``None`` means keep everything."""
    if H is None:
        return log
    if H < 1:
        raise ConfigurationError("H must be >= 1")
    if len(log) == 0:
        return log
    # Rank of each event from the end within its user, in canonical order.
    order = np.lexsort((np.arange(len(log)), log.user_codes))
    uc = log.user_codes[order]
    group = np.r_[0, np.cumsum(np.diff(uc) != 0)]
    ends = np.r_[np.flatnonzero(np.diff(uc)) + 1, len(uc)]
    from_end = ends[group] - 1 - np.arange(len(uc))
    keep = np.zeros(len(log), dtype=bool)
    keep[order] = from_end < H
    return log.subset(keep)


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    """Sparse binary user x item indicator matrix."""

    csr: sparse.csr_matrix
    users: tuple[str, ...] = ()
    items: tuple[str, ...] = ()

    @classmethod
    def from_pairs(cls, rows: int, cols: int, pairs, users=(), items=()) -> "InteractionMatrix":
        pairs = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        if len(pairs) and (pairs.min() < 0 or pairs[:, 0].max() >= rows or pairs[:, 1].max() >= cols):
            raise IngestError("entry index out of range")
        m = sparse.csr_matrix((np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])),
                              shape=(rows, cols))
        m.sum_duplicates()
        m.data[:] = 1
        return cls(m, tuple(users), tuple(items))

    @classmethod
    def from_dense(cls, array, users=(), items=()) -> "InteractionMatrix":
        arr = np.asarray(array)
        return cls(sparse.csr_matrix((arr != 0).astype(np.int8)), tuple(users), tuple(items))

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape

    @property
    def rows(self) -> int:
        return self.csr.shape[0]

    @property
    def cols(self) -> int:
        return self.csr.shape[1]

    @property
    def nnz(self) -> int:
        return int(self.csr.nnz)

    @property
    def sparsity(self) -> float:
        cells = self.rows * self.cols
        return 1.0 if cells == 0 else 1.0 - self.nnz / cells

    def entries(self) -> list[tuple[int, int]]:
        coo = self.csr.tocoo()
        return sorted(zip(coo.row.tolist(), coo.col.tolist()))

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray().astype(np.int8)

    def write(self, sink: IO[str]) -> None:
        pairs = self.entries()
        sink.write(f"{self.rows} {self.cols} {len(pairs)}\n")
        for u, i in pairs:
            sink.write(f"{u} {i}\n")

    @classmethod
    def read(cls, source: IO[str]) -> "InteractionMatrix":
        header = source.readline().split()
        if len(header) != 3:
            raise ParseError(1, "expected header 'rows cols nnz'")
        rows, cols, nnz = map(int, header)
        pairs = [tuple(map(int, line.split())) for line in source if line.strip()]
        if len(pairs) != nnz:
            raise ParseError(1, f"header says {nnz} entries, found {len(pairs)}")
        return cls.from_pairs(rows, cols, pairs)


def binarize(log: EventLog) -> InteractionMatrix:
    """Indicator of (user, item) consumption over the log's vocabularies."""
    return InteractionMatrix.from_pairs(
        len(log.users), len(log.items),
        np.column_stack([log.user_codes, log.item_codes]) if len(log) else [],
        log.users, log.items)
