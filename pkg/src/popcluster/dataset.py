"""Trial matrices, rating tables, and their on-disk formats.

Two matrix formats are supported: CSV for small matrices and the binary
PCM1 container for large ones (see ``docs/FORMATS.md``).
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"PCM1"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
_U32 = struct.Struct("<I")
# Refuse headers whose payload could not possibly be allocated.
_MAX_ELEMENTS = 1 << 40

CONTINUOUS = "continuous"
DISCRETE = "discrete"


class DataError(ValueError):
    """Raised when an input file or in-memory table fails validation."""


@dataclass(frozen=True)
class TrialMatrix:
    trial_ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {values.shape}")
        ids = tuple(str(t) for t in self.trial_ids)
        n, m = values.shape
        if len(ids) != n:
            raise DataError(f"{len(ids)} trial ids for {n} rows")
        if n < 2:
            raise DataError(f"need at least 2 trials, got {n}")
        if m < 1:
            raise DataError("need at least 1 feature")
        _check_unique(ids)
        bad = ~np.isfinite(values)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise DataError(f"non-finite value at row {r + 1}, column {c}")
        values = values.copy() if values is self.values else values
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "trial_ids", ids)

    @property
    def n_trials(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def take(self, rows) -> "TrialMatrix":
        rows = np.asarray(rows, dtype=np.intp)
        return TrialMatrix(tuple(self.trial_ids[i] for i in rows), self.values[rows])


@dataclass(frozen=True)
class ColumnKind:
    """Declared kind of a rating column, with a value range for continuous ones."""

    kind: str = CONTINUOUS
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, DISCRETE):
            raise DataError(f"unknown column kind {self.kind!r}")
        if self.lo > self.hi:
            raise DataError(f"empty range ({self.lo}, {self.hi})")

    @classmethod
    def parse(cls, text: str) -> "ColumnKind":
        """Parse ``discrete``, ``continuous`` or ``continuous LO HI``."""
        parts = text.replace(":", " ").split()
        if not parts:
            raise DataError("empty column kind")
        if parts[0] == DISCRETE and len(parts) == 1:
            return cls(DISCRETE)
        if parts[0] == CONTINUOUS and len(parts) in (1, 3):
            if len(parts) == 1:
                return cls(CONTINUOUS)
            try:
                return cls(CONTINUOUS, float(parts[1]), float(parts[2]))
            except ValueError:
                pass
        raise DataError(f"cannot parse column kind {text!r}")

    def __str__(self):
        if self.kind == DISCRETE:
            return DISCRETE
        if math.isinf(self.lo) and math.isinf(self.hi):
            return CONTINUOUS
        return f"{CONTINUOUS} {self.lo:g} {self.hi:g}"


@dataclass(frozen=True)
class RatingsTable:
    trial_ids: tuple[str, ...]
    column_names: tuple[str, ...]
    kinds: tuple[ColumnKind, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        ids = tuple(str(t) for t in self.trial_ids)
        names = tuple(self.column_names)
        if values.ndim != 2 or values.shape != (len(ids), len(names)):
            raise DataError(
                f"ratings shape {values.shape} does not match "
                f"{len(ids)} trials x {len(names)} columns"
            )
        if len(self.kinds) != len(names):
            raise DataError("one kind per column required")
        _check_unique(ids)
        if len(set(names)) != len(names):
            raise DataError("duplicate rating column name")
        for j, (name, kind) in enumerate(zip(names, self.kinds)):
            col = values[:, j]
            if not np.isfinite(col).all():
                i = int(np.flatnonzero(~np.isfinite(col))[0])
                raise DataError(f"non-finite rating at ({ids[i]}, {name})")
            if kind.kind == DISCRETE:
                bad = (col < 0) | (col != np.round(col))
                if bad.any():
                    i = int(np.flatnonzero(bad)[0])
                    raise DataError(
                        f"discrete column {name} has non-integer or negative "
                        f"value {col[i]!r} at trial {ids[i]}"
                    )
            else:
                bad = (col < kind.lo) | (col > kind.hi)
                if bad.any():
                    i = int(np.flatnonzero(bad)[0])
                    raise DataError(
                        f"value {col[i]!r} at ({ids[i]}, {name}) outside range "
                        f"[{kind.lo:g}, {kind.hi:g}]"
                    )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "trial_ids", ids)
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "kinds", tuple(self.kinds))

    @property
    def n_trials(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_names.index(name)]

    def take(self, rows) -> "RatingsTable":
        rows = np.asarray(rows, dtype=np.intp)
        return RatingsTable(
            tuple(self.trial_ids[i] for i in rows), self.column_names, self.kinds, self.values[rows]
        )


@dataclass(frozen=True)
class Alignment:
    matrix: TrialMatrix
    ratings: RatingsTable
    dropped_from_matrix: tuple[str, ...] = field(default=())
    dropped_from_ratings: tuple[str, ...] = field(default=())


def _check_unique(ids: Sequence[str]) -> None:
    seen = set()
    for t in ids:
        if t in seen:
            raise DataError(f"duplicate trial id {t}")
        seen.add(t)


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"non-numeric cell {text!r} at ({row}, {col})") from None
    if not math.isfinite(v):
        raise DataError(f"non-finite cell {text!r} at ({row}, {col})")
    return v


def _read_csv_table(path) -> tuple[list[str], list[str], list[list[float]]]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2 or header[0] != "trial_id":
            raise DataError(f"{path}: header must start with 'trial_id' and name >= 1 column")
        columns = header[1:]
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(
                    f"{path}: ragged row {lineno}: {len(rec)} fields, expected {len(header)}"
                )
            ids.append(rec[0])
            rows.append([_parse_float(v, lineno, c) for v, c in zip(rec[1:], columns)])
    _check_unique(ids)
    return columns, ids, rows


def load_matrix_csv(path) -> TrialMatrix:
    """Read a ``trial_id,f0,f1,...`` CSV file. Rows are numbered from 1 after the header."""
    columns, ids, rows = _read_csv_table(path)
    values = np.array(rows, dtype=np.float64).reshape(len(ids), len(columns))
    return TrialMatrix(tuple(ids), values)


def save_matrix_csv(m: TrialMatrix, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id"] + [f"f{j}" for j in range(m.n_features)])
        for tid, row in zip(m.trial_ids, m.values):
            w.writerow([tid] + [repr(float(v)) for v in row])


def write_block(fh: BinaryIO, values: np.ndarray, ids: Sequence[str]) -> None:
    """Write one PCM1 record: header, float64 payload, length-prefixed ids."""
    values = np.ascontiguousarray(values, dtype="<f8")
    rows, cols = values.shape
    if len(ids) != rows:
        raise DataError(f"{len(ids)} ids for {rows} rows")
    fh.write(_HEADER.pack(MAGIC, VERSION, rows, cols))
    fh.write(values.tobytes(order="C"))
    for t in ids:
        raw = str(t).encode("utf-8")
        fh.write(_U32.pack(len(raw)))
        fh.write(raw)


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError(f"truncated matrix file: expected {n} bytes of {what}, got {len(data)}")
    return data


def read_block(fh: BinaryIO) -> tuple[np.ndarray, list[str]] | None:
    """Read one PCM1 record; returns None at a clean end of file."""
    head = fh.read(_HEADER.size)
    if not head:
        return None
    if len(head) < 4 or head[:4] != MAGIC:
        raise DataError("unrecognized matrix file (bad magic)")
    if len(head) != _HEADER.size:
        raise DataError("truncated matrix file: incomplete header")
    _, version, rows, cols = _HEADER.unpack(head)
    if version != VERSION:
        raise DataError(f"unsupported matrix file version {version}")
    if rows * cols > _MAX_ELEMENTS or rows > _MAX_ELEMENTS or cols > _MAX_ELEMENTS:
        raise DataError(f"matrix dimensions overflow: {rows} x {cols}")
    nbytes = rows * cols * 8
    payload = _read_exact(fh, nbytes, "values")
    values = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
    ids = []
    for _ in range(rows):
        (length,) = _U32.unpack(_read_exact(fh, 4, "trial id length"))
        ids.append(_read_exact(fh, length, "trial id").decode("utf-8"))
    return values, ids


def save_matrix_binary(m: TrialMatrix, path) -> None:
    with Path(path).open("wb") as fh:
        write_block(fh, m.values, m.trial_ids)


def load_matrix_binary(path) -> TrialMatrix:
    with Path(path).open("rb") as fh:
        block = read_block(fh)
        if block is None:
            raise DataError("unrecognized matrix file (empty)")
        if fh.read(1):
            raise DataError("trailing bytes after matrix record")
    values, ids = block
    return TrialMatrix(tuple(ids), values)


def load_matrix(path) -> TrialMatrix:
    """Dispatch on extension: ``.csv`` is text, anything else is PCM1."""
    if str(path).lower().endswith(".csv"):
        return load_matrix_csv(path)
    return load_matrix_binary(path)


def load_ratings_csv(
    path, kinds: Mapping[str, ColumnKind] | None = None, default: ColumnKind | None = None
) -> RatingsTable:
    """Load a rating table; columns without a declared kind use ``default``
    (plain continuous, unbounded, when not given)."""
    columns, ids, rows = _read_csv_table(path)
    kinds = dict(kinds or {})
    unknown = set(kinds) - set(columns)
    if unknown:
        raise DataError(f"kinds declared for unknown columns: {sorted(unknown)}")
    default = default or ColumnKind()
    col_kinds = tuple(kinds.get(c, default) for c in columns)
    values = np.array(rows, dtype=np.float64).reshape(len(ids), len(columns))
    return RatingsTable(tuple(ids), tuple(columns), col_kinds, values)


def save_ratings_csv(r: RatingsTable, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id", *r.column_names])
        for tid, row in zip(r.trial_ids, r.values):
            cells = [
                str(int(v)) if k.kind == DISCRETE else repr(float(v))
                for v, k in zip(row, r.kinds)
            ]
            w.writerow([tid, *cells])


def align(m: TrialMatrix, r: RatingsTable) -> Alignment:
    """Restrict both tables to their shared trials, in matrix row order.

    Trials missing from either side are dropped with a warning and listed
    in the returned report; nothing is imputed.
    """
    in_ratings = {t: i for i, t in enumerate(r.trial_ids)}
    in_matrix = set(m.trial_ids)
    keep = [i for i, t in enumerate(m.trial_ids) if t in in_ratings]
    if not keep:
        raise DataError("no shared trials between matrix and ratings")
    dropped_m = tuple(t for t in m.trial_ids if t not in in_ratings)
    dropped_r = tuple(t for t in r.trial_ids if t not in in_matrix)
    if dropped_m or dropped_r:
        logger.warning(
            "align: dropped %d matrix trials without ratings and %d rated trials without data",
            len(dropped_m),
            len(dropped_r),
        )
    if len(keep) == m.n_trials and not dropped_r and list(r.trial_ids) == list(m.trial_ids):
        return Alignment(m, r)
    mm = m if len(keep) == m.n_trials else m.take(keep)
    rr = r.take([in_ratings[m.trial_ids[i]] for i in keep])
    return Alignment(mm, rr, dropped_m, dropped_r)
