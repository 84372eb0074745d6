"""Integer-coded household datasets and the microdata CSV format.

Cells hold 1-based category codes; 0 marks a missing cell.  The on-disk
format is one row per individual record: household_id, person_index,
is_head, then one column per variable in schema order.  Household-level
values are repeated on every row (default) or carried only on the first
row of each household when written with ``sparse_household=True``.
Missing cells are written as a sentinel token, "NA" by default.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .schema import HOUSEHOLD, Schema

MISSING = 0
NA_TOKEN = "NA"


class DataError(ValueError):
    """Raised for malformed or inconsistent microdata files."""


@dataclass
class Household:
    hh: np.ndarray  # (q,) int32 codes, 0 = missing
    ind: np.ndarray  # (size, p) int32 codes, 0 = missing

    @property
    def size(self) -> int:
        return self.ind.shape[0]

    def fully_observed(self) -> bool:
        return not (np.any(self.hh == MISSING) or np.any(self.ind == MISSING))

    def copy(self) -> "Household":
        return Household(self.hh.copy(), self.ind.copy())


@dataclass
class SizeGroup:
    """Columnar view of all households of one size."""

    indices: np.ndarray  # (n,) positions in the dataset's household list
    hh: np.ndarray  # (n, q)
    ind: np.ndarray  # (n, h, p)


class Dataset:
    def __init__(self, schema: Schema, households: list[Household], ids: list | None = None):
        self.schema = schema
        self.households = households
        self.ids = list(ids) if ids is not None else list(range(1, len(households) + 1))
        if len(self.ids) != len(households):
            raise DataError("household id list length mismatch")
        for hid, hh in zip(self.ids, households):
            self._check_household(hid, hh)

    def _check_household(self, hid, record: Household):
        schema = self.schema
        if record.hh.shape != (schema.q,):
            raise DataError(f"household {hid}: expected {schema.q} household cells")
        if record.ind.ndim != 2 or record.ind.shape[1] != schema.p:
            raise DataError(f"household {hid}: expected {schema.p} individual variables")
        size_code = int(record.hh[schema.size_index])
        if size_code == MISSING:
            raise DataError(f"household {hid}: household-size cell may not be missing")
        h = schema.size_for_code(size_code)
        if record.size != h:
            raise DataError(
                f"household {hid}: size variable says {h} members but {record.size} records present"
            )
        for k, var in enumerate(schema.household_vars):
            c = int(record.hh[k])
            if c != MISSING and not (1 <= c <= var.cardinality):
                raise DataError(f"household {hid}: {var.name} code {c} outside 1..{var.cardinality}")
        for k, var in enumerate(schema.individual_vars):
            col = record.ind[:, k]
            bad = col[(col != MISSING) & ((col < 1) | (col > var.cardinality))]
            if bad.size:
                raise DataError(
                    f"household {hid}: {var.name} code {int(bad[0])} outside 1..{var.cardinality}"
                )

    def __len__(self) -> int:
        return len(self.households)

    @property
    def n_individuals(self) -> int:
        return sum(hh.size for hh in self.households)

    def fully_observed(self) -> bool:
        return all(hh.fully_observed() for hh in self.households)

    def copy(self) -> "Dataset":
        return Dataset(self.schema, [hh.copy() for hh in self.households], list(self.ids))

    def groups(self) -> dict[int, SizeGroup]:
        """Columnar arrays per household size, keyed by size in ascending order."""
        by_size: dict[int, list[int]] = {}
        for i, hh in enumerate(self.households):
            by_size.setdefault(hh.size, []).append(i)
        out = {}
        for h in sorted(by_size):
            idx = np.asarray(by_size[h], dtype=np.int64)
            out[h] = SizeGroup(
                indices=idx,
                hh=np.stack([self.households[i].hh for i in idx]).astype(np.int32),
                ind=np.stack([self.households[i].ind for i in idx]).astype(np.int32),
            )
        return out

    @classmethod
    def from_groups(cls, schema: Schema, groups: dict[int, SizeGroup], n: int, ids=None) -> "Dataset":
        records: list[Household | None] = [None] * n
        for grp in groups.values():
            for row, i in enumerate(grp.indices):
                records[int(i)] = Household(
                    grp.hh[row].astype(np.int32), grp.ind[row].astype(np.int32)
                )
        if any(r is None for r in records):
            raise DataError("size groups do not cover every household index")
        return cls(schema, records, ids)


def read_microdata(source, schema: Schema, na_token: str = NA_TOKEN) -> Dataset:
    """Parse the microdata CSV format against a schema."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with io.open(source, "r", encoding="utf-8", newline="") as fh:
            text = fh.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty microdata file") from None
    expected = ["household_id", "person_index", "is_head"] + [v.name for v in schema.variables]
    if header != expected:
        raise DataError(f"bad header: expected {expected}, got {header}")

    rows_by_household: dict[str, list[tuple[int, list[str]]]] = {}
    order: list[str] = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(expected):
            raise DataError(f"line {lineno}: expected {len(expected)} columns, got {len(row)}")
        hid = row[0]
        if hid not in rows_by_household:
            rows_by_household[hid] = []
            order.append(hid)
        elif order[-1] != hid:
            raise DataError(f"line {lineno}: household {hid} rows are not contiguous")
        try:
            pidx = int(row[1])
        except ValueError:
            raise DataError(f"line {lineno}: person_index is not an integer") from None
        rows_by_household[hid].append((pidx, row))

    def decode(token: str, varname: str, lineno_hint: str) -> int:
        token = token.strip()
        if token == na_token or token == "":
            return MISSING
        try:
            return int(token)
        except ValueError:
            raise DataError(f"household {lineno_hint}: {varname} value {token!r} is not a code") from None

    households, ids = [], []
    for hid in order:
        rows = rows_by_household[hid]
        indices = [p for p, _ in rows]
        n = len(rows)
        if sorted(indices) != list(range(1, n + 1)):
            raise DataError(f"household {hid}: person_index not contiguous 1..{n}")
        rows.sort(key=lambda t: t[0])
        heads = [int(r[2]) for _, r in rows if r[2].strip() not in ("", na_token)]
        if sum(1 for x in heads if x == 1) != 1:
            raise DataError(f"household {hid}: exactly one row must have is_head = 1")
        hh = np.zeros(schema.q, dtype=np.int32)
        ind = np.zeros((n, schema.p), dtype=np.int32)
        for k, var in enumerate(schema.variables):
            col = 3 + k
            if var.level == HOUSEHOLD:
                pos = schema.hh_position(var.name)
                values = []
                for pidx, row in rows:
                    tok = row[col].strip()
                    if tok == "" and pidx > 1:
                        continue  # sparse layout: household values only on the first row
                    values.append(decode(tok, var.name, hid))
                if not values:
                    raise DataError(f"household {hid}: no value for household variable {var.name}")
                if len(set(values)) > 1:
                    raise DataError(f"household {hid}: inconsistent values for {var.name}")
                hh[pos] = values[0]
            else:
                pos = schema.ind_position(var.name)
                for j, (pidx, row) in enumerate(rows):
                    ind[j, pos] = decode(row[col], var.name, hid)
        households.append(Household(hh, ind))
        ids.append(int(hid) if hid.isdigit() else hid)
    return Dataset(schema, households, ids)


def write_microdata(
    dataset: Dataset,
    target,
    na_token: str = NA_TOKEN,
    sparse_household: bool = False,
) -> None:
    """Write the canonical microdata CSV (schema column order, LF endings)."""
    schema = dataset.schema

    def fmt(code: int) -> str:
        return na_token if code == MISSING else str(int(code))

    def emit(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["household_id", "person_index", "is_head"] + [v.name for v in schema.variables])
        for hid, record in zip(dataset.ids, dataset.households):
            for j in range(record.size):
                row = [str(hid), str(j + 1), "1" if j == 0 else "0"]
                for var in schema.variables:
                    if var.level == HOUSEHOLD:
                        if sparse_household and j > 0:
                            row.append("")
                        else:
                            row.append(fmt(record.hh[schema.hh_position(var.name)]))
                    else:
                        row.append(fmt(record.ind[j, schema.ind_position(var.name)]))
                writer.writerow(row)

    if hasattr(target, "write"):
        emit(target)
    else:
        with io.open(target, "w", encoding="utf-8", newline="") as fh:
            emit(fh)
