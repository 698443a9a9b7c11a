"""Datasets of mixed indicators and the raw-table preprocessing pipeline.

A Dataset is a dense numeric matrix plus per-column metadata. Continuous
columns hold log response times rescaled to [0,1] (bounds stored so the
transform inverts); discrete columns hold integer category codes. The
preprocessing steps mirror the intended application: collapse testlet
response pairs into one four-category variable, sum their response times,
trim extreme response times record-wise, then log and rescale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import ConfigurationError, DegenerateMVError, DomainError, SchemaError
from .likelihood import FACTOR_ABILITY, FACTOR_SPEED
from .measurement import CONTINUOUS, DISCRETE

TESTLET_SCORES = (0.0, 1.0, 1.0, 2.0)


@dataclass(frozen=True)
class ColumnInfo:
    """Metadata for one manifest variable."""

    name: str
    kind: str
    factor: str
    n_categories: int = 0
    monotone: bool = False
    score: str = "identity"
    bounds: tuple | None = None
    partner: str | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, DISCRETE):
            raise ConfigurationError(f"unknown column kind {self.kind!r}")
        if self.factor not in (FACTOR_SPEED, FACTOR_ABILITY):
            raise ConfigurationError(f"unknown factor {self.factor!r}")
        if self.kind == DISCRETE and self.n_categories < 2:
            raise ConfigurationError(
                f"discrete column {self.name!r} needs >= 2 categories"
            )


@dataclass
class Dataset:
    """Complete records over a fixed battery of manifest variables."""

    values: np.ndarray
    columns: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.columns = list(self.columns)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise SchemaError(
                f"value matrix is {self.values.shape}, expected n x {len(self.columns)}"
            )
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def names(self) -> list:
        return [c.name for c in self.columns]

    def column_index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise SchemaError(f"no column named {name!r}")

    def column(self, name: str) -> ColumnInfo:
        return self.columns[self.column_index(name)]

    def validate(self) -> None:
        """Raise unless every entry is complete and within its domain."""
        if not np.all(np.isfinite(self.values)):
            raise SchemaError("values contain missing or non-finite entries")
        for i, c in enumerate(self.columns):
            col = self.values[:, i]
            if c.kind == CONTINUOUS:
                if col.size and (col.min() < 0.0 or col.max() > 1.0):
                    raise DomainError(f"continuous column {c.name!r} leaves [0,1]")
            else:
                if np.any(col != np.round(col)):
                    raise SchemaError(f"discrete column {c.name!r} has non-integer codes")
                if col.size and (col.min() < 0 or col.max() > c.n_categories - 1):
                    raise DomainError(
                        f"discrete column {c.name!r} leaves 0..{c.n_categories - 1}"
                    )

    def select(self, names) -> "Dataset":
        idx = [self.column_index(n) for n in names]
        return Dataset(self.values[:, idx], [self.columns[i] for i in idx])

    def select_kind(self, kind: str) -> "Dataset":
        names = [c.name for c in self.columns if c.kind == kind]
        return self.select(names)

    def drop(self, names) -> "Dataset":
        gone = set(names)
        missing = gone - set(self.names)
        if missing:
            raise SchemaError(f"cannot drop unknown columns {sorted(missing)}")
        kept = [c.name for c in self.columns if c.name not in gone]
        sub = self.select(kept)
        # sever partner links into the removed set
        sub.columns = [
            replace(c, partner=None) if c.partner in gone else c for c in sub.columns
        ]
        return sub


@dataclass(frozen=True)
class ItemSpec:
    """How raw table columns map to the manifest variables of one item.

    One response column gives a dichotomous variable; two give a collapsed
    four-category testlet. Any listed time columns are summed into a single
    response-time variable paired with the response.
    """

    name: str
    responses: tuple
    times: tuple = ()
    monotone: bool = False

    def __post_init__(self):
        object.__setattr__(self, "responses", tuple(self.responses))
        object.__setattr__(self, "times", tuple(self.times))
        if len(self.responses) not in (1, 2):
            raise ConfigurationError(
                f"item {self.name!r}: need 1 or 2 response columns, got {len(self.responses)}"
            )

    @property
    def is_testlet(self) -> bool:
        return len(self.responses) == 2

    @property
    def time_name(self) -> str:
        return self.name + "_rt"


def _column(table, name):
    try:
        col = np.asarray(table[name], dtype=float)
    except KeyError:
        raise SchemaError(f"raw table has no column {name!r}") from None
    if col.ndim != 1:
        raise SchemaError(f"raw column {name!r} is not one-dimensional")
    return col


def _binary(table, name):
    col = _column(table, name)
    if not np.all(np.isin(col, (0.0, 1.0))):
        raise SchemaError(f"response column {name!r} is not 0/1 coded")
    return col


def _trim_mask(raw: np.ndarray, trim: float) -> np.ndarray:
    """Keep-mask after dropping the floor(n*trim) smallest and largest."""
    n = raw.size
    k = int(np.floor(n * trim))
    keep = np.ones(n, dtype=bool)
    if k > 0:
        order = np.argsort(raw, kind="stable")
        keep[order[:k]] = False
        keep[order[n - k:]] = False
    return keep


def preprocess(table, spec, trim: float = 0.01) -> Dataset:
    """Build a model-ready Dataset from raw response/response-time columns.

    Steps, in order: recode each testlet response pair (r1, r2) to the
    four-category code r1 + 2*r2 and sum its time columns; drop whole
    records in the trimmed tails of any raw summed response time; take
    log10 of times and min-max rescale to [0,1], storing bounds on the
    column metadata. Passing an already-built Dataset returns it unchanged.
    """
    if isinstance(table, Dataset):
        return table
    if not 0.0 <= trim < 0.5:
        raise ConfigurationError(f"trim fraction {trim} outside [0, 0.5)")
    spec = list(spec)
    if not spec:
        raise ConfigurationError("empty item spec")

    resp_cols = []
    time_cols = []
    for item in spec:
        if item.is_testlet:
            r1 = _binary(table, item.responses[0])
            r2 = _binary(table, item.responses[1])
            resp_cols.append((item, r1 + 2.0 * r2))
        else:
            resp_cols.append((item, _binary(table, item.responses[0])))
        if item.times:
            total = sum(_column(table, t) for t in item.times)
            if np.any(total <= 0.0):
                raise DomainError(
                    f"item {item.name!r}: nonpositive response time, log undefined"
                )
            time_cols.append((item, total))

    lengths = {c.size for _, c in resp_cols} | {c.size for _, c in time_cols}
    if len(lengths) != 1:
        raise SchemaError(f"raw columns have mixed lengths {sorted(lengths)}")

    keep = np.ones(lengths.pop(), dtype=bool)
    for _, total in time_cols:
        keep &= _trim_mask(total, trim)
    if not np.any(keep):
        raise DomainError("trimming removed every record")

    columns = []
    matrix = []
    for item, codes in resp_cols:
        columns.append(
            ColumnInfo(
                name=item.name,
                kind=DISCRETE,
                factor=FACTOR_ABILITY,
                n_categories=4 if item.is_testlet else 2,
                monotone=item.monotone,
                score="testlet" if item.is_testlet else "identity",
                partner=item.time_name if item.times else None,
            )
        )
        matrix.append(codes[keep])
    for item, total in time_cols:
        logged = np.log10(total[keep])
        lo, hi = float(logged.min()), float(logged.max())
        if hi <= lo:
            raise DegenerateMVError(
                f"item {item.name!r}: constant response time, cannot rescale"
            )
        columns.append(
            ColumnInfo(
                name=item.time_name,
                kind=CONTINUOUS,
                factor=FACTOR_SPEED,
                monotone=item.monotone,
                bounds=(lo, hi),
                partner=item.name,
            )
        )
        matrix.append((logged - lo) / (hi - lo))

    data = Dataset(np.column_stack(matrix), columns)
    data.validate()
    return data


def inverse_rescale(values, bounds) -> np.ndarray:
    """Map a rescaled continuous column back to the log time scale."""
    lo, hi = bounds
    return np.asarray(values, dtype=float) * (hi - lo) + lo


def read_table(path) -> dict:
    """Read a headed CSV into a dict of float columns."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise SchemaError(f"{path}: no data rows")
    out = {}
    for j, name in enumerate(header):
        try:
            out[name.strip()] = np.array([float(r[j]) for r in body])
        except (ValueError, IndexError) as err:
            raise SchemaError(f"{path}: bad value in column {name!r}: {err}") from None
    return out


def write_table(path, names, rows) -> None:
    """Write rows of floats/strings as CSV with a fixed float format."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])


def _format_cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)) or isinstance(v, str):
        return v
    return format(float(v), ".12g")
