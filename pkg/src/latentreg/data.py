"""Core datasets, validation and CSV ingestion.

Two shapes of data are supported:

* :class:`ObservationSet` -- one row per unit (teacher, examiner, tract) holding the
  outcome ``y``, the noisy measurement ``x`` of the latent attribute, its known
  standard error ``sigma``, an optional nonnegative ``weight`` and optional controls.
* :class:`GroupedData` -- student-level rows nested in groups, used by the
  disaggregated estimators and by :func:`aggregate`.

When aggregating, the standard error of a group mean is computed from the
within-group sample variance with divisor ``N_i - 1``::

    sigma_i**2 = s2_i / N_i,   s2_i = sum_j (x_ij - xbar_i)**2 / (N_i - 1)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InputError

__all__ = [
    "ObservationSet",
    "Group",
    "GroupedData",
    "LatentTruth",
    "Schema",
    "parse_schema",
    "load_observations",
    "load_grouped",
    "write_observations",
    "write_grouped",
    "aggregate",
]


def _frozen(a, name, ndim=1):
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise InputError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}", field=name)
    arr.setflags(write=False)
    return arr


def _first_bad(mask):
    return int(np.flatnonzero(mask)[0])


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Unit-level records ``(y, x, sigma, weight, covariates)``.

    Arrays are copied and made read-only on construction.
    """

    y: np.ndarray
    x: np.ndarray
    sigma: np.ndarray
    weight: Optional[np.ndarray] = None
    covariates: Optional[np.ndarray] = None

    def __post_init__(self):
        y = _frozen(self.y, "y")
        x = _frozen(self.x, "x")
        sigma = _frozen(self.sigma, "sigma")
        n = y.shape[0]
        weight = np.ones(n) if self.weight is None else self.weight
        weight = _frozen(weight, "weight")
        cov = self.covariates
        if cov is not None:
            cov = np.asarray(cov, dtype=np.float64)
            if cov.ndim == 1:
                cov = cov[:, None]
            cov = _frozen(cov, "covariates", ndim=2)
            if cov.shape[1] == 0:
                cov = None
        for name, arr in (("x", x), ("sigma", sigma), ("weight", weight)):
            if arr.shape[0] != n:
                raise InputError(
                    f"length mismatch: y has {n} rows, {name} has {arr.shape[0]}", field=name
                )
        if cov is not None and cov.shape[0] != n:
            raise InputError(
                f"length mismatch: y has {n} rows, covariates has {cov.shape[0]}",
                field="covariates",
            )
        if n < 3:
            raise InputError(f"need at least 3 units, got {n}", n=n)
        for name, arr in (("y", y), ("x", x), ("sigma", sigma), ("weight", weight)):
            bad = ~np.isfinite(arr)
            if bad.any():
                row = _first_bad(bad)
                raise InputError(f"non-finite {name} at row {row}", field=name, row=row)
        if cov is not None:
            bad = ~np.isfinite(cov).all(axis=1)
            if bad.any():
                row = _first_bad(bad)
                raise InputError(f"non-finite covariate at row {row}", field="covariates", row=row)
        if (sigma <= 0).any():
            row = _first_bad(sigma <= 0)
            raise InputError(
                f"sigma must be strictly positive; row {row} has sigma={sigma[row]!r}",
                field="sigma",
                row=row,
                value=float(sigma[row]),
            )
        if (weight < 0).any():
            row = _first_bad(weight < 0)
            raise InputError(f"negative weight at row {row}", field="weight", row=row)
        if np.count_nonzero(weight > 0) < 2:
            raise InputError("at least two weights must be strictly positive", field="weight")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "covariates", cov)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def sigma2(self) -> np.ndarray:
        return self.sigma**2

    @property
    def has_covariates(self) -> bool:
        return self.covariates is not None

    def take(self, idx) -> "ObservationSet":
        """Row subset (with repetition allowed), used by the bootstrap."""
        idx = np.asarray(idx)
        return ObservationSet(
            self.y[idx],
            self.x[idx],
            self.sigma[idx],
            self.weight[idx],
            None if self.covariates is None else self.covariates[idx],
        )

    def replace(self, **changes) -> "ObservationSet":
        kw = dict(
            y=self.y, x=self.x, sigma=self.sigma, weight=self.weight, covariates=self.covariates
        )
        kw.update(changes)
        return ObservationSet(**kw)

    def equals(self, other: "ObservationSet") -> bool:
        if not isinstance(other, ObservationSet):
            return False
        if (self.covariates is None) != (other.covariates is None):
            return False
        same = all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("y", "x", "sigma", "weight")
        )
        if self.covariates is not None:
            same = same and np.array_equal(self.covariates, other.covariates)
        return same


@dataclass(frozen=True, eq=False)
class Group:
    """Students of one teacher."""

    teacher_id: str
    y: np.ndarray
    x: np.ndarray
    z: Optional[np.ndarray] = None

    def __post_init__(self):
        y = _frozen(self.y, "y")
        x = _frozen(self.x, "x")
        if x.shape != y.shape:
            raise InputError(
                f"group {self.teacher_id!r}: y and x lengths differ", group=self.teacher_id
            )
        z = self.z
        if z is not None:
            z = np.asarray(z, dtype=np.float64)
            if z.ndim == 1:
                z = z[:, None]
            z = _frozen(z, "z", ndim=2)
            if z.shape[0] != y.shape[0]:
                raise InputError(
                    f"group {self.teacher_id!r}: z has {z.shape[0]} rows, expected {y.shape[0]}",
                    group=self.teacher_id,
                )
            if z.shape[1] == 0:
                z = None
        if y.shape[0] < 2:
            raise InputError(
                f"group {self.teacher_id!r} has {y.shape[0]} student(s); "
                "the leave-one-out instrument needs at least 2",
                group=self.teacher_id,
                size=int(y.shape[0]),
            )
        for name, arr in (("y", y), ("x", x)) + ((("z", z),) if z is not None else ()):
            if not np.isfinite(arr).all():
                raise InputError(
                    f"group {self.teacher_id!r}: non-finite {name}", group=self.teacher_id
                )
        object.__setattr__(self, "teacher_id", str(self.teacher_id))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)

    @property
    def size(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True, eq=False)
class GroupedData:
    groups: tuple

    def __post_init__(self):
        groups = tuple(self.groups)
        if len(groups) < 2:
            raise InputError(f"need at least 2 groups, got {len(groups)}")
        kz = {None if g.z is None else g.z.shape[1] for g in groups}
        if len(kz) != 1:
            raise InputError("covariates must be present in every group with the same width")
        object.__setattr__(self, "groups", groups)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([g.size for g in self.groups])

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def has_covariates(self) -> bool:
        return self.groups[0].z is not None

    @property
    def teacher_ids(self) -> list:
        return [g.teacher_id for g in self.groups]

    def stacked(self):
        """Student-level arrays ``(y, x, z_or_None, group_index)`` in group order."""
        y = np.concatenate([g.y for g in self.groups])
        x = np.concatenate([g.x for g in self.groups])
        z = np.vstack([g.z for g in self.groups]) if self.has_covariates else None
        gid = np.repeat(np.arange(self.n_groups), self.sizes)
        return y, x, z, gid

    def take(self, idx) -> "GroupedData":
        return GroupedData(tuple(self.groups[i] for i in np.asarray(idx)))

    def canonical(self) -> "GroupedData":
        """Groups sorted by teacher id (stable)."""
        return GroupedData(tuple(sorted(self.groups, key=lambda g: g.teacher_id)))

    def equals(self, other: "GroupedData") -> bool:
        if len(self.groups) != len(other.groups):
            return False
        for a, b in zip(self.groups, other.groups):
            if a.teacher_id != b.teacher_id:
                return False
            if not (np.array_equal(a.y, b.y) and np.array_equal(a.x, b.x)):
                return False
            if (a.z is None) != (b.z is None):
                return False
            if a.z is not None and not np.array_equal(a.z, b.z):
                return False
        return True


@dataclass(frozen=True, eq=False)
class LatentTruth:
    """True latent attribute per unit; only simulated data carries it."""

    mu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", _frozen(self.mu, "mu"))

    def check(self, data: ObservationSet) -> None:
        if self.mu.shape[0] != data.n:
            raise InputError(f"latent truth has {self.mu.shape[0]} rows, data has {data.n}")


# ---------------------------------------------------------------------------
# Column mapping and CSV I/O
# ---------------------------------------------------------------------------

_KEYS = ("y", "x", "sigma", "weight", "z", "group")


@dataclass(frozen=True)
class Schema:
    """Explicit mapping from roles to CSV column names."""

    y: str = "y"
    x: str = "x"
    sigma: Optional[str] = "sigma"
    weight: Optional[str] = None
    z: tuple = ()
    group: Optional[str] = None

    def to_string(self) -> str:
        parts = [f"y={self.y}", f"x={self.x}"]
        if self.sigma:
            parts.append(f"sigma={self.sigma}")
        if self.weight:
            parts.append(f"weight={self.weight}")
        if self.z:
            parts.append("z=" + "+".join(self.z))
        if self.group:
            parts.append(f"group={self.group}")
        return ",".join(parts)


def parse_schema(text: str) -> Schema:
    """Parse ``y=COL,x=COL,sigma=COL[,weight=COL][,z=C1+C2][,group=COL]``."""
    kw: dict = {"sigma": None}
    seen = set()
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise InputError(f"schema entry {part!r} is not of the form key=COLUMN")
        key, _, col = part.partition("=")
        key, col = key.strip(), col.strip()
        if key not in _KEYS:
            raise InputError(f"unknown schema key {key!r}; expected one of {', '.join(_KEYS)}")
        if key in seen:
            raise InputError(f"schema key {key!r} given twice")
        if not col:
            raise InputError(f"schema key {key!r} has an empty column name")
        seen.add(key)
        kw[key] = tuple(c.strip() for c in col.split("+") if c.strip()) if key == "z" else col
    for key in ("y", "x"):
        if key not in seen:
            raise InputError(f"schema must map {key!r}")
    return Schema(**kw)


def _read_csv(path, columns: Sequence[str]):
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}", path=str(path))
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file, header row required", path=str(path)) from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise InputError(
                f"{path}: missing column(s) {', '.join(missing)}", path=str(path), missing=missing
            )
        pos = {c: header.index(c) for c in columns}
        rows = [r for r in reader if any(cell.strip() for cell in r)]
    return rows, pos


def _numeric(rows, pos, col, path):
    out = np.empty(len(rows))
    for i, r in enumerate(rows):
        cell = r[pos[col]].strip() if pos[col] < len(r) else ""
        try:
            v = float(cell)
        except ValueError:
            raise InputError(
                f"{path}: row {i} column {col!r}: cannot parse {cell!r} as a number",
                row=i,
                column=col,
            ) from None
        if not np.isfinite(v):
            raise InputError(
                f"{path}: row {i} column {col!r}: non-finite value {cell!r}", row=i, column=col
            )
        out[i] = v
    return out


def load_observations(path, schema: Schema | str) -> ObservationSet:
    """Read a unit-level CSV into an :class:`ObservationSet`, preserving row order."""
    if isinstance(schema, str):
        schema = parse_schema(schema)
    if not schema.sigma:
        raise InputError("schema must map 'sigma' for unit-level data")
    cols = [schema.y, schema.x, schema.sigma]
    if schema.weight:
        cols.append(schema.weight)
    cols.extend(schema.z)
    rows, pos = _read_csv(path, cols)
    y = _numeric(rows, pos, schema.y, path)
    x = _numeric(rows, pos, schema.x, path)
    sigma = _numeric(rows, pos, schema.sigma, path)
    bad = np.flatnonzero(sigma <= 0)
    if bad.size:
        raise InputError(
            f"{path}: row {bad[0]} has non-positive sigma {sigma[bad[0]]!r}",
            row=int(bad[0]),
            column=schema.sigma,
        )
    w = _numeric(rows, pos, schema.weight, path) if schema.weight else None
    z = np.column_stack([_numeric(rows, pos, c, path) for c in schema.z]) if schema.z else None
    return ObservationSet(y, x, sigma, w, z)


def load_grouped(path, schema: Schema | str) -> GroupedData:
    """Read a student-level CSV; rows are grouped by the ``group`` column.

    Groups appear in order of first appearance; within-group row order is kept.
    """
    if isinstance(schema, str):
        schema = parse_schema(schema)
    if not schema.group:
        raise InputError("schema must map 'group' (teacher id) for grouped data")
    cols = [schema.group, schema.y, schema.x, *schema.z]
    rows, pos = _read_csv(path, cols)
    y = _numeric(rows, pos, schema.y, path)
    x = _numeric(rows, pos, schema.x, path)
    z = np.column_stack([_numeric(rows, pos, c, path) for c in schema.z]) if schema.z else None
    ids = [r[pos[schema.group]].strip() for r in rows]
    order: dict = {}
    for i, g in enumerate(ids):
        order.setdefault(g, []).append(i)
    singletons = [g for g, idx in order.items() if len(idx) < 2]
    if singletons:
        raise InputError(
            f"{path}: group(s) with a single student: {', '.join(map(repr, singletons))}",
            groups=singletons,
        )
    groups = tuple(
        Group(g, y[idx], x[idx], None if z is None else z[idx]) for g, idx in order.items()
    )
    return GroupedData(groups)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_observations(data: ObservationSet, path) -> Schema:
    """Write a CSV that :func:`load_observations` reads back exactly.

    Returns the schema describing the written columns.
    """
    zcols = tuple(f"z{j + 1}" for j in range(data.covariates.shape[1])) if data.has_covariates else ()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "x", "sigma", "weight", *zcols])
        for i in range(data.n):
            row = [data.y[i], data.x[i], data.sigma[i], data.weight[i]]
            if zcols:
                row.extend(data.covariates[i])
            w.writerow([_fmt(v) for v in row])
    return Schema(y="y", x="x", sigma="sigma", weight="weight", z=zcols)


def write_grouped(data: GroupedData, path) -> Schema:
    zw = data.groups[0].z.shape[1] if data.has_covariates else 0
    zcols = tuple(f"z{j + 1}" for j in range(zw))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["teacher_id", "y", "x", *zcols])
        for g in data.groups:
            for j in range(g.size):
                row = [g.teacher_id, _fmt(g.y[j]), _fmt(g.x[j])]
                if zw:
                    row.extend(_fmt(v) for v in g.z[j])
                w.writerow(row)
    return Schema(y="y", x="x", sigma=None, z=zcols, group="teacher_id")


def aggregate(grouped: GroupedData) -> ObservationSet:
    """Collapse students to one row per teacher.

    ``y`` and ``x`` become group means, ``sigma**2`` the within-group variance of
    ``x`` (divisor ``N_i - 1``) over ``N_i``, and ``weight`` the group size.
    Group-mean covariates are attached when present.
    """
    ybar = np.array([g.y.mean() for g in grouped.groups])
    xbar = np.array([g.x.mean() for g in grouped.groups])
    sizes = grouped.sizes.astype(float)
    s2 = np.array([g.x.var(ddof=1) for g in grouped.groups])
    zero = np.flatnonzero(s2 <= 0)
    if zero.size:
        ids = [grouped.groups[i].teacher_id for i in zero]
        raise InputError(
            f"zero within-group variance of x gives sigma=0 for group(s) "
            f"{', '.join(map(repr, ids[:10]))}{' ...' if len(ids) > 10 else ''}",
            groups=ids,
        )
    z = None
    if grouped.has_covariates:
        z = np.vstack([g.z.mean(axis=0) for g in grouped.groups])
    return ObservationSet(ybar, xbar, np.sqrt(s2 / sizes), sizes, z)

