"""Survival datasets with proxy-role covariates, CSV ingestion and time grids."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Raised when an input table fails validation."""


def _frozen(arr, ndim):
    out = np.array(arr, dtype=float)
    if ndim == 2 and out.ndim == 1:
        out = out.reshape(-1, 1) if out.size else out.reshape(len(out), 0)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SurvivalDataset:
    """Right-censored time-to-event data for a point treatment.

    ``time`` holds the observed time ``min(T, C)``, ``event`` is 1 when the
    failure was observed. Covariates are split by role: ``x`` measured common
    causes, ``z`` treatment-confounding proxies, ``w`` outcome-confounding
    proxies. Arrays are read-only.
    """

    time: np.ndarray
    event: np.ndarray
    treat: np.ndarray
    x: np.ndarray
    z: np.ndarray
    w: np.ndarray
    x_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()
    w_names: tuple[str, ...] = ()

    def __post_init__(self):
        time = _frozen(self.time, 1)
        n = time.shape[0]
        event = np.asarray(self.event).astype(int)
        treat = np.asarray(self.treat).astype(int)
        for arr in (event, treat):
            arr.setflags(write=False)
        x = _frozen(self.x, 2) if np.size(self.x) else np.zeros((n, 0))
        z = _frozen(self.z, 2)
        w = _frozen(self.w, 2)
        x.setflags(write=False)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", event)
        object.__setattr__(self, "treat", treat)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "w", w)

        for name, arr in (("event", event), ("treat", treat), ("x", x), ("z", z), ("w", w)):
            if arr.shape[0] != n:
                raise DataError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if n == 0:
            raise DataError("dataset is empty")
        if not np.all(np.isfinite(time)) or np.any(time < 0):
            raise DataError("times must be finite and nonnegative")
        if not set(np.unique(event)) <= {0, 1} or not set(np.unique(treat)) <= {0, 1}:
            raise DataError("event and treat must be 0/1")
        if z.shape[1] < 1 or w.shape[1] < 1:
            raise DataError("z and w need at least one column each")
        for name, arr in (("x", x), ("z", z), ("w", w)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains missing or non-finite values")

        for attr, arr, prefix in (("x_names", x, "x"), ("z_names", z, "z"), ("w_names", w, "w")):
            names = tuple(getattr(self, attr))
            if not names:
                names = tuple(f"{prefix}{j + 1}" for j in range(arr.shape[1]))
            if len(names) != arr.shape[1]:
                raise DataError(f"{attr} has {len(names)} entries for {arr.shape[1]} columns")
            object.__setattr__(self, attr, names)

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def n_treated(self) -> int:
        return int(self.treat.sum())

    def subset(self, idx) -> "SurvivalDataset":
        """Rows ``idx`` (indices or boolean mask), e.g. for bootstrap resampling."""
        return SurvivalDataset(
            self.time[idx], self.event[idx], self.treat[idx],
            self.x[idx], self.z[idx], self.w[idx],
            self.x_names, self.z_names, self.w_names,
        )


@dataclass(frozen=True)
class RoleSpec:
    """Column-name mapping from a CSV table to dataset roles."""

    time_col: str
    event_col: str
    treat_col: str
    z_cols: tuple[str, ...]
    w_cols: tuple[str, ...]
    x_cols: tuple[str, ...] = ()

    def __post_init__(self):
        for attr in ("x_cols", "z_cols", "w_cols"):
            val = getattr(self, attr)
            object.__setattr__(self, attr, (val,) if isinstance(val, str) else tuple(val))
        groups = [set(self.x_cols), set(self.z_cols), set(self.w_cols),
                  {self.time_col}, {self.event_col}, {self.treat_col}]
        seen: set[str] = set()
        for g in groups:
            if seen & g:
                raise DataError(f"column(s) {sorted(seen & g)} assigned to more than one role")
            seen |= g
        if not self.z_cols or not self.w_cols:
            raise DataError("at least one z and one w column are required")

    @classmethod
    def from_mapping(cls, m: dict) -> "RoleSpec":
        """Build from the JSON role document (keys time, event, treat, x, z, w)."""
        allowed = {"time", "event", "treat", "x", "z", "w"}
        unknown = set(m) - allowed
        if unknown:
            raise DataError(f"unknown role keys: {sorted(unknown)}")
        missing = {"time", "event", "treat", "z", "w"} - set(m)
        if missing:
            raise DataError(f"missing role keys: {sorted(missing)}")
        return cls(m["time"], m["event"], m["treat"], m["z"], m["w"], m.get("x", ()))

    @classmethod
    def from_json(cls, path) -> "RoleSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(json.load(fh))

    def to_mapping(self) -> dict:
        return {"time": self.time_col, "event": self.event_col, "treat": self.treat_col,
                "x": list(self.x_cols), "z": list(self.z_cols), "w": list(self.w_cols)}


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing evaluation times; ``tau`` is the last point."""

    points: np.ndarray = field()

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).ravel()
        if pts.size == 0:
            raise DataError("time grid is empty")
        if np.any(pts < 0) or not np.all(np.isfinite(pts)):
            raise DataError("time grid points must be finite and nonnegative")
        if np.any(np.diff(pts) <= 0):
            raise DataError("time grid must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def tau(self) -> float:
        return float(self.points[-1])

    def __len__(self):
        return self.points.size

    def truncate(self, upper: float, inclusive: bool = False) -> "TimeGrid":
        keep = self.points <= upper if inclusive else self.points < upper
        return TimeGrid(self.points[keep])


def _parse_float(cell: str, row: int, col: str) -> float:
    if not cell:
        raise DataError(f"row {row}, column {col!r}: missing value")
    try:
        val = float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: non-numeric value {cell!r}") from None
    if math.isnan(val):
        raise DataError(f"row {row}, column {col!r}: missing value")
    return val


def load_dataset(csv_source, role_spec: RoleSpec) -> SurvivalDataset:
    """Read a header-row CSV into a validated :class:`SurvivalDataset`.

    ``csv_source`` is a path or an open text stream. Rows are numbered from 1
    (the first data row) in error messages. Row order is preserved.
    """
    if isinstance(csv_source, (str, os.PathLike)):
        with open(csv_source, newline="", encoding="utf-8") as fh:
            return load_dataset(fh, role_spec)

    reader = csv.reader(csv_source)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("CSV is empty (no header row)") from None
    index = {name: j for j, name in enumerate(header)}
    wanted = [role_spec.time_col, role_spec.event_col, role_spec.treat_col,
              *role_spec.x_cols, *role_spec.z_cols, *role_spec.w_cols]
    for col in wanted:
        if col not in index:
            raise DataError(f"column {col!r} not found in CSV header")

    rows = []
    for r, line in enumerate(reader, start=1):
        if not line or all(not c.strip() for c in line):
            continue
        if len(line) != len(header):
            raise DataError(f"row {r}: expected {len(header)} fields, got {len(line)}")
        rows.append([_parse_float(line[index[c]].strip(), r, c) for c in wanted])
    if not rows:
        raise DataError("CSV has no data rows")

    table = np.array(rows)
    time, event, treat = table[:, 0], table[:, 1], table[:, 2]
    bad = np.flatnonzero(~np.isfinite(time) | (time < 0))
    if bad.size:
        raise DataError(f"row {bad[0] + 1}, column {role_spec.time_col!r}: "
                        "time must be finite and >= 0")
    for arr, col in ((event, role_spec.event_col), (treat, role_spec.treat_col)):
        bad = np.flatnonzero((arr != 0) & (arr != 1))
        if bad.size:
            raise DataError(f"row {bad[0] + 1}, column {col!r}: expected 0 or 1, got {arr[bad[0]]:g}")

    px, pz = len(role_spec.x_cols), len(role_spec.z_cols)
    cov = table[:, 3:]
    return SurvivalDataset(
        time, event, treat,
        cov[:, :px], cov[:, px:px + pz], cov[:, px + pz:],
        role_spec.x_cols, role_spec.z_cols, role_spec.w_cols,
    )


def write_csv(data: SurvivalDataset, dest, time_col="time", event_col="event",
              treat_col="treat") -> RoleSpec:
    """Write ``data`` as CSV and return the role spec that reads it back."""
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            return write_csv(data, fh, time_col, event_col, treat_col)
    roles = RoleSpec(time_col, event_col, treat_col, data.z_names, data.w_names, data.x_names)
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow([time_col, event_col, treat_col, *data.x_names, *data.z_names, *data.w_names])
    for i in range(data.n):
        writer.writerow([repr(float(data.time[i])), int(data.event[i]), int(data.treat[i]),
                         *(repr(float(v)) for v in data.x[i]),
                         *(repr(float(v)) for v in data.z[i]),
                         *(repr(float(v)) for v in data.w[i])])
    return roles


def event_time_grid(data: SurvivalDataset, restrict_quantile: float = 0.95) -> TimeGrid:
    """Distinct observed event times at or below a quantile of observed times."""
    if not 0 < restrict_quantile <= 1:
        raise ValueError("restrict_quantile must lie in (0, 1]")
    cutoff = np.quantile(data.time, restrict_quantile)
    ev = np.unique(data.time[(data.event == 1) & (data.time <= cutoff)])
    if ev.size == 0:
        raise DataError("no events in data")
    return TimeGrid(ev)


def dataset_from_arrays(time: Sequence[float], event: Iterable[int], treat: Iterable[int],
                        z, w, x=None) -> SurvivalDataset:
    """Convenience constructor accepting 1-d covariate arrays."""
    n = len(time)
    x = np.zeros((n, 0)) if x is None else x
    return SurvivalDataset(np.asarray(time), np.asarray(list(event)), np.asarray(list(treat)),
                           np.asarray(x), np.asarray(z), np.asarray(w))


def read_text_csv(text: str, role_spec: RoleSpec) -> SurvivalDataset:
    return load_dataset(io.StringIO(text), role_spec)
