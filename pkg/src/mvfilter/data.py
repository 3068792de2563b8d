"""Datasets: delimited-text ingestion, grouping factors, standardisation."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DataSettings


class DataError(ValueError):
    """Malformed or inconsistent data; the message names column and row."""


@dataclass
class Dataset:
    """A rectangular dataset with a response, covariates and grouping factors.

    Grouping factors are stored as dense 0-based integer codes with the
    original level labels kept for reporting. A factor whose number of
    levels equals ``n_obs`` acts as the per-observation factor.
    """

    n_obs: int
    columns: dict[str, np.ndarray]
    response: str
    group_codes: dict[str, np.ndarray] = field(default_factory=dict)
    group_levels: dict[str, list] = field(default_factory=dict)
    standardised: dict[str, tuple[float, float]] = field(default_factory=dict)
    source: str = ""

    def __post_init__(self):
        for name, col in self.columns.items():
            if len(col) != self.n_obs:
                raise DataError(f"column {name!r} has length {len(col)} != n_obs {self.n_obs}")
        for name, codes in self.group_codes.items():
            levels = self.group_levels[name]
            if codes.min(initial=0) < 0 or (len(codes) and codes.max() >= len(levels)):
                raise DataError(f"grouping factor {name!r}: codes not dense in 0..{len(levels) - 1}")

    @property
    def y(self) -> np.ndarray:
        return self.columns[self.response]

    def n_levels(self, factor: str) -> int:
        return len(self.group_levels[factor])

    def is_observation_factor(self, factor: str) -> bool:
        return self.n_levels(factor) == self.n_obs

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise DataError(f"column {name!r} not present in dataset")

    def check_count_response(self) -> None:
        y = self.y
        if np.any(y < 0) or np.any(y != np.round(y)):
            bad = int(np.argmax((y < 0) | (y != np.round(y))))
            raise DataError(f"response {self.response!r} must be a non-negative integer count (row {bad + 1})")

    def drop_row(self, i: int) -> "Dataset":
        """Dataset without row ``i`` (0-based); grouping codes are re-densified."""
        keep = np.ones(self.n_obs, bool)
        keep[i] = False
        columns = {k: v[keep] for k, v in self.columns.items()}
        group_codes, group_levels = {}, {}
        for name, codes in self.group_codes.items():
            sub = codes[keep]
            kept_levels = np.unique(sub)
            remap = {old: new for new, old in enumerate(kept_levels)}
            group_codes[name] = np.array([remap[c] for c in sub], dtype=np.int64)
            group_levels[name] = [self.group_levels[name][c] for c in kept_levels]
        return Dataset(
            n_obs=self.n_obs - 1,
            columns=columns,
            response=self.response,
            group_codes=group_codes,
            group_levels=group_levels,
            standardised=dict(self.standardised),
            source=f"{self.source}[-{i}]",
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.columns):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.columns[name], dtype=np.float64).tobytes())
        for name in sorted(self.group_codes):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.group_codes[name], dtype=np.int64).tobytes())
        h.update(self.response.encode())
        return h.hexdigest()[:16]


def _parse_numeric(name: str, values: list[str]) -> np.ndarray:
    out = np.empty(len(values))
    for i, v in enumerate(values):
        try:
            out[i] = float(v)
        except ValueError:
            raise DataError(f"column {name!r}, row {i + 1}: cannot parse {v!r} as a number")
        if not np.isfinite(out[i]):
            raise DataError(f"column {name!r}, row {i + 1}: non-finite value")
    return out


def _encode_factor(name: str, values: list[str]) -> tuple[np.ndarray, list]:
    # numeric-looking labels sort numerically so codes follow 1..G conventions
    try:
        keys = {v: float(v) for v in set(values)}
        levels = sorted(keys, key=keys.get)
    except ValueError:
        levels = sorted(set(values))
    index = {lvl: i for i, lvl in enumerate(levels)}
    codes = np.array([index[v] for v in values], dtype=np.int64)
    return codes, levels


def load_dataset(path: str | Path, settings: DataSettings) -> Dataset:
    """Load a delimited text file with a header row per the config roles."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    with open(path, newline="") as f:
        reader = csv.reader(f, delimiter=settings.separator)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        rows = [row for row in reader if row]
    header = [h.strip() for h in header]
    for row_i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}, row {row_i + 2}: expected {len(header)} fields, got {len(row)}")
    raw = {name: [row[j].strip() for row in rows] for j, name in enumerate(header)}

    if settings.response not in raw:
        raise DataError(f"response column {settings.response!r} not found in {path}")
    for g in settings.grouping_factors:
        if g not in raw:
            raise DataError(f"grouping factor column {g!r} not found in {path}")

    group_codes, group_levels = {}, {}
    for g in settings.grouping_factors:
        group_codes[g], group_levels[g] = _encode_factor(g, raw[g])

    columns = {}
    for name, values in raw.items():
        if name in settings.grouping_factors:
            continue
        columns[name] = _parse_numeric(name, values)

    standardised = {}
    for name in settings.standardise:
        if name not in columns:
            raise DataError(f"standardise: column {name!r} not found")
        col = columns[name]
        mu, sd = float(col.mean()), float(col.std(ddof=1))
        if sd == 0:
            raise DataError(f"standardise: column {name!r} is constant")
        columns[name] = (col - mu) / sd
        standardised[name] = (mu, sd)

    return Dataset(
        n_obs=len(rows),
        columns=columns,
        response=settings.response,
        group_codes=group_codes,
        group_levels=group_levels,
        standardised=standardised,
        source=str(path),
    )
