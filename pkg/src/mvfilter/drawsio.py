"""Columnar text persistence of posterior draws.

One file per fit: a header row of parameter names (sampler statistics as
trailing columns, per the common MCMC-CSV convention), one row per
iteration, and comment lines prefixed ``#`` carrying the schema version,
seed, per-chain markers and the stats column names. Externally produced
draws in the same layout can be ingested with the same reader.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from .sampler import STAT_NAMES, Draws

DRAWS_SCHEMA_VERSION = 1


class DrawsFormatError(ValueError):
    """Malformed draws file."""


def write_draws(path: str | Path, draws: Draws) -> None:
    path = Path(path)
    cols = list(draws.param_names) + list(STAT_NAMES)
    with open(path, "w") as f:
        f.write(f"# mvfilter_draws_version: {DRAWS_SCHEMA_VERSION}\n")
        f.write(f"# seed: {draws.seed}\n")
        f.write(f"# chains: {draws.n_chains}\n")
        f.write(f"# meta: {json.dumps(draws.meta, sort_keys=True)}\n")
        f.write(f"# stats_columns: {','.join(STAT_NAMES)}\n")
        f.write(",".join(cols) + "\n")
        for c in range(draws.n_chains):
            f.write(f"# chain: {c}\n")
            block = np.column_stack(
                [draws.params[c]] + [draws.stats[name][c][:, None] for name in STAT_NAMES]
            )
            np.savetxt(f, block, fmt="%.17g", delimiter=",")


def read_draws(path: str | Path) -> Draws:
    path = Path(path)
    meta: dict = {}
    seed = 0
    stats_cols: list[str] = list(STAT_NAMES)
    header: list[str] | None = None
    chain_lines: list[list[str]] = []
    current: list[str] | None = None
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    key, _, value = body.partition(":")
                    key, value = key.strip(), value.strip()
                    if key == "seed":
                        seed = int(value)
                    elif key == "meta":
                        meta = json.loads(value)
                    elif key == "stats_columns":
                        stats_cols = [c.strip() for c in value.split(",") if c.strip()]
                    elif key == "chain":
                        current = []
                        chain_lines.append(current)
                continue
            if header is None:
                header = [c.strip() for c in line.split(",")]
                continue
            if current is None:
                # no chain marker: treat the whole body as one chain
                current = []
                chain_lines.append(current)
            current.append(line)
    if header is None or not chain_lines:
        raise DrawsFormatError(f"{path}: no draws found")
    width = len(header)
    param_names = [c for c in header if c not in stats_cols]
    lengths = {len(rows) for rows in chain_lines}
    if len(lengths) != 1:
        raise DrawsFormatError(f"{path}: chains have unequal lengths {sorted(lengths)}")
    blocks = []
    for rows in chain_lines:
        block = np.loadtxt(io.StringIO("\n".join(rows)), delimiter=",", ndmin=2)
        if block.shape[1] != width:
            raise DrawsFormatError(f"{path}: row width {block.shape[1]} != header width {width}")
        blocks.append(block)
    cube = np.stack(blocks)  # (chains, iters, width)
    col_of = {name: j for j, name in enumerate(header)}
    params = cube[:, :, [col_of[n] for n in param_names]]
    stats = {name: cube[:, :, col_of[name]] for name in stats_cols if name in col_of}
    for name in STAT_NAMES:
        if name not in stats:
            stats[name] = np.zeros(cube.shape[:2])
    return Draws(param_names=param_names, params=params, stats=stats, seed=seed, meta=meta)
