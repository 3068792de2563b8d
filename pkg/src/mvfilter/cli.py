"""Command-line interface.

Subcommands compose the pipeline: ``expand`` only enumerates the model
grid, ``fit``/``diagnose`` stop after sampling/diagnostics, ``filter``
runs the complete workflow and writes the report, ``extend`` grows a
multiverse by a delta configuration, ``report`` re-renders outputs from
the cache and ``summarise-qoi`` tabulates a posterior quantity across
models.

Exit codes: 0 success, 1 configuration error, 2 partial failure (some
models unusable; the report is still written). Every flag can also be set
through an MVFILTER_* environment variable (e.g. MVFILTER_SEED).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .config import ConfigError, load_config, parse_config_delta
from .data import DataError, load_dataset
from .diagnostics import diagnose
from .multiverse import Multiverse, MultiverseError, expand, extend
from .pipeline import FilterReport, FitCache, derive_model_seed, run_filter, refilter, summarise_qoi
from .report import render_report, write_qoi_table, write_tables

log = logging.getLogger(__name__)

ENV_PREFIX = "MVFILTER_"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2


def _env_default(name: str, fallback=None):
    return os.environ.get(ENV_PREFIX + name.upper(), fallback)


def _add_common(p: argparse.ArgumentParser, need_out: bool = False):
    p.add_argument("--config", required=_env_default("config") is None,
                   default=_env_default("config"), help="run configuration (YAML)")
    p.add_argument("--out", required=need_out and _env_default("out") is None,
                   default=_env_default("out"), help="output directory")
    p.add_argument("--seed", type=int, default=_env_default("seed"), help="override sampler seed")
    p.add_argument("--jobs", type=int, default=int(_env_default("jobs", 1)),
                   help="parallel model fits")
    p.add_argument("--cache", default=_env_default("cache"),
                   help="fit cache directory (default: <out>/cache or ./mvfilter-cache)")
    p.add_argument("--format", choices=("text", "json-lines"),
                   default=_env_default("format", "text"), help="stdout format")
    p.add_argument("--delta", default=None, help="extension delta configuration (YAML)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvfilter",
        description="expand, fit and iteratively filter a multiverse of Bayesian GLMs",
    )
    sub = parser.add_subparsers(dest="command")
    for name, need_out in (
        ("expand", False), ("fit", False), ("diagnose", False), ("filter", True),
        ("extend", False), ("report", True), ("summarise-qoi", False),
    ):
        p = sub.add_parser(name)
        _add_common(p, need_out)
        if name == "summarise-qoi":
            p.add_argument("--qoi", required=True, help="parameter name, e.g. b_Trt")
        if name == "filter":
            p.add_argument("--previous", default=None,
                           help="previous report directory (enables refiltering checks)")
    return parser


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, sampler=dataclasses.replace(cfg.sampler, seed=int(args.seed)))
    mv = expand(cfg)
    if args.delta:
        raw = yaml.safe_load(Path(args.delta).read_text())
        delta_axes, delta_excl = parse_config_delta(raw)
        mv = extend(mv, delta_axes, delta_excl)
    return cfg, mv


def _cache_dir(args) -> Path:
    if args.cache:
        return Path(args.cache)
    if args.out:
        return Path(args.out) / "cache"
    return Path("mvfilter-cache")


def _emit(args, obj: dict):
    if args.format == "json-lines":
        sys.stdout.write(json.dumps(obj, sort_keys=True, default=str) + "\n")


def _print_model_table(mv: Multiverse, args):
    rows = sorted(mv.models, key=lambda m: mv.ordinal(m.model_id))
    if args.format == "json-lines":
        for m in rows:
            _emit(args, {"ordinal": mv.ordinal(m.model_id), "model_id": m.model_id, **m.to_dict()})
        return
    print(f"multiverse generation {mv.generation}: {len(rows)} models")
    for m in rows[:200]:
        print(f"  Model {mv.ordinal(m.model_id):>3}  {m.model_id}  {m.describe()}")
    if len(rows) > 200:
        print(f"  ... {len(rows) - 200} more")


def _summary_to_stdout(report: FilterReport, mv: Multiverse, args):
    if args.format == "json-lines":
        for mid in sorted(report.outcomes):
            o = report.outcomes[mid]
            _emit(args, {"model_id": mid, "ordinal": o.ordinal, "status": o.status,
                         "delta": o.delta, "se_delta": o.se_delta, "ppc": o.ppc_verdict,
                         "verdict": o.verdict, "drop_reason": o.drop_reason})
        _emit(args, {"filtered_set": sorted(report.filtered_set),
                     "labels": [mv.label(mid) for mid in report.filtered_set],
                     "status_counts": report.status_counts()})
        return
    counts = report.status_counts()
    print(f"filtered {len(report.outcomes)} models -> {len(report.filtered_set)} retained")
    print("status counts:", ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    rows = sorted(report.outcomes.values(), key=lambda o: (o.delta != o.delta, -(o.delta or 0)))
    for o in rows[:50]:
        delta = "" if o.delta != o.delta else f"delta={o.delta:9.2f} +- {o.se_delta:.2f}"
        print(f"  Model {o.ordinal:>3} [{o.status:>22}] {delta}  ppc={o.ppc_verdict or '-'} {o.drop_reason}")
    if len(rows) > 50:
        print(f"  ... {len(rows) - 50} more models: see models.csv")
    if report.filtered_set:
        print("retained:", ", ".join(mv.label(mid) for mid in sorted(
            report.filtered_set, key=lambda m: mv.ordinal(m))))


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage()
        return EXIT_CONFIG
    try:
        return _dispatch(args)
    except (ConfigError, DataError, MultiverseError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


def _dispatch(args) -> int:
    cfg, mv = _load(args)

    if args.command == "expand":
        _print_model_table(mv, args)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "multiverse.json").write_text(mv.to_json())
        return EXIT_OK

    if args.command == "extend":
        if not args.delta:
            print("extend requires --delta", file=sys.stderr)
            return EXIT_CONFIG
        _print_model_table(mv, args)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "multiverse.json").write_text(mv.to_json())
        return EXIT_OK

    data = load_dataset(cfg.data_path(), cfg.data)
    cache = _cache_dir(args)

    if args.command == "fit":
        exit_code = EXIT_OK
        store = FitCache(cache)
        for spec in mv.models:
            import dataclasses as dc

            seed = derive_model_seed(cfg.sampler.seed, spec.model_id)
            try:
                draws, key, cached = store.fetch_or_fit(spec, data, dc.replace(cfg.sampler, seed=seed))
                src = "cache" if cached else "fit"
                print(f"Model {mv.ordinal(spec.model_id):>3} {spec.model_id} [{src}] "
                      f"divergences={draws.divergence_count}")
                _emit(args, {"model_id": spec.model_id, "cache_key": key, "from_cache": cached})
            except Exception as err:
                print(f"Model {mv.ordinal(spec.model_id):>3} {spec.model_id} UNFITTABLE: {err}")
                exit_code = EXIT_PARTIAL
        return exit_code

    if args.command == "diagnose":
        exit_code = EXIT_OK
        store = FitCache(cache)
        import dataclasses as dc

        print("model_id,parameter,rhat,ess_bulk,ess_tail,divergences,verdict")
        for spec in mv.models:
            seed = derive_model_seed(cfg.sampler.seed, spec.model_id)
            try:
                draws, _, _ = store.fetch_or_fit(spec, data, dc.replace(cfg.sampler, seed=seed))
            except Exception as err:
                print(f"# {spec.model_id}: unfittable ({err})")
                exit_code = EXIT_PARTIAL
                continue
            rep = diagnose(draws, cfg.filter)
            for row in rep.rows():
                print(f"{spec.model_id},{row['parameter']},{row['rhat']:.5f},"
                      f"{row['ess_bulk']:.1f},{row['ess_tail']:.1f},{rep.divergence_count},{rep.verdict}")
        return exit_code

    if args.command in ("filter", "report"):
        previous = getattr(args, "previous", None)
        if previous:
            prev_manifest = json.loads((Path(previous) / "manifest.json").read_text())
            if prev_manifest.get("provenance", {}).get("data_hash") != data.content_hash():
                print("error: dataset differs from the previous report; comparisons are invalid",
                      file=sys.stderr)
                return EXIT_CONFIG
        report = run_filter(mv, data, cfg, cache, jobs=max(1, args.jobs))
        out = Path(args.out)
        write_tables(report, mv, out)
        qoi_rows = None
        notes = render_report(report, mv, qoi_rows, out, k_se=cfg.filter.k_se)
        _summary_to_stdout(report, mv, args)
        for note in notes:
            print(f"note: {note}")
        bad = [o for o in report.outcomes.values()
               if o.status in ("unfittable", "computation_unreliable")]
        omitted = [n for n in notes if n.startswith("plot omitted")]
        return EXIT_PARTIAL if bad or omitted else EXIT_OK

    if args.command == "summarise-qoi":
        report = run_filter(mv, data, cfg, cache, jobs=max(1, args.jobs))
        rows = summarise_qoi(report, mv, data, cache, args.qoi)
        if args.out:
            write_qoi_table(rows, args.qoi, Path(args.out))
        if args.format == "json-lines":
            for r in rows:
                _emit(args, {"model_id": r.model_id, "ordinal": r.ordinal, "status": r.status,
                             "present": r.present, **r.quantiles})
        else:
            print(f"{args.qoi}: median [50% interval] [95% interval] (ordered by median)")
            for r in rows:
                if not r.present:
                    print(f"  Model {r.ordinal:>3}: absent")
                    continue
                q = r.quantiles
                print(f"  Model {r.ordinal:>3} [{r.status:>22}]: {q['q50']:8.3f} "
                      f"[{q['q25']:8.3f}, {q['q75']:8.3f}] [{q['q2.5']:8.3f}, {q['q97.5']:8.3f}]")
        return EXIT_OK

    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
