"""Run the epilepsy first-pass multiverse end to end and print the result.

Equivalent to:

    mvfilter filter --config configs/epilepsy_part1.yaml --out runs/part1

but keeps everything in-process so it is easy to tweak interactively.
"""

import argparse
import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO / "src"))

from mvfilter import expand, load_config, load_dataset, run_filter, summarise_qoi
from mvfilter.report import render_report, write_qoi_table, write_tables


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(REPO / "runs" / "part1"))
    ap.add_argument("--cache", default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--jobs", type=int, default=2)
    args = ap.parse_args()

    cfg = load_config(REPO / "configs" / "epilepsy_part1.yaml")
    if args.seed is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, sampler=dataclasses.replace(cfg.sampler, seed=args.seed))
    mv = expand(cfg)
    data = load_dataset(cfg.data_path(), cfg.data)
    cache = args.cache or (Path(args.out) / "cache")

    t0 = time.time()
    report = run_filter(mv, data, cfg, cache, jobs=args.jobs)
    print(f"filtering finished in {time.time() - t0:.0f}s "
          f"({report.provenance['fresh_fits']} fresh fits, "
          f"{report.provenance['cache_hits']} cache hits)")

    write_tables(report, mv, args.out)
    qoi = summarise_qoi(report, mv, data, cache, "b_Trt")
    write_qoi_table(qoi, "b_Trt", args.out)
    render_report(report, mv, qoi, args.out, k_se=cfg.filter.k_se)

    kept = sorted(report.filtered_set, key=lambda m: mv.ordinal(m))
    print(f"retained {len(kept)} of {len(mv.models)} models:")
    for mid in kept:
        o = report.outcomes[mid]
        print(f"  {mv.label(mid):>9}  {o.description}  delta={o.delta:7.2f} +- {o.se_delta:.2f}")
    medians = {r.ordinal: r.quantiles.get("q50") for r in qoi if r.present}
    kept_ordinals = {mv.ordinal(m) for m in kept}
    kept_meds = [m for o, m in medians.items() if o in kept_ordinals]
    all_meds = list(medians.values())
    print(f"treatment-coefficient median range: all {max(all_meds) - min(all_meds):.3f}, "
          f"retained {max(kept_meds) - min(kept_meds):.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
