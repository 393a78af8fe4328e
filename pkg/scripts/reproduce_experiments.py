"""Run the shipped presets and print a summary table.

    python scripts/reproduce_experiments.py [--out runs] [--only curl_dF detgrad_dF] [--with-sweep]

curl_dF and detgrad_dF run first because the mixed sweep compares against
their final shapes.
"""
import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from vortopt.cli import parse_config, run_experiment, run_sweep

ROOT = Path(__file__).resolve().parents[1]
ORDER = ["curl_dF", "detgrad_dF", "curl_aL", "detgrad_aL"]
REFERENCE = {"curl_dF": (-1.85, 0.12), "detgrad_dF": (-1.30, 0.03), "curl_aL": (-10.47, 0.58)}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs")
    ap.add_argument("--only", nargs="*", default=ORDER)
    ap.add_argument("--with-sweep", action="store_true", help="also run the ten mixed configurations")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--max-iter", type=int, default=None, help="override max_iter of every preset")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    out = Path(args.out)
    rows = []
    for name in args.only:
        spec = parse_config(ROOT / "configs" / f"{name}.ini", {"max_iter": args.max_iter})
        spec = replace(spec, out_dir=out / name)
        code = run_experiment(spec)
        summary = json.loads((spec.out_dir / "summary.json").read_text())
        rows.append((name, code, summary))
    if args.with_sweep:
        spec = parse_config(ROOT / "configs" / "mixed_dF.ini", {"max_iter": args.max_iter})
        compare = {"curl": out / "curl_dF" / "final_polyline.csv", "detgrad": out / "detgrad_dF" / "final_polyline.csv"}
        run_sweep(replace(spec, out_dir=out / "mixed_dF", compare=compare), args.jobs)
        print((out / "mixed_dF" / "hausdorff_trend.csv").read_text())

    print(f"{'run':12s} {'exit':>4s} {'iters':>5s} {'objective %':>12s} {'volume %':>9s}   reference (obj %, vol %)  stop")
    for name, code, s in rows:
        ref = REFERENCE.get(name)
        ref_text = f"{ref[0]:+.2f}, {ref[1]:+.2f}" if ref else "-"
        print(f"{name:12s} {code:4d} {s['iterations']:5d} {s['objective_change_percent']:+12.2f} "
              f"{s['volume_change_percent']:+9.3f}   {ref_text:24s} {s['stop_reason']}")


if __name__ == "__main__":
    main()
