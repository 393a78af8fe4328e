"""Overlay obstacle polylines from run directories as an SVG.

    python scripts/plot_shapes.py runs/curl_dF runs/detgrad_dF -o shapes.svg

Draws the initial and final polyline of each run (initial dashed).
"""
import argparse
import csv
from pathlib import Path

import numpy as np

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]


def polylines(run_dir: Path):
    by_iter = {}
    with open(run_dir / "polylines.csv", newline="") as fh:
        rows = csv.reader(fh)
        next(rows)
        for it, x, y in rows:
            by_iter.setdefault(int(it), []).append((float(x), float(y)))
    first, last = min(by_iter), max(by_iter)
    return np.array(by_iter[first]), np.array(by_iter[last])


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("runs", nargs="+", type=Path)
    ap.add_argument("-o", "--output", type=Path, default=Path("shapes.svg"))
    args = ap.parse_args()
    shapes = [(r.name, *polylines(r)) for r in args.runs]
    pts = np.concatenate([np.concatenate([a, b]) for _, a, b in shapes])
    lo, hi = pts.min(axis=0) - 0.02, pts.max(axis=0) + 0.02
    size = 500
    scale = size / float(np.max(hi - lo))

    def path(p, color, dashed):
        xy = " ".join(f"{(x - lo[0]) * scale:.1f},{(hi[1] - y) * scale:.1f}" for x, y in np.vstack([p, p[:1]]))
        dash = ' stroke-dasharray="4,3"' if dashed else ""
        return f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{xy}"/>'

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * len(shapes)}" '
             f'font-family="sans-serif" font-size="12">', f'<rect width="100%" height="100%" fill="white"/>']
    for i, (name, first, last) in enumerate(shapes):
        c = COLORS[i % len(COLORS)]
        parts += [path(first, c, True), path(last, c, False),
                  f'<text x="10" y="{size + 15 + 20 * i}" fill="{c}">{name}</text>']
    parts.append("</svg>")
    args.output.write_text("\n".join(parts) + "\n")
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
