"""Manufactured-solution convergence table and the obstacle-free channel check.

    python scripts/convergence_study.py [--sizes 4 8 16 32 64] [--nu 1.0]
"""
import argparse

from vortopt.verification import mms_convergence, poiseuille_errors


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sizes", type=int, nargs="*", default=[4, 8, 16, 32, 64])
    ap.add_argument("--nu", type=float, default=1.0)
    args = ap.parse_args()
    rep = mms_convergence(tuple(args.sizes), args.nu)
    print(f"{'h':>10s} {'|u - uh|_H1':>14s} {'order':>6s} {'||p - ph||':>14s} {'order':>6s}")
    vo = [float("nan")] + rep.velocity_orders
    po = [float("nan")] + rep.pressure_orders
    for h, eu, ep, a, b in zip(rep.hs, rep.velocity_h1, rep.pressure_l2, vo, po):
        print(f"{h:10.5f} {eu:14.6e} {a:6.2f} {ep:14.6e} {b:6.2f}")
    eu, ep = poiseuille_errors()
    print(f"obstacle-free channel: max velocity error {eu:.2e}, max pressure error {ep:.2e}")


if __name__ == "__main__":
    main()
