"""Second variation of the Y42-vs-Y gap at the round metric, mode by mode.

For u = 1 + d*phi_l (phi_l orthonormal) the gap behaves like
I * d^2 * f(lambda_l) / V with

    f(lam) = 2 b^2 lam / a + 2 b (2 b - 1) - g (g - 1) / 2 - P(lam) / P(0),

b = (n-2)/(n-4), g = 2n/(n-4), a = n(n-2)/4.  f is a concave quadratic in
lam with roots at l = 1 (Moebius directions) and l = 3 for n = 5, so every
higher mode makes the gap negative.  The script prints f next to the
measured quotient.

    python scripts/gap_modes.py --n 5 6 --lmax 8
"""

import argparse

from qrlab.curvature import ConformalMetric, Convention, paneitz_multipliers
from qrlab.functionals import quotient_I, y42_vs_y_gap
from qrlab.geometry import Field, basis_function, build_background


def predicted(bg, l):
    n = bg.n
    P = paneitz_multipliers(bg)
    b, g, a = (n - 2) / (n - 4), 2 * n / (n - 4), n * (n - 2) / 4
    return 2 * b * b * bg.eigs[l] / a + 2 * b * (2 * b - 1) - g * (g - 1) / 2 - P[l] / P[0]


def measured(bg, l, d):
    m = ConformalMetric(bg, Convention.POWER_N5PLUS, Field(bg, 1 + d * basis_function(bg, l).values))
    return y42_vs_y_gap(m) / (quotient_I(m) * d * d / bg.volume)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--n", type=int, nargs="+", default=[5, 6, 7])
    ap.add_argument("--lmax", type=int, default=8)
    ap.add_argument("--delta", type=float, default=1e-3)
    args = ap.parse_args()
    print("n,l,predicted,measured")
    for n in args.n:
        bg = build_background(n, None, 128, 48)
        for l in range(1, args.lmax + 1):
            print(f"{n},{l},{predicted(bg, l):.6g},{measured(bg, l, args.delta):.6g}")


if __name__ == "__main__":
    main()
