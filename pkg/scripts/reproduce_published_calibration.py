#!/usr/bin/env python3
"""Reproduce the published TES calibration from its tabulated counts.

Runs the estimator and uncertainty-budget layers on the published ON/OFF
peak counts (bypassing the histogram fit) and prints the per-photon-number
efficiencies, the Klyshko cross-check and the full uncertainty budget.
"""

import numpy as np

from pnrcal.model import CountVector, HeraldPurity
from pnrcal.reports import calibrate_counts, round_to_uncertainty

ON = CountVector(np.array([5.069e6, 5.0200e4, 118.0]),
                 np.array([1.4e4, 200.0, 6.0]))
OFF = CountVector(np.array([5.103e6, 1.4600e4, 23.9]),
                  np.array([1.4e4, 150.0, 1.5]))
XI = HeraldPurity(0.98794, 7e-5)


def main():
    result = calibrate_counts(ON, OFF, XI)
    print("estimates:")
    for name in sorted(result.estimates):
        e = result.estimates[name]
        v, u = round_to_uncertainty(e.gamma * 100.0, e.u_gamma * 100.0)
        print(f"  {name:<8s} ({v} +/- {u}) %")
    v, u = round_to_uncertainty(result.combined.gamma * 100.0,
                                result.combined.u_gamma * 100.0)
    print(f"  weighted mean ({v} +/- {u}) %")

    print("\nuncertainty budget (signed contributions, %):")
    targets = sorted(result.budgets)
    header = "  " + f"{'quantity':<10s}" + "".join(f"{t:>12s}" for t in targets)
    print(header)
    names = result.inputs.names
    for i, quantity in enumerate(names):
        row = f"  {quantity:<10s}"
        for t in targets:
            row += f"{100.0 * result.budgets[t].contributions[i]:>12.2e}"
        print(row)
    row = f"  {'combined':<10s}"
    for t in targets:
        row += f"{100.0 * result.budgets[t].combined:>12.2e}"
    print(row)


if __name__ == "__main__":
    main()
