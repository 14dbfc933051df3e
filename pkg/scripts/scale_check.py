"""Base-case Newton-Raphson on the larger bundled grids, with timing."""
import argparse
import time

from pittt.case_io import load_case
from pittt.grid import build_ybus, nominal_condition
from pittt.pf import compute_mismatch, newton_raphson


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("cases", nargs="*", default=["case14", "case118", "case300", "case1354pegase"])
    args = ap.parse_args()
    print(f"{'case':<16}{'buses':>7}{'iters':>7}{'max |mismatch|':>16}{'ms':>9}")
    for name in args.cases:
        case = load_case(name)
        ybus = build_ybus(case)
        cond = nominal_condition(case)
        t0 = time.perf_counter()
        res = newton_raphson(case, cond, ybus=ybus)
        ms = (time.perf_counter() - t0) * 1e3
        worst = compute_mismatch(res.state, cond, ybus, case).max_abs()
        flag = "" if res.converged else "  (not converged)"
        print(f"{name:<16}{case.n:>7}{res.iterations:>7}{worst:>16.2e}{ms:>9.1f}{flag}")


if __name__ == "__main__":
    main()
