"""Desk run on a case14 copy whose nominal operating point respects every limit.

Stock case14 has PV setpoints above Vmax and a slack with Qg below Qmin, so its
own power-flow solutions violate limits. Here the setpoints are clipped into
[Vmin, Vmax] and the generator reactive limits relaxed, then the same pipeline
as ``desk_experiment.py`` runs on the result.
"""
import argparse
from dataclasses import replace

from pittt.case_io import load_case
from pittt.evaluation import BASELINE, REFINED
from pittt.grid import GridCase
from pittt.ttt import PROFILES

from desk_experiment import run


def feasible_variant(case, q_margin=10.0):
    def clip(v, bus):
        return min(max(v, bus.v_min), bus.v_max)
    buses = [replace(b, v_setpoint=clip(b.v_setpoint, b)) if b.v_setpoint is not None else b for b in case.buses]
    gens = [replace(g, v_setpoint=clip(g.v_setpoint, case.buses[g.bus]), q_min=-q_margin, q_max=q_margin)
            for g in case.gens]
    return GridCase(case.base_mva, buses, case.branches, gens, name=case.name + "-feasible")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-train", type=int, default=1000)
    ap.add_argument("--n-test", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--profile", choices=sorted(PROFILES), default="default")
    ap.add_argument("--lambda-v", type=float, default=None, help="override the voltage penalty weight")
    ap.add_argument("--jobs", type=int, default=1)
    a = ap.parse_args()
    if a.lambda_v is not None:
        PROFILES[a.profile] = replace(PROFILES[a.profile], lambda_v=a.lambda_v)
    out = run(feasible_variant(load_case("case14")), a.n_train, a.n_test, a.seed, a.profile, 10, a.jobs)
    before, after = out.violations[BASELINE]["voltage"].mean, out.violations[REFINED]["voltage"].mean
    ratio = after / before if before else float("nan")
    print(f"voltage violation mean before {before:.3g}, after {after:.3g} (ratio {ratio:.3g})")


if __name__ == "__main__":
    main()
