"""Case14 desk run: generate, train, refine, and print accuracy and violation tables.

    python scripts/desk_experiment.py --n-train 1000 --n-test 200 --profile default
"""
import argparse
import time
from dataclasses import replace

from pittt.case_io import load_case
from pittt.evaluation import CATEGORIES, evaluate_model
from pittt.scenarios import DEFAULT_TEST_SPEC, DEFAULT_TRAIN_SPEC, generate_dataset
from pittt.surrogate import TrainConfig, train
from pittt.ttt import PROFILES


def run(case, n_train, n_test, seed, profile, steps, jobs):
    t0 = time.perf_counter()
    records, report = generate_dataset(case, replace(DEFAULT_TRAIN_SPEC, seed=seed),
                                       replace(DEFAULT_TEST_SPEC, seed=seed + 1), n_train, n_test, jobs=jobs)
    params, curve = train(records, case, TrainConfig(seed=seed))
    cfg = replace(PROFILES[profile], steps=steps)
    out = evaluate_model(params, records, case, cfg, jobs=jobs)
    elapsed = time.perf_counter() - t0

    print(f"{case.name}: {report.produced} kept, final train MSE {curve[-1]:.3g}, {elapsed:.1f} s")
    print(f"{'method':<26}{'RMSE_P':>12}{'RMSE_Q':>12}")
    for method, m in out.metrics.items():
        print(f"{method:<26}{m.rmse_p:>12.4g}{m.rmse_q:>12.4g}")
    print(f"median squared-mismatch ratio after/before: {out.median_sq_ratio:.3g}")
    print(f"{'method':<26}" + "".join(f"{c:>14}" for c in CATEGORIES))
    for method, rep in out.violations.items():
        print(f"{method:<26}" + "".join(f"{rep[c].mean:>14.4g}" for c in CATEGORIES))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--case", default="case14")
    ap.add_argument("--n-train", type=int, default=1000)
    ap.add_argument("--n-test", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--profile", choices=sorted(PROFILES), default="default")
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--jobs", type=int, default=1)
    a = ap.parse_args()
    run(load_case(a.case), a.n_train, a.n_test, a.seed, a.profile, a.steps, a.jobs)


if __name__ == "__main__":
    main()
