# Parameter scan for the acceptance-suite synthetic graph. Not shipped as
# part of the package; run ad hoc while tuning.
import itertools
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from fairgu.graph import SbmSpec, generate_sbm, apply_deletion
from fairgu.trainer import FguConfig, aggregate
from fairgu.unlearn import DeletionSpec, sample_request, retrain_baseline
from fairgu.metrics import evaluate_predictions
from fairgu.cli import run_fgu_cell


def cell(g, cfg, spec, method):
    if method == "fgu":
        state, g_prime, _, _, _ = run_fgu_cell(g, cfg, spec)
        probs = aggregate(state, g_prime, "weights").probs
        return evaluate_predictions(g_prime, probs)
    req = sample_request(g, spec)
    g_prime, _ = apply_deletion(g, req)
    return retrain_baseline(g_prime, cfg)[1]


def scan(intra, inter, shift, dim, eta, epochs, seeds=(0, 1, 2)):
    g = generate_sbm(SbmSpec(300, intra, inter, 0.6, dim, shift, seed=11))
    rows = {}
    for r_n in (0.05, 0.1, 0.2):
        accs = {"fgu": [], "retrain": []}
        dps = {"fgu": [], "retrain": []}
        for seed in seeds:
            cfg = FguConfig(k=5, epochs=epochs, eta=eta, seed=seed)
            spec = DeletionSpec(r_n, 0.1, "uniform", seed=seed)
            for method in ("fgu", "retrain"):
                rep = cell(g, cfg, spec, method)
                accs[method].append(rep.accuracy)
                dps[method].append(rep.delta_dp)
        rows[r_n] = {m: (float(np.mean(accs[m])), float(np.mean(dps[m]))) for m in accs}
    return rows


def main():
    grid = [
        # intra, inter, shift, dim, eta, epochs
        (0.02, 0.004, 1.0, 8, 1e-3, 100),
        (0.02, 0.004, 1.5, 8, 1e-3, 100),
        (0.04, 0.008, 1.0, 8, 1e-3, 100),
        (0.02, 0.004, 1.0, 8, 1e-2, 100),
        (0.04, 0.008, 1.5, 8, 1e-2, 100),
        (0.01, 0.002, 1.5, 8, 1e-2, 100),
    ]
    for params in grid:
        t0 = time.time()
        rows = scan(*params)
        print(f"\n== intra={params[0]} inter={params[1]} shift={params[2]} "
              f"dim={params[3]} eta={params[4]} epochs={params[5]} ({time.time()-t0:.0f}s)")
        for r_n, row in rows.items():
            (fa, fd), (ra, rd) = row["fgu"], row["retrain"]
            ok4 = fd <= 0.5 * rd and fa >= ra - 0.05
            ok5 = fd <= 0.1
            print(f"  r_n={r_n:4}: retrain acc {ra:.3f} dp {rd:.3f} | "
                  f"fgu acc {fa:.3f} dp {fd:.3f} | c4={'Y' if ok4 else 'n'} c5={'Y' if ok5 else 'n'}")


if __name__ == "__main__":
    main()
