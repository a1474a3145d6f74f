"""Default scenario: a slowly diffusing plume watched by 20 binary sensors.

Runs a handful of Monte Carlo repetitions of both filters and prints the RMSE
trajectory every 10 estimator steps.  With the default diffusivity the field
barely moves in 20 minutes, so the interesting output is how little the bits
correct a poor initial guess, and how close the two filters stay.

    python3 demos/default_run.py [runs]
"""

import sys

from mhmap import experiments as ex

runs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
cfg = ex.ExperimentConfig(filter="both", runs=runs)
res = ex.monte_carlo(cfg)

steps = res.steps("fast")
print(f"{'time [s]':>9} {'standard':>10} {'fast':>10}")
for i in range(0, steps.size, 10):
    t = (steps[i] + 1) * cfg.est_dt
    print(f"{t:9.0f} {res.rmse('standard')[i]:10.3f} {res.rmse('fast')[i]:10.3f}")
print(f"average RMSE: standard {res.average_rmse('standard'):.3f}, fast {res.average_rmse('fast'):.3f}")
