"""Per-step wall-clock cost of both filters on the default scenario."""

from mhmap import experiments as ex

rows = ex.bench(ex.ExperimentConfig(), runs=5)
for r in rows:
    print(f"{r.filter:9s} {1e3 * r.per_step_optimization_s:8.3f} ms/step optimization, "
          f"{1e3 * r.per_step_total_s:8.3f} ms/step total ({100 * r.fraction:.1f}% optimization)")
s, f = rows
print(f"speed-up of the optimization step: {s.per_step_optimization_s / f.per_step_optimization_s:.1f}x")
