"""
Analytic speedup of uniform keyframe schedules
==============================================

With a fraction s of each block skippable, a keyframe costs 1 and any other
iteration costs 1 - s, so speedup = N / (|K| + (N - |K|)(1 - s)).
"""

from frdiff.analysis import CostModel, speedup_model
from frdiff.reuse import MixingSchedule

s, N = 0.92, 50
for M in (1, 2, 3, 5, 10, 25, 50):
    print(f"M={M:3d}  speedup={speedup_model(CostModel.uniform(s, N, M)):.3f}")
print("ceiling 1/(1-s) =", 1 / (1 - s))

# iterations where the mixing weight is 0 skip the network entirely
mix = MixingSchedule(N)
for M in (2, 5):
    free = CostModel.uniform(s, N, M, mixing=mix, skip_zero_lambda=True)
    print(f"M={M} with zero-weight skipping: {speedup_model(free):.3f}")
