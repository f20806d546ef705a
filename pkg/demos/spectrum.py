"""
Power spectra of fast samplers
==============================

Radially averaged power of the 2-D FFT, per ring of integer frequency
radius. The deficit of a method is log10 of baseline power over method power
in the top quartile of rings below Nyquist.
"""

import numpy as np

from frdiff.analysis import psd, spectral_comparison
from frdiff.network import build_toy_network
from frdiff.reuse import MixingSchedule
from frdiff.schedule import NoiseSchedule

# white noise has a flat spectrum
curve = psd(np.random.default_rng(0).standard_normal((64, 8, 8)))
print("white noise log power per ring:", np.round(curve.log_power, 2))

net = build_toy_network("toy_dit", width=16, depth=2, seed=0)
comp = spectral_comparison(net, NoiseSchedule.linear(), N=20, M=5, n_samples=16, mixing=MixingSchedule(20))
for k, v in comp.deficits.items():
    print(f"{k:8s} mean deficit {v.mean():+.3f}")
print(comp.summary())
