"""
Where the BN output variance goes
=================================

With stored statistics that match the incoming data, a BN channel outputs
variance gamma^2.  With mismatched statistics the output variance scales
with the input variance, and stacking such layers compounds the error.
"""

import numpy as np

from bnexpand.metrics import bn_variance_probe, stacked_bn_probe_network
from bnexpand.nn import BatchNorm, Network, StatsMode

rng = np.random.default_rng(0)
x = rng.standard_normal((1024, 16))

bn = BatchNorm(16, mode=StatsMode.FROZEN_EXTERNAL)
bn.gamma.data[:] = 3.0
rep = bn_variance_probe(Network([bn]), x)
print("matched stats, gamma=3:", np.round([r.measured_var for r in rep.rows[:4]], 2), "...")

# stored variance 0.25 but data variance 1 and then 4
bn.running_var = np.full(16, 0.25, dtype=np.float32)
for scale in (1, 2):
    rep = bn_variance_probe(Network([bn]), scale * x)
    print(f"mismatched, input sd {scale}: mean output var {rep.layer_mean('0.bn'):.1f}")

# depth: a stack of frozen layers that each expect variance 0.6
for frozen_var in (1.0, 0.6):
    rep = bn_variance_probe(stacked_bn_probe_network(16, 6, frozen_var), x)
    means = [rep.layer_mean(l) for l in rep.layers()]
    print(f"stored var {frozen_var}: per-layer mean variance", np.round(means, 2))

print()
print(rep.to_csv().splitlines()[0])
