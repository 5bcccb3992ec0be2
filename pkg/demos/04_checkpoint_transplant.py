"""
Moving running statistics between checkpoints
=============================================

Train a small model on one domain, copy it, let the copy's BN statistics
drift on a shifted domain, then transplant the original statistics back.
"""

import tempfile
from pathlib import Path

import numpy as np

from bnexpand.checkpoint import bn_stats_transplant, load_checkpoint, save_checkpoint
from bnexpand.data import SyntheticDomainSpec, make_synthetic_domain_pair, split
from bnexpand.nn import TRAIN, cnn_bn
from bnexpand.training import TrainConfig, evaluate, fit

o, t = make_synthetic_domain_pair(100, 4, 16, SyntheticDomainSpec(),
                                  SyntheticDomainSpec(0.5, 0.4, 0.02, 3))
o_train, o_val, o_test = split(o)
t_train, _, _ = split(t)

net = cnn_bn(1, 16, [8, 16], 4)
fit(net, o_train, o_val, TrainConfig(max_epochs=6))

# running statistics follow whatever goes through in the train phase
drifted = net.copy()
for start in range(0, len(t_train), 32):
    drifted.forward(t_train.images[start:start + 32], TRAIN)

out = Path(tempfile.mkdtemp())
a = save_checkpoint(net, out / "origin.ckpt", {"note": "trained on O"})
b = save_checkpoint(drifted, out / "drifted.ckpt")
fixed = bn_stats_transplant(b, a)
save_checkpoint(fixed, out / "fixed.ckpt")

for name in ("origin", "drifted", "fixed"):
    model = load_checkpoint(out / f"{name}.ckpt").build_network()
    print(f"{name:>8}: O-test accuracy {evaluate(model, o_test).accuracy:.3f}")

print("transplant record:", load_checkpoint(out / "fixed.ckpt").metadata["transplants"])
print("self-transplant is a no-op:", bn_stats_transplant(a, a).to_bytes() == a.to_bytes())
print("files:", sorted(p.name for p in out.iterdir()))
