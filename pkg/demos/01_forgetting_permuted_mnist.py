"""
Forgetting on permuted MNIST, and what frozen statistics change
===============================================================

Train a ten-block MLP with batch norm on the bundled 10k MNIST digits,
then fine-tune on a pixel-permuted copy twice: once letting BN track the
new batches, once with BN pinned to the origin model's running statistics.
Takes a bit over a minute on one core.
"""

from pathlib import Path

from bnexpand.experiment import ExperimentConfig, Runner

here = Path(__file__).parent
cfg = ExperimentConfig.load(here / "configs" / "permuted_mnist.json")
runner = Runner(cfg, quiet=False)

# cell i trains on task 1; ii and vii fine-tune it on task 2
report = runner.run(["i", "ii", "vii"])

before = report.metric("i", "O").accuracy
print(f"\ntask-1 accuracy of the origin model: {before:.3f}")
for cell, label in (("ii", "live statistics"), ("vii", "frozen origin statistics")):
    o, t = report.metric(cell, "O"), report.metric(cell, "T")
    print(f"{label:>26}: task-1 {o.accuracy:.3f} ({100 * (o.accuracy - before):+.1f} pts), "
          f"task-2 {t.accuracy:.3f}")

# everything is on disk and a rerun skips finished cells
print(f"\nreport: {report.report_path}")
