"""Count how many channels at the attribution layer actually fire.

A channel is active on an image when its spatial mean activation clears
a small threshold.  If most channels are active for every class, the
projection step has a rich shared basis to subtract; if only a handful
are, class-specific and shared evidence are already disentangled and
there is less for the contrast to remove.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from caselab import dataset, diagnostics, model
from caselab.stats import histogram

images = dataset.generate(seed=5, per_class=32)
split = dataset.split(images, (0.5, 0.25, 0.25), seed=5)
bundle, _ = model.train(split, epochs=6, learning_rate=0.05, seed=5)

result = diagnostics.sparsity_experiment(bundle, split.test, tau=0.001)

print(f"threshold tau = {result.tau}, 32 channels total\n")
print("class              mean active channels")
for label, mean in result.per_class_mean.items():
    bar = "#" * int(round(mean))
    print(f"{dataset.CLASS_NAMES[label]:18s} {mean:5.2f}  {bar}")

counts = [active for _, _, active in result.per_image]
lowers, freq = histogram([c / 32 for c in counts], bin_width=0.125)
print("\ndistribution over images (4-channel bins):")
for lo, f in zip(lowers, freq):
    print(f"  {int(lo * 32):2d}-{int(lo * 32) + 3:2d}: {'*' * int(f)}")
