"""Train the small CNN and watch the loss fall.

A few epochs on a few hundred images is enough to get a model whose
mistakes are systematic rather than random, which is exactly what the
contrastive method feeds on.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from caselab import dataset, model

images = dataset.generate(seed=5, per_class=32)
split = dataset.split(images, (0.5, 0.25, 0.25), seed=5)

bundle, history = model.train(split, epochs=6, learning_rate=0.05, seed=5)

print("epoch   loss  train_acc  val_acc")
for h in history:
    print(f"{h.epoch:5d}  {h.loss:.3f}     {h.train_acc:.3f}    {h.val_acc:.3f}")

confusion = model.confusion_matrix(bundle, split.validation)
print("\nvalidation confusion matrix (rows = true class):")
header = "".join(f"{name[:6]:>8s}" for name in dataset.CLASS_NAMES)
print(" " * 18 + header)
for label, name in enumerate(dataset.CLASS_NAMES):
    row = "".join(f"{int(c):8d}" for c in confusion[label])
    print(f"{name:18s}{row}")

# off-diagonal mass tells us which classes the model mixes up; those
# pairs drive the contrast sets later
errors = [(int(confusion[u, v]), u, v)
          for u in range(8) for v in range(8)
          if u != v and confusion[u, v] > 0]
errors.sort(reverse=True)
print("\nmost confused pairs:")
for count, u, v in errors[:3]:
    print(f"  {dataset.CLASS_NAMES[u]} -> {dataset.CLASS_NAMES[v]}: {count}")

out = Path(__file__).resolve().parent / "weights_demo.bin"
model.save_weights(bundle, out)
print(f"\nweights written to {out} ({out.stat().st_size} bytes)")
out.unlink()
