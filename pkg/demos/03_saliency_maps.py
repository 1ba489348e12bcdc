"""Compute every saliency method on one image and compare the maps.

The interesting comparison is between the map for the predicted class and
the map for the runner-up class.  A method that highlights the same
pixels for both is not telling us anything class-specific.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from caselab import dataset, model, saliency

images = dataset.generate(seed=5, per_class=32)
split = dataset.split(images, (0.5, 0.25, 0.25), seed=5)
bundle, _ = model.train(split, epochs=6, learning_rate=0.05, seed=5)
confusion = model.confusion_matrix(bundle, split.validation)


def ascii_map(values, width=16):
    chars = " .:-=+*#%@"
    v = values / values.max() if values.max() > 0 else values
    step = values.shape[0] // width
    rows = []
    for r in range(0, values.shape[0], step):
        rows.append("".join(chars[int(x * (len(chars) - 1))]
                            for x in v[r, ::step]))
    return rows


image = split.test[0]
probs = model.predict(bundle, image.pixels)
order = np.argsort(-probs, kind="stable")
top1, top2 = int(order[0]), int(order[1])
print(f"true class {dataset.CLASS_NAMES[image.label]}, "
      f"predicted {dataset.CLASS_NAMES[top1]} ({probs[top1]:.3f}), "
      f"runner-up {dataset.CLASS_NAMES[top2]} ({probs[top2]:.3f})")

for name in ("gradcam", "gradcampp", "scorecam", "ablationcam", "layercam", "case"):
    fn = saliency.build_method(name, confusion=confusion)
    m1 = fn(bundle, image.pixels, top1)
    m2 = fn(bundle, image.pixels, top2)
    shared = np.intersect1d(np.argsort(-m1.values.ravel(), kind="stable")[:52],
                            np.argsort(-m2.values.ravel(), kind="stable")[:52])
    print(f"\n{name}: top-5% overlap between the two class maps "
          f"{len(shared)}/52")
    left = ascii_map(m1.values)
    right = ascii_map(m2.values)
    print(f"  {'class ' + dataset.CLASS_NAMES[top1]:20s}"
          f"class {dataset.CLASS_NAMES[top2]}")
    for a, b in zip(left, right):
        print(f"  {a:20s}{b}")
