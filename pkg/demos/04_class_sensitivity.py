"""Does a method draw different maps for different classes?

For every correctly classified test image we compare the map for the
predicted class with the map for the runner-up, score the overlap of
their top pixels, and test whether the median overlap sits below one
half.  Lower agreement means more class-sensitive explanations.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from caselab import dataset, diagnostics, model, saliency

images = dataset.generate(seed=5, per_class=32)
split = dataset.split(images, (0.5, 0.25, 0.25), seed=5)
bundle, _ = model.train(split, epochs=6, learning_rate=0.05, seed=5)
confusion = model.confusion_matrix(bundle, split.validation)

print("method      n  median  W        p        reject")
for name in ("gradcam", "layercam", "case"):
    fn = saliency.build_method(name, confusion=confusion)
    res = diagnostics.rq1_experiment(bundle, fn, split.test, fraction=0.05)
    median = float(np.median([s.agreement for s in res.samples]))
    t = res.test
    print(f"{name:9s} {t.n_effective:3d}  {median:.3f}  {t.statistic:7.1f}  "
          f"{t.p_value:.2e}  {t.reject_at_05}")

print("\nA rejected null here means the method's two class maps genuinely")
print("diverge on most images instead of pointing at the same evidence.")
