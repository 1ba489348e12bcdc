"""Mask what a method calls important and see how far confidence falls.

The top 5% of pixels by saliency are replaced with the training-set mean
pixel, the image is run through the model again, and the drop in the
predicted class's probability is recorded.  A faithful map should beat a
uniformly random one by a wide margin.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from caselab import dataset, diagnostics, model, saliency

images = dataset.generate(seed=5, per_class=32)
split = dataset.split(images, (0.5, 0.25, 0.25), seed=5)
bundle, _ = model.train(split, epochs=6, learning_rate=0.05, seed=5)
confusion = model.confusion_matrix(bundle, split.validation)
fill = dataset.mean_pixel(split.train)

methods = {name: saliency.build_method(name, confusion=confusion)
           for name in ("case", "gradcam", "_random")}
result = diagnostics.rq2_experiment(bundle, methods, split.test,
                                    fraction=0.05, fill_value=fill)

print(f"fill value {fill:.4f} (training-set mean pixel)\n")
print("method      n  mean_drop  sd      p_vs_case")
for s in result.summaries:
    tail = "--" if s.p_case_greater is None else f"{s.p_case_greater:.2e}"
    print(f"{s.method:9s} {s.n:3d}  {s.mean_drop:8.4f}  {s.sd_drop:.4f}  {tail}")

print("\np_vs_case is one-sided: small values say the contrastive map's")
print("drops are larger than that method's drops on the same images.")
