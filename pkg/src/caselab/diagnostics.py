"""The two statistical diagnostics and the channel-sparsity probe.

The agreement question: on images the model classifies correctly, do the
top-ranked and runner-up classes get genuinely different explanations?  Each
image contributes the top-5% feature agreement between its two maps, and a
one-sided Wilcoxon signed-rank test asks whether the median sits below 0.5.

The fidelity question: does deleting a method's top pixels actually hurt the
model's confidence more than deleting another method's?  Per-image softmax
confidence drops are compared with a one-sided paired t-test.

All experiments key their records by image index and reduce in index order,
so results are identical no matter how the per-image work is scheduled.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model as modelmod
from .stats import (DegenerateSampleError, StatTestResult, histogram,
                    paired_t_one_sided_greater, student_t_cdf,
                    wilcoxon_one_sided_less)


@dataclass
class AgreementSample:
    image_index: int
    top1_class: int
    top2_class: int
    agreement: float

    def __post_init__(self):
        if self.top1_class == self.top2_class:
            raise ValueError("top-1 and top-2 classes must differ")
        if not 0.0 <= self.agreement <= 1.0:
            raise ValueError(f"agreement {self.agreement} outside [0, 1]")


@dataclass
class FidelityRecord:
    image_index: int
    method: str
    confidence_before: float
    confidence_after: float
    drop: float = None

    def __post_init__(self):
        if self.drop is None:
            self.drop = self.confidence_before - self.confidence_after


@dataclass
class Rq1Result:
    method: str
    samples: list  # AgreementSample, ascending image index
    test: StatTestResult


@dataclass
class Rq2MethodSummary:
    method: str
    n: int
    mean_drop: float
    sd_drop: float
    p_case_greater: float  # None for the case row itself
    p_baseline_greater: float
    degenerate: bool = False


@dataclass
class Rq2Result:
    records: list  # FidelityRecord, method-major then ascending image index
    summaries: list  # Rq2MethodSummary per method


@dataclass
class SparsityResult:
    per_image: list  # (image_index, true_class, active_channels)
    per_class_mean: dict  # class -> mean count; classes w/o correct images absent
    tau: float


def top_k_indices(values, fraction):
    """Flat indices of the ceil(fraction * size) largest entries.

    Ordered by descending value; ties resolve to row-major pixel order.
    """
    values = np.asarray(values, dtype=np.float64)
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside (0, 1]")
    k = math.ceil(fraction * values.size)
    flat = values.ravel()
    order = np.argsort(-flat, kind="stable")
    return order[:k]


def feature_agreement(map_a, map_b, fraction=0.05):
    """|top_k(a) & top_k(b)| / k for two maps of identical shape."""
    a = np.asarray(map_a, dtype=np.float64)
    b = np.asarray(map_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"maps must share a shape, got {a.shape} and {b.shape}")
    ka = top_k_indices(a, fraction)
    kb = top_k_indices(b, fraction)
    return float(np.intersect1d(ka, kb).size) / ka.size


def ablate_and_drop(bundle, pixels, saliency_map, fraction, fill_value,
                    image_index=-1):
    """Mask the map's top pixels with a fill value; report the confidence drop.

    The drop is measured on the class the unmasked model predicts, as
    softmax confidence before minus after.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    probs = modelmod.predict(bundle, pixels)
    cls = int(probs.argmax())
    before = float(probs[cls])
    idx = top_k_indices(saliency_map.values, fraction)
    masked = pixels.copy()
    masked.reshape(masked.shape[0], -1)[:, idx] = fill_value
    after = float(modelmod.predict(bundle, masked)[cls])
    return FidelityRecord(image_index, saliency_map.method, before, after)


def _top_two(probs):
    order = np.argsort(-probs, kind="stable")
    return int(order[0]), int(order[1])


def correctly_predicted(bundle, images, indices=None):
    """(index, image, top1, top2) for images whose top-1 prediction is correct."""
    if indices is None:
        indices = range(len(images))
    kept = []
    for idx, im in zip(indices, images):
        top1, top2 = _top_two(modelmod.predict(bundle, im.pixels))
        if top1 == im.label:
            kept.append((idx, im, top1, top2))
    kept.sort(key=lambda t: t[0])
    return kept


def _map_ordered(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def rq1_experiment(bundle, method_fn, images, fraction=0.05, indices=None,
                   threads=1, method_name=""):
    """Top-1 vs top-2 map agreement on correctly predicted images.

    ``method_fn(bundle, pixels, class_index) -> SaliencyMap``.  Raises if no
    image is correctly predicted.  Samples come back in ascending image-index
    order regardless of input order or scheduling.
    """
    kept = correctly_predicted(bundle, images, indices)
    if not kept:
        raise ValueError("no correctly predicted images; nothing to score")
    name = [method_name]

    def one(item):
        idx, im, top1, top2 = item
        map1 = method_fn(bundle, im.pixels, top1)
        map2 = method_fn(bundle, im.pixels, top2)
        name[0] = name[0] or map1.method
        return AgreementSample(idx, top1, top2,
                               feature_agreement(map1.values, map2.values, fraction))

    samples = _map_ordered(one, kept, threads)
    test = wilcoxon_one_sided_less([s.agreement for s in samples], threshold=0.5)
    return Rq1Result(name[0], samples, test)


def rq2_experiment(bundle, methods, images, fraction=0.05, fill_value=0.0,
                   indices=None, threads=1):
    """Per-method confidence drops plus one-sided t-tests against "case".

    ``methods`` maps name -> method_fn and must contain "case".  Each method
    sees the same correctly predicted images, ablated at the same fraction
    with the same fill.  A method whose drops are identical to case's is a
    degenerate pairing: its row is flagged and carries no p-value.
    """
    if "case" not in methods:
        raise ValueError('rq2 needs a "case" entry to compare against')
    kept = correctly_predicted(bundle, images, indices)
    if not kept:
        raise ValueError("no correctly predicted images; nothing to score")

    records = []
    drops = {}
    for name, fn in methods.items():
        def one(item, fn=fn):
            idx, im, top1, _ = item
            smap = fn(bundle, im.pixels, top1)
            return ablate_and_drop(bundle, im.pixels, smap, fraction, fill_value, idx)
        method_records = _map_ordered(one, kept, threads)
        records.extend(method_records)
        drops[name] = np.array([r.drop for r in method_records])

    summaries = []
    for name in methods:
        d = drops[name]
        mean = float(d.mean())
        sd = float(d.std(ddof=1)) if d.size > 1 else 0.0
        if name == "case":
            summaries.append(Rq2MethodSummary(name, d.size, mean, sd, None, None))
            continue
        try:
            test = paired_t_one_sided_greater(drops["case"], d)
            summaries.append(Rq2MethodSummary(name, d.size, mean, sd,
                                              test.p_value,
                                              1.0 - student_t_cdf(-test.statistic, d.size - 1)))
        except DegenerateSampleError:
            summaries.append(Rq2MethodSummary(name, d.size, mean, sd, None, None,
                                              degenerate=True))
    return Rq2Result(records, summaries)


def channel_activity(activation, tau=0.001):
    """Spatial means per channel and how many exceed the activity threshold."""
    activation = np.asarray(activation, dtype=np.float64)
    if activation.ndim != 3:
        raise ValueError(f"activation must be rank 3, got shape {activation.shape}")
    means = activation.mean(axis=(1, 2))
    return means, int(np.count_nonzero(means > tau))


def sparsity_experiment(bundle, images, tau=0.001, indices=None, threads=1):
    """Active-channel counts on correctly predicted images, averaged per class.

    A class with no correctly predicted images is reported as missing, not
    as zero.
    """
    kept = correctly_predicted(bundle, images, indices)

    def one(item):
        idx, im, _, _ = item
        _, a = modelmod.forward_with_capture(bundle, im.pixels)
        _, active = channel_activity(a, tau)
        return (idx, im.label, active)

    per_image = _map_ordered(one, kept, threads)
    per_class = {}
    for _, label, active in per_image:
        per_class.setdefault(label, []).append(active)
    per_class_mean = {label: float(np.mean(counts))
                      for label, counts in sorted(per_class.items())}
    return SparsityResult(per_image, per_class_mean, tau)


# --- file emission ----------------------------------------------------------

def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(float(x))  # float() strips numpy scalar types from repr
    return str(x)


def write_csv(path, header, rows, timestamp=None):
    with open(path, "w") as f:
        if timestamp is not None:
            f.write(f"# generated {timestamp}\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(x) for x in row) + "\n")


def write_rq1_samples_csv(path, result, timestamp=None):
    write_csv(path, ("image_index", "top1", "top2", "agreement"),
              [(s.image_index, s.top1_class, s.top2_class, s.agreement)
               for s in result.samples], timestamp)


def write_rq1_summary_csv(path, results, timestamp=None):
    write_csv(path, ("method", "n", "W_statistic", "p_value", "reject"),
              [(name, r.test.n_effective, r.test.statistic, r.test.p_value,
                int(r.test.reject_at_05)) for name, r in results.items()], timestamp)


def write_agreement_hist_csv(path, result, bin_width=0.05, timestamp=None):
    lowers, counts = histogram([s.agreement for s in result.samples], bin_width)
    write_csv(path, ("bin_lower", "count"),
              [(format(float(x), ".6g"), int(c)) for x, c in zip(lowers, counts)], timestamp)


def write_rq2_drops_csv(path, result, timestamp=None):
    write_csv(path, ("image_index", "method", "before", "after", "drop"),
              [(r.image_index, r.method, r.confidence_before, r.confidence_after, r.drop)
               for r in result.records], timestamp)


def write_rq2_summary_csv(path, result, timestamp=None):
    write_csv(path, ("method", "n", "mean", "sd", "p_vs_case"),
              [(s.method, s.n, s.mean_drop, s.sd_drop,
                "degenerate" if s.degenerate else s.p_case_greater)
               for s in result.summaries], timestamp)


def write_sparsity_csv(path, result, timestamp=None):
    write_csv(path, ("class", "mean_active_channels"),
              [(label, mean) for label, mean in result.per_class_mean.items()], timestamp)


def write_sparsity_per_image_csv(path, result, timestamp=None):
    write_csv(path, ("image_index", "true_class", "active_channels"),
              result.per_image, timestamp)


def rq1_report_payload(results, fraction):
    return {
        "diagnostic": "rq1_agreement",
        "fraction": fraction,
        "threshold": 0.5,
        "methods": [
            {"method": name, "n": r.test.n_effective,
             "W_statistic": r.test.statistic, "p_value": r.test.p_value,
             "reject_at_05": r.test.reject_at_05,
             "median_agreement": float(np.median([s.agreement for s in r.samples]))}
            for name, r in results.items()
        ],
    }


def rq2_report_payload(result, fraction, fill):
    return {
        "diagnostic": "rq2_fidelity",
        "fraction": fraction,
        "fill": fill,
        "methods": [
            {"method": s.method, "n": s.n, "mean_drop": s.mean_drop,
             "sd_drop": s.sd_drop, "p_case_greater": s.p_case_greater,
             "p_baseline_greater": s.p_baseline_greater,
             "degenerate": s.degenerate}
            for s in result.summaries
        ],
    }


def write_json_report(path, payload, timestamp=None):
    if timestamp is not None:
        payload = dict(payload, generated_at=timestamp)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
