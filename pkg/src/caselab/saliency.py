"""Attribution maps: the contrastive CASE method and five CAM baselines.

Every method follows the same recipe: take the activation A at the model's
attribution layer, weight its channels, rectify the weighted sum, then
bilinearly upsample the rectified map by ``beta`` to input resolution.  They
differ only in where the channel weights come from.  CASE additionally
projects the target-class gradient against the mean gradient of the classes
the model actually confuses with the target, removing the shared component
before pooling.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from . import model as modelmod
from .layers import bilinear_upsample, softmax

PUBLIC_METHODS = ("gradcam", "gradcampp", "scorecam", "ablationcam", "layercam", "case")
STUB_METHODS = ("_constant", "_disjoint", "_random")
DEFAULT_EPSILON = 1e-8


@dataclass
class SaliencyMap:
    values: np.ndarray  # 2-D, non-negative
    method: str
    class_index: int
    beta: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"saliency map must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("saliency map must be finite")
        if self.values.min() < 0.0:
            raise ValueError("saliency map must be non-negative")


@dataclass(frozen=True)
class ContrastSet:
    target_class: int
    classes: tuple

    def __post_init__(self):
        if self.target_class in self.classes:
            raise ValueError("contrast set must exclude the target class")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("contrast set classes must be distinct")


def contrast_set(confusion, target_class, k):
    """The k classes most often predicted when the true class is the target.

    Ties in the confusion row are broken toward the lower class index, so the
    result is deterministic even for an all-zero row.
    """
    counts = np.asarray(getattr(confusion, "counts", confusion))
    c = counts.shape[0]
    if counts.shape != (c, c):
        raise ValueError(f"confusion matrix must be square, got {counts.shape}")
    if not 0 <= target_class < c:
        raise ValueError(f"target class {target_class} out of range [0, {c})")
    if not 1 <= k <= c - 1:
        raise ValueError(f"contrast size k={k} must be in [1, {c - 1}]")
    row = counts[target_class]
    order = sorted((v for v in range(c) if v != target_class), key=lambda v: (-row[v], v))
    return ContrastSet(target_class, tuple(order[:k]))


def mean_contrast_gradient(bundle, pixels, contrast):
    """Mean over the contrast classes of the logit gradient at the attribution layer."""
    grads = [modelmod.grad_wrt_activation(bundle, pixels, v) for v in contrast.classes]
    return np.mean(grads, axis=0)


def orthogonal_projection(gamma_u, gamma_bar, epsilon=DEFAULT_EPSILON):
    """Remove from gamma_u its component along gamma_bar.

    The inner product runs over all entries of the activation-shaped arrays;
    epsilon keeps the quotient defined when gamma_bar vanishes.
    """
    gamma_u = np.asarray(gamma_u, dtype=np.float64)
    gamma_bar = np.asarray(gamma_bar, dtype=np.float64)
    if gamma_u.shape != gamma_bar.shape:
        raise ValueError(f"gradient shapes differ: {gamma_u.shape} vs {gamma_bar.shape}")
    coef = float((gamma_u * gamma_bar).sum()) / (float((gamma_bar * gamma_bar).sum()) + epsilon)
    return gamma_u - coef * gamma_bar


def pooled_weights(gamma):
    """Grad-CAM style channel weights: spatial mean of the gradient."""
    return gamma.mean(axis=(1, 2))


def weighted_activation_map(weights, activation):
    """Rectified channel-weighted sum of the activation."""
    return np.maximum(np.tensordot(weights, activation, axes=(0, 0)), 0.0)


def _finish(raw, method, class_index, beta):
    return SaliencyMap(bilinear_upsample(raw, beta), method, class_index, beta)


def grad_cam(bundle, pixels, class_index, beta=4):
    _, a = modelmod.forward_with_capture(bundle, pixels)
    gamma = modelmod.grad_wrt_activation(bundle, pixels, class_index)
    raw = weighted_activation_map(pooled_weights(gamma), a)
    return _finish(raw, "gradcam", class_index, beta)


def case_saliency(bundle, pixels, class_index, confusion, k_contrast=3, beta=4,
                  epsilon=DEFAULT_EPSILON, weighting="pooled"):
    """Contrast-projected saliency for the target class.

    Composes the four public sub-operations: pick the contrast classes from
    the confusion row, average their gradients, project the target gradient
    onto the complement of that average, then weight the activation.  With
    ``weighting="pooled"`` the projected gradient is spatially pooled into
    per-channel weights (so a vanishing contrast gradient reduces this method
    exactly to grad_cam); "elementwise" multiplies the projected gradient
    into the activation entry by entry before summing over channels.
    """
    if weighting not in ("pooled", "elementwise"):
        raise ValueError(f"unknown weighting {weighting!r}")
    _, a = modelmod.forward_with_capture(bundle, pixels)
    contrast = contrast_set(confusion, class_index, k_contrast)
    gamma_u = modelmod.grad_wrt_activation(bundle, pixels, class_index)
    gamma_bar = mean_contrast_gradient(bundle, pixels, contrast)
    projected = orthogonal_projection(gamma_u, gamma_bar, epsilon)
    if weighting == "pooled":
        raw = weighted_activation_map(pooled_weights(projected), a)
    else:
        raw = np.maximum((projected * a).sum(axis=0), 0.0)
    return _finish(raw, "case", class_index, beta)


def grad_cam_pp(bundle, pixels, class_index, beta=4, epsilon=DEFAULT_EPSILON):
    _, a = modelmod.forward_with_capture(bundle, pixels)
    g = modelmod.grad_wrt_activation(bundle, pixels, class_index)
    sum_a = a.sum(axis=(1, 2))
    alpha = g ** 2 / (2.0 * g ** 2 + sum_a[:, None, None] * g ** 3 + epsilon)
    w = (alpha * np.maximum(g, 0.0)).sum(axis=(1, 2))
    return _finish(weighted_activation_map(w, a), "gradcampp", class_index, beta)


def score_cam_masks(activation, beta):
    """Per-channel input-resolution masks: min-max normalized, upsampled.

    A constant channel has no spatial preference, so its mask is all zeros.
    """
    masks = []
    for ch in activation:
        lo, hi = float(ch.min()), float(ch.max())
        if hi > lo:
            masks.append(bilinear_upsample((ch - lo) / (hi - lo), beta))
        else:
            masks.append(np.zeros((ch.shape[0] * beta, ch.shape[1] * beta)))
    return np.stack(masks)


def score_cam(bundle, pixels, class_index, beta=4):
    pixels = np.asarray(pixels, dtype=np.float64)
    _, a = modelmod.forward_with_capture(bundle, pixels)
    masks = score_cam_masks(a, beta)
    baseline = modelmod.forward_logits(bundle, np.zeros_like(pixels))[class_index]
    scores = np.array([
        modelmod.forward_logits(bundle, pixels * mask[None])[class_index] - baseline
        for mask in masks
    ])
    w = softmax(scores)
    return _finish(weighted_activation_map(w, a), "scorecam", class_index, beta)


def ablation_cam(bundle, pixels, class_index, beta=4, epsilon=DEFAULT_EPSILON):
    logits, a = modelmod.forward_with_capture(bundle, pixels)
    base = logits[class_index]
    w = np.zeros(a.shape[0])
    for n in range(a.shape[0]):
        ablated = a.copy()
        ablated[n] = 0.0
        w[n] = (base - modelmod.head_forward(bundle, ablated)[class_index]) / (abs(base) + epsilon)
    return _finish(weighted_activation_map(w, a), "ablationcam", class_index, beta)


def layer_cam(bundle, pixels, class_index, beta=4):
    _, a = modelmod.forward_with_capture(bundle, pixels)
    g = modelmod.grad_wrt_activation(bundle, pixels, class_index)
    raw = np.maximum((np.maximum(g, 0.0) * a).sum(axis=0), 0.0)
    return _finish(raw, "layercam", class_index, beta)


def discriminative_set(gamma):
    """Activation entries whose increase strictly raises the class logit."""
    return np.asarray(gamma) > 0.0


def uniquely_discriminative_set(target_set, other_sets):
    """Entries discriminative for the target and for no other provided class."""
    target_set = np.asarray(target_set, dtype=bool)
    if not other_sets:
        return target_set.copy()
    return target_set & ~np.logical_or.reduce([np.asarray(s, dtype=bool) for s in other_sets])


# --- stub methods used by the statistical self-checks -----------------------
# They bypass the model entirely but return well-formed SaliencyMaps.

def _constant_stub(bundle, pixels, class_index, beta=4):
    side = np.asarray(pixels).shape[-1]
    return SaliencyMap(np.full((side, side), 0.5), "_constant", class_index, beta)


def _disjoint_stub(bundle, pixels, class_index, beta=4):
    """Support confined to a per-class band of rows, so different classes
    never share top-k pixels (for k up to 4 rows' worth)."""
    side = np.asarray(pixels).shape[-1]
    rows = max(1, side // max(1, bundle.class_count))
    values = np.zeros((side, side))
    start = (class_index * rows) % side
    values[start:start + rows, :] = 1.0
    return SaliencyMap(values, "_disjoint", class_index, beta)


def _random_stub(bundle, pixels, class_index, beta=4):
    """Uniform-random map, deterministic per (image, class) via a content hash."""
    pixels = np.asarray(pixels, dtype=np.float64)
    seed = zlib.crc32(pixels.tobytes()) ^ (class_index * 0x9E3779B1)
    rng = np.random.default_rng(seed & 0xFFFFFFFF)
    side = pixels.shape[-1]
    return SaliencyMap(rng.random((side, side)), "_random", class_index, beta)


def build_method(name, confusion=None, k_contrast=3, beta=4,
                 epsilon=DEFAULT_EPSILON, weighting="pooled"):
    """Bind a method name to a callable of (bundle, pixels, class_index)."""
    if name == "case":
        if confusion is None:
            raise ValueError("case needs a confusion matrix")
        return lambda bundle, pixels, cls: case_saliency(
            bundle, pixels, cls, confusion, k_contrast, beta, epsilon, weighting)
    plain = {
        "gradcam": grad_cam,
        "gradcampp": grad_cam_pp,
        "scorecam": score_cam,
        "ablationcam": ablation_cam,
        "layercam": layer_cam,
        "_constant": _constant_stub,
        "_disjoint": _disjoint_stub,
        "_random": _random_stub,
    }
    if name not in plain:
        raise ValueError(f"unknown saliency method {name!r}; expected one of {PUBLIC_METHODS}")
    fn = plain[name]
    return lambda bundle, pixels, cls: fn(bundle, pixels, cls, beta=beta)


def quantize_u8(values):
    """Min-max normalize to [0, 255] and round; a constant map becomes zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    scaled = (values - lo) / (hi - lo) * 255.0
    return np.rint(scaled).astype(np.uint8)


def write_pgm(saliency_map, path):
    """8-bit binary PGM (P5), min-max normalized."""
    values = saliency_map.values
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantize_u8(values).tobytes())


def write_map_csv(saliency_map, path):
    """Raw float64 values, one CSV row per image row, full precision."""
    with open(path, "w") as f:
        for row in saliency_map.values:
            f.write(",".join(repr(float(v)) for v in row) + "\n")
