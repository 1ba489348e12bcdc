"""The shipped CNN: construction, training, inference, and weight persistence.

The classifier scores used everywhere downstream are pre-softmax logits;
``predict`` applies softmax only to report class probabilities.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers
from .errors import FileFormatError, NumericalError, ShapeMismatch

WEIGHTS_MAGIC = b"CASEW1\x00"
WEIGHTS_VERSION = 1

CLASS_COUNT = 8
INPUT_SHAPE = (1, 32, 32)
# conv-relu-pool twice, then a final conv-relu block whose output feeds a
# global average pool into the classifier head
SHIPPED_LAYERS = (
    layers.conv2d(1, 16, 3, 1, 1),
    layers.relu(),
    layers.maxpool2x2(),
    layers.conv2d(16, 32, 3, 1, 1),
    layers.relu(),
    layers.maxpool2x2(),
    layers.conv2d(32, 32, 3, 1, 1),
    layers.relu(),
    layers.global_avg_pool(),
    layers.dense(32, CLASS_COUNT),
)
# default attribution point: the relu after the last convolution (32x8x8)
ATTRIBUTION_LAYER = 7


@dataclass
class ModelBundle:
    """A layer list plus its named weight tensors.

    Weight names are ``layer{i}.weight`` / ``layer{i}.bias`` for each
    parameterized layer i, in layer order.
    """

    layer_specs: tuple
    weights: dict
    attribution_layer: int = ATTRIBUTION_LAYER
    class_count: int = CLASS_COUNT
    input_shape: tuple = INPUT_SHAPE

    def layer_weights(self, i):
        spec = self.layer_specs[i]
        if spec.kind == "conv2d" or spec.kind == "dense":
            return [self.weights[f"layer{i}.weight"], self.weights[f"layer{i}.bias"]]
        return []

    def validate(self):
        if not 0 <= self.attribution_layer < len(self.layer_specs):
            raise ValueError(f"attribution layer {self.attribution_layer} out of range")
        for i, spec in enumerate(self.layer_specs):
            for j, shape in enumerate(layers.weight_shapes(spec)):
                name = f"layer{i}.{'weight' if j == 0 else 'bias'}"
                if name not in self.weights:
                    raise ValueError(f"missing weight tensor {name}")
                if self.weights[name].shape != shape:
                    raise ShapeMismatch(name, shape, self.weights[name].shape)
        return self


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float


def build_model(seed, layer_specs=SHIPPED_LAYERS, attribution_layer=ATTRIBUTION_LAYER,
                class_count=CLASS_COUNT, input_shape=INPUT_SHAPE):
    """Seeded He-normal initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    weights = {}
    for i, spec in enumerate(layer_specs):
        shapes = layers.weight_shapes(spec)
        if not shapes:
            continue
        w_shape, b_shape = shapes
        fan_in = int(np.prod(w_shape[1:]))
        weights[f"layer{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w_shape)
        weights[f"layer{i}.bias"] = np.zeros(b_shape)
    return ModelBundle(tuple(layer_specs), weights, attribution_layer,
                       class_count, tuple(input_shape)).validate()


def _run_layers(bundle, x, start, stop, record_inputs=False):
    inputs = [] if record_inputs else None
    for i in range(start, stop):
        if record_inputs:
            inputs.append(x)
        x = layers.layer_forward(bundle.layer_specs[i], bundle.layer_weights(i), x)
    return (x, inputs) if record_inputs else x


def forward_with_capture(bundle, pixels):
    """Run the whole network, returning (logits, attribution activation A)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape != bundle.input_shape:
        raise ShapeMismatch("forward", f"input shaped {bundle.input_shape}", f"{pixels.shape}")
    a = _run_layers(bundle, pixels, 0, bundle.attribution_layer + 1)
    if a.ndim != 3:
        raise ShapeMismatch("attribution capture", "a rank-3 activation", f"rank {a.ndim} {a.shape}")
    logits = _run_layers(bundle, a, bundle.attribution_layer + 1, len(bundle.layer_specs))
    return logits, a


def forward_logits(bundle, pixels):
    return forward_with_capture(bundle, pixels)[0]


def predict(bundle, pixels):
    """Class probabilities for one image."""
    return layers.softmax(forward_logits(bundle, pixels))


def head_forward(bundle, activation):
    """Re-run only the layers above the attribution point on a given A."""
    return _run_layers(bundle, np.asarray(activation, dtype=np.float64),
                       bundle.attribution_layer + 1, len(bundle.layer_specs))


def grad_wrt_activation(bundle, pixels, class_u):
    """Gradient of the class-u logit with respect to the attribution activation."""
    logits, a = forward_with_capture(bundle, pixels)
    if not 0 <= class_u < bundle.class_count:
        raise ValueError(f"class index {class_u} out of range [0, {bundle.class_count})")
    _, inputs = _run_layers(bundle, a, bundle.attribution_layer + 1,
                            len(bundle.layer_specs), record_inputs=True)
    ct = np.zeros(bundle.class_count)
    ct[class_u] = 1.0
    for i in range(len(bundle.layer_specs) - 1, bundle.attribution_layer, -1):
        ct = layers.layer_vjp(bundle.layer_specs[i], bundle.layer_weights(i),
                              inputs[i - bundle.attribution_layer - 1], ct)
    return ct


def batch_logits(bundle, batch, chunk=256):
    """Logits for a (B, C, H, W) stack of images, evaluated in chunks."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1:] != bundle.input_shape:
        raise ShapeMismatch("forward", f"batch shaped (B,)+{bundle.input_shape}", f"{batch.shape}")
    if len(batch) == 0:
        return np.zeros((0, bundle.class_count))
    return np.concatenate([
        _run_layers(bundle, batch[lo:lo + chunk], 0, len(bundle.layer_specs))
        for lo in range(0, len(batch), chunk)
    ])


def _cross_entropy_and_grad(logits, labels):
    """Mean softmax cross-entropy over the batch and its logit gradient."""
    probs = layers.softmax(logits)
    n = logits.shape[0]
    picked = probs[np.arange(n), labels]
    loss = -np.mean(np.log(np.maximum(picked, 1e-300)))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _accuracy(bundle, images, labels):
    if len(images) == 0:
        return float("nan")
    logits = batch_logits(bundle, images)
    return float(np.mean(logits.argmax(axis=1) == labels))


def train(split, epochs, learning_rate, seed):
    """Plain mini-batch SGD on softmax cross-entropy.

    Deterministic for a fixed seed: the same generator drives initialization
    and every epoch's shuffle.  ``epochs == 0`` returns the seeded
    initialization untouched with an empty history.

    Returns (bundle, history) where history has one EpochStats per epoch.
    """
    rng = np.random.default_rng(seed)
    bundle = build_model(seed)
    x_train = np.stack([im.pixels for im in split.train])
    y_train = np.array([im.label for im in split.train])
    x_val = np.stack([im.pixels for im in split.validation]) if split.validation else np.zeros((0,) + INPUT_SHAPE)
    y_val = np.array([im.label for im in split.validation], dtype=np.int64)

    n = len(x_train)
    batch_size = 32
    specs = bundle.layer_specs
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        # any numerical failure inside the epoch, from the loss, from an
        # updated weight, or from an overflowing activation deeper in a
        # layer, is reported as divergence at this epoch
        try:
            for lo in range(0, n, batch_size):
                idx = order[lo:lo + batch_size]
                xb, yb = x_train[idx], y_train[idx]
                acts = [xb]
                for i, spec in enumerate(specs):
                    acts.append(layers.layer_forward(spec, bundle.layer_weights(i), acts[-1]))
                loss, ct = _cross_entropy_and_grad(acts[-1], yb)
                if not np.isfinite(loss):
                    raise NumericalError("non-finite loss")
                epoch_loss += loss * len(idx)
                for i in range(len(specs) - 1, -1, -1):
                    grads = layers.layer_param_vjp(specs[i], bundle.layer_weights(i), acts[i], ct)
                    if i > 0:
                        ct = layers.layer_vjp(specs[i], bundle.layer_weights(i), acts[i], ct)
                    for j, g in enumerate(grads):
                        name = f"layer{i}.{'weight' if j == 0 else 'bias'}"
                        bundle.weights[name] = bundle.weights[name] - learning_rate * g
                if not all(np.all(np.isfinite(w)) for w in bundle.weights.values()):
                    raise NumericalError("non-finite weights after update")
            stats = EpochStats(epoch, float(epoch_loss / n),
                               _accuracy(bundle, x_train, y_train),
                               _accuracy(bundle, x_val, y_val))
        except NumericalError as e:
            raise NumericalError(f"training diverged at epoch {epoch}: {e}") from None
        history.append(stats)
    return bundle, history


def confusion_matrix(bundle, images):
    """Counts[u, v] = images with true label u predicted as v."""
    counts = np.zeros((bundle.class_count, bundle.class_count), dtype=np.int64)
    if not images:
        return counts
    logits = batch_logits(bundle, np.stack([im.pixels for im in images]))
    pred = logits.argmax(axis=1)
    for im, v in zip(images, pred):
        counts[im.label, v] += 1
    return counts


def save_weights(bundle, path):
    """Named-tensor container; float64 little-endian payload, bit-exact."""
    out = bytearray()
    out += WEIGHTS_MAGIC
    out += struct.pack("<I", WEIGHTS_VERSION)
    out += struct.pack("<I", len(bundle.weights))
    for name, tensor in bundle.weights.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", tensor.ndim)
        for d in tensor.shape:
            out += struct.pack("<I", d)
        out += np.ascontiguousarray(tensor, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


class _Reader:
    """Cursor over bytes that raises FileFormatError with the failing offset."""

    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FileFormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_weights(path, attribution_layer=ATTRIBUTION_LAYER):
    """Parse a weights file back into a ModelBundle for the shipped net."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    magic = r.take(len(WEIGHTS_MAGIC), "magic")
    if magic != WEIGHTS_MAGIC:
        raise FileFormatError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}", 0)
    version = r.u32("version")
    if version != WEIGHTS_VERSION:
        raise FileFormatError(f"unsupported weights version {version}", r.pos - 4)
    count = r.u32("tensor count")
    weights = {}
    for _ in range(count):
        name_len = r.u16("name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        rank = r.u8("rank")
        shape = tuple(r.u32(f"dim of {name}") for _ in range(rank))
        size = int(np.prod(shape)) if shape else 1
        raw = r.take(8 * size, f"data of {name}")
        weights[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise FileFormatError(f"{len(data) - r.pos} trailing bytes after last tensor", r.pos)
    return ModelBundle(tuple(SHIPPED_LAYERS), weights, attribution_layer).validate()
