"""Dense-tensor layer operators and their vector-Jacobian products.

Everything here works on float64 numpy arrays.  Spatial operators accept a
single image ``(C, H, W)`` or a batch ``(B, C, H, W)``; vector operators
accept ``(F,)`` or ``(B, F)``.  All public entry points reject non-finite
input, so finite-in means finite-out for every chain built from them.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeMismatch

LAYER_KINDS = ("conv2d", "relu", "maxpool2x2", "global_avg_pool", "dense", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network: a kind plus its shape parameters.

    Only the fields relevant to ``kind`` are meaningful; the rest stay None.
    """

    kind: str
    in_channels: int = None
    out_channels: int = None
    kernel_size: int = None
    stride: int = None
    padding: int = None
    in_features: int = None
    out_features: int = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.kind == "conv2d":
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError("conv2d needs positive channel counts")
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ValueError("conv2d kernel extent must be odd")
            if self.stride < 1:
                raise ValueError("conv2d stride must be >= 1")
            if self.padding < 0:
                raise ValueError("conv2d padding must be >= 0")
        if self.kind == "dense" and (self.in_features < 1 or self.out_features < 1):
            raise ValueError("dense needs positive feature counts")


def conv2d(in_channels, out_channels, kernel_size=3, stride=1, padding=1):
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel_size=kernel_size, stride=stride, padding=padding)


def relu():
    return LayerSpec("relu")


def maxpool2x2():
    return LayerSpec("maxpool2x2")


def global_avg_pool():
    return LayerSpec("global_avg_pool")


def dense(in_features, out_features):
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


def softmax_layer():
    return LayerSpec("softmax")


def weight_shapes(spec):
    """Shapes of the weight tensors a layer of this spec carries."""
    if spec.kind == "conv2d":
        k = spec.kernel_size
        return [(spec.out_channels, spec.in_channels, k, k), (spec.out_channels,)]
    if spec.kind == "dense":
        return [(spec.out_features, spec.in_features), (spec.out_features,)]
    return []


def _check_finite(op, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"{op}: non-finite input")


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


def _spatial(op, x, channels=None):
    """Canonicalize a spatial input to (B, C, H, W); return it and a flag
    saying whether the batch axis was added here."""
    x = _as_f64(x)
    if x.ndim == 3:
        x = x[None]
        added = True
    elif x.ndim == 4:
        added = False
    else:
        raise ShapeMismatch(op, "rank 3 (C,H,W) or rank 4 (B,C,H,W)", f"rank {x.ndim} {x.shape}")
    if channels is not None and x.shape[1] != channels:
        raise ShapeMismatch(op, f"{channels} input channels", f"{x.shape[1]} (shape {x.shape})")
    return x, added


def _vector(op, x, features=None):
    x = _as_f64(x)
    if x.ndim == 1:
        x = x[None]
        added = True
    elif x.ndim == 2:
        added = False
    else:
        raise ShapeMismatch(op, "rank 1 (F,) or rank 2 (B,F)", f"rank {x.ndim} {x.shape}")
    if features is not None and x.shape[1] != features:
        raise ShapeMismatch(op, f"{features} features", f"{x.shape[1]} (shape {x.shape})")
    return x, added


def _conv_geometry(spec, x):
    H, W = x.shape[2], x.shape[3]
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeMismatch("conv2d", f"input at least {k - 2 * p}x{k - 2 * p}", f"{H}x{W}")
    return H, W, k, s, p, Ho, Wo


def _conv_forward(spec, W_, b, x):
    H, W, k, s, p, Ho, Wo = _conv_geometry(spec, x)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    # Direct convolution: gather the k*k shifted views explicitly, then
    # contract once over (channel, offset).  No FFT, no im2col tricks.
    patches = np.empty((x.shape[0], spec.in_channels, k * k, Ho, Wo))
    for a in range(k):
        for bb in range(k):
            patches[:, :, a * k + bb] = xp[:, :, a:a + s * Ho:s, bb:bb + s * Wo:s]
    y = np.tensordot(W_.reshape(spec.out_channels, spec.in_channels, k * k),
                     patches, axes=([1, 2], [1, 2]))
    return y.transpose(1, 0, 2, 3) + b[None, :, None, None]


def _conv_vjp(spec, W_, x, ct):
    H, W, k, s, p, Ho, Wo = _conv_geometry(spec, x)
    gxp = np.zeros((x.shape[0], spec.in_channels, H + 2 * p, W + 2 * p))
    for a in range(k):
        for bb in range(k):
            contrib = np.tensordot(W_[:, :, a, bb], ct, axes=(0, 1)).transpose(1, 0, 2, 3)
            gxp[:, :, a:a + s * Ho:s, bb:bb + s * Wo:s] += contrib
    return gxp[:, :, p:p + H, p:p + W]


def _conv_param_vjp(spec, x, ct):
    H, W, k, s, p, Ho, Wo = _conv_geometry(spec, x)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    dW = np.zeros((spec.out_channels, spec.in_channels, k, k))
    for a in range(k):
        for bb in range(k):
            patch = xp[:, :, a:a + s * Ho:s, bb:bb + s * Wo:s]
            dW[:, :, a, bb] = np.tensordot(ct, patch, axes=([0, 2, 3], [0, 2, 3]))
    db = ct.sum(axis=(0, 2, 3))
    return [dW, db]


def _pool_windows(x):
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeMismatch("maxpool2x2", "even spatial extents", f"{H}x{W}")
    win = x.reshape(B, C, H // 2, 2, W // 2, 2)
    return np.moveaxis(win, 3, 4)  # (B, C, H/2, W/2, 2, 2)


def layer_forward(spec, weights, x):
    """Apply one layer.  ``weights`` is the list from ``weight_shapes`` order."""
    kind = spec.kind
    if kind == "conv2d":
        x, added = _spatial(kind, x, spec.in_channels)
        _check_finite(kind, x)
        y = _conv_forward(spec, weights[0], weights[1], x)
    elif kind == "relu":
        x = _as_f64(x)
        _check_finite(kind, x)
        return np.maximum(x, 0.0)
    elif kind == "maxpool2x2":
        x, added = _spatial(kind, x)
        _check_finite(kind, x)
        B, C, H, W = x.shape
        if H % 2 or W % 2:
            raise ShapeMismatch(kind, "even spatial extents", f"{H}x{W}")
        y = x.reshape(B, C, H // 2, 2, W // 2, 2).max(axis=5).max(axis=3)
    elif kind == "global_avg_pool":
        x, added = _spatial(kind, x)
        _check_finite(kind, x)
        y = x.mean(axis=(2, 3))
    elif kind == "dense":
        x, added = _vector(kind, x, spec.in_features)
        _check_finite(kind, x)
        y = x @ weights[0].T + weights[1]
    elif kind == "softmax":
        x, added = _vector(kind, x)
        _check_finite(kind, x)
        y = softmax(x)
    return y[0] if added else y


def layer_vjp(spec, weights, x, cotangent):
    """Cotangent of the layer input: d<cotangent, layer(x)> / dx."""
    kind = spec.kind
    if kind == "relu":
        x = _as_f64(x)
        ct = _as_f64(cotangent)
        _check_finite(kind, x, ct)
        if ct.shape != x.shape:
            raise ShapeMismatch(kind, f"cotangent shaped {x.shape}", f"{ct.shape}")
        return ct * (x > 0.0)

    if kind in ("conv2d", "maxpool2x2", "global_avg_pool"):
        x, added = _spatial(kind, x, spec.in_channels if kind == "conv2d" else None)
        ct = _as_f64(cotangent)
        if added:
            ct = ct[None]
        _check_finite(kind, x, ct)
        if kind == "conv2d":
            H, W, k, s, p, Ho, Wo = _conv_geometry(spec, x)
            want = (x.shape[0], spec.out_channels, Ho, Wo)
            if ct.shape != want:
                raise ShapeMismatch(kind, f"cotangent shaped {want}", f"{ct.shape}")
            dx = _conv_vjp(spec, weights[0], x, ct)
        elif kind == "maxpool2x2":
            win = _pool_windows(x)
            B, C, H2, W2 = win.shape[:4]
            if ct.shape != (B, C, H2, W2):
                raise ShapeMismatch(kind, f"cotangent shaped {(B, C, H2, W2)}", f"{ct.shape}")
            flat = win.reshape(B, C, H2, W2, 4)
            # argmax over the row-major window order, so ties route the
            # gradient to the first maximal entry in row-major order
            idx = flat.argmax(axis=4)
            mask = np.zeros_like(flat)
            np.put_along_axis(mask, idx[..., None], 1.0, axis=4)
            dwin = mask * ct[..., None]
            dwin = np.moveaxis(dwin.reshape(B, C, H2, W2, 2, 2), 4, 3)
            dx = dwin.reshape(x.shape)
        else:
            B, C, H, W = x.shape
            if ct.shape != (B, C):
                raise ShapeMismatch(kind, f"cotangent shaped {(B, C)}", f"{ct.shape}")
            dx = np.broadcast_to(ct[:, :, None, None] / (H * W), x.shape).copy()
        return dx[0] if added else dx

    if kind in ("dense", "softmax"):
        x, added = _vector(kind, x, spec.in_features if kind == "dense" else None)
        ct = _as_f64(cotangent)
        if added:
            ct = ct[None]
        _check_finite(kind, x, ct)
        if kind == "dense":
            if ct.shape != (x.shape[0], spec.out_features):
                raise ShapeMismatch(kind, f"cotangent shaped {(x.shape[0], spec.out_features)}", f"{ct.shape}")
            dx = ct @ weights[0]
        else:
            if ct.shape != x.shape:
                raise ShapeMismatch(kind, f"cotangent shaped {x.shape}", f"{ct.shape}")
            y = softmax(x)
            dx = y * (ct - (ct * y).sum(axis=1, keepdims=True))
        return dx[0] if added else dx

    raise ValueError(f"unknown layer kind {kind!r}")


def layer_param_vjp(spec, weights, x, cotangent):
    """Cotangents of the layer's weight tensors (same order as the weights)."""
    kind = spec.kind
    if kind == "conv2d":
        x, added = _spatial(kind, x, spec.in_channels)
        ct = _as_f64(cotangent)
        if added:
            ct = ct[None]
        _check_finite(kind, x, ct)
        return _conv_param_vjp(spec, x, ct)
    if kind == "dense":
        x, added = _vector(kind, x, spec.in_features)
        ct = _as_f64(cotangent)
        if added:
            ct = ct[None]
        _check_finite(kind, x, ct)
        return [ct.T @ x, ct.sum(axis=0)]
    return []


def softmax(v):
    """Numerically stable softmax over the last axis (max subtraction)."""
    v = _as_f64(v)
    _check_finite("softmax", v)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def bilinear_upsample(m, beta):
    """Upsample a 2-D map by an integer factor with bilinear interpolation.

    Output pixel centers map to source coordinate ``(i + 0.5) / beta - 0.5``,
    clamped at the borders, so every output value is a convex combination of
    the four surrounding source values and the global min/max are preserved.

    Parameters
    ----------
    m : (H, W) array
    beta : int, >= 1

    Returns
    -------
    (beta * H, beta * W) float64 array
    """
    m = _as_f64(m)
    if m.ndim != 2:
        raise ShapeMismatch("bilinear_upsample", "rank 2 (H,W)", f"rank {m.ndim} {m.shape}")
    beta = int(beta)
    if beta < 1:
        raise ValueError("bilinear_upsample: beta must be a positive integer")
    _check_finite("bilinear_upsample", m)
    H, W = m.shape

    def axis_coords(n):
        src = (np.arange(n * beta) + 0.5) / beta - 0.5
        lo = np.floor(src).astype(np.int64)
        t = src - lo
        lo0 = np.clip(lo, 0, n - 1)
        lo1 = np.clip(lo + 1, 0, n - 1)
        return lo0, lo1, t

    y0, y1, ty = axis_coords(H)
    x0, x1, tx = axis_coords(W)
    rows = m[y0, :] * (1.0 - ty)[:, None] + m[y1, :] * ty[:, None]
    return rows[:, x0] * (1.0 - tx) + rows[:, x1] * tx
