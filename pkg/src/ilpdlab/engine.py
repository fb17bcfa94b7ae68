"""Dense float32 layer engine with recorded forward passes and an
overridable reverse-mode backward sweep.

Every layer runs on batched numpy arrays (leading batch axis).  A forward
pass produces a ForwardRecord that captures, per layer, whatever the
backward sweep needs -- in particular the binary activation masks of ReLU
and max-pool layers.  The backward sweep can substitute any of those masks,
or the loss-side logit gradient, via BackwardOverrides; with empty
overrides it is the exact reverse-mode gradient of the recorded forward.

Conventions fixed here and relied on elsewhere:
  * ReLU at exactly 0 gets mask 0.
  * Max-pool ties go to the lowest flat index inside the window.
  * No implicit broadcasting beyond scalar-times-tensor; any other shape
    mismatch raises ShapeError.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Tensor shapes do not compose for the requested operation."""


class NumericalError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class OverrideError(ValueError):
    """A backward override does not match the recorded computation."""


def require_shape(got, want, what):
    if tuple(got) != tuple(want):
        raise ShapeError(f"{what}: expected shape {tuple(want)}, got {tuple(got)}")


# ---------------------------------------------------------------------------
# elementary ops


def relu_forward(t: np.ndarray):
    """Elementwise max(t, 0) plus the binary activation mask.

    The mask is 1 exactly where t > 0; an input of exactly 0 is recorded
    as inactive.
    """
    mask = (t > 0).astype(DTYPE)
    return t * mask, mask


def softmax_cross_entropy(logits: np.ndarray, labels):
    """Cross-entropy of softmax(logits) against integer labels.

    Accepts a single logit vector with a scalar label, or a (batch, classes)
    array with a label per row.  Returns (loss, logit_grad) where
    logit_grad = probabilities - one_hot(labels); its rows sum to 0.
    """
    single = logits.ndim == 1
    z = np.atleast_2d(np.asarray(logits, dtype=DTYPE))
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite logits in softmax_cross_entropy")
    y = np.atleast_1d(np.asarray(labels))
    if y.shape[0] != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} logit rows but {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ShapeError("label out of range for logits")
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    p = expz / expz.sum(axis=1, keepdims=True)
    rows = np.arange(z.shape[0])
    loss = -np.log(p[rows, y])
    grad = p.copy()
    grad[rows, y] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv kernel ({kh}x{kw}) does not fit input {(h, w)}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow), (oh, ow)

def _col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad : pad + h, pad : pad + w]
    return xp


# ---------------------------------------------------------------------------
# layers


class Layer:
    """One step of the computation; stateless, parameters passed in."""

    kind = "?"
    has_mask = False
    relu_like = False

    def out_shape(self, in_shape):
        raise NotImplementedError

    def param_shapes(self, in_shape):
        return {}

    def init_params(self, in_shape, rng):
        return {}

    def forward(self, x, params):
        """Returns (output, cache); cache feeds backward()."""
        raise NotImplementedError

    def backward(self, gy, cache, params, mask=None):
        """Returns (input gradient, dict of parameter gradients)."""
        raise NotImplementedError


class Norm(Layer):
    """Fixed affine normalization, y = scale * x + shift.  Not trained."""

    kind = "norm"

    def __init__(self, scale=2.0, shift=-1.0):
        self.scale = float(scale)
        self.shift = float(shift)

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, params):
        return x * DTYPE(self.scale) + DTYPE(self.shift), None

    def backward(self, gy, cache, params, mask=None):
        return gy * DTYPE(self.scale), {}


class Conv2d(Layer):
    """Direct 2-D convolution (cross-correlation), stride and zero padding."""

    kind = "conv"

    def __init__(self, out_channels, kernel, stride=1, padding=0):
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv expects (C,H,W) input, got {in_shape}")
        c, h, w = in_shape
        k, s, p = self.kernel, self.stride, self.padding
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"conv kernel {k} does not fit input {in_shape}")
        return (self.out_channels, oh, ow)

    def param_shapes(self, in_shape):
        c = in_shape[0]
        return {
            "weight": (self.out_channels, c, self.kernel, self.kernel),
            "bias": (self.out_channels,),
        }

    def init_params(self, in_shape, rng):
        shapes = self.param_shapes(in_shape)
        fan_in = in_shape[0] * self.kernel * self.kernel
        bound = np.sqrt(6.0 / fan_in)
        return {
            "weight": rng.uniform(-bound, bound, shapes["weight"]).astype(DTYPE),
            "bias": np.zeros(shapes["bias"], dtype=DTYPE),
        }

    def forward(self, x, params):
        w, b = params["weight"], params["bias"]
        cols, (oh, ow) = _im2col(x, self.kernel, self.kernel, self.stride, self.padding)
        w2 = w.reshape(self.out_channels, -1)
        y = np.matmul(w2, cols) + b[:, None]
        return y.reshape(x.shape[0], self.out_channels, oh, ow), (cols, x.shape)

    def backward(self, gy, cache, params, mask=None):
        cols, x_shape = cache
        w2 = params["weight"].reshape(self.out_channels, -1)
        gy2 = gy.reshape(gy.shape[0], self.out_channels, -1)
        gw = np.einsum("nol,nkl->ok", gy2, cols).reshape(params["weight"].shape)
        gb = gy2.sum(axis=(0, 2))
        gcols = np.matmul(w2.T, gy2)
        gx = _col2im(gcols, x_shape, self.kernel, self.kernel, self.stride, self.padding)
        return gx.astype(DTYPE), {"weight": gw.astype(DTYPE), "bias": gb.astype(DTYPE)}


class Relu(Layer):
    kind = "relu"
    has_mask = True
    relu_like = True

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, params):
        out, mask = relu_forward(x)
        return out, mask

    def backward(self, gy, cache, params, mask=None):
        m = cache if mask is None else mask
        return gy * m, {}


class MaxPool(Layer):
    """Non-overlapping max pooling; window size == stride."""

    kind = "maxpool"
    has_mask = True

    def __init__(self, size=2):
        self.size = int(size)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % self.size or w % self.size:
            raise ShapeError(f"pool size {self.size} does not divide input {in_shape}")
        return (c, h // self.size, w // self.size)

    def _windows(self, x):
        n, c, h, w = x.shape
        k = self.size
        return x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, h // k, w // k, k * k
        )

    def forward(self, x, params):
        win = self._windows(x)
        # argmax picks the first maximum, i.e. the lowest flat index in the window
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        mwin = np.zeros_like(win)
        np.put_along_axis(mwin, idx[..., None], DTYPE(1.0), axis=-1)
        mask = self._unwindow(mwin, x.shape)
        return out, mask

    def _unwindow(self, win, x_shape):
        n, c, h, w = x_shape
        k = self.size
        return win.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, h, w
        )

    def backward(self, gy, cache, params, mask=None):
        m = cache if mask is None else mask
        n, c, h, w = m.shape
        k = self.size
        # route each window's upstream gradient to every masked-in position
        spread = np.broadcast_to(gy[..., None], gy.shape + (k * k,))
        gx = self._unwindow(np.ascontiguousarray(spread), m.shape) * m
        return gx, {}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, params):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, gy, cache, params, mask=None):
        return gy.reshape(cache), {}


class Dense(Layer):
    """Fully connected layer, y = x @ W + b with W of shape (in, out)."""

    kind = "dense"

    def __init__(self, units):
        self.units = int(units)

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense expects flat input, got {in_shape}")
        return (self.units,)

    def param_shapes(self, in_shape):
        return {"weight": (in_shape[0], self.units), "bias": (self.units,)}

    def init_params(self, in_shape, rng):
        fan_in = in_shape[0]
        bound = np.sqrt(6.0 / fan_in)
        return {
            "weight": rng.uniform(-bound, bound, (fan_in, self.units)).astype(DTYPE),
            "bias": np.zeros(self.units, dtype=DTYPE),
        }

    def forward(self, x, params):
        return x @ params["weight"] + params["bias"], x

    def backward(self, gy, cache, params, mask=None):
        x = cache
        gw = x.T @ gy
        gb = gy.sum(axis=0)
        return gy @ params["weight"].T, {"weight": gw, "bias": gb}


# ---------------------------------------------------------------------------
# recorded forward / overridable backward


@dataclass
class LayerTrace:
    index: int
    kind: str
    cache: object
    mask: np.ndarray | None


@dataclass
class ForwardRecord:
    """Everything the backward sweep needs about one forward pass."""

    input: np.ndarray
    output: np.ndarray
    traces: list

    @property
    def masks(self):
        return {t.index: t.mask for t in self.traces if t.mask is not None}


@dataclass
class BackwardOverrides:
    """Substitutions applied during the backward sweep.

    masks maps absolute layer index -> replacement mask (must match the
    recorded mask's shape).  logit_grad replaces the seed gradient at the
    output.  identity_from forces all-ones masks on every mask layer with
    index >= identity_from (the linear-backprop regime).
    """

    masks: dict = field(default_factory=dict)
    logit_grad: np.ndarray | None = None
    identity_from: int | None = None

    def resolve_mask(self, index, recorded, relu_like=True):
        if index in self.masks:
            m = np.asarray(self.masks[index], dtype=DTYPE)
            require_shape(m.shape, recorded.shape, f"override mask for layer {index}")
            return m
        # linear backprop straightens ReLU derivatives only; pooling keeps
        # its recorded routing
        if (relu_like and self.identity_from is not None
                and index >= self.identity_from):
            return np.ones_like(recorded)
        return None


EMPTY_OVERRIDES = BackwardOverrides()


def run_forward(layers, params, x):
    """Apply layers in order, recording per-layer caches and masks.

    `layers` is a list of (absolute_index, Layer); params maps absolute
    index -> parameter dict.
    """
    out = np.asarray(x, dtype=DTYPE)
    traces = []
    for idx, layer in layers:
        out, cache = layer.forward(out, params.get(idx, {}))
        traces.append(LayerTrace(idx, layer.kind, cache, cache if layer.has_mask else None))
    return out, ForwardRecord(input=np.asarray(x, dtype=DTYPE), output=out, traces=traces)


def run_backward(layers, params, record, seed_grad, overrides=None):
    """Reverse-mode sweep over a recorded forward pass.

    Returns (input_grad, param_grads) where param_grads maps absolute layer
    index -> dict of gradients.  With empty overrides this is the exact
    gradient of seed_grad . output with respect to the recorded input.
    """
    ov = overrides or EMPTY_OVERRIDES
    if ov.logit_grad is not None:
        seed = np.asarray(ov.logit_grad, dtype=DTYPE)
        require_shape(seed.shape, record.output.shape, "override logit gradient")
    else:
        seed = np.asarray(seed_grad, dtype=DTYPE)
        require_shape(seed.shape, record.output.shape, "seed gradient")
    if len(record.traces) != len(layers):
        raise OverrideError(
            f"record has {len(record.traces)} entries for {len(layers)} layers"
        )
    grad = seed
    param_grads = {}
    for (idx, layer), trace in zip(reversed(layers), reversed(record.traces)):
        if trace.index != idx:
            raise OverrideError(f"record entry {trace.index} does not match layer {idx}")
        mask = (ov.resolve_mask(idx, trace.mask, layer.relu_like)
                if layer.has_mask else None)
        grad, pg = layer.backward(grad, trace.cache, params.get(idx, {}), mask=mask)
        if pg:
            param_grads[idx] = pg
    return grad, param_grads


# ---------------------------------------------------------------------------
# oracle


def finite_diff_gradient(fn, x, step=1e-3):
    """Central-difference gradient of a scalar function, one coordinate at
    a time.  Accumulates in float64; this is the acceptance oracle and must
    stay independent of the backward sweep above.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64).copy()
    grad = np.zeros(x.size, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(x.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericalError(f"non-finite objective at coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(x.shape)
