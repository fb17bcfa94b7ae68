"""Model construction, SGD training, feature/head splitting, and the
binary weight file format.

A model is an ordered list of layer descriptors plus per-layer parameter
tensors.  Splitting at position beta yields a feature extractor over the
first beta layers and a classifier head over the rest; both reuse the same
parameter arrays, so the composition identity g(h(x)) == f(x) is exact.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .engine import (
    DTYPE,
    Conv2d,
    Dense,
    Flatten,
    MaxPool,
    Norm,
    Relu,
    ShapeError,
    run_backward,
    run_forward,
    softmax_cross_entropy,
)

LAYER_KINDS = {"norm": 0, "conv": 1, "relu": 2, "maxpool": 3, "flatten": 4, "dense": 5}
KIND_CODES = {v: k for k, v in LAYER_KINDS.items()}


@dataclass(frozen=True)
class LayerSpec:
    """Descriptor for one layer; numeric `args` depend on the kind:

    norm:    (scale, shift) as floats
    conv:    (out_channels, kernel, stride, padding)
    maxpool: (size,)
    dense:   (units,)
    relu, flatten: ()
    """

    kind: str
    args: tuple = ()

    def build(self):
        if self.kind == "norm":
            return Norm(*self.args)
        if self.kind == "conv":
            return Conv2d(*self.args)
        if self.kind == "relu":
            return Relu()
        if self.kind == "maxpool":
            return MaxPool(*self.args)
        if self.kind == "flatten":
            return Flatten()
        if self.kind == "dense":
            return Dense(*self.args)
        raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture: input shape (C, H, W), ordered layers, class count."""

    input_shape: tuple
    layers: tuple
    class_count: int
    name: str = ""

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ShapeError("a model needs at least two layers")
        out = self.output_shape()
        if out != (self.class_count,):
            raise ShapeError(
                f"final layer emits {out}, expected ({self.class_count},) logits"
            )

    def layer_shapes(self):
        """Input shape of every layer position, plus the final output."""
        shapes = [tuple(self.input_shape)]
        for spec in self.layers:
            shapes.append(spec.build().out_shape(shapes[-1]))
        return shapes

    def output_shape(self):
        return self.layer_shapes()[-1]

    def depth(self):
        return len(self.layers)


@dataclass
class Parameters:
    """Per-layer weight tensors plus training provenance."""

    tensors: dict  # layer index -> {name: ndarray}
    seed: int = 0
    epochs: int = 0
    train_accuracy: float = 0.0

    def copy(self):
        return Parameters(
            tensors={i: {k: v.copy() for k, v in d.items()} for i, d in self.tensors.items()},
            seed=self.seed,
            epochs=self.epochs,
            train_accuracy=self.train_accuracy,
        )


class Network:
    """A (possibly partial) stack of layers bound to parameters.

    `offset` is the absolute index of the first layer, so records produced
    by a split segment keep model-global layer indices and mask overrides
    keyed by absolute index work unchanged.
    """

    def __init__(self, layer_specs, params, input_shape, offset=0):
        self.layer_specs = tuple(layer_specs)
        self.params = params
        self.input_shape = tuple(input_shape)
        self.offset = offset
        self.layers = [(offset + i, s.build()) for i, s in enumerate(self.layer_specs)]

    def forward(self, x, record=False):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"input shape {x.shape[1:]} does not match model input {self.input_shape}"
            )
        out, rec = run_forward(self.layers, self.params.tensors, x)
        return (out, rec) if record else out

    def backward(self, record, seed_grad, overrides=None):
        return run_backward(self.layers, self.params.tensors, record, seed_grad, overrides)

    def loss_and_input_grad(self, x, y, overrides=None):
        """Softmax-CE loss and its input gradient, with optional backward
        overrides.  Loss is per-example; gradient is with respect to x."""
        logits, rec = self.forward(x, record=True)
        loss, logit_grad = softmax_cross_entropy(logits, y)
        grad, _ = run_backward(self.layers, self.params.tensors, rec, logit_grad, overrides)
        return loss, grad, logits, rec


@dataclass
class Model:
    """A full classifier: spec + parameters, with split support."""

    spec: ModelSpec
    params: Parameters

    def __post_init__(self):
        self.net = Network(self.spec.layers, self.params, self.spec.input_shape)

    def forward(self, x, record=False):
        return self.net.forward(x, record=record)

    def loss_and_input_grad(self, x, y, overrides=None):
        return self.net.loss_and_input_grad(x, y, overrides)

    def predict(self, x):
        return self.forward(x).argmax(axis=1)

    def split(self, beta):
        return split(self.spec, self.params, beta)

    @property
    def depth(self):
        return self.spec.depth()


def split(spec: ModelSpec, params: Parameters, beta: int):
    """Split f into a beta-layer feature extractor h and a head g.

    Requires 1 <= beta <= depth - 1.  Both segments share the same
    parameter tensors, so g(h(x)) == f(x) bit-exactly.
    """
    alpha = spec.depth()
    if not 1 <= beta <= alpha - 1:
        raise ShapeError(f"split position {beta} outside [1, {alpha - 1}]")
    shapes = spec.layer_shapes()
    h = Network(spec.layers[:beta], params, spec.input_shape, offset=0)
    g = Network(spec.layers[beta:], params, shapes[beta], offset=beta)
    return h, g


# ---------------------------------------------------------------------------
# reference architectures


def smallnet(class_count=8, size=16):
    """5-weight-layer CNN: norm, conv(8), relu, pool, conv(16), relu,
    flatten, dense.  The shallower reference substitute."""
    return ModelSpec(
        input_shape=(1, size, size),
        layers=(
            LayerSpec("norm", (2.0, -1.0)),
            LayerSpec("conv", (8, 3, 1, 1)),
            LayerSpec("relu"),
            LayerSpec("maxpool", (2,)),
            LayerSpec("conv", (16, 3, 1, 1)),
            LayerSpec("relu"),
            LayerSpec("flatten"),
            LayerSpec("dense", (class_count,)),
        ),
        class_count=class_count,
        name="smallnet",
    )


def midnet(class_count=8, size=16):
    """Deeper reference: two conv blocks then a hidden dense layer."""
    return ModelSpec(
        input_shape=(1, size, size),
        layers=(
            LayerSpec("norm", (2.0, -1.0)),
            LayerSpec("conv", (8, 3, 1, 1)),
            LayerSpec("relu"),
            LayerSpec("conv", (8, 3, 1, 1)),
            LayerSpec("relu"),
            LayerSpec("maxpool", (2,)),
            LayerSpec("conv", (16, 3, 1, 1)),
            LayerSpec("relu"),
            LayerSpec("maxpool", (2,)),
            LayerSpec("flatten"),
            LayerSpec("dense", (64,)),
            LayerSpec("relu"),
            LayerSpec("dense", (class_count,)),
        ),
        class_count=class_count,
        name="midnet",
    )


ARCHITECTURES = {"smallnet": smallnet, "midnet": midnet}


# ---------------------------------------------------------------------------
# initialization and training


def init_params(spec: ModelSpec, seed: int) -> Parameters:
    """Fan-in-scaled uniform init, deterministic from seed.  Weights are
    U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    shapes = spec.layer_shapes()
    tensors = {}
    for i, lspec in enumerate(spec.layers):
        layer = lspec.build()
        p = layer.init_params(shapes[i], rng)
        if p:
            tensors[i] = p
    return Parameters(tensors=tensors, seed=seed)


class TrainingDiverged(RuntimeError):
    """SGD hit a non-finite loss; message carries epoch and batch index."""


def train_sgd(spec, params, dataset, epochs, lr, batch_size=64, seed=0):
    """Plain mini-batch SGD on softmax cross-entropy.

    Deterministic: the shuffle order is drawn from `seed` alone.  The norm
    layer has no trainable parameters, everything else is updated in place
    on a copy.  Returns new Parameters carrying the final train accuracy.
    """
    if len(dataset.images) == 0:
        raise ValueError("empty dataset")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    params = params.copy()
    model = Model(spec, params)
    rng = np.random.default_rng(seed)
    n = len(dataset.images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for bstart in range(0, n, batch_size):
            idx = order[bstart : bstart + batch_size]
            xb = dataset.images[idx]
            yb = dataset.labels[idx]
            logits, rec = model.forward(xb, record=True)
            loss, logit_grad = softmax_cross_entropy(logits, yb)
            mean_loss = float(loss.mean())
            if not np.isfinite(mean_loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {bstart // batch_size}"
                )
            _, grads = model.net.backward(rec, logit_grad / DTYPE(len(idx)))
            for li, pg in grads.items():
                for name, g in pg.items():
                    params.tensors[li][name] -= DTYPE(lr) * g
    preds = []
    for bstart in range(0, n, 256):
        preds.append(model.forward(dataset.images[bstart : bstart + 256]).argmax(axis=1))
    acc = float(np.mean(np.concatenate(preds) == dataset.labels)) if epochs > 0 else 0.0
    params.seed = seed
    params.epochs = epochs
    params.train_accuracy = acc
    return params


def train_head(spec, base_params, dataset, epochs, lr, beta, head_seed, batch_size=64):
    """Freeze the first `beta` layers at base_params and train a freshly
    initialized head on top.  Used to build victims that share h with the
    substitute exactly."""
    fresh = init_params(spec, head_seed)
    params = base_params.copy()
    for li in list(fresh.tensors):
        if li >= beta:
            params.tensors[li] = fresh.tensors[li]
    model = Model(spec, params)
    rng = np.random.default_rng(head_seed)
    n = len(dataset.images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for bstart in range(0, n, batch_size):
            idx = order[bstart : bstart + batch_size]
            logits, rec = model.forward(dataset.images[idx], record=True)
            loss, logit_grad = softmax_cross_entropy(logits, dataset.labels[idx])
            if not np.isfinite(loss.mean()):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {bstart // batch_size}"
                )
            _, grads = model.net.backward(rec, logit_grad / DTYPE(len(idx)))
            for li, pg in grads.items():
                if li < beta:
                    continue
                for name, g in pg.items():
                    params.tensors[li][name] -= DTYPE(lr) * g
    params.seed = head_seed
    params.epochs = epochs
    return params


# ---------------------------------------------------------------------------
# serialization

MAGIC = b"ILPD"
FORMAT_VERSION = 1


class ModelFileError(RuntimeError):
    """Base for model file problems."""


class BadMagic(ModelFileError):
    pass


class UnsupportedVersion(ModelFileError):
    pass


class ChecksumMismatch(ModelFileError):
    pass


class TruncatedFile(ModelFileError):
    pass


def _float_bits(v):
    return struct.unpack("<I", struct.pack("<f", v))[0]


def _bits_float(u):
    return struct.unpack("<f", struct.pack("<I", u))[0]


def _encode_args(kind, args):
    # norm stores its two floats bit-cast into u32 slots
    if kind == "norm":
        return [_float_bits(a) for a in args]
    return [int(a) for a in args]


def _decode_args(kind, raw):
    if kind == "norm":
        return tuple(_bits_float(u) for u in raw)
    return tuple(raw)


def save_model(spec: ModelSpec, params: Parameters, path):
    """Binary format: magic, version, input shape, class count, layer
    descriptors, float32 weight payload in layer order, trailing CRC-32 of
    everything before it."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<I", len(spec.input_shape))
    out += struct.pack(f"<{len(spec.input_shape)}I", *spec.input_shape)
    out += struct.pack("<I", spec.class_count)
    out += struct.pack("<I", spec.depth())
    for lspec in spec.layers:
        raw = _encode_args(lspec.kind, lspec.args)
        out += struct.pack("<II", LAYER_KINDS[lspec.kind], len(raw))
        if raw:
            out += struct.pack(f"<{len(raw)}I", *raw)
    for i in sorted(params.tensors):
        for name in sorted(params.tensors[i]):
            arr = np.ascontiguousarray(params.tensors[i][name], dtype="<f4")
            out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(out))


class _Reader:
    def __init__(self, buf, context=""):
        self.buf = buf
        self.pos = 0
        self.context = context

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"file truncated while reading {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_model(path):
    """Inverse of save_model; validates magic, version and checksum before
    constructing anything."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise BadMagic(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 8:
        raise TruncatedFile("file shorter than its header")
    # structure first so truncation is reported as such (naming the field
    # being read); the checksum gate below then only sees complete files
    r = _Reader(buf[:-4])
    r.take(4, "magic")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"format version {version}, expected {FORMAT_VERSION}")
    ndim = r.u32("input rank")
    input_shape = tuple(r.u32("input shape") for _ in range(ndim))
    class_count = r.u32("class count")
    depth = r.u32("layer count")
    layers = []
    for i in range(depth):
        code = r.u32(f"layer {i} kind")
        if code not in KIND_CODES:
            raise ModelFileError(f"unknown layer kind code {code} at layer {i}")
        kind = KIND_CODES[code]
        nargs = r.u32(f"layer {i} arg count")
        raw = [r.u32(f"layer {i} args") for _ in range(nargs)]
        layers.append(LayerSpec(kind, _decode_args(kind, raw)))
    spec = ModelSpec(input_shape=input_shape, layers=tuple(layers), class_count=class_count)
    shapes = spec.layer_shapes()
    tensors = {}
    for i, lspec in enumerate(spec.layers):
        pshapes = lspec.build().param_shapes(shapes[i])
        if not pshapes:
            continue
        tensors[i] = {}
        for name in sorted(pshapes):
            shape = pshapes[name]
            nbytes = int(np.prod(shape)) * 4
            raw = r.take(nbytes, f"layer {i} weights ({lspec.kind}.{name})")
            tensors[i][name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if r.pos != len(r.buf):
        raise ModelFileError(f"{len(r.buf) - r.pos} trailing bytes after weight payload")
    stored_crc = struct.unpack("<I", buf[-4:])[0]
    actual_crc = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumMismatch(
            f"checksum {actual_crc:#010x} does not match stored {stored_crc:#010x}"
        )
    return spec, Parameters(tensors=tensors)
