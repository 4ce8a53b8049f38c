"""Four-branch 2.5D network: three patch branches plus the atlas prior.

Each patch branch (axial, coronal, sagittal) runs on a 32x32 patch::

    conv3x3(32) relu conv3x3(32) relu maxpool2
    conv3x3(64) relu conv3x3(64) relu maxpool2
    flatten (64*8*8) -> fc 180 relu

The three 180-vectors and, when enabled, the 15 atlas probabilities are
concatenated and passed through fc 540 relu, fc 270 relu and a 15-way
softmax classifier.  The prior branch has no hidden layers of its own.
"""

from __future__ import annotations

import copy
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CorruptCheckpoint, IoFailure, ShapeMismatch, VersionMismatch
from .nifti_io import N_CLASSES

BRANCHES = ("axial", "coronal", "sagittal")
PATCH_SIZE = 32
CONV_FILTERS = (32, 32, 64, 64)
BRANCH_UNITS = 180
FUSION_UNITS = (540, 270)

CHECKPOINT_MAGIC = b"SCKT"
CHECKPOINT_VERSION = 1
_META_PREFIX = "meta."


def layer_shapes(use_atlas_branch: bool = True) -> list:
    """``(name, weight_shape, bias_shape)`` for every layer, in parameter order."""
    shapes = []
    for branch in BRANCHES:
        channels = 1
        for k, filters in enumerate(CONV_FILTERS, start=1):
            shapes.append((f"{branch}.conv{k}", (filters, channels, 3, 3), (filters,)))
            channels = filters
        side = PATCH_SIZE // 4
        shapes.append((f"{branch}.fc", (channels * side * side, BRANCH_UNITS), (BRANCH_UNITS,)))
    width = len(BRANCHES) * BRANCH_UNITS + (N_CLASSES if use_atlas_branch else 0)
    for units in FUSION_UNITS:
        shapes.append((f"fusion.fc{units}", (width, units), (units,)))
        width = units
    shapes.append(("classifier", (width, N_CLASSES), (N_CLASSES,)))
    return shapes


@dataclass(eq=False)
class ModelParams:
    layers: list
    use_atlas_branch: bool = True
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {layer.name: layer for layer in self.layers}
        if len(self._index) != len(self.layers):
            raise ValueError("duplicate layer names")

    def __getitem__(self, name) -> T.LayerParams:
        return self._index[name]

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def parameter_count(self) -> int:
        return sum(t.values.size for layer in self.layers for t in layer.tensors)

    def named_arrays(self):
        for layer in self.layers:
            yield layer.name + ".weights", layer.weights.values
            yield layer.name + ".bias", layer.bias.values

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def copy(self, dtype=None) -> "ModelParams":
        """Deep copy of the parameters (optimizer state included)."""
        layers = []
        for layer in self.layers:
            w = layer.weights.values.astype(dtype or layer.weights.dtype, copy=True)
            b = layer.bias.values.astype(dtype or layer.bias.dtype, copy=True)
            layers.append(T.LayerParams(
                layer.name, T.Tensor(w), T.Tensor(b),
                adam_m=[m.copy() for m in layer.adam_m],
                adam_v=[v.copy() for v in layer.adam_v],
                step_count=layer.step_count,
            ))
        return ModelParams(layers, self.use_atlas_branch, copy.deepcopy(self.metadata))


def build_model(seed: int, use_atlas_branch: bool = True, dtype=np.float32) -> ModelParams:
    """Initialize weights uniformly in +-sqrt(6 / fan_in); biases start at zero."""
    rng = np.random.default_rng(seed)
    layers = []
    for name, wshape, bshape in layer_shapes(use_atlas_branch):
        fan_in = int(np.prod(wshape[1:])) if len(wshape) == 4 else wshape[0]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=wshape).astype(dtype)
        layers.append(T.LayerParams(name, T.Tensor(w), T.Tensor(np.zeros(bshape, dtype))))
    return ModelParams(layers, use_atlas_branch)


def _as_tensor(x, dtype):
    if isinstance(x, T.Tensor):
        return x
    return T.Tensor(np.asarray(x, dtype=dtype))


def branch_features(params: ModelParams, patch: T.Tensor, branch: str) -> T.Tensor:
    """180-unit representation of one view; ``patch`` has shape (B, 1, 32, 32)."""
    h = patch
    for k in range(1, len(CONV_FILTERS) + 1):
        layer = params[f"{branch}.conv{k}"]
        h = T.relu(T.conv2d(h, layer.weights, layer.bias))
        if k % 2 == 0:
            h = T.maxpool2(h)
    fc = params[f"{branch}.fc"]
    return T.relu(T.dense(T.flatten(h), fc.weights, fc.bias))


def logits(params: ModelParams, patches, priors=None) -> T.Tensor:
    """Pre-softmax scores, shape (B, 15).

    ``patches`` has shape (B, 3, 32, 32) with views ordered axial, coronal,
    sagittal; ``priors`` has shape (B, 15) and is ignored when the atlas
    branch is disabled.
    """
    dtype = params.dtype
    patches = _as_tensor(patches, dtype)
    if patches.values.ndim != 4 or patches.shape[1:] != (len(BRANCHES), PATCH_SIZE, PATCH_SIZE):
        raise ShapeMismatch(f"patches must have shape (B, 3, 32, 32), got {patches.shape}")
    views = T.split(patches, [1] * len(BRANCHES), axis=1)
    features = [branch_features(params, v, b) for v, b in zip(views, BRANCHES)]
    if params.use_atlas_branch:
        if priors is None:
            raise ShapeMismatch("model uses the atlas branch but no priors were given")
        priors = _as_tensor(priors, dtype)
        if priors.shape != (patches.shape[0], N_CLASSES):
            raise ShapeMismatch(f"priors must have shape ({patches.shape[0]}, 15), got {priors.shape}")
        features.append(priors)
    h = T.concat(features, axis=1)
    for units in FUSION_UNITS:
        layer = params[f"fusion.fc{units}"]
        h = T.relu(T.dense(h, layer.weights, layer.bias))
    out = params["classifier"]
    return T.dense(h, out.weights, out.bias)


def forward(params: ModelParams, patches, priors=None) -> np.ndarray:
    """Class probabilities, shape (B, 15), rows summing to one."""
    return T.softmax(logits(params, patches, priors).values)


def predict(params: ModelParams, patches, priors=None, batch_size: int = 128) -> np.ndarray:
    """Forward in batches; returns probabilities for every row."""
    n = len(patches)
    out = np.empty((n, N_CLASSES))
    for s in range(0, n, batch_size):
        out[s:s + batch_size] = forward(params, patches[s:s + batch_size],
                                        None if priors is None else priors[s:s + batch_size])
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    entries = [(name, np.asarray(values)) for name, values in params.named_arrays()]
    for key in sorted(params.metadata):
        entries.append((_META_PREFIX + key, np.asarray([params.metadata[key]])))
    chunks = [CHECKPOINT_MAGIC, struct.pack("<IBI", CHECKPOINT_VERSION, int(params.use_atlas_branch),
                                            len(entries))]
    for name, values in entries:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{values.ndim}I", values.ndim, *values.shape))
        chunks.append(values.astype("<f4").tobytes())
    try:
        with open(os.fspath(path), "wb") as fh:
            fh.write(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CorruptCheckpoint("checkpoint truncated")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> ModelParams:
    try:
        with open(os.fspath(path), "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(blob)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: not a model checkpoint")
    version, use_atlas, count = r.unpack("<IBI")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if use_atlas not in (0, 1):
        raise CorruptCheckpoint(f"{path}: bad atlas flag {use_atlas}")

    arrays, metadata = {}, {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpoint(f"{path}: undecodable tensor name") from exc
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if name in arrays or name in metadata:
            raise CorruptCheckpoint(f"{path}: duplicate tensor {name!r}")
        if name.startswith(_META_PREFIX):
            metadata[name[len(_META_PREFIX):]] = float(values.ravel()[0])
        else:
            arrays[name] = values
    if r.pos != len(blob):
        raise CorruptCheckpoint(f"{path}: {len(blob) - r.pos} trailing bytes")

    layers = []
    expected = set()
    for name, wshape, bshape in layer_shapes(bool(use_atlas)):
        expected.update((name + ".weights", name + ".bias"))
        w, b = arrays.get(name + ".weights"), arrays.get(name + ".bias")
        if w is None or b is None or w.shape != wshape or b.shape != bshape:
            raise CorruptCheckpoint(f"{path}: layer {name!r} missing or misshapen")
        layers.append(T.LayerParams(name, T.Tensor(w), T.Tensor(b)))
    if set(arrays) != expected:
        raise CorruptCheckpoint(f"{path}: unexpected tensors {sorted(set(arrays) - expected)}")
    return ModelParams(layers, bool(use_atlas), metadata)
