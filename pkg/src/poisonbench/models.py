"""Victim architecture zoo with deterministic builds and checkpoint IO.

Three registry entries cover genuinely different function classes at desk
scale: a 3-stage batch-norm CNN (cnn-a, ~95k params), a deeper and narrower
variant (cnn-b), and a 2-hidden-layer MLP. Builds are bit-reproducible from
(spec, seed).
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, DataError, ShapeError

CHECKPOINT_MAGIC = b"PBMD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Structural description of a victim network.

    For kind "cnn", stages give (channels, conv blocks) per resolution level,
    with 2x2 max pooling between levels, global average pooling, and one
    linear classifier. For kind "mlp", stages give hidden layer widths.
    classifier_width echoes the feature width feeding the final linear layer.
    """

    name: str
    kind: str
    stages: tuple[tuple[int, int], ...]
    classifier_width: int
    in_shape: tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        if self.kind not in ("cnn", "mlp"):
            raise ConfigError(f"unknown architecture kind '{self.kind}'")
        if not self.stages:
            raise ConfigError("ArchSpec needs at least one stage")
        for width, blocks in self.stages:
            if width < 1 or blocks < 1:
                raise ConfigError(f"stage widths and block counts must be >= 1, got {self.stages}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")


# Structure per registry name; in_shape and num_classes are instantiation
# parameters, so equal-named specs always share layer structure.
_STRUCTURES = {
    "cnn-a": ("cnn", ((32, 1), (64, 1), (128, 1)), 128),
    "cnn-b": ("cnn", ((16, 2), (32, 2), (64, 2)), 64),
    "mlp": ("mlp", ((128, 1), (128, 1)), 128),
}


def arch_names():
    return sorted(_STRUCTURES)


def get_arch(name, in_shape=(3, 32, 32), num_classes=10):
    if name not in _STRUCTURES:
        raise ConfigError(f"unknown architecture '{name}' (have {', '.join(arch_names())})",
                          kind="unknown_architecture")
    kind, stages, cls_width = _STRUCTURES[name]
    return ArchSpec(name=name, kind=kind, stages=stages, classifier_width=cls_width,
                    in_shape=tuple(in_shape), num_classes=num_classes)


class Model:
    """A layer stack plus train/eval mode. Mutated only by the optimizer and
    by batch-norm buffer updates in train mode."""

    def __init__(self, spec, layers, seed=0):
        self.spec = spec
        self.layers = layers
        self.seed = seed
        self.mode = "train"

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def state(self):
        out = []
        for layer in self.layers:
            out.extend(layer.state())
        return out

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily drop parameter gradients from the graph (attack passes
        only need input gradients)."""
        ps = self.params()
        for p in ps:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p in ps:
                p.requires_grad = True

    def forward(self, images, input_grad=False):
        """Run the stack on a [N,C,H,W] batch and return [N,K] logits.

        Pass a Tensor to keep graph identity with the caller; arrays are
        wrapped. With input_grad=True the returned input tensor participates
        in backward, so its .grad fills alongside the parameters'.
        """
        x = images if isinstance(images, T.Tensor) else T.Tensor(images, requires_grad=input_grad)
        if input_grad:
            x.requires_grad = True
        c, h, w = self.spec.in_shape
        if x.data.ndim != 4 or x.data.shape[1:] != (c, h, w):
            raise ShapeError(
                f"input: expected [N,{c},{h},{w}] for '{self.spec.name}', got {x.data.shape}"
            )
        train = self.mode == "train"
        for layer in self.layers:
            x = layer(x, train)
        return x

    def __call__(self, images, input_grad=False):
        return self.forward(images, input_grad=input_grad)


def build_model(spec, seed, dtype=np.float32):
    """Deterministically initialize a model: one PCG64 stream, fixed layer
    order, fan-in-scaled uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    c, h, w = spec.in_shape
    layers = []
    if spec.kind == "cnn":
        prev = c
        size = h
        for si, (width, blocks) in enumerate(spec.stages):
            for bi in range(blocks):
                tag = f"s{si}b{bi}"
                layers.append(nn.Conv2d(prev, width, rng=rng, dtype=dtype, name=f"{tag}.conv"))
                layers.append(nn.BatchNorm2d(width, dtype=dtype, name=f"{tag}.bn"))
                layers.append(nn.ReLU())
                prev = width
            if si < len(spec.stages) - 1:
                if size % 2:
                    raise ConfigError(f"cannot pool odd spatial size {size} in '{spec.name}'")
                layers.append(nn.MaxPool2())
                size //= 2
        layers.append(nn.GlobalAvgPool())
        layers.append(nn.Linear(prev, spec.num_classes, rng=rng, dtype=dtype, name="head"))
    else:
        layers.append(nn.Flatten())
        prev = c * h * w
        for si, (width, _) in enumerate(spec.stages):
            layers.append(nn.Linear(prev, width, rng=rng, dtype=dtype, name=f"fc{si}"))
            layers.append(nn.ReLU())
            prev = width
        layers.append(nn.Linear(prev, spec.num_classes, rng=rng, dtype=dtype, name="head"))
    return Model(spec, layers, seed=seed)


def param_count(spec):
    """Parameter count is a pure function of the spec."""
    return sum(p.size for p in build_model(spec, seed=0).params())


def predict(model, images, batch_size=512):
    """Argmax class labels for a [N,C,H,W] array; ties go to the lowest index.

    Requires eval mode so batch-norm buffers stay frozen.
    """
    if model.mode != "eval":
        raise ConfigError("predict requires the model in eval mode")
    images = np.asarray(images)
    out = np.empty(images.shape[0], dtype=np.int64)
    for lo in range(0, images.shape[0], batch_size):
        logits = model.forward(images[lo : lo + batch_size]).data
        out[lo : lo + batch_size] = logits.argmax(axis=1)
    return out


# --- checkpoint format -------------------------------------------------------
# magic "PBMD" | version u8 | name u64-len + utf-8 | seed u64
# then one record per state tensor in model walk order (parameters and
# batch-norm running statistics): rank u64 | dims u64 each | values f32 LE.


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        name = model.spec.name.encode("utf-8")
        fh.write(struct.pack("<Q", len(name)))
        fh.write(name)
        fh.write(struct.pack("<Q", model.seed))
        for _, arr in model.state():
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path, in_shape=(3, 32, 32), num_classes=10):
    """Rebuild the architecture from the stored name and restore all state."""
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise DataError(f"truncated checkpoint '{path}'")
        chunk = raw[off : off + n]
        off += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise DataError(f"bad checkpoint magic in '{path}'")
    version = take(1)[0]
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (name_len,) = struct.unpack("<Q", take(8))
    name = take(name_len).decode("utf-8")
    (seed,) = struct.unpack("<Q", take(8))
    model = build_model(get_arch(name, in_shape=in_shape, num_classes=num_classes), seed=seed)
    for tname, arr in model.state():
        (rank,) = struct.unpack("<Q", take(8))
        if rank != arr.ndim:
            raise DataError(f"checkpoint tensor '{tname}': rank {rank} != expected {arr.ndim}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        if dims != arr.shape:
            raise DataError(f"checkpoint tensor '{tname}': shape {dims} != expected {arr.shape}")
        vals = np.frombuffer(take(4 * arr.size), dtype="<f4").reshape(arr.shape)
        arr[...] = vals
    if off != len(raw):
        raise DataError(f"trailing bytes in checkpoint '{path}'")
    model.eval()
    return model
