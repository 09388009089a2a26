"""Layers and the five-network model bundle.

The bundle holds a small convolutional feature extractor, a label
predictor, an auxiliary channel-importance classifier, one two-layer
expert per source domain, and a three-layer domain approximator fed
through a gradient reversal gate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    avgpool2,
    bias_add,
    conv2d,
    grl,
    matmul,
    pad_spatial,
    relu,
    softmax,
)

BUNDLE_MAGIC = b"DMDA"
BUNDLE_VERSION = 1


class BundleFormatError(Exception):
    pass


class DenseLayer:
    """Fully connected layer: y = x @ weight + bias."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> "DenseLayer":
        std = np.sqrt(2.0 / n_in)
        weight = Tensor(rng.normal(0.0, std, size=(n_in, n_out)), requires_grad=True)
        bias = Tensor(np.zeros(n_out), requires_grad=True)
        return cls(weight, bias)

    def __call__(self, x: Tensor) -> Tensor:
        return bias_add(matmul(x, self.weight), self.bias)

    def params(self):
        return [self.weight, self.bias]


class ConvLayer:
    """Valid convolution layer with (Cout, Cin, k, k) kernels."""

    def __init__(self, kernels: Tensor, bias: Tensor, stride: int = 1):
        self.kernels = kernels
        self.bias = bias
        self.stride = stride

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int, k: int,
             stride: int = 1) -> "ConvLayer":
        std = np.sqrt(2.0 / (c_in * k * k))
        kernels = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)),
                         requires_grad=True)
        bias = Tensor(np.zeros(c_out), requires_grad=True)
        return cls(kernels, bias, stride)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernels, self.bias, self.stride)

    def params(self):
        return [self.kernels, self.bias]


class GrlGate:
    """Identity forward; scales the upstream gradient by -lam backward."""

    def __init__(self, lam: float = 0.0):
        if lam < 0:
            raise ValueError(f"GrlGate: lambda must be nonnegative, got {lam}")
        self.lam = float(lam)

    def __call__(self, x: Tensor) -> Tensor:
        return grl(x, self.lam)


@dataclass(frozen=True)
class ModelDims:
    """Architecture sizes shared by every network in the bundle.

    The extractor pads each conv input by `pad`, so spatial size is
    preserved through a conv block and halved once by the pooling stage.
    """

    in_h: int = 8
    in_w: int = 8
    in_channels: int = 3
    conv_channels: int = 16
    feature_channels: int = 32
    n_classes: int = 2
    n_domains: int = 3
    approx_hidden: int = 64
    kernel: int = 3
    pad: int = 1
    pool: int = 2

    def __post_init__(self):
        if self.n_domains < 2:
            raise ValueError(f"need at least 2 domains, got {self.n_domains}")
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        if self.feature_channels < 2:
            raise ValueError(
                f"need at least 2 feature channels, got {self.feature_channels}")
        if self.kernel != 2 * self.pad + 1:
            raise ValueError("kernel must equal 2*pad + 1 to preserve spatial dims")
        if (self.in_h % self.pool) or (self.in_w % self.pool):
            raise ValueError(f"input dims {self.in_h}x{self.in_w} not divisible "
                             f"by pool factor {self.pool}")

    @property
    def map_h(self) -> int:
        return self.in_h // self.pool

    @property
    def map_w(self) -> int:
        return self.in_w // self.pool


class Expert:
    """Two dense layers: class logits first, then a feature-sized output."""

    def __init__(self, first: DenseLayer, second: DenseLayer):
        self.first = first
        self.second = second

    def params(self):
        return self.first.params() + self.second.params()


@dataclass
class ModelBundle:
    dims: ModelDims
    conv1: ConvLayer
    conv2: ConvLayer
    g: DenseLayer
    g_a: DenseLayer
    experts: list
    approx: list = field(default_factory=list)

    def parameters(self):
        """All trainable tensors in fixed declaration order."""
        out = self.conv1.params() + self.conv2.params()
        out += self.g.params() + self.g_a.params()
        for e in self.experts:
            out += e.params()
        for layer in self.approx:
            out += layer.params()
        return out

    def approx_params(self):
        out = []
        for layer in self.approx:
            out += layer.params()
        return out

    def copy(self) -> "ModelBundle":
        clone = init_bundle(self.dims, seed=0)
        for dst, src in zip(clone.parameters(), self.parameters()):
            dst.data = src.data.copy()
        return clone


def init_bundle(dims: ModelDims, seed: int) -> ModelBundle:
    """Build a bundle with fan-in scaled normal weights and zero biases."""
    rng = np.random.default_rng(seed)
    k = dims.kernel
    conv1 = ConvLayer.init(rng, dims.in_channels, dims.conv_channels, k)
    conv2 = ConvLayer.init(rng, dims.conv_channels, dims.feature_channels, k)
    g = DenseLayer.init(rng, dims.feature_channels, dims.n_classes)
    g_a = DenseLayer.init(rng, dims.feature_channels, dims.n_classes)
    experts = []
    for _ in range(dims.n_domains):
        first = DenseLayer.init(rng, dims.feature_channels, dims.n_classes)
        second = DenseLayer.init(rng, dims.n_classes, dims.feature_channels)
        experts.append(Expert(first, second))
    approx = [
        DenseLayer.init(rng, dims.feature_channels, dims.approx_hidden),
        DenseLayer.init(rng, dims.approx_hidden, dims.approx_hidden),
        DenseLayer.init(rng, dims.approx_hidden, dims.n_domains),
    ]
    return ModelBundle(dims, conv1, conv2, g, g_a, experts, approx)


def forward_feature_map(bundle: ModelBundle, x: Tensor) -> Tensor:
    """Run the extractor on a (B, H, W, Cin) batch; returns a relu'd map."""
    p = bundle.dims.pad
    h = relu(bundle.conv1(pad_spatial(x, p)))
    h = avgpool2(h)
    return relu(bundle.conv2(pad_spatial(h, p)))


def forward_expert(expert: Expert, phi: Tensor):
    """Return (class logits, feature-sized semantics) for a (B, K) batch."""
    logits1 = expert.first(phi)
    semantics = expert.second(relu(logits1))
    return logits1, semantics


def approximator_logits(approx, z: Tensor) -> Tensor:
    h = relu(approx[0](z))
    h = relu(approx[1](h))
    return approx[2](h)


def forward_approximator(approx, z: Tensor) -> Tensor:
    """Domain membership probabilities, one row per sample."""
    return softmax(approximator_logits(approx, z))


# ---------------------------------------------------------------------------
# Serialization: magic, version, dims, then parameters as little-endian f64
# ---------------------------------------------------------------------------

_DIM_FIELDS = ("in_h", "in_w", "in_channels", "conv_channels", "feature_channels",
               "n_classes", "n_domains", "approx_hidden", "kernel", "pad", "pool")


def save_bundle(bundle: ModelBundle, path):
    header = struct.pack("<4sI", BUNDLE_MAGIC, BUNDLE_VERSION)
    header += struct.pack(f"<{len(_DIM_FIELDS)}I",
                          *[getattr(bundle.dims, f) for f in _DIM_FIELDS])
    with open(path, "wb") as fh:
        fh.write(header)
        for p in bundle.parameters():
            fh.write(p.data.astype("<f8").tobytes())


def load_bundle(path) -> ModelBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize("<4sI")
    if len(blob) < head or blob[:4] != BUNDLE_MAGIC:
        raise BundleFormatError(f"{path}: bad magic")
    (_, version) = struct.unpack_from("<4sI", blob)
    if version != BUNDLE_VERSION:
        raise BundleFormatError(f"{path}: unsupported version {version}")
    dims_size = struct.calcsize(f"<{len(_DIM_FIELDS)}I")
    values = struct.unpack_from(f"<{len(_DIM_FIELDS)}I", blob, head)
    dims = ModelDims(**dict(zip(_DIM_FIELDS, values)))
    bundle = init_bundle(dims, seed=0)
    offset = head + dims_size
    for p in bundle.parameters():
        nbytes = p.data.size * 8
        if offset + nbytes > len(blob):
            raise BundleFormatError(f"{path}: truncated parameter data")
        arr = np.frombuffer(blob, dtype="<f8", count=p.data.size, offset=offset)
        p.data = arr.reshape(p.data.shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise BundleFormatError(f"{path}: trailing bytes after parameters")
    return bundle
