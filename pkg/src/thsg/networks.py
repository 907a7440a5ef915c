"""The six trainable components and their checkpoint format.

Checkpoint layout (little-endian)::

    b"THSG"  u16 version
    repeated per network, in ModelBundle order:
        u32 name_length, name bytes (utf-8)
        u32 layer_count
        per layer: u32 rows, u32 cols, rows*cols f64 weights (row-major), cols f64 biases

D_G2 reserves logit 0 for the generated ("fake") class; ground-truth class c
maps to logit c + 1.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataFormatError

CHECKPOINT_MAGIC = b"THSG"
CHECKPOINT_VERSION = 1
NETWORK_NAMES = ("F", "G1", "D_G1", "G2", "D_G2", "C_F")
NORMALIZED = {"F", "G1", "G2"}
FAKE_CLASS = 0


class Mlp:
    """Affine layers with ReLU between them and optional unit-norm output."""

    def __init__(self, weights, biases, output_normalize=False):
        if len(weights) != len(biases) or not weights:
            raise ContractError("an Mlp needs matching, non-empty weight and bias lists")
        for W, b in zip(weights, biases):
            if b.shape != (1, W.shape[1]):
                raise ContractError(f"bias shape {b.shape} does not match weight {W.shape}")
        for W0, W1 in zip(weights, weights[1:]):
            if W0.shape[1] != W1.shape[0]:
                raise ContractError(f"layer widths do not chain: {W0.shape} -> {W1.shape}")
        self.weights = [w if isinstance(w, Tensor) else Tensor(w, requires_grad=True) for w in weights]
        self.biases = [b if isinstance(b, Tensor) else Tensor(b, requires_grad=True) for b in biases]
        self.output_normalize = output_normalize

    @classmethod
    def init(cls, dims, rng, output_normalize=False):
        """He-normal weights (variance 2/fan_in), zero biases."""
        weights, biases = [], []
        for din, dout in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / din), size=(din, dout)))
            biases.append(np.zeros((1, dout)))
        return cls(weights, biases, output_normalize)

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def parameters(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def __call__(self, x):
        x = ad.as_tensor(x)
        if x.shape[1] != self.in_dim:
            raise ContractError(f"input width {x.shape[1]} != network input width {self.in_dim}")
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.affine_forward(x, W, b)
            if i < last:
                x = ad.relu(x)
        if self.output_normalize:
            x = ad.l2_normalize(x)
        return x

    def copy(self):
        return Mlp(
            [w.data.copy() for w in self.weights],
            [b.data.copy() for b in self.biases],
            self.output_normalize,
        )

    def state(self):
        return [(w.data.copy(), b.data.copy()) for w, b in zip(self.weights, self.biases)]


@dataclass
class EmbeddingBatch:
    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != self.labels.shape[0]:
            raise ContractError("embeddings must be (n, d) with one label per row")

    def __len__(self):
        return self.embeddings.shape[0]


@dataclass
class ModelBundle:
    F: Mlp
    G1: Mlp
    D_G1: Mlp
    G2: Mlp
    D_G2: Mlp
    C_F: Mlp

    def networks(self):
        return {name: getattr(self, name) for name in NETWORK_NAMES}

    @property
    def embedding_dim(self):
        return self.F.out_dim

    @property
    def num_classes(self):
        return self.C_F.out_dim

    def copy(self):
        return ModelBundle(**{k: v.copy() for k, v in self.networks().items()})


def init_bundle(config, seed, input_dim, num_classes):
    """Build all six networks with the widths in ``config``.

    Deterministic for a given seed.  D_G2 gets ``num_classes + 1`` outputs.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    d = config.embedding_dim
    for name, value in (("input_dim", input_dim), ("embedding_dim", d),
                        ("f_hidden", config.f_hidden), ("gen_hidden", config.gen_hidden),
                        ("disc_hidden", config.disc_hidden)):
        if value <= 0:
            raise ConfigError(f"{name} must be positive, got {value}")
    rng = np.random.default_rng(seed)
    return ModelBundle(
        F=Mlp.init([input_dim, config.f_hidden, d], rng, output_normalize=True),
        G1=Mlp.init([d, config.gen_hidden, d], rng, output_normalize=True),
        D_G1=Mlp.init([2 * d, config.disc_hidden, 2], rng),
        G2=Mlp.init([d, config.gen_hidden, d], rng, output_normalize=True),
        D_G2=Mlp.init([d, config.disc_hidden, num_classes + 1], rng),
        C_F=Mlp.init([d, num_classes], rng),
    )


def embed(F, inputs, labels=None):
    """Forward ``inputs`` through F without recording gradients."""
    x = Tensor(np.asarray(inputs, dtype=np.float64))
    out = F(x).data
    if labels is None:
        labels = np.zeros(out.shape[0], dtype=np.int64)
    return EmbeddingBatch(out, labels)


def discriminate_pair(D_G1, x, x_star):
    """D_G1 logits for the row-wise concatenation ``[x, x_star]``."""
    x, x_star = ad.as_tensor(x), ad.as_tensor(x_star)
    if x.shape != x_star.shape:
        raise ContractError(f"pair halves differ in shape: {x.shape} vs {x_star.shape}")
    return D_G1(ad.concat([x, x_star], axis=1))


def save_checkpoint(bundle, path):
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(bundle))


def dump_checkpoint(bundle):
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    for name, net in bundle.networks().items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", len(net.weights)))
        for W, b in zip(net.weights, net.biases):
            rows, cols = W.shape
            parts.append(struct.pack("<II", rows, cols))
            parts.append(W.data.astype("<f8").tobytes())
            parts.append(b.data.astype("<f8").tobytes())
    return b"".join(parts)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def parse_checkpoint(blob):
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise DataFormatError("truncated checkpoint", offset=pos)
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise DataFormatError("bad checkpoint magic", offset=0)
    (version,) = struct.unpack("<H", take(2))
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", offset=4)
    nets = {}
    while pos < len(blob):
        start = pos
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8", errors="replace")
        if name not in NETWORK_NAMES:
            raise DataFormatError(f"unknown network {name!r}", offset=start)
        (n_layers,) = struct.unpack("<I", take(4))
        weights, biases = [], []
        for _ in range(n_layers):
            rows, cols = struct.unpack("<II", take(8))
            W = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols)
            b = np.frombuffer(take(8 * cols), dtype="<f8").reshape(1, cols)
            weights.append(W.astype(np.float64))
            biases.append(b.astype(np.float64))
        try:
            nets[name] = Mlp(weights, biases, output_normalize=name in NORMALIZED)
        except ContractError as exc:
            raise DataFormatError(f"network {name}: {exc}", offset=start) from None
    missing = [n for n in NETWORK_NAMES if n not in nets]
    if missing:
        raise DataFormatError(f"checkpoint lacks networks {missing}", offset=pos)
    return ModelBundle(**nets)
