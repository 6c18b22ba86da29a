"""The three-network one-class model and its losses.

A feature extractor E maps images to D-dimensional features.  A
classifier C is trained to tell instance-normalized features (label 1)
from zero-centered Gaussian pseudo-negatives (label 0); a decoder D
reconstructs the input image from the same features, regularizing them
to stay self-representative.  The training objective is the base-2
cross entropy of C plus a weighted per-sample L1 reconstruction error.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Mapping

import numpy as np

from . import ops
from .optim import AdamConfig, AdamState
from .rng import DeterministicRng, init_weights, stable_key
from .tensor import (
    F32,
    F64,
    Node,
    Tape,
    Tensor,
    absolute,
    add,
    affine,
    clamp,
    concat_rows,
    load_tensor,
    log2,
    mul,
    reshape,
    save_tensor,
    sum_all,
)

PROB_EPS = 1e-7

_CHECKPOINT_MAGIC = b"OCK1"
_CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One convolutional layer: output channels and square-kernel geometry."""

    out_channels: int
    kernel: int
    stride: int
    padding: int

    def text(self) -> str:
        return f"{self.out_channels}:{self.kernel}:{self.stride}:{self.padding}"

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        parts = text.split(":")
        if len(parts) != 4:
            raise ValueError(f"layer spec {text!r} is not out:kernel:stride:padding")
        return cls(*(int(p) for p in parts))


def _conv_widths(widths, kernel, stride, padding) -> tuple[LayerSpec, ...]:
    return tuple(LayerSpec(w, kernel, stride, padding) for w in widths)


@dataclass(frozen=True)
class ArchConfig:
    """Shapes of the extractor, classifier, and decoder networks.

    The decoder is always four transposed-conv layers; a feature vector
    is reshaped to ``decoder_reshape`` (channels, height, width) before
    entering it, and the last layer must land exactly on the input image
    shape.  ``freeze_conv`` keeps extractor conv weights fixed so only
    the fully connected layers train.
    """

    image_size: int = 32
    image_channels: int = 3
    feature_dim: int = 256
    extractor: tuple[LayerSpec, ...] = _conv_widths((16, 32, 64), 3, 2, 1)
    decoder_reshape: tuple[int, int, int] = (64, 2, 2)
    decoder: tuple[LayerSpec, ...] = _conv_widths((32, 16, 8, 3), 4, 2, 1)
    classifier_hidden: bool = True
    freeze_conv: bool = False

    def __post_init__(self):
        if self.image_size < 1 or self.image_channels < 1:
            raise ValueError("image_size and image_channels must be positive")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if not self.extractor:
            raise ValueError("extractor needs at least one conv layer")
        if len(self.decoder) != 4:
            raise ValueError(f"decoder must have exactly 4 layers, got {len(self.decoder)}")
        c, h, w = self.decoder_reshape
        if c * h * w != self.feature_dim:
            raise ValueError(
                f"decoder_reshape {list(self.decoder_reshape)} has {c * h * w} elements,"
                f" feature_dim is {self.feature_dim}"
            )
        # Walking the size formulas raises if any stage degenerates.
        self.extractor_flat_dim()
        out_c, out_h, out_w = self.decoder_output_shape()
        if (out_c, out_h, out_w) != (self.image_channels, self.image_size, self.image_size):
            raise ValueError(
                f"decoder produces [{out_c},{out_h},{out_w}], input images are"
                f" [{self.image_channels},{self.image_size},{self.image_size}]"
            )

    def extractor_specs(self) -> list[ops.ConvSpec]:
        specs = []
        c_in = self.image_channels
        for layer in self.extractor:
            specs.append(
                ops.ConvSpec(c_in, layer.out_channels, layer.kernel, layer.stride, layer.padding)
            )
            c_in = layer.out_channels
        return specs

    def decoder_specs(self) -> list[ops.ConvSpec]:
        specs = []
        c_in = self.decoder_reshape[0]
        for layer in self.decoder:
            specs.append(
                ops.ConvSpec(
                    c_in, layer.out_channels, layer.kernel, layer.stride, layer.padding,
                    transposed=True,
                )
            )
            c_in = layer.out_channels
        return specs

    def extractor_flat_dim(self) -> int:
        size = self.image_size
        for spec in self.extractor_specs():
            size = spec.out_size(size)
        return self.extractor[-1].out_channels * size * size

    def decoder_output_shape(self) -> tuple[int, int, int]:
        _, h, w = self.decoder_reshape
        for spec in self.decoder_specs():
            h, w = spec.out_size(h), spec.out_size(w)
        return self.decoder[-1].out_channels, h, w

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Canonical name -> shape map for every learnable tensor."""
        shapes: dict[str, tuple[int, ...]] = {}
        for i, spec in enumerate(self.extractor_specs()):
            shapes[f"extractor.conv{i}.w"] = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            shapes[f"extractor.conv{i}.b"] = (spec.out_channels,)
        shapes["extractor.fc.w"] = (self.extractor_flat_dim(), self.feature_dim)
        shapes["extractor.fc.b"] = (self.feature_dim,)
        if self.classifier_hidden:
            shapes["classifier.hidden.w"] = (self.feature_dim, self.feature_dim)
            shapes["classifier.hidden.b"] = (self.feature_dim,)
        shapes["classifier.out.w"] = (self.feature_dim, 1)
        shapes["classifier.out.b"] = (1,)
        specs = self.decoder_specs()
        for i, spec in enumerate(specs):
            shapes[f"decoder.deconv{i}.w"] = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
            # Layers followed by instance norm carry no bias: a uniform
            # channel shift is removed exactly by the normalizer.
            if i == len(specs) - 1:
                shapes[f"decoder.deconv{i}.b"] = (spec.out_channels,)
        return shapes

    def parameter_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    @classmethod
    def wide_preset(cls) -> "ArchConfig":
        """Wide-decoder preset: 1024-dim features, 16x16 images."""
        return cls(
            image_size=16,
            feature_dim=1024,
            decoder_reshape=(1024, 1, 1),
            decoder=_conv_widths((256, 64, 16, 3), 4, 2, 1),
        )

    @classmethod
    def tiny(cls) -> "ArchConfig":
        """Smallest legal model; used for gradient checking."""
        return cls(
            image_size=4,
            feature_dim=8,
            extractor=_conv_widths((4, 8), 3, 2, 1),
            decoder_reshape=(2, 2, 2),
            decoder=(
                LayerSpec(4, 4, 2, 1),
                LayerSpec(4, 3, 1, 1),
                LayerSpec(4, 3, 1, 1),
                LayerSpec(3, 3, 1, 1),
            ),
        )

    def to_lines(self) -> list[str]:
        return [
            f"image_size={self.image_size}",
            f"image_channels={self.image_channels}",
            f"feature_dim={self.feature_dim}",
            "extractor=" + ",".join(l.text() for l in self.extractor),
            "decoder_reshape=" + ",".join(str(d) for d in self.decoder_reshape),
            "decoder=" + ",".join(l.text() for l in self.decoder),
            f"classifier_hidden={'true' if self.classifier_hidden else 'false'}",
            f"freeze_conv={'true' if self.freeze_conv else 'false'}",
        ]

    @classmethod
    def from_mapping(cls, kv: Mapping[str, str]) -> "ArchConfig":
        def layers(text):
            return tuple(LayerSpec.parse(p) for p in text.split(",") if p)

        return cls(
            image_size=int(kv["image_size"]),
            image_channels=int(kv["image_channels"]),
            feature_dim=int(kv["feature_dim"]),
            extractor=layers(kv["extractor"]),
            decoder_reshape=tuple(int(d) for d in kv["decoder_reshape"].split(",")),
            decoder=layers(kv["decoder"]),
            classifier_hidden=kv["classifier_hidden"] == "true",
            freeze_conv=kv["freeze_conv"] == "true",
        )


# Output-channel axis per weight kind, for fan-in computation.
def _out_axis(name: str) -> int:
    if ".conv" in name:
        return 0
    return 1  # fc and deconv weights store the output axis second


@dataclass
class ModelParams:
    """All learnable tensors of the three networks, keyed by name."""

    config: ArchConfig
    tensors: dict[str, Tensor]
    precision: str = F32

    def frozen_names(self) -> frozenset[str]:
        if not self.config.freeze_conv:
            return frozenset()
        return frozenset(n for n in self.tensors if n.startswith("extractor.conv"))

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if n.startswith(prefix)}

    def astype(self, precision: str) -> "ModelParams":
        return ModelParams(
            self.config,
            {n: t.astype(precision) for n, t in self.tensors.items()},
            precision,
        )


def init_model(config: ArchConfig, weight_rng: DeterministicRng, precision: str = F32) -> ModelParams:
    """Fresh parameters: fan-in uniform weights, zero biases.

    Each tensor draws from a substream keyed by its name, so the same
    seed yields the same extractor/decoder weights whether or not the
    classifier exists in a given configuration.
    """
    tensors: dict[str, Tensor] = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".b"):
            tensors[name] = Tensor(np.zeros(shape, dtype=np.float32)).astype(precision)
        else:
            tensors[name] = init_weights(
                weight_rng.substream(stable_key(name)), shape,
                out_axis=_out_axis(name), precision=precision,
            )
    return ModelParams(config, tensors, precision)


def stage_params(tape: Tape, params: ModelParams) -> dict[str, Node]:
    """Put every parameter on the tape; returns name -> leaf node."""
    return {name: tape.leaf(t) for name, t in params.tensors.items()}


# ---------------------------------------------------------------------------
# Forward graphs
# ---------------------------------------------------------------------------


def extract_features(tape: Tape, pnodes: Mapping[str, Node], config: ArchConfig, x: Node) -> Node:
    """Conv stack with ReLU, flatten, then a linear map to feature_dim."""
    n, c, h, w = x.shape
    if (c, h, w) != (config.image_channels, config.image_size, config.image_size):
        raise ValueError(
            f"input images are [{c},{h},{w}], config wants"
            f" [{config.image_channels},{config.image_size},{config.image_size}]"
        )
    out = x
    for i, spec in enumerate(config.extractor_specs()):
        out = ops.conv2d(out, pnodes[f"extractor.conv{i}.w"], pnodes[f"extractor.conv{i}.b"], spec)
        out = ops.relu(out)
    out = reshape(out, (n, config.extractor_flat_dim()))
    return ops.fully_connected(out, pnodes["extractor.fc.w"], pnodes["extractor.fc.b"])


def classifier_probs(tape: Tape, pnodes: Mapping[str, Node], config: ArchConfig, rows: Node) -> Node:
    """Classifier head on already-assembled [M,D] rows; returns per-row p."""
    out = rows
    if config.classifier_hidden:
        out = ops.fully_connected(out, pnodes["classifier.hidden.w"], pnodes["classifier.hidden.b"])
        out = ops.relu(out)
    logits = ops.fully_connected(out, pnodes["classifier.out.w"], pnodes["classifier.out.b"])
    logits = reshape(logits, (rows.shape[0],))
    return clamp(ops.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)


@dataclass
class ClassifierBatch:
    """Classifier view of one step: 2N rows, features first, then pseudo-negatives."""

    inputs: Node          # [2N, D]
    labels: Tensor        # [2N], N ones then N zeros
    probs: Node           # [2N], clamped into (0, 1)

    def __post_init__(self):
        n2 = self.labels.size
        ones = int(self.labels.data.sum())
        if n2 != 2 * ones:
            raise ValueError(f"labels must be half ones, got {ones} of {n2}")


def classify(
    tape: Tape,
    pnodes: Mapping[str, Node],
    config: ArchConfig,
    features: Node,
    pseudo: Tensor,
) -> ClassifierBatch:
    """Instance-normalize features, append pseudo-negative rows, classify.

    Only the real feature rows are normalized; normalizing the Gaussian
    rows would destroy the scale contrast they exist to provide.
    """
    if tuple(pseudo.shape) != tuple(features.shape):
        raise ValueError(
            f"pseudo-negatives {list(pseudo.shape)} must match features {list(features.shape)}"
        )
    n = features.shape[0]
    normed = ops.instance_norm_vec(features)
    rows = concat_rows(normed, tape.leaf(pseudo))
    probs = classifier_probs(tape, pnodes, config, rows)
    dtype = features.data.dtype
    labels = Tensor(np.concatenate([np.ones(n, dtype=dtype), np.zeros(n, dtype=dtype)]))
    return ClassifierBatch(inputs=rows, labels=labels, probs=probs)


def decode(tape: Tape, pnodes: Mapping[str, Node], config: ArchConfig, features: Node) -> Node:
    """Reshape features and run the four transposed-conv layers.

    Instance norm + ReLU follow layers 1-3; the last layer ends in Tanh,
    so reconstructions live in (-1, 1).
    """
    n, d = features.shape
    if d != config.feature_dim:
        raise ValueError(f"features have dim {d}, config wants {config.feature_dim}")
    c, h, w = config.decoder_reshape
    out = reshape(features, (n, c, h, w))
    specs = config.decoder_specs()
    for i, spec in enumerate(specs):
        last = i == len(specs) - 1
        bias = pnodes[f"decoder.deconv{i}.b"] if last else None
        out = ops.conv_transpose2d(out, pnodes[f"decoder.deconv{i}.w"], bias, spec)
        if last:
            out = ops.tanh(out)
        else:
            out = ops.instance_norm_2d(out)
            out = ops.relu(out)
    return out


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def classification_loss(batch: ClassifierBatch) -> Node:
    """Mean base-2 cross entropy over the 2N classifier rows."""
    p = batch.probs
    tape = p.tape
    n2 = p.shape[0]
    y = tape.leaf(batch.labels)
    y_neg = tape.leaf(Tensor(1.0 - batch.labels.data))
    terms = add(mul(y, log2(p)), mul(y_neg, log2(affine(p, -1.0, 1.0))))
    return affine(sum_all(terms), -1.0 / n2)


def reconstruction_loss(x: Node, x_rec: Node, per_pixel_mean: bool = False) -> Node:
    """L1 reconstruction error.

    Default form: per-sample sum of absolute differences over all pixels
    and channels, averaged over the batch.  ``per_pixel_mean`` divides
    by the pixel count as well, which rescales the loss (and its
    gradients) by 1/(C*H*W) without changing its minimizer.
    """
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch {list(x.shape)} vs {list(x_rec.shape)}")
    denom = x.data.size if per_pixel_mean else x.shape[0]
    diff = add(x, affine(x_rec, -1.0))
    return affine(sum_all(absolute(diff)), 1.0 / denom)


def total_loss(lc: Node, lr: Node, lambda_r: float) -> Node:
    """Classification loss plus lambda_r times the reconstruction loss."""
    if lambda_r < 0:
        raise ValueError(f"lambda_r must be >= 0, got {lambda_r}")
    return add(lc, affine(lr, lambda_r))


def training_loss_builder(
    arch: ArchConfig,
    images: np.ndarray,
    pseudo: np.ndarray,
    lambda_r: float,
    seed: int = 0,
):
    """Full training objective as a gradient-check problem.

    Returns (parameter tensors in canonical order, builder): the builder
    takes a fresh tape plus one leaf per parameter and rebuilds the
    complete forward graph, ending in the combined scalar loss.
    Everything runs in f64 so central differences are meaningful.
    """
    from .rng import STREAM_WEIGHTS

    params = init_model(arch, DeterministicRng(seed).substream(STREAM_WEIGHTS), precision=F64)
    names = list(params.tensors)
    x_value = Tensor(images, precision=F64)
    pseudo_value = Tensor(pseudo, precision=F64)

    def build(tape: Tape, leaves: list[Node]) -> Node:
        pnodes = dict(zip(names, leaves))
        x = tape.leaf(x_value)
        feats = extract_features(tape, pnodes, arch, x)
        lc = classification_loss(classify(tape, pnodes, arch, feats, pseudo_value))
        lr = reconstruction_loss(x, decode(tape, pnodes, arch, feats))
        return total_loss(lc, lr, lambda_r)

    return [params.tensors[n] for n in names], build, names


# ---------------------------------------------------------------------------
# Checkpoints: magic "OCK1", version, length-prefixed key=value header
# (architecture, precision, metadata, optimizer hyperparameters), then
# named tensors sorted by name, then optional Adam moments.
# ---------------------------------------------------------------------------


def _write_block(f: BinaryIO, name: str, tensor: Tensor) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    save_tensor(tensor, f)


def _read_block(f: BinaryIO) -> tuple[str, Tensor]:
    (name_len,) = struct.unpack("<H", f.read(2))
    name = f.read(name_len).decode("utf-8")
    return name, load_tensor(f)


def save_checkpoint(
    path: str,
    params: ModelParams,
    meta: Mapping[str, str] | None = None,
    adam: AdamState | None = None,
) -> None:
    lines = params.config.to_lines()
    lines.append(f"precision={params.precision}")
    for key in sorted(meta or {}):
        value = str((meta or {})[key])
        if "\n" in key or "\n" in value:
            raise CheckpointError(f"metadata {key!r} must be single-line")
        lines.append(f"meta.{key}={value}")
    if adam is not None:
        lines.append(f"optim.lr={adam.cfg.lr!r}")
        lines.append(f"optim.beta1={adam.cfg.beta1!r}")
        lines.append(f"optim.beta2={adam.cfg.beta2!r}")
        lines.append(f"optim.eps={adam.cfg.eps!r}")
    header = "\n".join(lines).encode("utf-8")

    with open(path, "wb") as f:
        f.write(_CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", _CHECKPOINT_VERSION, len(header)))
        f.write(header)
        names = sorted(params.tensors)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            _write_block(f, name, params.tensors[name])
        if adam is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<BQ", 1, adam.t))
            moment_names = sorted(adam.m)
            f.write(struct.pack("<I", len(moment_names)))
            for name in moment_names:
                _write_block(f, f"m.{name}", Tensor(adam.m[name]))
                _write_block(f, f"v.{name}", Tensor(adam.v[name]))


def _check_tensors(config: ArchConfig, tensors: Mapping[str, Tensor], what: str) -> None:
    expected = config.param_shapes()
    for name in sorted(set(expected) | set(tensors)):
        if name not in tensors:
            raise CheckpointError(f"{what}: tensor {name!r} missing from checkpoint")
        if name not in expected:
            raise CheckpointError(f"{what}: unexpected tensor {name!r} in checkpoint")
        got, want = tuple(tensors[name].shape), tuple(expected[name])
        if got != want:
            raise CheckpointError(
                f"{what}: tensor {name!r} has shape {list(got)}, expected {list(want)}"
            )


def load_checkpoint(
    path: str,
    expect_config: ArchConfig | None = None,
) -> tuple[ModelParams, dict[str, str], AdamState | None]:
    """Read a checkpoint; returns (params, metadata, optimizer state or None).

    If ``expect_config`` is given, the stored tensors are validated
    against it and the first mismatching tensor is named in the error.
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != _CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = f.read(header_len).decode("utf-8")
        kv: dict[str, str] = {}
        for line in header.splitlines():
            key, _, value = line.partition("=")
            kv[key] = value
        config = ArchConfig.from_mapping(kv)
        precision = kv.get("precision", F32)
        meta = {k[len("meta."):]: v for k, v in kv.items() if k.startswith("meta.")}

        (n_tensors,) = struct.unpack("<I", f.read(4))
        tensors: dict[str, Tensor] = {}
        for _ in range(n_tensors):
            name, tensor = _read_block(f)
            tensors[name] = tensor
        _check_tensors(config, tensors, "stored config")
        if expect_config is not None:
            _check_tensors(expect_config, tensors, "requested config")

        # Restore canonical parameter order regardless of file order.
        ordered = {name: tensors[name] for name in config.param_shapes()}
        params = ModelParams(config, ordered, precision)

        (has_optim,) = struct.unpack("<B", f.read(1))
        adam = None
        if has_optim:
            (t,) = struct.unpack("<Q", f.read(8))
            (count,) = struct.unpack("<I", f.read(4))
            cfg = AdamConfig(
                lr=float(kv["optim.lr"]),
                beta1=float(kv["optim.beta1"]),
                beta2=float(kv["optim.beta2"]),
                eps=float(kv["optim.eps"]),
            )
            adam = AdamState(params.tensors, cfg)
            adam.t = t
            for _ in range(count):
                m_name, m_tensor = _read_block(f)
                v_name, v_tensor = _read_block(f)
                base = m_name[2:]
                if not (m_name.startswith("m.") and v_name == f"v.{base}"):
                    raise CheckpointError(f"malformed optimizer block {m_name!r}/{v_name!r}")
                if base not in adam.m:
                    raise CheckpointError(f"optimizer moment for unknown tensor {base!r}")
                adam.m[base] = np.array(m_tensor.data)
                adam.v[base] = np.array(v_tensor.data)
        return params, meta, adam
