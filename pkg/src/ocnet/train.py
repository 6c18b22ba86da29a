"""Single-target training loop for all three objectives.

Modes: "full" trains classifier + decoder jointly, "classifier_only"
drops the reconstruction term, "autoencoder_only" drops the classifier
and trains on reconstruction alone.  Everything is deterministic given
the seed: weights, pseudo-negative draws, and batch shuffles each own a
derived stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import BatchCursor
from .model import (
    ArchConfig,
    ModelParams,
    classification_loss,
    classify,
    decode,
    extract_features,
    init_model,
    reconstruction_loss,
    stage_params,
    total_loss,
)
from .optim import AdamConfig, AdamState, adam_step
from .rng import (
    STREAM_PSEUDO,
    STREAM_SHUFFLE,
    STREAM_WEIGHTS,
    DeterministicRng,
    PseudoNegConfig,
    sample_gaussian,
)
from .tensor import Tape, backward

MODES = ("full", "classifier_only", "autoencoder_only")


@dataclass(frozen=True)
class TrainSettings:
    mode: str = "full"
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    lambda_r: float = 1.0
    mu: float = 0.0
    sigma: float = 0.01
    recon_per_pixel_mean: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")


@dataclass(frozen=True)
class LossRecord:
    step: int
    lc: float | None
    lr: float | None
    lt: float


@dataclass
class TrainResult:
    params: ModelParams
    adam: AdamState
    log: list[LossRecord] = field(default_factory=list)
    diverged: bool = False
    steps: int = 0


def train_model(
    arch: ArchConfig,
    images: np.ndarray,
    identities: Sequence[str],
    settings: TrainSettings,
    step_hook: Callable[[LossRecord], None] | None = None,
    epoch_hook: Callable[[int, TrainResult], None] | None = None,
) -> TrainResult:
    """Train a fresh model on [M,C,H,W] images of one target identity.

    On a non-finite loss the loop stops before applying the bad update,
    leaving the last good parameters in the result with ``diverged`` set.
    """
    root = DeterministicRng(settings.seed)
    params = init_model(arch, root.substream(STREAM_WEIGHTS))
    shuffle_rng = root.substream(STREAM_SHUFFLE)
    pseudo_rng = root.substream(STREAM_PSEUDO)
    adam = AdamState(
        params.tensors,
        AdamConfig(settings.lr, settings.beta1, settings.beta2, settings.adam_eps),
    )
    frozen = params.frozen_names()
    cursor = BatchCursor(images, identities, shuffle_rng, settings.batch_size)
    pseudo_cfg = PseudoNegConfig(dim=arch.feature_dim, mu=settings.mu, sigma=settings.sigma)
    result = TrainResult(params=params, adam=adam)

    per_epoch = cursor.batches_per_epoch()
    step = 0
    for epoch in range(settings.epochs):
        for _ in range(per_epoch):
            batch = cursor.next_batch()
            step += 1
            tape = Tape()
            pnodes = stage_params(tape, params)
            x = tape.leaf(batch.images)
            feats = extract_features(tape, pnodes, arch, x)

            lc_node = lr_node = None
            if settings.mode in ("full", "classifier_only"):
                pseudo = sample_gaussian(
                    pseudo_rng, batch.images.shape[0], arch.feature_dim, pseudo_cfg
                )
                lc_node = classification_loss(classify(tape, pnodes, arch, feats, pseudo))
            if settings.mode in ("full", "autoencoder_only"):
                lr_node = reconstruction_loss(
                    x, decode(tape, pnodes, arch, feats), settings.recon_per_pixel_mean
                )

            if settings.mode == "full":
                lt_node = total_loss(lc_node, lr_node, settings.lambda_r)
            elif settings.mode == "classifier_only":
                lt_node = lc_node
            else:
                lt_node = lr_node

            record = LossRecord(
                step=step,
                lc=None if lc_node is None else lc_node.value.item(),
                lr=None if lr_node is None else lr_node.value.item(),
                lt=lt_node.value.item(),
            )
            result.log.append(record)
            if step_hook is not None:
                step_hook(record)
            if not math.isfinite(record.lt):
                result.diverged = True
                result.steps = step
                return result

            backward(tape, lt_node)
            grads = {name: node.grad for name, node in pnodes.items() if name not in frozen}
            params.tensors = adam_step(adam, params.tensors, grads, frozen)
            result.steps = step
        if epoch_hook is not None:
            epoch_hook(epoch + 1, result)
    return result
