"""Datasets: synthetic identity benchmark, directory ingestion, splits, batches.

The synthetic benchmark stands in for face corpora: each identity is a
fixed arrangement of Gaussian color blobs, and every sample re-renders
it under nuisances (illumination gain, integer translation, pixel
noise, occlusion-like clutter blobs).  Everything is a pure function of
the generator seed, so two runs with the same seed produce
byte-identical file trees.

Per-target protocol views put a ratio split of the target identity into
train/test and send every sample of every other identity to the test
side as unknowns; the training side never contains unknown-identity
samples.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rng import STREAM_GENERATOR, STREAM_SPLIT, DeterministicRng
from .tensor import Tensor, load_tensor, save_tensor

MANIFEST_NAME = "manifest.tsv"

log = logging.getLogger(__name__)


class DataError(Exception):
    """Dataset construction or decoding failure."""


@dataclass(frozen=True)
class IdentityGenSpec:
    """Knobs of the synthetic identity generator.

    Blob geometry and colors are drawn once per identity.  Everything
    else is per sample: illumination gain, integer translation jitter,
    pixel noise, and a variable number of clutter blobs at random
    positions, sizes, and strengths that play the role of occlusions.
    The clutter's sample-to-sample energy variance is what keeps raw
    reconstruction error from being a trivially good novelty score.
    """

    blob_count: int = 4
    center_range: tuple[float, float] = (0.2, 0.8)
    scale_range: tuple[float, float] = (0.10, 0.20)
    color_range: tuple[float, float] = (-0.9, 0.9)
    clutter_max_blobs: int = 5
    clutter_scale_range: tuple[float, float] = (0.05, 0.25)
    clutter_amplitude_range: tuple[float, float] = (0.2, 1.3)
    gain_range: tuple[float, float] = (0.6, 1.4)
    jitter: int = 3
    noise_std: float = 0.05


@dataclass(frozen=True)
class ManifestEntry:
    identity: str
    path: str
    split: str  # "train" | "test"


@dataclass(frozen=True)
class DatasetManifest:
    """Identity-labelled image corpus: header plus one line per file."""

    image_size: int
    channels: int
    seed: int
    ratio: float
    root: str
    entries: tuple[ManifestEntry, ...]
    fmt: str = "oct"
    resize: bool = False

    def identities(self) -> list[str]:
        return sorted({e.identity for e in self.entries})

    def by_identity(self) -> dict[str, list[ManifestEntry]]:
        groups: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            groups.setdefault(e.identity, []).append(e)
        return groups

    def save(self, path: str) -> None:
        rel_root = os.path.relpath(self.root, os.path.dirname(os.path.abspath(path)))
        lines = [
            f"image_size={self.image_size}",
            f"channels={self.channels}",
            f"seed={self.seed}",
            f"ratio={self.ratio!r}",
            f"root={rel_root}",
            f"format={self.fmt}",
            f"resize={'true' if self.resize else 'false'}",
            "",
        ]
        lines += [f"{e.identity}\t{e.path}\t{e.split}" for e in self.entries]
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        header: dict[str, str] = {}
        entries: list[ManifestEntry] = []
        in_header = True
        with open(path, "r", encoding="utf-8") as f:
            for raw in f:
                line = raw.rstrip("\n")
                if in_header:
                    if line == "":
                        in_header = False
                        continue
                    key, _, value = line.partition("=")
                    header[key] = value
                    continue
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3 or parts[2] not in ("train", "test"):
                    raise DataError(f"malformed manifest line {line!r} in {path}")
                entries.append(ManifestEntry(*parts))
        try:
            root = os.path.normpath(
                os.path.join(os.path.dirname(os.path.abspath(path)), header.get("root", "."))
            )
            return cls(
                image_size=int(header["image_size"]),
                channels=int(header["channels"]),
                seed=int(header["seed"]),
                ratio=float(header["ratio"]),
                root=root,
                entries=tuple(entries),
                fmt=header.get("format", "oct"),
                resize=header.get("resize", "false") == "true",
            )
        except KeyError as exc:
            raise DataError(f"manifest {path} missing header key {exc}") from None


def split_assignment(seed: int, identity_index: int, count: int, ratio: float) -> list[str]:
    """Seeded train/test tags for one identity's files at the given ratio."""
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must be in (0, 1), got {ratio}")
    rng = DeterministicRng(seed, STREAM_SPLIT).substream(identity_index)
    perm = rng.permutation(count)
    n_train = int(ratio * count + 0.5)
    tags = ["test"] * count
    for idx in perm[:n_train]:
        tags[int(idx)] = "train"
    return tags


# ---------------------------------------------------------------------------
# Synthetic identity benchmark
# ---------------------------------------------------------------------------


def _render_blobs(
    rng: DeterministicRng,
    count: int,
    channels: int,
    size: int,
    center_range: tuple[float, float],
    scale_range: tuple[float, float],
    color_range: tuple[float, float],
) -> np.ndarray:
    """Sum of anisotropic Gaussian color bumps, float64 [C,H,W]."""
    u = rng.uniforms(count * (4 + channels))
    c_lo, c_hi = center_range
    s_lo, s_hi = scale_range
    k_lo, k_hi = color_range
    centers = c_lo + (c_hi - c_lo) * u[: 2 * count].reshape(count, 2)
    scales = s_lo + (s_hi - s_lo) * u[2 * count : 4 * count].reshape(count, 2)
    colors = k_lo + (k_hi - k_lo) * u[4 * count :].reshape(count, channels)

    coords = (np.arange(size) + 0.5) / size
    ys = coords[:, None]
    xs = coords[None, :]
    img = np.zeros((channels, size, size), dtype=np.float64)
    for i in range(count):
        cy, cx = centers[i]
        sy, sx = scales[i]
        bump = np.exp(-0.5 * (((ys - cy) / sy) ** 2 + ((xs - cx) / sx) ** 2))
        img += colors[i][:, None, None] * bump
    return img


def _render_identity_base(
    rng: DeterministicRng, spec: IdentityGenSpec, channels: int, size: int
) -> np.ndarray:
    return _render_blobs(
        rng, spec.blob_count, channels, size,
        spec.center_range, spec.scale_range, spec.color_range,
    )


def _shift2d(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate with zero fill (background stays at the gray midpoint)."""
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[..., dst_y, dst_x] = img[..., src_y, src_x]
    return out


def _render_clutter(
    rng: DeterministicRng, spec: IdentityGenSpec, channels: int, size: int
) -> np.ndarray | None:
    """0..clutter_max_blobs occluder bumps with per-blob random strength."""
    count = int(rng.uniforms(1)[0] * (spec.clutter_max_blobs + 1))
    if count == 0:
        return None
    u = rng.uniforms(count * (5 + channels))
    c_lo, c_hi = spec.center_range
    s_lo, s_hi = spec.clutter_scale_range
    a_lo, a_hi = spec.clutter_amplitude_range
    centers = c_lo + (c_hi - c_lo) * u[: 2 * count].reshape(count, 2)
    scales = s_lo + (s_hi - s_lo) * u[2 * count : 4 * count].reshape(count, 2)
    amps = a_lo + (a_hi - a_lo) * u[4 * count : 5 * count]
    colors = (u[5 * count :].reshape(count, channels) * 2.0 - 1.0) * amps[:, None]

    coords = (np.arange(size) + 0.5) / size
    ys = coords[:, None]
    xs = coords[None, :]
    img = np.zeros((channels, size, size), dtype=np.float64)
    for i in range(count):
        cy, cx = centers[i]
        sy, sx = scales[i]
        bump = np.exp(-0.5 * (((ys - cy) / sy) ** 2 + ((xs - cx) / sx) ** 2))
        img += colors[i][:, None, None] * bump
    return img


def _render_sample(
    base: np.ndarray, rng: DeterministicRng, spec: IdentityGenSpec
) -> np.ndarray:
    channels, size = base.shape[0], base.shape[-1]
    u = rng.uniforms(3)
    g_lo, g_hi = spec.gain_range
    gain = g_lo + (g_hi - g_lo) * u[0]
    span = 2 * spec.jitter + 1
    dy = int(u[1] * span) - spec.jitter
    dx = int(u[2] * span) - spec.jitter
    img = gain * _shift2d(base, dy, dx)
    clutter = _render_clutter(rng, spec, channels, size)
    if clutter is not None:
        img = img + clutter
    img = img + rng.normals(img.size).reshape(img.shape) * spec.noise_std
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def generate_identity_set(
    out_dir: str,
    seed: int,
    identities: int,
    samples: int,
    spec: IdentityGenSpec = IdentityGenSpec(),
    image_size: int = 32,
    channels: int = 3,
    ratio: float = 0.8,
    fmt: str = "oct",
) -> DatasetManifest:
    """Write a seeded synthetic identity corpus plus its manifest.

    Layout: one subdirectory per identity, ``img_NNNN.<fmt>`` inside,
    ``manifest.tsv`` at the root.
    """
    if identities < 2:
        raise DataError(f"need >= 2 identities, got {identities}")
    if samples < 10:
        raise DataError(f"need >= 10 samples per identity, got {samples}")
    if fmt not in ("oct", "ppm"):
        raise DataError(f"unknown image format {fmt!r}")
    if fmt == "ppm" and channels != 3:
        raise DataError("ppm output requires 3 channels")

    rng = DeterministicRng(seed, STREAM_GENERATOR)
    entries: list[ManifestEntry] = []
    os.makedirs(out_dir, exist_ok=True)
    for i in range(identities):
        identity = f"id_{i:03d}"
        id_dir = os.path.join(out_dir, identity)
        os.makedirs(id_dir, exist_ok=True)
        base = _render_identity_base(rng.substream(i, 0), spec, channels, image_size)
        tags = split_assignment(seed, i, samples, ratio)
        for j in range(samples):
            img = _render_sample(base, rng.substream(i, j + 1), spec)
            rel = f"{identity}/img_{j:04d}.{fmt}"
            full = os.path.join(out_dir, rel)
            if fmt == "oct":
                save_tensor(Tensor(img), full)
            else:
                write_ppm(full, img)
            entries.append(ManifestEntry(identity, rel, tags[j]))

    manifest = DatasetManifest(
        image_size=image_size,
        channels=channels,
        seed=seed,
        ratio=ratio,
        root=out_dir,
        entries=tuple(entries),
        fmt=fmt,
    )
    manifest.save(os.path.join(out_dir, MANIFEST_NAME))
    return manifest


def identity_blob_centers(seed: int, identity_index: int, spec: IdentityGenSpec = IdentityGenSpec()) -> np.ndarray:
    """Blob centers an identity would be generated with (for distinctness checks)."""
    rng = DeterministicRng(seed, STREAM_GENERATOR).substream(identity_index, 0)
    u = rng.uniforms(spec.blob_count * 2)
    c_lo, c_hi = spec.center_range
    return c_lo + (c_hi - c_lo) * u.reshape(spec.blob_count, 2)


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255) and image loading
# ---------------------------------------------------------------------------


def write_ppm(path: str, img: np.ndarray) -> None:
    """Write a [3,H,W] image in [-1,1] as binary PPM."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"ppm wants [3,H,W], got {list(img.shape)}")
    h, w = img.shape[1:]
    levels = np.clip(np.round((img + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(levels.transpose(1, 2, 0).tobytes())


def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First `count` whitespace-separated header tokens; comments skipped."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise DataError("truncated ppm header")
        ch = data[i : i + 1]
        if ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            start = i
            while i < len(data) and not data[i : i + 1].isspace() and data[i : i + 1] != b"#":
                i += 1
            tokens.append(data[start:i])
    # Exactly one whitespace byte separates the header from the raster.
    return tokens, i + 1


def read_ppm(path: str) -> np.ndarray:
    """Read a binary PPM into [3,H,W] float32, 0..255 mapped linearly to [-1,1]."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _ppm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a P6 ppm (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    raster = data[offset : offset + 3 * w * h]
    if len(raster) != 3 * w * h:
        raise DataError(f"{path}: truncated raster")
    levels = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return (-1.0 + levels.transpose(2, 0, 1).astype(np.float32) * (2.0 / 255.0)).astype(np.float32)


def _fit_image(img: np.ndarray, size: int) -> np.ndarray:
    """Center-crop to square then nearest-neighbor resize to size x size."""
    _, h, w = img.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    img = img[:, top : top + side, left : left + side]
    if side != size:
        idx = (np.arange(size) * side) // size
        img = img[:, idx][:, :, idx]
    return np.ascontiguousarray(img)


def _load_image(manifest: DatasetManifest, entry: ManifestEntry) -> np.ndarray:
    path = os.path.join(manifest.root, entry.path)
    if entry.path.endswith(".oct"):
        img = load_tensor(path).astype("f32").data
    elif entry.path.endswith(".ppm"):
        img = read_ppm(path)
    else:
        raise DataError(f"{path}: unknown image extension")
    if img.ndim != 3 or img.shape[0] != manifest.channels:
        raise DataError(
            f"{path}: has shape {list(img.shape)}, expected {manifest.channels} channels"
        )
    if img.shape[1:] != (manifest.image_size, manifest.image_size):
        if not manifest.resize:
            raise DataError(
                f"{path}: size {img.shape[1]}x{img.shape[2]} != manifest"
                f" {manifest.image_size} and resize is disabled"
            )
        img = _fit_image(img, manifest.image_size)
    return img


def load_images(manifest: DatasetManifest, entries: Sequence[ManifestEntry]) -> np.ndarray:
    """Stack the given entries into one [M,C,H,W] float32 array."""
    out = np.empty(
        (len(entries), manifest.channels, manifest.image_size, manifest.image_size),
        dtype=np.float32,
    )
    for i, entry in enumerate(entries):
        out[i] = _load_image(manifest, entry)
    return out


class DatasetCache:
    """All manifest images loaded once, addressable by entry."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.images = load_images(manifest, manifest.entries)
        self._row = {e: i for i, e in enumerate(manifest.entries)}

    def rows(self, entries: Sequence[ManifestEntry]) -> np.ndarray:
        return self.images[[self._row[e] for e in entries]]


def ingest_directory(
    root: str,
    seed: int,
    ratio: float,
    image_size: int | None = None,
    channels: int = 3,
    resize: bool = False,
    tolerant: bool = False,
) -> DatasetManifest:
    """Build a manifest over an existing one-subdirectory-per-identity tree.

    Accepts .ppm (P6) and .oct files.  All images must share one size
    unless ``resize`` enables center-crop + nearest resize at load time,
    which then requires ``image_size``.  Undecodable files raise, or are
    skipped with a warning entry when ``tolerant`` is set.
    """
    identities = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if len(identities) < 2:
        raise DataError(f"need >= 2 identity subdirectories under {root}")

    probed_size: int | None = None
    groups: list[tuple[str, list[str]]] = []
    skipped: list[str] = []
    for identity in identities:
        files = sorted(
            f
            for f in os.listdir(os.path.join(root, identity))
            if f.endswith((".ppm", ".oct"))
        )
        kept: list[str] = []
        for name in files:
            rel = f"{identity}/{name}"
            path = os.path.join(root, rel)
            try:
                if name.endswith(".ppm"):
                    img = read_ppm(path)
                else:
                    img = load_tensor(path).data
                if img.ndim != 3 or img.shape[0] != channels:
                    raise DataError(f"{path}: expected {channels}xHxW, got {list(img.shape)}")
                if img.shape[1] != img.shape[2] and not resize:
                    raise DataError(f"{path}: non-square image and resize is disabled")
            except DataError as exc:
                if not tolerant:
                    raise
                log.warning("skipping undecodable image %s: %s", path, exc)
                skipped.append(rel)
                continue
            if not resize:
                if probed_size is None:
                    probed_size = img.shape[1]
                elif img.shape[1] != probed_size:
                    raise DataError(
                        f"{path}: size {img.shape[1]} != {probed_size} and resize is disabled"
                    )
            kept.append(rel)
        if kept:
            groups.append((identity, kept))

    if len(groups) < 2:
        raise DataError(f"fewer than 2 identities with decodable images under {root}")
    if resize:
        if image_size is None:
            raise DataError("resize requires an explicit image_size")
        final_size = image_size
    else:
        final_size = probed_size if image_size is None else image_size
        if probed_size is not None and final_size != probed_size:
            raise DataError(
                f"images are {probed_size}px but config wants {final_size}px; enable resize"
            )

    entries: list[ManifestEntry] = []
    for index, (identity, rels) in enumerate(groups):
        tags = split_assignment(seed, index, len(rels), ratio)
        entries += [ManifestEntry(identity, rel, tag) for rel, tag in zip(rels, tags)]

    return DatasetManifest(
        image_size=final_size,
        channels=channels,
        seed=seed,
        ratio=ratio,
        root=root,
        entries=tuple(entries),
        fmt="mixed",
        resize=resize,
    )


# ---------------------------------------------------------------------------
# Protocol views and batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitView:
    """Per-target protocol view: target-only train set, everything else test."""

    target: str
    train: tuple[ManifestEntry, ...]
    test: tuple[ManifestEntry, ...]

    def __post_init__(self):
        offenders = [e for e in self.train if e.identity != self.target]
        if offenders:
            raise DataError(
                f"protocol violation: {len(offenders)} non-target samples in train set"
            )

    def test_is_target(self) -> np.ndarray:
        return np.array([e.identity == self.target for e in self.test], dtype=bool)


def build_splits(
    manifest: DatasetManifest, target: str, ratio: float | None = None
) -> SplitView:
    """Target files split train/test by seeded shuffle; unknowns all to test."""
    ratio = manifest.ratio if ratio is None else ratio
    ids = manifest.identities()
    if target not in ids:
        raise DataError(f"unknown identity {target!r}; manifest has {ids}")
    groups = manifest.by_identity()
    train: list[ManifestEntry] = []
    test: list[ManifestEntry] = []
    for index, identity in enumerate(ids):
        files = groups[identity]
        if identity != target:
            test += files
            continue
        tags = split_assignment(manifest.seed, index, len(files), ratio)
        for entry, tag in zip(files, tags):
            (train if tag == "train" else test).append(entry)
    return SplitView(target=target, train=tuple(train), test=tuple(test))


@dataclass
class Batch:
    images: Tensor
    identities: tuple[str, ...]
    indices: np.ndarray


class BatchCursor:
    """Seeded epoch shuffles; batches drawn without replacement per epoch."""

    def __init__(
        self,
        images: np.ndarray,
        identities: Sequence[str],
        rng: DeterministicRng,
        batch_size: int,
    ):
        if len(images) == 0:
            raise DataError("empty training set")
        if batch_size < 1:
            raise DataError(f"batch size must be >= 1, got {batch_size}")
        self._images = images
        self._identities = tuple(identities)
        self._rng = rng
        self._batch = batch_size
        self.epoch = 0
        self._pos = 0
        self._perm = rng.substream(0).permutation(len(images))

    def batches_per_epoch(self) -> int:
        n = len(self._images)
        return (n + self._batch - 1) // self._batch

    def next_batch(self) -> Batch:
        n = len(self._images)
        if self._pos >= n:
            self.epoch += 1
            self._pos = 0
            self._perm = self._rng.substream(self.epoch).permutation(n)
        take = self._perm[self._pos : min(self._pos + self._batch, n)]
        self._pos += len(take)
        return Batch(
            images=Tensor(self._images[take]),
            identities=tuple(self._identities[i] for i in take),
            indices=take,
        )
