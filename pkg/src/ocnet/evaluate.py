"""Scoring, ROC/AUROC, the per-target protocol runner, and the ablation suite.

Test samples are scored either by the classifier probability (features
only, no pseudo-negative rows at test time) or by the negated L1
reconstruction error for the autoencoder baseline.  AUROC comes from
the rank statistic with ties counted one half, and is cross-checked
against the trapezoidal area of the ROC points on every call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .data import DataError, DatasetCache, DatasetManifest, ManifestEntry, build_splits
from .model import (
    ArchConfig,
    ModelParams,
    classifier_probs,
    decode,
    extract_features,
    stage_params,
)
from .tensor import Tape, Tensor, save_tensor
from .train import TrainResult, TrainSettings, train_model

SCORE_CLASSIFIER = "classifier_prob"
SCORE_RECON = "neg_recon_error"
_SCORING = {
    "full": SCORE_CLASSIFIER,
    "classifier_only": SCORE_CLASSIFIER,
    "autoencoder_only": SCORE_RECON,
}


class ProtocolError(ValueError):
    pass


def scoring_for_mode(train_mode: str) -> str:
    try:
        return _SCORING[train_mode]
    except KeyError:
        raise ProtocolError(f"unknown training mode {train_mode!r}") from None


@dataclass(frozen=True)
class ScoredSample:
    score: float
    is_target: bool
    identity: str
    mode: str


def extract_feature_rows(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Feature matrix [M,D] for raw images, computed forward-only in batches."""
    arch = params.config
    out = np.empty((len(images), arch.feature_dim), dtype=np.float32)
    for start in range(0, len(images), batch_size):
        tape = Tape()
        pnodes = stage_params(tape, params)
        x = tape.leaf(Tensor(images[start : start + batch_size]))
        out[start : start + len(x.data)] = extract_features(tape, pnodes, arch, x).data
    return out


def score_values(
    params: ModelParams,
    images: np.ndarray,
    scoring: str,
    batch_size: int = 256,
) -> np.ndarray:
    """Per-image scores, order preserved; higher means more target-like."""
    arch = params.config
    n, c, h, w = images.shape
    if (c, h, w) != (arch.image_channels, arch.image_size, arch.image_size):
        raise ProtocolError(
            f"images [{c},{h},{w}] do not match checkpoint config"
            f" [{arch.image_channels},{arch.image_size},{arch.image_size}]"
        )
    scores = np.empty(n, dtype=np.float64)
    for start in range(0, n, batch_size):
        tape = Tape()
        pnodes = stage_params(tape, params)
        x = tape.leaf(Tensor(images[start : start + batch_size]))
        feats = extract_features(tape, pnodes, arch, x)
        if scoring == SCORE_CLASSIFIER:
            probs = classifier_probs(tape, pnodes, arch, ops.instance_norm_vec(feats))
            scores[start : start + len(x.data)] = probs.data
        elif scoring == SCORE_RECON:
            rec = decode(tape, pnodes, arch, feats)
            err = np.abs(x.data - rec.data).sum(axis=(1, 2, 3))
            scores[start : start + len(x.data)] = -err
        else:
            raise ProtocolError(f"unknown scoring mode {scoring!r}")
    return scores


def score_samples(
    params: ModelParams,
    images: np.ndarray,
    scoring: str,
    is_target: Sequence[bool],
    identities: Sequence[str],
    batch_size: int = 256,
) -> list[ScoredSample]:
    values = score_values(params, images, scoring, batch_size)
    return [
        ScoredSample(float(s), bool(t), str(i), scoring)
        for s, t, i in zip(values, is_target, identities)
    ]


# ---------------------------------------------------------------------------
# AUROC
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RocResult:
    points: tuple[tuple[float, float], ...]  # (FPR, TPR), (0,0) .. (1,1)
    auroc: float
    n_target: int
    n_unknown: int


def auroc(samples: Sequence[ScoredSample]) -> RocResult:
    """Rank-statistic AUROC (ties count one half) plus the ROC curve.

    The trapezoidal area of the returned points is recomputed internally
    and must match the rank statistic; a disagreement is a bug, not an
    input error.
    """
    scores = np.array([s.score for s in samples], dtype=np.float64)
    targets = np.array([s.is_target for s in samples], dtype=bool)
    n_t = int(targets.sum())
    n_u = len(samples) - n_t
    if n_t == 0 or n_u == 0:
        raise ProtocolError(
            f"AUROC needs both classes, got {n_t} target / {n_u} unknown samples"
        )

    # Rank statistic over the ascending order with midranks for ties.
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    t_sorted = targets[order]
    boundaries = np.concatenate(
        [[0], np.flatnonzero(np.diff(s_sorted)) + 1, [len(s_sorted)]]
    )
    rank_sum = 0.0
    for g in range(len(boundaries) - 1):
        lo, hi = int(boundaries[g]), int(boundaries[g + 1])
        midrank = (lo + 1 + hi) / 2.0
        rank_sum += midrank * int(t_sorted[lo:hi].sum())
    u_stat = rank_sum - n_t * (n_t + 1) / 2.0
    value = u_stat / (n_t * n_u)

    # ROC points over descending thresholds.
    points: list[tuple[float, float]] = [(0.0, 0.0)]
    tp = fp = 0
    for g in range(len(boundaries) - 1, 0, -1):
        lo, hi = int(boundaries[g - 1]), int(boundaries[g])
        t_g = int(t_sorted[lo:hi].sum())
        tp += t_g
        fp += (hi - lo) - t_g
        points.append((fp / n_u, tp / n_t))

    area = math.fsum(
        (x1 - x0) * (y1 + y0) * 0.5
        for (x0, y0), (x1, y1) in zip(points, points[1:])
    )
    if abs(area - value) > 1e-12:
        raise AssertionError(
            f"rank AUROC {value!r} and trapezoidal area {area!r} disagree"
        )
    return RocResult(points=tuple(points), auroc=value, n_target=n_t, n_unknown=n_u)


# ---------------------------------------------------------------------------
# Protocol runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetResult:
    target: str
    auroc: float | None
    n_target: int
    n_unknown: int
    diverged: bool = False


@dataclass
class ProtocolReport:
    mode: str
    seed: int
    entries: list[TargetResult]
    mean: float
    std: float

    def values(self) -> list[float]:
        return [e.auroc for e in self.entries if e.auroc is not None]

    def machine_lines(self) -> list[str]:
        lines = [
            f"{self.mode}\t{e.target}\t{'DIVERGED' if e.auroc is None else repr(e.auroc)}"
            for e in self.entries
        ]
        lines.append(f"{self.mode}\tMEAN\t{self.mean!r}")
        lines.append(f"{self.mode}\tSTD\t{self.std!r}")
        return lines

    def table_text(self) -> str:
        lines = [f"mode: {self.mode}   train seed: {self.seed}"]
        lines.append(f"{'target':<12}{'auroc':>10}{'n_target':>10}{'n_unknown':>11}")
        for e in self.entries:
            value = "DIVERGED" if e.auroc is None else f"{e.auroc:.4f}"
            lines.append(f"{e.target:<12}{value:>10}{e.n_target:>10}{e.n_unknown:>11}")
        lines.append(f"mean +- std: {self.mean:.4f} +- {self.std:.4f} (population)")
        return "\n".join(lines)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    if not values:
        return float("nan"), float("nan")
    m = math.fsum(values) / len(values)
    var = math.fsum((v - m) ** 2 for v in values) / len(values)
    return m, math.sqrt(var)


def capped_test_entries(
    view_test: Sequence[ManifestEntry], target: str, cap_unknowns: int
) -> list[ManifestEntry]:
    if cap_unknowns <= 0:
        return list(view_test)
    kept: list[ManifestEntry] = []
    taken: dict[str, int] = {}
    for entry in view_test:
        if entry.identity == target:
            kept.append(entry)
            continue
        if taken.get(entry.identity, 0) < cap_unknowns:
            taken[entry.identity] = taken.get(entry.identity, 0) + 1
            kept.append(entry)
    return kept


def evaluate_target(
    params: ModelParams,
    cache: DatasetCache,
    view,
    mode: str,
    cap_unknowns: int = 0,
    eval_batch: int = 256,
) -> RocResult:
    entries = capped_test_entries(view.test, view.target, cap_unknowns)
    images = cache.rows(entries)
    samples = score_samples(
        params,
        images,
        scoring_for_mode(mode),
        [e.identity == view.target for e in entries],
        [e.identity for e in entries],
        eval_batch,
    )
    return auroc(samples)


def run_target(
    manifest: DatasetManifest,
    cache: DatasetCache,
    arch: ArchConfig,
    settings: TrainSettings,
    target: str,
    ratio: float | None = None,
    cap_unknowns: int = 0,
    eval_batch: int = 256,
) -> tuple[TargetResult, TrainResult]:
    """Train one fresh model for one target and score its test view."""
    view = build_splits(manifest, target, ratio)
    train_images = cache.rows(view.train)
    outcome = train_model(arch, train_images, [e.identity for e in view.train], settings)
    is_target = view.test_is_target()
    n_t, n_u = int(is_target.sum()), int((~is_target).sum())
    if outcome.diverged:
        return TargetResult(target, None, n_t, n_u, diverged=True), outcome
    roc = evaluate_target(outcome.params, cache, view, settings.mode, cap_unknowns, eval_batch)
    return (
        TargetResult(target, roc.auroc, roc.n_target, roc.n_unknown),
        outcome,
    )


_POOL_CTX: dict = {}


def _pool_init(manifest, cache, arch, settings, ratio, cap_unknowns, eval_batch):
    _POOL_CTX.update(
        manifest=manifest, cache=cache, arch=arch, settings=settings,
        ratio=ratio, cap_unknowns=cap_unknowns, eval_batch=eval_batch,
    )


def _pool_run(target: str) -> TargetResult:
    c = _POOL_CTX
    result, _ = run_target(
        c["manifest"], c["cache"], c["arch"], c["settings"], target,
        c["ratio"], c["cap_unknowns"], c["eval_batch"],
    )
    return result


def run_protocol(
    manifest: DatasetManifest,
    arch: ArchConfig,
    settings: TrainSettings,
    cache: DatasetCache | None = None,
    ratio: float | None = None,
    cap_unknowns: int = 0,
    eval_batch: int = 256,
    workers: int = 1,
) -> ProtocolReport:
    """Every identity takes a turn as the target; aggregate mean +- std.

    Per-target runs are independent (own model, optimizer, streams), so
    they may execute in parallel; results are ordered by identity and do
    not depend on scheduling.  Diverged runs are excluded from the mean
    and flagged in their entry.
    """
    ids = manifest.identities()
    if len(ids) < 2:
        raise ProtocolError("protocol needs >= 2 identities")
    cache = cache or DatasetCache(manifest)

    if workers > 1:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ctx.Pool(
            workers,
            initializer=_pool_init,
            initargs=(manifest, cache, arch, settings, ratio, cap_unknowns, eval_batch),
        ) as pool:
            entries = pool.map(_pool_run, ids)
    else:
        entries = [
            run_target(manifest, cache, arch, settings, t, ratio, cap_unknowns, eval_batch)[0]
            for t in ids
        ]

    mean, std = mean_std([e.auroc for e in entries if e.auroc is not None])
    return ProtocolReport(
        mode=settings.mode, seed=settings.seed, entries=entries, mean=mean, std=std
    )


# ---------------------------------------------------------------------------
# Ablation suite
# ---------------------------------------------------------------------------

ABLATION_MODES = ("autoencoder_only", "classifier_only", "full")


@dataclass
class AblationResult:
    reports: dict[str, list[ProtocolReport]] = field(default_factory=dict)

    def pooled(self, mode: str) -> list[float]:
        values: list[float] = []
        for report in self.reports[mode]:
            values += report.values()
        return values

    def mode_mean_std(self, mode: str) -> tuple[float, float]:
        return mean_std(self.pooled(mode))

    def table_text(self) -> str:
        lines = [f"{'mode':<18}{'mean':>10}{'std':>10}{'runs':>7}"]
        for mode in ABLATION_MODES:
            m, s = self.mode_mean_std(mode)
            lines.append(f"{mode:<18}{m:>10.4f}{s:>10.4f}{len(self.pooled(mode)):>7}")
        lines.append("")
        lines.append("pairwise mean differences:")
        for i, a in enumerate(ABLATION_MODES):
            for b in ABLATION_MODES[i + 1 :]:
                diff = self.mode_mean_std(b)[0] - self.mode_mean_std(a)[0]
                lines.append(f"  {b} - {a} = {diff:+.4f}")
        return "\n".join(lines)

    def machine_lines(self) -> list[str]:
        lines: list[str] = []
        for mode in ABLATION_MODES:
            for report in self.reports[mode]:
                lines += [
                    f"{mode}\t{e.target}\t{'DIVERGED' if e.auroc is None else repr(e.auroc)}"
                    for e in report.entries
                ]
            m, s = self.mode_mean_std(mode)
            lines.append(f"{mode}\tMEAN\t{m!r}")
            lines.append(f"{mode}\tSTD\t{s!r}")
        return lines


def run_ablation_suite(
    manifest: DatasetManifest,
    arch: ArchConfig,
    base_settings: TrainSettings,
    seeds: Sequence[int],
    cache: DatasetCache | None = None,
    ratio: float | None = None,
    cap_unknowns: int = 0,
    eval_batch: int = 256,
    workers: int = 1,
    modes: Sequence[str] = ABLATION_MODES,
) -> AblationResult:
    """All ablation modes on identical splits and seeds."""
    from dataclasses import replace

    cache = cache or DatasetCache(manifest)
    result = AblationResult(reports={m: [] for m in modes})
    for mode in modes:
        for seed in seeds:
            settings = replace(base_settings, mode=mode, seed=seed)
            result.reports[mode].append(
                run_protocol(
                    manifest, arch, settings, cache, ratio, cap_unknowns, eval_batch, workers
                )
            )
    return result


# ---------------------------------------------------------------------------
# Feature export
# ---------------------------------------------------------------------------


def export_features(
    params: ModelParams,
    manifest: DatasetManifest,
    out_features: str,
    out_labels: str,
    target: str,
    cache: DatasetCache | None = None,
    batch_size: int = 256,
) -> int:
    """Dump the [M,D] feature matrix plus an aligned label file.

    The label file has exactly one ``identity<TAB>is_target<TAB>split``
    line per feature row, in manifest order, for external visualization
    tools.  Returns M.
    """
    if target not in manifest.identities():
        raise DataError(f"unknown identity {target!r}")
    cache = cache or DatasetCache(manifest)
    feats = extract_feature_rows(params, cache.images, batch_size)
    save_tensor(Tensor(feats), out_features)
    with open(out_labels, "w", encoding="utf-8") as f:
        for entry in manifest.entries:
            flag = 1 if entry.identity == target else 0
            f.write(f"{entry.identity}\t{flag}\t{entry.split}\n")
    return len(manifest.entries)
