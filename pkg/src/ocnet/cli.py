"""Command-line entry point.

Subcommands cover the whole workflow: dataset generation and ingestion,
single-target training, checkpoint evaluation, the all-targets protocol,
the three-way ablation suite, gradient checking, and feature export.
Every command writes the fully resolved config snapshot into its output
directory, so runs are reproducible from the snapshot alone.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import data as data_mod
from . import evaluate as eval_mod
from .config import ConfigError, RunConfig
from .data import DataError, DatasetCache, DatasetManifest, IdentityGenSpec
from .model import (
    ArchConfig,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
    training_loss_builder,
)
from .optim import NumericalError
from .rng import DeterministicRng, STREAM_GENERATOR
from .tensor import gradient_check
from .train import MODES, LossRecord, TrainResult, train_model

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

GRADCHECK_TOLERANCE = 1e-5


class NumericalFailure(Exception):
    pass


def _prepare_out(config: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    config.save(os.path.join(out_dir, "config.resolved"))


def _load_manifest(data_dir: str) -> DatasetManifest:
    path = os.path.join(data_dir, data_mod.MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f"no {data_mod.MANIFEST_NAME} under {data_dir}")
    return DatasetManifest.load(path)


def _check_arch_vs_manifest(arch: ArchConfig, manifest: DatasetManifest) -> None:
    if (manifest.image_size, manifest.channels) != (arch.image_size, arch.image_channels):
        raise DataError(
            f"dataset is {manifest.channels}x{manifest.image_size}x{manifest.image_size},"
            f" architecture wants {arch.image_channels}x{arch.image_size}x{arch.image_size}"
        )


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(value)


def _log_columns(mode: str) -> list[str]:
    if mode == "classifier_only":
        return ["step", "lc", "lt"]
    if mode == "autoencoder_only":
        return ["step", "lr", "lt"]
    return ["step", "lc", "lr", "lt"]


def _log_line(mode: str, rec: LossRecord) -> str:
    if mode == "classifier_only":
        fields = [str(rec.step), _fmt(rec.lc), _fmt(rec.lt)]
    elif mode == "autoencoder_only":
        fields = [str(rec.step), _fmt(rec.lr), _fmt(rec.lt)]
    else:
        fields = [str(rec.step), _fmt(rec.lc), _fmt(rec.lr), _fmt(rec.lt)]
    return "\t".join(fields)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = RunConfig.load(args.config)
    _prepare_out(config, args.out)
    spec = IdentityGenSpec(blob_count=config.getint("data.blob_count"))
    manifest = data_mod.generate_identity_set(
        out_dir=args.out,
        seed=config.getint("data.gen_seed"),
        identities=config.getint("data.identities"),
        samples=config.getint("data.samples"),
        spec=spec,
        image_size=config.arch().image_size,
        channels=config.arch().image_channels,
        ratio=config.getfloat("data.ratio"),
        fmt=config.values["data.format"],
    )
    print(f"wrote {len(manifest.entries)} images for {len(manifest.identities())} identities to {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    config = RunConfig.load(args.config)
    _prepare_out(config, args.out)
    manifest = data_mod.ingest_directory(
        root=args.root,
        seed=config.getint("data.gen_seed"),
        ratio=config.getfloat("data.ratio"),
        image_size=config.arch().image_size if args.resize else None,
        channels=config.arch().image_channels,
        resize=args.resize,
        tolerant=args.tolerant,
    )
    manifest.save(os.path.join(args.out, data_mod.MANIFEST_NAME))
    print(f"ingested {len(manifest.entries)} images for {len(manifest.identities())} identities")
    return EXIT_OK


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    _prepare_out(config, args.out)
    manifest = _load_manifest(args.data)
    arch = config.arch()
    _check_arch_vs_manifest(arch, manifest)
    settings = config.train_settings(args.mode)
    view = data_mod.build_splits(manifest, args.target, config.getfloat("data.ratio"))
    images = data_mod.load_images(manifest, view.train)

    meta = {
        "target": args.target,
        "mode": settings.mode,
        "seed": str(settings.seed),
        "ratio": config.values["data.ratio"],
        "lambda_r": config.values["loss.lambda_r"],
        "pseudo_mu": config.values["pseudo.mu"],
        "pseudo_sigma": config.values["pseudo.sigma"],
    }
    columns = _log_columns(settings.mode)
    log_path = os.path.join(args.out, "train_log.tsv")
    with open(log_path, "w", encoding="utf-8") as log_file:
        log_file.write("# columns: " + "\t".join(columns) + "\n")

        def on_step(rec: LossRecord) -> None:
            log_file.write(_log_line(settings.mode, rec) + "\n")

        def on_epoch(epoch: int, state: TrainResult) -> None:
            save_checkpoint(
                os.path.join(args.out, f"checkpoint_epoch_{epoch:03d}.ockpt"),
                state.params,
                meta={**meta, "epoch": str(epoch)},
                adam=state.adam,
            )

        result = train_model(
            arch,
            images,
            [e.identity for e in view.train],
            settings,
            step_hook=on_step,
            epoch_hook=on_epoch,
        )

    save_checkpoint(
        os.path.join(args.out, "checkpoint.ockpt"),
        result.params,
        meta={**meta, "steps": str(result.steps), "diverged": str(result.diverged).lower()},
        adam=result.adam,
    )
    if result.diverged:
        raise NumericalFailure(
            f"non-finite loss at step {result.steps}; last good checkpoint retained in {args.out}"
        )
    print(f"trained {result.steps} steps; final loss {result.log[-1].lt:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = RunConfig.load(args.config)
    _prepare_out(config, args.out)
    manifest = _load_manifest(args.data)
    params, meta, _ = load_checkpoint(args.checkpoint, expect_config=config.arch())
    _check_arch_vs_manifest(params.config, manifest)
    target = args.target or meta.get("target")
    if not target:
        raise DataError("no --target given and checkpoint carries no target metadata")
    mode = args.mode or meta.get("mode", "full")
    view = data_mod.build_splits(manifest, target, config.getfloat("data.ratio"))
    cache = DatasetCache(manifest)
    entries = eval_mod.capped_test_entries(view.test, target, config.getint("eval.cap_unknowns"))
    samples = eval_mod.score_samples(
        params,
        cache.rows(entries),
        eval_mod.scoring_for_mode(mode),
        [e.identity == target for e in entries],
        [e.identity for e in entries],
        config.getint("eval.batch"),
    )
    roc = eval_mod.auroc(samples)
    with open(os.path.join(args.out, "scores.tsv"), "w", encoding="utf-8") as f:
        for s in samples:
            f.write(f"{s.identity}\t{int(s.is_target)}\t{s.score!r}\n")
    with open(os.path.join(args.out, "roc.tsv"), "w", encoding="utf-8") as f:
        for fpr, tpr in roc.points:
            f.write(f"{fpr!r}\t{tpr!r}\n")
    with open(os.path.join(args.out, "result.tsv"), "w", encoding="utf-8") as f:
        f.write(f"{mode}\t{target}\t{roc.auroc!r}\n")
    print(f"AUROC for target {target}: {roc.auroc:.4f} ({roc.n_target} target / {roc.n_unknown} unknown)")
    return EXIT_OK


def cmd_protocol(args) -> int:
    config = RunConfig.load(args.config)
    _prepare_out(config, args.out)
    manifest = _load_manifest(args.data)
    arch = config.arch()
    _check_arch_vs_manifest(arch, manifest)
    settings = config.train_settings(args.mode)
    report = eval_mod.run_protocol(
        manifest,
        arch,
        settings,
        ratio=config.getfloat("data.ratio"),
        cap_unknowns=config.getint("eval.cap_unknowns"),
        eval_batch=config.getint("eval.batch"),
        workers=args.workers or config.getint("eval.workers"),
    )
    lines = report.machine_lines()
    with open(os.path.join(args.out, "report.tsv"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as f:
        f.write(report.table_text() + "\n")
    for line in lines:
        print(line)
    diverged = [e.target for e in report.entries if e.diverged]
    if diverged:
        print(f"warning: diverged targets excluded from mean: {diverged}", file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = RunConfig.load(args.config)
    _prepare_out(config, args.out)
    manifest = _load_manifest(args.data)
    arch = config.arch()
    _check_arch_vs_manifest(arch, manifest)
    modes = [m.strip() for m in config.values["eval.modes"].split(",") if m.strip()]
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"eval.modes contains unknown mode {mode!r}")
    result = eval_mod.run_ablation_suite(
        manifest,
        arch,
        config.train_settings("full"),
        seeds=config.getints("eval.seeds"),
        ratio=config.getfloat("data.ratio"),
        cap_unknowns=config.getint("eval.cap_unknowns"),
        eval_batch=config.getint("eval.batch"),
        workers=args.workers or config.getint("eval.workers"),
        modes=modes,
    )
    with open(os.path.join(args.out, "ablation.tsv"), "w", encoding="utf-8") as f:
        f.write("\n".join(result.machine_lines()) + "\n")
    table = result.table_text()
    with open(os.path.join(args.out, "ablation.txt"), "w", encoding="utf-8") as f:
        f.write(table + "\n")
    print(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = RunConfig.load(args.config)
    if args.out:
        _prepare_out(config, args.out)
    arch = ArchConfig.tiny()
    rng = DeterministicRng(config.getint("train.seed"), STREAM_GENERATOR)
    n = 2
    images = (rng.uniforms(n * arch.image_channels * arch.image_size ** 2) * 2 - 1).reshape(
        n, arch.image_channels, arch.image_size, arch.image_size
    )
    pseudo = (
        rng.normals(n * arch.feature_dim).reshape(n, arch.feature_dim)
        * config.getfloat("pseudo.sigma")
        + config.getfloat("pseudo.mu")
    )
    params, build, _ = training_loss_builder(
        arch, images, pseudo, config.getfloat("loss.lambda_r"), seed=config.getint("train.seed")
    )
    max_rel = gradient_check(build, params, step=1e-5)
    print(f"max relative gradient error: {max_rel:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    if max_rel > GRADCHECK_TOLERANCE:
        raise NumericalFailure(f"gradient check failed: {max_rel:.3e} > {GRADCHECK_TOLERANCE:.0e}")
    return EXIT_OK


def cmd_export_features(args) -> int:
    config = RunConfig.load(args.config)
    _prepare_out(config, args.out)
    manifest = _load_manifest(args.data)
    params, meta, _ = load_checkpoint(args.checkpoint, expect_config=config.arch())
    _check_arch_vs_manifest(params.config, manifest)
    target = args.target or meta.get("target")
    if not target:
        raise DataError("no --target given and checkpoint carries no target metadata")
    count = eval_mod.export_features(
        params,
        manifest,
        os.path.join(args.out, "features.oct"),
        os.path.join(args.out, "labels.tsv"),
        target,
        batch_size=config.getint("eval.batch"),
    )
    print(f"exported {count} feature rows (dim {params.config.feature_dim})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ocnet",
        description="One-class classification: training, evaluation, and ablation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out=True):
        p.add_argument("--config", default=None, help="key=value config file (defaults apply)")
        if data:
            p.add_argument("--data", required=True, help="dataset directory with manifest.tsv")
        if out:
            p.add_argument("--out", required=True, help="output/run directory")

    p = sub.add_parser("gen-data", help="generate the synthetic identity benchmark")
    common(p, data=False)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("ingest", help="build a manifest over an existing image tree")
    common(p, data=False)
    p.add_argument("--root", required=True, help="directory with one subdirectory per identity")
    p.add_argument("--resize", action="store_true", help="center-crop and resize to arch.image_size")
    p.add_argument("--tolerant", action="store_true", help="skip undecodable files instead of failing")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="train one target identity")
    common(p)
    p.add_argument("--target", required=True)
    p.add_argument("--mode", default="full", choices=MODES)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a target's test view")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", default=None, help="defaults to the checkpoint's target")
    p.add_argument("--mode", default=None, choices=MODES, help="defaults to the checkpoint's mode")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("protocol", help="train and evaluate every identity as target")
    common(p)
    p.add_argument("--mode", default="full", choices=MODES)
    p.add_argument("--workers", type=int, default=0, help="parallel per-target workers")
    p.set_defaults(fn=cmd_protocol)

    p = sub.add_parser("ablate", help="run all ablation modes over the configured seeds")
    common(p)
    p.add_argument("--workers", type=int, default=0)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full training objective")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("export-features", help="dump feature vectors for external visualization")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", default=None)
    p.set_defaults(fn=cmd_export_features)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, eval_mod.ProtocolError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, NumericalError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
