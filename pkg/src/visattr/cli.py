"""Command-line operator surface: train, embed, eval, synth, ablate.

Exit codes: 0 success, 2 config/validation error, 3 I/O error, 4 numeric
failure (training aborts on the first non-finite loss rather than
continuing). Every command is deterministic given (seed, inputs).
"""

from __future__ import annotations

import argparse
import statistics
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig, parse_config
from .data import (DatasetManifest, SyntheticSpec, generate_synthetic,
                   load_manifest, load_training_images)
from .errors import (ConfigError, DimensionError, ManifestError,
                     NumericFailure, UndefinedMetricError)
from .metrics import (EmbeddingSet, auc, average_precision, compatibility_score,
                      fitb_answer, knn_category_accuracy, read_embeddings,
                      recall_at_k, write_embeddings)
from .model import Encoder, EncoderConfig
from .pretext import LossWeights, PretextTrainer

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _encoder_config(config: RunConfig) -> EncoderConfig:
    return EncoderConfig(widths=config.widths, kernel=config.kernel,
                         n_feat=config.n_feat, input_side=config.input_side,
                         n_bins=config.n_bins, d_slpd=config.d_slpd,
                         td_channels=config.td_channels)


def _build_trainer(config: RunConfig, manifest: DatasetManifest) -> PretextTrainer:
    model = Encoder(_encoder_config(config), seed=config.seed)
    _, images = load_training_images(manifest, config.input_side)
    return PretextTrainer(
        model, images,
        pretext=config.pretext,
        weights=LossWeights(config.lambda_rgb, config.lambda_slpd, config.lambda_td),
        temperature=config.tau,
        momentum=config.eta,
        patch_ratio_range=(config.patch_ratio_lo, config.patch_ratio_hi),
        id_crop_range=(config.id_crop_lo, config.id_crop_hi),
        color_distortion=config.color_distortion,
        id_flip=config.id_flip,
        exclude_background=config.exclude_background,
        batch_size=config.batch_size,
        lr=config.lr,
        seed=config.seed,
    )


def _require(value: str, name: str) -> str:
    if not value:
        raise ConfigError(f"{name} path required (config [paths] or command flag)")
    return value


# -- commands ----------------------------------------------------------------------


def cmd_train(config: RunConfig, resume: bool) -> int:
    manifest = load_manifest(_require(config.manifest, "manifest"))
    checkpoint_path = Path(_require(config.checkpoint, "checkpoint"))
    log_path = Path(_require(config.log, "log"))

    trainer = _build_trainer(config, manifest)
    if resume:
        trainer.load_state_arrays(ckpt.load_tensors(checkpoint_path))
        log_file = open(log_path, "a", encoding="utf-8")
    else:
        log_file = open(log_path, "w", encoding="utf-8")

    try:
        def on_epoch(stats):
            log_file.write(stats.as_log_line() + "\n")
            log_file.flush()
            if config.save_interval and (stats.epoch + 1) % config.save_interval == 0:
                ckpt.save_tensors(checkpoint_path, trainer.state_arrays())

        try:
            trainer.run(config.epochs, on_epoch=on_epoch)
        except NumericFailure:
            dump = checkpoint_path.with_suffix(checkpoint_path.suffix + ".nandump")
            ckpt.save_tensors(dump, trainer.state_arrays())
            print(f"numeric failure; state dumped to {dump}", file=sys.stderr)
            raise
        ckpt.save_tensors(checkpoint_path, trainer.state_arrays())
    finally:
        log_file.close()
    print(f"trained {trainer.epochs_done} epochs -> {checkpoint_path}")
    return EXIT_OK


def _embed_manifest(config: RunConfig, manifest: DatasetManifest,
                    checkpoint_path: str | Path) -> EmbeddingSet:
    model = Encoder(_encoder_config(config), seed=config.seed)
    model.load_state_arrays(ckpt.load_tensors(checkpoint_path))
    return _embed_with_model(model, manifest, config.input_side)


def _embed_with_model(model: Encoder, manifest: DatasetManifest, side: int,
                      batch: int = 64) -> EmbeddingSet:
    ids = list(manifest.items)
    vectors: dict[str, np.ndarray] = {}
    labels: dict[str, str] = {}
    for start in range(0, len(ids), batch):
        chunk = ids[start:start + batch]
        images = [np.asarray(_load_item(manifest, item_id, side)) for item_id in chunk]
        feats = model.extract_features_batch(images)
        for item_id, feat in zip(chunk, feats):
            vectors[item_id] = feat
    for item_id, item in manifest.items.items():
        if item.category:
            labels[item_id] = item.category
    return EmbeddingSet(vectors, labels)


def _load_item(manifest: DatasetManifest, item_id: str, side: int) -> np.ndarray:
    from .imageops import load_image

    path = manifest.image_path(item_id)
    try:
        return load_image(path, side=side)
    except FileNotFoundError:
        raise FileNotFoundError(f"image for item {item_id!r} missing: {path}") from None


def cmd_embed(config: RunConfig, out_path: str) -> int:
    manifest = load_manifest(_require(config.manifest, "manifest"))
    embeddings = _embed_manifest(config, manifest, _require(config.checkpoint, "checkpoint"))
    write_embeddings(out_path, embeddings)
    print(f"wrote {len(embeddings.vectors)} embeddings -> {out_path}")
    return EXIT_OK


def evaluate_protocols(manifest: DatasetManifest, embeddings: EmbeddingSet,
                       protocols: tuple[str, ...], knn_k: int = 5,
                       tau: float = 0.07) -> dict[str, float]:
    """Compute the requested metric set; raises on id coverage gaps."""
    needed: set[str] = set()
    if "compat" in protocols:
        needed |= {i for q in manifest.compat_questions for i in q.items}
    if "fitb" in protocols:
        needed |= {i for q in manifest.fitb_questions for i in q.partial + q.candidates}
    if "retrieval" in protocols:
        needed |= set(manifest.retrieval)
        needed |= {i for truth in manifest.retrieval.values() for i in truth}
    missing = sorted(needed - set(embeddings.vectors))
    if missing:
        raise ConfigError(f"embeddings missing for {len(missing)} items: "
                          + ", ".join(missing[:10]))

    report: dict[str, float] = {}
    if "compat" in protocols and manifest.compat_questions:
        scores, labels = [], []
        for q in manifest.compat_questions:
            scores.append(compatibility_score([embeddings.vectors[i] for i in q.items]))
            labels.append(q.label)
        report["compat_auc"] = auc(scores, labels)
        report["compat_ap"] = average_precision(scores, labels)
    if "fitb" in protocols and manifest.fitb_questions:
        correct = sum(int(fitb_answer(q, embeddings) == q.answer_index)
                      for q in manifest.fitb_questions)
        report["fitb_accuracy"] = correct / len(manifest.fitb_questions)
    if "retrieval" in protocols and manifest.retrieval:
        queries = {qid: embeddings.vectors[qid] for qid in manifest.retrieval}
        gallery = {i: embeddings.vectors[i] for i in manifest.items
                   if i not in manifest.retrieval and i in embeddings.vectors}
        for k in (1, 5, 10):
            report[f"recall@{k}"] = recall_at_k(queries, gallery, manifest.retrieval, k)
    if "knn" in protocols and embeddings.labels:
        report["knn_accuracy"] = knn_category_accuracy(embeddings, k=knn_k, tau=tau)
    return report


def cmd_eval(config: RunConfig, embeddings_path: str, protocols: tuple[str, ...],
             out_path: str | None, knn_k: int) -> int:
    manifest = load_manifest(_require(config.manifest, "manifest"))
    embeddings = read_embeddings(embeddings_path)
    # the embedding file carries no categories; attach them from the manifest
    embeddings.labels = {i: item.category for i, item in manifest.items.items()
                         if item.category and i in embeddings.vectors}
    report = evaluate_protocols(manifest, embeddings, protocols, knn_k=knn_k, tau=config.tau)
    lines = [f"{key}\t{value:.6g}" for key, value in report.items()]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_synth(config: RunConfig, out_dir: str) -> int:
    spec = SyntheticSpec(
        num_palettes=config.synth_num_palettes,
        items_per_outfit=config.synth_items_per_outfit,
        outfits=config.synth_outfits,
        image_side=config.synth_image_side,
        noise_sigma=config.synth_noise_sigma,
        fitb_per_outfit=config.synth_fitb_per_outfit,
        retrieval_views=config.synth_retrieval_views,
        disjoint=config.synth_disjoint,
    )
    manifest = generate_synthetic(spec, config.seed, out_dir)
    print(f"generated {len(manifest.items)} items, {len(manifest.outfits)} outfits, "
          f"{len(manifest.fitb_questions)} FITB questions -> {out_dir}")
    return EXIT_OK


def _parse_grid(raw: str) -> list[tuple[float, float]]:
    cells = []
    for chunk in raw.split(","):
        lo, _, hi = chunk.partition(":")
        try:
            cells.append((float(lo), float(hi)))
        except ValueError:
            raise ConfigError(f"bad grid cell {chunk!r}; expected lo:hi") from None
    if not cells:
        raise ConfigError("empty ratio grid")
    return cells


def cmd_ablate(config: RunConfig, grid_raw: str, out_path: str,
               epochs: int | None, n_seeds: int, knn_k: int) -> int:
    manifest = load_manifest(_require(config.manifest, "manifest"))
    cells = _parse_grid(grid_raw)
    epochs = config.epochs if epochs is None else epochs
    rows = ["# ratio_lo\tratio_hi\tfitb_accuracy\tknn_accuracy"]
    for lo, hi in cells:
        fitbs, knns = [], []
        for offset in range(n_seeds):
            cell_config = RunConfig(**{**config.__dict__,
                                       "patch_ratio_lo": lo, "patch_ratio_hi": hi,
                                       "seed": config.seed + offset, "epochs": epochs})
            trainer = _build_trainer(cell_config, manifest)
            trainer.run(epochs)
            embeddings = _embed_with_model(trainer.model, manifest, cell_config.input_side)
            report = evaluate_protocols(manifest, embeddings, ("fitb", "knn"),
                                        knn_k=knn_k, tau=config.tau)
            fitbs.append(report.get("fitb_accuracy", float("nan")))
            knns.append(report.get("knn_accuracy", float("nan")))
        rows.append(f"{lo:g}\t{hi:g}\t{statistics.median(fitbs):.6g}"
                    f"\t{statistics.median(knns):.6g}")
    text = "\n".join(rows) + "\n"
    sys.stdout.write(text)
    Path(out_path).write_text(text, encoding="utf-8")
    return EXIT_OK


# -- argument plumbing ----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visattr",
                                     description="Self-supervised color/texture "
                                                 "representation learning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")

    p_train = sub.add_parser("train", help="run pretext training")
    common(p_train)
    p_train.add_argument("--resume", action="store_true",
                         help="continue from the configured checkpoint")
    p_train.add_argument("--manifest", default=None)
    p_train.add_argument("--checkpoint", default=None)
    p_train.add_argument("--log", default=None)
    p_train.add_argument("--epochs", type=int, default=None, help="override [run] epochs")
    p_train.add_argument("--pretext", default=None,
                         help="override pretext tasks, e.g. rgb,slpd,td or id")

    p_embed = sub.add_parser("embed", help="write embeddings for every manifest item")
    common(p_embed)
    p_embed.add_argument("--manifest", default=None)
    p_embed.add_argument("--checkpoint", default=None)
    p_embed.add_argument("--out", required=True)

    p_eval = sub.add_parser("eval", help="compute evaluation metrics")
    common(p_eval)
    p_eval.add_argument("--manifest", default=None)
    p_eval.add_argument("--embeddings", required=True)
    p_eval.add_argument("--protocols", default="compat,fitb,retrieval,knn")
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--knn-k", type=int, default=5)

    p_synth = sub.add_parser("synth", help="generate the synthetic dataset")
    common(p_synth)
    p_synth.add_argument("--out", required=True, help="output directory")

    p_ablate = sub.add_parser("ablate", help="patch-ratio ablation sweep")
    common(p_ablate)
    p_ablate.add_argument("--manifest", default=None)
    p_ablate.add_argument("--grid", required=True, help="cells lo:hi separated by commas")
    p_ablate.add_argument("--out", required=True)
    p_ablate.add_argument("--epochs", type=int, default=None)
    p_ablate.add_argument("--seeds", type=int, default=1)
    p_ablate.add_argument("--knn-k", type=int, default=5)

    return parser


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        config.seed = args.seed
    for name in ("manifest", "checkpoint", "log"):
        if getattr(args, name, None):
            setattr(config, name, getattr(args, name))
    if getattr(args, "epochs", None) is not None and args.command == "train":
        config.epochs = args.epochs
    if getattr(args, "pretext", None):
        config.pretext = tuple(args.pretext.replace(",", " ").split())
    config.validate()
    return config


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _apply_overrides(parse_config(args.config), args)
        if args.command == "train":
            return cmd_train(config, resume=args.resume)
        if args.command == "embed":
            return cmd_embed(config, args.out)
        if args.command == "eval":
            protocols = tuple(args.protocols.replace(",", " ").split())
            unknown = set(protocols) - {"compat", "fitb", "retrieval", "knn"}
            if unknown:
                raise ConfigError(f"unknown protocols: {sorted(unknown)}")
            return cmd_eval(config, args.embeddings, protocols, args.out, args.knn_k)
        if args.command == "synth":
            return cmd_synth(config, args.out)
        if args.command == "ablate":
            return cmd_ablate(config, args.grid, args.out, args.epochs, args.seeds,
                              args.knn_k)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ManifestError, DimensionError, UndefinedMetricError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
