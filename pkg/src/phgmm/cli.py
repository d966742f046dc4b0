"""Command-line entry point: ``phgmm <command> [--config F] [--seed N] [--out DIR] [--force]``.

Exit codes: 0 success, 2 usage/config/missing input, 3 refusal to
overwrite, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, parse_override, with_overrides
from .data import (
    ConfigurationError,
    DatasetError,
    DatasetManifest,
    colorize,
    generate_dataset,
    load_sample,
    save_image,
)
from .metrics import UndefinedScoreError, calinski_harabasz, davies_bouldin, silhouette
from .plots import plot_ablation, plot_latent, plot_trimap, plot_training
from .trainer import (
    Trainer,
    TrainingAborted,
    collect_latents,
    evaluate,
    gradcheck,
    load_model,
    predict,
)

log = logging.getLogger("phgmm")

EXIT_OK, EXIT_USAGE, EXIT_REFUSED, EXIT_NUMERIC = 0, 2, 3, 4


class Refused(Exception):
    pass


class NumericFailure(Exception):
    pass


def _claim(paths: list[Path], force: bool) -> None:
    """Refuse if any output exists; with --force, remove them first."""
    existing = [p for p in paths if p.exists()]
    if existing and not force:
        raise Refused(f"{existing[0]} exists; pass --force to overwrite")
    for p in existing:
        if p.is_dir():
            shutil.rmtree(p)
        else:
            p.unlink()


def _manifest(cfg: RunConfig) -> DatasetManifest:
    path = cfg.manifest_path()
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return DatasetManifest.load(path)


def _checkpoint(cfg: RunConfig) -> Path:
    path = cfg.checkpoint_path()
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def _write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(x: float) -> str:
    return "" if x is None or np.isnan(x) else repr(float(x))


# commands -------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    spec = cfg.scene()
    root = cfg.dataset_root()
    _claim([root / "manifest.json", root / "train", root / "val"], args.force)
    manifest = generate_dataset(spec, cfg.n_train, cfg.n_val, root)
    cfg.write_resolved(cfg.out)
    print(manifest.root / "manifest.json")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    manifest = _manifest(cfg)
    runs = cfg.sweep(manifest.num_classes)
    out = Path(cfg.out)
    dirs = [out / "runs" / name if name else out for name, _ in runs]
    outputs = [p for d in dirs for p in (d / "train_log.csv", d / "checkpoints", d / "snapshots")]
    if len(runs) > 1:
        outputs.append(out / "ablation.csv")
    _claim(outputs, args.force)
    cfg.write_resolved(out)

    results = []
    for (name, tcfg), run_dir in zip(runs, dirs):
        log.info("training %s -> %s", name or "run", run_dir)
        trainer = Trainer(tcfg, manifest)
        try:
            last = trainer.fit(run_dir)
        except TrainingAborted as exc:
            raise NumericFailure(str(exc)) from exc
        plot_training(run_dir / "train_log.csv", run_dir / "loss.png")
        print(last)
        if len(runs) > 1:
            report = evaluate(trainer.model, manifest, "val", widths=())
            results.append(
                (name, tcfg.model.latent.num_components, "z+g" if tcfg.model.use_global else "z", tcfg.seed,
                 repr(report.scores.mean_iou))
            )
    if results:
        path = _write_csv(out / "ablation.csv", ("run", "k", "latents", "seed", "val_miou"), results)
        plot_ablation(path, out / "ablation.png")
        print(path)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    manifest = _manifest(cfg)
    model, _ = load_model(_checkpoint(cfg))
    out = Path(cfg.out) / "eval" / cfg.split
    _claim([out], args.force)
    ids = manifest.ids(cfg.split)
    if not ids:
        raise ConfigurationError(f"split {cfg.split!r} is empty")
    preds = predict(model, [load_sample(manifest, i) for i in ids])
    report = evaluate(model, manifest, cfg.split, widths=(), predictions=preds)
    s = report.scores
    rows = [
        (name, _fmt(s.iou[c]), _fmt(s.precision[c]), _fmt(s.recall[c]))
        for c, name in enumerate(manifest.classes)
    ]
    rows.append(("mean", _fmt(s.mean_iou), _fmt(s.mean_precision), _fmt(s.mean_recall)))
    path = _write_csv(out / "scores.csv", ("class", "iou", "precision", "recall"), rows)
    for sid, pred in zip(ids, preds):
        save_image(colorize(pred, manifest.palette) / 255.0, out / "predictions" / f"{sid}.png")
    print(f"mIoU {100 * s.mean_iou:.2f}%  -> {path}")
    return EXIT_OK


def cmd_trimap(cfg: RunConfig, args) -> int:
    manifest = _manifest(cfg)
    model, _ = load_model(_checkpoint(cfg))
    out = Path(cfg.out) / "trimap" / cfg.split
    _claim([out], args.force)
    if not cfg.widths or min(cfg.widths) < 1:
        raise ConfigurationError("trimap widths must be positive integers")
    report = evaluate(model, manifest, cfg.split, widths=cfg.widths)
    path = _write_csv(out / "trimap.csv", ("width", "error"), [(w, repr(e)) for w, e in report.trimap])
    plot_trimap(path, out / "trimap.png")
    print(path)
    return EXIT_OK


def _score(fn, cloud) -> float:
    try:
        return fn(cloud)
    except UndefinedScoreError as exc:
        log.warning("%s undefined at iteration %d: %s", fn.__name__, cloud.iteration, exc)
        return float("nan")


def cmd_latent(cfg: RunConfig, args) -> int:
    manifest = _manifest(cfg)
    snaps = sorted((Path(cfg.out) / "snapshots").glob("step_*.pt"))
    if not snaps:
        snaps = [_checkpoint(cfg)]
    out = Path(cfg.out) / "latent"
    _claim([out], args.force)
    clouds, rows = [], []
    for snap in snaps:
        model, meta = load_model(snap)
        cloud = collect_latents(model, manifest, cfg.split, iteration=int(meta["step"]))
        header = ("iteration", "label") + tuple(f"z{j}" for j in range(cloud.points.shape[1]))
        body = [(cloud.iteration, int(lab), *map(repr, pt.tolist())) for pt, lab in zip(cloud.points, cloud.labels)]
        clouds.append(_write_csv(out / f"cloud_step_{cloud.iteration:07d}.csv", header, body))
        rows.append(
            (cloud.iteration, _fmt(_score(silhouette, cloud)), _fmt(_score(calinski_harabasz, cloud)),
             _fmt(_score(davies_bouldin, cloud)))
        )
    path = _write_csv(out / "latent_scores.csv", ("iteration", "ssi", "chi", "dbi"), rows)
    plot_latent(clouds, out / "latent_pca.png")
    for r in rows:
        print("iteration {} SSI {} CHI {} DBI {}".format(*r))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    report = gradcheck(seed=cfg.seed)
    for line in report.lines():
        print(line)
    if not report.passed:
        raise NumericFailure(f"gradient check failed for: {', '.join(report.failing)}")
    return EXIT_OK


HELP = {
    "gen-data": "render a synthetic dataset and its manifest",
    "train": "train one model, or a K / global-space / seed sweep",
    "eval": "per-class IoU, precision, recall and colourised predictions",
    "trimap": "misclassification rate in bands around class boundaries",
    "latent": "latent cloud, SSI/CHI/DBI per snapshot and a PCA plot",
    "gradcheck": "compare routed gradients with finite differences",
}

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "trimap": cmd_trimap,
    "latent": cmd_latent,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="training seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="phgmm",
        description="Segmentation with local mixture and global Gaussian latent spaces.",
        epilog="exit codes: 0 ok, 2 usage/config/missing input, 3 refused overwrite, 4 numeric failure",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
        if name in ("eval", "trimap", "latent"):
            p.add_argument("--checkpoint", help="checkpoint file (default <out>/checkpoints/last.pt)")
            p.add_argument("--split", help="dataset split (default val)")
        if name == "trimap":
            p.add_argument("--widths", help="comma-separated band widths, e.g. 1,5,10")
    return parser


def _threads() -> None:
    raw = os.environ.get("PHGMM_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"PHGMM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError("PHGMM_THREADS must be >= 1")
    torch.set_num_threads(min(n, torch.get_num_threads()))


def resolve_config(args) -> RunConfig:
    overrides = dict(parse_override(s) for s in args.set)
    cfg = RunConfig.load(args.config, overrides)
    widths = None
    if getattr(args, "widths", None):
        try:
            widths = tuple(int(w) for w in args.widths.split(",") if w.strip())
        except ValueError:
            raise ConfigurationError(f"bad --widths {args.widths!r}") from None
    return with_overrides(
        cfg,
        seed=args.seed,
        out=args.out,
        checkpoint=getattr(args, "checkpoint", None),
        split=getattr(args, "split", None),
        widths=widths,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        _threads()
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except Refused as exc:
        print(f"phgmm: refusing: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except NumericFailure as exc:
        print(f"phgmm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ConfigurationError, DatasetError, ValueError) as exc:
        print(f"phgmm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
