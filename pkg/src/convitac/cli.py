"""Command-line entry point: ``convitac <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensorfile
from .errors import ConViTacError
from .vit import EncoderConfig

log = logging.getLogger("convitac")

PRETRAIN_LR = 5e-4
TRAIN_LR = 3e-4


# ------------------------------------------------------------------ helpers

def _resolve_data(data: str, eval_data: str | None) -> tuple[Path, Path | None]:
    """A directory means its train.csv/test.csv; a file is used as given."""
    path = Path(data)
    if path.is_dir():
        train = path / "train.csv"
        if not train.exists():
            train = path / "manifest.csv"
        test = path / "test.csv"
        return train, Path(eval_data) if eval_data else (test if test.exists() else None)
    return path, Path(eval_data) if eval_data else None


def _load_split(path: Path):
    from .pipeline import Split

    return Split.from_manifest(path)


def _encoder_config(args, image_shape) -> EncoderConfig:
    return EncoderConfig(
        image_size=image_shape[0],
        channels=image_shape[2],
        patch_size=args.patch,
        dim=args.dim,
        depth=args.depth,
        heads=args.heads,
        seed=args.seed,
    ).validate()


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=int, default=64, help="token width D (default 64)")
    p.add_argument("--depth", type=int, default=2, help="transformer blocks per encoder (default 2)")
    p.add_argument("--heads", type=int, default=4,
                   help="attention heads in encoders and cross-modal attention (default 4)")
    p.add_argument("--patch", type=int, default=8, help="patch size in pixels (default 8)")


def _add_common(p: argparse.ArgumentParser, lr_default: float, epochs_default: int) -> None:
    p.add_argument("--data", required=True,
                   help="manifest CSV, or a dataset directory holding train.csv/test.csv")
    p.add_argument("--eval-data", help="held-out manifest (default: test.csv beside --data)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=epochs_default,
                   help=f"default {epochs_default}")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=lr_default,
                   help=f"Adam learning rate (default {lr_default:g}; 0.1 is accepted but "
                        "diverges at this model size)")


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .synthdata import SynthSpec, generate_dataset

    # contact radii scale with the image; the defaults are tuned for 32 px
    base = SynthSpec()
    r_max = min(base.radius_max * args.size / base.image_size, (args.size - 7) / 2)
    r_min = min(base.radius_min * args.size / base.image_size, r_max)
    spec = SynthSpec(
        radius_min=r_min,
        radius_max=r_max,
        num_classes=args.classes,
        pairs_per_class=args.per_class,
        image_size=args.size,
        rho=args.rho,
        seed=args.seed,
        **({"noise_std": args.noise} if args.noise is not None else {}),
    ).validate()
    manifest = generate_dataset(spec, args.out, train_fraction=args.train_fraction)
    print(manifest)
    return 0


def cmd_pretrain(args) -> int:
    from .contrastive import ContrastiveEncoder, PretrainConfig, freeze, pretrain
    from .plotting import plot_pretrain

    train_path, eval_path = _resolve_data(args.data, args.eval_data)
    train = _load_split(train_path)
    ev = _load_split(eval_path) if eval_path else None
    config = _encoder_config(args, train.visual.shape[2:])
    encoder = ContrastiveEncoder(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = "epoch,loss,train_instance_top1,eval_class_top1"
    print(header, flush=True)
    lines = [header]

    def on_epoch(epoch, record):
        ev_ret = record.eval_retrieval[-1] if record.eval_retrieval else float("nan")
        line = f"{epoch + 1},{record.loss[-1]:.6f},{record.train_retrieval[-1]:.6f},{ev_ret:.6f}"
        lines.append(line)
        print(line, flush=True)

    eval_pairs = None if ev is None else (ev.visual, ev.tactile, ev.labels)
    record = pretrain(
        encoder, train.visual, train.tactile,
        PretrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                       tau=args.temperature, seed=args.seed),
        eval_pairs=eval_pairs, on_epoch=on_epoch,
    )
    freeze(encoder)
    encoder.save(out)
    (out / "pretrain.csv").write_text("\n".join(lines) + "\n")
    if ev is not None:
        from .contrastive import retrieval_accuracy

        inst = retrieval_accuracy(encoder, ev.visual, ev.tactile)
        cls = retrieval_accuracy(encoder, ev.visual, ev.tactile, ev.labels)
        (out / "retrieval.txt").write_text(
            f"instance_top1={inst:.6f}\nclass_top1={cls:.6f}\n"
        )
        log.info("held-out retrieval: instance %.3f, class %.3f", inst, cls)
    if not args.no_plots:
        plot_pretrain(record.loss, record.eval_retrieval, out / "pretrain.png")
    return 0


def cmd_train(args) -> int:
    from .contrastive import ContrastiveEncoder
    from .pipeline import (METRICS_HEADER, ConViTacModel, ModelConfig, TrainConfig,
                           train_supervised)
    from .plotting import plot_metrics

    train_path, eval_path = _resolve_data(args.data, args.eval_data)
    train = _load_split(train_path)
    ev = _load_split(eval_path) if eval_path else None
    enc_cfg = _encoder_config(args, train.visual.shape[2:])
    contrastive = None
    if args.condition != "none":
        if not args.encoder:
            raise SystemExit(f"--condition {args.condition} needs --encoder <pretrain output dir>")
        contrastive = ContrastiveEncoder.load(args.encoder)
        if not contrastive.frozen:
            raise SystemExit(f"{args.encoder}: contrastive encoder is not marked frozen")
    num_classes = args.classes or int(max(train.labels.max(), -1 if ev is None else ev.labels.max())) + 1
    mcfg = ModelConfig(encoder=enc_cfg, num_classes=num_classes, fusion=args.fusion,
                       condition=args.condition, cec_heads=args.heads,
                       cec_residual=args.cec_residual, seed=args.seed)
    model = ConViTacModel(mcfg, contrastive)
    out = Path(args.out)
    print(METRICS_HEADER, flush=True)

    def on_epoch(epoch, record):
        print(record.csv_rows()[-1], flush=True)

    record = train_supervised(
        model, train, ev,
        TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed),
        out_dir=out, on_epoch=on_epoch,
    )
    if not args.no_plots and record.train_loss:
        rows = [(i + 1, a, b, c) for i, (a, b, c) in
                enumerate(zip(record.train_loss, record.train_acc, record.eval_acc))]
        plot_metrics(rows, out / "metrics.png")
    return 0


def cmd_eval(args) -> int:
    from .pipeline import evaluate, load_checkpoint

    model = load_checkpoint(args.ckpt)
    split = _load_split(Path(args.data))
    acc = evaluate(model, split)
    print("samples,eval_acc")
    print(f"{len(split)},{acc:.6f}")
    return 0


def cmd_viz(args) -> int:
    from .analysis import export_features, grad_cam, mask_mass, write_feature_export
    from .pipeline import load_checkpoint
    from .plotting import plot_pca, plot_saliency

    model = load_checkpoint(args.ckpt)
    split = _load_split(Path(args.data))
    out = Path(args.out)
    sal_dir = out / "saliency"
    sal_dir.mkdir(parents=True, exist_ok=True)
    n = len(split) if args.limit is None else min(args.limit, len(split))
    masses, areas = [], []
    figure_items = []
    for i in range(n):
        sal = grad_cam(model, split.visual[i], split.tactile[i], int(split.labels[i]))
        tensorfile.save_tensor(sal_dir / f"visual_{i:05d}.cvt", sal.visual)
        tensorfile.save_tensor(sal_dir / f"tactile_{i:05d}.cvt", sal.tactile)
        if split.masks is not None:
            masses.append(mask_mass(sal.visual[0], split.masks[i]))
            areas.append(float(np.mean(split.masks[i] > 0)))
        if len(figure_items) < 4:
            figure_items.append((i, sal))
    vis, tac = export_features(model, split)
    proj, dist = write_feature_export(out, vis, tac, split.labels)
    report = {
        "samples": n,
        "saliency_mask_mass": float(np.nanmean(masses)) if masses else float("nan"),
        "mask_area": float(np.mean(areas)) if areas else float("nan"),
        "pca_explained_1": float(proj.explained_ratio[0]),
        "pca_explained_2": float(proj.explained_ratio[1]),
        "centroid_distance": dist,
    }
    tensorfile.write_metadata(out / "report.txt", {k: (f"{v:.6f}" if isinstance(v, float) else v)
                                                  for k, v in report.items()})
    for k, v in report.items():
        print(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
    if not args.no_plots:
        modality = ["visual"] * len(vis) + ["tactile"] * len(tac)
        labels = list(split.labels) * 2
        plot_pca(proj.coords, modality, labels, out / "pca.png",
                 title=f"condition={model.config.condition}")
        images, maps, masks, titles = [], [], [], []
        for i, sal in figure_items:
            images += [split.visual[i, 0], split.tactile[i, 0]]
            maps += [sal.visual[0], sal.tactile[0]]
            masks += [None if split.masks is None else split.masks[i], None]
            titles += [f"#{i} visual", f"#{i} tactile"]
        if images:
            plot_saliency(images, maps, masks, titles, out / "saliency.png")
    return 0


def _parse_grid(grid: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
    if ":" not in grid:
        raise SystemExit("--grid must look like CONDITIONS:FUSIONS, e.g. none,both:add,concat,sws")
    conds, fusions = grid.split(":", 1)
    return (tuple(c for c in conds.split(",") if c), tuple(f for f in fusions.split(",") if f))


def cmd_ablate(args) -> int:
    from .analysis import AblationConfig, ablation_run, format_summary, summarize
    from .contrastive import PretrainConfig
    from .pipeline import ModelConfig, TrainConfig
    from .plotting import plot_ablation

    train_path, eval_path = _resolve_data(args.data, args.eval_data)
    if eval_path is None:
        raise SystemExit("ablate needs held-out data (--eval-data or a dataset directory)")
    train, ev = _load_split(train_path), _load_split(eval_path)
    conditions, fusions = _parse_grid(args.grid)
    enc_cfg = _encoder_config(args, train.visual.shape[2:])
    num_classes = int(max(train.labels.max(), ev.labels.max())) + 1
    config = AblationConfig(
        conditions=conditions,
        fusions=fusions,
        seeds=tuple(range(args.seed, args.seed + args.seeds)),
        model=ModelConfig(encoder=enc_cfg, num_classes=num_classes, cec_heads=args.heads,
                          cec_residual=args.cec_residual),
        train=TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr),
        pretrain=PretrainConfig(epochs=args.pretrain_epochs, batch_size=args.batch_size,
                                lr=args.pretrain_lr, tau=args.temperature),
    )
    out = Path(args.out)
    print("condition,fusion,seed,eval_acc", flush=True)
    rows = ablation_run(
        train, ev, config, out,
        on_cell=lambda r: print(f"{r['condition']},{r['fusion']},{r['seed']},{r['eval_acc']:.6f}",
                                flush=True),
    )
    summary = summarize(rows)
    text = format_summary(summary)
    summary_path = out.with_name(out.stem + "_summary.txt")
    summary_path.write_text(text)
    print(text, end="")
    if not args.no_plots:
        plot_ablation(summary, out.with_name(out.stem + ".png"))
    return 0


def cmd_gradcheck(args) -> int:
    import time

    from .analysis import GRADCHECK_TOL, gradcheck_suite

    start = time.perf_counter()
    results = gradcheck_suite(seed=args.seed, eps=args.eps, include_model=not args.ops_only)
    print("check,max_rel_error,seconds,status")
    for r in results:
        print(f"{r.name},{r.error:.3e},{r.seconds:.2f},{'pass' if r.passed else 'FAIL'}")
    total = time.perf_counter() - start
    failed = [r.name for r in results if not r.passed]
    print(f"# {len(results) - len(failed)}/{len(results)} below {GRADCHECK_TOL:g} in {total:.1f}s")
    return 1 if failed else 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convitac",
        description="Contrastive visual-tactile encoder, conditioned fusion and analysis tools.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--rho", type=float, default=1.0,
                   help="probability the tactile texture matches the visual class")
    p.add_argument("--noise", type=float, default=None, help="pixel noise std")
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="contrastive pretraining of the shared encoder")
    _add_common(p, PRETRAIN_LR, 12)
    p.add_argument("--temperature", type=float, default=0.07)
    _add_model_flags(p)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="supervised training of the full model")
    _add_common(p, TRAIN_LR, 15)
    p.add_argument("--encoder", help="directory written by `convitac pretrain`")
    p.add_argument("--fusion", choices=["add", "concat", "sws"], default="concat")
    p.add_argument("--condition", choices=["none", "vision", "touch", "both"], default="both")
    p.add_argument("--cec-residual", action="store_true",
                   help="add the condition rows back onto the attention output (off by default)")
    p.add_argument("--classes", type=int, default=None, help="default: inferred from labels")
    p.add_argument("--temperature", type=float, default=0.07, help="unused; accepted for symmetry")
    _add_model_flags(p)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="Grad-CAM saliency and PCA feature export")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None, help="saliency for the first N samples only")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("ablate", help="condition x fusion x seed grid")
    _add_common(p, TRAIN_LR, 15)
    p.add_argument("--grid", default="none,both:add,concat,sws",
                   help="CONDITIONS:FUSIONS (default none,both:add,concat,sws)")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, counting up from --seed")
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--pretrain-epochs", type=int, default=12)
    p.add_argument("--pretrain-lr", type=float, default=PRETRAIN_LR)
    p.add_argument("--cec-residual", action="store_true")
    _add_model_flags(p)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--ops-only", action="store_true", help="skip the full-model check")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConViTacError as exc:
        print(f"convitac {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
