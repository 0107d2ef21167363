"""Command-line entry point: ``dotcnet {train,eval,embed,gradcheck,synth,ablate}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .checkpoint import config_text, load_checkpoint, save_checkpoint
from .data import load_image_dataset, save_image_tree, split_dataset, synth_textures
from .dtcm import MECHANISMS
from .errors import ConfigError, DotcError, TrainingDiverged
from .evaluation import (BRANCH_ROWS, MECHANISM_ROWS, ablation_run, build_scores, classification_accuracy,
                         compute_eer, plot_roc, roc_curve, write_ablation_csv, write_roc_csv)
from .gradcheck import GROUPS, check_network
from .network import BRANCH_NAMES, NetConfig, embed, make_branches
from .training import TrainConfig, train, write_metrics_csv

log = logging.getLogger("dotcnet")

MODEL_FILE = "model.dotc"


def _int_triple(text):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    return tuple(parts)


def _size(text):
    if "x" in text:
        h, w = text.lower().split("x")
        return int(h), int(w)
    return int(text), int(text)


def _branches(text):
    if text == "all":
        return BRANCH_NAMES
    names = tuple(n.strip() for n in text.split(",") if n.strip())
    bad = [n for n in names if n not in BRANCH_NAMES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"branches must be a comma list from {BRANCH_NAMES}, got {text!r}")
    return names


def _add_data_flags(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="root/<class>/<image> directory tree")
    src.add_argument("--synthetic", action="store_true", help="use the synthetic grating dataset")
    p.add_argument("--classes", type=int, default=8, help="synthetic classes")
    p.add_argument("--samples", type=int, default=12, help="synthetic samples per class")
    p.add_argument("--size", type=_size, default=(64, 64), help="image size, N or HxW")
    p.add_argument("--train-per-class", type=int, default=6)
    p.add_argument("--seed", type=int, default=7)


def _add_net_flags(p):
    p.add_argument("--branches", type=_branches, default=BRANCH_NAMES, help="e.g. medium or tiny,medium")
    p.add_argument("--mech1", choices=MECHANISMS, default="tam")
    p.add_argument("--mech2", choices=MECHANISMS, default="cm")
    p.add_argument("--no-second-order", action="store_true")
    p.add_argument("--kernels", type=_int_triple, default=(7, 17, 35), help="tiny,medium,large kernel sizes")
    p.add_argument("--filters", type=_int_triple, default=(12, 36, 6), help="tiny,medium,large filter counts")
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--pool-grid", type=int, default=4)


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--timing", action="store_true", help="add wall_seconds to metrics.csv")


def build_parser():
    parser = argparse.ArgumentParser(prog="dotcnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write a checkpoint")
    _add_data_flags(p)
    _add_net_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="verification scores, ROC and EER on the test split")
    _add_data_flags(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--roc-points", type=int, default=100)
    p.add_argument("--plot", action="store_true", help="also render roc.svg")

    p = sub.add_parser("embed", help="write embeddings for every sample")
    _add_data_flags(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--max-per-param", type=int, default=None)
    p.add_argument("--corrupt", choices=GROUPS, default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("synth", help="write the synthetic dataset as an image tree")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--samples", type=int, default=12)
    p.add_argument("--size", type=_size, default=(64, 64))
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="branch and mechanism ablation tables")
    _add_data_flags(p)
    _add_net_flags(p)
    _add_train_flags(p)
    p.add_argument("--table", choices=("branch", "mechanism", "both"), default="both")
    p.add_argument("--out", type=Path, required=True)
    return parser


# ---------------------------------------------------------------------------


def load_data(args):
    if args.synthetic:
        ds = synth_textures(args.classes, args.samples, args.size, seed=args.seed)
    else:
        ds = load_image_dataset(args.data, args.size)
    return split_dataset(ds, args.train_per_class, args.seed)


def net_config(args, num_classes):
    branches = make_branches(kernels=args.kernels, filters=args.filters, mech1=args.mech1, mech2=args.mech2,
                             second_order=not args.no_second_order)
    return NetConfig(num_classes=num_classes, branches=branches, enabled_branches=args.branches,
                     pool_grid=(args.pool_grid, args.pool_grid), embed_dim=args.embed_dim,
                     input_size=args.size).validate()


def train_config(args):
    return TrainConfig(learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs,
                       contrastive_margin=args.margin, seed=args.seed).validate()


def data_record(args):
    if args.synthetic:
        src = {"synthetic": True, "classes": args.classes, "samples": args.samples}
    else:
        src = {"data": str(args.data)}
    return {**src, "size": list(args.size), "train_per_class": args.train_per_class, "seed": args.seed}


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args):
    ds = load_data(args)
    cfg = net_config(args, ds.num_classes)
    tcfg = train_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_json({"data": data_record(args), "network": cfg.to_dict(), "training": tcfg.to_dict(),
                 "fused_channels": cfg.fused_channels, "feature_dim": cfg.feature_dim},
                args.out / "config.json")
    ds.write_csv(args.out / "manifest.csv")
    xtr, ytr = ds.subset("train")
    try:
        result = train(xtr, ytr, cfg, tcfg)
    except TrainingDiverged as exc:
        if exc.last_good_state is not None:
            save_checkpoint(cfg, exc.last_good_state, args.out / "last_good.dotc")
        raise
    save_checkpoint(cfg, result.state, args.out / MODEL_FILE)
    write_metrics_csv(result.metrics, args.out / "metrics.csv", include_timing=args.timing)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"epochs={last.epoch} loss={last.mean_loss:.4f} train_acc={100 * last.train_acc:.3f}%")
    return 0


def _checked_model(args, ds):
    cfg, state = load_checkpoint(args.model)
    if tuple(cfg.input_size) != tuple(ds.image_size):
        raise ConfigError(f"input_size mismatch: checkpoint {tuple(cfg.input_size)}, data {tuple(ds.image_size)}")
    if cfg.num_classes != ds.num_classes:
        raise ConfigError(f"num_classes mismatch: checkpoint {cfg.num_classes}, data {ds.num_classes}")
    return cfg, state


def cmd_eval(args):
    ds = load_data(args)
    cfg, state = _checked_model(args, ds)
    xte, yte = ds.subset("test")
    emb, logits = embed(xte, cfg, state)
    pairs = build_scores(emb, yte)
    scores = pairs.score_set()
    eer, threshold = compute_eer(scores)
    acc = classification_accuracy(logits, yte)
    args.out.mkdir(parents=True, exist_ok=True)
    pairs.write_csv(args.out / "scores.csv", ds.classes)
    points = roc_curve(scores, args.roc_points)
    write_roc_csv(points, args.out / "roc.csv")
    if args.plot:
        plot_roc(points, args.out / "roc.svg")
    summary = f"EER={100 * eer:.3f}% ACC={100 * acc:.3f}%"
    _write_json({"eer": eer, "eer_threshold": threshold, "acc": acc, "summary": summary,
                 "genuine_pairs": int(scores.genuine.size), "impostor_pairs": int(scores.impostor.size)},
                args.out / "eval.json")
    print(summary)
    return 0


def cmd_embed(args):
    ds = load_data(args)
    cfg, state = _checked_model(args, ds)
    emb, _ = embed(ds.images, cfg, state)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "embeddings.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "source", "split"] + [f"e{i}" for i in range(emb.shape[1])])
        for i, row in enumerate(emb):
            writer.writerow([ds.classes[ds.labels[i]], ds.sources[i], ds.split[i]] + [repr(float(v)) for v in row])
    print(f"wrote {len(emb)} embeddings of dimension {emb.shape[1]}")
    return 0


def cmd_gradcheck(args):
    reports = check_network(seed=args.seed, corrupt=args.corrupt, max_per_param=args.max_per_param)
    ok = True
    for r in reports:
        status = "PASS" if r.passed(args.tol) else "FAIL"
        ok &= r.passed(args.tol)
        print(f"{r.group:6s} n={r.count:5d} max_rel_error={r.max_rel_error:.3e} worst={r.worst_parameter} {status}")
    return 0 if ok else 1


def cmd_synth(args):
    ds = synth_textures(args.classes, args.samples, args.size, seed=args.seed)
    save_image_tree(ds, args.out)
    print(f"wrote {len(ds)} images in {ds.num_classes} classes to {args.out}")
    return 0


def cmd_ablate(args):
    ds = load_data(args)
    base = net_config(args, ds.num_classes)
    tcfg = train_config(args)
    tables = {"branch": BRANCH_ROWS, "mechanism": MECHANISM_ROWS}
    chosen = list(tables) if args.table == "both" else [args.table]
    for name in chosen:
        for row in tables[name]:
            row.apply(base)
    args.out.mkdir(parents=True, exist_ok=True)
    header = [f"seed={args.seed} split_seed={args.seed} train_per_class={args.train_per_class}",
              f"base={config_text(base)}"]
    for name in chosen:
        results = ablation_run(ds, base, tables[name], tcfg,
                               on_row=lambda r: print(f"{r.label}: ACC={r.acc_percent:.3f}% EER={r.eer_percent:.3f}%"))
        write_ablation_csv(results, args.out / f"ablation_{name}.csv", header)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "embed": cmd_embed, "gradcheck": cmd_gradcheck,
            "synth": cmd_synth, "ablate": cmd_ablate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DotcError, ValueError, OSError) as exc:
        print(f"error: {exc}".splitlines()[0], file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
