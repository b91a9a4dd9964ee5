"""Command-line surface.

Exit codes follow the usual unix convention for tools in a pipeline: bad
invocations and missing files exit 2 with usage on stderr, everything that
breaks past argument checking exits 1, success is 0.  All machine-readable
output (records, CSV tables) goes to stdout; progress notes go to stderr.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import engine, nn
from .checkpoint import load_checkpoint, save_checkpoint
from .config import build_extractor, load_config, metric_m, train_config
from .dataset import ShapeGenConfig, default_manifest, gen_shapes, load_dataset, save_dataset
from .gradcheck import grad_check
from .mappers import SetFeatExtractor
from .metrics import METRIC_KINDS
from .rng import Rng
from .tensor import Tensor, get_precision, set_precision, tsum


def _add_config(p: argparse.ArgumentParser, required: bool = False):
    p.add_argument("--config", required=required, help="key=value options file")
    p.add_argument(
        "--print-config", action="store_true", help="echo the effective options and exit"
    )


def _maybe_print_config(args) -> bool:
    if args.print_config:
        print(load_config(args.config).render())
        return True
    return False


def _load_model(config_path: str | None, ckpt_path: str | None) -> SetFeatExtractor:
    cfg = load_config(config_path)
    extractor = build_extractor(cfg)
    if ckpt_path is not None:
        extractor.load_state(load_checkpoint(ckpt_path))
    return extractor


def _splits(data_path: str, val_classes: int = 5):
    ds = load_dataset(data_path)
    manifest = default_manifest(ds.n_classes, val_classes=val_classes)
    return ds, manifest


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    cfg = ShapeGenConfig(
        classes=args.classes,
        per_class=args.per_class,
        size=args.size,
        noise=args.noise,
        seed=args.seed,
    )
    ds = gen_shapes(cfg)
    save_dataset(args.out, ds)
    print(f"wrote {args.out}: {ds.n_classes} classes x {ds.counts[0]} examples, "
          f"{ds.h}x{ds.w}x{ds.c}")
    return 0


def cmd_pretrain(args) -> int:
    if _maybe_print_config(args):
        return 0
    cfg = load_config(args.config)
    extractor = build_extractor(cfg)
    ds, manifest = _splits(args.data)
    tc = train_config(cfg, "pretrain")
    images = ds.images()
    heads, losses = engine.pretrain(extractor, ds.split(manifest.train), images, tc)
    save_checkpoint(args.out, extractor.state_dict())
    print(f"pretrain: {tc.steps} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}, "
          f"saved {args.out}")
    return 0


def cmd_meta_train(args) -> int:
    if _maybe_print_config(args):
        return 0
    cfg = load_config(args.config)
    extractor = build_extractor(cfg)
    if args.ckpt_in is not None:
        extractor.load_state(load_checkpoint(args.ckpt_in))
    ds, manifest = _splits(args.data)
    tc = train_config(cfg, "meta")
    rows = engine.meta_train(
        extractor, ds.split(manifest.train), ds.images(), tc, log_path=args.log
    )
    save_checkpoint(args.out, extractor.state_dict())
    last = rows[-1]
    print(f"meta-train: {len(rows)} episodes, final loss {last[1]:.4f} "
          f"accuracy {last[2]:.4f}, saved {args.out}")
    return 0


def cmd_eval(args) -> int:
    if _maybe_print_config(args):
        return 0
    cfg = load_config(args.config)
    extractor = _load_model(args.config, args.ckpt_in)
    ds, manifest = _splits(args.data)
    split = ds.split(manifest.val if args.split == "val" else manifest.train)
    kind = args.metric or cfg["metric"]
    report = engine.evaluate(
        extractor,
        split,
        ds.images(),
        kind=kind,
        episodes=args.episodes,
        way=args.way,
        shot=args.shot,
        queries=args.query,
        seed=args.seed,
        m=cfg.get_int("metric.m") if kind == "top-m" else None,
        logit_scale=cfg.get_float("logit_scale"),
        threads=args.threads,
    )
    print(report.record())
    return 0


def cmd_ablate_metrics(args) -> int:
    if _maybe_print_config(args):
        return 0
    cfg = load_config(args.config)
    extractor = _load_model(args.config, args.ckpt_in)
    ds, manifest = _splits(args.data)
    split = ds.split(manifest.val)
    images = ds.images()
    print("metric,1-shot,1-shot-ci95,5-shot,5-shot-ci95")
    for kind in METRIC_KINDS:
        cells = []
        for shot in (1, 5):
            report = engine.evaluate(
                extractor,
                split,
                images,
                kind=kind,
                episodes=args.episodes,
                way=args.way,
                shot=shot,
                queries=args.query,
                seed=args.seed,
                m=cfg.get_int("metric.m") if kind == "top-m" else None,
                threads=args.threads,
            )
            cells += [f"{report.mean:.2f}", f"{report.ci95:.2f}"]
        print(",".join([kind] + cells))
    return 0


def cmd_count_params(args) -> int:
    if _maybe_print_config(args):
        return 0
    extractor = build_extractor(load_config(args.config))
    print(f"blocks {extractor.count_backbone_params()}")
    print(f"mappers {extractor.count_mapper_params()}")
    print(f"total {extractor.count_params()}")
    return 0


def cmd_activation_stats(args) -> int:
    if _maybe_print_config(args):
        return 0
    extractor = _load_model(args.config, args.ckpt_in)
    ds, manifest = _splits(args.data)
    ids = manifest.val if args.split == "val" else manifest.train
    pct, class_ids = engine.mapper_activation_stats(
        extractor,
        ds.split(ids),
        ds.images(),
        episodes=args.episodes,
        way=min(args.way, len(ids)),
        shot=args.shot,
        queries=args.query,
        seed=args.seed,
    )
    print(",".join(["mapper"] + [ds.names[c] for c in class_ids]))
    for mi in range(pct.shape[0]):
        print(",".join([str(mi + 1)] + [f"{v:.2f}" for v in pct[mi]]))
    return 0


def _gradcheck_battery() -> list[tuple[str, object]]:
    """The finite-difference suite behind the gradcheck subcommand."""
    set_precision("f64")
    out = []
    rng = Rng(0xC0FFEE)

    w = Tensor(rng.uniform(-0.5, 0.5, (4, 3, 3, 3)), requires_grad=True)
    x = Tensor(rng.uniform(-1, 1, (2, 3, 6, 6)))
    out.append(("conv2d.weight", grad_check(
        lambda t: tsum(nn.conv2d(x, t) * nn.conv2d(x, t)), w, step=1e-3)))

    g = Tensor(rng.uniform(0.5, 1.5, (3,)), requires_grad=True)
    xb = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
    rmean, rvar = np.zeros(3), np.ones(3)
    beta = Tensor(np.zeros(3))

    def bn_loss(t):
        y = nn.batchnorm2d(xb, t, beta, rmean, rvar, mode="train")
        return tsum(y * y)

    out.append(("batchnorm.gamma", grad_check(bn_loss, g, step=1e-3)))

    z = Tensor(rng.uniform(-2, 2, (4, 5)), requires_grad=True)
    cot = Tensor(rng.uniform(-1, 1, (4, 5)))
    out.append(("softmax.input", grad_check(
        lambda t: tsum(nn.softmax(t) * cot), z, step=1e-5)))

    lg = Tensor(rng.uniform(-2, 2, (6, 4)), requires_grad=True)
    targets = np.array([0, 1, 2, 3, 0, 2])
    out.append(("cross_entropy.logits", grad_check(
        lambda t: nn.cross_entropy_logits(t, targets), lg, step=1e-5)))

    from .backbone import BackboneConfig, BlockSpec
    from .mappers import MapperLayout

    ext = SetFeatExtractor(
        BackboneConfig(3, (BlockSpec(8), BlockSpec(8))), MapperLayout((1, 1)), seed=3
    )
    xm = rng.uniform(-1, 1, (2, 3, 8, 8))
    cot_m = Tensor(rng.uniform(-1, 1, (2, 2, 8)))
    out.append(("mapper_forward.q", grad_check(
        lambda t: tsum(ext.extract_set(Tensor(xm), mode="train") * cot_m),
        ext.params["mapper1.q.weight"], step=1e-4, max_coords=16)))

    xs = rng.uniform(-1, 1, (2, 3, 8, 8))
    xq = rng.uniform(-1, 1, (4, 3, 8, 8))
    out.append(("episode_loss.conv", grad_check(
        lambda t: engine.episode_forward(ext, xs, xq, way=2, kind="sum-min")[0],
        ext.params["block1.conv1.weight"], step=1e-5, tol=1e-3, max_coords=12)))
    return out


def cmd_gradcheck(args) -> int:
    previous = get_precision()
    try:
        reports = _gradcheck_battery()
    finally:
        set_precision(previous)
    failures = 0
    for name, report in reports:
        status = "ok" if report.passed else "FAIL"
        print(f"{status} {name} max_rel_err={report.max_rel_err:.3e}")
        failures += 0 if report.passed else 1
    return 1 if failures else 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="setfeat",
        description="Few-shot image classification with set-of-features representations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=25)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="stage one: batch classification")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("meta-train", help="stage two: episodic training")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--in", dest="ckpt_in", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="per-episode CSV log path")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("eval", help="episodic evaluation with 95%% CIs")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--in", dest="ckpt_in", default=None)
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=1)
    p.add_argument("--query", type=int, default=15)
    p.add_argument("--metric", choices=METRIC_KINDS, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-metrics", help="evaluate every metric, 1- and 5-shot")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--in", dest="ckpt_in", default=None)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--query", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_ablate_metrics)

    p = sub.add_parser("count-params", help="parameter counts: blocks, mappers, total")
    _add_config(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("activation-stats", help="mapper selection frequency per class")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--in", dest="ckpt_in", default=None)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=1)
    p.add_argument("--query", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.set_defaults(func=cmd_activation_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except Exception as exc:  # the CLI contract: anything past parsing is exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
