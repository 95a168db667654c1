"""``afine`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.  Logs go to stderr; results go to stdout or files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import AfineError, UsageError

log = logging.getLogger("afine")

METRICS = ("afine", "psnr", "ssim")
TRIPLET_MODES = ("ref-as-test", "cross-test", "both")


class Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, corpus=True, dry_run=True) -> None:
    if corpus:
        p.add_argument("--corpus-root", help="directory image ids are resolved against (default: $AFINE_CORPUS_ROOT)")
    if dry_run:
        p.add_argument("--dry-run", action="store_true", help="validate inputs and exit without writing anything")
    p.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="stderr log level")


def build_parser() -> Parser:
    parser = Parser(prog="afine", description="A-FINE full-reference image quality assessment")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("train", help="run the three-phase ranking training")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--phase", choices=("1", "2", "3", "all"), default="all")
    p.add_argument("--resume", help="model archive to continue from")
    p.add_argument("--out", required=True, help="output model archive")
    p.add_argument("--trace", help="loss-trace CSV (default: <out>.trace.csv)")
    p.add_argument("--checkpoint-dir", help="directory for periodic checkpoints")
    p.add_argument("--triplets", help="training triplet manifest (overrides train_triplets)")
    p.add_argument("--val-pairs", help="validation pair manifest (overrides val_pairs)")
    p.add_argument("--backbone", choices=("transformer", "toy"))
    p.add_argument("--backbone-weights", help="pretrained backbone weights (safetensors)")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    _common(p)

    p = sub.add_parser("score", help="score one reference/test pair")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--model", help="model archive (required for --metric afine)")
    p.add_argument("--metric", choices=METRICS, default="afine")
    p.add_argument("--json-out", help="write a JSON record of the score here")
    _common(p, corpus=False)

    p = sub.add_parser("eval", help="2AFC accuracy of a metric over a pair manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--metric", choices=METRICS, default="afine")
    p.add_argument("--model", help="model archive (required for --metric afine)")
    p.add_argument("--report", required=True, help="CSV report path")
    p.add_argument("--json", dest="json_out", help="JSON report path")
    p.add_argument("--plot", help="bar chart path (PNG)")
    p.add_argument("--subset", nargs="+", action="extend", help="only evaluate these subset tags")
    _common(p)

    p = sub.add_parser("aggregate", help="majority-vote raw votes into labels")
    p.add_argument("--votes", required=True)
    p.add_argument("--out", required=True, help="label manifest (outliers removed)")
    p.add_argument("--stats-out", help="JSON label statistics")
    _common(p, corpus=False)

    p = sub.add_parser("make-triplets", help="build ranking triplets from labels or MOS")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--labels", help="label manifest")
    src.add_argument("--mos", help="MOS manifest (reference_id, test_id, mos)")
    p.add_argument("--mode", choices=TRIPLET_MODES, default="both")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("split", help="content-level train/val/test split")
    p.add_argument("--contents", required=True, help="content id list")
    p.add_argument("--ratios", default="7:1:2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    _common(p, corpus=False)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference loss gradients")
    p.add_argument("--triplets", required=True)
    p.add_argument("--model", help="model archive (default: seeded toy model)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--groups", nargs="+", help="parameter groups to check (default: all)")
    p.add_argument("--phase", type=int, choices=(1, 2, 3), help="objective and mask of this phase")
    p.add_argument("--coords", type=int, default=6, help="coordinates sampled per group")
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--extrapolate", action="store_true", help="Richardson-extrapolate the central differences")
    p.add_argument("--max-triplets", type=int, default=8)
    p.add_argument("--tolerance", type=float, default=1e-3)
    _common(p, dry_run=False)
    return parser


# ---------------------------------------------------------------- helpers


def _store(args, fallback=None):
    from .images import ImageStore, corpus_root_from_env

    root = corpus_root_from_env(getattr(args, "corpus_root", None)) or fallback
    if root is not None and not Path(root).is_dir():
        raise UsageError(f"corpus root is not a directory: {root}")
    return ImageStore(root=root)


def _require_file(path, what: str) -> Path:
    from .errors import DataError

    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_model(args):
    from .checkpoint import load_model

    if args.metric == "afine" and not args.model:
        raise UsageError("--metric afine needs --model PATH (a model archive written by 'afine train')")
    return load_model(_require_file(args.model, "model archive")) if args.metric == "afine" else None


def _metric(name, model, checkpoint_id=None):
    from .evaluation import AfineMetric, PSNRMetric, SSIMMetric

    if name == "afine":
        return AfineMetric(model, checkpoint_id)
    return PSNRMetric() if name == "psnr" else SSIMMetric()


def _check_images(store, ids):
    from .errors import DataError

    missing = store.missing(ids)
    if missing:
        raise DataError(f"{len(missing)} image(s) not found: {', '.join(missing[:10])}")


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    from .checkpoint import load_backbone_weights, load_model, save_model
    from .config import RunConfig, load_config
    from .data import read_triplets
    from .evaluation import read_pairs
    from .model import AFINE
    from .training import train_phase, write_trace

    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = cfg.override(
        train_triplets=args.triplets,
        val_pairs=args.val_pairs,
        backbone=args.backbone,
        backbone_weights=args.backbone_weights,
        seed=args.seed,
        batch_size=args.batch_size,
        corpus_root=args.corpus_root,
        log_level=args.log_level,
    )
    logging.getLogger().setLevel(cfg.logging_level)
    if cfg.train_triplets is None:
        raise UsageError("no training triplets: pass --triplets or set train_triplets in the config")
    phases = [1, 2, 3] if args.phase == "all" else [int(args.phase)]
    train_cfgs = [cfg.train_config(ph) for ph in phases]
    cfg.check_paths("train_triplets", "val_pairs", "backbone_weights")
    if args.resume:
        _require_file(args.resume, "resume archive")

    args.corpus_root = cfg.corpus_root
    store = _store(args, fallback=Path(cfg.train_triplets).parent)
    triplets = read_triplets(cfg.train_triplets)
    _check_images(store, {i for t in triplets for i in (t.reference_id, t.y_id, t.z_id)})
    validation = None
    if cfg.val_pairs:
        pairs = read_pairs(cfg.val_pairs)
        _check_images(store, {i for p in pairs for i in (p.reference_id, p.y_id, p.z_id)})
        validation = (pairs, store)
    log.info("%d triplets, phases %s, backbone %s", len(triplets), phases, cfg.backbone)
    if args.dry_run:
        log.info("dry run: inputs validated, nothing written")
        return 0

    if args.resume:
        model = load_model(args.resume)
    else:
        model = AFINE(cfg.backbone_config())
        if cfg.backbone_weights:
            load_backbone_weights(model.backbone, cfg.backbone_weights)
    trace = []
    for tc in train_cfgs:
        log.info("phase %d: lr %.3g, %d iterations, batch %d", tc.phase, tc.learning_rate, tc.max_iters, tc.batch_size)
        result = train_phase(model, triplets, store, tc, validation=validation, checkpoint_dir=args.checkpoint_dir)
        trace.extend(result.trace)
    save_model(model, args.out)
    write_trace(args.trace or f"{args.out}.trace.csv", trace)
    log.info("wrote %s", args.out)
    return 0


def cmd_score(args) -> int:
    from .images import load_image
    from .model import afine_score, psnr, ssim_global

    model = _load_model(args)
    ref = load_image(_require_file(args.ref, "reference image"))
    test = load_image(_require_file(args.test, "test image"))
    if args.metric == "afine":
        value = afine_score(ref, test, model)
    elif ref.shape != test.shape:
        from .errors import DimensionError

        raise DimensionError(f"image shapes differ: {ref.shape} vs {test.shape}")
    else:
        value = psnr(ref, test) if args.metric == "psnr" else ssim_global(ref, test)
    print(repr(float(value)))
    if args.json_out and not args.dry_run:
        record = {"metric": args.metric, "value": float(value), "ref": str(args.ref), "test": str(args.test)}
        Path(args.json_out).write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import emit_report, evaluate, read_pairs, report_rows

    model = _load_model(args)
    manifest = _require_file(args.manifest, "pair manifest")
    pairs = read_pairs(manifest)
    store = _store(args, fallback=manifest.parent)
    subsets = set(args.subset) if args.subset else None
    selected = [p for p in pairs if subsets is None or p.subset_tag in subsets]
    _check_images(store, {i for p in selected for i in (p.reference_id, p.y_id, p.z_id)})
    if args.dry_run:
        log.info("dry run: %d pairs resolved, nothing written", len(selected))
        return 0
    report = evaluate(_metric(args.metric, model, args.model), pairs, store, subsets)
    emit_report(report, args.report, args.json_out, args.plot)
    for row in report_rows(report):
        print(",".join(str(v) for v in row))
    return 0


def cmd_aggregate(args) -> int:
    from .data import aggregate_all, dataset_statistics, read_votes, remove_outliers, write_labels

    labels = aggregate_all(read_votes(_require_file(args.votes, "votes file")))
    stats = dataset_statistics(labels)
    log.info("%d pairs, %d outliers (%.2f%%)", stats["total"], stats["outlier"], 100 * stats["fractions"]["outlier"])
    if args.dry_run:
        return 0
    write_labels(args.out, remove_outliers(labels))
    if args.stats_out:
        Path(args.stats_out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.stats_out).write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_make_triplets(args) -> int:
    from .data import build_mos_triplets, build_triplets, read_labels, read_mos, write_triplets

    source = _require_file(args.labels or args.mos, "label manifest" if args.labels else "MOS manifest")
    store = _store(args, fallback=source.parent)
    if args.labels:
        triplets = build_triplets(read_labels(source), args.mode, store=store)
    else:
        triplets = build_mos_triplets(read_mos(source), store=store)
    log.info("%d triplets", len(triplets))
    if not args.dry_run:
        write_triplets(args.out, triplets)
    return 0


def cmd_split(args) -> int:
    from .data import parse_ratios, read_contents, split_dataset, write_contents

    parts = split_dataset(read_contents(_require_file(args.contents, "contents file")), parse_ratios(args.ratios),
                          args.seed)
    log.info("split sizes %s", "/".join(str(len(p)) for p in parts))
    if not args.dry_run:
        out = Path(args.out_dir)
        for name, ids in zip(("train", "val", "test"), parts):
            write_contents(out / f"{name}.csv", ids)
    return 0


def cmd_gradcheck(args) -> int:
    from .backbone import BackboneConfig
    from .checkpoint import load_model
    from .data import read_triplets
    from .errors import NumericError
    from .model import AFINE
    from .training import gradient_check

    source = _require_file(args.triplets, "triplet manifest")
    model = load_model(_require_file(args.model, "model archive")) if args.model else AFINE(BackboneConfig.toy(args.seed))
    triplets = read_triplets(source)[: args.max_triplets]
    store = _store(args, fallback=source.parent)
    _check_images(store, {i for t in triplets for i in (t.reference_id, t.y_id, t.z_id)})
    results = gradient_check(model, triplets, store, groups=args.groups, phase=args.phase,
                             coords_per_group=args.coords, step=args.step, seed=args.seed,
                             extrapolate=args.extrapolate)
    worst = 0.0
    for name, r in results.items():
        print(f"{name}\t{r.max_rel_error:.3e}")
        worst = max(worst, r.max_rel_error)
    if worst >= args.tolerance:
        raise NumericError(f"max relative gradient error {worst:.3e} exceeds tolerance {args.tolerance:g}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "aggregate": cmd_aggregate,
    "make-triplets": cmd_make_triplets,
    "split": cmd_split,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=getattr(logging, args.log_level or "INFO"))
    try:
        return COMMANDS[args.command](args)
    except AfineError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except KeyboardInterrupt:
        log.error("interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
