"""Command-line interface: ``cdtrust <verb> ...``.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 degenerate result
escalated by ``--strict``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import confidence as conf
from .exceptions import CDError, FormatError, ValidationError
from .experiments import DESK_MODEL, DESK_TRAIN, diversity_experiment
from .fcn import FcnConfig, load_model, predict_from_logits
from .metrics import confusion, falsecolor, kappa_with_flag, metrics_csv
from .pipeline import run_pipeline, scene_confidences
from .raster import load_manifest, read_mask, write_mask, write_raster
from .synth import synth_dataset
from .training import TrainConfig, train

log = logging.getLogger("cdtrust")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_DEGENERATE = 0, 1, 2, 3


class Degenerate(CDError):
    """A degenerate result under ``--strict``."""


def _warn_degenerate(args, msg: str) -> None:
    log.warning(msg)
    if args.strict:
        raise Degenerate(msg)


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def pred_path(out: Path, scene_id: str) -> Path:
    return out / f"{scene_id}_pred.cdr"


def cmd_synth(args) -> int:
    scenes = synth_dataset(args.out, args.n_train, args.pool, args.seed, args.n_test, args.test_pool, args.size)
    print(f"wrote {len(scenes)} scenes and manifest.json to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    if not manifest.train:
        raise ValidationError("manifest has no training scenes")
    mcfg = FcnConfig(manifest.band_count, manifest.class_scheme.total_classes,
                     args.base_channels, args.depth, args.seed)
    tcfg = TrainConfig(args.lr, args.epochs, args.patch_size, args.batch_size, args.patches_per_scene,
                       args.class_weighting, args.augment,
                       args.seed if args.train_seed is None else args.train_seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _, report = train(manifest.train, mcfg, tcfg, out_path=out,
                      callback=lambda e, l: log.info("epoch %d loss %.5f", e + 1, l))
    print(f"trained {report.steps} steps; final loss {report.losses[-1]:.5f}; weights at {out}")
    return EXIT_OK


def _select(manifest, args):
    if getattr(args, "scene", None):
        return [manifest.scene(args.scene)]
    return manifest.split(args.split)


def cmd_infer(args) -> int:
    manifest = load_manifest(args.manifest)
    model = load_model(args.weights)
    out = _out_dir(args.out)
    scenes = _select(manifest, args)
    logits, _ = scene_confidences(model, scenes)
    for s, lm in zip(scenes, logits):
        write_mask(predict_from_logits(lm), pred_path(out, s.scene_id))
        if args.dump_logits:
            write_raster(lm, out / f"{s.scene_id}_logits.cdr")
    print(f"wrote {len(scenes)} change maps to {out}")
    return EXIT_OK


def cmd_confidence(args) -> int:
    manifest = load_manifest(args.manifest)
    model = load_model(args.weights)
    scenes = manifest.test
    if not scenes:
        raise ValidationError("manifest has no test scenes")
    _, confs = scene_confidences(model, scenes)
    report = conf.confidence_report(confs, args.tau)
    out = _out_dir(args.out)
    (out / "confidence.json").write_text(conf.dumps_report(report), encoding="utf-8")
    for r in report:
        print(f"{r['scene_id']}\tbeta={r['beta']:.4f}\tbeta_norm={r['beta_norm']:.4f}\t{r['route']}")
    if confs[0].degenerate:
        _warn_degenerate(args, "confidence normalization is degenerate (all betas equal)")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    manifest = load_manifest(args.manifest)
    model = load_model(args.weights)
    scenes = manifest.test
    if not scenes:
        raise ValidationError("manifest has no test scenes")
    outcomes = run_pipeline(model, scenes, args.tau, assume_diverse=args.assume_diverse)
    out = _out_dir(args.out)
    report = conf.confidence_report([o.confidence for o in outcomes], args.tau)
    for r, o in zip(report, outcomes):
        r["route"] = o.route
    (out / "routing.json").write_text(conf.dumps_report(report), encoding="utf-8")

    rows, degenerate = [], []
    by_id = {s.scene_id: s for s in scenes}
    for o in outcomes:
        write_mask(o.mask, pred_path(out, o.scene_id))
        if args.dump_logits:
            write_raster(o.logits, out / f"{o.scene_id}_logits.cdr")
        if o.otsu_degenerate:
            degenerate.append(f"{o.scene_id}: constant change magnitude")
        ref = by_id[o.scene_id].mask
        if ref is not None:
            cm = confusion(o.mask, ref)
            rows.append((o.scene_id, cm, o.route))
            if args.falsecolor:
                write_raster(falsecolor(o.mask, ref), out / f"{o.scene_id}_falsecolor.cdr", "u8")
            if cm.n and kappa_with_flag(cm)[1]:
                degenerate.append(f"{o.scene_id}: degenerate kappa")
    if rows:
        (out / "metrics.csv").write_text(metrics_csv(rows, extra=["route"]), encoding="utf-8")
    for o in outcomes:
        print(f"{o.scene_id}\tbeta_norm={o.confidence.beta_norm:.4f}\t{o.route}")
    if outcomes[0].confidence.degenerate:
        degenerate.append("confidence normalization is degenerate")
    for msg in degenerate:
        _warn_degenerate(args, msg)
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    pred_dir = Path(args.pred_dir)
    out = _out_dir(args.out or pred_dir)
    rows, degenerate = [], []
    for s in manifest.split(args.split):
        if s.mask is None:
            continue
        p = pred_path(pred_dir, s.scene_id)
        if not p.exists():
            raise FileNotFoundError(f"missing prediction for scene {s.scene_id!r}: {p}")
        pred = read_mask(p, manifest.class_scheme.num_change_classes)
        cm = confusion(pred, s.mask)
        rows.append((s.scene_id, cm))
        write_raster(falsecolor(pred, s.mask), out / f"{s.scene_id}_falsecolor.cdr", "u8")
        if cm.n and kappa_with_flag(cm)[1]:
            degenerate.append(f"{s.scene_id}: degenerate kappa")
    text = metrics_csv(rows)
    (out / "metrics.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    for msg in degenerate:
        _warn_degenerate(args, msg)
    return EXIT_OK


def cmd_diversity(args) -> int:
    mcfg = FcnConfig(4, 2, args.base_channels, args.depth, 0)
    tcfg = TrainConfig(**{**DESK_TRAIN.__dict__, "epochs": args.epochs, "patch_size": args.patch_size})
    res = diversity_experiment(
        args.seed, args.reps, mcfg, tcfg, args.size, args.n_test,
        progress=lambda r: log.info("rep %d: localized %.4f diverse %.4f", r.rep, r.kappa_localized, r.kappa_diverse),
    )
    out = _out_dir(args.out)
    (out / "diversity.csv").write_text(res.table_csv(), encoding="utf-8")
    (out / "diversity.json").write_text(res.to_json(), encoding="utf-8")
    sys.stdout.write(res.table_csv())
    print(f"diverse wins {res.diverse_wins}/{len(res.rows)}; one-sided sign test p = {res.sign_test_p:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--strict", action="store_true", help="exit 3 on degenerate results")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cdtrust", description="Confidence-routed change detection.")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic styled dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=3)
    s.add_argument("--pool", choices=["localized", "diverse"], default="localized")
    s.add_argument("--n-test", type=int, default=0)
    s.add_argument("--test-pool", choices=["localized", "diverse", "graded"], default="diverse")
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train the FCN on the train split")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="weights file to write")
    t.add_argument("--base-channels", type=int, default=FcnConfig.base_channels)
    t.add_argument("--depth", type=int, default=FcnConfig.depth)
    t.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    t.add_argument("--patch-size", type=int, default=TrainConfig.patch_size)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--patches-per-scene", type=int, default=TrainConfig.patches_per_scene_per_epoch)
    t.add_argument("--class-weighting", choices=["none", "inverse_frequency"], default="inverse_frequency")
    t.add_argument("--augment", choices=["none", "d4"], default="d4")
    t.add_argument("--seed", type=int, default=0, help="model initialization seed")
    t.add_argument("--train-seed", type=int, default=None, help="patch sampling seed (defaults to --seed)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="predict change maps")
    i.add_argument("--manifest", required=True)
    i.add_argument("--weights", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--scene", default=None)
    i.add_argument("--split", choices=["train", "test"], default="test")
    i.add_argument("--dump-logits", action="store_true")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("confidence", parents=[common], help="scene confidence and routing report")
    c.add_argument("--manifest", required=True)
    c.add_argument("--weights", required=True)
    c.add_argument("--tau", type=float, default=conf.DEFAULT_TAU)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_confidence)

    pl = sub.add_parser("pipeline", parents=[common], help="route each test scene and emit final maps")
    pl.add_argument("--manifest", required=True)
    pl.add_argument("--weights", required=True)
    pl.add_argument("--tau", type=float, default=conf.DEFAULT_TAU)
    pl.add_argument("--out", required=True)
    pl.add_argument("--assume-diverse", action="store_true",
                    help="treat the training set as large and diverse: skip confidence routing")
    pl.add_argument("--dump-logits", action="store_true")
    pl.add_argument("--falsecolor", action="store_true")
    pl.set_defaults(func=cmd_pipeline)

    e = sub.add_parser("eval", parents=[common], help="metrics CSV and false-colour composites")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", default=None)
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diversity", parents=[common], help="localized vs diverse training experiment")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--reps", type=int, default=5)
    d.add_argument("--out", required=True)
    d.add_argument("--size", type=int, default=96)
    d.add_argument("--n-test", type=int, default=6)
    d.add_argument("--base-channels", type=int, default=DESK_MODEL.base_channels)
    d.add_argument("--depth", type=int, default=DESK_MODEL.depth)
    d.add_argument("--epochs", type=int, default=DESK_TRAIN.epochs)
    d.add_argument("--patch-size", type=int, default=DESK_TRAIN.patch_size)
    d.set_defaults(func=cmd_diversity)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "tau") and not 0.0 <= args.tau <= 1.0:
        print(f"error: --tau must be in [0, 1], got {args.tau}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except Degenerate as exc:
        print(f"degenerate: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
