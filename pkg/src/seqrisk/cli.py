"""Command-line surface tying the pipeline together.

Commands: gen-data, teacher, pretrain, train, eval, score, gradcheck, ablate.
Each takes --config/--seed/--set overrides, exits nonzero on any error, and
prints a one-line JSON summary on success. Reporting commands write figures
next to their delimited outputs. Log verbosity comes from SEQRISK_LOG.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import events as events_mod
from . import experiment, report, synthetic, tape, training
from .config import ConfigError, resolve

log = logging.getLogger(__name__)


def _common(parser):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="config override, repeatable (e.g. --set train.epochs=3)",
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="seqrisk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--old-users", type=int, default=0, help="also write profile-only records")

    p = sub.add_parser("teacher", help="fit the builtin teacher and write guidance probabilities")
    _common(p)
    p.add_argument("--profiles", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="stage-one training on profile-only data")
    _common(p)
    p.add_argument("--profiles", required=True)
    p.add_argument("--teacher", help="teacher CSV; omit with --builtin-teacher")
    p.add_argument("--builtin-teacher", action="store_true")
    p.add_argument("--out", required=True, help="checkpoint path (.json or .npz)")
    p.add_argument("--metrics", help="metrics CSV path (default next to checkpoint)")

    p = sub.add_parser("train", help="stage-two training on events + profiles")
    _common(p)
    p.add_argument("--events", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--init", help="stage-one checkpoint to transfer from")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")

    p = sub.add_parser("eval", help="AUC/KS of a checkpoint on labeled data")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--events")
    p.add_argument("--taxonomy")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("score", help="write per-user probabilities")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--events")
    p.add_argument("--taxonomy")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    _common(p)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--out", help="JSON report path")

    p = sub.add_parser("ablate", help="run the variant matrix on a synthetic scenario")
    _common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument(
        "--variants", default=",".join(experiment.DEFAULT_VARIANTS),
        help="comma-separated variant list",
    )
    return parser


def _summary(command, **kwargs):
    print(json.dumps({"command": command, "status": "ok", **kwargs}))


def _load_events(args, cfg):
    if not args.events:
        return {}, None
    if not args.taxonomy:
        raise ConfigError("--events requires --taxonomy")
    taxonomy = events_mod.TaxonomyConfig.from_csv(args.taxonomy)
    by_user, rep = events_mod.ingest_events(
        args.events, taxonomy,
        tz_offset_minutes=int(cfg["data"]["tz_offset_minutes"]),
        strict=bool(cfg["data"]["strict_codes"]),
    )
    return by_user, rep


def cmd_gen_data(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = synthetic.ScenarioConfig.from_cfg(cfg)
    ds = synthetic.generate(sc)
    ds.write(
        events_path=out / "events.jsonl",
        profiles_path=out / "profiles.csv",
        truth_path=out / "truth.csv",
    )
    synthetic.scenario_taxonomy().to_csv(out / "taxonomy.csv")
    extra = {}
    if args.old_users:
        import dataclasses

        old = synthetic.generate(
            dataclasses.replace(sc, n_users=args.old_users, seed=sc.seed * 3 + 2),
            with_events=False,
        )
        old.write(profiles_path=out / "old_profiles.csv")
        extra["old_profiles"] = str(out / "old_profiles.csv")
    _summary(
        "gen-data",
        events=str(out / "events.jsonl"),
        profiles=str(out / "profiles.csv"),
        truth=str(out / "truth.csv"),
        taxonomy=str(out / "taxonomy.csv"),
        n_users=sc.n_users,
        label_rate=float(np.mean(ds.labels)),
        **extra,
    )
    return 0


def cmd_teacher(args, cfg):
    profiles = events_mod.ingest_profiles(args.profiles)
    table = experiment.teacher_table(profiles, cfg)
    ordered = [r.user_id for r in profiles if r.label is not None]
    training.write_teacher_file(args.out, ordered, [table[u] for u in ordered])
    _summary("teacher", out=args.out, n_rows=len(ordered))
    return 0


def _metrics_path(args):
    if args.metrics:
        return Path(args.metrics)
    base = Path(args.out)
    return base.with_name(base.stem + "_metrics.csv")


def cmd_pretrain(args, cfg):
    profiles = events_mod.ingest_profiles(args.profiles)
    teacher = None
    if cfg["train"]["teacher_guidance"]:
        if args.builtin_teacher:
            teacher = experiment.teacher_table(profiles, cfg)
        elif args.teacher:
            teacher = training.read_teacher_file(args.teacher)
        else:
            raise ConfigError("teacher guidance enabled: pass --teacher or --builtin-teacher")
    res = training.pretrain(profiles, cfg, teacher_probs=teacher)
    training.save_checkpoint(args.out, res.checkpoint)
    mpath = _metrics_path(args)
    training.write_metrics_csv(mpath, res)
    fig = mpath.with_suffix(".png")
    report.training_figure(fig, res.metrics)
    _summary("pretrain", checkpoint=args.out, metrics=str(mpath), figure=str(fig),
             final_val_auc=_final_val_auc(res))
    return 0


def _final_val_auc(res):
    vals = [m.auc for m in res.metrics if m.split == "val"]
    return vals[-1] if vals else None


def cmd_train(args, cfg):
    by_user, _ = _load_events_required(args, cfg)
    profiles = events_mod.ingest_profiles(args.profiles)
    taxonomy = events_mod.TaxonomyConfig.from_csv(args.taxonomy)
    init = None
    if args.init:
        init = training.load_checkpoint(args.init)
        cfg = training.apply_model_config(cfg, init)
    elif not cfg["train"]["aux_pretrain"]:
        pass
    res = training.train_full(by_user, profiles, taxonomy, cfg, init=init)
    training.save_checkpoint(args.out, res.checkpoint)
    mpath = _metrics_path(args)
    training.write_metrics_csv(mpath, res)
    fig = mpath.with_suffix(".png")
    report.training_figure(fig, res.metrics)
    _summary("train", checkpoint=args.out, metrics=str(mpath), figure=str(fig),
             final_val_auc=_final_val_auc(res))
    return 0


def _load_events_required(args, cfg):
    taxonomy = events_mod.TaxonomyConfig.from_csv(args.taxonomy)
    return events_mod.ingest_events(
        args.events, taxonomy,
        tz_offset_minutes=int(cfg["data"]["tz_offset_minutes"]),
        strict=bool(cfg["data"]["strict_codes"]),
    )


def cmd_eval(args, cfg):
    ckpt = training.load_checkpoint(args.ckpt)
    cfg = training.apply_model_config(cfg, ckpt)
    by_user, _ = _load_events(args, cfg)
    profiles = events_mod.ingest_profiles(args.profiles)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ev = training.evaluate(ckpt, by_user, profiles, cfg)
    csv_path = out_dir / "eval.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["auc", repr(ev["auc"])])
        writer.writerow(["ks", repr(ev["ks"])])
        writer.writerow(["loss", repr(ev["loss"])])
    fig = out_dir / "eval.png"
    report.eval_figure(fig, ev["scores"], ev["labels"])
    print(f"auc={ev['auc']:.6f} ks={ev['ks']:.6f}")
    _summary("eval", auc=ev["auc"], ks=ev["ks"], loss=ev["loss"],
             csv=str(csv_path), figure=str(fig))
    return 0


def cmd_score(args, cfg):
    ckpt = training.load_checkpoint(args.ckpt)
    cfg = training.apply_model_config(cfg, ckpt)
    by_user, _ = _load_events(args, cfg)
    profiles = events_mod.ingest_profiles(args.profiles)
    scores = training.score(ckpt, by_user, profiles, cfg)
    with open(args.out, "w") as fh:
        fh.write("user_id,probability\n")
        for rec, s in zip(profiles, scores):
            fh.write(f"{rec.user_id},{float(s)!r}\n")
    _summary("score", out=args.out, n_rows=len(profiles))
    return 0


def cmd_gradcheck(args, cfg):
    del cfg
    from . import gradsuite

    worst, elapsed = gradsuite.run(n_instances=args.instances, seed=args.seed or 0)
    ok = all(v < 1e-4 for v in worst.values())
    for name, err in sorted(worst.items()):
        print(f"{name}: max rel err {err:.3e} {'PASS' if err < 1e-4 else 'FAIL'}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"max_rel_error": worst, "elapsed_s": elapsed, "passed": ok}, fh, indent=2)
    if not ok:
        raise TrainingFailure("gradient check failed")
    _summary("gradcheck", passed=ok, elapsed_s=elapsed)
    return 0


class TrainingFailure(RuntimeError):
    pass


def cmd_ablate(args, cfg):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = experiment.ablation_table(cfg, variants=variants)
    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "auc", "ks", "loss"])
        for r in rows:
            writer.writerow([r["variant"], repr(r["auc"]), repr(r["ks"]), repr(r["loss"])])
    fig = out_dir / "ablation.png"
    report.ablation_figure(fig, rows)
    width = max(len(r["variant"]) for r in rows)
    print(f"{'variant'.ljust(width)}  auc     ks")
    for r in rows:
        print(f"{r['variant'].ljust(width)}  {r['auc']:.4f}  {r['ks']:.4f}")
    _summary("ablate", csv=str(csv_path), figure=str(fig), n_variants=len(rows))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "teacher": cmd_teacher,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "score": cmd_score,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None):
    logging.basicConfig(level=os.environ.get("SEQRISK_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args.config, args.overrides, seed=args.seed)
        tape.set_default_dtype(cfg["precision"])
        return COMMANDS[args.command](args, cfg)
    except (
        ConfigError,
        TrainingFailure,
        training.TrainError,
        training.CheckpointError,
        events_mod.IngestError,
        events_mod.TaxonomyError,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
