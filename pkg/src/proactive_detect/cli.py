"""Command line entry point.

Exit codes: 0 ok, 2 usage, 3 config error (unknown key, bad value),
4 missing dataset, 5 checkpoint/config hash mismatch, 6 training error
(non-finite loss).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .autograd import Tensor
from .autograd import checkpoint as ckpt
from .theory import BoxTaskSpec, lemma1_compare, theorem1_check
from .wrapper import TrainingError, template_to_gray8


def _config(args, seed_required=False):
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"experiment.seed={args.seed}")
    elif seed_required:
        raise SystemExit(f"{args.command}: --seed is required")
    if args.config:
        return H.load_config(args.config, overrides)
    return H.parse_config_text("", overrides)


def cmd_theory(args):
    cfg = _config(args, seed_required=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = lemma1_compare(cfg.theory)
    (out / "convergence.json").write_text(report.to_json() + "\n")
    report.write_csv(out / "convergence.csv")
    if args.theorem:
        tr = theorem1_check(cfg.theory, BoxTaskSpec())
        H.write_json({
            "ap_passive": {str(k): v for k, v in tr.ap_passive.items()},
            "ap_proactive": {str(k): v for k, v in tr.ap_proactive.items()},
            "degenerate_passive": tr.degenerate_passive,
            "degenerate_proactive": tr.degenerate_proactive,
            "proactive_not_worse": tr.proactive_not_worse,
        }, out / "theorem.json")
    print(f"verdict {report.verdict.value}  p={report.p_value:.3g}  "
          f"passive={report.passive_mean_distance:.4f}  proactive={report.proactive_mean_distance:.4f}")


def cmd_gen_data(args):
    cfg = _config(args)
    for split, digest in H.generate_splits(cfg).items():
        print(f"{split} {digest}")


def cmd_train(args):
    cfg = _config(args, seed_required=True)
    report = H.run_training(cfg, arm=args.arm)
    print(json.dumps(report["metrics"], sort_keys=True))


def cmd_ablate(args):
    cfg = _config(args)
    seeds = args.seeds or [cfg.seed]
    for seed in seeds:
        over = list(args.set or []) + [f"experiment.seed={seed}",
                                        f"experiment.output_dir={Path(cfg.output_dir) / f'seed{seed}'}"]
        sub = H.load_config(args.config, over) if args.config else H.parse_config_text("", over)
        for r in H.run_ablation(sub, workers=args.workers):
            print(f"seed {seed} {r['arm']}: {json.dumps(r['metrics'], sort_keys=True)}")


def _dump_templates(cfg, checkpoint, arm, out_dir, count):
    state = ckpt.load(checkpoint)
    model = H.Model(cfg, H.arm_wrapper_config(cfg.wrapper, arm))
    model.load(state)
    model.train(False)
    test = H.load_split(cfg, "test")
    s = model.wrapper.template(Tensor(test.images[:count])).data[..., 0]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, t in enumerate(template_to_gray8(s)):
        h, w = t.shape
        (out_dir / f"template_{k:03d}.pgm").write_bytes(f"P5 {w} {h} 255\n".encode() + t.tobytes())


def cmd_eval(args):
    cfg = _config(args)
    metrics = H.eval_checkpoint(cfg, args.checkpoint, arm=args.arm, identity_template=args.identity_template,
                                report_path=args.report)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.dump_templates:
        _dump_templates(cfg, args.checkpoint, args.arm, args.dump_templates, args.template_count)


def cmd_report(args):
    reports = []
    for path in sorted(Path(args.runs).rglob("*.report.json")):
        with open(path) as fh:
            reports.append(json.load(fh))
    if not reports:
        raise SystemExit(f"no run reports under {args.runs}")
    agg = H.aggregate_reports(reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    H.write_json(agg, out / "comparison.json")
    cols = sorted(set().union(*(row for row in agg["table"])) - {"arm", "seeds"})
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "seeds"] + cols)
        for row in agg["table"]:
            w.writerow([row["arm"], row["seeds"]] + [repr(row.get(c, float("nan"))) for c in cols])
    for row in agg["table"]:
        print(row)


def build_parser():
    p = argparse.ArgumentParser(prog="proactive-detect", description="Template-encrypted detection experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="INI-style experiment config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("theory", help="linear-regression convergence check")
    common(sp)
    sp.add_argument("--out", default="theory_out")
    sp.add_argument("--theorem", action="store_true", help="also run the box-regression AP comparison")
    sp.set_defaults(func=cmd_theory)

    sp = sub.add_parser("gen-data", help="write the train/test dataset files")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="pretrain passively, then fine-tune one arm")
    common(sp)
    sp.add_argument("--arm", choices=H.ABLATION_ARMS)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint (encoder + detector only)")
    common(sp, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--arm", default="ImageDependent", choices=H.ABLATION_ARMS)
    sp.add_argument("--report", help="run report whose hashes the checkpoint and config must match")
    sp.add_argument("--identity-template", action="store_true", help="encrypt with an all-ones template")
    sp.add_argument("--out")
    sp.add_argument("--dump-templates", metavar="DIR", help="write 8-bit PGM template images")
    sp.add_argument("--template-count", type=int, default=8)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="all ablation arms from a shared passive pretraining")
    common(sp, seed=False)
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="aggregate run reports into a comparison table")
    sp.add_argument("--runs", required=True)
    sp.add_argument("--out", default="report_out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except SystemExit as e:
        if isinstance(e.code, str):
            print(e.code, file=sys.stderr)
            return H.EXIT_USAGE
        raise
    except H.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return H.EXIT_CONFIG
    except H.MissingDatasetError as e:
        print(f"missing dataset: {e}", file=sys.stderr)
        return H.EXIT_MISSING_DATASET
    except (H.HashMismatchError, ckpt.CheckpointError) as e:
        print(f"hash mismatch: {e}", file=sys.stderr)
        return H.EXIT_HASH_MISMATCH
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return H.EXIT_TRAINING
    return H.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
