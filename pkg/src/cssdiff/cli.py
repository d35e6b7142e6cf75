"""Command-line interface.

Subcommands: make-data, pretrain-sgp, pretrain-lsc, train, synth, eval,
report. All take ``--config <file>`` (JSON, see README for the schema) plus
``--seed`` and ``--out`` where applicable. Exit status is nonzero on any
error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .pipeline import (
    Config,
    run_evaluate,
    run_make_data,
    run_pretrain_lsc,
    run_pretrain_sgp,
    run_synthesize,
    run_train,
)


def _load_config(args) -> Config:
    if args.config is None:
        cfg = Config()
    else:
        cfg = Config.from_json_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = Config.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def _cmd_make_data(args) -> int:
    cfg = _load_config(args)
    manifest = run_make_data(cfg, args.out, seed=args.seed)
    print(f"wrote {len(manifest.samples)} samples to {manifest.root}")
    return 0


def _cmd_pretrain_sgp(args) -> int:
    cfg = _load_config(args)
    path = run_pretrain_sgp(cfg, args.out)
    print(f"sgp checkpoint: {path}")
    return 0


def _cmd_pretrain_lsc(args) -> int:
    cfg = _load_config(args)
    path = run_pretrain_lsc(cfg, args.out)
    print(f"lsc checkpoint: {path}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.joint_sgp or args.joint_lsc:
        cfg = Config.from_dict(
            {
                **cfg.to_dict(),
                "joint_sgp": args.joint_sgp or cfg.joint_sgp,
                "joint_lsc": args.joint_lsc or cfg.joint_lsc,
            }
        )
    result = run_train(
        cfg,
        sgp_ckpt=args.sgp_ckpt,
        lsc_ckpt=args.lsc_ckpt,
        out_dir=args.out,
        from_scratch=args.from_scratch,
        resume_from=args.resume,
    )
    print(
        f"trained {result.epochs_run} epochs "
        f"(early stop: {result.stopped_early}); "
        f"best val PSNR {result.best_val_psnr:.3f} dB -> {result.best_ckpt}"
    )
    return 0


def _cmd_synth(args) -> int:
    written = run_synthesize(args.ckpt, args.data, args.out, seed=args.seed or 0)
    print(f"synthesized {len(written)} volumes into {args.out}")
    return 0


def _cmd_eval(args) -> int:
    report = run_evaluate(args.pred, args.manifest, args.out)
    psnr = report.aggregate["psnr_db"]
    ssim = report.aggregate["ssim"]
    print(
        f"{len(report.per_sample)} samples: "
        f"PSNR {psnr['mean']:.3f}±{psnr['std']:.3f} dB, "
        f"SSIM {ssim['mean']:.4f}±{ssim['std']:.4f}"
    )
    return 0


def _cmd_report(args) -> int:
    from . import report as report_mod

    written = report_mod.render_report(args.metrics, args.out, log_path=args.log)
    print(f"wrote {len(written)} plots to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cssdiff",
        description="Low-field to high-field MRI synthesis on synthetic phantoms",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, out_help, out_required=True):
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=Path, required=out_required, help=out_help)

    p = sub.add_parser("make-data", help="generate a phantom dataset")
    add_common(p, "dataset output directory")
    p.set_defaults(func=_cmd_make_data)

    p = sub.add_parser("pretrain-sgp", help="contrastive slice-alignment pretraining")
    add_common(p, "checkpoint output path")
    p.set_defaults(func=_cmd_pretrain_sgp)

    p = sub.add_parser("pretrain-lsc", help="masked-patch corrector pretraining")
    add_common(p, "checkpoint output path")
    p.set_defaults(func=_cmd_pretrain_lsc)

    p = sub.add_parser("train", help="joint cycle-constrained training")
    add_common(p, "training output directory")
    p.add_argument("--sgp-ckpt", type=Path, help="SGP stage checkpoint")
    p.add_argument("--lsc-ckpt", type=Path, help="LSC stage checkpoint")
    p.add_argument(
        "--from-scratch",
        action="store_true",
        help="train without the pretraining-stage checkpoints",
    )
    p.add_argument("--resume", type=Path, help="resume from a last.ckpt")
    p.add_argument("--joint-sgp", action="store_true", help="keep the SGP loss active")
    p.add_argument("--joint-lsc", action="store_true", help="keep the LSC loss active")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("synth", help="synthesize predictions for a dataset")
    p.add_argument("--ckpt", type=Path, required=True, help="trained checkpoint")
    p.add_argument("--data", type=Path, required=True, help="dataset manifest or directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="prediction output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("eval", help="evaluate predictions against references")
    p.add_argument("--pred", type=Path, required=True, help="prediction directory")
    p.add_argument("--manifest", type=Path, required=True, help="reference manifest")
    p.add_argument("--out", type=Path, default=None, help="report output directory")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="render metric plots to PNG/SVG")
    p.add_argument("--metrics", type=Path, required=True, help="metrics.json from eval")
    p.add_argument("--log", type=Path, default=None, help="optional train_log.ndjson")
    p.add_argument("--out", type=Path, required=True, help="plot output directory")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # CLI boundary: report and exit nonzero
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
