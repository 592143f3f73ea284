"""Command-line entry point.

    dtnmt toydata --out data/
    dtnmt pretrain --config data/config.json --out run/
    dtnmt augment --config data/config.json --out run/ --mode dual_bleu
    dtnmt evaluate --config data/config.json --out run/

Exit codes: 0 success, 1 contract error, 2 numeric divergence, 3 missing artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .errors import ContractError, DtnmtError
from .evaluation import ModelKind
from .objectives import METRICS
from .perturb import NOISE_TYPES, PerturbationPolicy
from . import pipeline

log = logging.getLogger("dtnmt")


def _shared_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="pipeline config (JSON)")
    p.add_argument("--data", type=Path, help="directory holding train/valid1/valid2/test .src/.tgt files")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory (one pipeline per directory)")
    p.add_argument("--metric", choices=sorted(METRICS), help="selection / attack metric")
    p.add_argument("--mrt-k", type=int, dest="mrt_k", help="MRT sample size K")
    p.add_argument("--lambda", type=float, dest="lam", help="dual-loss weight")
    p.add_argument("--adv-percent", type=float, dest="adv_percent", help="100 * (1 - P_np)")
    p.add_argument("--noise-type", choices=NOISE_TYPES, dest="noise_type")
    p.add_argument("--noise-ratio", type=float, dest="noise_ratio")
    p.add_argument("--force", action="store_true", help="rerun stages even if their outputs are intact")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    shared = _shared_flags()
    parser = argparse.ArgumentParser(prog="dtnmt", description="Adversarial augmentation for NMT from a paired forward/backward model")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("pretrain", parents=[shared], help="train forward, then backward with the shared matrix frozen")
    sub.add_parser("finetune", parents=[shared], help="plain NLL fine-tuning on valid1")
    p = sub.add_parser("attack", parents=[shared], help="attack the shared embedding")
    p.add_argument("--objective", choices=["nll", "mrt"])
    p = sub.add_parser("augment", parents=[shared], help="augmentation training for one model kind")
    p.add_argument("--mode", required=True, choices=[k.value for k in ModelKind.augmented()])
    sub.add_parser("noisegen", parents=[shared], help="write the RD/RP noisy test sets")
    p = sub.add_parser("evaluate", parents=[shared], help="score every available model on every test set")
    p.add_argument("--models", nargs="+", choices=[k.value for k in ModelKind])
    p = sub.add_parser("sweep", parents=[shared], help="lambda or P_np x P_rp grid")
    p.add_argument("--grid", choices=["lambda", "prob"], default="lambda")
    p = sub.add_parser("report", parents=[shared], help="rebuild the report from cached decodes")
    p.add_argument("--models", nargs="+", choices=[k.value for k in ModelKind])
    p = sub.add_parser("all", parents=[shared], help="pretrain, augment all kinds, noisegen, evaluate")
    p.add_argument("--models", nargs="+", choices=[k.value for k in ModelKind])
    p = sub.add_parser("toydata", help="write the synthetic reversal corpus and a matching config")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-size", type=int, default=2000)
    p.add_argument("--branching", type=int, default=3, help="successors per word (0: independent words)")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig.load(args.config) if args.config else pipeline.PipelineConfig()
    changes = {}
    if args.data is not None:
        changes.update({s: str(args.data / s) for s in ("train", "valid1", "valid2", "test")})
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = str(args.out)
    if args.metric is not None:
        changes["metric"] = args.metric
    attack = {}
    if args.mrt_k is not None:
        attack["k"] = args.mrt_k
    if args.lam is not None:
        attack["lam"] = args.lam
    if attack:
        changes["attack"] = dataclasses.replace(cfg.attack, **attack)
    if args.adv_percent is not None:
        if not 0.0 <= args.adv_percent <= 100.0:
            raise ContractError("--adv-percent must lie in [0, 100]")
        changes["policy"] = PerturbationPolicy.from_adv_percent(args.adv_percent, cfg.policy.p_rp)
    if args.noise_type is not None:
        changes["noise_types"] = [args.noise_type]
    if args.noise_ratio is not None:
        changes["noise_ratios"] = [args.noise_ratio]
    cfg = cfg.replace(**changes)
    cfg.corpus_files()
    return cfg


def cmd_toydata(args) -> int:
    from .toydata import DEFAULT_SIZES, make_reversal_corpus

    sizes = dict(DEFAULT_SIZES, train=args.train_size)
    make_reversal_corpus(args.out, seed=args.seed, sizes=sizes, branching=args.branching)
    cfg = pipeline.toy_config(seed=args.seed)
    cfg.save(args.out / "config.json")
    print(f"wrote corpus and {args.out / 'config.json'}")
    return 0


def run(args) -> int:
    if args.verb == "toydata":
        return cmd_toydata(args)
    cfg = resolve_config(args)
    force = args.force
    verb = args.verb
    if verb == "pretrain":
        rec = pipeline.cmd_pretrain(cfg, force=force)
        print(f"pretrained -> {Path(cfg.out) / 'pretrain.ckpt'} ({rec.get('scores', 'resumed')})")
    elif verb == "finetune":
        print(pipeline.cmd_finetune(cfg, force=force))
    elif verb == "attack":
        pipeline.cmd_attack(cfg, args.objective, force=force)
        print(f"attack trace written under {Path(cfg.out) / 'attack'}")
    elif verb == "augment":
        print(pipeline.cmd_augment(cfg, args.mode, force=force))
    elif verb == "noisegen":
        for name, path in pipeline.cmd_noisegen(cfg, force=force).items():
            print(f"{name}\t{path}")
    elif verb in ("evaluate", "report", "all"):
        fn = {"evaluate": pipeline.cmd_evaluate, "report": pipeline.cmd_report, "all": pipeline.cmd_all}[verb]
        report = fn(cfg, args.models, force=force)
        for metric in report.metrics:
            print(report.to_table(metric))
    elif verb == "sweep":
        pipeline.cmd_sweep(cfg, args.grid, force=force)
        print((Path(cfg.out) / "sweep" / f"{args.grid}.txt").read_text(), end="")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except DtnmtError as e:
        print(f"dtnmt: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
