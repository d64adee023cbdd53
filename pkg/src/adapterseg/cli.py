"""Batch command-line front door.

Subcommands: gen-data, train, eval, count-params, grad-check,
print-config.  Every command is deterministic given its flags and seed.
Exit codes: 0 ok, 1 check failure, 2 config/usage error, 3 numerical
abort.  Set ADAPTERSEG_LOG to error/warn/info/debug to control logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as data_mod
from .adapters import AdapterPlan, attach, count_breakdown, count_trainable, plan_sites
from .errors import ConfigError, ContractError, DataError, DimensionError, TrainingAbort
from .gradcheck import corrupted_op, run_suite
from .metrics import evaluate
from .model import CLIP_B_CONFIG, DEFAULT_TOY_CONFIG, ModelConfig, VLSMModel
from .tokenizer import Tokenizer
from .train import TrainConfig, train

log = logging.getLogger("adapterseg")

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

PRESETS = {"clip-b": CLIP_B_CONFIG, "toy": DEFAULT_TOY_CONFIG}
DEFAULT_D_PRIME = {("clip-b", "shallow"): 512, ("clip-b", "dense"): 64,
                   ("toy", "shallow"): 16, ("toy", "dense"): 8}


def _setup_logging():
    level = os.environ.get("ADAPTERSEG_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


@dataclass
class RunConfig:
    model: ModelConfig
    adapter: AdapterPlan
    train: TrainConfig
    data: dict
    out_dir: str

    def validate(self):
        plan_sites(self.adapter, self.model)  # raises naming the offending field
        if "manifest" not in self.data and "generate" not in self.data:
            raise ConfigError("data: expected a 'manifest' path or a 'generate' spec")
        if "generate" in self.data:
            gen = self.data["generate"]
            extra = set(gen) - {"seed", "n", "size"}
            if extra:
                raise ConfigError(f"data.generate: unknown fields {sorted(extra)}")
        return self

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - {"model", "adapter", "train", "data", "out_dir"}
        if extra:
            raise ConfigError(f"config: unknown top-level fields {sorted(extra)}")
        for key in ("adapter", "out_dir"):
            if key not in d:
                raise ConfigError(f"config: missing required field {key!r}")
        return cls(
            model=ModelConfig.from_dict(d.get("model", {})),
            adapter=AdapterPlan.from_dict(d["adapter"]),
            train=TrainConfig.from_dict(d.get("train", {})),
            data=d.get("data", {"generate": {"seed": 0, "n": 100, "size": 64}}),
            out_dir=d["out_dir"],
        ).validate()

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config: file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: malformed JSON ({exc})") from None
        return cls.from_dict(raw)

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "adapter": self.adapter.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data,
            "out_dir": self.out_dir,
        }


def _load_splits(data_spec, expected_size=None):
    if "manifest" in data_spec:
        splits = data_mod.load_dataset(data_spec["manifest"])
    else:
        gen = data_spec["generate"]
        size = int(gen.get("size", 64))
        splits = data_mod.generate(int(gen.get("seed", 0)), int(gen.get("n", 100)), size, size)
    if expected_size is not None and splits.train:
        h, w = splits.train[0].image.shape[:2]
        if (h, w) != (expected_size, expected_size):
            raise ConfigError(
                f"data: image size {h}x{w} does not match model image_size {expected_size}"
            )
    return splits


def cmd_gen_data(args):
    splits = data_mod.generate(args.seed, args.n, args.size, args.size)
    manifest = data_mod.save_dataset(splits, args.out)
    print(f"wrote {manifest}")
    print(f"splits: train={len(splits.train)} val={len(splits.val)} test={len(splits.test)}")
    return EXIT_OK


def cmd_train(args):
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = _load_splits(cfg.data, expected_size=cfg.model.image_size)

    dtype = np.float32 if cfg.train.dtype == "float32" else np.float64
    model = VLSMModel(cfg.model, seed=(cfg.train.seed, 1), dtype=dtype)
    adapted = attach(cfg.adapter, model, seed=(cfg.train.seed, 2))
    state, history = train(adapted, splits, cfg.train)

    ckpt_path = out_dir / "checkpoint.ckpt"
    ckpt.save_checkpoint(
        ckpt_path, state, cfg.model, cfg.adapter,
        extra={"seed": cfg.train.seed, "best_epoch": history.best_epoch,
               "best_val_dsc": history.best_val_dsc, "stop_reason": history.stop_reason,
               "trainable_params": adapted.n_trainable()},
    )
    (out_dir / "history.jsonl").write_text(history.to_jsonl())
    tokenizer = Tokenizer(cfg.model.vocab_size)
    report = evaluate(adapted, splits.val, tokenizer)
    (out_dir / "val_metrics.json").write_text(report.to_json() + "\n")
    print(f"stopped: {history.stop_reason} after {len(history.records)} epochs")
    print(f"best val DSC {history.best_val_dsc:.2f} at epoch {history.best_epoch}")
    print(report.to_table())
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_eval(args):
    header, state = ckpt.load_checkpoint(args.checkpoint)
    model_cfg = ModelConfig.from_dict(header["model"])
    plan = AdapterPlan.from_dict(header["adapter"]) if header.get("adapter") else None
    model = VLSMModel(model_cfg, seed=0, dtype=np.float32)
    target = attach(plan, model, seed=0) if plan is not None else model
    ckpt.restore_into(target, state)
    splits = data_mod.load_dataset(args.manifest)
    triplets = splits.split(args.split)
    if not triplets:
        raise ConfigError(f"split: {args.split!r} is empty in {args.manifest}")
    h, w = triplets[0].image.shape[:2]
    if (h, w) != (model_cfg.image_size, model_cfg.image_size):
        raise ConfigError(
            f"data: image size {h}x{w} does not match checkpoint image_size {model_cfg.image_size}"
        )
    tokenizer = Tokenizer(model_cfg.vocab_size)
    report = evaluate(target, triplets, tokenizer, threshold=args.threshold)
    print(f"split={args.split} n={report.n_samples} threshold={args.threshold}")
    print(report.to_table())
    out_path = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}.json"
    out_path.write_text(report.to_json() + "\n")
    print(f"report written to {out_path}")
    return EXIT_OK


def cmd_count_params(args):
    if args.preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {args.preset!r}, expected {sorted(PRESETS)}")
    cfg = PRESETS[args.preset]
    kind = {"sa": "shallow", "da": "dense"}[args.adapter]
    d_prime = args.d_prime or DEFAULT_D_PRIME[(args.preset, kind)]
    plan = AdapterPlan(variant=args.variant.upper(), kind=kind, d_prime=d_prime)
    total = count_trainable(plan, cfg)
    print(f"preset={args.preset} adapter={kind} variant={plan.variant} d_prime={d_prime}")
    for path, width, n in count_breakdown(plan, cfg):
        print(f"  {path:<16s} d={width:<5d} params={n}")
    print(f"total trainable parameters: {total}")
    return EXIT_OK


def cmd_grad_check(args):
    def run():
        return run_suite(seed=args.seed, tiny=args.tiny_config)

    if args.inject_fault:
        import adapterseg.tensor as tensor_mod

        if not callable(getattr(tensor_mod, args.inject_fault, None)):
            raise ConfigError(f"inject-fault: unknown op {args.inject_fault!r}")
        with corrupted_op(args.inject_fault):
            results = run()
    else:
        results = run()
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{r.name:20s} {'PASS' if r.passed else 'FAIL'}  max rel err {r.max_rel_err:.3e}")
    if failed:
        print(f"FAILED: {', '.join(r.name for r in failed)}")
        return EXIT_CHECK_FAILURE
    print("all gradient checks passed")
    return EXIT_OK


def cmd_print_config(args):
    cfg = RunConfig(
        model=DEFAULT_TOY_CONFIG,
        adapter=AdapterPlan(variant="VL", kind="dense", d_prime=8),
        train=TrainConfig(),
        data={"generate": {"seed": 0, "n": 300, "size": 64}},
        out_dir="runs/example",
    )
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="adapterseg",
        description="Adapter fine-tuning of a frozen text-conditioned segmentation model",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run adapter fine-tuning from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count-params", help="closed-form trainable parameter budget")
    p.add_argument("--preset", default="clip-b")
    p.add_argument("--adapter", choices=["sa", "da"], required=True)
    p.add_argument("--variant", default="vl", choices=["v", "vl", "vlc"])
    p.add_argument("--d-prime", type=int, default=None)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("grad-check", help="finite-difference verification suite")
    p.add_argument("--tiny-config", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", default=None, metavar="OP",
                   help="corrupt one op's backward rule (must make the suite fail)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("print-config", help="print a fully populated default config")
    p.set_defaults(func=cmd_print_config)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, DataError, DimensionError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
