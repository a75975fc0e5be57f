"""Command-line surface tying the pipeline together.

Every subcommand reads one INI-style config file (sections in brackets,
key = value lines) plus a few flag overrides, writes its results under
--out, and exits nonzero with a one-line ``ERROR:<CODE>:`` prefix on any
failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import sys

from .ablate import format_table, run_ablation, table_tsv
from .bench import DEFAULT_BUCKET_EDGES, bench_latency, format_report, report_tsv
from .data import SynthTaskSpec, generate_dataset, load_split, manifest_checksum, read_units
from .evaluate import evaluate_model, unit_bleu
from .model import ModelConfig, build_model, load_checkpoint, transfer_encoder
from .training import TrainConfig, TrainingDivergedError, distill, train

__all__ = ["main"]


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _coerce(raw: str, target_type):
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return target_type(raw)


def _section_to_dataclass(parser: configparser.ConfigParser, section: str, cls):
    """Build a config dataclass from one INI section, rejecting unknown keys."""
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    types = {f.name: type(getattr(cls(), f.name)) for f in dataclasses.fields(cls)}
    kwargs = {}
    if parser.has_section(section):
        for key, raw in parser.items(section):
            if key not in fields:
                raise CliError("CONFIG", f"unknown key {key!r} in section [{section}]")
            try:
                kwargs[key] = _coerce(raw, types[key])
            except ValueError as exc:
                raise CliError("CONFIG", f"bad value for {key!r} in [{section}]: {exc}")
    return cls(**kwargs)


def _load_config(path: str | None):
    parser = configparser.ConfigParser()
    if path is not None:
        if not os.path.exists(path):
            raise CliError("MISSING_ARTIFACT", f"config file not found: {path}")
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
        known = {"data", "model", "train", "bench"}
        for section in parser.sections():
            if section not in known:
                raise CliError("CONFIG", f"unknown section [{section}] in {path}")
    return parser


def _require(path: str | None, what: str) -> str:
    if path is None:
        raise CliError("USAGE", f"missing required flag for {what}")
    if not os.path.exists(path):
        raise CliError("MISSING_ARTIFACT", f"expected {what} at {path}")
    return path


def _bench_options(parser: configparser.ConfigParser) -> tuple[tuple[float, ...], int]:
    edges = DEFAULT_BUCKET_EDGES
    warmup = 3
    if parser.has_section("bench"):
        for key, raw in parser.items("bench"):
            if key == "bucket_edges":
                edges = tuple(float(tok) for tok in raw.replace(",", " ").split())
            elif key == "warmup":
                warmup = int(raw)
            else:
                raise CliError("CONFIG", f"unknown key {key!r} in section [bench]")
    return edges, warmup


def _apply_seed(args, *cfgs):
    if args.seed is not None:
        for cfg in cfgs:
            if hasattr(cfg, "seed"):
                cfg_replaced = dataclasses.replace(cfg, seed=args.seed)
                yield cfg_replaced
            else:
                yield cfg
    else:
        yield from cfgs


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text + "\n")
    os.replace(tmp, path)


def cmd_gen_data(args) -> None:
    parser = _load_config(args.config)
    spec = _section_to_dataclass(parser, "data", SynthTaskSpec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    report = generate_dataset(spec, args.out)
    print(
        f"wrote {sum(report.counts.values())} samples to {args.out} "
        f"(infeasible {100 * report.infeasible_fraction:.1f}%, "
        f"mean frames/phone {report.mean_frames_per_phone:.2f})"
    )
    print(f"manifest checksum {manifest_checksum(args.out)}")


def _train_common(args, stage: str, variant: str, needs_ckpt: str | None):
    parser = _load_config(args.config)
    model_cfg = _section_to_dataclass(parser, "model", ModelConfig)
    train_cfg = _section_to_dataclass(parser, "train", TrainConfig)
    model_cfg = dataclasses.replace(model_cfg, variant=variant)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    data_dir = _require(args.data, "dataset directory")
    _require(os.path.join(data_dir, "manifest.tsv"), "dataset manifest")

    if stage == "ar":
        model = build_model(model_cfg, seed=train_cfg.seed)
    elif stage == "nar-stage1":
        model = build_model(model_cfg, seed=train_cfg.seed)
        if needs_ckpt:
            teacher = load_checkpoint(_require(args.ckpt, "pretrained AR checkpoint"))
            transfer_encoder(teacher, model)
    else:  # nar-stage2 resumes the stage-1 model
        ckpt = _require(args.ckpt, "stage-1 NAR checkpoint")
        model = load_checkpoint(ckpt)
        if model.cfg.variant != "nar":
            raise CliError("CONFIG", f"checkpoint {ckpt} is not a parallel model")
    try:
        result = train(model, data_dir, train_cfg, stage, args.out)
    except TrainingDivergedError as exc:
        raise CliError("TRAIN_DIVERGED", str(exc))
    print(
        f"{stage}: {result.steps} steps, final loss {result.final_loss:.4f}, "
        f"checkpoint {result.checkpoint_path}"
    )
    if result.skipped_infeasible:
        print(f"skipped {result.skipped_infeasible} infeasible samples")


def cmd_train_ar(args) -> None:
    _train_common(args, "ar", "ar", needs_ckpt=None)


def cmd_train_nar(args) -> None:
    _train_common(args, "nar-stage1", "nar", needs_ckpt="ar")


def cmd_finetune_nmla(args) -> None:
    _train_common(args, "nar-stage2", "nar", needs_ckpt="stage1")


def cmd_distill(args) -> None:
    _load_config(args.config)
    teacher = load_checkpoint(_require(args.ckpt, "AR teacher checkpoint"))
    data_dir = _require(args.data, "dataset directory")
    report = distill(teacher, data_dir, args.out)
    print(
        f"distilled {report.n_samples} training targets into {report.out_dir} "
        f"({report.n_empty_kept_original} empty decodes kept original)"
    )


def cmd_eval(args) -> None:
    _load_config(args.config)
    data_dir = _require(args.data, "dataset directory")
    feats, refs = load_split(data_dir, args.split)
    if args.hyp is not None:
        hyps = read_units(_require(args.hyp, "hypothesis units file"))
        score = unit_bleu(hyps, refs)
    else:
        model = load_checkpoint(_require(args.ckpt, "model checkpoint"))
        score = evaluate_model(model, feats, refs)
    print(f"unit-bleu {score:.4f}")
    if args.out:
        _write(os.path.join(args.out, "eval.txt"), f"{args.split}\t{score:.6f}")


def cmd_ablate(args) -> None:
    parser = _load_config(args.config)
    model_cfg = _section_to_dataclass(parser, "model", ModelConfig)
    train_cfg = _section_to_dataclass(parser, "train", TrainConfig)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    data_dir = _require(args.data, "dataset directory")
    try:
        result = run_ablation(data_dir, model_cfg, train_cfg, args.out)
    except TrainingDivergedError as exc:
        raise CliError("TRAIN_DIVERGED", str(exc))
    text = format_table(result)
    print(text)
    _write(os.path.join(args.out, "ablation.txt"), text)
    _write(os.path.join(args.out, "ablation.tsv"), table_tsv(result))


def cmd_bench(args) -> None:
    parser = _load_config(args.config)
    edges, warmup = _bench_options(parser)
    ar_model = load_checkpoint(_require(args.ar_ckpt, "AR checkpoint"))
    nar_model = load_checkpoint(_require(args.nar_ckpt, "NAR checkpoint"))
    data_dir = _require(args.data, "dataset directory")
    feats, _ = load_split(data_dir, args.split)
    report = bench_latency(ar_model, nar_model, feats, bucket_edges=edges, n_warmup=warmup)
    text = format_report(report)
    print(text)
    _write(os.path.join(args.out, "bench.txt"), text)
    _write(os.path.join(args.out, "bench.tsv"), report_tsv(report))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cs2u",
        description="CTC-based parallel speech-to-unit translation at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ckpt=False, data=True):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        if data:
            p.add_argument("--data", default=None, help="dataset directory")
        if ckpt:
            p.add_argument("--ckpt", default=None, help="checkpoint path")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p, data=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-ar", help="train the autoregressive baseline")
    common(p, ckpt=True)
    p.set_defaults(func=cmd_train_ar)

    p = sub.add_parser("distill", help="re-target the train split with a teacher")
    common(p, ckpt=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("train-nar", help="stage-1 CTC training with glancing")
    common(p, ckpt=True)
    p.set_defaults(func=cmd_train_nar)

    p = sub.add_parser("finetune-nmla", help="stage-2 bigram-matching fine-tuning")
    common(p, ckpt=True)
    p.set_defaults(func=cmd_finetune_nmla)

    p = sub.add_parser("eval", help="unit-BLEU of a checkpoint or hypothesis file")
    common(p, ckpt=True)
    p.add_argument("--hyp", default=None, help="precomputed hypothesis units file")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the five-row technique ablation")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="latency benchmark: sequential vs parallel")
    common(p)
    p.add_argument("--ar-ckpt", default=None, help="baseline checkpoint")
    p.add_argument("--nar-ckpt", default=None, help="parallel checkpoint")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        print(f"ERROR:{exc.code}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"ERROR:INTERNAL: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
