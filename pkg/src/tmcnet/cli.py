"""Command-line entry point: ``tmcnet <command> [--config FILE] [--key value ...]``.

Any :class:`TrainConfig` field can be overridden with ``--field value``
(dashes and underscores are interchangeable).  The seed in force is always
echoed so every run can be repeated.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import TrainConfig
from .data import (generate_dataset, read_dataset, select, split_cases, write_dataset, write_pgm,
                   write_splits)
from .errors import CheckpointError, ConfigError, DataError
from .metrics import write_records
from .text import Vocabulary
from .train import (TrainingError, evaluate, flatten, load_data, make_batch, model_from_checkpoint,
                    predict, run_ablation, train)

CONFIG_KEYS = {f.name for f in fields(TrainConfig)}


def _overrides(extra: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key --{key}")
        if not eq:
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(f"--{key} needs a value") from None
        out[key] = value
    return out


def _config(args, extra) -> TrainConfig:
    over = _overrides(extra)
    if args.config:
        return TrainConfig.load(args.config, over)
    return TrainConfig.from_dict(over)


def _split_ids(cfg: TrainConfig, split: str):
    cases, splits = load_data(cfg)
    if split not in splits:
        raise DataError(f"unknown split {split!r}")
    return cases, splits, select(cases, splits[split])


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg: TrainConfig) -> int:
    cases = generate_dataset(cfg.synth_config())
    root = write_dataset(cases, args.out)
    write_splits(split_cases(cases, cfg.split_spec()), root / "splits.tsv")
    n_amb = sum(c.ambiguous for c in cases)
    print(f"wrote {len(cases)} cases ({n_amb} ambiguous) to {root}  data_seed={cfg.data_seed}")
    return 0


def cmd_split(args, cfg: TrainConfig) -> int:
    root = Path(args.data)
    cases = read_dataset(root)
    splits = split_cases(cases, cfg.split_spec())
    write_splits(splits, root / "splits.tsv")
    print(" ".join(f"{k}={len(v)}" for k, v in splits.items()) + f"  split_seed={cfg.split_seed}")
    return 0


def cmd_train(args, cfg: TrainConfig) -> int:
    print(f"seed={cfg.seed}", flush=True)
    res = train(cfg, out_dir=args.out, verbose=True)
    ck = res.checkpoint
    print(f"best epoch {ck.epoch}  val dice {ck.best_val_dice:.4f}  steps {res.steps}"
          f"{'  (early stop)' if res.stopped_early else ''}")
    return 0


def cmd_eval(args, cfg: TrainConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run_cfg = TrainConfig.from_dict(ckpt.config)
    if cfg.data_dir:
        run_cfg = run_cfg.replace(data_dir=cfg.data_dir)
    model = model_from_checkpoint(ckpt)
    _, _, cases = _split_ids(run_cfg, args.split)
    ablate = run_cfg.text_ablation or args.text_ablation
    report = evaluate(model, cases, args.split, run_cfg.seed, ablate, run_cfg.eval_batch)
    rows = report.records()
    if args.out:
        write_records(rows, args.out)
    for r in rows:
        if r["case_id"] == "*":
            print(json.dumps(r))
    if args.masks:
        out = Path(args.masks)
        out.mkdir(parents=True, exist_ok=True)
        samples = flatten(cases)
        prob = predict(model, samples, Vocabulary.default(), ablate, run_cfg.eval_batch)
        for s, p in zip(samples, prob):
            write_pgm(out / f"{s.case_id}_{s.slice_id:02d}.pgm", ((p[0] > 0.5) * 255).astype(np.uint8))
    return 0


def cmd_ablate(args, cfg: TrainConfig) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    print(f"seeds={seeds}", flush=True)
    result = run_ablation(cfg, seeds=seeds, verbose=args.verbose)
    print(result.format())
    if args.out:
        write_records(result.table(), args.out)
    return 1 if any(result.failures.values()) else 0


def cmd_gradcheck(args, cfg: TrainConfig) -> int:
    from .gradcheck import run_end_to_end, run_op_suite

    seeds = range(args.seeds)
    ok = True
    results = run_op_suite(seeds=seeds)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.report.max_rel_err)
        ok &= r.passed
    for name, err in sorted(worst.items()):
        print(f"{'PASS' if err < 1e-4 else 'FAIL'}  {name:<24} max rel err {err:.2e}")
    if not args.ops_only:
        for r in run_end_to_end(seeds=seeds):
            ok &= r.passed
            print(f"{'PASS' if r.passed else 'FAIL'}  end_to_end seed {r.seed:<10} "
                  f"max rel err {r.report.max_rel_err:.2e}")
    print("gradcheck", "passed" if ok else "FAILED")
    return 0 if ok else 1


def cmd_dump_attn(args, cfg: TrainConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run_cfg = TrainConfig.from_dict(ckpt.config)
    if cfg.data_dir:
        run_cfg = run_cfg.replace(data_dir=cfg.data_dir)
    model = model_from_checkpoint(ckpt)
    _, _, cases = _split_ids(run_cfg, args.split)
    samples = flatten(cases)[: args.n]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images, _, ids, tmask = make_batch(samples, Vocabulary.default(), model.dtype)
    res = model.forward(images, ids, tmask, text_ablation=run_cfg.text_ablation)
    vocab = Vocabulary.default()
    index = ["sample\tstage\ttoken\tword\tfile\tprompt"]
    for i, entry in sorted(res.stage_cache.items()):
        attn = entry.get("attn_VL")
        if attn is None:
            continue
        np.save(out / f"attn_stage{i}.npy", attn.data)
        g = int(round(attn.shape[-2] ** 0.5))
        for b, s in enumerate(samples):
            # one map per real prompt token: how much each visual token attends to it
            for j in np.flatnonzero(tmask[b]):
                w = attn.data[b][:, j].reshape(g, g)
                name = f"{s.case_id}_{s.slice_id:02d}_stage{i}_tok{j}.pgm"
                span = w.max() - w.min()
                img = (w - w.min()) / span if span > 0 else np.zeros_like(w)
                write_pgm(out / name, np.round(img * 255).astype(np.uint8))
                index.append(f"{b}\t{i}\t{j}\t{vocab.itos[ids[b, j]]}\t{name}\t{s.prompt}")
    (out / "index.tsv").write_text("\n".join(index) + "\n", encoding="utf-8")
    print(f"wrote attention maps for {len(samples)} samples to {out}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    p = argparse.ArgumentParser(prog="tmcnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    s = sub.add_parser("split", parents=[common], help="write splits.tsv for a dataset directory")
    s.add_argument("--data", required=True)
    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--out", required=True)
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", help="metrics JSON-lines file")
    e.add_argument("--masks", help="directory for predicted mask graymaps")
    e.add_argument("--text-ablation", action="store_true")
    a = sub.add_parser("ablate", parents=[common], help="train and evaluate the MCM x alignment grid")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--out", help="table as JSON lines")
    a.add_argument("--verbose", action="store_true")
    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    c.add_argument("--seeds", type=int, default=10)
    c.add_argument("--ops-only", action="store_true")
    d = sub.add_parser("dump-attn", parents=[common], help="write cross-attention maps")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--split", default="test")
    d.add_argument("--n", type=int, default=4)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "dump-attn": cmd_dump_attn}


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = _config(args, extra)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, DataError, CheckpointError, TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
