"""Command-line harness: data generation, quality control, training, sampling, evaluation.

Exit status is 0 on success, 2 for invalid input and 3 for numeric failure.
Everything is written below ``--out``::

    data/{train,test}/manifest.tsv   qc/manifest.tsv, scores.csv, review.jsonl
    train/model.cfg, stageK.okaf, stageK_ema.okaf, stageK_trace.csv
    samples/*.pgm                    eval/report-<split>.json
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import checkpoint
from .config import coerce, read_kv, to_map
from .curriculum import (EmaShadow, StageConfig, default_stage, optim_from_state, run_curriculum,
                         split_by_category)
from .datagen import BOS, SEP, encode, generate, read_manifest, write_manifest, write_pnm
from .errors import NumericError, ValidationError
from .evaluation import ModelPredictor, evaluate, write_report
from .model import ModelConfig, UnifiedModel, load_config, save_config
from .objectives import euler_sample
from .quality import DESK_MIN_SIDE, PRODUCTION_LEN_MAX, PRODUCTION_LEN_MIN, ToyScorer, export_review, run_qc, write_scores

log = logging.getLogger("okaf")

DEFAULTS = {
    "data": {
        "train": {"text": 40, "t2i": 200, "i2t": 300, "interleaved": 100},
        "test": {"t2i": 10, "i2t": 20, "interleaved": 25},
        "noise_fraction": 0.1,
        "size": 16,
    },
    "qc": {"lambda": 0.5, "fraction": 0.5, "min_side": DESK_MIN_SIDE, "len_min": PRODUCTION_LEN_MIN,
           "len_max": PRODUCTION_LEN_MAX, "per_modality": False, "review_samples": 200},
    "train": {"vae_steps": 600, "vae_lr": 1e-2},
    "eval": {"steps": 20, "max_new_tokens": 128},
}


class Settings:
    """Config file sections merged over the defaults."""

    def __init__(self, path: str | None, seed: int):
        raw = read_kv(path) if path else {"": {}}
        self.seed = seed
        self.sections = {}
        for name, defaults in DEFAULTS.items():
            given = raw.get(name, {})
            unknown = set(given) - set(defaults)
            if unknown:
                raise ValidationError(f"[{name}]: unknown keys {sorted(unknown)}")
            merged = dict(defaults)
            for k, v in given.items():
                merged[k] = {a: int(b) for a, b in to_map(v).items()} if isinstance(defaults[k], dict) \
                    else coerce(defaults[k], v)
            self.sections[name] = merged
        model_kv = dict(raw.get("model", {}))
        model_kv.setdefault("seed", str(seed))
        self.model = ModelConfig.from_mapping(model_kv)
        self.stages = {}
        for sid in (1, 2, 3):
            base = default_stage(sid)
            base = dataclasses.replace(base, seed=base.seed + 1000 * seed)
            given = raw.get(f"stage{sid}", {})
            self.stages[sid] = StageConfig.from_mapping(given, base) if given else base

    def __getitem__(self, name):
        return self.sections[name]


def _paths(out: Path) -> dict[str, Path]:
    return {"data": out / "data", "qc": out / "qc", "train": out / "train",
            "samples": out / "samples", "eval": out / "eval"}


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ValidationError(f"{path} not found; run `{hint}` first")
    return path


def cmd_gen_data(args, st: Settings) -> None:
    d = st["data"]
    for split in ("train", "test"):
        samples = generate(d[split], st.seed, split, d["size"],
                           d["noise_fraction"] if split == "train" else 0.0)
        path = write_manifest(samples, _paths(args.out)["data"] / split)
        print(f"{split}: {len(samples)} records -> {path}")


def cmd_qc(args, st: Settings) -> None:
    q = st["qc"]
    src = _require(_paths(args.out)["data"] / "train" / "manifest.tsv", "gen-data")
    samples = read_manifest(src)
    res = run_qc(samples, ToyScorer(), q["lambda"], q["fraction"], q["min_side"], q["len_min"],
                 q["len_max"], q["per_modality"])
    out = _paths(args.out)["qc"]
    write_manifest(res.kept, out)
    write_scores(out / "scores.csv", res)
    export_review(res.kept[:q["review_samples"]], out / "review.jsonl")
    print(f"kept {len(res.kept)} of {len(samples)} records ({len(res.rejected)} rejected) -> {out}")


def _training_data(out: Path):
    qc = _paths(out)["qc"] / "manifest.tsv"
    src = qc if qc.exists() else _require(_paths(out)["data"] / "train" / "manifest.tsv", "gen-data")
    return read_manifest(src)


def cmd_train(args, st: Settings) -> None:
    tdir = _paths(args.out)["train"]
    datasets = split_by_category(_training_data(args.out))
    tr = st["train"]
    if args.stage == "all":
        ids, model, ema, optim, vae_steps = [1, 2, 3], UnifiedModel(st.model), None, None, tr["vae_steps"]
    else:
        sid = int(args.stage)
        ids = [sid]
        if sid == 1:
            model, ema, optim, vae_steps = UnifiedModel(st.model), None, None, tr["vae_steps"]
        else:
            prev = _require(tdir / f"stage{sid - 1}.okaf", f"train --stage {sid - 1}")
            model = UnifiedModel.load(prev, load_config(tdir / "model.cfg"))
            ema = EmaShadow(checkpoint.load(tdir / f"stage{sid - 1}_ema.okaf"))
            optim = optim_from_state(checkpoint.load(tdir / f"stage{sid - 1}_optim.okaf"))
            vae_steps = 0
    tdir.mkdir(parents=True, exist_ok=True)
    save_config(tdir / "model.cfg", model.config)
    results = run_curriculum(model, datasets, [st.stages[i] for i in ids], tdir, vae_steps, tr["vae_lr"],
                             ema, optim)
    for r in results:
        last = r.trace[-1]
        print(f"stage {r.stage_id}: {len(r.trace)} steps, last l_ntp={last.l_ntp:.4f} "
              f"l_flow={last.l_flow:.4f} -> {r.checkpoint}")


def _load_trained(out: Path, ema: bool) -> UnifiedModel:
    tdir = _paths(out)["train"]
    for sid in (3, 2, 1):
        path = tdir / (f"stage{sid}_ema.okaf" if ema else f"stage{sid}.okaf")
        if path.exists():
            log.info("loading %s", path)
            return UnifiedModel.load(path, load_config(tdir / "model.cfg"))
    raise ValidationError(f"no trained checkpoint under {tdir}; run `train` first")


def cmd_sample(args, st: Settings) -> None:
    model = _load_trained(args.out, args.ema)
    size = st["data"]["size"]
    cond = [BOS] + encode(args.prompt) + [SEP]
    img = euler_sample(model, cond, (size, size), args.steps, args.seed)
    sdir = _paths(args.out)["samples"]
    sdir.mkdir(parents=True, exist_ok=True)
    path = sdir / f"sample-seed{args.seed}-steps{args.steps}.pgm"
    write_pnm(path, img)
    print(path)


def cmd_eval(args, st: Settings) -> None:
    model = _load_trained(args.out, args.ema)
    samples = read_manifest(_require(_paths(args.out)["data"] / args.split / "manifest.tsv", "gen-data"))
    train_ids = {s.id for s in _training_data(args.out)}
    e = st["eval"]
    report = evaluate(ModelPredictor(model, e["steps"], st.seed, e["max_new_tokens"]), samples, args.split,
                      train_ids=train_ids, seed=st.seed)
    edir = _paths(args.out)["eval"]
    edir.mkdir(parents=True, exist_ok=True)
    print(write_report(report, edir / f"report-{args.split}.json"))


def build_parser() -> argparse.ArgumentParser:
    def shared(with_defaults: bool) -> argparse.ArgumentParser:
        # accepted before or after the subcommand; only the top level sets defaults
        d = (lambda v: v) if with_defaults else (lambda v: argparse.SUPPRESS)
        a = argparse.ArgumentParser(add_help=False)
        a.add_argument("--config", metavar="PATH", default=d(None),
                       help="key = value config file with [sections]")
        a.add_argument("--seed", type=int, default=d(0))
        a.add_argument("--out", type=Path, default=d(Path("run")), metavar="DIR")
        a.add_argument("-q", "--quiet", action="store_true", default=d(False))
        return a

    common = shared(False)
    p = argparse.ArgumentParser(prog="okaf", description=__doc__.split("\n")[0], parents=[shared(True)])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write train/test synthetic corpora")
    sub.add_parser("qc", parents=[common], help="filter, score and retain training records")
    t = sub.add_parser("train", parents=[common], help="run curriculum stages")
    t.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    s = sub.add_parser("sample", parents=[common], help="generate one image from a caption")
    s.add_argument("--prompt", required=True)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--ema", action="store_true", help="use the EMA weights")
    e = sub.add_parser("eval", parents=[common], help="evaluate the latest checkpoint")
    e.add_argument("--split", default="test")
    e.add_argument("--ema", action="store_true", help="use the EMA weights")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "qc": cmd_qc, "train": cmd_train, "sample": cmd_sample,
            "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "steps", 1) < 1:
            raise ValidationError("--steps must be at least 1")
        COMMANDS[args.command](args, Settings(args.config, args.seed))
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, FileNotFoundError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
