"""Command-line surface: gen-data, train, sample, eval, bench.

Configuration comes from an optional JSON file (or a named preset) with
command-line flags overriding individual values; the effective config is
echoed into every output artifact. Exit codes: 0 success, 1 runtime failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import torch

from . import checkpoint as ckpt_io
from .denoiser import DenoiserConfig
from .discrete import GeometricNoise, RateMatrix, ScoreNetConfig, sample_discrete, train_discrete
from .evaluate import EvalReport, accuracy, reasoning_steps, throughput, write_report
from .sampling import SamplerConfig, sample_dot, sample_multipass, self_consistency
from .schedule import make_sqrt_schedule
from .tasks import Example, gen_bool, gen_mult, load_jsonl, split_by_question, write_jsonl
from .textspace import Vocabulary
from .training import TrainConfig, encode_multipass, encode_single_pass, train

logger = logging.getLogger(__name__)

__all__ = ["main", "run_command", "config_hash", "ConfigError", "PRESETS", "DEFAULT_CONFIG"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


DEFAULT_CONFIG: dict = {
    "backend": "continuous",
    "task": "mult",
    "seed": 0,
    "multipass": False,
    "data": {"digits": "2x2", "mode": "enumerate", "n": 10000, "max_depth": 3, "test_frac": 0.1},
    "model": {
        "layers": 4, "model_dim": 128, "heads": 4, "ff_dim": 512,
        "max_len": 48, "embed_dim": 32, "self_conditioning": True, "dropout": 0.0,
    },
    "schedule": {"T": 2000, "s0": 1e-4, "beta_max": 0.999},
    "noise": {"sigma_min": 1e-3, "sigma_max": 10.0},
    "train": {
        "lr": 3e-4, "steps": 8000, "batch": 64, "seq_len": 48,
        "eps_min": 0.95, "gamma": 0.01, "k": 1, "self_cond_prob": 0.5,
        "loss_weighting": "uniform", "grad_clip": 1.0, "seed": 0,
        "checkpoint_every": 0, "warmup_frac": 0.01, "scheduled_semantics": "oracle",
    },
    "sampler": {
        "T_steps": 64, "solver": "ancestral", "z_noise_temperature": 0.5,
        "logit_temperature": 0.5, "clamp_to_embedding": False,
        "max_passes": 8, "m": 1, "seed": 0,
    },
}

PRESETS: dict[str, dict] = {
    "mult-2x2-scratch": {
        "task": "mult",
        "data": {"digits": "2x2", "mode": "enumerate"},
        "train": {"steps": 8000},
        "sampler": {"T_steps": 8, "z_noise_temperature": 0.0},
    },
    "bool-d3-scratch": {
        "task": "bool",
        "data": {"max_depth": 3, "n": 20000},
        "train": {"steps": 4000},
        "sampler": {"T_steps": 2, "z_noise_temperature": 0.0},
    },
    # The from-scratch grade-school-math reference point. Expensive (hours on
    # CPU, high tens of thousands of steps) and known to top out at a few
    # percent exact match without a pretrained base model; excluded from CI.
    "gsm-aug-scratch": {
        "task": "jsonl",
        "model": {"max_len": 128},
        "train": {"steps": 60000, "batch": 128, "seq_len": 128},
        "sampler": {"T_steps": 64},
    },
}

# Keys that never change results; excluded from the config hash.
_HASH_EXCLUDE = {"out", "workers", "quiet"}


def _deep_update(base: dict, patch: dict) -> dict:
    for key, val in patch.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], val)
        else:
            base[key] = val
    return base


def config_hash(cfg: dict) -> str:
    """Stable under key reordering; ignores purely operational keys."""
    trimmed = {k: v for k, v in cfg.items() if k not in _HASH_EXCLUDE}
    blob = json.dumps(trimmed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def build_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    preset = getattr(args, "preset", None)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
        _deep_update(cfg, copy.deepcopy(PRESETS[preset]))
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                _deep_update(cfg, json.load(f))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
    for flag, target in _FLAG_MAP.items():
        val = getattr(args, flag, None)
        if val is not None:
            node = cfg
            *parents, leaf = target
            for p in parents:
                node = node[p]
            node[leaf] = val
    if cfg["backend"] not in ("continuous", "discrete"):
        raise ConfigError(f"backend must be 'continuous' or 'discrete', got {cfg['backend']!r}")
    if cfg["task"] not in ("mult", "bool", "jsonl"):
        raise ConfigError(f"task must be one of mult/bool/jsonl, got {cfg['task']!r}")
    cfg["train"]["seed"] = cfg["seed"]
    return cfg


_FLAG_MAP = {
    "backend": ("backend",),
    "task": ("task",),
    "seed": ("seed",),
    "multipass": ("multipass",),
    "digits": ("data", "digits"),
    "mode": ("data", "mode"),
    "n": ("data", "n"),
    "max_depth": ("data", "max_depth"),
    "test_frac": ("data", "test_frac"),
    "steps": ("train", "steps"),
    "lr": ("train", "lr"),
    "batch": ("train", "batch"),
    "seq_len": ("train", "seq_len"),
    "checkpoint_every": ("train", "checkpoint_every"),
    "t_steps": ("sampler", "T_steps"),
    "solver": ("sampler", "solver"),
    "m": ("sampler", "m"),
    "z_temperature": ("sampler", "z_noise_temperature"),
    "logit_temperature": ("sampler", "logit_temperature"),
    "max_len": ("model", "max_len"),
}


def _cache_dir() -> Path:
    return Path(os.environ.get("DOT_CACHE_DIR", ".seqdiff-cache"))


def _echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "effective_config.json", "w", encoding="utf-8") as f:
        json.dump({**cfg, "config_hash": config_hash(cfg)}, f, indent=1, sort_keys=True)


def _generate(cfg: dict) -> list[Example]:
    data = cfg["data"]
    if cfg["task"] == "mult":
        digits = str(data["digits"])
        try:
            da, db = (int(x) for x in digits.lower().split("x"))
        except ValueError:
            raise ConfigError(f"data.digits must look like '2x2', got {digits!r}")
        if data["mode"] == "enumerate":
            return gen_mult(da, db, mode="enumerate")
        return gen_mult(da, db, mode="sample", n=int(data["n"]), seed=cfg["seed"])
    if cfg["task"] == "bool":
        return gen_bool(int(data["max_depth"]), int(data["n"]), cfg["seed"])
    raise ConfigError("task 'jsonl' is ingested with --train-file/--test-file, not generated")


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    out_dir = Path(args.out) if args.out else _cache_dir() / f"{cfg['task']}-{config_hash(cfg)[:8]}"
    examples = _generate(cfg)
    train_set, test_set = split_by_question(examples, cfg["data"]["test_frac"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(train_set, out_dir / "train.jsonl")
    write_jsonl(test_set, out_dir / "test.jsonl")
    manifest = {
        "task": cfg["task"],
        "config_hash": config_hash(cfg),
        "n_total": len(examples),
        "n_train": len(train_set),
        "n_test": len(test_set),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    _echo_config(cfg, out_dir)
    print(f"wrote {len(train_set)} train / {len(test_set)} test examples to {out_dir}")
    return 0


def _load_examples(path: str) -> list[Example]:
    try:
        return load_jsonl(path)
    except FileNotFoundError:
        raise ConfigError(f"data file not found: {path}")


def cmd_train(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    if not args.train_file:
        raise ConfigError("train requires --train-file (generate one with gen-data)")
    examples = _load_examples(args.train_file)
    texts = [ex.question for ex in examples] + [ex.target_text() for ex in examples]
    vocab = Vocabulary.from_texts(texts)
    out_dir = Path(args.out) if args.out else Path("runs") / f"{cfg['task']}-{config_hash(cfg)[:8]}"
    _echo_config(cfg, out_dir)

    train_cfg = TrainConfig(**cfg["train"])
    L = cfg["model"]["max_len"]
    encode = encode_multipass if cfg["multipass"] else encode_single_pass
    dataset = encode(examples, vocab, L)

    if cfg["backend"] == "continuous":
        sched = make_sqrt_schedule(**cfg["schedule"])
        dn_cfg = DenoiserConfig(vocab_size=len(vocab), **cfg["model"])
        summary = train(train_cfg, dataset, dn_cfg, sched, out_dir=out_dir, resume_from=args.resume)
    else:
        model_fields = {k: v for k, v in cfg["model"].items() if k not in ("embed_dim", "self_conditioning")}
        sn_cfg = ScoreNetConfig(vocab_size=len(vocab), **model_fields)
        rate = RateMatrix.absorbing(len(vocab), mask_id=vocab.mask_id)
        noise = GeometricNoise(**cfg["noise"])
        summary = train_discrete(train_cfg, dataset, sn_cfg, rate, noise, out_dir=out_dir, resume_from=args.resume)
    print(f"trained {train_cfg.steps} steps; final checkpoint: {summary['last_checkpoint']}")
    return 0


def _sample_one(tm: ckpt_io.TrainedModel, question: str, cfg: dict, sampler: SamplerConfig, gen: torch.Generator):
    if tm.backend == "discrete":
        return sample_discrete(tm, question, sampler.T_steps, gen)
    if cfg["multipass"]:
        return sample_multipass(tm, question, sampler, gen)
    return sample_dot(tm, question, sampler, gen)


def cmd_sample(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    tm = ckpt_io.load_trained(args.checkpoint)
    questions = _load_examples(args.questions)
    sampler = SamplerConfig(**cfg["sampler"]).validate()
    out_path = Path(args.out) if args.out else Path("predictions.jsonl")
    gen = torch.Generator().manual_seed(cfg["seed"])
    rows = []
    for ex in questions:
        if sampler.m == 1:
            out = _sample_one(tm, ex.question, cfg, sampler, gen)
            row = out.__dict__
        else:
            outs = [_sample_one(tm, ex.question, cfg, sampler, gen) for _ in range(sampler.m)]
            answer = self_consistency(outs)
            best = next((o for o in outs if o.answer == answer), outs[0])
            row = {
                "rationale_text": best.rationale_text,
                "answer": answer,
                "passes": sum(o.passes for o in outs),
                "forward_calls": sum(o.forward_calls for o in outs),
                "wallclock_s": sum(o.wallclock_s for o in outs),
                "truncated": best.truncated,
            }
        rows.append({"question": ex.question, **row})
    with open(out_path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    print(f"wrote {len(rows)} predictions to {out_path}")
    return 0


def _read_rows(path: str) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    preds = _read_rows(args.predictions)
    golds = _load_examples(args.gold)
    if len(preds) != len(golds):
        raise ConfigError(f"predictions ({len(preds)}) and gold ({len(golds)}) differ in length")
    acc = accuracy([p.get("answer", "") for p in preds], [g.answer for g in golds])
    calls = [p.get("forward_calls", 0) for p in preds]
    wall = sum(p.get("wallclock_s", 0.0) for p in preds)
    report = EvalReport(
        accuracy=acc,
        throughput_it_per_s=len(preds) / wall if wall > 0 else 0.0,
        avg_forward_calls=sum(calls) / len(calls),
        n=len(preds),
        config_hash=config_hash(cfg),
    )
    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, out_dir / "report.json", out_dir / "results.csv")
    print(json.dumps(report.__dict__, indent=1))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    tm = ckpt_io.load_trained(args.checkpoint)
    golds = _load_examples(args.questions)
    t_steps_list = [int(x) for x in args.t_steps_list.split(",")]
    out_path = Path(args.out) if args.out else Path("bench.csv")
    import csv as _csv

    with open(out_path, "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["T_steps", "accuracy", "throughput_it_per_s"])
        for steps in t_steps_list:
            sampler_cfg = dict(cfg["sampler"], T_steps=steps, m=1)
            sampler = SamplerConfig(**sampler_cfg).validate()
            gen = torch.Generator().manual_seed(cfg["seed"])
            outs = []
            t0 = time.monotonic()
            for ex in golds:
                outs.append(_sample_one(tm, ex.question, cfg, sampler, gen))
            elapsed = time.monotonic() - t0
            acc = accuracy([o.answer for o in outs], [g.answer for g in golds])
            w.writerow([steps, f"{acc:.4f}", f"{len(golds) / elapsed:.4f}"])
            logger.info("bench T_steps=%d acc=%.4f thr=%.3f it/s", steps, acc, len(golds) / elapsed)
    print(f"wrote sweep to {out_path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqdiff", description=__doc__)
    parser.add_argument("--workers", type=int, default=None, help="torch thread count")
    parser.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", help=f"named preset: {', '.join(sorted(PRESETS))}")
        p.add_argument("--backend", choices=["continuous", "discrete"])
        p.add_argument("--task", choices=["mult", "bool", "jsonl"])
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory/file")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset with train/test split")
    common(p)
    p.add_argument("--digits", help="e.g. 2x2")
    p.add_argument("--mode", choices=["enumerate", "sample"])
    p.add_argument("--n", type=int)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--test-frac", dest="test_frac", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a JSONL corpus")
    common(p)
    p.add_argument("--train-file", dest="train_file")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--multipass", action="store_const", const=True, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample rationales for a question file")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--questions", required=True, help="JSONL with question/rationales/answer rows")
    p.add_argument("--t-steps", dest="t_steps", type=int)
    p.add_argument("--solver", choices=["ancestral", "ode1"])
    p.add_argument("--m", type=int, help="self-consistency sample count")
    p.add_argument("--z-temperature", dest="z_temperature", type=float)
    p.add_argument("--logit-temperature", dest="logit_temperature", type=float)
    p.add_argument("--multipass", action="store_const", const=True, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score predictions against gold answers")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--gold", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="sweep sampling steps and record accuracy/throughput")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--questions", required=True)
    p.add_argument("--t-steps-list", dest="t_steps_list", default="1,2,4,8,16,32,64")
    p.add_argument("--multipass", action="store_const", const=True, default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def run_command(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    if args.workers is not None:
        torch.set_num_threads(args.workers)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
