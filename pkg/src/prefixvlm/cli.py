"""``prefixvlm`` command line: one binary, one subcommand per workflow step.

Config precedence is defaults < ``--config`` file < flags (``--set a.b=v`` and
the dedicated flags).  Exit codes: 0 ok, 2 config error, 3 numerical failure,
1 any other runtime failure (unreadable file, corrupt checkpoint, ...).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import inference as I
from . import pipeline as P
from .ablation import run_ablation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, load_corpora, write_corpora
from .model import ConfigError, VLModel, build_prefix_mask
from .plotting import ascii_mask, plot_lr, plot_training_curves
from .tokenizer import TokenizerError, Vocab
from .training import NumericalError, model_checkpoint, model_from_checkpoint

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    """Bad arguments detected after parsing (reported with exit code 2)."""


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(args, flags: dict | None = None) -> dict:
    file_cfg = None
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
    overrides: dict = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        P.set_dotted(overrides, k.strip(), _parse_value(v))
    for k, v in (flags or {}).items():
        if v is not None:
            P.set_dotted(overrides, k, v)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return P.resolve_config(file_cfg, overrides)


def _say(msg: str) -> None:
    print(msg, flush=True)


def _load_vocab(path) -> Vocab:
    if not path:
        raise UsageError("--tokenizer is required")
    return Vocab.load(path)


def _load_model(path) -> VLModel:
    if not path:
        raise UsageError("--checkpoint is required")
    return model_from_checkpoint(load_checkpoint(path), allow_partial=False)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_datagen(args) -> int:
    cfg = load_run_config(args, {"data.n_pairs": args.n_pairs, "data.n_docs": args.n_docs, "data.n_eval": args.n_eval})
    corpora = P.make_corpora(cfg)
    report = write_corpora(corpora, args.out)
    P.save_json(Path(args.out) / "config.json", cfg)
    _say(json.dumps(report, sort_keys=True))
    return EXIT_OK if report["leakage_violations"] == 0 else EXIT_RUNTIME


def cmd_tokenizer_train(args) -> int:
    cfg = load_run_config(args, {"tokenizer.vocab_size": args.vocab_size})
    corpora = load_corpora(args.data)
    vocab = P.make_tokenizer(cfg, corpora)
    vocab.save(args.out)
    _say(f"tokenizer with {vocab.size} pieces -> {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_run_config(
        args,
        {
            "train.objective": args.objective,
            "train.steps": args.steps,
            "model.conv_blocks": args.conv_blocks,
            "model.variant": args.variant,
        },
    )
    corpora = load_corpora(args.data)
    vocab = _load_vocab(args.tokenizer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    P.save_json(out / "config.json", cfg)
    resume = load_checkpoint(args.resume) if args.resume else None
    mode = "a" if resume is not None else "w"
    every = max(1, cfg["train"]["steps"] // 20)

    def progress(rec):
        if (rec["step"] + 1) % every == 0:
            _say(f"step {rec['step'] + 1}: lr={rec['lr']:.2e} loss_pair={rec['loss_pair']} loss_text={rec['loss_text']}")

    with open(out / "metrics.jsonl", mode, encoding="utf-8") as metrics:
        res = P.pretrain(cfg, corpora, vocab, metrics=metrics, ckpt_path=out / "model.ckpt", on_step=progress, resume=resume, until=args.until)
    records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()[1:]]
    if records:
        plot_training_curves({"pretrain": records}, out / "curves.png")
        plot_lr(records, out / "lr.png")
    _say(f"trained to step {res.trainer.step} in {res.seconds:.1f}s -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = load_run_config(args, {"finetune.task": args.task, "finetune.steps": args.steps})
    vocab = _load_vocab(args.tokenizer)
    if args.checkpoint:
        model = _load_model(args.checkpoint)
    elif args.from_scratch:
        model = P.new_model(cfg, vocab)
    else:
        raise UsageError("give --checkpoint or --from-scratch")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as metrics:
        report = P.finetune(cfg, model, vocab, metrics)
    report["checkpoint"] = args.checkpoint
    report["config"] = cfg
    save_checkpoint(out / "model.ckpt", model_checkpoint(model, {"finetune": cfg["finetune"]}))
    P.save_json(out / "report.json", report)
    _say(f"{report['task']}: accuracy {report['accuracy']:.3f} on {report['n_test']} examples")
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg = load_run_config(args, {"decode.prompt": args.prompt, "decode.beam": args.beam, "decode.split": args.split, "decode.max_len": args.max_len})
    dec = P.DecodeSection(**cfg["decode"])
    vocab = _load_vocab(args.tokenizer)
    model = _load_model(args.checkpoint)
    corpora = load_corpora(args.data)
    records = corpora.eval_splits.get(dec.split)
    if not records:
        raise UsageError(f"split {dec.split!r} is empty or missing in {args.data}")
    if args.limit:
        records = records[: args.limit]
    images = np.stack([r.image for r in records])
    preds = I.caption_predictions(model, images, vocab, dec.prompt, dec.max_len, dec.beam, dec.alpha)
    rows = [{"id": r.path, "prediction": text, "score": lp} for r, (_, text, lp) in zip(records, preds)]
    I.write_predictions(args.out, rows)
    _say(f"{len(rows)} predictions -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args, {"decode.beam": args.beam})
    vocab = _load_vocab(args.tokenizer)
    model = _load_model(args.checkpoint)
    corpora = load_corpora(args.data)
    report = {"checkpoint": args.checkpoint, "splits": P.caption_eval(cfg, model, corpora, vocab)}
    for split, records in corpora.eval_splits.items():
        if records and split in report["splits"]:
            loss = I.validation_loss(model, records, vocab)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite validation loss on {split}")
            report["splits"][split]["loss"] = loss
    report["config"] = cfg
    if args.out:
        P.save_json(args.out, report)
    _say(json.dumps({k: {m: v.get(m) for m in ("exact_match", "token_accuracy", "loss")} for k, v in report["splits"].items()}, sort_keys=True))
    return EXIT_OK


def cmd_adapt(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    adapted = I.adapt_resolution(ckpt, [args.size, args.size])
    save_checkpoint(args.out, adapted)
    _say(f"adapted {ckpt.meta['model']['image_size']} -> {adapted.meta['model']['image_size']}: {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args)
    arms = [a.strip() for a in args.arms.split(",")] if args.arms else None
    report = run_ablation(cfg, arms, args.out, log=_say)
    _say(f"{len(report['arms'])} arms -> {args.out}/report.json")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.what == "mask":
        if args.T is None or args.prefix is None:
            raise UsageError("inspect mask needs --T and --prefix")
        if not 0 <= args.prefix <= args.T:
            raise ConfigError(f"prefix {args.prefix} outside [0, {args.T}]")
        _say(ascii_mask(build_prefix_mask(args.T, args.prefix)))
        return EXIT_OK
    if args.what == "params":
        if not args.path:
            raise UsageError("inspect params needs a checkpoint or config path")
        path = Path(args.path)
        if path.suffix == ".json":
            cfg = P.resolve_config(json.loads(path.read_text()))
            vocab_size = cfg["model"]["vocab"] or 512
            sizes = {n: p.size for n, p in VLModel(P.model_config(cfg, vocab_size=vocab_size)).params.items()}
        else:
            ckpt = load_checkpoint(path)
            sizes = {n: int(v.size) for n, v in ckpt.tensors.items() if not n.startswith("optim.")}
        width = max(len(n) for n in sizes)
        for n, s in sizes.items():
            _say(f"{n:<{width}}  {s:>10d}")
        _say(f"{'total':<{width}}  {sum(sizes.values()):>10d}")
        return EXIT_OK
    if args.what == "gradcheck":
        from .verify import GRADCHECK_TOL, gradcheck_suite

        rows = gradcheck_suite(args.seeds)
        worst = 0.0
        for r in rows:
            worst = max(worst, r["max_rel_error"])
            _say(f"{r['variant']:<16} seed {r['seed']}  max rel error {r['max_rel_error']:.3e}  ({r['worst_param']})")
        ok = worst < GRADCHECK_TOL
        _say(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} vs tolerance {GRADCHECK_TOL:.0e}")
        return EXIT_OK if ok else EXIT_NUMERIC
    raise UsageError(f"unknown inspect target {args.what!r}")


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (see docs/config.schema.json)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key, e.g. train.peak_lr=1e-3 (repeatable)")
    p.add_argument("--seed", type=int, help="master seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prefixvlm", description="Prefix-LM vision-language pretraining on a synthetic shapes world.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate pair/text corpora and eval splits")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-pairs", type=int)
    p.add_argument("--n-docs", type=int)
    p.add_argument("--n-eval", type=int)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("tokenizer-train", help="learn the BPE vocabulary")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int)
    p.set_defaults(func=cmd_tokenizer_train)

    p = sub.add_parser("pretrain", help="pretrain (or resume) a model")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--objective", choices=["prefix_lm", "lm", "mlm", "span"])
    p.add_argument("--variant", choices=["encoder_decoder", "decoder_only"])
    p.add_argument("--conv-blocks", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--until", type=int, help="stop after this many total steps (schedule still spans train.steps)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune on a downstream task")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--from-scratch", action="store_true", help="random init (the no-pretraining baseline)")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=list(P.TASKS))
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("decode", help="caption an eval split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="predictions JSONL")
    p.add_argument("--prompt")
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--split")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="caption exact match and loss per eval split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="report JSON")
    p.add_argument("--beam", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("adapt", help="adapt a checkpoint to a new image resolution")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("ablate", help="run ablation arms and write a comparison report")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--arms", help="comma-separated subset (default: all)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="mask dump, parameter table or gradient check")
    p.add_argument("what", choices=["mask", "params", "gradcheck"])
    p.add_argument("path", nargs="?", help="checkpoint or config (params)")
    p.add_argument("--T", type=int)
    p.add_argument("--prefix", type=int)
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, DataError, TokenizerError) as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
