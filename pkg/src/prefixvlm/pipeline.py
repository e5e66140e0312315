"""Run configuration and the end-to-end steps shared by the CLI and the ablation harness.

A run config is a nested JSON object::

    {"seed": 0, "data": {...}, "tokenizer": {...}, "model": {...},
     "train": {...}, "finetune": {...}, "decode": {...}}

``resolve_config`` layers defaults < file < overrides, rejects unknown keys
and reports every problem in one error.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Any, Callable

import numpy as np

from . import inference as I
from . import objectives as O
from .checkpoint import Checkpoint
from .data import DEFAULT_HOLDOUT, PROMPT, Corpora, build_corpora, build_paired, build_vqa, answer_classes, task_lines
from .model import ConfigError, ModelConfig, VLModel
from .tokenizer import Vocab, train_bpe
from .training import TrainConfig, Trainer, metrics_header, prepare_data


@dataclass
class DataConfig:
    n_pairs: int = 20000
    n_docs: int = 4000
    n_eval: int = 200
    image_size: int = 32
    grid: int = 4
    noise_rate: float = 0.1
    holdout: list = field(default_factory=lambda: [list(h) for h in DEFAULT_HOLDOUT])

    def validate(self) -> list[str]:
        p = []
        if min(self.n_pairs, self.n_docs, self.n_eval) < 0:
            p.append("data: counts must be >= 0")
        if self.image_size % self.grid:
            p.append(f"data: image_size {self.image_size} not divisible by grid {self.grid}")
        if not 0.0 <= self.noise_rate <= 1.0:
            p.append("data: noise_rate must lie in [0, 1]")
        if any(not isinstance(h, (list, tuple)) or len(h) != 2 for h in self.holdout):
            p.append("data: holdout entries must be [color, shape] pairs")
        return p


@dataclass
class TokenizerConfig:
    vocab_size: int = 96
    max_lines: int | None = None

    def validate(self) -> list[str]:
        return [] if self.vocab_size > 0 else ["tokenizer: vocab_size must be positive"]


TASKS = ("vqa", "red", "paired", "generative")


@dataclass
class FinetuneSection:
    task: str = "vqa"
    n_train: int = 500
    n_test: int = 300
    steps: int = 300
    batch: int = 16
    peak_lr: float = 1e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01

    def validate(self) -> list[str]:
        p = []
        if self.task not in TASKS:
            p.append(f"finetune: task must be one of {TASKS}, got {self.task!r}")
        if self.n_train < 1 or self.n_test < 1 or self.steps < 1 or self.batch < 1:
            p.append("finetune: n_train, n_test, steps and batch must be >= 1")
        if not 0.0 < self.warmup_frac < 1.0:
            p.append("finetune: warmup_frac must lie in (0, 1)")
        return p

    def loop_config(self, seed: int) -> I.FinetuneConfig:
        return I.FinetuneConfig(self.steps, self.batch, self.peak_lr, self.warmup_frac, self.weight_decay, seed)


@dataclass
class DecodeSection:
    beam: int = 1
    alpha: float = I.BEAM_ALPHA
    max_len: int = I.CAPTION_MAX_LEN
    prompt: str = ""
    split: str = "heldin"

    def validate(self) -> list[str]:
        p = []
        if self.beam < 1:
            p.append("decode: beam must be >= 1")
        if self.max_len < 0:
            p.append("decode: max_len must be >= 0")
        return p


def _model_defaults() -> dict:
    d = ModelConfig(max_text_len=24).to_dict()
    d["vocab"] = None  # tokenizer size + span sentinels
    return d


def _train_defaults() -> dict:
    # a quarter of the image batches at 48px (12x12 patches) makes the model hold up better after adapt
    d = TrainConfig(multires_sizes=[48], multires_prob=0.25).to_dict()
    del d["seed"]  # the run-level seed drives everything
    return d


def defaults() -> dict:
    return {
        "seed": 0,
        "data": asdict(DataConfig()),
        "tokenizer": asdict(TokenizerConfig()),
        "model": _model_defaults(),
        "train": _train_defaults(),
        "finetune": asdict(FinetuneSection()),
        "decode": asdict(DecodeSection()),
    }


def _type_ok(value, default) -> bool:
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, type(default))


def _merge(base: dict, layer: dict, where: str, problems: list[str]) -> None:
    for k, v in layer.items():
        path = f"{where}.{k}" if where else k
        if k not in base:
            problems.append(f"unknown key {path!r}")
        elif isinstance(base[k], dict):
            if not isinstance(v, dict):
                problems.append(f"{path!r} must be an object")
            else:
                _merge(base[k], v, path, problems)
        elif not _type_ok(v, base[k]):
            problems.append(f"{path!r} expects {type(base[k]).__name__}, got {type(v).__name__}")
        else:
            base[k] = v


def set_dotted(target: dict, dotted: str, value) -> None:
    """``set_dotted(d, "train.steps", 5)`` creating intermediate objects."""
    *head, last = dotted.split(".")
    for k in head:
        target = target.setdefault(k, {})
    target[last] = value


def resolve_config(file_cfg: dict | None = None, overrides: dict | None = None) -> dict:
    """defaults < file < overrides, validated; raises ConfigError listing every problem."""
    cfg = defaults()
    problems: list[str] = []
    for layer in (file_cfg or {}, overrides or {}):
        _merge(cfg, layer, "", problems)
    # keys that failed to merge kept their defaults, so the rest still validates
    problems += validate_config(cfg)
    if problems:
        raise ConfigError("\n".join(problems))
    return cfg


def validate_config(cfg: dict) -> list[str]:
    problems = []
    problems += DataConfig(**cfg["data"]).validate()
    problems += TokenizerConfig(**cfg["tokenizer"]).validate()
    problems += FinetuneSection(**cfg["finetune"]).validate()
    problems += DecodeSection(**cfg["decode"]).validate()
    mc = None
    try:
        mc = model_config(cfg, vocab_size=cfg["model"]["vocab"] or 512)
        mc.validate()
    except ConfigError as exc:
        problems += [f"model: {m}" for m in str(exc).split("; ")]
    if mc is not None and mc.image_size[0] != cfg["data"]["image_size"]:
        problems.append(f"model.image_size {mc.image_size} does not match data.image_size {cfg['data']['image_size']}")
    try:
        train_config(cfg).validate(mc)
    except ConfigError as exc:
        problems += [f"train: {m}" for m in str(exc).split("; ")]
    return problems


def model_config(cfg: dict, vocab_size: int | None = None, vocab: Vocab | None = None) -> ModelConfig:
    """ModelConfig with ``vocab`` filled from the tokenizer when left null."""
    d = dict(cfg["model"])
    if d.get("vocab") is None:
        if vocab is not None:
            d["vocab"] = vocab.size + O.N_SENTINELS
        elif vocab_size is not None:
            d["vocab"] = vocab_size
        else:
            raise ConfigError("model.vocab is null and no tokenizer was given")
    elif vocab is not None and d["vocab"] < vocab.size + O.N_SENTINELS:
        raise ConfigError(f"model.vocab {d['vocab']} is smaller than tokenizer size {vocab.size} + {O.N_SENTINELS} sentinels")
    return ModelConfig.from_dict(d)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})


def json_schema() -> dict:
    """JSON schema of the run config, derived from the defaults."""

    def kind(v):
        if isinstance(v, bool):
            return {"type": "boolean"}
        if isinstance(v, int):
            return {"type": "integer"}
        if isinstance(v, float):
            return {"type": "number"}
        if isinstance(v, str):
            return {"type": "string"}
        if isinstance(v, list):
            return {"type": "array"}
        if v is None:
            return {}
        return {"type": "object", "properties": {k: {**kind(x), "default": x} for k, x in v.items()}, "additionalProperties": False}

    d = defaults()
    schema = kind(d)
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["title"] = "prefixvlm run config"
    schema["properties"]["model"]["properties"]["vocab"] = {"type": ["integer", "null"], "default": None}
    schema["properties"]["model"]["properties"]["init_std"] = {"type": ["number", "null"], "default": None}
    schema["properties"]["tokenizer"]["properties"]["max_lines"] = {"type": ["integer", "null"], "default": None}
    return schema


# ----------------------------------------------------------------------------
# steps
# ----------------------------------------------------------------------------


def make_corpora(cfg: dict) -> Corpora:
    d = DataConfig(**cfg["data"])
    return build_corpora(d.n_pairs, d.n_docs, [tuple(h) for h in d.holdout], cfg["seed"], d.image_size, d.grid, d.noise_rate, d.n_eval)


def tokenizer_corpus(corpora: Corpora) -> list[str]:
    return [p.caption for p in corpora.pairs] + list(corpora.docs) + [p.caption for s in corpora.eval_splits.values() for p in s] + task_lines()


def make_tokenizer(cfg: dict, corpora: Corpora) -> Vocab:
    t = TokenizerConfig(**cfg["tokenizer"])
    return train_bpe(tokenizer_corpus(corpora), t.vocab_size, cfg["seed"], t.max_lines)


@dataclass
class PretrainResult:
    model: VLModel
    records: list[dict]
    seconds: float
    trainer: Trainer | None = None


def new_model(cfg: dict, vocab: Vocab) -> VLModel:
    return VLModel(model_config(cfg, vocab=vocab), seed=cfg["seed"])


def pretrain(
    cfg: dict,
    corpora: Corpora,
    vocab: Vocab,
    metrics: IO[str] | None = None,
    ckpt_path: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
    resume: Checkpoint | None = None,
    until: int | None = None,
) -> PretrainResult:
    """Pretrain from scratch (or resume); writes the config header before any step line."""
    model = new_model(cfg, vocab)
    tc = train_config(cfg)
    data = prepare_data(corpora, vocab, model.cfg.max_text_len, tuple(model.cfg.image_size))
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, data)
        if trainer.model.cfg.to_dict() != model.cfg.to_dict() or trainer.cfg.to_dict() != tc.to_dict():
            raise ConfigError("resume checkpoint was written under a different model/train config")
    else:
        trainer = Trainer(model, tc, data)
    if metrics is not None and trainer.step == 0:
        metrics.write(metrics_header(cfg) + "\n")
    t0 = time.perf_counter()
    records = trainer.run(until=until, metrics=metrics, ckpt_path=ckpt_path, on_step=on_step)
    return PretrainResult(trainer.model, records, time.perf_counter() - t0, trainer)


def caption_eval(cfg: dict, model: VLModel, corpora: Corpora, vocab: Vocab) -> dict:
    """Exact match per eval split; the compositional split is prompted with "a picture of"."""
    dec = DecodeSection(**cfg["decode"])
    out = {}
    for split, records in corpora.eval_splits.items():
        if not records:
            continue
        prompt = dec.prompt or (PROMPT if split == "compositional" else "")
        rep, _ = I.caption_report(model, records, vocab, prompt, dec.beam)
        rep["prompt"] = prompt
        out[split] = rep
    return out


def task_data(cfg: dict):
    f = FinetuneSection(**cfg["finetune"])
    hw = cfg["data"]["image_size"]
    grid = cfg["data"]["grid"]
    s = cfg["seed"]
    if f.task == "paired":
        return build_paired(f.n_train, 1000 + s, hw, grid), build_paired(f.n_test, 2000 + s, hw, grid)
    kinds = "red" if f.task == "red" else "mixed"
    return build_vqa(f.n_train, 1000 + s, None, hw, grid, kinds), build_vqa(f.n_test, 2000 + s, None, hw, grid, kinds)


def _check_task_lengths(examples, vocab: Vocab, max_text_len: int, generative: bool) -> None:
    # BOS + question (+ answer + EOS when generated) must fit the text positions
    need = 0
    for e in examples:
        n = 1 + len(vocab.encode(e.question))
        if generative:
            n += len(vocab.encode(e.answer)) + 1
        need = max(need, n)
    if need > max_text_len:
        raise ConfigError(f"task text needs {need} positions but model.max_text_len is {max_text_len}")


def finetune(cfg: dict, model: VLModel, vocab: Vocab, metrics: IO[str] | None = None) -> dict:
    """Finetune ``model`` in place on the configured task; returns a report with test accuracy."""
    f = FinetuneSection(**cfg["finetune"])
    train, test = task_data(cfg)
    _check_task_lengths(train + test, vocab, model.cfg.max_text_len, f.task == "generative")
    loop = f.loop_config(cfg["seed"])
    t0 = time.perf_counter()
    if f.task == "generative":
        losses = I.finetune_generative(model, train, vocab, loop)
        preds = I.generative_vqa(model, test, vocab)
    else:
        head = I.TaskHead("classify_paired" if f.task == "paired" else "classify", answer_classes(train + test), f.task)
        losses = I.finetune_classify(model, head, train, vocab, loop)
        preds = I.predict_classes(model, head, test, vocab)
    if metrics is not None:
        metrics.write(metrics_header(cfg) + "\n")
        for step, loss in enumerate(losses):
            metrics.write(json.dumps({"step": step, "loss": loss}, separators=(",", ":")) + "\n")
    return {
        "task": f.task,
        "n_train": len(train),
        "n_test": len(test),
        "accuracy": I.accuracy(preds, test),
        "final_loss": float(np.mean(losses[-10:])),
        "seconds": time.perf_counter() - t0,
    }


def deep_update(base: dict, patch: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_update(out[k], v)
        else:
            out[k] = v
    return out


def save_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

