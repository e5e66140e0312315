"""AdamW, the warmup/linear-decay schedule, and the pretraining loop.

All randomness inside a step comes from ``default_rng([seed, 2, step])`` and
batch composition is a pure function of ``(seed, step)``, so resuming needs
only the weights, optimizer moments and the step counter.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO, Callable

import numpy as np

from . import objectives as O
from . import tensor as T
from .checkpoint import Checkpoint, restore_params
from .data import Corpora, content_box, mix_batches
from .model import ConfigError, ModelConfig, VLModel
from .tokenizer import EOS, Vocab
from .vision import bilinear_resize, zoom_crop


class NumericalError(RuntimeError):
    pass


def lr_at(step: float, total_steps: int, warmup_frac: float, peak: float) -> float:
    """Linear 0 -> peak over the first ``warmup_frac`` of steps, then linear -> 0."""
    if not 0.0 < warmup_frac < 1.0:
        raise ValueError("warmup_frac must lie in (0, 1)")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_frac * total_steps
    if step <= w:
        return peak * step / w
    return peak * (total_steps - step) / (total_steps - w)


# ----------------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------------


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def hparams(self) -> dict:
        return {"step": self.step, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "weight_decay": self.weight_decay}


def adamw_step(
    params: dict[str, T.Parameter],
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr: float,
    decay: Callable[[str, np.ndarray], bool] | None = None,
) -> None:
    """One in-place AdamW update.

    Decay is decoupled: ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``.
    ``decay(name, value)`` picks which tensors are decayed (default: all).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        dt = p.data.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt(state.beta1)
        m += dt(1.0 - state.beta1) * g
        v *= dt(state.beta2)
        v += dt(1.0 - state.beta2) * (g * g)
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        if state.weight_decay and (decay is None or decay(name, p.data)):
            update = update + dt(state.weight_decay) * p.data
        p.data = p.data - dt(lr) * update


def decay_matrices(name: str, value: np.ndarray) -> bool:
    return value.ndim >= 2


# ----------------------------------------------------------------------------
# configuration and data
# ----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    objective: str = "prefix_lm"
    steps: int = 4000
    peak_lr: float = 5e-4
    warmup_frac: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    pairs_per_batch: int = 32
    docs_per_batch: int = 4
    prefix_dist: str = "uniform"
    grad_clip: float = 0.0
    checkpoint_every: int = 0
    seed: int = 0
    mlm_rate: float = O.MLM_RATE
    span_mean: float = O.SPAN_MEAN
    span_rate: float = O.SPAN_RATE
    zoom_prob: float = 0.0
    max_zoom: float = 2.0
    multires_sizes: list[int] = field(default_factory=list)
    multires_prob: float = 0.0

    def validate(self, model_cfg: ModelConfig | None = None) -> None:
        problems = []
        if self.objective not in O.OBJECTIVES:
            problems.append(f"objective must be one of {O.OBJECTIVES}, got {self.objective!r}")
        if self.objective == "lm" and model_cfg is not None and model_cfg.variant != "decoder_only":
            problems.append("objective 'lm' needs variant 'decoder_only'")
        if self.steps < 1:
            problems.append("steps must be >= 1")
        if not 0.0 < self.warmup_frac < 1.0:
            problems.append("warmup_frac must lie in (0, 1)")
        if self.pairs_per_batch < 0 or self.docs_per_batch < 0 or self.pairs_per_batch + self.docs_per_batch == 0:
            problems.append("batch counts must be non-negative with a positive total")
        if self.prefix_dist not in ("uniform", "fixed"):
            problems.append("prefix_dist must be 'uniform' or 'fixed'")
        if not 0.0 <= self.zoom_prob <= 1.0:
            problems.append("zoom_prob must lie in [0, 1]")
        if self.max_zoom < 1.0:
            problems.append("max_zoom must be >= 1")
        if not 0.0 <= self.multires_prob <= 1.0:
            problems.append("multires_prob must lie in [0, 1]")
        if self.multires_prob > 0.0 and not self.multires_sizes:
            problems.append("multires_prob > 0 needs multires_sizes")
        if model_cfg is not None:
            bad = [s for s in self.multires_sizes if s <= 0 or s % model_cfg.patch_size]
            if bad:
                problems.append(f"multires_sizes {bad} must be positive multiples of the patch size")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        return cls(**d)


@dataclass
class TrainData:
    images: np.ndarray  # [N, H, W, C] float32
    pair_ids: list[list[int]]
    doc_ids: list[list[int]]
    boxes: np.ndarray | None = None  # [N, 4] content boxes for zoom augmentation

    @property
    def n_pairs(self) -> int:
        return len(self.pair_ids)

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)


def prepare_data(corpora: Corpora, vocab: Vocab, max_text_len: int, hw: tuple[int, int] = (32, 32)) -> TrainData:
    """Tokenize captions/documents (EOS-terminated, truncated to ``max_text_len``)."""
    imgs = [p.image for p in corpora.pairs]
    images = np.stack(imgs).astype(np.float32) if imgs else np.zeros((0, hw[0], hw[1], 3), np.float32)
    enc = lambda s: vocab.encode(s, add_eos=True, max_len=max_text_len)  # noqa: E731
    pairs = [enc(p.caption) for p in corpora.pairs]
    docs = [d for d in (enc(t) for t in corpora.docs) if len(d) >= 2]
    boxes = np.array([content_box(p.spec, p.image.shape[0]) for p in corpora.pairs], dtype=np.int64).reshape(-1, 4)
    return TrainData(images, pairs, docs, boxes)


# ----------------------------------------------------------------------------
# trainer
# ----------------------------------------------------------------------------


class Trainer:
    def __init__(self, model: VLModel, cfg: TrainConfig, data: TrainData, state: OptimState | None = None, step: int = 0):
        cfg.validate(model.cfg)
        self.model = model
        self.cfg = cfg
        self.data = data
        self.state = state or OptimState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
        self.step = step
        self.n_image = model.cfg.n_image_tokens
        if cfg.objective == "span" and model.cfg.vocab < O.N_SENTINELS + 6:
            raise ConfigError("vocabulary too small to host span sentinels")
        self._batches = None

    # -- batches --------------------------------------------------------------

    def batch_indices(self, k: int) -> tuple[list[int], list[int]]:
        it = mix_batches(self.data.n_pairs, self.data.n_docs, self.cfg.pairs_per_batch, self.cfg.docs_per_batch, self.cfg.seed, k)
        b = next(it)
        return b.pairs, b.docs

    def _image(self, i: int, rng: np.random.Generator) -> np.ndarray:
        img = self.data.images[i]
        if self.cfg.zoom_prob > 0.0:
            # draws come from the per-step generator, so replays are exact
            if rng.random() < self.cfg.zoom_prob and self.data.boxes is not None:
                img = zoom_crop(img, self.data.boxes[i], self.cfg.max_zoom, rng).astype(np.float32)
        return img

    def _batch_size_px(self, rng: np.random.Generator) -> int | None:
        """Side length for this step's images (None keeps the native size)."""
        cfg = self.cfg
        if cfg.multires_prob <= 0.0:
            return None
        if rng.random() >= cfg.multires_prob:
            return None
        return int(cfg.multires_sizes[int(rng.integers(len(cfg.multires_sizes)))])

    def _tokens_at(self, size: int | None) -> int:
        if size is None:
            return self.n_image
        p = self.model.cfg.patch_size
        return (size // p) ** 2

    def examples(self, k: int):
        """(seq2seq pair samples, doc items) for step ``k``; doc items depend on the objective."""
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 2, k])
        pair_idx, doc_idx = self.batch_indices(k)
        size = self._batch_size_px(rng) if pair_idx else None
        n_image = self._tokens_at(size)
        pairs = []
        for i in pair_idx:
            ids = self.data.pair_ids[i]
            tp = O.sample_prefix(n_image, len(ids), rng, cfg.prefix_dist)
            img = self._image(i, rng)
            if size is not None:
                img = bilinear_resize(img, size, size)
            pairs.append(O.PrefixSample(ids, tp, img, n_image).to_seq2seq())
        docs = []
        base = O.sentinel_base(self.model.cfg.vocab)
        for i in doc_idx:
            ids = self.data.doc_ids[i]
            if cfg.objective == "prefix_lm":
                docs.append(O.PrefixSample(ids, O.sample_prefix(0, len(ids), rng, cfg.prefix_dist)).to_seq2seq())
            elif cfg.objective == "lm":
                docs.append(O.Seq2Seq([], list(ids)))
            elif cfg.objective == "span":
                ids = fit_for_span(ids, self.model.cfg.max_text_len, cfg.span_rate)
                # very short texts still hide one token rather than rounding to an empty target
                rate = max(cfg.span_rate, 1.0 / max(len(ids) - 1, 1))
                src, tgt = O.span_corruption(ids, cfg.span_mean, rate, rng, base)
                docs.append(O.Seq2Seq(src, tgt))
            else:
                docs.append(O.make_mlm_sample(ids, cfg.mlm_rate, rng))
        return pairs, docs

    def loss(self, k: int) -> tuple[T.Tensor, dict[str, float]]:
        pairs, docs = self.examples(k)
        n = len(pairs) + len(docs)
        total = None
        stats = {"pair": None, "text": None}
        parts = []
        if pairs:
            h, w = pairs[0].image.shape[:2]
            n_image = (h // self.model.cfg.patch_size) * (w // self.model.cfg.patch_size)
            parts.append(("pair", O.group_loss(self.model, O.collate_group(pairs, max_text_len=self.model.cfg.max_text_len, n_image=n_image)), len(pairs)))
        if docs:
            if self.cfg.objective == "mlm":
                parts.append(("text", O.mlm_loss(self.model, docs), len(docs)))
            else:
                parts.append(("text", O.group_loss(self.model, O.collate_group(docs, max_text_len=self.model.cfg.max_text_len)), len(docs)))
        for name, loss, count in parts:
            stats[name] = float(loss.data)
            term = T.mul(loss, count / n)
            total = term if total is None else T.add(total, term)
        return total, stats

    # -- stepping -------------------------------------------------------------

    def lr(self, k: int) -> float:
        return lr_at(k, self.cfg.steps, self.cfg.warmup_frac, self.cfg.peak_lr)

    def train_step(self) -> dict:
        k = self.step
        params = {n: p for n, p in self.model.params.items() if p.trainable}
        with T.Tape() as tape:
            loss, stats = self.loss(k)
        if not np.isfinite(loss.data):
            pairs, docs = self.batch_indices(k)
            raise NumericalError(f"non-finite loss at step {k} (batch {k}: pairs={pairs}, docs={docs})")
        grads = T.backward(tape, loss, wrt=list(params.values()))
        named = {p.name: g for p, g in grads.items()}
        if self.cfg.grad_clip > 0:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in named.values()))
            if norm > self.cfg.grad_clip:
                s = self.cfg.grad_clip / norm
                named = {n: g * g.dtype.type(s) for n, g in named.items()}
        lr = self.lr(k)
        adamw_step(params, named, self.state, lr, decay_matrices)
        self.step += 1
        return {"step": k, "lr": lr, "loss_pair": stats["pair"], "loss_text": stats["text"]}

    def run(
        self,
        until: int | None = None,
        metrics: IO[str] | None = None,
        ckpt_path: str | Path | None = None,
        dump_path: str | Path | None = None,
        on_step: Callable[[dict], None] | None = None,
    ) -> list[dict]:
        from .checkpoint import save_checkpoint

        until = self.cfg.steps if until is None else until
        if until > self.cfg.steps:
            raise ValueError(f"cannot run past the schedule end ({self.cfg.steps})")
        records = []
        while self.step < until:
            try:
                rec = self.train_step()
            except NumericalError as exc:
                if dump_path is not None:
                    pairs, docs = self.batch_indices(self.step)
                    Path(dump_path).write_text(json.dumps({"step": self.step, "pairs": pairs, "docs": docs, "error": str(exc)}) + "\n")
                raise
            records.append(rec)
            if metrics is not None:
                metrics.write(metrics_line(rec) + "\n")
            if on_step is not None:
                on_step(rec)
            every = self.cfg.checkpoint_every
            if ckpt_path is not None and every and self.step % every == 0:
                save_checkpoint(ckpt_path, self.checkpoint())
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, self.checkpoint())
        return records

    # -- persistence ------------------------------------------------------------

    def checkpoint(self, extra: dict | None = None) -> Checkpoint:
        return training_checkpoint(self.model, self.cfg, self.state, self.step, extra)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, data: TrainData) -> "Trainer":
        model = model_from_checkpoint(ckpt)
        cfg = TrainConfig.from_dict(ckpt.meta["train"])
        o = ckpt.meta["optim"]
        state = OptimState(ckpt.group("optim.m."), ckpt.group("optim.v."), o["step"], o["beta1"], o["beta2"], o["eps"], o["weight_decay"])
        return cls(model, cfg, data, state, ckpt.meta["step"])


def fit_for_span(ids: list[int], max_text_len: int, rate: float) -> list[int]:
    """Trim a document so its corrupted source plus target fit in ``max_text_len``.

    Each span adds a sentinel on both sides, and both sides end in EOS.
    """
    body = [t for t in ids if t != EOS]
    while body and len(body) + 2 * int(round(len(body) * rate)) + 2 > max_text_len:
        body = body[:-1]
    return body + [EOS]


def metrics_line(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"))


def metrics_header(config: dict) -> str:
    return json.dumps({"config": config}, sort_keys=True, separators=(",", ":"))


def model_checkpoint(model: VLModel, extra: dict | None = None) -> Checkpoint:
    meta = {"model": model.cfg.to_dict(), "heads": head_shapes(model)}
    meta.update(extra or {})
    return Checkpoint(meta, {n: p.data for n, p in model.params.items()})


def training_checkpoint(model: VLModel, cfg: TrainConfig, state: OptimState, step: int, extra: dict | None = None) -> Checkpoint:
    ckpt = model_checkpoint(model, extra)
    ckpt.meta.update(
        {
            "train": cfg.to_dict(),
            "optim": state.hparams(),
            "step": step,
            "rng": {"kind": "counter", "seed": cfg.seed, "next_step": step},
        }
    )
    for n in model.params:
        if n in state.m:
            ckpt.tensors[f"optim.m.{n}"] = state.m[n]
            ckpt.tensors[f"optim.v.{n}"] = state.v[n]
    return ckpt


def head_shapes(model: VLModel) -> dict[str, int]:
    """``{task: n_classes}`` for attached heads."""
    return {n.split(".")[1]: int(p.shape[1]) for n, p in model.params.items() if n.startswith("head.") and n.endswith(".w")}


def model_from_checkpoint(ckpt: Checkpoint, allow_partial: bool = False, cfg: ModelConfig | None = None) -> VLModel:
    cfg = cfg or ModelConfig.from_dict(ckpt.meta["model"])
    model = VLModel(cfg)
    for task, n_classes in ckpt.meta.get("heads", {}).items():
        w = ckpt.tensors[f"head.{task}.w"]
        model.add_head(task, n_classes, w.shape[0] // cfg.hidden)
    weights = {k: v for k, v in ckpt.tensors.items() if not k.startswith("optim.")}
    restore_params(model.params, weights, allow_partial)
    return model
