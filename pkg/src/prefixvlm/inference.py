"""Decoding, task heads, finetuning protocols, resolution adaptation and evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import objectives as O
from . import tensor as T
from .checkpoint import Checkpoint
from .data import QAExample, exact_match, normalize_answer
from .model import ConfigError, VLModel, build_prefix_mask
from .tensor import Tensor
from .tokenizer import BOS, EOS, N_SPECIAL, PAD, Vocab
from .training import OptimState, adamw_step, decay_matrices, lr_at
from .vision import interpolate_grid

BEAM_K = 4
BEAM_ALPHA = 0.6
CAPTION_MAX_LEN = 24


# ----------------------------------------------------------------------------
# decoding
# ----------------------------------------------------------------------------


class DecodeContext:
    """Per-example conditioning (image and/or encoder text) reused across decode steps."""

    def __init__(self, model: VLModel, images: np.ndarray | None, sources: Sequence[Sequence[int]] | None = None, n: int | None = None):
        self.model = model
        self.variant = model.cfg.variant
        if images is not None:
            images = np.asarray(images, dtype=model.cfg.np_dtype)
            if images.ndim == 3:
                images = images[None]
        b = images.shape[0] if images is not None else (len(sources) if sources is not None else n)
        if b is None:
            raise ValueError("decode context needs images, sources or a batch size")
        self.size = b
        self.sources = [list(s) for s in sources] if sources is not None else [[] for _ in range(b)]
        if self.variant == "encoder_decoder":
            src, src_mask = O._pad(self.sources, max(len(s) for s in self.sources))
            if images is None and src.shape[1] == 0:
                raise ValueError("encoder-decoder decoding needs an image or encoder text")
            enc, key_mask, _ = O.encode(model, images, src, src_mask)
            self.enc = enc.data
            self.key_mask = key_mask
            self.offsets = np.array([len(s) for s in self.sources], dtype=np.int64)
        else:
            self.patches = None if images is None else model.embed_patches(model.patch_tokens(images)).data
            self.n_image = 0 if self.patches is None else self.patches.shape[1]

    def logprobs(self, rows: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        """Next-token log-probabilities after ``tokens`` ([R, t], starting with BOS) for context rows."""
        m = self.model
        rows = np.asarray(rows)
        if self.variant == "encoder_decoder":
            h = m.decoder_forward(m.embed_text(tokens, self.offsets[rows]), Tensor(self.enc[rows]), self.key_mask[rows])
            logits = m.logits(T.getitem(h, (slice(None), -1))).data
            return T.log_softmax_np(logits.astype(np.float64))
        # rows with different source lengths get their own forward pass
        by_len: dict[int, list[int]] = {}
        for r_i, r in enumerate(rows):
            by_len.setdefault(len(self.sources[r]), []).append(r_i)
        result = np.zeros((len(rows), m.cfg.vocab))
        for slen, members in by_len.items():
            sel = rows[members]
            text = np.array([[BOS] + self.sources[r] + list(tokens[i, 1:]) for i, r in zip(members, sel)], dtype=np.int64)
            parts = []
            if self.patches is not None:
                parts.append(Tensor(self.patches[sel]))
            parts.append(m.embed_text(text))
            x = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
            total = x.shape[1]
            mask = build_prefix_mask(total, self.n_image + 1 + slen)
            h = m.decoder_only_forward(x, mask, self.n_image)
            logits = m.logits(T.getitem(h, (slice(None), -1))).data
            result[members] = T.log_softmax_np(logits.astype(np.float64))
        return result


@dataclass
class Hypothesis:
    tokens: list[int]
    logp: float
    finished: bool = False

    def score(self, alpha: float) -> float:
        n = max(len(self.tokens), 1)
        return self.logp / (n**alpha) if alpha else self.logp


def greedy_decode(
    model: VLModel,
    images: np.ndarray | None,
    prompt_ids: Sequence[int] = (),
    max_len: int = CAPTION_MAX_LEN,
    sources: Sequence[Sequence[int]] | None = None,
    eos_id: int | None = EOS,
) -> list[Hypothesis]:
    """Argmax decoding for every example in the batch; the prompt is a forced decoder prefix.

    Returned tokens exclude the prompt; EOS, when produced, is kept.
    """
    ctx = DecodeContext(model, images, sources)
    b = ctx.size
    prompt = list(prompt_ids)
    if 1 + len(prompt) + max_len - 1 > model.cfg.max_text_len:
        raise ValueError("prompt plus generation exceeds max_text_len")
    seqs = np.array([[BOS] + prompt] * b, dtype=np.int64)
    gen = [[] for _ in range(b)]
    logp = np.zeros(b)
    alive = np.ones(b, dtype=bool)
    for _ in range(max_len):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        lp = ctx.logprobs(rows, seqs[rows])
        nxt = lp.argmax(axis=-1)  # first maximum = lowest id on ties
        new_col = np.full((b, 1), PAD, dtype=np.int64)
        for r, tok, l in zip(rows, nxt, lp):
            gen[r].append(int(tok))
            logp[r] += l[tok]
            new_col[r, 0] = tok
            if eos_id is not None and tok == eos_id:
                alive[r] = False
        seqs = np.concatenate([seqs, new_col], axis=1)
    return [Hypothesis(g, float(s), bool(g and g[-1] == eos_id)) for g, s in zip(gen, logp)]


def beam_search(
    model: VLModel,
    image: np.ndarray | None,
    prompt_ids: Sequence[int] = (),
    k: int = BEAM_K,
    max_len: int = CAPTION_MAX_LEN,
    alpha: float = BEAM_ALPHA,
    source: Sequence[int] | None = None,
    eos_id: int | None = EOS,
) -> Hypothesis:
    """Length-normalized beam search (score = logP / len^alpha) for one example.

    Each step keeps the ``k`` best expansions by cumulative log-probability;
    ties go to the lexicographically smaller token sequence.  Expansions that
    emit ``eos_id`` retire.  The answer is the best retired or surviving
    hypothesis by normalized score.
    """
    if k < 1:
        raise ValueError("beam width must be >= 1")
    ctx = DecodeContext(model, None if image is None else np.asarray(image)[None], None if source is None else [source], n=1)
    prompt = [BOS] + list(prompt_ids)
    alive = [Hypothesis([], 0.0)]
    done: list[Hypothesis] = []
    for _ in range(max_len):
        if not alive:
            break
        toks = np.array([prompt + h.tokens for h in alive], dtype=np.int64)
        lp = ctx.logprobs(np.zeros(len(alive), dtype=np.int64), toks)
        cands = []
        for h, row in zip(alive, lp):
            for tok in range(row.shape[0]):
                cands.append((h.logp + float(row[tok]), h.tokens + [tok]))
        cands.sort(key=lambda c: (-c[0], c[1]))
        alive = []
        for score, seq in cands[:k]:
            fin = eos_id is not None and seq[-1] == eos_id
            (done if fin else alive).append(Hypothesis(seq, score, fin))
    pool = done + alive
    return min(pool, key=lambda h: (-h.score(alpha), h.tokens))


def sequence_logprob(model: VLModel, image: np.ndarray | None, tokens: Sequence[int], prompt_ids: Sequence[int] = (), source=None) -> float:
    """Teacher-forced total log-probability of ``tokens`` after the prompt (one forward pass)."""
    ctx = DecodeContext(model, None if image is None else np.asarray(image)[None], None if source is None else [source], n=1)
    full = [BOS] + list(prompt_ids) + list(tokens)
    total = 0.0
    # a single teacher-forced pass, independent of the step-by-step decoder
    m = model
    seq = np.array([full[:-1]], dtype=np.int64)
    if m.cfg.variant == "encoder_decoder":
        h = m.decoder_forward(m.embed_text(seq, ctx.offsets), Tensor(ctx.enc), ctx.key_mask)
        lp = T.log_softmax_np(m.logits(h).data.astype(np.float64))[0]
    else:
        parts = [] if ctx.patches is None else [Tensor(ctx.patches)]
        src = ctx.sources[0]
        text = np.array([[BOS] + src + full[1:-1]], dtype=np.int64)
        parts.append(m.embed_text(text))
        x = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        h = m.decoder_only_forward(x, build_prefix_mask(x.shape[1], ctx.n_image + 1 + len(src)), ctx.n_image)
        lp_all = T.log_softmax_np(m.logits(h).data.astype(np.float64))[0]
        lp = lp_all[ctx.n_image + len(src) :]
    start = len(prompt_ids)
    for i, tok in enumerate(tokens):
        total += lp[start + i, tok]
    return float(total)


def strip_generation(tokens: Sequence[int], vocab_size: int) -> list[int]:
    """Drop everything from the first EOS on, plus specials and sentinel ids."""
    out = []
    for t in tokens:
        if t == EOS:
            break
        if N_SPECIAL <= t < vocab_size:
            out.append(int(t))
    return out


# ----------------------------------------------------------------------------
# task heads
# ----------------------------------------------------------------------------


@dataclass
class TaskHead:
    kind: str  # classify | classify_paired | generate
    classes: list[str] = field(default_factory=list)
    name: str = "vqa"

    def __post_init__(self):
        if self.kind not in ("classify", "classify_paired", "generate"):
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.kind != "generate" and len(self.classes) < 2:
            raise ConfigError("a classification head needs at least two classes")

    def label(self, answer: str) -> int:
        try:
            return self.classes.index(answer)
        except ValueError:
            raise ValueError(f"label {answer!r} outside the head's class set") from None


def readout(model: VLModel, images: np.ndarray, question_ids: list[list[int]]) -> Tensor:
    """Decoder activation at the last question token (image in the encoder / prefix)."""
    ids, valid = O._pad([[BOS] + q for q in question_ids], 1 + max(len(q) for q in question_ids))
    last = valid.sum(axis=1) - 1
    b = len(question_ids)
    if model.cfg.variant == "encoder_decoder":
        enc, key_mask, _ = O.encode(model, images, np.zeros((b, 0), np.int64), np.zeros((b, 0), bool))
        h = model.decoder_forward(model.embed_text(ids), enc, key_mask)
        return T.getitem(h, (np.arange(b), last))
    patches = model.patch_tokens(images)
    n_image = patches.shape[1]
    x = model.embed_inputs(patches, ids)
    h = model.decoder_only_forward(x, build_prefix_mask(x.shape[1], n_image + 1), n_image)
    return T.getitem(h, (np.arange(b), n_image + last))


def classify_logits(model: VLModel, head: TaskHead, examples: Sequence[QAExample], vocab: Vocab) -> Tensor:
    qs = [vocab.encode(e.question) for e in examples]
    if head.kind == "classify_paired":
        if any(e.image2 is None for e in examples):
            raise ValueError("paired classification needs a second image in every example")
        a = readout(model, np.stack([e.image for e in examples]), qs)
        b = readout(model, np.stack([e.image2 for e in examples]), qs)
        feats = T.concat([a, b], axis=-1)
    else:
        feats = readout(model, np.stack([e.image for e in examples]), qs)
    return model.head_logits(feats, head.name)


@dataclass
class FinetuneConfig:
    steps: int = 300
    batch: int = 16
    peak_lr: float = 1e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    seed: int = 0


def _finetune_loop(model: VLModel, cfg: FinetuneConfig, n: int, loss_fn) -> list[float]:
    state = OptimState(weight_decay=cfg.weight_decay)
    params = {k: p for k, p in model.params.items() if p.trainable}
    losses = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, 5, step])
        idx = rng.choice(n, size=min(cfg.batch, n), replace=False)
        with T.Tape() as tape:
            loss = loss_fn(idx, rng)
        if not np.isfinite(loss.data):
            from .training import NumericalError

            raise NumericalError(f"non-finite finetune loss at step {step}")
        grads = T.backward(tape, loss, wrt=list(params.values()))
        adamw_step(params, {p.name: g for p, g in grads.items()}, state, lr_at(step, cfg.steps, cfg.warmup_frac, cfg.peak_lr), decay_matrices)
        losses.append(float(loss.data))
    return losses


def finetune_classify(model: VLModel, head: TaskHead, examples: Sequence[QAExample], vocab: Vocab, cfg: FinetuneConfig) -> list[float]:
    """Full finetune of backbone + linear head with cross-entropy on answer labels."""
    labels = np.array([head.label(e.answer) for e in examples])
    mult = 2 if head.kind == "classify_paired" else 1
    if f"head.{head.name}.w" not in model.params:
        model.add_head(head.name, len(head.classes), mult, cfg.seed)

    def loss_fn(idx, rng):
        logits = classify_logits(model, head, [examples[i] for i in idx], vocab)
        return T.cross_entropy(logits, labels[idx])

    return _finetune_loop(model, cfg, len(examples), loss_fn)


def finetune_paired(model: VLModel, head: TaskHead, examples: Sequence[QAExample], vocab: Vocab, cfg: FinetuneConfig) -> list[float]:
    if head.kind != "classify_paired":
        raise ConfigError("finetune_paired needs a classify_paired head")
    return finetune_classify(model, head, examples, vocab, cfg)


def predict_classes(model: VLModel, head: TaskHead, examples: Sequence[QAExample], vocab: Vocab, batch: int = 64) -> list[str]:
    out = []
    for s in range(0, len(examples), batch):
        logits = classify_logits(model, head, examples[s : s + batch], vocab).data
        out.extend(head.classes[i] for i in logits.argmax(axis=-1))
    return out


def accuracy(preds: Sequence[str], examples: Sequence[QAExample]) -> float:
    return float(np.mean([exact_match(p, e.answer) for p, e in zip(preds, examples)]))


def _vqa_seq2seq(e: QAExample, vocab: Vocab) -> O.Seq2Seq:
    return O.Seq2Seq(vocab.encode(e.question), vocab.encode(e.answer, add_eos=True), e.image)


def finetune_generative(model: VLModel, examples: Sequence[QAExample], vocab: Vocab, cfg: FinetuneConfig) -> list[float]:
    """Image + question form the prefix; the answer is generated."""
    if model.cfg.variant != "encoder_decoder":
        raise ConfigError("generative VQA uses the encoder_decoder variant")
    samples = [_vqa_seq2seq(e, vocab) for e in examples]
    n_image = model.cfg.n_image_tokens

    def loss_fn(idx, rng):
        return O.group_loss(model, O.collate_group([samples[i] for i in idx], n_image=n_image))

    return _finetune_loop(model, cfg, len(examples), loss_fn)


def generative_vqa(model: VLModel, examples: Sequence[QAExample], vocab: Vocab, max_len: int = 4, batch: int = 64) -> list[str]:
    out = []
    for s in range(0, len(examples), batch):
        chunk = examples[s : s + batch]
        hyps = greedy_decode(model, np.stack([e.image for e in chunk]), (), max_len, [vocab.encode(e.question) for e in chunk])
        out.extend(normalize_answer(vocab.decode(strip_generation(h.tokens, vocab.size))) for h in hyps)
    return out


def partial_train_split(examples: Sequence[QAExample], frac: float = 2 / 3, seed: int = 0) -> tuple[list[QAExample], list[str], list[str]]:
    """Keep training examples whose answer is in a random ``frac`` of the answer set.

    Returns (train examples, seen answers, unseen answers).
    """
    answers = sorted({e.answer for e in examples})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(answers))
    n_seen = max(1, int(round(frac * len(answers))))
    seen = sorted(answers[i] for i in order[:n_seen])
    unseen = sorted(set(answers) - set(seen))
    return [e for e in examples if e.answer in seen], seen, unseen


# ----------------------------------------------------------------------------
# resolution adaptation
# ----------------------------------------------------------------------------


def adapt_relbias(table: np.ndarray, old_grid: tuple[int, int], new_grid: tuple[int, int]) -> np.ndarray:
    """Re-index a [heads, (2gh-1)(2gw-1)] table to a new grid, clamping unseen offsets to the edge."""
    gh, gw = old_grid
    nh, nw = new_grid
    dr = np.clip(np.arange(-(nh - 1), nh), -(gh - 1), gh - 1)
    dc = np.clip(np.arange(-(nw - 1), nw), -(gw - 1), gw - 1)
    idx = (dr[:, None] + gh - 1) * (2 * gw - 1) + (dc[None, :] + gw - 1)
    return np.ascontiguousarray(table[:, idx.reshape(-1)])


def adapt_resolution(ckpt: Checkpoint, new_hw: Sequence[int]) -> Checkpoint:
    """Checkpoint for a new image size: image positions interpolated, relative bias re-indexed.

    Optimizer moments and training state are dropped when the resolution
    changes (shapes no longer line up); at the same resolution the checkpoint
    comes back unchanged.
    """
    mc = dict(ckpt.meta["model"])
    p = mc["patch_size"]
    new_hw = [int(x) for x in new_hw]
    if len(new_hw) != 2 or min(new_hw) <= 0 or new_hw[0] % p or new_hw[1] % p:
        raise ConfigError(f"image size {new_hw} must be positive multiples of patch size {p}")
    old_grid = (mc["image_size"][0] // p, mc["image_size"][1] // p)
    new_grid = (new_hw[0] // p, new_hw[1] // p)
    if new_grid == old_grid:
        return Checkpoint(json.loads(json.dumps(ckpt.meta)), {k: v.copy() for k, v in ckpt.tensors.items()}, ckpt.version)
    tensors = {}
    for name, arr in ckpt.tensors.items():
        if name.startswith("optim."):
            continue
        if name == "embed.pos_image":
            arr = interpolate_grid(arr, old_grid, new_grid)
        elif name == "relbias.table":
            arr = adapt_relbias(arr, old_grid, new_grid)
        tensors[name] = arr.copy()
    mc["image_size"] = new_hw
    meta = {k: v for k, v in ckpt.meta.items() if k in ("heads",)}
    meta["model"] = mc
    meta["adapted_from"] = list(ckpt.meta["model"]["image_size"])
    return Checkpoint(meta, tensors, ckpt.version)


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------


def caption_predictions(
    model: VLModel,
    images: np.ndarray,
    vocab: Vocab,
    prompt: str = "",
    max_len: int = CAPTION_MAX_LEN,
    beam: int = 1,
    alpha: float = BEAM_ALPHA,
    batch: int = 64,
) -> list[tuple[list[int], str, float]]:
    """(generated ids, decoded text, log-prob) per image; the prompt is not part of the text."""
    prompt_ids = vocab.encode(prompt) if prompt else []
    max_len = min(max_len, model.cfg.max_text_len - len(prompt_ids))
    out = []
    if beam > 1:
        for img in images:
            h = beam_search(model, img, prompt_ids, beam, max_len, alpha)
            ids = strip_generation(h.tokens, vocab.size)
            out.append((ids, vocab.decode(ids).strip(), h.logp))
        return out
    for s in range(0, len(images), batch):
        for h in greedy_decode(model, images[s : s + batch], prompt_ids, max_len):
            ids = strip_generation(h.tokens, vocab.size)
            out.append((ids, vocab.decode(ids).strip(), h.logp))
    return out


def token_accuracy(pred: Sequence[int], ref: Sequence[int]) -> float:
    if not ref:
        return float(not pred)
    hits = sum(1 for i, t in enumerate(ref) if i < len(pred) and pred[i] == t)
    return hits / max(len(ref), len(pred))


def caption_report(model: VLModel, records, vocab: Vocab, prompt: str = "", beam: int = 1) -> tuple[dict, list[dict]]:
    """Exact match and token accuracy for a caption split; also returns prediction rows."""
    if not records:
        return {"n": 0, "exact_match": None, "token_accuracy": None}, []
    images = np.stack([r.image for r in records])
    preds = caption_predictions(model, images, vocab, prompt, beam=beam)
    prompt_ids = vocab.encode(prompt) if prompt else []
    em, tok, rows = [], [], []
    for i, (r, (ids, text, lp)) in enumerate(zip(records, preds)):
        if prompt:
            ref_ids = vocab.encode(f"{prompt} {r.caption}")[len(prompt_ids) :]
        else:
            ref_ids = vocab.encode(r.caption)
        em.append(exact_match(text, r.caption))
        tok.append(token_accuracy(ids, ref_ids))
        rows.append({"id": r.path or str(i), "prediction": text, "score": lp})
    return {"n": len(records), "exact_match": float(np.mean(em)), "token_accuracy": float(np.mean(tok))}, rows


def write_predictions(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, separators=(",", ":")) + "\n")


def validation_loss(model: VLModel, records, vocab: Vocab, batch: int = 32) -> float:
    """Mean captioning loss (T_p = T_i, whole caption predicted) over records."""
    n_image = model.cfg.n_image_tokens
    total, count = 0.0, 0
    for s in range(0, len(records), batch):
        chunk = records[s : s + batch]
        samples = [O.Seq2Seq([], vocab.encode(r.caption, add_eos=True, max_len=model.cfg.max_text_len), r.image) for r in chunk]
        total += float(O.per_example_nll(model, O.collate_group(samples, n_image=n_image)).sum())
        count += len(chunk)
    return total / count
