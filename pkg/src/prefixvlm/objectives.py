"""Prefix language modeling plus the LM / MLM / span-corruption ablation objectives.

Every sequence-to-sequence style example is reduced to a :class:`Seq2Seq`
record (optional image, source text, target text).  The two model variants
consume it differently:

* encoder-decoder: the encoder reads ``patches + source``; the decoder is
  teacher-forced on ``[BOS] + target[:-1]`` and predicts ``target``.
* decoder-only: one stream ``patches + [BOS] + source + target[:-1]`` under a
  prefix mask covering ``patches + [BOS] + source``; the text positions
  predict ``source + target`` and only the ``target`` part is scored.

Losses are averaged over target tokens within an example, then over examples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import VLModel, build_prefix_mask, causal_mask
from .tensor import Tensor
from .tokenizer import BOS, EOS, N_SPECIAL, PAD, mask_tokens

OBJECTIVES = ("prefix_lm", "lm", "mlm", "span")
N_SENTINELS = 8
MLM_RATE = 0.15
SPAN_MEAN = 3.0
SPAN_RATE = 0.15


class ObjectiveError(ValueError):
    pass


# ----------------------------------------------------------------------------
# examples
# ----------------------------------------------------------------------------


@dataclass
class PrefixSample:
    """Text ids (ending in EOS), an optional image, and a prefix length over patches + text."""

    ids: list[int]
    prefix_len: int
    image: np.ndarray | None = None
    n_image: int = 0

    def validate(self) -> None:
        t = len(self.ids)
        if self.image is not None:
            lo, hi = self.n_image, self.n_image + t - 1
        else:
            lo, hi = 1, t - 1
        if not lo <= self.prefix_len <= hi:
            raise ObjectiveError(f"prefix length {self.prefix_len} outside [{lo}, {hi}]")

    @property
    def loss_mask(self) -> np.ndarray:
        k = self.prefix_len - self.n_image
        return np.arange(len(self.ids)) >= k

    def to_seq2seq(self) -> "Seq2Seq":
        self.validate()
        k = self.prefix_len - self.n_image
        return Seq2Seq(list(self.ids[:k]), list(self.ids[k:]), self.image)


@dataclass
class Seq2Seq:
    source: list[int]
    target: list[int]
    image: np.ndarray | None = None


@dataclass
class MLMSample:
    corrupted: list[int]
    original: list[int]
    masked: np.ndarray  # bool, positions scored


def sample_prefix(n_image: int, n_text: int, rng: np.random.Generator, dist: str = "uniform") -> int:
    """Draw a prefix length: multimodal in [T_i, T_i + T_t - 1], text-only in [1, T_t - 1]."""
    if n_image > 0:
        if n_text < 1:
            raise ObjectiveError("multimodal samples need at least one text token")
        lo, hi = n_image, n_image + n_text - 1
    else:
        if n_text < 2:
            raise ObjectiveError("text-only samples need at least two tokens")
        lo, hi = 1, n_text - 1
    if dist == "fixed":
        return lo if n_image > 0 else max(1, n_text // 2)
    if dist != "uniform":
        raise ObjectiveError(f"unknown prefix distribution {dist!r}")
    return int(rng.integers(lo, hi + 1))


def span_corruption(
    ids: list[int],
    mean_span: float,
    corrupt_rate: float,
    rng: np.random.Generator,
    sentinel_base: int,
    n_sentinels: int = N_SENTINELS,
) -> tuple[list[int], list[int]]:
    """Replace separated spans (geometric lengths) with sentinels.

    Returns ``(source, target)``; the target lists each sentinel followed by
    the tokens it hid, then EOS.
    """
    body = [t for t in ids if t != EOS]
    n = len(body)
    budget = int(round(n * corrupt_rate))
    if budget == 0:
        raise ObjectiveError("span corruption produced an empty target")
    noise = np.zeros(n, dtype=bool)
    tries = 0
    while noise.sum() < budget and tries < 200:
        length = int(min(rng.geometric(1.0 / mean_span), budget - noise.sum()))
        start = int(rng.integers(0, n - length + 1))
        # spans stay separated by at least one clean token
        if noise[max(0, start - 1) : start + length + 1].any():
            tries += 1
            continue
        noise[start : start + length] = True
    source: list[int] = []
    target: list[int] = []
    k = 0
    i = 0
    while i < n:
        if noise[i]:
            if k >= n_sentinels:
                raise ObjectiveError(f"sentinel budget of {n_sentinels} exceeded")
            sentinel = sentinel_base + k
            k += 1
            source.append(sentinel)
            target.append(sentinel)
            while i < n and noise[i]:
                target.append(body[i])
                i += 1
        else:
            source.append(body[i])
            i += 1
    source.append(EOS)
    target.append(EOS)
    return source, target


def sentinel_base(vocab_size: int, n_sentinels: int = N_SENTINELS) -> int:
    return vocab_size - n_sentinels


def make_mlm_sample(ids: list[int], rate: float, rng: np.random.Generator, max_tries: int = 100) -> MLMSample:
    """Corrupt until at least one token is masked."""
    if not any(t >= N_SPECIAL for t in ids):
        raise ObjectiveError("MLM needs at least one maskable token")
    for _ in range(max_tries):
        corrupted, targets = mask_tokens(ids, rate, rng)
        if targets:
            masked = np.zeros(len(ids), dtype=bool)
            masked[list(targets)] = True
            return MLMSample(corrupted.tolist(), list(ids), masked)
    raise ObjectiveError("could not mask any token; rate too small")


# ----------------------------------------------------------------------------
# collation
# ----------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded tensors for a group of examples that all have, or all lack, an image."""

    images: np.ndarray | None
    n_image: int
    src: np.ndarray
    src_mask: np.ndarray
    dec_in: np.ndarray
    dec_tgt: np.ndarray
    tgt_mask: np.ndarray
    # decoder-only view
    seq: np.ndarray
    seq_tgt: np.ndarray
    seq_loss_mask: np.ndarray
    seq_prefix: np.ndarray  # per example, over patches + text

    @property
    def size(self) -> int:
        return self.src.shape[0]


def _pad(rows: list[list[int]], width: int, pad_id: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    out = np.full((len(rows), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
        mask[i, : len(r)] = True
    return out, mask


def collate_group(samples: list[Seq2Seq], pad_id: int = PAD, max_text_len: int | None = None, n_image: int = 0) -> Batch:
    if not samples:
        raise ObjectiveError("cannot collate an empty group")
    has_image = samples[0].image is not None
    if any((s.image is not None) != has_image for s in samples):
        raise ObjectiveError("a group must be all-image or all-text")
    for s in samples:
        if not s.target:
            raise ObjectiveError("empty target span")
        if max_text_len is not None and len(s.source) + len(s.target) > max_text_len:
            raise ObjectiveError(f"example of {len(s.source) + len(s.target)} tokens exceeds max_text_len {max_text_len}")
    src, src_mask = _pad([s.source for s in samples], max(len(s.source) for s in samples), pad_id)
    tw = max(len(s.target) for s in samples)
    dec_in, _ = _pad([[BOS] + s.target[:-1] for s in samples], tw, pad_id)
    dec_tgt, tgt_mask = _pad([s.target for s in samples], tw, pad_id)
    seq_rows = [[BOS] + s.source + s.target[:-1] for s in samples]
    sw = max(len(r) for r in seq_rows)
    seq, _ = _pad(seq_rows, sw, pad_id)
    seq_tgt, seq_valid = _pad([s.source + s.target for s in samples], sw, pad_id)
    src_len = np.array([len(s.source) for s in samples])
    seq_loss_mask = seq_valid & (np.arange(sw)[None, :] >= src_len[:, None])
    images = np.stack([s.image for s in samples]).astype(np.float32) if has_image else None
    return Batch(
        images,
        n_image if has_image else 0,
        src,
        src_mask,
        dec_in,
        dec_tgt,
        tgt_mask,
        seq,
        seq_tgt,
        seq_loss_mask,
        (n_image if has_image else 0) + 1 + src_len,
    )


def collate(samples: list[Seq2Seq], pad_id: int = PAD, max_text_len: int | None = None, n_image: int = 0) -> dict[str, Batch]:
    """Right-pad and split a mixed list into an image group and a text-only group."""
    out = {}
    pairs = [s for s in samples if s.image is not None]
    texts = [s for s in samples if s.image is None]
    if pairs:
        out["pair"] = collate_group(pairs, pad_id, max_text_len, n_image)
    if texts:
        out["text"] = collate_group(texts, pad_id, max_text_len, n_image)
    return out


# ----------------------------------------------------------------------------
# forward wiring
# ----------------------------------------------------------------------------


def encode(model: VLModel, images: np.ndarray | None, src: np.ndarray, src_mask: np.ndarray) -> tuple[Tensor, np.ndarray, int]:
    """Run the encoder on patches + source text; returns (outputs, key mask, T_i)."""
    patches = None if images is None else model.patch_tokens(images)
    n_image = 0 if patches is None else patches.shape[1]
    text = src if src.shape[1] > 0 else None
    x = model.embed_inputs(patches, text)
    b = x.shape[0]
    key_mask = np.concatenate([np.ones((b, n_image), bool), src_mask], axis=1) if n_image else src_mask
    if not key_mask.any(axis=1).all():
        raise ObjectiveError("an encoder input is empty; text-only examples need a non-empty source")
    return model.encoder_forward(x, key_mask, n_image), key_mask, n_image


def seq2seq_logits(model: VLModel, batch: Batch) -> Tensor:
    """Logits aligned with the group's scored targets (``dec_tgt`` or ``seq_tgt``)."""
    if model.cfg.variant == "encoder_decoder":
        enc, key_mask, _ = encode(model, batch.images, batch.src, batch.src_mask)
        h = model.decoder_forward(model.embed_text(batch.dec_in, batch.src_mask.sum(axis=1)), enc, key_mask)
        return model.logits(h)
    patches = None if batch.images is None else model.patch_tokens(batch.images)
    n_image = 0 if patches is None else patches.shape[1]
    x = model.embed_inputs(patches, batch.seq)
    total = x.shape[1]
    mask = np.stack([build_prefix_mask(total, int(p)) for p in batch.seq_prefix])[:, None]
    h = model.decoder_only_forward(x, mask, n_image)
    if n_image:
        h = T.getitem(h, (slice(None), slice(n_image, None)))
    return model.logits(h)


def _targets(model: VLModel, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    if model.cfg.variant == "encoder_decoder":
        return batch.dec_tgt, batch.tgt_mask
    return batch.seq_tgt, batch.seq_loss_mask


def per_example_weights(mask: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Weights giving each example equal share: mask / count per row, times ``scale``."""
    counts = mask.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ObjectiveError("empty loss")
    return mask / counts * scale


def group_loss(model: VLModel, batch: Batch) -> Tensor:
    """Mean over examples of the per-example mean target NLL."""
    logits = seq2seq_logits(model, batch)
    tgt, mask = _targets(model, batch)
    return T.cross_entropy(logits, tgt, mask, per_example_weights(mask, 1.0 / batch.size))


def per_example_nll(model: VLModel, batch: Batch) -> np.ndarray:
    logits = seq2seq_logits(model, batch).data
    tgt, mask = _targets(model, batch)
    logp = T.log_softmax_np(logits)
    nll = -np.take_along_axis(logp, tgt[..., None], -1)[..., 0]
    return (nll * mask).sum(1) / mask.sum(1)


def prefix_lm_loss(model: VLModel, groups: dict[str, Batch]) -> tuple[Tensor, dict[str, float]]:
    """Combined loss over the groups of one batch; also reports each group's own mean."""
    total_n = sum(b.size for b in groups.values())
    total = None
    stats = {}
    for name, batch in groups.items():
        loss = group_loss(model, batch)
        stats[name] = float(loss.data)
        part = T.mul(loss, batch.size / total_n)
        total = part if total is None else T.add(total, part)
    return total, stats


def lm_loss(model: VLModel, texts: list[list[int]], pad_id: int = PAD) -> Tensor:
    """Left-to-right LM over ``[BOS] + text`` with a plain causal mask (decoder-only)."""
    if model.cfg.variant != "decoder_only":
        raise ObjectiveError("lm_loss runs on the decoder_only variant")
    for t in texts:
        if len(t) < 2:
            raise ObjectiveError("LM needs at least two tokens")
    inp, _ = _pad([[BOS] + t[:-1] for t in texts], max(len(t) for t in texts), pad_id)
    tgt, mask = _pad(texts, inp.shape[1], pad_id)
    x = model.embed_text(inp)
    h = model.decoder_only_forward(x, causal_mask(inp.shape[1]))
    return T.cross_entropy(model.logits(h), tgt, mask, per_example_weights(mask, 1.0 / len(texts)))


def mlm_batch(samples: list[MLMSample], pad_id: int = PAD) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    width = max(len(s.corrupted) for s in samples)
    ids, valid = _pad([s.corrupted for s in samples], width, pad_id)
    tgt, _ = _pad([s.original for s in samples], width, pad_id)
    scored = np.zeros_like(valid)
    for i, s in enumerate(samples):
        scored[i, : len(s.masked)] = s.masked
    return ids, valid, tgt, scored


def mlm_logits(model: VLModel, ids: np.ndarray, valid: np.ndarray, explicit_mask: bool = False) -> Tensor:
    """Bidirectional encoding of corrupted text projected through the tied embedding.

    ``explicit_mask`` routes through a full-prefix mask instead of the
    unmasked path; both must agree.
    """
    x = model.embed_text(ids)
    t = ids.shape[1]
    if model.cfg.variant == "encoder_decoder":
        if explicit_mask:
            allow = build_prefix_mask(t, t)[None, None] & valid[:, None, None, :]
            h = model.encoder_stack(x, allow, 0)
        else:
            h = model.encoder_forward(x, valid, 0)
    else:
        # right padding: pads sit after every real token, so they never precede a scored slot
        lengths = valid.sum(axis=1)
        if explicit_mask:
            mask = np.stack([build_prefix_mask(t, t) & valid[i][None, :] for i in range(len(lengths))])[:, None]
        else:
            mask = np.stack([np.broadcast_to(valid[i][None, :], (t, t)) for i in range(len(lengths))])[:, None]
        h = model.decoder_only_forward(x, mask)
    return model.logits(h)


def mlm_loss(model: VLModel, samples: list[MLMSample], explicit_mask: bool = False) -> Tensor:
    ids, valid, tgt, scored = mlm_batch(samples)
    logits = mlm_logits(model, ids, valid, explicit_mask)
    return T.cross_entropy(logits, tgt, scored, per_example_weights(scored, 1.0 / len(samples)))
