"""Encoder-decoder (and decoder-only) transformer over image patches and text.

Parameter names are a stable contract (they key checkpoint records):

    embed.token  embed.pos_text  embed.pos_image  embed.out_scale  relbias.table
    enc.layer{i}.{ln1,ln2}.{g,b}   enc.layer{i}.attn.{q,k,v,o}
    enc.layer{i}.ffn.{w1,b1,w2,b2} enc.ln_f.{g,b}
    dec.layer{i}.{ln1,ln2,ln3}.{g,b}  dec.layer{i}.self.{q,k,v,o}
    dec.layer{i}.cross.{q,k,v,o}      dec.layer{i}.ffn.{w1,b1,w2,b2}  dec.ln_f.{g,b}
    convstage.*  (or patch.{w,b} without a conv stage)   head.{task}.{w,b}

Blocks are pre-norm.  The output projection is the transpose of
``embed.token``, scaled per hidden unit by ``embed.out_scale`` (zero at init,
which makes every initial prediction uniform).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .tensor import DTYPES, Parameter, Tensor
from .vision import (
    ConvStageConfig,
    _normal,
    conv_stage,
    init_conv_stage,
    init_linear_patchify,
    interpolate_grid,
    linear_patchify,
)

VARIANTS = ("encoder_decoder", "decoder_only")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "encoder_decoder"
    layers_enc: int = 2
    layers_dec: int = 2
    heads: int = 4
    hidden: int = 64
    ffn_dim: int = 256
    vocab: int = 512
    max_text_len: int = 32
    image_size: list[int] = field(default_factory=lambda: [32, 32])
    patch_size: int = 4
    channels: int = 3
    conv_blocks: int = 3
    conv_width: int = 16
    relbias: bool = True
    zero_init_output: bool = True
    init_std: float | None = None  # None: 1/sqrt(hidden)
    ln_eps: float = 1e-6
    dtype: str = "f32"

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def n_image_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def relbias_buckets(self) -> int:
        gh, gw = self.grid
        return (2 * gh - 1) * (2 * gw - 1)

    @property
    def init_scale(self) -> float:
        return self.init_std if self.init_std is not None else 1.0 / math.sqrt(self.hidden)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def conv_config(self) -> ConvStageConfig | None:
        if self.conv_blocks == 0:
            return None
        return ConvStageConfig.for_patch(self.conv_blocks, self.patch_size, self.conv_width)

    def validate(self) -> None:
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.hidden % self.heads:
            problems.append(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.max_text_len < 2:
            problems.append("max_text_len must be >= 2")
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            problems.append(f"image {h}x{w} not divisible by patch size {self.patch_size}")
        if self.conv_blocks < 0:
            problems.append("conv_blocks must be >= 0 (0 selects linear patchify)")
        if self.dtype not in DTYPES:
            problems.append(f"dtype must be one of {sorted(DTYPES)}")
        if problems:
            raise ConfigError("; ".join(problems))
        cc = self.conv_config()
        if cc is not None:
            cc.validate(self.patch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        cfg = cls(**d)
        cfg.image_size = list(cfg.image_size)
        return cfg


def build_prefix_mask(total: int, prefix: int) -> np.ndarray:
    """allow[i, j] is True iff (i < prefix and j < prefix) or (i >= prefix and j <= i)."""
    if not 0 <= prefix <= total:
        raise ValueError(f"prefix length {prefix} outside [0, {total}]")
    i = np.arange(total)[:, None]
    j = np.arange(total)[None, :]
    return ((i < prefix) & (j < prefix)) | ((i >= prefix) & (j <= i))


def causal_mask(total: int) -> np.ndarray:
    return np.tril(np.ones((total, total), dtype=bool))


def raster_coords(grid: tuple[int, int]) -> np.ndarray:
    gh, gw = grid
    k = np.arange(gh * gw)
    return np.stack([k // gw, k % gw], axis=1)


def relbias_index(coords: np.ndarray, table_grid: tuple[int, int]) -> np.ndarray:
    """Bucket id for every (query patch, key patch) pair; deltas clamp to the table edge."""
    gh, gw = table_grid
    dr = np.clip(coords[:, None, 0] - coords[None, :, 0], -(gh - 1), gh - 1)
    dc = np.clip(coords[:, None, 1] - coords[None, :, 1], -(gw - 1), gw - 1)
    return (dr + gh - 1) * (2 * gw - 1) + (dc + gw - 1)


class VLModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Parameter] = {}
        self._bias_cache: dict = {}
        self._interp_cache: dict = {}
        rng = np.random.default_rng(seed)
        self._init(rng)

    # -- construction -------------------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        p = Parameter(name, data)
        self.params[name] = p
        return p

    def _init(self, rng: np.random.Generator) -> None:
        c = self.cfg
        dt = c.np_dtype
        std = c.init_scale
        d = c.hidden

        self._add("embed.token", _normal(rng, (c.vocab, d), std, dt))
        self._add("embed.pos_text", _normal(rng, (c.max_text_len, d), std, dt))
        self._add("embed.pos_image", _normal(rng, (c.n_image_tokens, d), std, dt))
        scale = np.zeros(d, dt) if c.zero_init_output else np.ones(d, dt)
        self._add("embed.out_scale", scale)
        if c.relbias:
            self._add("relbias.table", np.zeros((c.heads, c.relbias_buckets), dt))

        cc = c.conv_config()
        if cc is None:
            stem = init_linear_patchify(c.patch_size, c.channels, d, rng, dt, std)
        else:
            stem = init_conv_stage(cc, c.channels, d, rng, dt, std)
        for name, p in stem.items():
            self.params[name] = p

        def ln(prefix):
            self._add(f"{prefix}.g", np.ones(d, dt))
            self._add(f"{prefix}.b", np.zeros(d, dt))

        def attn(prefix):
            for k in "qkvo":
                self._add(f"{prefix}.{k}", _normal(rng, (d, d), std, dt))

        def ffn(prefix):
            self._add(f"{prefix}.w1", _normal(rng, (d, c.ffn_dim), std, dt))
            self._add(f"{prefix}.b1", np.zeros(c.ffn_dim, dt))
            self._add(f"{prefix}.w2", _normal(rng, (c.ffn_dim, d), std, dt))
            self._add(f"{prefix}.b2", np.zeros(d, dt))

        if c.variant == "encoder_decoder":
            for i in range(c.layers_enc):
                ln(f"enc.layer{i}.ln1")
                attn(f"enc.layer{i}.attn")
                ln(f"enc.layer{i}.ln2")
                ffn(f"enc.layer{i}.ffn")
            ln("enc.ln_f")
            for i in range(c.layers_dec):
                ln(f"dec.layer{i}.ln1")
                attn(f"dec.layer{i}.self")
                ln(f"dec.layer{i}.ln2")
                attn(f"dec.layer{i}.cross")
                ln(f"dec.layer{i}.ln3")
                ffn(f"dec.layer{i}.ffn")
        else:
            for i in range(c.layers_dec):
                ln(f"dec.layer{i}.ln1")
                attn(f"dec.layer{i}.self")
                ln(f"dec.layer{i}.ln2")
                ffn(f"dec.layer{i}.ffn")
        ln("dec.ln_f")

    def add_head(self, task: str, n_classes: int, in_mult: int = 1, seed: int = 0) -> None:
        """Attach (or re-initialize) a linear classifier ``head.{task}``."""
        if n_classes < 2:
            raise ValueError("a classification head needs at least two classes")
        rng = np.random.default_rng(seed)
        dt = self.cfg.np_dtype
        w = _normal(rng, (self.cfg.hidden * in_mult, n_classes), self.cfg.init_scale, dt)
        self.params[f"head.{task}.w"] = Parameter(f"head.{task}.w", w)
        self.params[f"head.{task}.b"] = Parameter(f"head.{task}.b", np.zeros(n_classes, dt))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    # -- building blocks ------------------------------------------------------

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"], self.cfg.ln_eps)

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = T.gelu(T.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return T.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _attention(
        self,
        xq: Tensor,
        xkv: Tensor,
        prefix: str,
        mask: np.ndarray | None,
        bias: Tensor | None = None,
        probs_out: list | None = None,
    ) -> Tensor:
        p = self.params
        b, tq, d = xq.shape
        tk = xkv.shape[1]
        h = self.cfg.heads
        dh = d // h
        q = T.linear(xq, p[f"{prefix}.q"])
        k = T.linear(xkv, p[f"{prefix}.k"])
        v = T.linear(xkv, p[f"{prefix}.v"])
        q = T.transpose(T.reshape(q, (b, tq, h, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, (b, tk, h, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(v, (b, tk, h, dh)), (0, 2, 1, 3))
        scores = T.mul(T.matmul(q, k), 1.0 / math.sqrt(dh))
        if bias is not None:
            scores = T.add(scores, bias)
        att = T.masked_softmax(scores, mask)
        if probs_out is not None:
            probs_out.append(att.data)
        out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, tq, d))
        return T.linear(out, p[f"{prefix}.o"])

    def relbias(self, total: int, n_image: int, coords: np.ndarray | None = None) -> Tensor | None:
        """[heads, total, total] additive bias: table entries on patch-patch pairs, zero elsewhere."""
        if not self.cfg.relbias or n_image == 0:
            return None
        key = (total, n_image) if coords is None else None
        idx = self._bias_cache.get(key) if key is not None else None
        if idx is None:
            if coords is None:
                coords = raster_coords(self._image_grid(n_image))
            idx = np.full((total, total), self.cfg.relbias_buckets, dtype=np.int64)
            idx[:n_image, :n_image] = relbias_index(np.asarray(coords), self.cfg.grid)
            if key is not None:
                self._bias_cache[key] = idx
        table = self.params["relbias.table"]
        padded = T.concat([table, Tensor(np.zeros((table.shape[0], 1), table.dtype))], axis=1)
        return T.take_last(padded, idx)

    def _image_grid(self, n_image: int) -> tuple[int, int]:
        gh, gw = self.cfg.grid
        if gh * gw == n_image:
            return gh, gw
        side = int(round(math.sqrt(n_image)))
        if side * side != n_image:
            raise ValueError(f"cannot infer a patch grid for {n_image} image tokens")
        return side, side

    # -- public forward pieces ----------------------------------------------

    def patch_tokens(self, images: np.ndarray) -> Tensor:
        """Raw images [B, H, W, C] -> patch tokens [B, T_i, D] (before positional rows)."""
        images = np.asarray(images, dtype=self.cfg.np_dtype)
        cc = self.cfg.conv_config()
        if cc is None:
            return linear_patchify(images, self.params, self.cfg.patch_size)
        return conv_stage(images, self.params, cc)

    def embed_text(self, ids: np.ndarray, offset: int | np.ndarray = 0) -> Tensor:
        """Token plus positional rows; ``offset`` (scalar or per row) shifts the position ids.

        The decoder of the encoder-decoder variant uses it so that a text token
        keeps its position in the full text whatever the prefix split.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        n = ids.shape[1]
        offset = np.asarray(offset, dtype=np.int64)
        table = self.params["embed.pos_text"]
        tok = T.take(self.params["embed.token"], ids)
        if offset.ndim == 0:
            last = n + int(offset)
            if last > self.cfg.max_text_len:
                raise ValueError(f"text positions up to {last} exceed positional table of {self.cfg.max_text_len}")
            pos = T.getitem(table, slice(int(offset), last))
        else:
            # per-row offsets: trailing pad slots may run past the table; they are clamped
            # (callers check real lengths, pads are never attended to or scored)
            idx = np.minimum(offset[:, None] + np.arange(n)[None, :], self.cfg.max_text_len - 1)
            pos = T.take(table, idx)
        return T.add(tok, pos)

    def image_positions(self, n: int) -> Tensor:
        """Positional rows for ``n`` patch tokens.

        A grid other than the configured one reads the table through the same
        separable linear interpolation that resolution adaptation applies, as a
        fixed matrix so gradients reach the stored rows.
        """
        table = self.params["embed.pos_image"]
        if n == table.shape[0]:
            return table
        grid = self._image_grid(n)
        w = self._interp_cache.get(grid)
        if w is None:
            eye = np.eye(table.shape[0], dtype=np.float64)
            w = interpolate_grid(eye, self.cfg.grid, grid).astype(table.dtype)
            self._interp_cache[grid] = w
        return T.matmul(Tensor(w), table)

    def embed_patches(self, patches: Tensor) -> Tensor:
        return T.add(patches, self.image_positions(patches.shape[1]))

    def embed_inputs(self, patches: Tensor | None, text_ids: np.ndarray | None) -> Tensor:
        """Concatenate positioned patch tokens and positioned text tokens (no type embedding)."""
        parts = []
        if patches is not None:
            parts.append(self.embed_patches(patches))
        if text_ids is not None and np.asarray(text_ids).shape[-1] > 0:
            parts.append(self.embed_text(text_ids))
        if not parts:
            raise ValueError("nothing to embed")
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)

    def encoder_stack(
        self,
        x: Tensor,
        mask: np.ndarray | None,
        n_image: int,
        coords: np.ndarray | None = None,
        probs_out: list | None = None,
    ) -> Tensor:
        """Encoder layers + final norm under an arbitrary (broadcastable) attention mask."""
        bias = self.relbias(x.shape[1], n_image, coords)
        for i in range(self.cfg.layers_enc):
            pre = f"enc.layer{i}"
            h = self._ln(x, f"{pre}.ln1")
            x = T.add(x, self._attention(h, h, f"{pre}.attn", mask, bias, probs_out))
            x = T.add(x, self._ffn(self._ln(x, f"{pre}.ln2"), f"{pre}.ffn"))
        return self._ln(x, "enc.ln_f")

    def encoder_forward(
        self,
        x: Tensor,
        key_mask: np.ndarray | None = None,
        n_image: int = 0,
        coords: np.ndarray | None = None,
        probs_out: list | None = None,
    ) -> Tensor:
        """Fully bidirectional encoding; ``key_mask`` [B, T] marks non-pad positions."""
        mask = None if key_mask is None else np.asarray(key_mask, bool)[:, None, None, :]
        return self.encoder_stack(x, mask, n_image, coords, probs_out)

    def decoder_forward(
        self,
        dec_x: Tensor,
        enc_out: Tensor,
        enc_key_mask: np.ndarray | None = None,
        probs_out: list | None = None,
    ) -> Tensor:
        """Causal self-attention plus cross-attention to every encoder position."""
        if self.cfg.variant != "encoder_decoder":
            raise ConfigError("decoder_forward needs the encoder_decoder variant")
        t = dec_x.shape[1]
        self_mask = causal_mask(t)
        cross_mask = None if enc_key_mask is None else np.asarray(enc_key_mask, bool)[:, None, None, :]
        x = dec_x
        for i in range(self.cfg.layers_dec):
            pre = f"dec.layer{i}"
            h = self._ln(x, f"{pre}.ln1")
            x = T.add(x, self._attention(h, h, f"{pre}.self", self_mask, None, probs_out))
            x = T.add(x, self._attention(self._ln(x, f"{pre}.ln2"), enc_out, f"{pre}.cross", cross_mask, None, probs_out))
            x = T.add(x, self._ffn(self._ln(x, f"{pre}.ln3"), f"{pre}.ffn"))
        return self._ln(x, "dec.ln_f")

    def decoder_only_forward(
        self,
        x: Tensor,
        mask: np.ndarray,
        n_image: int = 0,
        coords: np.ndarray | None = None,
        probs_out: list | None = None,
    ) -> Tensor:
        """Single stack under a prefix mask ([T, T] or [B, 1, T, T])."""
        if self.cfg.variant != "decoder_only":
            raise ConfigError("decoder_only_forward needs the decoder_only variant")
        t = x.shape[1]
        mask = np.asarray(mask, bool)
        if mask.shape[-1] != t or mask.shape[-2] != t:
            raise ValueError(f"mask shape {mask.shape} does not match sequence length {t}")
        bias = self.relbias(t, n_image, coords)
        for i in range(self.cfg.layers_dec):
            pre = f"dec.layer{i}"
            h = self._ln(x, f"{pre}.ln1")
            x = T.add(x, self._attention(h, h, f"{pre}.self", mask, bias, probs_out))
            x = T.add(x, self._ffn(self._ln(x, f"{pre}.ln2"), f"{pre}.ffn"))
        return self._ln(x, "dec.ln_f")

    def logits(self, hidden: Tensor) -> Tensor:
        """Tied output projection: (hidden * out_scale) @ embed.token^T."""
        scaled = T.mul(hidden, self.params["embed.out_scale"])
        return T.linear(scaled, T.transpose(self.params["embed.token"], (1, 0)))

    def head_logits(self, features: Tensor, task: str) -> Tensor:
        return T.linear(features, self.params[f"head.{task}.w"], self.params[f"head.{task}.b"])


def pooled_image_representation(enc_out: Tensor, n_image: int) -> Tensor:
    """Mean of encoder outputs over the patch positions only."""
    if n_image <= 0:
        raise ValueError("empty image span")
    return T.mean(T.getitem(enc_out, (slice(None), slice(0, n_image))), axis=1)
