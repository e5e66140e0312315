"""Numerical verification suites: attention-mask gradient probe and f64 gradient check.

Both run on tiny random models and are shared by the test suite and
``prefixvlm inspect gradcheck``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import objectives as O
from . import tensor as T
from .model import ModelConfig, VLModel, build_prefix_mask

GRADCHECK_TOL = 1e-5


# ----------------------------------------------------------------------------
# mask probe
# ----------------------------------------------------------------------------


def probe_config(variant: str, max_len: int = 8) -> ModelConfig:
    return ModelConfig(
        variant=variant, layers_enc=2, layers_dec=2, heads=2, hidden=16, ffn_dim=32, vocab=16,
        max_text_len=max_len, image_size=[4, 4], patch_size=4, conv_blocks=0,
        zero_init_output=False, dtype="f64",
    )


def input_jacobian(model: VLModel, total: int, prefix: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``J[t, j] = ||d (r_t . logits[t]) / d embed[j]||`` for a random probe ``r_t``.

    Returns ``(J, rows)`` where ``rows`` marks positions that produce logits:
    every position for the decoder-only stack, ``t >= prefix`` for the
    encoder-decoder (whose encoder also holds one image patch so it is never
    empty).
    """
    rng = np.random.default_rng([seed, total, prefix])
    d = model.cfg.hidden
    emb = T.Parameter("probe.embed", rng.standard_normal((1, total, d)))
    probes = rng.standard_normal((total, model.cfg.vocab))
    image = rng.random((1, 4, 4, 3))
    jac = np.zeros((total, total))
    if model.cfg.variant == "decoder_only":
        rows = np.ones(total, bool)
    else:
        rows = np.arange(total) >= prefix

    def forward() -> T.Tensor:
        if model.cfg.variant == "decoder_only":
            return model.logits(model.decoder_only_forward(emb, build_prefix_mask(total, prefix)))
        patches = model.embed_patches(model.patch_tokens(image))
        enc_in = T.concat([patches, T.getitem(emb, (slice(None), slice(0, prefix)))], axis=1)
        key_mask = np.ones((1, enc_in.shape[1]), bool)
        enc = model.encoder_forward(enc_in, key_mask, 1)
        dec_in = T.getitem(emb, (slice(None), slice(prefix, total)))
        logits = model.logits(model.decoder_forward(dec_in, enc, key_mask))
        pad = np.zeros((1, prefix, model.cfg.vocab))
        return T.concat([T.Tensor(pad), logits], axis=1)

    for t in np.flatnonzero(rows):
        with T.Tape() as tape:
            logits = forward()
            out = T.sum_(T.mul(T.getitem(logits, (0, int(t))), probes[t]))
        g = T.backward(tape, out, wrt=[emb])[emb]
        jac[t] = np.abs(g[0]).sum(axis=-1)
    return jac, rows


@dataclass
class ProbeFailure:
    variant: str
    total: int
    prefix: int
    leaks: list  # (t, j) with a nonzero gradient where the mask forbids it
    dead: list  # (t, j) with zero gradient where the mask allows it


def mask_probe(variant: str, max_total: int = 8, seed: int = 0) -> list[ProbeFailure]:
    """Check the dependency pattern for every ``T <= max_total`` and ``0 <= T_p <= T``.

    Forbidden pairs (``j > t >= T_p``) must have exactly zero gradient and
    allowed pairs must have a nonzero one.
    """
    model = VLModel(probe_config(variant, max_total), seed=seed)
    failures = []
    for total in range(1, max_total + 1):
        for prefix in range(total + 1):
            jac, rows = input_jacobian(model, total, prefix, seed)
            allowed = build_prefix_mask(total, prefix)
            leaks = [(int(t), int(j)) for t, j in zip(*np.nonzero((jac != 0) & ~allowed)) if rows[t]]
            dead = [(int(t), int(j)) for t, j in zip(*np.nonzero((jac == 0) & allowed)) if rows[t]]
            if leaks or dead:
                failures.append(ProbeFailure(variant, total, prefix, leaks, dead))
    return failures


# ----------------------------------------------------------------------------
# gradient check
# ----------------------------------------------------------------------------


def gradcheck_config(variant: str = "encoder_decoder") -> ModelConfig:
    """2 layers, head width 32 (hidden 32, one head), V = 64, 8x8 images at P = 4 (2x2 grid)."""
    return ModelConfig(
        variant=variant, layers_enc=2, layers_dec=2, heads=1, hidden=32, ffn_dim=64, vocab=64,
        max_text_len=8, image_size=[8, 8], patch_size=4, conv_blocks=3, conv_width=4,
        zero_init_output=False, init_std=0.3, dtype="f64",
    )


def gradcheck_batch(model: VLModel, seed: int):
    """One image-text group and one text-only group with mixed lengths (padding exercised)."""
    rng = np.random.default_rng([seed, 77])
    v = model.cfg.vocab - O.N_SENTINELS
    hw = model.cfg.image_size
    n_image = model.cfg.n_image_tokens

    def ids(n):
        return [int(x) for x in rng.integers(5, v, size=n)]

    pairs = [O.Seq2Seq(ids(k), ids(3 - k) + [2], rng.random((hw[0], hw[1], 3))) for k in (0, 1, 2)]
    docs = [O.Seq2Seq(ids(k), ids(2) + [2]) for k in (1, 2)]
    groups = {"pair": O.collate_group(pairs, max_text_len=model.cfg.max_text_len, n_image=n_image)}
    groups["text"] = O.collate_group(docs, max_text_len=model.cfg.max_text_len)
    return groups


def gradcheck_model(variant: str, seed: int, per_param: int = 3, step: float = 1e-3, order: int = 4) -> dict[str, float]:
    """Max relative error per parameter at ``per_param`` random elements."""
    model = VLModel(gradcheck_config(variant), seed=seed)
    groups = gradcheck_batch(model, seed)
    rng = np.random.default_rng([seed, 78])

    def f():
        return O.prefix_lm_loss(model, groups)[0]

    out = {}
    for name, p in model.params.items():
        n = min(per_param, p.size)
        flat = rng.choice(p.size, size=n, replace=False)
        idx = [np.unravel_index(int(i), p.shape) for i in flat]
        out[name] = T.grad_check(f, p, step, idx, order=order)
    return out


def gradcheck_suite(seeds: int = 5, variants=("encoder_decoder", "decoder_only"), per_param: int = 3) -> list[dict]:
    rows = []
    for variant in variants:
        for seed in range(seeds):
            errs = gradcheck_model(variant, seed, per_param)
            worst = max(errs, key=errs.get)
            rows.append({"variant": variant, "seed": seed, "max_rel_error": errs[worst], "worst_param": worst, "n_params": len(errs)})
    return rows
