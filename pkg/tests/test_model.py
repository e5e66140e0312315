import math

import numpy as np
import pytest

from prefixvlm import tensor as T
from prefixvlm.model import ConfigError, ModelConfig, VLModel, build_prefix_mask, causal_mask, raster_coords, relbias_index
from prefixvlm.verify import mask_probe
from prefixvlm.vision import interpolate_grid

from conftest import tiny_config


def test_prefix_mask_definition():
    for total in range(1, 7):
        for prefix in range(total + 1):
            m = build_prefix_mask(total, prefix)
            for i in range(total):
                for j in range(total):
                    assert m[i, j] == ((i < prefix and j < prefix) or (i >= prefix and j <= i))
    assert np.array_equal(build_prefix_mask(5, 0), causal_mask(5))
    assert np.array_equal(build_prefix_mask(5, 1), causal_mask(5))
    assert build_prefix_mask(5, 5).all()
    with pytest.raises(ValueError):
        build_prefix_mask(3, 4)


def test_config_validation_lists_every_problem():
    cfg = tiny_config(variant="nope", hidden=15, image_size=[9, 8], dtype="f16")
    with pytest.raises(ConfigError) as e:
        cfg.validate()
    msg = str(e.value)
    for bit in ("variant", "heads", "9x8", "dtype"):
        assert bit in msg


def test_config_dict_roundtrip_and_unknown_keys():
    cfg = tiny_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="bogus"):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_default_init_scale_and_zero_output():
    m = VLModel(tiny_config(), seed=0)
    assert m.cfg.init_scale == pytest.approx(1 / math.sqrt(16))
    assert np.all(m["embed.out_scale"].data == 0)
    logits = m.logits(T.Tensor(np.random.default_rng(0).standard_normal((1, 3, 16)).astype(np.float32)))
    assert np.all(logits.data == 0)  # uniform prediction at step 0


def test_same_seed_same_params():
    a, b = VLModel(tiny_config(), seed=7), VLModel(tiny_config(), seed=7)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.params)
    c = VLModel(tiny_config(), seed=8)
    assert not np.array_equal(a["embed.token"].data, c["embed.token"].data)


def test_parameter_layout_by_variant():
    ed = VLModel(tiny_config(), seed=0)
    do = VLModel(tiny_config(variant="decoder_only", layers_dec=2), seed=0)
    assert "enc.layer0.attn.q" in ed.params and "dec.layer0.cross.q" in ed.params
    assert not any(k.startswith("enc.") for k in do.params)
    assert "patch.w" in VLModel(tiny_config(conv_blocks=0), seed=0).params
    assert ed.num_parameters() == sum(p.size for p in ed.parameters())


def test_relbias_index_is_shift_invariant():
    coords = raster_coords((3, 3))
    idx = relbias_index(coords, (3, 3))
    # same displacement, same bucket
    for a in range(9):
        for b in range(9):
            for c in range(9):
                for d in range(9):
                    if np.array_equal(coords[a] - coords[b], coords[c] - coords[d]):
                        assert idx[a, b] == idx[c, d]
    assert len(np.unique(idx)) == 25


def test_relbias_zero_off_patch_block(tiny_model):
    tiny_model["relbias.table"].data[:] = np.random.default_rng(0).standard_normal(tiny_model["relbias.table"].shape)
    n = tiny_model.cfg.n_image_tokens
    bias = tiny_model.relbias(n + 3, n).data
    assert bias.shape == (2, n + 3, n + 3)
    assert np.all(bias[:, n:, :] == 0) and np.all(bias[:, :, n:] == 0)
    assert np.abs(bias[:, :n, :n]).sum() > 0


def test_decoder_offset_positions(tiny_model):
    ids = np.array([[5, 6]])
    x = tiny_model.embed_text(ids, offset=3).data
    tok = tiny_model["embed.token"].data
    pos = tiny_model["embed.pos_text"].data
    np.testing.assert_allclose(x[0], tok[[5, 6]] + pos[3:5])
    with pytest.raises(ValueError):
        tiny_model.embed_text(np.zeros((1, 10), int), offset=5)


def test_attention_probabilities_respect_mask():
    m = VLModel(tiny_config(variant="decoder_only", zero_init_output=False), seed=0)
    x = m.embed_text(np.array([[5, 6, 7, 8, 9]]))
    mask = build_prefix_mask(5, 2)
    probs: list = []
    m.decoder_only_forward(x, mask, probs_out=probs)
    for p in probs:
        assert np.all(p[..., ~mask] == 0)
        np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-5)


def test_tied_output_gets_gradient_from_logits():
    m = VLModel(tiny_config(zero_init_output=False), seed=0)
    h = T.Tensor(np.ones((1, 2, 16), np.float32))
    with T.Tape() as tape:
        loss = T.sum_(m.logits(h))
    g = T.backward(tape, loss, wrt=[m["embed.token"], m["embed.out_scale"]])
    assert np.abs(g[m["embed.token"]]).sum() > 0 and np.abs(g[m["embed.out_scale"]]).sum() > 0


@pytest.mark.parametrize("variant", ["encoder_decoder", "decoder_only"])
def test_mask_probe_short(variant):
    assert mask_probe(variant, max_total=4) == []


def test_image_positions_follow_the_grid():
    m = VLModel(tiny_config(image_size=[8, 8]), seed=0)
    m["embed.pos_image"].data[:] = np.random.default_rng(0).standard_normal((4, 16))
    assert m.image_positions(4) is m["embed.pos_image"]
    got = m.image_positions(9).data
    np.testing.assert_allclose(got, interpolate_grid(m["embed.pos_image"].data, (2, 2), (3, 3)), rtol=1e-6, atol=1e-6)
