import io
import json
import math

import numpy as np
import pytest

from prefixvlm import tensor as T
from prefixvlm.data import build_corpora
from prefixvlm.model import ConfigError, VLModel
from prefixvlm.tokenizer import EOS, train_bpe
from prefixvlm.training import (
    NumericalError,
    OptimState,
    TrainConfig,
    Trainer,
    adamw_step,
    decay_matrices,
    fit_for_span,
    lr_at,
    prepare_data,
)

from conftest import tiny_config


def test_lr_schedule_points():
    s = 1000
    assert lr_at(0, s, 0.02, 5e-4) == 0.0
    assert lr_at(20, s, 0.02, 5e-4) == pytest.approx(5e-4)
    assert lr_at(10, s, 0.02, 5e-4) == pytest.approx(2.5e-4)
    assert lr_at(s, s, 0.02, 5e-4) == 0.0
    assert lr_at(510, s, 0.02, 5e-4) == pytest.approx(2.5e-4)
    with pytest.raises(ValueError):
        lr_at(s + 1, s, 0.02, 5e-4)


def test_adamw_matches_hand_computation():
    w = T.Parameter("w", np.array([[1.0, -2.0]]))
    b = T.Parameter("b", np.array([0.5]))
    st = OptimState(weight_decay=0.1)
    gw, gb = np.array([[0.3, -0.4]]), np.array([2.0])
    adamw_step({"w": w, "b": b}, {"w": gw, "b": gb}, st, 0.01, decay_matrices)
    # first step: m_hat = g, v_hat = g^2, so the Adam direction is sign(g) (up to eps)
    dir_w = gw / (np.abs(gw) + 1e-8)
    np.testing.assert_allclose(w.data, np.array([[1.0, -2.0]]) - 0.01 * (dir_w + 0.1 * np.array([[1.0, -2.0]])), rtol=1e-12)
    np.testing.assert_allclose(b.data, 0.5 - 0.01 * 2.0 / (2.0 + 1e-8), rtol=1e-12)  # 1-D: no decay
    # second step with bias correction
    w0 = w.data.copy()
    g2 = np.array([[0.1, 0.1]])
    adamw_step({"w": w}, {"w": g2}, st, 0.01, decay_matrices)
    m = (0.9 * 0.1 * gw + 0.1 * g2) / (1 - 0.9**2)
    v = (0.999 * 0.001 * gw**2 + 0.001 * g2**2) / (1 - 0.999**2)
    np.testing.assert_allclose(w.data, w0 - 0.01 * (m / (np.sqrt(v) + 1e-8) + 0.1 * w0), rtol=1e-10)


def test_decay_only_matrices():
    assert decay_matrices("x", np.zeros((2, 2)))
    assert not decay_matrices("x", np.zeros(2))


def test_train_config_validation():
    with pytest.raises(ConfigError) as e:
        TrainConfig(objective="lm", steps=0, zoom_prob=2.0).validate(tiny_config())
    msg = str(e.value)
    assert "decoder_only" in msg and "steps" in msg and "zoom_prob" in msg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})


def test_fit_for_span():
    ids = list(range(5, 40)) + [EOS]
    out = fit_for_span(ids, 24, 0.15)
    body = len(out) - 1
    assert out[-1] == EOS and body + 2 * round(body * 0.15) + 2 <= 24


@pytest.fixture(scope="module")
def small_setup():
    c = build_corpora(64, 16, seed=0, hw=8, grid=2, n_eval=4)
    vocab = train_bpe([p.caption for p in c.pairs] + c.docs, 60)
    return c, vocab


def _trainer(small_setup, **kw):
    c, vocab = small_setup
    mcfg = tiny_config(vocab=vocab.size + 8, max_text_len=24)
    data = prepare_data(c, vocab, 24, (8, 8))
    cfg = TrainConfig(**{"steps": 30, "pairs_per_batch": 4, "docs_per_batch": 2, "peak_lr": 3e-3, "warmup_frac": 0.1, **kw})
    return Trainer(VLModel(mcfg, seed=0), cfg, data)


@pytest.mark.parametrize("objective", ["prefix_lm", "span", "mlm"])
def test_training_reduces_loss(small_setup, objective):
    tr = _trainer(small_setup, objective=objective)
    recs = tr.run()
    first, last = recs[0], recs[-1]
    assert last["loss_pair"] < first["loss_pair"]
    assert first["loss_text"] == pytest.approx(math.log(tr.model.cfg.vocab), rel=0.05)


def test_zoom_training_is_deterministic(small_setup):
    a = _trainer(small_setup, zoom_prob=0.5, steps=5).run()
    b = _trainer(small_setup, zoom_prob=0.5, steps=5).run()
    assert a == b


def test_metrics_lines_and_nan_dump(small_setup, tmp_path):
    tr = _trainer(small_setup, steps=4)
    buf = io.StringIO()
    tr.run(until=2, metrics=buf)
    lines = [json.loads(x) for x in buf.getvalue().splitlines()]
    assert [set(r) for r in lines] == [{"step", "lr", "loss_pair", "loss_text"}] * 2
    tr.model["embed.token"].data[:] = np.nan
    with pytest.raises(NumericalError):
        tr.run(dump_path=tmp_path / "dump.json")
    dump = json.loads((tmp_path / "dump.json").read_text())
    assert dump["step"] == 2 and len(dump["pairs"]) == 4 and len(dump["docs"]) == 2


def test_cannot_run_past_schedule(small_setup):
    with pytest.raises(ValueError):
        _trainer(small_setup, steps=3).run(until=5)


def test_multires_batches(small_setup):
    with pytest.raises(ConfigError):
        TrainConfig(multires_sizes=[10], multires_prob=0.5).validate(tiny_config())
    with pytest.raises(ConfigError):
        TrainConfig(multires_prob=0.5).validate(tiny_config())
    tr = _trainer(small_setup, multires_sizes=[12, 16], multires_prob=1.0, steps=4)
    sizes = {tr.examples(k)[0][0].image.shape[0] for k in range(4)}
    assert sizes <= {12, 16} and sizes
    a = tr.run()
    assert a == _trainer(small_setup, multires_sizes=[12, 16], multires_prob=1.0, steps=4).run()
    assert all(np.isfinite(r["loss_pair"]) for r in a)


def test_span_objective_handles_short_texts(small_setup):
    tr = _trainer(small_setup, objective="span", steps=2)
    tr.data.doc_ids[: len(tr.data.doc_ids)] = [[7, EOS], [7, 8, 9, EOS]] * (len(tr.data.doc_ids) // 2)
    _, docs = tr.examples(0)
    assert all(len(d.target) >= 3 for d in docs)  # sentinel, hidden token(s), EOS
