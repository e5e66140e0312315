import itertools

import numpy as np
import pytest

from prefixvlm import inference as I
from prefixvlm.data import PairRecord, build_paired, build_vqa
from prefixvlm.model import ConfigError, VLModel
from prefixvlm.tokenizer import EOS, train_bpe
from prefixvlm.training import model_checkpoint, model_from_checkpoint

from conftest import tiny_config


def _model(variant, seed=0, vocab=12, **kw):
    return VLModel(tiny_config(variant=variant, vocab=vocab, dtype="f64", zero_init_output=False, init_std=0.5, **kw), seed=seed)


@pytest.mark.parametrize("variant", ["encoder_decoder", "decoder_only"])
def test_beam_width_one_equals_greedy(variant, rng):
    m = _model(variant)
    img = rng.random((8, 8, 3))
    g = I.greedy_decode(m, img[None], max_len=5, eos_id=None)[0]
    b = I.beam_search(m, img, k=1, max_len=5, alpha=0.0, eos_id=None)
    assert b.tokens == g.tokens
    assert b.logp == pytest.approx(g.logp, abs=1e-10)


@pytest.mark.parametrize("variant", ["encoder_decoder", "decoder_only"])
def test_full_width_beam_is_exhaustive(variant, rng):
    m = _model(variant, vocab=4, seed=3)
    img = rng.random((8, 8, 3))
    best = max(itertools.product(range(4), repeat=3), key=lambda s: I.sequence_logprob(m, img, s))
    b = I.beam_search(m, img, k=64, max_len=3, alpha=0.0, eos_id=None)
    assert tuple(b.tokens) == best


@pytest.mark.parametrize("variant", ["encoder_decoder", "decoder_only"])
def test_decode_scores_match_teacher_forcing(variant, rng):
    m = _model(variant)
    img = rng.random((2, 8, 8, 3))
    for i, h in enumerate(I.greedy_decode(m, img, prompt_ids=[7], max_len=4, eos_id=None)):
        assert h.logp == pytest.approx(I.sequence_logprob(m, img[i], h.tokens, prompt_ids=[7]), abs=1e-9)


def test_text_source_decoding_consistent(rng):
    m = _model("decoder_only")
    h = I.greedy_decode(m, None, max_len=3, sources=[[6, 7], [8]], eos_id=None)
    for src, hyp in zip([[6, 7], [8]], h):
        assert hyp.logp == pytest.approx(I.sequence_logprob(m, None, hyp.tokens, source=src), abs=1e-9)


def test_beam_scores_monotone_in_width(rng):
    m = _model("encoder_decoder", seed=5)
    img = rng.random((8, 8, 3))
    scores = [I.beam_search(m, img, k=k, max_len=3, alpha=0.0, eos_id=None).logp for k in (1, 4, 1000)]
    assert scores[0] <= scores[1] + 1e-12 <= scores[2] + 2e-12


def test_prompt_too_long_rejected(rng):
    m = _model("encoder_decoder")
    with pytest.raises(ValueError):
        I.greedy_decode(m, rng.random((1, 8, 8, 3)), prompt_ids=[5] * 5, max_len=10)


def test_strip_and_token_accuracy():
    assert I.strip_generation([6, 1, 7, 40, EOS, 9], 20) == [6, 7]
    assert I.token_accuracy([5, 6], [5, 6]) == 1.0
    assert I.token_accuracy([5, 7, 8], [5, 6]) == pytest.approx(1 / 3)
    assert I.token_accuracy([], []) == 1.0


def test_adapt_same_size_is_identity():
    m = VLModel(tiny_config(), seed=0)
    ck = model_checkpoint(m)
    ad = I.adapt_resolution(ck, [8, 8])
    assert ad.meta == ck.meta
    assert all(ad.tensors[k].tobytes() == v.tobytes() for k, v in ck.tensors.items())


def test_adapt_larger_grid_shapes_and_bias(rng):
    m = VLModel(tiny_config(image_size=[8, 8]), seed=0)
    m["relbias.table"].data[:] = rng.standard_normal(m["relbias.table"].shape)
    ad = I.adapt_resolution(model_checkpoint(m), [16, 16])
    m2 = model_from_checkpoint(ad)
    assert m2["embed.pos_image"].shape == (16, 16)
    assert m2["relbias.table"].shape == (2, 49)
    # the 2x2 source table has deltas in [-1, 1]; those map through unchanged
    old = m["relbias.table"].data.reshape(2, 3, 3)
    new = m2["relbias.table"].data.reshape(2, 7, 7)
    np.testing.assert_array_equal(new[:, 2:5, 2:5], old)
    np.testing.assert_array_equal(new[:, 0, 0], old[:, 0, 0])  # clamped corner
    with pytest.raises(ConfigError):
        I.adapt_resolution(model_checkpoint(m), [10, 8])


def test_adapt_drops_optimizer_state():
    m = VLModel(tiny_config(), seed=0)
    ck = model_checkpoint(m)
    ck.tensors["optim.m.embed.token"] = np.zeros_like(m["embed.token"].data)
    ck.meta["step"] = 9
    ad = I.adapt_resolution(ck, [16, 8])
    assert not any(k.startswith("optim.") for k in ad.tensors) and "step" not in ad.meta
    assert ad.meta["adapted_from"] == [8, 8]


def test_partial_train_split():
    ex = build_vqa(200, seed=0, hw=8, grid=2)
    train, seen, unseen = I.partial_train_split(ex, seed=1)
    answers = sorted({e.answer for e in ex})
    assert sorted(seen + unseen) == answers
    assert len(seen) == round(2 / 3 * len(answers))
    assert all(e.answer in seen for e in train)


def test_task_head_validation():
    with pytest.raises(ConfigError):
        I.TaskHead("bogus", ["a", "b"])
    with pytest.raises(ConfigError):
        I.TaskHead("classify", ["a"])
    with pytest.raises(ValueError):
        I.TaskHead("classify", ["a", "b"]).label("c")


@pytest.fixture(scope="module")
def qa_vocab():
    from prefixvlm.data import task_lines

    return train_bpe(task_lines(), 60)


def test_finetune_classify_fits_small_set(qa_vocab):
    ex = build_vqa(24, seed=0, hw=8, grid=2)
    m = VLModel(tiny_config(vocab=qa_vocab.size), seed=0)
    head = I.TaskHead("classify", sorted({e.answer for e in ex}))
    losses = I.finetune_classify(m, head, ex, qa_vocab, I.FinetuneConfig(steps=60, batch=8, peak_lr=3e-3))
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    preds = I.predict_classes(m, head, ex, qa_vocab)
    assert set(preds) <= set(head.classes) and len(preds) == len(ex)


@pytest.mark.parametrize("variant", ["encoder_decoder", "decoder_only"])
def test_paired_head_uses_both_images(variant, qa_vocab):
    ex = build_paired(6, seed=0, hw=8, grid=2)
    m = VLModel(tiny_config(variant=variant, vocab=qa_vocab.size, max_text_len=32, zero_init_output=False), seed=0)
    head = I.TaskHead("classify_paired", ["false", "true"], name="paired")
    m.add_head("paired", 2, 2)
    a = I.classify_logits(m, head, ex, qa_vocab).data
    swapped = [type(e)(e.image2, e.question, e.answer, e.spec, e.image) for e in ex]
    b = I.classify_logits(m, head, swapped, qa_vocab).data
    assert not np.allclose(a, b)


def test_generative_vqa_runs(qa_vocab):
    ex = build_vqa(6, seed=0, hw=8, grid=2)
    m = VLModel(tiny_config(vocab=qa_vocab.size), seed=0)
    I.finetune_generative(m, ex, qa_vocab, I.FinetuneConfig(steps=3, batch=4))
    out = I.generative_vqa(m, ex, qa_vocab)
    assert len(out) == 6 and all(isinstance(s, str) for s in out)
    with pytest.raises(ConfigError):
        I.finetune_generative(VLModel(tiny_config(variant="decoder_only", vocab=qa_vocab.size)), ex, qa_vocab, I.FinetuneConfig(steps=1))


def test_caption_report_rows(rng, tmp_path):
    vocab = train_bpe(["a red square", "a blue circle"], 40)
    m = VLModel(tiny_config(vocab=vocab.size), seed=0)
    recs = [PairRecord(rng.random((8, 8, 3)).astype(np.float32), "a red square", None, f"img{i}") for i in range(3)]
    rep, rows = I.caption_report(m, recs, vocab)
    assert rep["n"] == 3 and 0.0 <= rep["exact_match"] <= 1.0
    assert [set(r) for r in rows] == [{"id", "prediction", "score"}] * 3
    I.write_predictions(tmp_path / "p.jsonl", rows)
    assert len((tmp_path / "p.jsonl").read_text().splitlines()) == 3
    assert I.caption_report(m, [], vocab)[0]["exact_match"] is None
    assert isinstance(I.validation_loss(m, recs, vocab), float)
