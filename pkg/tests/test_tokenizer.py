import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefixvlm.data import build_corpora, task_lines
from prefixvlm.tokenizer import BOS, EOS, MASK, N_SPECIAL, TokenizerError, Vocab, mask_tokens, train_bpe

CORPUS = ["a red square above a blue circle", "a green triangle", "the grid has four rows", "a yellow circle left of a red square"] * 5


@pytest.fixture(scope="module")
def vocab():
    return train_bpe(CORPUS + task_lines(), 80)


def test_specials_and_size(vocab):
    assert vocab.size == 80
    assert [vocab.piece(i) for i in range(N_SPECIAL)] == [b"<pad>", b"<bos>", b"<eos>", b"<mask>", b"<sep>"]


def test_roundtrip_and_merges_shorten(vocab):
    text = "a red square above a blue circle"
    ids = vocab.encode(text)
    assert vocab.decode(ids) == text
    assert len(ids) < len(text)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["a", "red", "square", "above", "circle", "rows", "what", "color?"]), min_size=1, max_size=12))
def test_roundtrip_property(vocab, words):
    text = " ".join(words)
    assert vocab.decode(vocab.encode(text)) == text


def test_bos_eos_and_truncation_keeps_eos(vocab):
    ids = vocab.encode("a red square above a blue circle", add_bos=True, add_eos=True, max_len=5)
    assert len(ids) == 5 and ids[0] == BOS and ids[-1] == EOS
    with pytest.raises(TokenizerError):
        vocab.encode("a red square above a blue circle", max_len=3, truncate=False)


def test_unencodable_byte_reports_offset(vocab):
    with pytest.raises(TokenizerError, match="offset 2"):
        vocab.encode("a é")


def test_decode_rejects_out_of_range(vocab):
    with pytest.raises(TokenizerError):
        vocab.decode([vocab.size])


def test_save_load_identical(vocab, tmp_path):
    vocab.save(tmp_path / "v.bpe")
    again = Vocab.load(tmp_path / "v.bpe")
    assert again.pieces == vocab.pieces and again.merges == vocab.merges
    assert (tmp_path / "v.bpe").read_bytes() == again.dumps().encode()


def test_training_deterministic_and_subsample_seeded():
    a = train_bpe(CORPUS, 60)
    b = train_bpe(list(CORPUS), 60)
    assert a.dumps() == b.dumps()
    c = train_bpe(CORPUS, 60, seed=3, max_lines=10)
    d = train_bpe(CORPUS, 60, seed=3, max_lines=10)
    assert c.dumps() == d.dumps()


def test_too_small_vocab_and_empty_corpus():
    with pytest.raises(TokenizerError):
        train_bpe(CORPUS, 10)
    with pytest.raises(TokenizerError):
        train_bpe([], 100)


def test_task_lines_encodable():
    c = build_corpora(50, 20, seed=0, n_eval=5)
    v = train_bpe([p.caption for p in c.pairs] + c.docs + task_lines(), 96)
    for line in task_lines():
        assert v.decode(v.encode(line)) == line


def test_mask_tokens_rate_and_specials():
    rng = np.random.default_rng(0)
    ids = np.array([BOS] + list(range(N_SPECIAL, N_SPECIAL + 50)) + [EOS])
    hits = 0
    for _ in range(400):
        corrupted, targets = mask_tokens(ids, 0.15, rng)
        assert corrupted[0] == BOS and corrupted[-1] == EOS
        assert all(corrupted[k] == MASK and ids[k] == v for k, v in targets.items())
        hits += len(targets)
    assert abs(hits / (400 * 50) - 0.15) < 0.01
