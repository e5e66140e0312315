import numpy as np
import pytest

from prefixvlm import data as D


def test_render_scene_colors_and_background():
    spec = D.SceneSpec((D.SceneObject("square", "red", (0, 0)),), 4)
    img = D.render_scene(spec, 32)
    assert img.shape == (32, 32, 3) and img.dtype == np.float32
    assert np.allclose(img[4, 4], D.RGB["red"])
    assert np.allclose(img[20, 20], 1.0)


@pytest.mark.parametrize(
    "objs, relation",
    [
        ((D.SceneObject("square", "red", (0, 0)), D.SceneObject("circle", "blue", (0, 0))), "above"),
        ((D.SceneObject("square", "red", (1, 0)), D.SceneObject("circle", "blue", (0, 0))), "above"),
        ((D.SceneObject("square", "red", (0, 0)), D.SceneObject("circle", "blue", (1, 1))), "left of"),
        ((D.SceneObject("hexagon", "red", (0, 0)),), None),
        ((D.SceneObject("square", "red", (4, 0)),), None),
    ],
)
def test_invalid_scenes_rejected(objs, relation):
    with pytest.raises(D.DataError):
        D.render_scene(D.SceneSpec(objs, 4, relation))


def test_caption_parse_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(200):
        spec = D.sample_scene(rng, D.all_combos())
        objs, rel = D.parse_caption(D.clean_caption(spec))
        assert objs == tuple(o.combo for o in spec.objects) and rel == spec.relation
    assert D.parse_caption("A picture of a red square.")[0] == (("red", "square"),)
    with pytest.raises(D.DataError):
        D.parse_caption("a purple square")


def test_noise_frequency_monte_carlo():
    spec = D.SceneSpec((D.SceneObject("square", "red", (0, 1)), D.SceneObject("circle", "blue", (1, 1))), 4, "above")
    clean = D.clean_caption(spec)
    rng = np.random.default_rng(5)
    n = 20000
    changed = sum(D.caption_scene(spec, rng, 0.1) != clean for _ in range(n))
    # each corruption changes the caption; binomial sd is about 0.002
    assert abs(changed / n - 0.1) < 0.01
    assert D.caption_scene(spec, rng, 0.0) == clean


def test_exact_match_normalization():
    assert D.exact_match("A Red  square.", "a red square") == 1
    assert D.exact_match("a red circle", "a red square") == 0


def test_corpora_deterministic_and_leak_free():
    a = D.build_corpora(300, 50, seed=3, n_eval=20)
    b = D.build_corpora(300, 50, seed=3, n_eval=20)
    assert a.fingerprint() == b.fingerprint()
    assert D.leakage_scan(a) == []
    hold = set(D.DEFAULT_HOLDOUT)
    assert all(r.spec.combos() <= hold for r in a.eval_splits["compositional"])
    assert not any(r.spec.combos() & hold for r in a.eval_splits["heldin"])
    assert D.build_corpora(300, 50, seed=4, n_eval=20).fingerprint() != a.fingerprint()


def test_zero_pairs_is_valid():
    c = D.build_corpora(0, 10, seed=0, n_eval=3)
    assert c.pairs == [] and len(c.docs) == 10


def test_bad_holdout():
    with pytest.raises(D.DataError):
        D.build_corpora(10, 10, holdout=[("purple", "square")])


def test_write_load_roundtrip(tmp_path):
    c = D.build_corpora(12, 5, seed=1, n_eval=4)
    report = D.write_corpora(c, tmp_path)
    assert report["leakage_violations"] == 0 and report["n_pairs"] == 12
    back = D.load_corpora(tmp_path)
    assert [r.caption for r in back.pairs] == [r.caption for r in c.pairs]
    assert back.docs == c.docs
    assert {k: len(v) for k, v in back.eval_splits.items()} == {"heldin": 4, "compositional": 4}
    # 8-bit PPM quantization is within half a level
    assert np.abs(back.pairs[0].image - c.pairs[0].image).max() <= 0.5 / 255 + 1e-6


def test_mix_batches_counts_and_epoch_coverage():
    it = D.mix_batches(10, 3, 4, 1, seed=0)
    batches = [next(it) for _ in range(5)]
    assert all(len(b.pairs) == 4 and len(b.docs) == 1 for b in batches)
    # the first 10 pair draws form one full permutation
    flat = [i for b in batches for i in b.pairs][:8] + batches[2].pairs[:2]
    assert sorted(flat) == list(range(10))
    resumed = next(D.mix_batches(10, 3, 4, 1, seed=0, start=3))
    assert resumed == batches[3]


def test_mix_batches_errors():
    with pytest.raises(D.DataError):
        next(D.mix_batches(0, 3, 4, 1, seed=0))
    with pytest.raises(D.DataError):
        next(D.mix_batches(3, 3, 0, 0, seed=0))
    assert next(D.mix_batches(0, 3, 0, 2, seed=0)).pairs == []


def test_content_box_covers_objects():
    spec = D.SceneSpec((D.SceneObject("square", "red", (1, 2)), D.SceneObject("circle", "blue", (1, 3))), 4, "left of")
    assert D.content_box(spec, 32) == (8, 16, 16, 32)
    img = D.render_scene(spec, 32)
    outside = np.ones_like(img, bool)
    outside[8:16, 16:32] = False
    assert np.all(img[outside] == 1.0)
    assert D.content_box(D.SceneSpec((), 4), 32) == (0, 0, 32, 32)


def test_vqa_answers_consistent_with_scene():
    for ex in D.build_vqa(200, seed=0):
        colors = [o.color for o in ex.spec.objects]
        shapes = [o.shape for o in ex.spec.objects]
        if ex.question.startswith("what color is the "):
            shape = ex.question[len("what color is the ") : -1]
            assert ex.answer == colors[shapes.index(shape)]
        elif ex.question.startswith("what shape is the "):
            color = ex.question.split()[4]
            assert ex.answer == shapes[colors.index(color)]
        else:
            color = ex.question.split()[3]
            assert ex.answer == ("yes" if color in colors else "no")
        assert ex.question in D.task_lines() and ex.answer in D.task_lines()


def test_paired_labels_balanced():
    ex = D.build_paired(400, seed=0)
    frac = np.mean([e.answer == "true" for e in ex])
    assert 0.5 < frac < 0.7  # half forced equal plus a quarter of the rest
    for e in ex:
        assert e.image2 is not None and e.image2.shape == e.image.shape
        c1 = e.spec.objects[0].color
        has_c1 = np.all(np.isclose(e.image2, D.RGB[c1]), axis=-1).any()
        assert has_c1 == (e.answer == "true")
