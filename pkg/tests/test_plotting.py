import numpy as np
import pytest

from prefixvlm import plotting as PL
from prefixvlm.model import build_prefix_mask


def _recs(n=40):
    return [{"step": i, "lr": 1e-3 * min(1.0, i / 5), "loss_pair": 3.0 / (1 + i), "loss_text": None if i % 2 else 2.0} for i in range(n)]


def test_smooth_skips_missing():
    out = PL.smooth([1.0, None, 3.0, float("nan"), 5.0], 2)
    np.testing.assert_allclose(out, [1.0, 1.0, 3.0, 3.0, 5.0])
    assert PL.smooth([], 3).size == 0
    np.testing.assert_array_equal(PL.smooth([2.0, 4.0], 1), [2.0, 4.0])


@pytest.mark.parametrize("kind", ["curves", "lr", "ablation", "mask"])
def test_figures_written(kind, tmp_path):
    path = tmp_path / "sub" / f"{kind}.png"
    if kind == "curves":
        PL.plot_training_curves({"a": _recs(), "b": _recs(10)}, path, window=3)
    elif kind == "lr":
        PL.plot_lr(_recs(), path)
    elif kind == "ablation":
        PL.plot_ablation({"full": {"x": 0.9, "y": None}, "other": {"x": 0.5, "y": 0.2}}, ["x", "y"], path)
    else:
        PL.plot_mask(build_prefix_mask(6, 2), path, title="T_p = 2")
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_ascii_mask():
    assert PL.ascii_mask(build_prefix_mask(3, 0)) == "100\n110\n111"
    assert PL.ascii_mask(build_prefix_mask(2, 2)) == "11\n11"
