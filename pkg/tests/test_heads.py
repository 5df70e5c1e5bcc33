import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from cinema import backbone, heads, unet
from cinema.backbone import MultiViewEncoder

from .conftest import tiny_config
from .gradcheck import directional_check


def test_gaussian_heatmap_values():
    m = heads.gaussian_heatmap((10.5, 20.5), (32, 32), (1.0, 1.0))
    assert m[10, 20] == 1.0
    assert m[13, 20] == pytest.approx(math.exp(-0.5))
    assert np.unravel_index(np.argmax(m), m.shape) == (10, 20)
    with pytest.raises(ValueError, match="outside"):
        heads.gaussian_heatmap((40.0, 5.0), (32, 32), (1.0, 1.0))


@settings(max_examples=30)
@given(st.integers(8, 20), st.integers(8, 20), st.integers(-4, 4), st.integers(-4, 4))
def test_gaussian_heatmap_translation_equivariant(i, j, di, dj):
    sp = (1.5, 2.0)
    at = lambda a, b: heads.gaussian_heatmap(((a + 0.5) * sp[0], (b + 0.5) * sp[1]), (32, 32), sp)  # noqa: E731
    shifted = np.roll(at(i, j), (di, dj), axis=(0, 1))
    np.testing.assert_allclose(at(i + di, j + dj)[6:26, 6:26], shifted[6:26, 6:26], atol=1e-12)


def test_wing_loss():
    z = torch.zeros(3)
    assert float(heads.wing(z, z)) == 0.0
    w, eps = 10.0, 2.0
    c = w - w * math.log1p(w / eps)
    left = w * math.log1p(w / eps)
    right = w - c
    assert left == pytest.approx(right, abs=1e-12)
    below = float(heads.wing(torch.tensor([w - 1e-9], dtype=torch.float64), torch.zeros(1, dtype=torch.float64)))
    above = float(heads.wing(torch.tensor([w + 1e-9], dtype=torch.float64), torch.zeros(1, dtype=torch.float64)))
    assert below == pytest.approx(above, abs=1e-7)


def test_dice_ce_limit():
    target = torch.randint(0, 4, (2, 8, 8))
    onehot = F.one_hot(target, 4).movedim(-1, 1).float()
    losses = [float(heads.dice_ce(onehot * m, target)) for m in (1.0, 10.0, 100.0)]
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-4


def test_dice_ce_class_permutation_invariant():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 4, 8, 8, generator=g)
    target = torch.randint(0, 4, (2, 8, 8), generator=g)
    perm = torch.tensor([2, 0, 3, 1])
    inv = torch.argsort(perm)
    a = heads.dice_ce(logits, target)
    b = heads.dice_ce(logits[:, perm], inv[target])
    assert torch.allclose(a, b, atol=1e-6)


def test_dice_ce_soft_targets_and_empty_foreground():
    logits = torch.full((1, 3, 8, 8), -40.0)
    soft = torch.zeros(1, 3, 8, 8)
    assert float(heads.dice_ce(logits, soft, activation="sigmoid")) < 1e-4
    with pytest.raises(ValueError):
        heads.dice_ce(logits, soft, activation="relu")


def test_label_smoothing():
    logits = torch.randn(5, 3)
    y = torch.tensor([0, 1, 2, 1, 0])
    assert torch.allclose(heads.ce_label_smooth(logits, y, eps=0.0), F.cross_entropy(logits, y))
    one = torch.randn(5, 1)
    yb = torch.tensor([1, 0, 1, 1, 0])
    assert torch.allclose(
        heads.ce_label_smooth(one, yb, eps=0.0), F.binary_cross_entropy_with_logits(one[:, 0], yb.float())
    )
    smooth = heads.ce_label_smooth(one, yb, eps=0.1)
    expected = F.binary_cross_entropy_with_logits(one[:, 0], yb.float() * 0.9 + 0.05)
    assert torch.allclose(smooth, expected)


def test_segmentation_head_shapes():
    cfg = tiny_config()
    for view, shape in (("sax", (32, 32, 2)), ("lax_2c", (32, 32))):
        model = heads.SegmentationModel(MultiViewEncoder(cfg), view)
        x = torch.rand((2, 1) + shape)
        logits = model(x)
        assert logits.shape == (2, 4) + shape
        labels = model.predict(x)
        assert labels.shape == (2,) + shape and set(labels.unique().tolist()) <= {0, 1, 2, 3}


def test_heads_reject_masked_inputs():
    cfg = tiny_config()
    enc = MultiViewEncoder(cfg)
    model = heads.SegmentationModel(enc, "lax_4c")
    pattern = backbone.sample_mask_pattern(cfg, 1, np.random.default_rng(0))
    with pytest.raises(ValueError, match="unmasked"):
        model(torch.rand(1, 1, 32, 32), pattern)
    lin = heads.LinearModel(enc, 1)
    with pytest.raises(ValueError):
        lin([{"lax_4c": torch.rand(1, 1, 32, 32)}], pattern)
    model(torch.rand(1, 1, 32, 32), backbone.empty_mask_pattern(cfg, 1))


def test_linear_head_zero_weights_constant():
    cfg = tiny_config()
    model = heads.LinearModel(MultiViewEncoder(cfg), 1, n_frames=2)
    nn_fc = model.head.fc
    with torch.no_grad():
        nn_fc.weight.zero_()
        nn_fc.bias.fill_(0.7)
    frames = [{"lax_4c": torch.rand(3, 1, 32, 32)} for _ in range(2)]
    out = model(frames)
    assert out.shape == (3, 1) and torch.allclose(out, torch.full((3, 1), 0.7))
    assert heads.LinearModel(MultiViewEncoder(cfg), 5).head.fc.out_features == 5
    with pytest.raises(ValueError):
        model(frames[:1])


def test_heatmap_and_coordinate_heads():
    cfg = tiny_config()
    hm = heads.HeatmapModel(MultiViewEncoder(cfg), "lax_2c")
    maps = hm.heatmaps(torch.rand(1, 1, 32, 32))
    assert maps.shape == (1, 3, 32, 32) and maps.min() >= 0 and maps.max() <= 1
    coord = heads.CoordinateModel(MultiViewEncoder(cfg))
    assert coord([{"lax_2c": torch.rand(2, 1, 32, 32)}]).shape == (2, 6)


def _f64(m):
    torch.manual_seed(0)
    return m.double()


def test_head_gradients_match_finite_differences():
    cfg = tiny_config()
    g = torch.Generator().manual_seed(1)
    sax = torch.rand(2, 1, 32, 32, 2, generator=g, dtype=torch.float64)
    lax = torch.rand(2, 1, 32, 32, generator=g, dtype=torch.float64)
    seg_target = torch.randint(0, 4, (2, 32, 32, 2), generator=g)
    hm_target = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 1])
    scalars = torch.rand(2, 1, generator=g, dtype=torch.float64)
    coords = torch.rand(2, 6, generator=g, dtype=torch.float64) * 30

    torch.manual_seed(0)
    seg = heads.SegmentationModel(MultiViewEncoder(cfg), "sax").double()
    assert directional_check(seg, lambda: heads.dice_ce(seg(sax), seg_target)) < 1e-4
    torch.manual_seed(0)
    hm = heads.HeatmapModel(MultiViewEncoder(cfg), "lax_4c").double()
    assert directional_check(hm, lambda: heads.dice_ce(hm(lax), hm_target, activation="sigmoid")) < 1e-4
    torch.manual_seed(0)
    cls = heads.LinearModel(MultiViewEncoder(cfg), 1).double()
    frame = [{"sax": sax, "lax_4c": lax}]
    assert directional_check(cls, lambda: heads.ce_label_smooth(cls(frame), labels)) < 1e-4
    torch.manual_seed(0)
    multi = heads.LinearModel(MultiViewEncoder(cfg), 3).double()
    assert directional_check(multi, lambda: heads.ce_label_smooth(multi(frame), torch.tensor([2, 0]))) < 1e-4
    torch.manual_seed(0)
    reg = heads.LinearModel(MultiViewEncoder(cfg), 1, n_frames=2).double()
    assert directional_check(reg, lambda: heads.mse(reg(frame * 2), scalars)) < 1e-4
    torch.manual_seed(0)
    co = heads.CoordinateModel(MultiViewEncoder(cfg)).double()
    # large eps keeps every residual away from the |x| = w kink
    assert directional_check(co, lambda: heads.wing(co([{"lax_4c": lax}]), coords)) < 1e-4


@pytest.mark.parametrize("volume", [False, True])
def test_unet_shapes_and_gradients(volume):
    shape = (16, 16, 3) if volume else (16, 16)
    torch.manual_seed(0)
    model = unet.UNetModel("sax" if volume else "lax_4c", 4, volume, widths=(4, 8)).double()
    x = torch.rand((2, 1) + shape, dtype=torch.float64)
    assert model(x).shape == (2, 4) + shape
    target = torch.randint(0, 4, (2,) + shape)
    assert directional_check(model, lambda: heads.dice_ce(model(x), target)) < 1e-4


def test_unet_widths_and_divisibility():
    assert unet.UNET_WIDTHS == (32, 64, 128, 256, 512)
    full = unet.ResidualUNet(1, 4, 2)
    assert [b.body[0].out_channels for b in [full.stem] + [d[1] for d in full.down]] == list(unet.UNET_WIDTHS)
    with pytest.raises(ValueError, match="divisible"):
        full(torch.rand(1, 1, 24, 24))
