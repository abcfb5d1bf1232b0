import numpy as np
import pytest
import torch
from torch import nn

from derma.clsnet import ClsConfig, build_classifier
from derma.explain import (COLOR_RAMP, Heatmap, append_focus_rows, colorize, focus_score, grad_cam, overlay_panel,
                           render_overlay)
from derma.imageio import read_image
from toys import PlantedToy, left_half


def test_planted_toy_mass_in_active_half():
    x = torch.rand(1, 1, 16, 16) + 0.1
    h = grad_cam(PlantedToy(), (x,), target_class=0, layer="features")
    inside = h.values[left_half(16)].sum() / h.values.sum()
    assert inside >= 0.99
    assert focus_score(h, left_half(16)).mass_fraction == pytest.approx(inside)


def test_negative_weights_give_zero_heatmap():
    # class 1 has alpha_2 < 0 on a positive map and alpha_1 = 0
    h = grad_cam(PlantedToy(), (torch.rand(1, 1, 8, 8) + 0.1,), target_class=1, layer="features")
    assert not h.values.any() and not h.raw.any()


class OneChannel(nn.Module):
    def __init__(self):
        super().__init__()
        self.features = nn.Identity()

    def forward(self, x):
        return self.features(x).sum(dim=(1, 2, 3))[:, None]


def test_single_channel_unit_gradient_is_normalised_activation():
    x = torch.rand(1, 1, 6, 6)
    h = grad_cam(OneChannel(), (x,), layer="features")
    a = x[0, 0].double().numpy()
    np.testing.assert_allclose(h.values, (a - a.min()) / (a.max() - a.min()), atol=1e-7)


def test_constant_map_gives_zeros():
    h = grad_cam(OneChannel(), (torch.ones(1, 1, 4, 4),), layer="features")
    assert h.values.shape == (4, 4) and not h.values.any()


def _tiny_classifier(mode="dual_meta"):
    torch.manual_seed(0)
    cfg = ClsConfig(channels=8, heads=2, encoder_channels=(4,), grid_side=4, input_side=16, head_dims=(6,),
                    tab_hidden=(5, 6), tab_in_dim=4)
    return build_classifier(cfg, mode)


def _inputs():
    g = torch.Generator().manual_seed(1)
    return torch.randn(1, 3, 16, 16, generator=g), torch.randn(1, 3, 16, 16, generator=g), torch.rand(1, 4, generator=g)


def test_classifier_heatmap_contract():
    net = _tiny_classifier()
    net.train()
    before = {k: v.clone() for k, v in net.state_dict().items()}
    h = grad_cam(net, _inputs())
    assert h.layer == "encoder_orig.stages.1"
    assert h.values.shape == (16, 16) and h.values.min() >= 0 and h.values.max() <= 1
    assert (h.raw >= 0).all()
    assert net.training
    assert all(torch.equal(v, before[k]) for k, v in net.state_dict().items())
    assert all(p.grad is None for p in net.parameters())
    with torch.no_grad():
        net.eval()
        assert h.target_class == int(net(*_inputs()).argmax())


def test_single_branch_default_layer():
    h = grad_cam(_tiny_classifier("original"), _inputs())
    assert h.layer == "encoder.stages.1"


def test_invariant_to_positive_logit_scaling():
    net = _tiny_classifier()
    a = grad_cam(net, _inputs(), target_class=2)
    with torch.no_grad():
        last = net.head.net[-1]
        last.weight.mul_(3.5)
        last.bias.mul_(3.5)
    b = grad_cam(net, _inputs(), target_class=2)
    np.testing.assert_allclose(a.values, b.values, atol=1e-5)


def test_grad_cam_errors():
    net = _tiny_classifier()
    with pytest.raises(ValueError, match="spatial"):
        grad_cam(net, _inputs(), layer="fusion.norm1")
    with pytest.raises(ValueError, match="no layer"):
        grad_cam(net, _inputs(), layer="nope")
    with pytest.raises(ValueError, match="target class"):
        grad_cam(net, _inputs(), target_class=3)
    x = torch.randn(2, 3, 16, 16)
    with pytest.raises(ValueError, match="one sample"):
        grad_cam(net, (x, x, torch.rand(2, 4)))


def test_focus_examples():
    m = np.zeros((4, 4))
    m[:2] = 1
    s = focus_score(m.copy(), m)
    assert (s.mass_fraction, s.iou) == (1.0, 1.0)
    s = focus_score(1 - m, m)
    assert (s.mass_fraction, s.iou) == (0.0, 0.0)
    h = np.zeros((4, 4))
    h[1], h[2] = 0.5, 0.5
    assert focus_score(h, m).mass_fraction == 0.5
    assert focus_score(np.zeros((4, 4)), m).mass_fraction == 0.0
    with pytest.raises(ValueError):
        focus_score(np.zeros((3, 3)), m)


def test_colour_ramp_endpoints():
    out = colorize(np.array([[0.0, 1.0, 0.5]]))
    assert out[0, 0].tolist() == list(COLOR_RAMP[0][1])
    assert out[0, 1].tolist() == list(COLOR_RAMP[-1][1])
    assert out[0, 2].tolist() == list(COLOR_RAMP[2][1])


def test_zero_heatmap_overlay_is_dimmed_original():
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    panel = overlay_panel(img, np.zeros((5, 7)))
    assert panel.shape == (5, 21, 3)
    assert np.array_equal(panel[:, :7], img)
    assert np.array_equal(panel[:, 14:], np.round(img * 0.5).astype(np.uint8))
    with pytest.raises(ValueError):
        overlay_panel(img, np.zeros((5, 6)))


@pytest.mark.parametrize("suffix", [".png", ".ppm"])
def test_overlay_file_round_trip(tmp_path, suffix):
    img = np.random.default_rng(1).integers(0, 256, (6, 6, 3), dtype=np.uint8)
    heat = Heatmap(np.random.default_rng(2).random((6, 6)), "x", 0, np.zeros((2, 2)))
    panel = render_overlay(img, heat, tmp_path / f"p{suffix}")
    assert np.array_equal(read_image(tmp_path / f"p{suffix}"), panel)


def test_overlay_write_failure(tmp_path):
    with pytest.raises(OSError, match="could not write"):
        render_overlay(np.zeros((2, 2, 3), np.uint8), np.zeros((2, 2)), tmp_path / "missing" / "p.png")


def test_focus_csv_appends(tmp_path):
    path = tmp_path / "focus.csv"
    append_focus_rows(path, [("a", "dual", 0.25, 0.5)])
    append_focus_rows(path, [("b", "original", 1.0, 0.0)])
    assert path.read_text().splitlines() == ["sample,model,mass_fraction,iou", "a,dual,0.25,0.5",
                                              "b,original,1.0,0.0"]
