import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from echolab import flowmatch as fm
from echolab.numerics import ConfigError, ContractError


def test_interpolation_endpoints():
    x0, x1 = torch.randn(3, 2, 4, 4), torch.randn(3, 2, 4, 4)
    assert torch.equal(fm.interpolate(x0, x1, 0.0), x0)
    assert torch.equal(fm.interpolate(x0, x1, 1.0), x1)
    assert torch.allclose(fm.interpolate(x0, x1, 0.5), (x0 + x1) / 2)


def test_per_sample_time():
    x0, x1 = torch.zeros(2, 3), torch.ones(2, 3)
    out = fm.interpolate(x0, x1, torch.tensor([0.25, 0.75]))
    assert out[:, 0].tolist() == [0.25, 0.75]


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_path_velocity_is_constant(t, s):
    g = torch.Generator().manual_seed(0)
    x0, x1 = torch.randn(4, generator=g, dtype=torch.float64), torch.randn(4, generator=g, dtype=torch.float64)
    if abs(t - s) < 1e-3:
        return
    slope = (fm.interpolate(x0, x1, t) - fm.interpolate(x0, x1, s)) / (t - s)
    assert torch.allclose(slope, fm.velocity_target(x0, x1), atol=1e-9)


def test_path_errors():
    with pytest.raises(ContractError):
        fm.interpolate(torch.zeros(2), torch.zeros(3), 0.5)
    with pytest.raises(ContractError):
        fm.interpolate(torch.zeros(2), torch.zeros(2), 1.5)
    with pytest.raises(ContractError):
        fm.velocity_target(torch.zeros(2), torch.zeros(3))


class Oracle(torch.nn.Module):
    """Returns the exact straight-line velocity to a fixed data point."""

    fields = ()

    def __init__(self, target):
        super().__init__()
        self.target = target

    def forward(self, x, t, cond):
        return (x - self.target) / t.reshape(-1, *([1] * (x.dim() - 1))).clamp_min(1e-12)


def test_loss_zero_for_exact_velocity():
    x0, x1 = torch.randn(5, 3), torch.randn(5, 3)

    class Exact(torch.nn.Module):
        fields = ()

        def forward(self, x, t, cond):
            return x1 - x0
    assert fm.fm_loss(Exact(), x0, fm.ConditioningSet(ef=torch.zeros(5)), x1, torch.rand(5)).item() == 0.0


def test_loss_is_per_sample_sum():
    x0, x1 = torch.zeros(2, 3), torch.ones(2, 3)

    class Zero(torch.nn.Module):
        fields = ()

        def forward(self, x, t, cond):
            return torch.zeros_like(x)
    # each sample contributes 3 * 1^2
    assert fm.fm_loss(Zero(), x0, fm.ConditioningSet(ef=torch.zeros(2)), x1, torch.rand(2)).item() == 3.0


def test_loss_nan_raises():
    class Nan(torch.nn.Module):
        fields = ()

        def forward(self, x, t, cond):
            return torch.full_like(x, float("nan"))
    with pytest.raises(fm.DivergenceError):
        fm.fm_loss(Nan(), torch.zeros(1, 2), fm.ConditioningSet(ef=torch.zeros(1)), torch.ones(1, 2), torch.rand(1))


def test_euler_recovers_point_with_oracle():
    target = torch.tensor([[1.5, -0.5]])
    out = fm.sample_euler(Oracle(target), fm.SamplerSpec(steps=10, cfg_scale=1.0), fm.ConditioningSet(ef=torch.zeros(1)),
                          (1, 2))
    assert torch.allclose(out, target, atol=1e-5)


def test_euler_deterministic_and_seeded():
    net = fm.PointFlowNet()
    cond = fm.ConditioningSet(ef=torch.zeros(4))
    spec = fm.SamplerSpec(steps=5, cfg_scale=1.0, seed=3)
    a = fm.sample_euler(net, spec, cond, (4, 2))
    b = fm.sample_euler(net, spec, cond, (4, 2))
    c = fm.sample_euler(net, fm.SamplerSpec(steps=5, cfg_scale=1.0, seed=4), cond, (4, 2))
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_sampler_spec_validation():
    with pytest.raises(ValueError):
        fm.SamplerSpec(steps=0)
    with pytest.raises(ValueError):
        fm.SamplerSpec(cfg_scale=-1)
    with pytest.raises(ValueError):
        fm.SamplerSpec(negative="everything")


@pytest.fixture(scope="module")
def video_net():
    torch.manual_seed(0)
    return fm.VideoFlowNet(latent_size=4, frames=4, width=16, blocks=1).eval()


@pytest.fixture(scope="module")
def image_net():
    torch.manual_seed(0)
    return fm.ImageFlowNet(latent_size=4, width=16, blocks=1).eval()


def _video_cond(b=3):
    g = torch.Generator().manual_seed(1)
    return fm.ConditioningSet(anatomy=torch.randn(b, 2, 4, 4, generator=g), ef=torch.tensor([20.0, 50.0, 80.0])[:b])


def test_cfg_scale_one_and_zero(video_net):
    x = torch.randn(3, 4, 2, 4, 4)
    t = torch.full((3,), 0.5)
    cond = _video_cond()
    with torch.no_grad():
        v_cond = video_net(x, t, cond)
        v_none = video_net(x, t, cond.with_present(set()))
        assert torch.allclose(fm.cfg_velocity(video_net, x, t, cond, 1.0), v_cond)
        assert torch.allclose(fm.cfg_velocity(video_net, x, t, cond, 0.0), v_none)
        v2 = fm.cfg_velocity(video_net, x, t, cond, 2.0)
    assert torch.allclose(v2, v_none + 2 * (v_cond - v_none), atol=1e-5)


def test_cfg_negative_selector_keeps_field(video_net):
    x = torch.randn(3, 4, 2, 4, 4)
    t = torch.full((3,), 0.3)
    cond = _video_cond()
    with torch.no_grad():
        v_neg = fm.cfg_velocity(video_net, x, t, cond, 0.0, negative="anatomy-only")
        direct = video_net(x, t, fm.ConditioningSet(anatomy=cond.anatomy, ef=cond.ef,
                                                    present={"ef": torch.zeros(3, dtype=torch.bool)}))
    assert torch.allclose(v_neg, direct)


def test_selector_must_match_model(video_net, image_net):
    with pytest.raises(ConfigError):
        fm.negative_condition(video_net, _video_cond(), "mask-only")
    img_cond = fm.ConditioningSet(view=torch.zeros(2, dtype=torch.long), mask=torch.zeros(2, 1, 4, 4))
    with pytest.raises(ConfigError):
        fm.negative_condition(image_net, img_cond, "ef-only")
    assert fm.negative_condition(image_net, img_cond, "view-only").flag("mask").sum() == 0


def test_dropped_field_uses_null_embedding(video_net):
    x = torch.randn(2, 4, 2, 4, 4)
    t = torch.full((2,), 0.5)
    a = fm.ConditioningSet(anatomy=torch.randn(2, 2, 4, 4), ef=torch.tensor([30.0, 60.0]))
    b = fm.ConditioningSet(anatomy=torch.randn(2, 2, 4, 4), ef=torch.tensor([10.0, 90.0]))
    off = {k: torch.zeros(2, dtype=torch.bool) for k in ("anatomy", "ef")}
    with torch.no_grad():
        va = video_net(x, t, fm.ConditioningSet(a.view, a.mask, a.anatomy, a.ef, off))
        vb = video_net(x, t, fm.ConditioningSet(b.view, b.mask, b.anatomy, b.ef, off))
    # the values of dropped fields must not leak into the prediction
    assert torch.equal(va, vb)


def test_image_net_null_view(image_net):
    x = torch.randn(2, 2, 4, 4)
    t = torch.full((2,), 0.5)
    mask = torch.rand(2, 1, 4, 4)
    none = torch.zeros(2, dtype=torch.bool)
    with torch.no_grad():
        v0 = image_net(x, t, fm.ConditioningSet(view=torch.tensor([0, 1]), mask=mask, present={"view": none}))
        v1 = image_net(x, t, fm.ConditioningSet(view=torch.tensor([2, 2]), mask=mask, present={"view": none}))
    assert torch.equal(v0, v1)


def test_drop_mask_rates():
    g = torch.Generator().manual_seed(0)
    drop = fm.draw_drop_mask(("anatomy", "ef"), 200_000, fm.DropoutSchedule(0.1, 0.1), g)
    both = (drop["anatomy"] & drop["ef"]).float().mean().item()
    single = drop["ef"].float().mean().item()
    # P(field dropped) = 1 - 0.9 * 0.9; P(both) = 0.1 + 0.9 * 0.01
    assert single == pytest.approx(0.19, abs=0.005)
    assert both == pytest.approx(0.109, abs=0.005)


def test_animate_shape_and_ef_range(video_net):
    out = fm.animate(video_net, torch.randn(2, 2, 4, 4), torch.tensor([30.0, 70.0]), fm.SamplerSpec(steps=2))
    assert out.shape == (2, 4, 2, 4, 4)
    with pytest.raises(ContractError):
        fm.animate(video_net, torch.randn(1, 2, 4, 4), torch.tensor([120.0]), fm.SamplerSpec(steps=2))


def test_training_loss_decreases(video_net):
    torch.manual_seed(0)
    net = fm.VideoFlowNet(latent_size=4, frames=4, width=16, blocks=1)
    data = torch.randn(8, 4, 2, 4, 4)

    def draw(gen, n):
        i = torch.randint(0, 8, (n,), generator=gen)
        return data[i], fm.ConditioningSet(anatomy=data[i, 0], ef=torch.full((n,), 50.0))
    hist = fm.train_flow(net, draw, fm.FlowTrainConfig(steps=150, batch=8, lr=3e-3))
    assert hist[-1]["loss_ema"] < hist[0]["loss"]


def test_unnormalized_inputs_warn():
    with pytest.warns(UserWarning):
        fm.check_normalized(10 * torch.randn(16, 2, 4, 4), channel_dim=1)


def test_energy_distance_oracle():
    a = np.array([[0.0], [1.0]])
    b = np.array([[3.0]])
    # 2 * mean(3, 2) - mean(0, 1, 1, 0) - 0
    assert fm.energy_distance(a, b) == pytest.approx(4.5)
    assert fm.energy_distance(a, a) == pytest.approx(0.0)


def test_eight_gaussians_modes():
    x = fm.eight_gaussians(4000, np.random.default_rng(0), std=0.01)
    angles = np.round(np.arctan2(x[:, 1], x[:, 0]) / (np.pi / 4)) % 8
    assert set(angles.astype(int)) == set(range(8))
    assert np.allclose(np.linalg.norm(x, axis=1), 2.0, atol=0.05)
