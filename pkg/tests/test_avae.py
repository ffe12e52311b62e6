import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from echolab import avae as av
from echolab import echodata as ed
from echolab.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from echolab.numerics import ContractError, backward

SMALL = av.AvaeArgs(image_size=16, latent_channels=2, compression=4, width=16)


@pytest.fixture
def model():
    torch.manual_seed(0)
    return av.Avae(SMALL)


def test_zero_noise_gives_mean(model):
    code = av.encode(model, torch.rand(3, 16, 16))
    assert torch.equal(av.reparameterize(code, torch.zeros_like(code.mu)), code.mu)


def test_roundtrip_shape(model):
    x = torch.rand(5, 16, 16)
    code = av.encode(model, x)
    assert code.mu.shape == (5, 2, 4, 4)
    assert (code.sigma > 0).all()
    out = av.decode(model, code.mu)
    assert out.shape == (5, 1, 16, 16)
    assert out.min() >= 0 and out.max() <= 1


def test_independent_noise(model):
    x = torch.rand(2, 16, 16)
    c1, c2 = av.encode(model, x), av.encode(model, x)
    z1 = av.reparameterize(c1, torch.randn_like(c1.mu))
    z2 = av.reparameterize(c2, torch.randn_like(c2.mu))
    assert torch.equal(c1.mu, c2.mu) and torch.equal(c1.sigma, c2.sigma)
    assert not torch.equal(z1, z2)


def test_shape_errors(model):
    with pytest.raises(ContractError):
        av.encode(model, torch.rand(2, 8, 8))
    with pytest.raises(ContractError):
        av.decode(model, torch.rand(2, 3, 4, 4))


def test_kl_examples():
    assert av.kl_term(torch.zeros(4, 2, 3, 3), torch.ones(4, 2, 3, 3)).item() == 0.0
    # -1/2 (1 + log 1 - 1 - 1) = 1/2
    assert av.kl_term(torch.ones(1, 1), torch.ones(1, 1)).item() == pytest.approx(0.5, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(0.05, 4.0))
def test_kl_nonnegative(mu, sigma):
    val = av.kl_term(torch.tensor([[mu]], dtype=torch.float64), torch.tensor([[sigma]], dtype=torch.float64)).item()
    closed = 0.5 * (mu ** 2 + sigma ** 2 - 1 - 2 * math.log(sigma))
    assert val == pytest.approx(closed, abs=1e-9)
    assert val >= -1e-12


def test_rec_is_per_image_sse(model):
    x = torch.rand(2, 16, 16)
    eps = torch.zeros(2, 2, 4, 4)
    losses = av.avae_losses(model, x, eps, lam=0.0, gamma=0.0, adv_enabled=False)
    assert losses.total.item() == pytest.approx(losses.rec.item())
    assert losses.rec.item() == pytest.approx(
        float(((av.decode(model, av.encode(model, x).mu)[:, 0] - x) ** 2).sum(dim=(1, 2)).mean()), rel=1e-5)
    with pytest.raises(ContractError):
        av.avae_losses(model, x, eps, lam=-1.0)


def test_total_combines_terms(model):
    x = torch.rand(3, 16, 16)
    eps = torch.randn(3, 2, 4, 4)
    l = av.avae_losses(model, x, eps, lam=0.1, gamma=0.01, adv_enabled=True)
    assert l.total.item() == pytest.approx(l.rec.item() + 0.1 * l.adv.item() + 0.01 * l.kl.item(), rel=1e-5)
    assert l.disc.item() > 0


def test_adversarial_isolation(model):
    x = torch.rand(3, 16, 16)
    eps = torch.randn(3, 2, 4, 4)
    off = av.avae_losses(model, x, eps, adv_enabled=False)
    grads = backward(off.total, model.disc_parameters())
    assert all(float(g.abs().max()) == 0.0 for g in grads.values())
    on = av.avae_losses(model, x, eps, adv_enabled=True)
    # the discriminator loss sees detached reconstructions: no gradient to the VAE
    vae_grads = backward(on.disc, model.vae_parameters())
    assert all(float(g.abs().max()) == 0.0 for g in vae_grads.values())


def test_divergence_reported(model):
    x = torch.rand(2, 16, 16)
    with pytest.raises(av.TrainingDivergence) as err:
        av.avae_losses(model, x, torch.full((2, 2, 4, 4), float("nan")))
    assert err.value.term in {"rec", "kl", "adv", "disc"}


def test_training_reduces_reconstruction_error():
    cfg = ed.ToyConfig(size=16, frames=4, n_train=24, n_val=1, n_test=1, d_ed=(2.5, 3.0), d_es=(1.2, 2.4),
                       px_per_cm=3.0, seed=3)
    frames = np.concatenate([s.frames for s in ed.generate_split(cfg, "train")])
    torch.manual_seed(0)
    model = av.Avae(SMALL)
    before = av.reconstruction_mse(model, frames)
    # two epochs over 96 frames at batch 16
    av.train_avae(model, frames, av.AvaeTrainConfig(steps=12, batch=16, lr=3e-3, seed=0))
    assert av.reconstruction_mse(model, frames) < before


def test_latent_stats_roundtrip():
    rng = np.random.default_rng(0)
    z = rng.normal([[[[3.0]], [[-1.0]]]], [[[[2.0]], [[0.5]]]], size=(50, 2, 4, 4))
    stats = av.latent_stats_from(z)
    zn = av.normalize(z, stats)
    assert np.allclose(zn.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    assert np.allclose(zn.std(axis=(0, 2, 3)), 1, atol=1e-4)
    assert np.allclose(av.normalize(av.denormalize(zn, stats), stats), zn, atol=1e-6)
    again = av.latent_stats_from(zn)
    assert np.allclose(again.mean, 0, atol=1e-4) and np.allclose(again.std, 1, atol=1e-4)
    t = torch.from_numpy(zn)
    assert torch.allclose(av.denormalize(t, stats), torch.from_numpy(z), atol=1e-6)


def test_degenerate_channel():
    z = np.random.default_rng(0).normal(size=(10, 2, 3, 3))
    z[:, 1] = 4.0
    with pytest.raises(av.DegenerateChannelError):
        av.latent_stats_from(z)


def test_entropy_unit_gaussian():
    x = np.random.default_rng(0).standard_normal((200_000, 1))
    assert av.latent_entropy_gaussian(x).nats == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=5e-3)


def test_entropy_scaling_law():
    x = np.random.default_rng(1).standard_normal((500, 3)) @ np.array([[1, 0.2, 0], [0, 1, 0.3], [0, 0, 2.0]])
    h1 = av.latent_entropy_gaussian(x).nats
    h2 = av.latent_entropy_gaussian(2 * x).nats
    assert h2 - h1 == pytest.approx(3 * math.log(2), abs=1e-9)


def test_entropy_flags_singular_and_undersampled():
    x = np.random.default_rng(2).standard_normal((100, 1))
    res = av.latent_entropy_gaussian(np.hstack([x, x]))
    assert res.warnings
    few = av.latent_entropy_gaussian(np.random.default_rng(3).standard_normal((3, 5)))
    assert any("samples" in w for w in few.warnings)


def test_checkpoint_roundtrip(tmp_path, model):
    stats = av.LatentStats(np.array([0.1, 0.2]), np.array([1.5, 2.5]))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "avae", model, args={"width": 16}, config_hash="abc", extra={"stats": stats.to_dict()})
    fresh = av.Avae(SMALL)
    header = load_checkpoint(path, fresh, "avae")
    for a, b in zip(model.parameters(), fresh.parameters()):
        assert torch.equal(a, b)
    assert header["config_hash"] == "abc"
    assert av.LatentStats.from_dict(header["extra"]["stats"]).std.tolist() == [1.5, 2.5]
    assert read_header(path)["kind"] == "avae"


def test_checkpoint_rejects_mismatched_manifest(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "avae", model, args={}, config_hash="x")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, av.Avae(av.AvaeArgs(image_size=16, width=32)), "avae")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, av.Avae(SMALL), "reid")
    data = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt", av.Avae(SMALL), "avae")
