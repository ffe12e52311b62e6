import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from echolab import downstream as ds
from echolab import echodata as ed
from echolab.numerics import ContractError


def test_metrics_examples():
    m = ds.metrics([0, 10], [1, 9])
    # SS_res = 2, SS_tot = 50
    assert (m.mae, m.rmse, m.n) == (1.0, 1.0, 2)
    assert m.r2 == pytest.approx(0.96)
    y = np.array([3.0, 7.0, 1.0, 9.0])
    perfect = ds.metrics(y, y)
    assert (perfect.r2, perfect.mae, perfect.rmse) == (1.0, 0.0, 0.0)
    assert ds.metrics(y, np.full(4, y.mean())).r2 == pytest.approx(0.0, abs=1e-12)


def test_metrics_errors():
    with pytest.raises(ContractError):
        ds.metrics([1, 1, 1], [1, 2, 3])
    with pytest.raises(ContractError):
        ds.metrics([1], [1])
    with pytest.raises(ContractError):
        ds.metrics([1, 2], [1, 2, 3])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(0, 100)), arrays(np.float64, 8, elements=st.floats(0, 100)))
def test_metrics_invariants(y, y_hat):
    if np.ptp(y) < 1e-6:
        return
    m = ds.metrics(y, y_hat)
    assert m.rmse >= m.mae - 1e-12 >= -1e-12
    assert m.r2 <= 1.0


def test_r2_decreases_with_noise():
    rng = np.random.default_rng(0)
    y = rng.uniform(10, 90, 200)
    z = rng.standard_normal(200)
    r2 = [ds.metrics(y, y + s * z).r2 for s in (0.5, 1, 2, 4, 8)]
    assert all(a > b for a, b in zip(r2, r2[1:]))


class Stub(torch.nn.Module):
    """Predicts a fixed value per video, keyed by the first pixel."""

    def __init__(self, table):
        super().__init__()
        self.table = table

    def forward(self, v):
        return torch.tensor([self.table[round(float(x[0, 0, 0]) * 1000)] for x in v]) / 100.0


def _videos(efs):
    out = []
    for i, ef in enumerate(efs):
        frames = np.zeros((4, 8, 8), np.float32)
        frames[0, 0, 0] = i / 1000
        out.append(ed.VideoSample(frames, ef, 0, np.zeros((8, 8), np.uint8), i, {}))
    return out


def test_relabel_perfect_stub_and_idempotent():
    vids = _videos([12.5, 40.0, 77.25])
    stub = Stub({0: 12.5, 1: 40.0, 2: 77.25})
    once = ds.relabel(vids, stub)
    assert [v.ef for v in once] == pytest.approx([12.5, 40.0, 77.25], abs=1e-5)
    twice = ds.relabel(once, stub)
    assert [v.ef for v in twice] == [v.ef for v in once]
    assert ds.relabel([], stub) == []


def test_relabel_clamps():
    vids = _videos([50.0, 50.0])
    out = ds.relabel(vids, Stub({0: -20.0, 1: 140.0}))
    assert out[0].ef == 0.0
    assert out[1].ef < 100.0 and out[1].ef == pytest.approx(100.0)


def test_regressor_shapes_and_determinism():
    torch.manual_seed(0)
    model = ds.EfRegressor(frames=4, width=16, image_size=16).eval()
    x = torch.rand(3, 4, 16, 16)
    with torch.no_grad():
        a, b = model(x), model(x)
    assert a.shape == (3,) and torch.isfinite(a).all() and torch.equal(a, b)


def test_training_constant_target_and_seed():
    rng = np.random.default_rng(0)
    vids = rng.random((12, 4, 16, 16)).astype(np.float32)
    labels = np.full(12, 42.0)
    m1, trace = ds.train_regressor(vids, labels, ds.RegressorTrainConfig(epochs=15, batch=4, lr=3e-3))
    assert np.abs(ds.predict(m1, vids) - 42.0).mean() < 2.0
    assert trace[-1]["mse"] < trace[0]["mse"]
    m2, _ = ds.train_regressor(vids, labels, ds.RegressorTrainConfig(epochs=15, batch=4, lr=3e-3))
    for p, q in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p, q)
    with pytest.raises(ContractError):
        ds.train_regressor(vids[:0], labels[:0], ds.RegressorTrainConfig())


def test_frechet_examples():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(300, 3))
    assert ds.frechet_distance(a, a) == pytest.approx(0.0, abs=1e-4)
    b = rng.normal(size=(300, 3)) @ np.diag([1, 2, 0.5]) + 1.0
    assert ds.frechet_distance(a, b) == pytest.approx(ds.frechet_distance(b, a), abs=1e-4)
    # point masses: only the mean term survives
    p, q = np.zeros((10, 2)), np.tile([3.0, 4.0], (10, 1))
    assert ds.frechet_distance(p, q) == pytest.approx(25.0, abs=1e-6)


def test_frechet_gaussian_closed_form():
    # 1-d: (m1 - m2)^2 + (s1 - s2)^2
    rng = np.random.default_rng(2)
    a = rng.normal(0, 1, (200_000, 1))
    b = rng.normal(2, 3, (200_000, 1))
    assert ds.frechet_distance(a, b) == pytest.approx(4 + 4, rel=0.01)


def test_frechet_half_closer_than_shift():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(400, 4))
    half = a[rng.permutation(400)[:200]]
    assert ds.frechet_distance(a, half) < ds.frechet_distance(a, a + 0.5)


def test_sym_sqrt_rejects_indefinite():
    with pytest.raises(ds.NumericalError):
        ds._sym_sqrt(np.diag([1.0, -1.0]), 1e-6)


def test_feature_frechet_needs_samples():
    from echolab.reid import ReIdEncoder

    enc = ReIdEncoder(width=8, dim=4).eval()
    x = np.random.default_rng(4).normal(size=(20, 2, 8, 8)).astype(np.float32)
    assert ds.feature_frechet(x, x, enc) == pytest.approx(0.0, abs=1e-4)
    with pytest.raises(ContractError):
        ds.feature_frechet(x[:4], x, enc)
