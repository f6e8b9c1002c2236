import json

import numpy as np
import pytest

from uodf.grid import Direction, GridSpec
from uodf.neural import (Mlp, MlpModel, RaySampler, TrainConfig, TrainingDiverged, encode_ray, forward_uodf,
                         load_checkpoint, loss_terms, predict_field, save_checkpoint, train_direction,
                         weighted_total)
from uodf.shapes import AnalyticSphere


def small_cfg(**kw):
    base = dict(width=16, uodf_layers=4, mask_layers=3, lattice=17, points_per_ray=8, epochs=1, batch=256)
    base.update(kw)
    return TrainConfig(**base)


def f64_model(direction="LR", **kw):
    return MlpModel.init(direction, small_cfg(**kw), dtype=np.float64)


# --- encoding ----------------------------------------------------------------

def test_encoding_origin():
    e = encode_ray(np.array([[0.0, 0.0]]))[0]
    assert e.shape == (42,)
    assert e[0] == 0 and e[1] == 0
    feats = e[2:].reshape(10, 4)
    assert (feats[:, [0, 2]] == 0).all() and (feats[:, [1, 3]] == 1).all()


def test_encoding_integer_multiples():
    feats = encode_ray(np.array([[1.0, 0.0]]))[0, 2:].reshape(10, 4)
    assert np.abs(feats[:, 0]).max() < 1e-12
    # cos(2^k pi): -1 for k = 0 (an odd multiple of pi), +1 for every k >= 1
    assert feats[0, 1] == -1.0
    assert np.allclose(feats[1:, 1], 1.0, atol=1e-12)


def test_encoding_dimension(rng):
    assert encode_ray(rng.uniform(-1, 1, (7, 2))).shape == (7, 42)


# --- architecture ------------------------------------------------------------

def test_parameter_counts():
    m = MlpModel.init("UD", TrainConfig())
    assert m.uodf.sizes == [45] + [256] * 9 + [1]
    assert m.mask.sizes == [42, 256, 256, 1]
    assert m.uodf.n_params == 538_369 and m.mask.n_params == 77_057
    assert abs(m.n_params - 0.61e6) < 0.01e6
    assert abs(3 * m.n_params - 1.84e6) < 0.01e6


def test_fresh_model_finite(rng):
    m = MlpModel.init("FB", TrainConfig())
    y, ty = forward_uodf(m, rng.uniform(-1, 1, (5, 2)), rng.uniform(-1, 1, 5))
    assert np.isfinite(y).all() and np.isfinite(ty).all() and (y >= 0).all()


@pytest.mark.parametrize("layers", [2, 3, 5])
def test_input_gradient_matches_fd(layers, rng):
    m = f64_model("UD", uodf_layers=layers)
    uv = rng.uniform(-1, 1, (100, 2))
    s = rng.uniform(-1, 1, 100)
    h = 1e-4
    _, ty = m.forward_uodf(uv, s)
    fd = (m.forward_uodf(uv, s + h)[0] - m.forward_uodf(uv, s - h)[0]) / (2 * h)
    assert np.all(np.abs(fd - ty) <= 1e-4 * np.maximum(np.abs(ty), 1e-2))


@pytest.mark.parametrize("layers", [2, 4])
def test_weight_gradient_matches_fd(layers, rng):
    """Loss depending on value and its s-derivative; 10 random weights probed."""
    m = Mlp.init([6, 12] + [12] * (layers - 2) + [1], rng, beta=100.0)
    x = rng.uniform(-1, 1, (32, 6))
    a, b = rng.normal(size=32), rng.normal(size=32)

    def loss():
        y, ty = m.forward_tangent(x, 5)
        return float(a @ y + b @ ty)

    y, ty, cache = m.forward_tangent(x, 5, keep=True)
    grads = m.backward_tangent(cache, a, b)
    params = m.params
    for _ in range(10):
        i = rng.integers(len(params))
        idx = tuple(rng.integers(n) for n in params[i].shape)
        old = params[i][idx]
        h = 1e-6
        params[i][idx] = old + h
        up = loss()
        params[i][idx] = old - h
        down = loss()
        params[i][idx] = old
        fd = (up - down) / (2 * h)
        assert abs(fd - grads[i][idx]) <= 1e-4 * max(abs(fd), 1e-3)


def test_mask_weight_gradient(rng):
    m = Mlp.init([5, 8, 8, 1], rng, beta=100.0, out_act="linear")
    x = rng.uniform(-1, 1, (20, 5))
    a = rng.normal(size=20)
    _, cache = m.forward(x, keep=True)
    grads = m.backward(cache, a)
    for i, p in enumerate(m.params):
        idx = tuple(rng.integers(n) for n in p.shape)
        old = p[idx]
        p[idx] = old + 1e-6
        up = a @ m.forward(x)
        p[idx] = old - 1e-6
        down = a @ m.forward(x)
        p[idx] = old
        fd = (up - down) / 2e-6
        assert abs(fd - grads[i][idx]) <= 1e-4 * max(abs(fd), 1e-3)


def test_batched_equals_per_sample(rng):
    m = f64_model()
    uv = rng.uniform(-1, 1, (20, 2))
    s = rng.uniform(-1, 1, 20)
    y, ty = m.forward_uodf(uv, s)
    for i in range(20):
        yi, tyi = m.forward_uodf(uv[i:i + 1], s[i:i + 1])
        assert abs(yi[0] - y[i]) < 1e-12 and abs(tyi[0] - ty[i]) < 1e-12


# --- losses ------------------------------------------------------------------

@pytest.fixture(scope="module")
def sampler():
    return RaySampler.from_shape(AnalyticSphere(0.9), GridSpec(17), "LR")


def test_oracle_model_zero_loss(sampler, rng):
    lines = rng.choice(sampler.masked_lines, 500)
    s = rng.uniform(-1, 1, 500)

    def oracle(lines, s):
        d, sg = sampler.query(lines, s)
        return d, sg.astype(float)

    t = loss_terms(oracle, sampler, lines, s)
    assert t.value == 0 and t.der == 0
    # s - sign * d reproduces the crossing up to one rounding
    assert t.pred < 1e-15


def test_constant_model_der_is_one(sampler, rng):
    lines = rng.choice(sampler.masked_lines, 100)
    s = rng.uniform(-1, 1, 100)
    t = loss_terms(lambda l, s: (np.full(len(s), 0.3), np.zeros(len(s))), sampler, lines, s)
    assert t.der == 1.0


def test_weighted_total():
    assert weighted_total(0.01, 0.2, 0.005) == pytest.approx(45.0)


def test_undefined_points_excluded(sampler):
    out = np.setdiff1d(sampler.lines, sampler.masked_lines)[:3]
    lines = np.concatenate([out, sampler.masked_lines[:2]])
    t = loss_terms(lambda l, s: (np.zeros(len(s)), np.ones(len(s))), sampler, lines, np.zeros(5))
    assert t.excluded == 3


def test_loss_output_gradients_match_fd(sampler, rng):
    lines = rng.choice(sampler.masked_lines, 50)
    s = rng.uniform(-1, 1, 50)
    y0 = rng.uniform(0.05, 0.5, 50)
    t0 = rng.choice([-1.3, -0.7, 0.6, 1.4], 50)
    _, gy, gty, _ = loss_terms(lambda l, s: (y0, t0), sampler, lines, s, with_grads=True)
    h = 1e-7
    for i in range(5):
        for arr, g in ((y0, gy), (t0, gty)):
            old = arr[i]
            arr[i] = old + h
            up = loss_terms(lambda l, s: (y0, t0), sampler, lines, s).total
            arr[i] = old - h
            down = loss_terms(lambda l, s: (y0, t0), sampler, lines, s).total
            arr[i] = old
            assert (up - down) / (2 * h) == pytest.approx(g[i], rel=1e-4, abs=1e-6)


# --- training ----------------------------------------------------------------

def test_lr_schedule():
    c = TrainConfig()
    assert [c.lr_at(e) for e in (0, 19, 20, 39, 40)] == [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4]


def test_defaults_match_reference_settings():
    c = TrainConfig()
    assert (c.epochs, c.batch, c.lattice, c.points_per_ray, c.resample_every) == (100, 1024, 257, 256, 10)
    assert c.lambdas == (3000.0, 50.0, 1000.0)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 3, "bogus": 1}))
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_json(tmp_path / "c.json")


def test_zero_epochs_returns_initial_model(sampler):
    cfg = small_cfg(epochs=0)
    m, log = train_direction(sampler, cfg)
    ref = MlpModel.init("LR", cfg)
    assert log == []
    assert all(np.array_equal(a, b) for a, b in zip(m.uodf.params, ref.uodf.params))


def test_short_training_reduces_loss_and_is_seeded(sampler):
    cfg = small_cfg(epochs=4)
    m1, log1 = train_direction(sampler, cfg)
    m2, log2 = train_direction(sampler, cfg)
    assert [e.total for e in log1] == [e.total for e in log2]
    assert log1[-1].total < log1[0].total
    best = [e.best_total for e in log1]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))


@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_divergence_returns_last_finite(sampler):
    cfg = small_cfg(epochs=3)
    snap = {}

    def poison(entry, model):
        snap["w"] = model.uodf.weights[0].copy()
        model.uodf.weights[0][0, 0] = np.nan

    with pytest.raises(TrainingDiverged) as exc:
        train_direction(sampler, cfg, callback=poison)
    m = exc.value.model
    assert all(np.isfinite(p).all() for p in m.uodf.params + m.mask.params)
    assert len(exc.value.history) == 1


def test_predict_field_structure(sampler):
    m, _ = train_direction(sampler, small_cfg(epochs=1))
    g = GridSpec(9)
    f = predict_field(m, g)
    assert f.direction is Direction.LR and f.mask.shape == (9, 9)
    d = f.distances[f.mask]
    assert np.isfinite(d).all() and (d >= 0).all()
    assert np.isnan(f.distances[~f.mask]).all()
    assert set(np.unique(f.deriv_sign[f.mask])) <= {-1, 1}


def test_all_negative_mask_gives_empty_field():
    m = f64_model()
    m.mask.biases[-1][:] = -1e3
    m.mask.weights[-1][:] = 0
    f = predict_field(m, GridSpec(9))
    assert not f.mask.any() and np.isnan(f.distances).all()


def test_checkpoint_round_trip(tmp_path):
    m = MlpModel.init("FB", small_cfg(seed=3))
    m.epoch = 7
    save_checkpoint(m, tmp_path / "m.bin")
    meta = json.loads((tmp_path / "m.bin.json").read_text())
    assert meta["uodf_sizes"] == m.uodf.sizes and meta["activation"] == "softplus"
    assert meta["seed"] == 3 and meta["epoch"] == 7
    assert (tmp_path / "m.bin").stat().st_size == 4 * m.n_params
    back = load_checkpoint(tmp_path / "m.bin")
    assert back.direction is Direction.FB
    for a, b in zip(m.uodf.params + m.mask.params, back.uodf.params + back.mask.params):
        assert np.array_equal(a.astype(np.float32), b)
    (tmp_path / "m.bin").write_bytes((tmp_path / "m.bin").read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "m.bin")
