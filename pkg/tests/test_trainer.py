import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdmamba.gradcheck import (MICRO_CONFIG, NETWORK_TOL, PRIMITIVE_TOL, check_gradients,
                               check_primitives, negative_control)
from cdmamba.network import NetworkParams, init_params
from cdmamba.synthetic import (CLOUD_FRACTION, CONFUSER_NIR_GAP, TileDataset, _confusers, gen_synthetic,
                               holdout_split, kfold_splits, worker_count)
from cdmamba.tensor import Tensor
from cdmamba.trainer import (AdamState, NonFiniteLossError, TrainConfig, adamw_step, cosine_lr, decays,
                             train)


def one_param(value, name="w.weight"):
    return {name: Tensor(np.array(value, dtype=float))}


# ---------------------------------------------------------------- schedule

def test_cosine_endpoints_and_midpoint():
    cfg = TrainConfig(epochs=80)
    assert cosine_lr(0, cfg) == 1e-3
    assert cosine_lr(80, cfg) == 1e-5
    assert abs(cosine_lr(40, cfg) - 5.05e-4) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 500))
def test_cosine_monotone(epochs):
    cfg = TrainConfig(epochs=epochs)
    lrs = [cosine_lr(e, cfg) for e in range(epochs + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == cfg.lr_min


def test_cosine_range_error():
    with pytest.raises(ValueError):
        cosine_lr(81, TrainConfig())
    with pytest.raises(ValueError):
        cosine_lr(-1, TrainConfig())


def test_train_config_validation():
    for kwargs in (dict(epochs=0), dict(batch_size=0), dict(lr_min=1e-2), dict(precision="half")):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


# ---------------------------------------------------------------- optimizer

def test_zero_gradient_zero_decay_is_identity():
    p = one_param([1.5, -2.0])
    state = AdamState.zeros_like(p)
    adamw_step(p, {"w.weight": np.zeros(2)}, state, 1e-3, TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(p["w.weight"].data, [1.5, -2.0])


def test_decoupled_decay_factor():
    p = one_param([1.5, -2.0])
    adamw_step(p, {"w.weight": np.zeros(2)}, AdamState.zeros_like(p), 1e-3, TrainConfig())
    np.testing.assert_allclose(p["w.weight"].data, np.array([1.5, -2.0]) * (1 - 1e-5), rtol=1e-15)


def test_decay_skips_biases_and_norms():
    assert decays("enc.stage3.smb.out_proj.weight")
    assert not any(decays(n) for n in ("enc.stage3.smb.out_proj.bias", "enc.stage2.gn.gamma",
                                        "enc.stage2.smb.ssm_f.A"))
    p = one_param([2.0], "x.bias")
    adamw_step(p, {"x.bias": np.zeros(1)}, AdamState.zeros_like(p), 1e-3, TrainConfig())
    assert p["x.bias"].data[0] == 2.0


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3), st.integers(1, 50))
def test_adam_step_bound(g, steps):
    p = one_param([0.0], "w.bias")
    state = AdamState.zeros_like(p)
    cfg = TrainConfig()
    prev = 0.0
    for _ in range(steps):
        adamw_step(p, {"w.bias": np.array([g])}, state, 1e-3, cfg)
        cur = p["w.bias"].data[0]
        assert abs(cur - prev) <= 1e-3 * (1 + 1e-6)
        assert np.isfinite(cur)
        prev = cur
    assert np.sign(prev) == -np.sign(g)


def test_adam_first_step_matches_hand_value():
    # bias correction makes the first step lr * g / (|g| + eps)
    p = one_param([1.0], "w.bias")
    adamw_step(p, {"w.bias": np.array([0.2])}, AdamState.zeros_like(p), 1e-3, TrainConfig())
    assert abs(p["w.bias"].data[0] - (1.0 - 1e-3 * 0.2 / (0.2 + 1e-8))) <= 1e-15


def test_adam_shape_mismatch():
    p = one_param([1.0, 2.0])
    with pytest.raises(ValueError):
        adamw_step(p, {"w.weight": np.zeros(3)}, AdamState.zeros_like(p), 1e-3, TrainConfig())


def test_adam_state_records_round_trip():
    p = one_param([1.0, 2.0])
    state = AdamState.zeros_like(p)
    adamw_step(p, {"w.weight": np.ones(2)}, state, 1e-3, TrainConfig())
    back = AdamState.from_records(state.records())
    assert back.step == 1 and np.array_equal(back.m["w.weight"], state.m["w.weight"])


# ---------------------------------------------------------------- synthetic data

@pytest.fixture(scope="module")
def small_set():
    return gen_synthetic(7, 24, 32)


def test_generator_deterministic(small_set):
    again = gen_synthetic(7, 24, 32, workers=1)
    assert again.images.tobytes() == small_set.images.tobytes()
    assert again.masks.tobytes() == small_set.masks.tobytes()
    assert gen_synthetic(8, 2, 32).images.tobytes() != small_set.images[:2].tobytes()


def test_generator_contract(small_set):
    assert small_set.images.shape == (24, 4, 32, 32) and small_set.masks.shape == (24, 32, 32)
    assert small_set.images.min() >= 0 and small_set.images.max() <= 1
    assert set(np.unique(small_set.masks)) <= {0.0, 1.0}


def test_cloud_fraction_bounds():
    frac = gen_synthetic(42, 200, 64).cloud_fraction()
    assert 0.1 < frac < 0.6
    assert CLOUD_FRACTION[0] - 0.05 < frac < CLOUD_FRACTION[1] + 0.05


def test_confusers_keep_nir_gap():
    rng = np.random.default_rng(0)
    for _ in range(50):
        img = rng.uniform(0, 0.3, (4, 32, 32))
        for patch in _confusers(rng, img, max_patches=3):
            assert img[3][patch].mean() <= img[:3][:, patch].mean() - CONFUSER_NIR_GAP


def test_generator_errors():
    with pytest.raises(ValueError):
        gen_synthetic(0, 2, 48)
    with pytest.raises(ValueError):
        gen_synthetic(0, 0, 32)
    with pytest.raises(ValueError):
        TileDataset(np.zeros((2, 3, 8, 8)), np.zeros((2, 8, 8)))
    with pytest.raises(ValueError):
        TileDataset(np.zeros((2, 4, 8, 8)), np.full((2, 8, 8), 0.5))


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("CDMAMBA_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("CDMAMBA_THREADS", "x")
    with pytest.raises(ValueError):
        worker_count()


def test_holdout_split():
    tr, va = holdout_split(200, 0.2, 42)
    assert len(va) == 40 and len(tr) == 160
    assert sorted(np.concatenate([tr, va])) == list(range(200))
    tr2, va2 = holdout_split(200, 0.2, 42)
    assert np.array_equal(va, va2)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(0, 1000), st.data())
def test_kfold_partition(n, seed, data):
    k = data.draw(st.integers(2, n))
    folds = kfold_splits(n, k, seed)
    vals = np.concatenate([v for _, v in folds])
    assert sorted(vals) == list(range(n))
    sizes = [len(v) for _, v in folds]
    assert max(sizes) - min(sizes) <= 1
    for tr, va in folds:
        assert not set(tr) & set(va) and len(tr) + len(va) == n


# ---------------------------------------------------------------- training loop

@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    data = gen_synthetic(3, 20, 32)
    cfg = TrainConfig(epochs=12, batch_size=4, seed=1)
    log = io.StringIO()
    return train(MICRO_CONFIG, cfg, data, out_dir=str(out), log=log), cfg, out, log, data


def test_lr_log_matches_schedule(micro_run):
    result, cfg, _, _, _ = micro_run
    assert [r.lr for r in result.history] == [cosine_lr(e, cfg) for e in range(cfg.epochs)]


def test_log_format_and_files(micro_run):
    result, cfg, out, log, _ = micro_run
    lines = (out / "train.log").read_text().splitlines()
    assert lines == result.log_lines == log.getvalue().splitlines()
    assert len(lines) == cfg.epochs
    assert [tok.split("=")[0] for tok in lines[0].split()] == ["epoch", "lr", "loss", "val_miou", "val_f1", "val_acc"]
    params, extra = NetworkParams.load(out / "checkpoint.cdmw")
    assert extra["opt.step"][0] == result.state.step
    final, _ = NetworkParams.load(out / "weights.cdmw")
    assert all(np.array_equal(final[k].data, result.params[k].data) for k in final)


def test_training_reduces_loss(micro_run):
    result = micro_run[0]
    assert result.history[10].loss < result.history[0].loss
    assert abs(result.initial_bce - math.log(2)) <= 0.15


def test_training_is_bit_reproducible(micro_run):
    data = micro_run[4]
    cfg = TrainConfig(epochs=2, batch_size=4, seed=1)
    a, b = train(MICRO_CONFIG, cfg, data), train(MICRO_CONFIG, cfg, data)
    assert a.log_lines == b.log_lines
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_non_finite_loss_aborts(monkeypatch):
    import cdmamba.trainer as trainer_mod
    real = trainer_mod.overall_loss
    calls = []

    def poisoned(y, t, cfg):
        calls.append(1)
        loss = real(y, t, cfg)
        return Tensor(np.array(np.nan), _check=False) if len(calls) == 2 else loss

    monkeypatch.setattr(trainer_mod, "overall_loss", poisoned)
    with pytest.raises(NonFiniteLossError, match=r"non-finite loss nan at epoch 0, batch 1 \(tiles"):
        train(MICRO_CONFIG, TrainConfig(epochs=1, batch_size=2), gen_synthetic(0, 10, 32))


def test_non_finite_input_rejected():
    data = gen_synthetic(0, 10, 32)
    images = data.images.copy()
    images[3, 0, 0, 0] = np.inf
    with pytest.raises(FloatingPointError):
        train(MICRO_CONFIG, TrainConfig(epochs=1, batch_size=2), TileDataset(images, data.masks))


def test_single_precision_training_runs():
    data = gen_synthetic(0, 10, 32)
    result = train(MICRO_CONFIG, TrainConfig(epochs=1, batch_size=4, precision="single"), data)
    assert result.params.dtype == np.float32
    assert all(np.all(np.isfinite(t.data)) for t in result.params.tensors.values())


# ---------------------------------------------------------------- gradient harness

def test_primitive_suite():
    errors = check_primitives()
    assert max(errors.values()) <= PRIMITIVE_TOL, max(errors, key=errors.get)


def test_negative_control_detected():
    assert negative_control() > 1e-1


def test_micro_network_gradient():
    assert init_params(MICRO_CONFIG, 0).count() <= 50_000
    report = check_gradients(MICRO_CONFIG, seed=0, sample_fraction=0.01)
    assert report.max_rel <= NETWORK_TOL, report.summary()
