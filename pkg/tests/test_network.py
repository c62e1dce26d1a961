import numpy as np
import pytest

from cdmamba.container import ContainerError
from cdmamba.gradcheck import MICRO_CONFIG
from cdmamba.network import (N_STAGES, NetworkConfig, NetworkParams, forward, init_params,
                             param_count)
from cdmamba.tensor import Tensor

DEFAULT_PARAM_COUNT = 68256    # frozen from an enumeration of the default store


def image(b=2, size=64, seed=0, bands=4):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, (b, bands, size, size)))


@pytest.fixture(scope="module")
def default_params():
    return init_params(NetworkConfig(), seed=0)


def test_shape_contract_and_extents(default_params):
    y, feats = forward(image(), default_params, return_features=True)
    assert y.shape == (2, 64, 64)
    assert [f.shape[2] for f in feats["enc"]] == [64, 32, 16, 8, 4, 2]
    assert [f.shape[1] for f in feats["enc"]] == list(NetworkConfig().stage_widths)
    assert np.all((y.data > 0) & (y.data < 1))


@pytest.mark.parametrize("size", [32, 96])
def test_resolution_recovery(size):
    params = init_params(MICRO_CONFIG, seed=1)
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 4, size, 2 * size)))
    assert forward(x, params).shape == (1, size, 2 * size)


def test_zero_head_gives_half(default_params):
    params = init_params(NetworkConfig(), seed=0)
    params["dec.stage1.conv.weight"].data[...] = 0
    params["dec.stage1.conv.bias"].data[...] = 0
    assert np.all(forward(image(1), params).data == 0.5)


def test_deterministic(default_params):
    x = image(1, seed=3)
    assert np.array_equal(forward(x, default_params).data, forward(x, default_params).data)


def test_init_reproducible_and_seed_sensitive():
    a, b, c = (init_params(MICRO_CONFIG, s) for s in (5, 5, 6))
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_init_output_mean_envelope(default_params):
    y = forward(image(1, size=32, seed=9), default_params).data.ravel()
    assert 0.3 < y[:1000].mean() < 0.7


def test_param_count_matches_enumeration():
    for config in (NetworkConfig(), MICRO_CONFIG, NetworkConfig(use_da_block=False),
                   NetworkConfig(use_cloud_smb=False), NetworkConfig((8, 8, 16, 16, 32, 32), ssm_state_dim=4)):
        assert param_count(config) == init_params(config, 0).count()


def test_param_count_regression_and_budget():
    assert param_count(NetworkConfig()) == DEFAULT_PARAM_COUNT
    assert DEFAULT_PARAM_COUNT < 200_000


def test_param_count_monotone_in_each_width():
    base = NetworkConfig((8, 8, 8, 8, 8, 8))
    ref = param_count(base)
    for i in range(N_STAGES):
        widths = list(base.stage_widths)
        widths[i] += 4
        assert param_count(NetworkConfig(widths)) > ref
    assert param_count(NetworkConfig((16,) * 6)) > ref


def test_every_parameter_has_one_name(default_params):
    ids = [id(t) for t in default_params.tensors.values()]
    assert len(ids) == len(set(ids))
    assert all(t.name == k for k, t in default_params.items())


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig((8, 16, 24, 32, 48))
    with pytest.raises(ValueError):
        NetworkConfig((8, 16, 24, 32, 48, 66))
    with pytest.raises(ValueError):
        NetworkConfig((4, 8, 8, 8, 8, 8), groups=8)


def test_input_errors():
    params = init_params(MICRO_CONFIG, 0)
    with pytest.raises(ValueError):
        forward(Tensor(np.zeros((1, 4, 48, 48))), params)
    with pytest.raises(ValueError):
        forward(Tensor(np.zeros((1, 3, 32, 32))), params)


def test_save_load_round_trip(tmp_path, default_params):
    path = tmp_path / "w.cdmw"
    default_params.save(path, extra={"opt.step": np.array([3.0])})
    loaded, extra = NetworkParams.load(path)
    assert loaded.config == default_params.config
    assert list(loaded) == list(default_params)
    assert extra["opt.step"][0] == 3.0
    x = image(1)
    assert np.array_equal(forward(x, loaded).data, forward(x, default_params).data)


def test_load_rejects_mismatched_store(tmp_path):
    params = init_params(MICRO_CONFIG, 0)
    records = {**params.meta(), **params.arrays()}
    records.pop("dec.stage1.conv.bias")
    from cdmamba.container import save_store
    save_store(tmp_path / "bad.cdmw", records)
    with pytest.raises(ContainerError):
        NetworkParams.load(tmp_path / "bad.cdmw")


@pytest.mark.parametrize("toggles", [dict(use_da_block=False), dict(use_cloud_smb=False),
                                     dict(use_da_block=False, use_cloud_smb=False)])
def test_ablation_toggles_keep_contract(toggles):
    config = NetworkConfig(**toggles)
    params = init_params(config, 0)
    y = forward(image(1, size=32), params)
    assert y.shape == (1, 32, 32) and np.all((y.data > 0) & (y.data < 1))
    if not config.use_da_block:
        assert not any(k.startswith("skip.") for k in params)
    if not config.use_cloud_smb:
        assert not any(".ssm_r." in k for k in params)


def test_no_dead_skip_paths(default_params):
    x = image(1, size=32, seed=4)
    y = forward(x, default_params).data
    for stage in range(1, N_STAGES + 1):
        assert not np.array_equal(forward(x, default_params, drop_skip=stage).data, y), stage


def test_single_precision_forward():
    params = init_params(MICRO_CONFIG, 0, precision="single")
    y = forward(image(1, size=32), params)
    assert y.dtype == np.float32
    y64 = forward(image(1, size=32), init_params(MICRO_CONFIG, 0))
    assert np.abs(y.data - y64.data).max() < 1e-4
