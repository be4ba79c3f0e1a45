import math

import numpy as np
import pytest
import torch

from conftest import tiny_dict
from envshift.config import parse_run_config
from envshift.error_handler import ContractViolation
from envshift.models.arhmm import Arhmm
from envshift.models.generation import Dataset
from envshift.services.evaluation import forecast_errors
from envshift.services.idea import encode, to_tensor
from envshift.services.trainer import (
    Standardizer,
    encode_series,
    forecast,
    forecast_series,
    hmm_segments,
    idea_spec_for,
    make_windows,
    train_two_phase,
    window_environments,
)


@pytest.fixture
def trained(tiny_config, tiny_data):
    _, train, _ = tiny_data
    return train_two_phase(train, tiny_config)


def _config(**train):
    return parse_run_config(tiny_dict(train=train))


# ============================================================================
# Preprocessing
# ============================================================================


def test_standardizer_zero_mean_unit_std():
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(500, 3))
    s = Standardizer.fit(x)
    z = s.transform(x)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(s.inverse(z), x, atol=1e-12)


def test_standardizer_only_centres_constant_columns():
    x = np.column_stack([np.full(10, 4.0), np.arange(10.0)])
    s = Standardizer.fit(x)
    assert s.std[0] == 1.0
    np.testing.assert_array_equal(s.transform(x)[:, 0], np.zeros(10))


def test_standardizer_rejects_column_mismatch():
    s = Standardizer.fit(np.ones((5, 2)))
    with pytest.raises(ContractViolation):
        s.transform(np.ones((5, 3)))


def test_standardizer_json_round_trip():
    s = Standardizer.fit(np.random.default_rng(1).standard_normal((20, 2)))
    restored = Standardizer.from_json_dict(s.to_json_dict())
    np.testing.assert_array_equal(restored.mean, s.mean)
    np.testing.assert_array_equal(restored.std, s.std)


def test_make_windows_slices_with_stride():
    x = np.arange(20.0).reshape(10, 2)
    w = make_windows(x, window=4, stride=3)
    assert w.shape == (3, 4, 2)
    for i, start in enumerate((0, 3, 6)):
        np.testing.assert_array_equal(w[i], x[start : start + 4])


def test_make_windows_rejects_short_series():
    with pytest.raises(ContractViolation):
        make_windows(np.zeros((3, 2)), window=4)


def test_hmm_segments_keep_usable_tail():
    assert [len(s) for s in hmm_segments(np.zeros((250, 2)), 100)] == [100, 100, 50]
    assert [len(s) for s in hmm_segments(np.zeros((201, 2)), 100)] == [100, 100]


# ============================================================================
# Model spec and environment conditioning
# ============================================================================


def test_variants_switch_off_prior_weights():
    assert idea_spec_for(_config(variant="no_stationary_prior"), 4).beta == 0.0
    assert idea_spec_for(_config(variant="no_nonstationary_prior"), 4).gamma == 0.0
    full = idea_spec_for(_config(), 4)
    assert full.beta > 0 and full.gamma > 0
    assert full.horizon == 2


def test_window_environment_modes(trained, tiny_config, tiny_data):
    windows = make_windows(trained.standardizer.transform(tiny_data[1].x), 8, 4)
    labels = window_environments(trained.hmm, windows, "viterbi")
    assert labels.shape == windows.shape[:2]

    weights = window_environments(trained.hmm, windows, "posterior")
    assert weights.shape == windows.shape[:2] + (tiny_config.n_states,)
    torch.testing.assert_close(weights.sum(-1), torch.ones(windows.shape[:2], dtype=torch.float64))

    a = window_environments(trained.hmm, windows, "random", seed=5)
    b = window_environments(trained.hmm, windows, "random", seed=5)
    assert torch.equal(a, b)
    assert int(a.min()) >= 0 and int(a.max()) < tiny_config.n_states


# ============================================================================
# Training
# ============================================================================


def test_one_epoch_smoke(trained):
    assert len(trained.trace) == 1
    row = trained.trace[0]
    assert all(math.isfinite(v) for v in row.model_dump().values())
    assert row.total == pytest.approx(row.pre + row.rec - 0.02 * row.kld_s - 0.02 * row.kld_e)
    assert trained.hmm_trace is not None and trained.hmm_trace.is_monotone(tol=1e-9)


def test_training_is_deterministic(trained, tiny_config, tiny_data):
    again = train_two_phase(tiny_data[1], tiny_config)
    assert again.trace == trained.trace
    for (name, a), (_, b) in zip(trained.model.state_dict().items(), again.model.state_dict().items()):
        assert torch.equal(a, b), name
    np.testing.assert_array_equal(again.hmm.A, trained.hmm.A)


def test_frozen_hmm_is_reused(trained, tiny_config, tiny_data):
    again = train_two_phase(tiny_data[1], tiny_config, hmm=trained.hmm)
    assert again.hmm is trained.hmm
    assert again.hmm_trace is None
    assert again.trace == trained.trace


def test_hmm_with_wrong_width_rejected(trained, tiny_config):
    x = np.random.default_rng(0).standard_normal((100, 3))
    data = Dataset(x=x, window=8, stride=4, t_split=6)
    with pytest.raises(ContractViolation):
        train_two_phase(data, tiny_config, hmm=trained.hmm)


def test_elbo_improves_over_training(trained, tiny_data):
    config = _config(epochs=30, lr=5e-3)
    result = train_two_phase(tiny_data[1], config, hmm=trained.hmm)
    assert len(result.trace) == 30
    assert result.trace[-1].total > result.trace[0].total


@pytest.mark.parametrize(
    "overrides",
    [{"env_mode": "posterior"}, {"variant": "random_env"}, {"prior_mode": "network", "prior_hidden": 4}],
)
def test_training_modes_run(trained, tiny_data, overrides):
    result = train_two_phase(tiny_data[1], _config(**overrides), hmm=trained.hmm)
    assert math.isfinite(result.trace[-1].total)


# ============================================================================
# Inference
# ============================================================================


def test_forecast_is_deterministic_and_shaped(trained, tiny_data):
    lookback = tiny_data[2].x[:6]
    a = forecast(trained.model, trained.hmm, lookback, 2, trained.standardizer)
    b = forecast(trained.model, trained.hmm, lookback, 2, trained.standardizer)
    assert a.x_hat.shape == (2, 4) and a.e_hat.shape == (2,)
    np.testing.assert_array_equal(a.x_hat, b.x_hat)
    np.testing.assert_array_equal(a.e_hat, b.e_hat)


def test_forecast_rejects_other_horizons(trained, tiny_data):
    with pytest.raises(ContractViolation):
        forecast(trained.model, trained.hmm, tiny_data[2].x[:6], 3, trained.standardizer)


def test_forecast_scaling_round_trip(trained, tiny_data):
    lookback = tiny_data[2].x[:6]
    s = trained.standardizer
    scaled = forecast(trained.model, trained.hmm, s.transform(lookback), 2)
    original = forecast(trained.model, trained.hmm, lookback, 2, s)
    np.testing.assert_allclose(original.x_hat, s.inverse(scaled.x_hat), atol=1e-12)


def test_sampled_environment_forecast_is_seeded(trained, tiny_data):
    lookback = tiny_data[2].x[:6]
    a = forecast(trained.model, trained.hmm, lookback, 2, trained.standardizer, mode="sample", seed=4)
    b = forecast(trained.model, trained.hmm, lookback, 2, trained.standardizer, mode="sample", seed=4)
    np.testing.assert_array_equal(a.e_hat, b.e_hat)


def test_forecast_series_covers_every_block(trained, tiny_data):
    frame = forecast_series(trained.model, trained.hmm, tiny_data[2].x, trained.standardizer)
    assert list(frame.columns) == ["t", "xhat0", "xhat1", "xhat2", "xhat3", "e_hat"]
    assert len(frame) == (200 // 8) * 2
    assert frame["t"].tolist()[:4] == [6, 7, 14, 15]
    first = forecast(trained.model, trained.hmm, tiny_data[2].x[:6], 2, trained.standardizer)
    np.testing.assert_allclose(frame.iloc[:2, 1:5].to_numpy(), first.x_hat, atol=1e-12)


def test_encode_series_matches_window_posteriors(trained, tiny_data):
    x_std = trained.standardizer.transform(tiny_data[2].x)
    latents = encode_series(trained.model, x_std)
    assert latents.shape == (200, 4)
    with torch.no_grad():
        enc = encode(trained.model, to_tensor(x_std[None, :6]))
    np.testing.assert_allclose(latents[:6, :2], enc.s.mean[0].numpy(), atol=1e-12)
    np.testing.assert_allclose(latents[:6, 2:], enc.e.mean[0].numpy(), atol=1e-12)


def test_constant_series_is_forecast_accurately():
    config = _config(epochs=40, lr=1e-2, batch=16)
    level = np.array([1.5, -0.5, 2.0, 0.25])
    x = np.tile(level, (400, 1))
    data = Dataset(x=x, window=8, stride=4, t_split=6)
    hmm = Arhmm(
        A=[[0.9, 0.1], [0.1, 0.9]],
        pi=[0.5, 0.5],
        W=np.zeros((2, 4, 4)),
        b=np.zeros((2, 4)),
        logvar=np.zeros((2, 4)),
    )
    result = train_two_phase(data, config, hmm=hmm)
    frame = forecast_series(result.model, hmm, x[:80], result.standardizer)
    pred = frame[[f"xhat{i}" for i in range(4)]].to_numpy()
    mse, _ = forecast_errors(np.tile(level, (len(pred), 1)), pred)
    assert mse < 1e-2
