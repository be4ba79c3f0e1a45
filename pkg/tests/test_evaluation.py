import json

import numpy as np
import pandas as pd
import pytest

from conftest import random_arhmm, tiny_dict
from envshift.config import parse_run_config
from envshift.error_handler import ContractViolation, DataFileError, UnsupportedSizeError
from envshift.models.generation import Dataset
from envshift.services.evaluation import (
    best_assignment,
    cca_mcc,
    correlation_matrix,
    env_accuracy,
    forecast_errors,
    mcc,
    report,
    transition_mse,
)
from envshift.utils.state import RunStore


@pytest.fixture
def latents():
    return np.random.default_rng(0).standard_normal((500, 4))


# ============================================================================
# MCC
# ============================================================================


def test_mcc_of_identical_latents_is_one(latents):
    score, assignment = mcc(latents, latents)
    assert score == pytest.approx(1.0)
    np.testing.assert_array_equal(assignment, np.arange(4))


def test_mcc_ignores_permutation_scale_and_sign(latents):
    perm = np.array([2, 0, 3, 1])
    est = latents[:, perm] * np.array([2.0, -0.5, 3.0, -1.0]) + 4.0
    score, assignment = mcc(latents, est)
    assert score == pytest.approx(1.0)
    np.testing.assert_array_equal(perm[assignment], np.arange(4))


def test_mcc_degrades_gracefully_with_noise(latents):
    noisy = latents + 0.1 * np.random.default_rng(1).standard_normal(latents.shape)
    score, _ = mcc(latents, noisy)
    assert 0.85 < score < 1.0


def test_mcc_is_symmetric(latents):
    other = np.tanh(latents @ np.random.default_rng(2).standard_normal((4, 4)))
    assert mcc(latents, other)[0] == pytest.approx(mcc(other, latents)[0], abs=1e-12)


def test_constant_column_contributes_zero(latents):
    est = latents.copy()
    est[:, 3] = 7.0
    corr = correlation_matrix(latents, est)
    np.testing.assert_array_equal(corr[:, 3], np.zeros(4))
    assert mcc(latents, est)[0] == pytest.approx(0.75)


def test_large_dimensions_use_assignment_solver():
    z = np.random.default_rng(3).standard_normal((400, 10))
    perm = np.random.default_rng(4).permutation(10)
    score, assignment = mcc(z, z[:, perm])
    assert score == pytest.approx(1.0)
    np.testing.assert_array_equal(perm[assignment], np.arange(10))


def test_exhaustive_assignment_matches_hungarian():
    rng = np.random.default_rng(5)
    for _ in range(20):
        score = rng.random((6, 6))
        exhaustive = best_assignment(score)
        padded = np.zeros((9, 9))
        padded[:6, :6] = score
        hungarian = best_assignment(padded)[:6]
        rows = np.arange(6)
        assert score[rows, exhaustive].sum() == pytest.approx(score[rows, hungarian].sum(), abs=1e-12)


def test_spearman_sees_monotone_transforms(latents):
    est = np.exp(latents)
    assert mcc(latents, est, "spearman")[0] == pytest.approx(1.0)
    assert mcc(latents, est, "pearson")[0] < 1.0


def test_cca_recovers_linear_mixtures(latents):
    mixed = latents @ np.random.default_rng(6).standard_normal((4, 4))
    assert mcc(latents, mixed)[0] < 0.95
    assert cca_mcc(latents, mixed) == pytest.approx(1.0)


def test_correlation_rejects_bad_shapes(latents):
    with pytest.raises(ContractViolation):
        correlation_matrix(latents, latents[:, :3])
    with pytest.raises(ContractViolation):
        correlation_matrix(latents[:2], latents[:2])


# ============================================================================
# Environments
# ============================================================================


def test_env_accuracy_identity_and_relabel():
    e = np.array([0, 0, 1, 1, 2, 2, 0, 0])
    assert env_accuracy(e, e, 3)[0] == 1.0
    relabel = np.array([2, 0, 1])[e]
    accuracy, perm = env_accuracy(e, relabel, 3)
    assert accuracy == 1.0
    np.testing.assert_array_equal(perm[relabel], e)


def test_env_accuracy_invariant_to_relabelling_the_estimate():
    rng = np.random.default_rng(7)
    e_true = rng.integers(0, 3, 300)
    e_est = np.where(rng.random(300) < 0.8, e_true, rng.integers(0, 3, 300))
    base = env_accuracy(e_true, e_est, 3)[0]
    for perm in ([1, 2, 0], [2, 1, 0]):
        assert env_accuracy(e_true, np.array(perm)[e_est], 3)[0] == base


def test_random_labels_score_near_chance():
    rng = np.random.default_rng(8)
    accuracy, _ = env_accuracy(rng.integers(0, 3, 5000), rng.integers(0, 3, 5000), 3)
    assert accuracy < 0.40


def test_too_many_environments_unsupported():
    e = np.arange(9)
    with pytest.raises(UnsupportedSizeError):
        env_accuracy(e, e, 9)


def test_transition_mse_after_relabelling():
    A = np.array([[0.8, 0.15, 0.05], [0.1, 0.7, 0.2], [0.3, 0.3, 0.4]])
    perm = np.array([2, 0, 1])  # estimated k is true perm[k]
    A_est = A[np.ix_(perm, perm)]
    assert transition_mse(A, A_est, perm) == 0.0
    assert transition_mse(A, A, perm) > 0.0
    with pytest.raises(ContractViolation):
        transition_mse(A, A, np.array([0, 0, 1]))


def test_forecast_errors_hand_example():
    y = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    pred = np.array([[1.0, 0.0], [3.0, 5.0], [7.0, 6.0]])
    mse, mae = forecast_errors(y, pred)
    assert mse == pytest.approx(1.5)
    assert mae == pytest.approx(5.0 / 6.0)
    with pytest.raises(ContractViolation):
        forecast_errors(y, pred[:2])


# ============================================================================
# Report
# ============================================================================


def _artifacts(tmp_path):
    """A data directory with ground truth and a run whose estimates are exact up to relabelling"""
    rng = np.random.default_rng(9)
    T = 60
    e = np.repeat([0, 1, 0, 1, 1, 0], 10)
    z_s, z_e = rng.standard_normal((T, 2)), rng.standard_normal((T, 2))
    x = rng.standard_normal((T, 4))
    A = np.array([[0.9, 0.1], [0.3, 0.7]])

    data = RunStore(tmp_path / "data")
    data.sub("test").save_dataset(Dataset(x=x, e_true=e, z_s_true=z_s, z_e_true=z_e, window=8, stride=4, t_split=6))
    data.write_matrix("transition.csv", A)

    config = parse_run_config(tiny_dict(paths={"data_dir": str(data.directory), "run_dir": str(tmp_path / "run")}))
    run = RunStore(tmp_path / "run")
    run.save_run_config(config)
    latents = pd.DataFrame(np.hstack([2.0 * z_s, -z_e]), columns=["zs0", "zs1", "ze0", "ze1"])
    latents.insert(0, "t", np.arange(T))
    run.write_csv("latents_hat.csv", latents)
    run.write_series("envs_hat.csv", 1 - e, "e")
    hmm = random_arhmm(rng, 2, 4).model_copy(update={"A": A[np.ix_([1, 0], [1, 0])]})
    run.save_arhmm(hmm)
    rows = np.r_[6:8, 14:16]
    forecast = pd.DataFrame(x[rows] + 0.5, columns=[f"xhat{i}" for i in range(4)])
    forecast.insert(0, "t", rows)
    forecast["e_hat"] = 0
    run.write_csv("forecast.csv", forecast)
    run.write_csv("trace.csv", pd.DataFrame({"epoch": [1, 2], "total": [-10.0, -4.5]}))
    return data, run


def test_report_on_complete_run(tmp_path):
    data, run = _artifacts(tmp_path)
    metrics = report(run.directory)
    assert metrics.mcc_s == pytest.approx(1.0)
    assert metrics.mcc_e == pytest.approx(1.0)
    assert metrics.mcc_all == pytest.approx(1.0)
    assert metrics.assignment == [0, 1, 2, 3]
    assert metrics.env_accuracy == 1.0
    assert metrics.best_perm == [1, 0]
    assert metrics.a_mse == pytest.approx(0.0, abs=1e-30)
    assert metrics.forecast_mse == pytest.approx(0.25)
    assert metrics.forecast_mae == pytest.approx(0.5)
    assert metrics.final_elbo == -4.5
    assert metrics.missing == []
    assert json.loads(run.path("metrics.json").read_text())["env_accuracy"] == 1.0


def test_report_bytes_are_reproducible(tmp_path):
    _, run = _artifacts(tmp_path)
    report(run.directory)
    first = run.path("metrics.json").read_bytes()
    report(run.directory)
    assert run.path("metrics.json").read_bytes() == first


def test_missing_environment_truth_leaves_nulls(tmp_path):
    data, run = _artifacts(tmp_path)
    data.sub("test").path("envs.csv").unlink()
    metrics = report(run.directory)
    assert metrics.env_accuracy is None and metrics.a_mse is None
    assert "environments" in metrics.missing
    assert metrics.mcc_all == pytest.approx(1.0)
    stored = json.loads(run.path("metrics.json").read_text())
    assert stored["env_accuracy"] is None


def test_explicit_data_dir_overrides_config(tmp_path):
    data, run = _artifacts(tmp_path)
    moved = tmp_path / "moved"
    data.directory.rename(moved)
    metrics = report(run.directory, data_dir=moved)
    assert metrics.env_accuracy == 1.0


def test_report_without_any_inputs_fails(tmp_path):
    run = RunStore(tmp_path / "run")
    run.save_run_config(parse_run_config(tiny_dict(paths={"data_dir": str(tmp_path / "nothing")})))
    with pytest.raises(DataFileError):
        report(run.directory)


def test_report_without_config_or_data_dir_fails(tmp_path):
    with pytest.raises(DataFileError):
        report(tmp_path / "empty")
