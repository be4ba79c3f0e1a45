import json

import numpy as np
import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from conftest import tiny_dict
from envshift.main import cli
from envshift.models.generation import AssumptionReport
from envshift.services import generator


def _invoke(*args):
    return CliRunner().invoke(cli, [*args, "--quiet"])


def _write_config(path, **overrides):
    path.write_text(yaml.safe_dump(tiny_dict(**overrides)))
    return str(path)


def _run_pipeline(root, config):
    """gen → fit-hmm → train → eval into root/data and root/run"""
    data, run = root / "data", root / "run"
    for args in (
        ("gen", "--config", config, "--out", str(data)),
        ("fit-hmm", "--config", config, "--data", str(data), "--out", str(run)),
        ("train", "--config", config, "--data", str(data), "--out", str(run)),
        ("eval", "--run", str(run)),
    ):
        result = _invoke(*args)
        assert result.exit_code == 0, (args[0], result.output)
    return data, run


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One gen → fit-hmm → train → eval pass on the tiny config"""
    root = tmp_path_factory.mktemp("pipeline")
    config = _write_config(root / "tiny.yaml")
    data, run = _run_pipeline(root, config)
    return {"root": root, "config": config, "data": data, "run": run}


# ============================================================================
# gen
# ============================================================================


def test_gen_writes_dataset_layout(pipeline):
    data = pipeline["data"]
    for name in ("train/observations.csv", "train/envs.csv", "test/latents_s.csv", "transition.csv", "run_config.yaml"):
        assert (data / name).is_file(), name
    header = (data / "train/observations.csv").read_text().splitlines()[0]
    assert header == "t,x0,x1,x2,x3"
    A = np.loadtxt(data / "transition.csv", delimiter=",")
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)


def test_gen_is_byte_reproducible(pipeline, tmp_path):
    assert _invoke("gen", "--config", pipeline["config"], "--out", str(tmp_path / "again")).exit_code == 0
    for name in ("train/observations.csv", "test/envs.csv", "transition.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (pipeline["data"] / name).read_bytes()


def test_gen_checks_assumptions_once(tmp_path, monkeypatch):
    calls = []
    report = AssumptionReport(
        full_rank_ok=True,
        min_singular_A=0.5,
        reducible_warning=False,
        min_dwell=2,
        dwell_ok=True,
        mean_separation=3.0,
        separation_ok=True,
        v_independence_ok=True,
        v_min_singular=0.1,
        w_independence_ok=True,
        w_min_singular=0.2,
    )

    def counting_check(*args, **kwargs):
        calls.append(args)
        return report

    monkeypatch.setattr(generator, "check_assumptions", counting_check)
    config = _write_config(tmp_path / "checked.yaml", gen={"validate_assumptions": True})
    assert _invoke("gen", "--config", config, "--out", str(tmp_path / "d")).exit_code == 0
    assert len(calls) == 1
    assert json.loads((tmp_path / "d/assumptions.json").read_text()) == report.model_dump()


def test_gen_seed_override_changes_data(pipeline, tmp_path):
    assert _invoke("gen", "--config", pipeline["config"], "--out", str(tmp_path / "other"), "--seed", "99").exit_code == 0
    a = (tmp_path / "other/train/observations.csv").read_bytes()
    assert a != (pipeline["data"] / "train/observations.csv").read_bytes()


def test_missing_config_exits_2(tmp_path):
    result = _invoke("gen", "--config", str(tmp_path / "absent.yaml"), "--out", str(tmp_path / "d"))
    assert result.exit_code == 2


@pytest.mark.parametrize("overrides", [{"gen": {"n_envs": 1}}, {"gen": {"colour": "red"}}])
def test_invalid_config_exits_2(tmp_path, overrides):
    config = _write_config(tmp_path / "bad.yaml", **overrides)
    assert _invoke("gen", "--config", config, "--out", str(tmp_path / "d")).exit_code == 2


def test_violated_assumption_exits_3(tmp_path):
    config = _write_config(tmp_path / "strict.yaml", gen={"validate_assumptions": True, "separation_factor": 100.0})
    result = _invoke("gen", "--config", config, "--out", str(tmp_path / "d"))
    assert result.exit_code == 3
    assert not (tmp_path / "d").exists()


# ============================================================================
# fit-hmm / train
# ============================================================================


def test_hmm_trace_is_monotone_per_restart(pipeline):
    trace = pd.read_csv(pipeline["run"] / "hmm_trace.csv")
    assert list(trace.columns) == ["restart", "iteration", "loglik", "floor_active"]
    for _, group in trace.groupby("restart"):
        ll = group.sort_values("iteration")["loglik"].to_numpy()
        assert (np.diff(ll) >= -1e-9).all()


def test_train_writes_run_artifacts(pipeline):
    run = pipeline["run"]
    for name in ("idea_model.json", "arhmm.json", "standardizer.json", "trace.csv", "latents_hat.csv", "forecast.csv"):
        assert (run / name).is_file(), name
    latents = pd.read_csv(run / "latents_hat.csv")
    assert list(latents.columns) == ["t", "zs0", "zs1", "ze0", "ze1"]
    assert len(latents) == 200
    envs = pd.read_csv(run / "envs_hat.csv")
    assert list(envs.columns) == ["t", "e"]
    assert set(envs["e"]) <= {0, 1}


def test_train_leaves_fitted_hmm_artifacts_alone(pipeline, tmp_path):
    config, data, run = pipeline["config"], str(pipeline["data"]), tmp_path / "run"
    assert _invoke("fit-hmm", "--config", config, "--data", data, "--out", str(run)).exit_code == 0
    assert (run / "envs_hat.csv").is_file()
    (run / "envs_hat.csv").unlink()
    (run / "hmm_trace.csv").unlink()
    assert _invoke("train", "--config", config, "--data", data, "--out", str(run)).exit_code == 0
    assert not (run / "envs_hat.csv").exists()
    assert not (run / "hmm_trace.csv").exists()


def test_train_without_checkpoint_writes_hmm_artifacts(pipeline, tmp_path):
    run = tmp_path / "fresh"
    result = _invoke("train", "--config", pipeline["config"], "--data", str(pipeline["data"]), "--out", str(run))
    assert result.exit_code == 0
    for name in ("arhmm.json", "hmm_trace.csv", "envs_hat.csv"):
        assert (run / name).is_file(), name


def test_train_without_data_exits_2(tmp_path, pipeline):
    result = _invoke("train", "--config", pipeline["config"], "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "r"))
    assert result.exit_code == 2


def test_non_finite_objective_exits_4(pipeline, tmp_path):
    config = _write_config(tmp_path / "unstable.yaml", train={"obs_logvar": -1e6})
    hmm = str(pipeline["run"] / "arhmm.json")
    result = _invoke("train", "--config", config, "--data", str(pipeline["data"]), "--hmm", hmm, "--out", str(tmp_path / "r"))
    assert result.exit_code == 4


# ============================================================================
# eval / forecast
# ============================================================================


def test_metrics_are_byte_reproducible(pipeline):
    metrics = pipeline["run"] / "metrics.json"
    first = metrics.read_bytes()
    assert _invoke("eval", "--run", str(pipeline["run"])).exit_code == 0
    assert metrics.read_bytes() == first


def test_full_pipeline_metrics_are_byte_identical(pipeline, tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    first.mkdir()
    second.mkdir()
    _, run_a = _run_pipeline(first, pipeline["config"])
    _, run_b = _run_pipeline(second, pipeline["config"])
    assert (run_a / "metrics.json").read_bytes() == (run_b / "metrics.json").read_bytes()


@pytest.mark.parametrize("command,flags", [("eval", ["--run", "--data"]), ("forecast", ["--run", "--input", "--out"])])
def test_command_help_documents_flags(command, flags):
    result = CliRunner().invoke(cli, [command, "--help"])
    assert result.exit_code == 0
    for flag in flags:
        assert flag in result.output
    assert "Run directory written by train" in " ".join(result.output.split())


def test_eval_without_environment_truth(pipeline, tmp_path):
    data = tmp_path / "data"
    assert _invoke("gen", "--config", pipeline["config"], "--out", str(data)).exit_code == 0
    (data / "test/envs.csv").unlink()
    assert _invoke("eval", "--run", str(pipeline["run"]), "--data", str(data)).exit_code == 0
    stored = json.loads((pipeline["run"] / "metrics.json").read_text())
    assert stored["env_accuracy"] is None
    # restore the full report for the other tests
    assert _invoke("eval", "--run", str(pipeline["run"])).exit_code == 0


def test_forecast_reproduces_training_output(pipeline, tmp_path):
    out = tmp_path / "forecast.csv"
    source = pipeline["data"] / "test/observations.csv"
    assert _invoke("forecast", "--run", str(pipeline["run"]), "--input", str(source), "--out", str(out)).exit_code == 0
    assert out.read_bytes() == (pipeline["run"] / "forecast.csv").read_bytes()


def test_forecast_rejects_wrong_width(pipeline, tmp_path):
    source = tmp_path / "narrow.csv"
    source.write_text("t,x0,x1,x2\n" + "".join(f"{t},0.1,0.2,0.3\n" for t in range(20)))
    result = _invoke("forecast", "--run", str(pipeline["run"]), "--input", str(source), "--out", str(tmp_path / "f.csv"))
    assert result.exit_code == 2
