"""
envshift command line

gen → fit-hmm → train → eval, plus forecast for new observations.
Every command is deterministic given its config and inputs.
"""

import logging
from pathlib import Path
from typing import Optional

import click
import numpy as np
import pandas as pd
import torch

from envshift.config import load_run_config, parse_run_config, settings
from envshift.error_handler import safe_command, setup_logging
from envshift.models.run_config import RunConfig
from envshift.services.arhmm import viterbi
from envshift.services.evaluation import report
from envshift.services.generator import generate_checked
from envshift.services.trainer import (
    Standardizer,
    encode_series,
    fit_environment_model,
    forecast_series,
    train_two_phase,
)
from envshift.utils.state import RunStore

logger = logging.getLogger("envshift.cli")


# ============================================================================
# Shared helpers
# ============================================================================


def _start(quiet: bool) -> None:
    setup_logging(settings.log_level, quiet=quiet)
    if settings.torch_threads > 0:
        torch.set_num_threads(settings.torch_threads)


def _config(path: Optional[str], seed: Optional[int]) -> RunConfig:
    """Validated run config; built-in defaults when no file is given"""
    if path is None:
        return parse_run_config({}, seed=seed)
    return load_run_config(path, seed=seed)


def _with_paths(config: RunConfig, data_dir: Path, run_dir: Path) -> RunConfig:
    """Config echo recording where the run's inputs and outputs live"""
    paths = config.paths.model_copy(update={"data_dir": str(data_dir.resolve()), "run_dir": str(run_dir.resolve())})
    return config.model_copy(update={"paths": paths})


def _save_environment_fit(run_store: RunStore, hmm, trace, x_test_std: np.ndarray) -> None:
    """Checkpoint, EM trace and decoded test environments of one HMM fit"""
    run_store.save_arhmm(hmm)
    run_store.write_csv("hmm_trace.csv", pd.DataFrame(trace.rows()))
    run_store.write_series("envs_hat.csv", viterbi(hmm, x_test_std), "e")


def _summary(title: str, lines: list[str]) -> None:
    logger.info("=" * 80)
    logger.info(title)
    for line in lines:
        logger.info(f"  {line}")
    logger.info("=" * 80)


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="YAML run config")
seed_option = click.option("--seed", type=int, default=None, help="Override the config seed")
quiet_option = click.option("--quiet", is_flag=True, help="Only log warnings and errors")


@click.group()
def cli():
    """Environment detection and disentangled latent learning for nonstationary series"""


# ============================================================================
# Commands
# ============================================================================


@cli.command("gen")
@config_option
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Dataset directory to write")
@seed_option
@quiet_option
@safe_command
def gen(config_path, out, seed, quiet):
    """Generate a synthetic dataset with its ground truth"""
    _start(quiet)
    config = _config(config_path, seed)
    system, train, test, assumptions = generate_checked(config)

    store = RunStore(out)
    store.sub("train").save_dataset(train)
    store.sub("test").save_dataset(test)
    store.write_matrix("transition.csv", system.markov.A)
    store.write_json("gen_config.json", {"seed": config.seed, **config.gen.model_dump()})
    if assumptions is not None:
        store.write_json("assumptions.json", assumptions.model_dump())
    store.save_run_config(config)

    _summary(
        "Generation complete",
        [f"train {train.n_steps} / test {test.n_steps} steps, n = {train.n_obs}", f"written to {store.directory}"],
    )


@cli.command("fit-hmm")
@config_option
@click.option("--data", type=click.Path(file_okay=False), default=None, help="Dataset directory (default paths.data_dir)")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Run directory to write")
@seed_option
@quiet_option
@safe_command
def fit_hmm(config_path, data, out, seed, quiet):
    """Phase 1: fit the autoregressive HMM and decode test environments"""
    _start(quiet)
    config = _config(config_path, seed)
    data_store = RunStore(data or config.paths.data_dir)
    run_store = RunStore(out)

    train = data_store.sub("train").load_dataset(config, with_truth=False)
    test = data_store.sub("test").load_dataset(config, with_truth=False)
    standardizer = Standardizer.fit(train.x)
    hmm, trace = fit_environment_model(standardizer.transform(train.x), config)

    _save_environment_fit(run_store, hmm, trace, standardizer.transform(test.x))
    run_store.save_standardizer(standardizer)
    run_store.save_run_config(_with_paths(config, data_store.directory, run_store.directory))

    _summary(
        "HMM fit complete",
        [f"best restart {trace.best_restart}, loglik {trace.logliks[trace.best_restart][-1]:.6f}"],
    )


@cli.command("train")
@config_option
@click.option("--data", type=click.Path(file_okay=False), default=None, help="Dataset directory (default paths.data_dir)")
@click.option("--hmm", "hmm_path", type=click.Path(dir_okay=False), default=None, help="HMM checkpoint (default <out>/arhmm.json)")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Run directory to write")
@seed_option
@quiet_option
@safe_command
def train(config_path, data, hmm_path, out, seed, quiet):
    """Phase 2: train the variational model with the HMM frozen"""
    _start(quiet)
    config = _config(config_path, seed)
    data_store = RunStore(data or config.paths.data_dir)
    run_store = RunStore(out)

    hmm = None
    if hmm_path is not None:
        hmm_file = Path(hmm_path)
        hmm = RunStore(hmm_file.parent).load_arhmm(hmm_file.name)
    elif run_store.exists("arhmm.json"):
        hmm = run_store.load_arhmm()
    else:
        logger.info("No HMM checkpoint found, fitting phase 1 first")

    train_set = data_store.sub("train").load_dataset(config, with_truth=False)
    result = train_two_phase(train_set, config, hmm=hmm)

    run_store.save_idea(result.model)
    run_store.write_csv("trace.csv", pd.DataFrame([row.model_dump() for row in result.trace]))
    run_store.save_standardizer(result.standardizer)

    test = data_store.sub("test").load_dataset(config, with_truth=False)
    x_std = result.standardizer.transform(test.x)
    if result.hmm_trace is not None:
        # phase 1 ran inside train
        _save_environment_fit(run_store, result.hmm, result.hmm_trace, x_std)
    elif not run_store.exists("arhmm.json"):
        run_store.save_arhmm(result.hmm)
    latents = encode_series(result.model, x_std)
    columns = [f"zs{i}" for i in range(config.gen.n_s)] + [f"ze{i}" for i in range(config.gen.n_e)]
    frame = pd.DataFrame(latents, columns=columns)
    frame.insert(0, "t", np.arange(len(frame)))
    run_store.write_csv("latents_hat.csv", frame)
    run_store.write_csv(
        "forecast.csv",
        forecast_series(result.model, result.hmm, test.x, result.standardizer, config.train.env_forecast_mode, config.seed),
    )
    run_store.save_run_config(_with_paths(config, data_store.directory, run_store.directory))

    last = result.trace[-1]
    _summary("Training complete", [f"{last.epoch} epochs, final ELBO {last.total:.4f}, recon mse {last.recon_mse:.5f}"])


@cli.command("eval")
@click.option("--run", "run_dir", type=click.Path(file_okay=False), required=True, help="Run directory written by train; metrics.json is written there")
@click.option("--data", type=click.Path(file_okay=False), default=None, help="Override the dataset directory")
@quiet_option
@safe_command
def evaluate(run_dir, data, quiet):
    """
    Compute metrics.json for a run.

    --run names the run directory; ground truth comes from the dataset directory
    recorded in its run_config.yaml unless --data overrides it.
    """
    _start(quiet)
    metrics = report(run_dir, data_dir=data)
    _summary(
        "Evaluation complete",
        [
            f"MCC all {metrics.mcc_all} | env accuracy {metrics.env_accuracy} | A-MSE {metrics.a_mse}",
            f"forecast MSE {metrics.forecast_mse} | MAE {metrics.forecast_mae}",
            f"missing inputs: {', '.join(metrics.missing) or 'none'}",
        ],
    )


@cli.command("forecast")
@click.option("--run", "run_dir", type=click.Path(file_okay=False), required=True, help="Run directory written by train")
@click.option("--input", "input_path", type=click.Path(dir_okay=False), required=True, help="CSV of observations with columns t,x0..x{n-1}")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="Forecast CSV to write")
@quiet_option
@safe_command
def forecast(run_dir, input_path, out_path, quiet):
    """
    Forecast a new series window by window with a trained run.

    --run names the trained run directory, --input the observation CSV and
    --out the forecast CSV to write.
    """
    _start(quiet)
    run_store = RunStore(run_dir)
    config = run_store.load_run_config()
    model = run_store.load_idea()
    hmm = run_store.load_arhmm()
    standardizer = run_store.load_standardizer()

    source = Path(input_path)
    x = RunStore(source.parent).read_matrix(source.name)
    frame = forecast_series(model, hmm, x, standardizer, config.train.env_forecast_mode, config.seed)

    target = Path(out_path)
    RunStore(target.parent).write_csv(target.name, frame)
    _summary("Forecast complete", [f"{len(frame)} steps written to {target}"])


if __name__ == "__main__":
    cli()
