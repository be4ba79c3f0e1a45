"""
Shared fixtures: small configs, a tiny generated system and toy model specs.
"""

import math

import numpy as np
import pytest
import torch
import yaml

from envshift.config import parse_run_config
from envshift.models.arhmm import Arhmm
from envshift.models.idea import IdeaSpec
from envshift.services.generator import generate

TINY = {
    "seed": 3,
    "gen": {
        "n_s": 2,
        "n_e": 2,
        "n_envs": 2,
        "t_train": 600,
        "t_test": 200,
        "window": 8,
        "stride": 4,
        "t_split": 6,
        "validate_assumptions": False,
    },
    "hmm": {"restarts": 2, "max_iters": 30, "screen": 2, "screen_iters": 5, "segment_length": 100},
    "train": {"hidden": 16, "prior_hidden": 8, "epochs": 1, "batch": 32},
}


def tiny_dict(**overrides) -> dict:
    """Deep copy of the tiny config with per-section overrides"""
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TINY.items()}
    for section, values in overrides.items():
        if isinstance(values, dict):
            data.setdefault(section, {}).update(values)
        else:
            data[section] = values
    return data


@pytest.fixture
def tiny_config():
    return parse_run_config(tiny_dict())


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_dict()))
    return path


@pytest.fixture
def tiny_data(tiny_config):
    """(system, train, test) generated from the tiny config"""
    return generate(tiny_config)


@pytest.fixture
def toy_spec():
    return IdeaSpec(
        n_obs=4,
        n_s=2,
        n_e=2,
        n_envs=2,
        t_split=4,
        window=6,
        hidden=8,
        prior_hidden=4,
        obs_logvar=0.0,
        alpha=1.0,
        beta=1.0,
        gamma=1.0,
        seed=11,
    )


def random_arhmm(rng: np.random.Generator, E: int, n: int) -> Arhmm:
    A = rng.dirichlet(np.ones(E), size=E)
    return Arhmm(
        A=A,
        pi=rng.dirichlet(np.ones(E)),
        W=0.5 * rng.standard_normal((E, n, n)),
        b=rng.standard_normal((E, n)),
        logvar=rng.uniform(-1.0, 0.5, size=(E, n)),
    )


def inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


def set_unit_prior(prior, mean: float = 0.0, std: float = 1.0) -> None:
    """Make every context network of an affine prior emit (mean, std) for any context"""
    from envshift.services.idea import SIGMA_FLOOR

    with torch.no_grad():
        for net in prior.nets:
            net.zero_()
            net.layers[-1].bias.copy_(
                torch.tensor([mean, inverse_softplus(std - SIGMA_FLOOR)], dtype=torch.float64)
            )
