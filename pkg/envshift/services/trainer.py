"""
Two-Phase Trainer

Phase 1 fits the autoregressive HMM on the standardized training series;
phase 2 maximizes the ELBO with Adam while the HMM stays frozen and supplies
environment labels per window. Also hosts the forecasting and latent
extraction entry points used by the CLI.
"""

import logging
from collections import defaultdict
from typing import Any, Literal, Optional

import numpy as np
import pandas as pd
import torch
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, Field, field_validator
from torch.func import functional_call

from envshift.error_handler import ContractViolation, ErrorSeverity, with_error_handling
from envshift.models.arhmm import Arhmm, EmTrace
from envshift.models.generation import Dataset
from envshift.models.idea import ElboBreakdown, ForecastResult, IdeaSpec, TraceRow
from envshift.models.run_config import RunConfig, TrainSection
from envshift.services.arhmm import em_fit, predict_env, state_marginals, viterbi_batch
from envshift.services.generator import derive_seeds
from envshift.services.idea import (
    IdeaModel,
    NoiseBundle,
    encode,
    forecast_decode,
    predict_latents,
    to_tensor,
)
from envshift.services.substrate import AdamState, ParamVector, adam_step, loss_grad

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-12
# words 0-6 of the config seed stream belong to the generator
TRAIN_SEED_OFFSET = 7


# ============================================================================
# Preprocessing
# ============================================================================


class Standardizer(BaseModel):
    """Per-dimension z-scoring with training-split statistics"""

    mean: np.ndarray
    std: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @field_validator("mean", "std", mode="before")
    @classmethod
    def _as_array(cls, v):
        return np.asarray(v, dtype=np.float64)

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        # constant dimensions are only centred
        std = np.where(std < STD_FLOOR, 1.0, std)
        return cls(mean=x.mean(axis=0), std=std)

    @property
    def n_obs(self) -> int:
        return self.mean.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_obs:
            raise ContractViolation(f"Expected {self.n_obs} columns, got {x.shape[-1]}")
        return (x - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.std + self.mean

    def to_json_dict(self) -> dict[str, Any]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "Standardizer":
        return cls(mean=data["mean"], std=data["std"])


def make_windows(x: np.ndarray, window: int, stride: int = 1) -> np.ndarray:
    """Overlapping windows of a T×n series: N×window×n"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < window:
        raise ContractViolation(f"Series of length {x.shape[0]} is shorter than the window {window}")
    return np.ascontiguousarray(sliding_window_view(x, window, axis=0)[::stride].transpose(0, 2, 1))


def hmm_segments(x: np.ndarray, length: int) -> list[np.ndarray]:
    """Non-overlapping chunks treated as independent sequences (a short tail is kept if >= 2 steps)"""
    chunks = [x[i : i + length] for i in range(0, len(x), length)]
    return [c for c in chunks if len(c) >= 2]


# ============================================================================
# Phase 1
# ============================================================================


def _train_seeds(config: RunConfig) -> list[int]:
    return derive_seeds(config.seed, TRAIN_SEED_OFFSET + 5)[TRAIN_SEED_OFFSET:]


def fit_environment_model(
    x_std: np.ndarray, config: RunConfig
) -> tuple[Arhmm, EmTrace]:
    """Phase 1: Baum-Welch on segments of the standardized training series"""
    cfg = config.hmm
    segments = hmm_segments(x_std, cfg.segment_length)
    logger.info(
        f"Fitting ARHMM with {config.n_states} states on {len(segments)} segments "
        f"({cfg.restarts} restarts, {cfg.screen} screened starts each)"
    )
    return em_fit(
        segments,
        n_states=config.n_states,
        restarts=cfg.restarts,
        max_iters=cfg.max_iters,
        tol=cfg.tol,
        seed=_train_seeds(config)[0],
        var_floor=cfg.var_floor,
        screen=cfg.screen,
        screen_iters=cfg.screen_iters,
    )


# ============================================================================
# Phase 2
# ============================================================================


class TrainingResult(BaseModel):
    """Everything produced by a two-phase run"""

    hmm: Arhmm
    hmm_trace: Optional[EmTrace] = None
    model: IdeaModel
    trace: list[TraceRow] = Field(default_factory=list)
    standardizer: Standardizer

    class Config:
        arbitrary_types_allowed = True


def idea_spec_for(config: RunConfig, n_obs: int) -> IdeaSpec:
    """Model spec from the run config, with the ablation variant applied to the KL weights"""
    cfg = config.train
    return IdeaSpec(
        n_obs=n_obs,
        n_s=config.gen.n_s,
        n_e=config.gen.n_e,
        n_envs=config.n_states,
        t_split=config.gen.t_split,
        window=config.gen.window,
        hidden=cfg.hidden,
        prior_hidden=cfg.prior_hidden,
        prior_lag=cfg.prior_lag,
        slope=cfg.slope,
        prior_mode=cfg.prior_mode,
        alpha=cfg.alpha,
        beta=0.0 if cfg.variant == "no_stationary_prior" else cfg.beta,
        gamma=0.0 if cfg.variant == "no_nonstationary_prior" else cfg.gamma,
        obs_logvar=cfg.obs_logvar,
        seed=_train_seeds(config)[1],
    )


def window_environments(
    hmm: Arhmm,
    windows: np.ndarray,
    mode: Literal["viterbi", "posterior", "random"],
    seed: int = 0,
) -> torch.Tensor:
    """
    Environment conditioning of every window from the frozen HMM.

    viterbi: labels N×T_w; posterior: smoothed weights N×T_w×E;
    random: uniform labels (ablation).
    """
    if mode == "viterbi":
        return torch.as_tensor(viterbi_batch(hmm, windows))
    if mode == "posterior":
        return to_tensor(state_marginals(hmm, windows))
    rng = np.random.default_rng(seed)
    return torch.as_tensor(rng.integers(0, hmm.n_states, size=windows.shape[:2]))


def train_idea(
    windows: np.ndarray,
    env: torch.Tensor,
    spec: IdeaSpec,
    cfg: TrainSection,
    order_seed: int,
    noise_seed: int,
) -> tuple[IdeaModel, list[TraceRow]]:
    """Adam ascent on the ELBO over mini-batches of windows"""
    model = IdeaModel(spec)
    pv = ParamVector.from_module(model)
    params = pv.values
    state = AdamState.zeros(len(pv), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)

    X = to_tensor(windows)
    N = X.shape[0]
    rng = np.random.default_rng(order_seed)
    generator = torch.Generator().manual_seed(noise_seed)
    logger.info(f"Training on {N} windows: {len(pv)} parameters, {cfg.epochs} epochs, batch {cfg.batch}")

    trace = []
    for epoch in range(1, cfg.epochs + 1):
        sums = defaultdict(float)
        order = rng.permutation(N)
        for start in range(0, N, cfg.batch):
            idx = torch.as_tensor(order[start : start + cfg.batch])
            xb, eb = X[idx], env[idx]
            noise = NoiseBundle.draw(spec, len(idx), generator)
            last = {}

            def loss(flat):
                terms = functional_call(model, pv.as_dict(flat), (xb, eb, noise))
                last["terms"] = terms
                return terms.weighted(spec.alpha, spec.beta, spec.gamma)

            _, grad = loss_grad(loss, params)
            params, state = adam_step(params, grad, state)

            terms = last["terms"]
            for name in ("rec", "pre", "kld_s", "kld_e", "recon_mse"):
                sums[name] += float(getattr(terms, name)) * len(idx)

        means = {name: value / N for name, value in sums.items()}
        parts = ElboBreakdown.from_parts(
            means["rec"], means["pre"], means["kld_s"], means["kld_e"], spec.alpha, spec.beta, spec.gamma
        )
        row = TraceRow(epoch=epoch, **parts.model_dump(), recon_mse=means["recon_mse"])
        trace.append(row)
        logger.info(
            f"Epoch {epoch}: total {row.total:.4f} (rec {row.rec:.4f}, pre {row.pre:.4f}, "
            f"kld_s {row.kld_s:.4f}, kld_e {row.kld_e:.4f}), recon mse {row.recon_mse:.5f}"
        )

    pv.load_into(model, params)
    return model, trace


@with_error_handling(severity=ErrorSeverity.HIGH)
def train_two_phase(
    dataset: Dataset,
    config: RunConfig,
    hmm: Optional[Arhmm] = None,
    hmm_trace: Optional[EmTrace] = None,
) -> TrainingResult:
    """
    Fit the HMM (unless a frozen one is given), then the variational model.

    Deterministic given config.seed.
    """
    seeds = _train_seeds(config)
    standardizer = Standardizer.fit(dataset.x)
    x_std = standardizer.transform(dataset.x)

    if hmm is None:
        hmm, hmm_trace = fit_environment_model(x_std, config)
    elif hmm.n_obs != dataset.n_obs:
        raise ContractViolation(f"HMM expects {hmm.n_obs} observed dims, data has {dataset.n_obs}")

    spec = idea_spec_for(config, dataset.n_obs)
    if spec.n_envs != hmm.n_states:
        raise ContractViolation(f"HMM has {hmm.n_states} states, config expects {spec.n_envs}")

    windows = make_windows(x_std, config.gen.window, config.gen.stride)
    env_mode = "random" if config.train.variant == "random_env" else config.train.env_mode
    env = window_environments(hmm, windows, env_mode, seed=seeds[4])
    logger.info(f"Phase 2: {len(windows)} windows, environments from {env_mode}, variant {config.train.variant}")

    model, trace = train_idea(windows, env, spec, config.train, order_seed=seeds[2], noise_seed=seeds[3])
    return TrainingResult(hmm=hmm, hmm_trace=hmm_trace, model=model, trace=trace, standardizer=standardizer)


# ============================================================================
# Inference
# ============================================================================


def _forecast_batch(
    model: IdeaModel,
    hmm: Arhmm,
    lookbacks: np.ndarray,
    mode: Literal["argmax", "sample"] = "argmax",
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-mean rollout of standardized lookbacks (B×t×n) → (B×h×n, B×h)"""
    horizon = model.spec.horizon
    with torch.no_grad():
        hist = encode(model, to_tensor(lookbacks))
        fut = predict_latents(model, hist.s.sample, hist.e.sample)
        x_hat = forecast_decode(model, fut.s.sample, fut.e.sample).numpy()

    last = viterbi_batch(hmm, lookbacks)[:, -1]
    env_seeds = derive_seeds(seed, len(last))
    e_hat = np.stack(
        [predict_env(hmm, state, horizon, mode=mode, seed=s) for state, s in zip(last, env_seeds)]
    )
    return x_hat, e_hat


def forecast(
    model: IdeaModel,
    hmm: Arhmm,
    x_hist: np.ndarray,
    horizon: int,
    standardizer: Optional[Standardizer] = None,
    mode: Literal["argmax", "sample"] = "argmax",
    seed: int = 0,
) -> ForecastResult:
    """
    Forecast x_{t+1:t+horizon} from one lookback of length t_split.

    With a standardizer the input is on the original scale and so is the output.
    """
    if horizon != model.spec.horizon:
        raise ContractViolation(f"Model forecasts {model.spec.horizon} steps, asked for {horizon}")
    x_hist = np.asarray(x_hist, dtype=np.float64)
    if standardizer is not None:
        x_hist = standardizer.transform(x_hist)
    x_hat, e_hat = _forecast_batch(model, hmm, x_hist[None], mode, seed)
    x_hat = x_hat[0] if standardizer is None else standardizer.inverse(x_hat[0])
    return ForecastResult(x_hat=x_hat, e_hat=e_hat[0])


def forecast_series(
    model: IdeaModel,
    hmm: Arhmm,
    x: np.ndarray,
    standardizer: Standardizer,
    mode: Literal["argmax", "sample"] = "argmax",
    seed: int = 0,
) -> pd.DataFrame:
    """
    Forecast a whole series in consecutive non-overlapping windows.

    Each window's first t_split steps are the lookback; the remaining steps
    are predicted. Rows: t, xhat0..xhat{n-1}, e_hat (original scale).
    """
    spec = model.spec
    x_std = standardizer.transform(x)
    if len(x_std) < spec.window:
        raise ContractViolation(f"Series of length {len(x_std)} is shorter than the window {spec.window}")

    blocks = make_windows(x_std, spec.window, spec.window)
    x_hat, e_hat = _forecast_batch(model, hmm, blocks[:, : spec.t_split], mode, seed)
    starts = np.arange(len(blocks)) * spec.window
    t = (starts[:, None] + np.arange(spec.t_split, spec.window)).ravel()

    columns = [f"xhat{i}" for i in range(spec.n_obs)]
    frame = pd.DataFrame(standardizer.inverse(x_hat.reshape(-1, spec.n_obs)), columns=columns)
    frame.insert(0, "t", t)
    frame["e_hat"] = e_hat.ravel()
    logger.info(f"Forecast {len(blocks)} windows ({len(frame)} steps)")
    return frame


def encode_series(model: IdeaModel, x_std: np.ndarray) -> np.ndarray:
    """Per-step posterior means [z^s, z^e] of a standardized series (T×(n_s+n_e))"""
    spec = model.spec
    x_std = np.asarray(x_std, dtype=np.float64)
    if x_std.ndim != 2 or x_std.shape[1] != spec.n_obs:
        raise ContractViolation(f"Expected T×{spec.n_obs} observations, got {x_std.shape}")
    with torch.no_grad():
        X = to_tensor(x_std)
        mean_s = model.enc_s(X)[:, : spec.n_s]
        mean_e = model.enc_e(X)[:, : spec.n_e]
    return torch.cat([mean_s, mean_e], dim=-1).numpy()
