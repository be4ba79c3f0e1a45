"""
Identifiable Disentangled Environment Model

Per-step encoders for stationary and nonstationary latents, one-shot latent
predictors for the horizon, per-step decoders, and modular priors whose
densities follow from the change of variables z -> noise.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from envshift.error_handler import ContractViolation, NumericError
from envshift.models.arhmm import Arhmm
from envshift.models.idea import ElboBreakdown, IdeaSpec
from envshift.services.arhmm import viterbi_batch
from envshift.services.generator import derive_seeds
from envshift.services.substrate import DTYPE, LOG_2PI, Mlp, gaussian_logpdf, reparam_sample

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4


# ============================================================================
# Modular priors
# ============================================================================


class AffinePrior(nn.Module):
    """
    eps_i = (z_i - mu_i(ctx)) / sigma_i(ctx), one context network per dimension.

    log p(z_i | ctx) = log N(eps_i; 0, 1) - log sigma_i(ctx)
    """

    def __init__(self, n_dims: int, ctx_dim: int, hidden: int, slope: float, seeds: list[int]):
        super().__init__()
        self.nets = nn.ModuleList(
            Mlp([ctx_dim, hidden, 2], slope=slope, seed=seeds[i]) for i in range(n_dims)
        )

    def location_scale(self, ctx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = torch.stack([net(ctx) for net in self.nets], dim=-2)  # ...×n_dims×2
        return out[..., 0], F.softplus(out[..., 1]) + SIGMA_FLOOR

    def noise(self, z: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        mu, sigma = self.location_scale(ctx)
        return (z - mu) / sigma

    def log_prob(self, z: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        """Elementwise log density (same shape as z)"""
        mu, sigma = self.location_scale(ctx)
        eps = (z - mu) / sigma
        return -0.5 * LOG_2PI - 0.5 * eps**2 - torch.log(sigma)


class NetworkPrior(nn.Module):
    """
    eps_i = r_i(z_i, ctx) with a general network per dimension.

    log p(z_i | ctx) = log N(eps_i; 0, 1) + log |d r_i / d z_i|, the derivative
    taken by double-backward so parameters still receive exact gradients.
    """

    def __init__(self, n_dims: int, ctx_dim: int, hidden: int, slope: float, seeds: list[int]):
        super().__init__()
        self.nets = nn.ModuleList(
            Mlp([1 + ctx_dim, hidden, hidden, 1], slope=slope, seed=seeds[i]) for i in range(n_dims)
        )

    def _noise(self, current: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        return torch.cat(
            [net(torch.cat([current[..., i : i + 1], ctx], dim=-1)) for i, net in enumerate(self.nets)],
            dim=-1,
        )

    def noise(self, z: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        return self._noise(z, ctx)

    def log_prob(self, z: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        # probe only the current-value path (ctx may itself be built from z)
        probe = torch.zeros_like(z, requires_grad=True)
        with torch.enable_grad():
            eps = self._noise(z + probe, ctx)
            (deriv,) = torch.autograd.grad(eps.sum(), probe, create_graph=True)
        return -0.5 * LOG_2PI - 0.5 * eps**2 + torch.log(deriv.abs())


# ============================================================================
# Model
# ============================================================================


class IdeaModel(nn.Module):
    """All networks of the variational model; forward() evaluates ELBO terms"""

    def __init__(self, spec: IdeaSpec):
        super().__init__()
        self.spec = spec
        s = spec
        h = spec.horizon
        seeds = derive_seeds(spec.seed, 6 + s.n_s + s.n_e)
        prior_cls = AffinePrior if s.prior_mode == "affine" else NetworkPrior

        self.enc_s = Mlp([s.n_obs, s.hidden, 2 * s.n_s], slope=s.slope, seed=seeds[0])
        self.enc_e = Mlp([s.n_obs, s.hidden, 2 * s.n_e], slope=s.slope, seed=seeds[1])
        self.pred_s = Mlp([s.t_split * s.n_s, s.hidden, 2 * h * s.n_s], slope=s.slope, seed=seeds[2])
        self.pred_e = Mlp([s.t_split * s.n_e, s.hidden, 2 * h * s.n_e], slope=s.slope, seed=seeds[3])
        self.dec_x = Mlp([s.n_s + s.n_e, s.hidden, s.n_obs], slope=s.slope, seed=seeds[4])
        self.dec_y = Mlp([s.n_s + s.n_e, s.hidden, s.n_obs], slope=s.slope, seed=seeds[5])
        self.prior_s = prior_cls(s.n_s, s.n_s * s.prior_lag, s.prior_hidden, s.slope, seeds[6 : 6 + s.n_s])
        self.prior_e = prior_cls(s.n_e, s.n_envs, s.prior_hidden, s.slope, seeds[6 + s.n_s :])

        self.alpha, self.beta, self.gamma = s.alpha, s.beta, s.gamma

    def forward(self, x: torch.Tensor, env: torch.Tensor, noise: Optional["NoiseBundle"] = None) -> "ElboTerms":
        return elbo_terms(self, x, env, noise)


@dataclass
class Posterior:
    """Gaussian parameters and reparameterised samples of one latent block"""

    mean: torch.Tensor
    logvar: torch.Tensor
    sample: torch.Tensor

    def log_q(self) -> torch.Tensor:
        """log q(sample) summed over time and dims (B)"""
        return gaussian_logpdf(self.sample, self.mean, self.logvar).sum(-1)


@dataclass
class Encoding:
    s: Posterior
    e: Posterior


@dataclass
class NoiseBundle:
    """Standard normal noise for every reparameterised sample of a batch"""

    s_hist: torch.Tensor  # B×t×n_s
    e_hist: torch.Tensor  # B×t×n_e
    s_fut: torch.Tensor  # B×h×n_s
    e_fut: torch.Tensor  # B×h×n_e

    @classmethod
    def draw(cls, spec: IdeaSpec, batch: int, generator: Optional[torch.Generator] = None) -> "NoiseBundle":
        t, h = spec.t_split, spec.horizon

        def normal(*shape):
            return torch.randn(shape, generator=generator, dtype=DTYPE)

        return cls(normal(batch, t, spec.n_s), normal(batch, t, spec.n_e), normal(batch, h, spec.n_s), normal(batch, h, spec.n_e))

    @classmethod
    def zeros(cls, spec: IdeaSpec, batch: int) -> "NoiseBundle":
        t, h = spec.t_split, spec.horizon
        z = lambda *shape: torch.zeros(shape, dtype=DTYPE)  # noqa: E731
        return cls(z(batch, t, spec.n_s), z(batch, t, spec.n_e), z(batch, h, spec.n_s), z(batch, h, spec.n_e))


@dataclass
class ElboTerms:
    """Batch-mean ELBO terms as differentiable tensors"""

    rec: torch.Tensor
    pre: torch.Tensor
    kld_s: torch.Tensor
    kld_e: torch.Tensor
    recon_mse: torch.Tensor  # detached diagnostic

    def weighted(self, alpha: float, beta: float, gamma: float) -> dict[str, torch.Tensor]:
        """Named terms of the negative ELBO (their sum is the training loss)"""
        return {
            "pre": -self.pre,
            "rec": -alpha * self.rec,
            "kld_s": beta * self.kld_s,
            "kld_e": gamma * self.kld_e,
        }

    def breakdown(self, alpha: float, beta: float, gamma: float) -> ElboBreakdown:
        return ElboBreakdown.from_parts(
            float(self.rec), float(self.pre), float(self.kld_s), float(self.kld_e), alpha, beta, gamma
        )


def _gaussian_head(out: torch.Tensor, width: int) -> tuple[torch.Tensor, torch.Tensor]:
    return out[..., :width], out[..., width:]


def _check_noise_shape(noise: Optional[torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    if noise is None:
        return torch.zeros_like(like)
    if noise.shape != like.shape:
        raise ContractViolation(f"noise shape {tuple(noise.shape)} != {tuple(like.shape)}")
    return noise


def encode(
    model: IdeaModel,
    x_hist: torch.Tensor,
    noise_s: Optional[torch.Tensor] = None,
    noise_e: Optional[torch.Tensor] = None,
) -> Encoding:
    """Per-step Gaussian posteriors of z^s_{1:t} and z^e_{1:t} (B×t×n)"""
    spec = model.spec
    if x_hist.ndim != 3 or x_hist.shape[1] != spec.t_split or x_hist.shape[2] != spec.n_obs:
        raise ContractViolation(
            f"lookback must be B×{spec.t_split}×{spec.n_obs}, got {tuple(x_hist.shape)}"
        )
    mean_s, logvar_s = _gaussian_head(model.enc_s(x_hist), spec.n_s)
    mean_e, logvar_e = _gaussian_head(model.enc_e(x_hist), spec.n_e)
    z_s = reparam_sample(mean_s, logvar_s, _check_noise_shape(noise_s, mean_s))
    z_e = reparam_sample(mean_e, logvar_e, _check_noise_shape(noise_e, mean_e))
    return Encoding(Posterior(mean_s, logvar_s, z_s), Posterior(mean_e, logvar_e, z_e))


def _predict_block(net: Mlp, z: torch.Tensor, horizon: int, width: int, noise: Optional[torch.Tensor]) -> Posterior:
    B = z.shape[0]
    out = net(z.reshape(B, -1)).reshape(B, horizon, 2 * width)
    mean, logvar = _gaussian_head(out, width)
    return Posterior(mean, logvar, reparam_sample(mean, logvar, _check_noise_shape(noise, mean)))


def predict_latents(
    model: IdeaModel,
    z_s_hist: torch.Tensor,
    z_e_hist: torch.Tensor,
    noise_s: Optional[torch.Tensor] = None,
    noise_e: Optional[torch.Tensor] = None,
) -> Encoding:
    """Gaussian predictions of z^s_{t+1:T} and z^e_{t+1:T} emitted in one shot"""
    spec = model.spec
    return Encoding(
        _predict_block(model.pred_s, z_s_hist, spec.horizon, spec.n_s, noise_s),
        _predict_block(model.pred_e, z_e_hist, spec.horizon, spec.n_e, noise_e),
    )


def decode(model: IdeaModel, z_s: torch.Tensor, z_e: torch.Tensor) -> torch.Tensor:
    """Historical reconstruction x̂_{1:t}"""
    return model.dec_x(torch.cat([z_s, z_e], dim=-1))


def forecast_decode(model: IdeaModel, z_s: torch.Tensor, z_e: torch.Tensor) -> torch.Tensor:
    """Future prediction x̂_{t+1:T}"""
    return model.dec_y(torch.cat([z_s, z_e], dim=-1))


def _stationary_context(z_s: torch.Tensor, lag: int) -> torch.Tensor:
    """Concatenated z_{t-1}, ..., z_{t-lag} for t = lag..T-1 (B×(T-lag)×n_s·lag)"""
    T = z_s.shape[1]
    return torch.cat([z_s[:, lag - k - 1 : T - k - 1] for k in range(lag)], dim=-1)


def stationary_prior_logp(model: IdeaModel, z_s: torch.Tensor, per_dim: bool = False) -> torch.Tensor:
    """
    log p(z^s_{1:T}) under the modular stationary prior (B, or B×n_s if per_dim).

    The first prior_lag steps are scored under N(0, I).
    """
    lag = model.spec.prior_lag
    if z_s.shape[1] < lag + 1:
        raise ContractViolation(f"trajectory must have >= {lag + 1} steps, got {z_s.shape[1]}")
    head = (-0.5 * LOG_2PI - 0.5 * z_s[:, :lag] ** 2).sum(1)
    body = model.prior_s.log_prob(z_s[:, lag:], _stationary_context(z_s, lag)).sum(1)
    logp = head + body
    return logp if per_dim else logp.sum(-1)


def nonstationary_prior_logp(model: IdeaModel, z_e: torch.Tensor, env: torch.Tensor) -> torch.Tensor:
    """
    log p(z^e_{1:T} | e_{1:T}) under the modular nonstationary prior (B).

    env holds integer labels (B×T, point mass) or state weights (B×T×E,
    expectation over the environment posterior).
    """
    E = model.spec.n_envs
    if env.ndim == 2:
        if env.numel() and (int(env.min()) < 0 or int(env.max()) >= E):
            raise ContractViolation(f"environment labels must lie in [0, {E})")
        onehot = F.one_hot(env.long(), E).to(DTYPE)
        return model.prior_e.log_prob(z_e, onehot).sum((1, 2))

    if env.shape[-1] != E:
        raise ContractViolation(f"environment weights need {E} columns, got {env.shape[-1]}")
    per_state = torch.stack(
        [
            model.prior_e.log_prob(z_e, F.one_hot(torch.full(z_e.shape[:2], k), E).to(DTYPE)).sum(-1)
            for k in range(E)
        ],
        dim=-1,
    )  # B×T×E
    return (env.to(DTYPE) * per_state).sum((1, 2))


def _finite(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NumericError(f"ELBO term '{name}' is not finite", term=name)
    return value


def elbo_terms(
    model: IdeaModel, x: torch.Tensor, env: torch.Tensor, noise: Optional[NoiseBundle] = None
) -> ElboTerms:
    """Batch-mean reconstruction, prediction and single-sample KL terms"""
    spec = model.spec
    if x.ndim != 3 or x.shape[1] != spec.window:
        raise ContractViolation(f"windows must be B×{spec.window}×n, got {tuple(x.shape)}")
    t = spec.t_split
    B = x.shape[0]
    if noise is None:
        noise = NoiseBundle.zeros(spec, B)

    hist = encode(model, x[:, :t], noise.s_hist, noise.e_hist)
    fut = predict_latents(model, hist.s.sample, hist.e.sample, noise.s_fut, noise.e_fut)

    x_rec = decode(model, hist.s.sample, hist.e.sample)
    x_pre = forecast_decode(model, fut.s.sample, fut.e.sample)
    obs_logvar = torch.full((spec.n_obs,), spec.obs_logvar, dtype=DTYPE)
    rec = gaussian_logpdf(x[:, :t], x_rec, obs_logvar).sum(1)
    pre = gaussian_logpdf(x[:, t:], x_pre, obs_logvar).sum(1)

    z_s = torch.cat([hist.s.sample, fut.s.sample], dim=1)
    z_e = torch.cat([hist.e.sample, fut.e.sample], dim=1)
    kld_s = hist.s.log_q() + fut.s.log_q() - stationary_prior_logp(model, z_s)
    kld_e = hist.e.log_q() + fut.e.log_q() - nonstationary_prior_logp(model, z_e, env)

    return ElboTerms(
        rec=_finite("rec", rec.mean()),
        pre=_finite("pre", pre.mean()),
        kld_s=_finite("kld_s", kld_s.mean()),
        kld_e=_finite("kld_e", kld_e.mean()),
        recon_mse=((x_rec - x[:, :t]) ** 2).mean().detach(),
    )


def elbo(
    model: IdeaModel,
    hmm: Optional[Arhmm],
    x: torch.Tensor,
    noise: Optional[NoiseBundle] = None,
    env: Optional[torch.Tensor] = None,
) -> ElboBreakdown:
    """
    ELBO breakdown of a batch of windows.

    Environment labels come from the frozen HMM's Viterbi path of each window
    unless given explicitly.
    """
    if env is None:
        if hmm is None:
            raise ContractViolation("elbo needs either environment labels or a fitted HMM")
        env = torch.as_tensor(viterbi_batch(hmm, x.detach().numpy()))
    with torch.no_grad() if model.spec.prior_mode == "affine" else torch.enable_grad():
        terms = elbo_terms(model, x, env, noise)
    return terms.breakdown(model.alpha, model.beta, model.gamma)


def to_tensor(x: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def model_to_json_dict(model: IdeaModel) -> dict:
    """Config echo plus named parameter arrays (idea_model.json)"""
    return {
        "spec": model.spec.model_dump(),
        "params": {name: p.detach().tolist() for name, p in model.state_dict().items()},
    }


def model_from_json_dict(data: dict) -> IdeaModel:
    try:
        model = IdeaModel(IdeaSpec(**data["spec"]))
        state = {name: torch.as_tensor(v, dtype=DTYPE) for name, v in data["params"].items()}
        model.load_state_dict(state)
    except (KeyError, RuntimeError, ValueError) as e:
        raise ContractViolation(f"Invalid model checkpoint: {e}") from e
    return model
