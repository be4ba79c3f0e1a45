"""
Synthetic Nonstationary Series Generator

Samples environments from a Markov chain with a minimum dwell of two steps,
environment-dependent Gaussian latents, stationary latents from a lagged
leaky-relu transition, and mixes both through an invertible network.
"""

import logging
from typing import Optional

import numpy as np
import torch

from envshift.error_handler import (
    AssumptionError,
    ContractViolation,
    ErrorSeverity,
    with_error_handling,
)
from envshift.models.generation import AssumptionReport, Dataset, MarkovSpec, TrueSystem
from envshift.models.run_config import GenSection, RunConfig
from envshift.services.substrate import DTYPE, Mlp, mlp_apply

logger = logging.getLogger(__name__)

MIN_DWELL = 2
RANK_THRESHOLD = 1e-6


def derive_seeds(seed: int, count: int) -> list[int]:
    """Independent integer seeds derived from one config seed"""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


# ============================================================================
# Random system construction
# ============================================================================


def random_markov_spec(n_envs: int, rng: np.random.Generator, self_blend: float = 0.7) -> MarkovSpec:
    """
    Dirichlet(1, ..., 1) rows blended with the identity: A = b·I + (1-b)·D.

    Resampled until A is numerically full rank.
    """
    for _ in range(100):
        rows = rng.dirichlet(np.ones(n_envs), size=n_envs)
        A = self_blend * np.eye(n_envs) + (1.0 - self_blend) * rows
        A = A / A.sum(axis=1, keepdims=True)
        if np.linalg.svd(A, compute_uv=False).min() > RANK_THRESHOLD:
            return MarkovSpec(A=A, pi=np.full(n_envs, 1.0 / n_envs))
    raise AssumptionError("Could not draw a full-rank transition matrix", violated=["full_rank"])


def _random_env_gaussians(cfg: GenSection, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Means and stds, resampled until the means are separated enough"""
    shape = (cfg.n_envs, cfg.n_e)
    for _ in range(1000):
        mean = rng.uniform(-cfg.env_mean_range, cfg.env_mean_range, size=shape)
        std = rng.uniform(cfg.env_std_min, cfg.env_std_max, size=shape)
        gaps = [
            np.linalg.norm(mean[a] - mean[b])
            for a in range(cfg.n_envs)
            for b in range(a + 1, cfg.n_envs)
        ]
        if min(gaps) >= cfg.separation_factor * std.max():
            return mean, std
    raise AssumptionError(
        "Could not draw separated environment means",
        violated=["mean_separation"],
        context={"separation_factor": cfg.separation_factor},
    )


def _random_stationary_transition(cfg: GenSection, rng: np.random.Generator) -> Mlp:
    """Leaky-relu transition with overall Lipschitz constant <= 0.9"""
    f_s = Mlp(
        [cfg.n_s * cfg.lag, cfg.stationary_hidden, cfg.n_s],
        slope=cfg.slope,
        seed=int(rng.integers(2**31)),
    )
    first, last = f_s.layers
    with torch.no_grad():
        first.weight.copy_(torch.as_tensor(rng.standard_normal(first.weight.shape)))
        first.weight.div_(torch.linalg.matrix_norm(first.weight, ord=2))
        last.weight.copy_(torch.as_tensor(rng.standard_normal(last.weight.shape)))
        last.weight.mul_(0.9 / torch.linalg.matrix_norm(last.weight, ord=2))
        first.bias.copy_(torch.as_tensor(0.1 * rng.standard_normal(first.bias.shape)))
        last.bias.zero_()
    return f_s


def _random_square_weight(n: int, rng: np.random.Generator) -> np.ndarray:
    """U diag(s) V^T with s in [1, 3]: condition number <= 3"""
    u, _ = np.linalg.qr(rng.standard_normal((n, n)))
    v, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return u @ np.diag(rng.uniform(1.0, 3.0, size=n)) @ v.T


def _random_mixing(n: int, slope: float, rng: np.random.Generator) -> Mlp:
    layers = [(_random_square_weight(n, rng), 0.1 * rng.standard_normal(n)) for _ in range(2)]
    return Mlp.from_weights(layers, activations=["leaky_relu", "leaky_relu"], slope=slope)


def random_true_system(cfg: GenSection, rng: np.random.Generator) -> TrueSystem:
    """Draw a complete ground-truth system from the generation config"""
    markov = random_markov_spec(cfg.n_envs, rng, cfg.self_blend)
    env_mean, env_std = _random_env_gaussians(cfg, rng)
    return TrueSystem(
        markov=markov,
        n_s=cfg.n_s,
        n_e=cfg.n_e,
        lag=cfg.lag,
        env_mean=env_mean,
        env_std=env_std,
        f_s=_random_stationary_transition(cfg, rng),
        noise_scale_s=cfg.noise_scale_s,
        g=_random_mixing(cfg.n_s + cfg.n_e, cfg.slope, rng),
    )


# ============================================================================
# Samplers
# ============================================================================


def sample_markov(spec: MarkovSpec, T: int, seed: int) -> np.ndarray:
    """
    Environment sequence e_1..e_T with every run lasting >= 2 steps.

    A state that has been occupied for a single step is kept for one more
    step; the final step never opens a new run.
    """
    if T < 2:
        raise ContractViolation(f"Need T >= 2 to sample an environment sequence, got {T}")

    rng = np.random.default_rng(seed)
    cum = np.cumsum(spec.A, axis=1)
    u = rng.random(T)

    e = np.empty(T, dtype=np.int64)
    e[0] = min(int(np.searchsorted(np.cumsum(spec.pi), u[0], side="right")), spec.n_envs - 1)
    run = 1
    for t in range(1, T):
        prev = e[t - 1]
        if run < MIN_DWELL:
            nxt = prev
        else:
            nxt = min(int(np.searchsorted(cum[prev], u[t], side="right")), spec.n_envs - 1)
            if t == T - 1 and nxt != prev:
                nxt = prev
        e[t] = nxt
        run = run + 1 if nxt == prev else 1
    return e


def sample_nonstationary(sys: TrueSystem, e: np.ndarray, seed: int) -> np.ndarray:
    """z^e_t = mu[e_t] + sigma[e_t] * eps_t"""
    e = np.asarray(e, dtype=np.int64)
    if e.size and (e.min() < 0 or e.max() >= sys.markov.n_envs):
        raise ContractViolation("environment labels out of range")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((len(e), sys.n_e))
    return sys.env_mean[e] + sys.env_std[e] * eps


def sample_stationary(sys: TrueSystem, T: int, seed: int) -> np.ndarray:
    """First L rows ~ N(0, I); then z_t = f_s(z_{t-1}, ..., z_{t-L}) + sigma_s * eps_t"""
    L = sys.lag
    if T <= L:
        raise ContractViolation(f"Need T > lag ({L}), got {T}")

    rng = np.random.default_rng(seed)
    z = np.empty((T, sys.n_s))
    z[:L] = rng.standard_normal((L, sys.n_s))
    eps = rng.standard_normal((T, sys.n_s))
    for t in range(L, T):
        history = z[t - L : t][::-1].reshape(-1)  # z_{t-1} first
        z[t] = mlp_apply(sys.f_s, history) + sys.noise_scale_s * eps[t]
    return z


def mix(sys: TrueSystem, z: np.ndarray) -> np.ndarray:
    """x_t = g(z_t) row by row"""
    if np.shape(z)[-1] != sys.n:
        raise ContractViolation(f"latent width {np.shape(z)[-1]} != n = {sys.n}")
    return mlp_apply(sys.g, np.asarray(z, dtype=np.float64))


def invert_mixing(
    sys: TrueSystem, x: np.ndarray, max_iters: int = 100, tol: float = 1e-10
) -> tuple[np.ndarray, np.ndarray]:
    """
    Damped Newton inversion of g, row by row.

    Returns:
        (z, residual) where residual[i] = max |g(z_i) - x_i|
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z_out = np.zeros_like(x)
    residual = np.zeros(len(x))

    def g(v: torch.Tensor) -> torch.Tensor:
        return sys.g(v)

    for i, target in enumerate(torch.as_tensor(x)):
        z = torch.zeros(sys.n, dtype=DTYPE)
        with torch.no_grad():
            r = g(z) - target
        for _ in range(max_iters):
            if r.abs().max() < tol:
                break
            J = torch.autograd.functional.jacobian(g, z)
            step = torch.linalg.solve(J, r)
            damping = 1.0
            with torch.no_grad():
                while damping > 1e-6:
                    candidate = z - damping * step
                    r_new = g(candidate) - target
                    if r_new.norm() < r.norm():
                        break
                    damping *= 0.5
            z, r = candidate, r_new
        z_out[i] = z.numpy()
        residual[i] = float(r.abs().max())
    return z_out, residual


# ============================================================================
# Assumption checks
# ============================================================================


def _run_lengths(e: np.ndarray) -> np.ndarray:
    boundaries = np.flatnonzero(np.diff(e)) + 1
    edges = np.concatenate([[0], boundaries, [len(e)]])
    return np.diff(edges)


def _w_matrix(sys: TrueSystem, points: np.ndarray) -> np.ndarray:
    """Rows j = 1..E-1: concat over points of w(z, e_j) - w(z, e_0)"""
    var = np.maximum(sys.env_std**2, 1e-12)

    def w(z, e):
        return -(z - sys.env_mean[e]) / var[e]

    return np.stack(
        [np.concatenate([w(z, j) - w(z, 0) for z in points]) for j in range(1, sys.markov.n_envs)]
    )


def _stationary_logp(sys: TrueSystem, k: int, z_k: float, history: np.ndarray) -> float:
    sigma = max(sys.noise_scale_s, 1e-6)
    mean = mlp_apply(sys.f_s, history)[k]
    return -0.5 * ((z_k - mean) / sigma) ** 2


def _v_vector(sys: TrueSystem, k: int, z_k: float, history: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Mixed partials d^2 log p(z_k | h) / dz_k dh_l by four-point differences"""
    out = np.empty(len(history))
    for l in range(len(history)):
        hp, hm = history.copy(), history.copy()
        hp[l] += step
        hm[l] -= step
        out[l] = (
            _stationary_logp(sys, k, z_k + step, hp)
            - _stationary_logp(sys, k, z_k + step, hm)
            - _stationary_logp(sys, k, z_k - step, hp)
            + _stationary_logp(sys, k, z_k - step, hm)
        ) / (4.0 * step * step)
    return out


def _v_min_singular(sys: TrueSystem, rng: np.random.Generator) -> float:
    worst = np.inf
    for k in range(sys.n_s):
        z_k = float(rng.standard_normal())
        histories = rng.standard_normal((sys.n_s + 1, sys.n_s * sys.lag))
        vs = np.stack([_v_vector(sys, k, z_k, h) for h in histories])
        diffs = vs[:-1] - vs[-1]  # n_s × n_s·L
        worst = min(worst, float(np.linalg.svd(diffs, compute_uv=False).min()))
    return worst


@with_error_handling(severity=ErrorSeverity.LOW)
def check_assumptions(
    sys: TrueSystem,
    e: np.ndarray,
    seed: int = 0,
    n_points: int = 8,
    separation_factor: float = 2.0,
) -> AssumptionReport:
    """Report-only numerical check of the identifiability assumptions"""
    rng = np.random.default_rng(seed)
    A = sys.markov.A
    E = sys.markov.n_envs

    min_sv = float(np.linalg.svd(A, compute_uv=False).min())
    off_diag = A[~np.eye(E, dtype=bool)]
    reducible = bool(off_diag.size and off_diag.min() == 0.0)
    if reducible:
        logger.warning("Transition matrix has zero off-diagonal entries (reducible chain)")

    min_dwell = int(_run_lengths(np.asarray(e)).min()) if len(e) else 0
    separation = sys.mean_separation()

    points = rng.uniform(-1.0, 1.0, size=(n_points, sys.n_e)) * (np.abs(sys.env_mean).max() + 1.0)
    w_sv = float(np.linalg.svd(_w_matrix(sys, points), compute_uv=False).min())
    v_sv = _v_min_singular(sys, rng)

    report = AssumptionReport(
        threshold=RANK_THRESHOLD,
        full_rank_ok=min_sv > RANK_THRESHOLD,
        min_singular_A=min_sv,
        reducible_warning=reducible,
        min_dwell=min_dwell,
        dwell_ok=min_dwell >= MIN_DWELL,
        mean_separation=separation,
        separation_ok=separation >= separation_factor * float(sys.env_std.max()),
        v_independence_ok=v_sv > RANK_THRESHOLD,
        v_min_singular=v_sv,
        w_independence_ok=w_sv > RANK_THRESHOLD,
        w_min_singular=w_sv,
    )
    logger.info(
        f"Assumptions: rank(A) min sv {min_sv:.3g}, min dwell {min_dwell}, "
        f"separation {separation:.3g}, v sv {v_sv:.3g}, w sv {w_sv:.3g}"
    )
    return report


# ============================================================================
# Full generation
# ============================================================================


def sample_dataset(sys: TrueSystem, T: int, seeds: list[int], cfg: GenSection) -> Dataset:
    """Compose the samplers into one windowed dataset"""
    e = sample_markov(sys.markov, T, seeds[0])
    z_e = sample_nonstationary(sys, e, seeds[1])
    z_s = sample_stationary(sys, T, seeds[2])
    x = mix(sys, np.concatenate([z_s, z_e], axis=1))
    return Dataset(
        x=x,
        e_true=e,
        z_s_true=z_s,
        z_e_true=z_e,
        window=cfg.window,
        stride=cfg.stride,
        t_split=cfg.t_split,
    )


@with_error_handling(severity=ErrorSeverity.HIGH)
def generate_checked(
    config: RunConfig, system: Optional[TrueSystem] = None
) -> tuple[TrueSystem, Dataset, Dataset, Optional[AssumptionReport]]:
    """
    Draw a system (unless given) and disjointly seeded train/test datasets.

    The assumption report is computed once on the train split and returned
    alongside the data; it is None when `gen.validate_assumptions` is off.

    Raises:
        AssumptionError: an identifiability assumption fails on the train split
    """
    cfg = config.gen
    seeds = derive_seeds(config.seed, 7)
    sys = system or random_true_system(cfg, np.random.default_rng(seeds[0]))

    train = sample_dataset(sys, cfg.t_train, seeds[1:4], cfg)
    test = sample_dataset(sys, cfg.t_test, seeds[4:7], cfg)
    logger.info(
        f"Generated {cfg.t_train} train / {cfg.t_test} test steps "
        f"(E={cfg.n_envs}, n_s={cfg.n_s}, n_e={cfg.n_e}, L={cfg.lag})"
    )

    report = None
    if cfg.validate_assumptions:
        report = check_assumptions(
            sys, train.e_true, seed=config.seed, separation_factor=cfg.separation_factor
        )
        if not report.all_ok:
            raise AssumptionError(
                f"Generated system violates: {', '.join(report.violations())}",
                violated=report.violations(),
                context=report.model_dump(),
            )
    return sys, train, test, report


def generate(
    config: RunConfig, system: Optional[TrueSystem] = None
) -> tuple[TrueSystem, Dataset, Dataset]:
    """`generate_checked` without the assumption report"""
    sys, train, test, _ = generate_checked(config, system)
    return sys, train, test
