"""
Autoregressive Hidden Markov Model

Log-space forward-backward, Viterbi decoding, Baum-Welch with closed-form
M-steps and future environment continuation. Routines work on stacks of
equal-length sequences (N×T×n) so many windows are processed at once.
"""

import logging
import math
from collections import defaultdict
from typing import Literal, Optional, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from envshift.error_handler import ContractViolation, ErrorSeverity, with_error_handling
from envshift.models.arhmm import VAR_FLOOR, Arhmm, EmTrace, Posteriors
from envshift.services.substrate import gaussian_logpdf

logger = logging.getLogger(__name__)

KMEANS_TRIES = 5
INIT_KINDS = ("level", "global", "diff")


# ============================================================================
# Emissions and recursions
# ============================================================================


def _as_stack(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] < 1:
        raise ContractViolation(f"Expected T×n or N×T×n observations with T >= 1, got {x.shape}")
    return x


def _previous(x: np.ndarray) -> np.ndarray:
    """x_{t-1} with an all-zero predecessor for t = 0 (N×T×n)"""
    prev = np.zeros_like(x)
    prev[:, 1:] = x[:, :-1]
    return prev


def _log(a: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(a)


def emission_logprob(model: Arhmm, x: np.ndarray) -> np.ndarray:
    """log p(x_t | x_{t-1}, e) for a stack: N×T×E"""
    x = _as_stack(x)
    mean = np.einsum("eij,ntj->ntei", model.W, _previous(x)) + model.b  # N×T×E×n
    return gaussian_logpdf(x[:, :, None, :], mean, model.logvar)


def _forward(log_b: np.ndarray, log_A: np.ndarray, log_pi: np.ndarray) -> np.ndarray:
    N, T, E = log_b.shape
    alpha = np.empty_like(log_b)
    alpha[:, 0] = log_pi + log_b[:, 0]
    for t in range(1, T):
        alpha[:, t] = logsumexp(alpha[:, t - 1, :, None] + log_A, axis=1) + log_b[:, t]
    return alpha


def _backward(log_b: np.ndarray, log_A: np.ndarray) -> np.ndarray:
    N, T, E = log_b.shape
    beta = np.zeros_like(log_b)
    for t in range(T - 2, -1, -1):
        beta[:, t] = logsumexp(log_A + (log_b[:, t + 1] + beta[:, t + 1])[:, None, :], axis=2)
    return beta


def _smooth(model: Arhmm, x: np.ndarray):
    """gamma (N×T×E), summed xi (N×E×E), per-sequence loglik (N), and per-step xi if wanted"""
    log_b = emission_logprob(model, x)
    log_A = _log(model.A)
    alpha = _forward(log_b, log_A, _log(model.pi))
    beta = _backward(log_b, log_A)
    ll = logsumexp(alpha[:, -1], axis=1)
    gamma = np.exp(alpha + beta - ll[:, None, None])
    log_xi = (
        alpha[:, :-1, :, None]
        + log_A
        + (log_b[:, 1:] + beta[:, 1:])[:, :, None, :]
        - ll[:, None, None, None]
    )
    return gamma, np.exp(log_xi), ll


def loglik(model: Arhmm, x: np.ndarray) -> float:
    """log p(x_1..x_T) by the log-space forward recursion"""
    x = _as_stack(x)
    alpha = _forward(emission_logprob(model, x), _log(model.A), _log(model.pi))
    return float(logsumexp(alpha[:, -1], axis=1).sum())


def posterior_smooth(model: Arhmm, x: np.ndarray) -> Posteriors:
    """State and pairwise marginals of one T×n sequence"""
    gamma, xi, ll = _smooth(model, np.asarray(x)[None] if np.ndim(x) == 2 else x)
    return Posteriors(gamma=gamma[0], xi=xi[0], loglik=float(ll[0]))


def state_marginals(model: Arhmm, x: np.ndarray) -> np.ndarray:
    """Smoothed state probabilities for a stack (N×T×E)"""
    gamma, _, _ = _smooth(model, _as_stack(x))
    return gamma


def viterbi_batch(model: Arhmm, x: np.ndarray) -> np.ndarray:
    """Most probable paths for a stack (N×T); ties go to the lower state index"""
    log_b = emission_logprob(model, x)
    log_A = _log(model.A)
    N, T, E = log_b.shape

    delta = _log(model.pi) + log_b[:, 0]
    back = np.zeros((N, T, E), dtype=np.int64)
    for t in range(1, T):
        scores = delta[:, :, None] + log_A  # from i to j
        back[:, t] = np.argmax(scores, axis=1)
        delta = np.take_along_axis(scores, back[:, t][:, None, :], axis=1)[:, 0] + log_b[:, t]

    path = np.empty((N, T), dtype=np.int64)
    path[:, -1] = np.argmax(delta, axis=1)
    for t in range(T - 1, 0, -1):
        path[:, t - 1] = back[np.arange(N), t, path[:, t]]
    return path


def viterbi(model: Arhmm, x: np.ndarray) -> np.ndarray:
    """Most probable environment path of one T×n sequence"""
    return viterbi_batch(model, _as_stack(x))[0]


def path_logprob(model: Arhmm, x: np.ndarray, path: np.ndarray) -> float:
    """log p(e_1..e_T, x_1..x_T) for a given path"""
    log_b = emission_logprob(model, x)[0]
    path = np.asarray(path)
    value = _log(model.pi)[path[0]] + log_b[0, path[0]]
    for t in range(1, len(path)):
        value += _log(model.A)[path[t - 1], path[t]] + log_b[t, path[t]]
    return float(value)


def predict_env(
    model: Arhmm,
    last_state: int,
    horizon: int,
    mode: Literal["argmax", "sample"] = "argmax",
    seed: Optional[int] = None,
) -> np.ndarray:
    """Continue an environment path for `horizon` steps from the transition matrix"""
    if horizon < 1:
        raise ContractViolation(f"horizon must be >= 1, got {horizon}")
    rng = np.random.default_rng(seed)
    cum = np.cumsum(model.A, axis=1)
    out = np.empty(horizon, dtype=np.int64)
    state = int(last_state)
    for h in range(horizon):
        if mode == "argmax":
            state = int(np.argmax(model.A[state]))
        else:
            state = min(int(np.searchsorted(cum[state], rng.random(), side="right")), model.n_states - 1)
        out[h] = state
    return out


# ============================================================================
# Baum-Welch
# ============================================================================


def _group_by_length(sequences: Sequence[np.ndarray]) -> list[np.ndarray]:
    groups = defaultdict(list)
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.float64)
        if seq.ndim != 2 or seq.shape[0] < 2:
            raise ContractViolation(f"Each EM sequence must be T×n with T >= 2, got {seq.shape}")
        groups[seq.shape[0]].append(seq)
    widths = {g[0].shape[1] for g in groups.values()}
    if len(widths) != 1:
        raise ContractViolation(f"EM sequences disagree on width: {sorted(widths)}")
    return [np.stack(groups[T]) for T in sorted(groups)]


def _design(x: np.ndarray) -> np.ndarray:
    """Regressors [x_{t-1}, 1] for every step of a stack: N×T×(n+1)"""
    prev = _previous(x)
    return np.concatenate([prev, np.ones(prev.shape[:2] + (1,))], axis=2)


def _m_step(
    stacks: list[np.ndarray],
    gammas: list[np.ndarray],
    xi_sum: np.ndarray,
    start_sum: np.ndarray,
    previous: Optional[Arhmm],
    var_floor: float,
) -> tuple[Arhmm, bool]:
    """Closed-form maximiser; states without mass keep their previous parameters"""
    E = xi_sum.shape[0]
    n = stacks[0].shape[2]

    S_pp = np.zeros((E, n + 1, n + 1))
    S_px = np.zeros((E, n + 1, n))
    S_xx = np.zeros((E, n))
    mass = np.zeros(E)
    for x, gamma in zip(stacks, gammas):
        phi = _design(x)
        S_pp += np.einsum("nte,nti,ntj->eij", gamma, phi, phi)
        S_px += np.einsum("nte,nti,ntj->eij", gamma, phi, x)
        S_xx += np.einsum("nte,ntj->ej", gamma, x**2)
        mass += gamma.sum(axis=(0, 1))

    W = np.zeros((E, n, n))
    b = np.zeros((E, n))
    logvar = np.zeros((E, n))
    floor_active = False
    for e in range(E):
        if mass[e] <= 1e-12 and previous is not None:
            W[e], b[e], logvar[e] = previous.W[e], previous.b[e], previous.logvar[e]
            continue
        theta = np.linalg.lstsq(S_pp[e], S_px[e], rcond=None)[0]  # (n+1)×n
        resid = S_xx[e] - 2.0 * np.einsum("ij,ij->j", theta, S_px[e]) + np.einsum(
            "ij,ik,kj->j", theta, S_pp[e], theta
        )
        var = resid / max(mass[e], 1e-300)
        if (var < var_floor).any():
            floor_active = True
        W[e] = theta[:n].T
        b[e] = theta[n]
        logvar[e] = np.log(np.maximum(var, var_floor))

    A = xi_sum.copy()
    empty = A.sum(axis=1) <= 1e-300
    if previous is not None:
        A[empty] = previous.A[empty]
    else:
        A[empty] = 1.0 / E
    A = A / A.sum(axis=1, keepdims=True)
    pi = start_sum / start_sum.sum()

    return Arhmm(A=A, pi=pi, W=W, b=b, logvar=logvar, var_floor=var_floor), floor_active


def _model_from_labels(
    stacks: list[np.ndarray], labels: list[np.ndarray], E: int, var_floor: float
) -> Arhmm:
    """Initial model from hard state assignments (transition counts + 1)"""
    gammas = [np.eye(E)[lab] for lab in labels]
    xi_sum = np.ones((E, E))
    start = np.ones(E)
    for lab in labels:
        np.add.at(xi_sum, (lab[:, :-1].ravel(), lab[:, 1:].ravel()), 1.0)
        np.add.at(start, lab[:, 0], 1.0)
    # every state needs mass for a defined regression
    gammas = [0.98 * g + 0.02 / E for g in gammas]
    model, _ = _m_step(stacks, gammas, xi_sum, start, None, var_floor)
    return model


def _init_global(stacks: list[np.ndarray], E: int, rng: np.random.Generator, var_floor: float) -> Arhmm:
    """One AR fit for all data, perturbed per state"""
    ones = [np.ones(x.shape[:2] + (1,)) for x in stacks]
    base, _ = _m_step(stacks, ones, np.ones((1, 1)), np.ones(1), None, var_floor)
    scale = np.exp(0.5 * base.logvar[0])
    W = base.W[0] + 0.1 * rng.standard_normal((E, *base.W[0].shape))
    b = base.b[0] + scale * rng.standard_normal((E, base.n_obs))
    A = 0.8 * np.eye(E) + 0.2 / E
    return Arhmm(
        A=A / A.sum(axis=1, keepdims=True),
        pi=np.full(E, 1.0 / E),
        W=W,
        b=b,
        logvar=np.repeat(base.logvar, E, axis=0),
        var_floor=var_floor,
    )


def _kmeans_labels(flat: np.ndarray, E: int, rng: np.random.Generator, tries: int) -> np.ndarray:
    """Best of several k-means++ runs by within-cluster sum of squares"""
    best, best_cost = None, math.inf
    for _ in range(tries):
        centroids, labels = kmeans2(flat, E, minit="++", rng=rng)
        cost = float(((flat - centroids[labels]) ** 2).sum())
        if cost < best_cost:
            best, best_cost = labels, cost
    return best


def _init_kmeans(
    stacks: list[np.ndarray], E: int, rng: np.random.Generator, var_floor: float, on: str
) -> Arhmm:
    """k-means on one-step differences (or levels) assigns initial states"""
    feats = [np.diff(x, axis=1, prepend=x[:, :1]) if on == "diff" else x for x in stacks]
    flat = np.concatenate([f.reshape(-1, f.shape[2]) for f in feats])
    labels = _kmeans_labels(flat, E, rng, KMEANS_TRIES)
    out, offset = [], 0
    for f in feats:
        size = f.shape[0] * f.shape[1]
        out.append(labels[offset : offset + size].reshape(f.shape[:2]))
        offset += size
    return _model_from_labels(stacks, out, E, var_floor)


def _initial_model(restart: int, stacks, E, rng, var_floor) -> Arhmm:
    if E == 1:
        return _init_global(stacks, 1, rng, var_floor)
    kind = INIT_KINDS[restart % len(INIT_KINDS)]
    if kind == "global":
        return _init_global(stacks, E, rng, var_floor)
    return _init_kmeans(stacks, E, rng, var_floor, on=kind)


def _run_em(model: Arhmm, stacks, max_iters, tol, var_floor) -> tuple[Arhmm, list[float], bool, bool]:
    trace: list[float] = []
    floor_any = False
    converged = False
    for _ in range(max_iters):
        gammas, xi_sum, start_sum, ll = [], 0.0, 0.0, 0.0
        for x in stacks:
            gamma, xi, seq_ll = _smooth(model, x)
            gammas.append(gamma)
            xi_sum = xi_sum + xi.sum(axis=(0, 1))
            start_sum = start_sum + gamma[:, 0].sum(axis=0)
            ll += float(seq_ll.sum())
        if trace and abs(ll - trace[-1]) < tol * max(1.0, abs(trace[-1])):
            trace.append(ll)
            converged = True
            break
        trace.append(ll)
        model, floor_active = _m_step(stacks, gammas, xi_sum, start_sum, model, var_floor)
        floor_any = floor_any or floor_active
    return model, trace, floor_any, converged


@with_error_handling(severity=ErrorSeverity.HIGH)
def em_fit(
    sequences: Sequence[np.ndarray] | np.ndarray,
    n_states: int,
    restarts: int = 5,
    max_iters: int = 200,
    tol: float = 1e-6,
    seed: int = 0,
    var_floor: float = VAR_FLOOR,
    screen: int = 4,
    screen_iters: int = 10,
) -> tuple[Arhmm, EmTrace]:
    """
    Baum-Welch over independent sequences sharing parameters; best restart wins.

    Each restart draws `screen` initial models, runs `screen_iters` EM
    iterations from each and continues only the one with the highest loglik.
    The continuation's trace extends the winner's, so it stays non-decreasing.

    The model returned is the one evaluated at the last recorded loglik, so
    the final trace value is the loglik of the returned model.
    """
    if n_states < 1 or restarts < 1 or screen < 1 or screen_iters < 1:
        raise ContractViolation("n_states, restarts, screen and screen_iters must be >= 1")
    stacks = _group_by_length(list(sequences))
    rng = np.random.default_rng(seed)
    warm = min(screen_iters, max_iters)
    n_candidates = screen if n_states > 1 else 1

    trace = EmTrace()
    best, best_ll = None, -math.inf
    for r in range(restarts):
        candidates = [
            _run_em(_initial_model(r, stacks, n_states, rng, var_floor), stacks, warm, tol, var_floor)
            for _ in range(n_candidates)
        ]
        model, lls, floor_active, converged = max(candidates, key=lambda c: c[1][-1])
        logger.debug(f"EM restart {r}: screened {n_candidates} starts, best loglik {lls[-1]:.6f}")
        if not converged and max_iters > warm:
            model, more, floor_more, converged = _run_em(model, stacks, max_iters - warm, tol, var_floor)
            lls = lls + more
            floor_active = floor_active or floor_more
        if not converged:
            # score the final M-step so the returned model matches its loglik
            final = sum(loglik(model, x) for x in stacks)
            lls.append(final)
        trace.logliks.append(lls)
        trace.floor_active.append(floor_active)
        trace.converged.append(converged)
        if floor_active:
            logger.warning(f"EM restart {r}: variance floor {var_floor:g} active")
        logger.info(f"EM restart {r}: {len(lls)} iterations, loglik {lls[-1]:.6f}")
        if lls[-1] > best_ll:
            best, best_ll, trace.best_restart = model, lls[-1], r

    return best, trace
