"""
Identifiability and Forecasting Metrics

Permutation-matched latent correlations (MCC), environment accuracy up to
label swapping, transition matrix error and forecast errors, plus the
report assembled from a run directory.
"""

import itertools
import logging
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from envshift.config import settings
from envshift.error_handler import (
    ContractViolation,
    DataFileError,
    ErrorSeverity,
    UnsupportedSizeError,
    with_error_handling,
)
from envshift.models.metrics import MetricsReport
from envshift.utils.state import RunStore

logger = logging.getLogger(__name__)

EXHAUSTIVE_MAX = 8

Correlation = Literal["pearson", "spearman"]


# ============================================================================
# Latent recovery
# ============================================================================


def correlation_matrix(z_true: np.ndarray, z_est: np.ndarray, method: Correlation = "pearson") -> np.ndarray:
    """|ρ| between every true (rows) and estimated (columns) dimension; constant columns give 0"""
    a = np.asarray(z_true, dtype=np.float64)
    b = np.asarray(z_est, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ContractViolation(f"Latent arrays must share a T×d shape, got {a.shape} and {b.shape}")
    if a.shape[0] < 3:
        raise ContractViolation(f"Need at least 3 samples, got {a.shape[0]}")
    if method == "spearman":
        a, b = rankdata(a, axis=0), rankdata(b, axis=0)

    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    denom = np.outer(na, nb)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(denom > 0, np.abs(a.T @ b) / denom, 0.0)
    return np.clip(corr, 0.0, 1.0)


def best_assignment(score: np.ndarray) -> np.ndarray:
    """
    One-to-one assignment maximising the summed score of a square matrix.

    Exhaustive for d <= 8 (first maximum in lexicographic order),
    Hungarian otherwise. Row i is matched to column result[i].
    """
    d = score.shape[0]
    if d <= EXHAUSTIVE_MAX:
        perms = np.array(list(itertools.permutations(range(d))))
        totals = score[np.arange(d), perms].sum(axis=1)
        return perms[int(np.argmax(totals))]
    rows, cols = linear_sum_assignment(score, maximize=True)
    return cols[np.argsort(rows)]


def mcc(z_true: np.ndarray, z_est: np.ndarray, method: Correlation = "pearson") -> tuple[float, np.ndarray]:
    """Mean matched |correlation| and the assignment true dim → estimated dim"""
    corr = correlation_matrix(z_true, z_est, method)
    assignment = best_assignment(corr)
    score = float(corr[np.arange(len(assignment)), assignment].mean())
    return score, assignment


def cca_mcc(z_true: np.ndarray, z_est: np.ndarray, method: Correlation = "pearson") -> float:
    """
    MCC after regressing the true latents on the estimated ones.

    Block-wise (subspace) recovery scores high here even when raw MCC does
    not; reported as a diagnostic next to the raw score.
    """
    z_true = np.asarray(z_true, dtype=np.float64)
    z_est = np.asarray(z_est, dtype=np.float64)
    if z_true.shape != z_est.shape:
        raise ContractViolation(f"Latent arrays must share a shape, got {z_true.shape} and {z_est.shape}")
    design = np.column_stack([z_est, np.ones(len(z_est))])
    coef, *_ = np.linalg.lstsq(design, z_true, rcond=None)
    return mcc(z_true, design @ coef, method)[0]


# ============================================================================
# Environments
# ============================================================================


def env_accuracy(e_true: np.ndarray, e_est: np.ndarray, n_envs: int) -> tuple[float, np.ndarray]:
    """
    Best accuracy over all relabelings of the estimate.

    best_perm[k] is the true label assigned to estimated label k.

    Raises:
        UnsupportedSizeError: n_envs > 8
    """
    if n_envs > EXHAUSTIVE_MAX:
        raise UnsupportedSizeError(f"Exhaustive label matching supports at most {EXHAUSTIVE_MAX} environments, got {n_envs}")
    e_true = np.asarray(e_true, dtype=np.int64)
    e_est = np.asarray(e_est, dtype=np.int64)
    if e_true.shape != e_est.shape or e_true.ndim != 1 or len(e_true) == 0:
        raise ContractViolation(f"Environment sequences must have equal non-zero length, got {e_true.shape} and {e_est.shape}")
    for labels in (e_true, e_est):
        if labels.min() < 0 or labels.max() >= n_envs:
            raise ContractViolation(f"Environment labels must lie in [0, {n_envs})")

    confusion = np.zeros((n_envs, n_envs), dtype=np.int64)
    np.add.at(confusion, (e_est, e_true), 1)
    perms = np.array(list(itertools.permutations(range(n_envs))))
    hits = confusion[np.arange(n_envs), perms].sum(axis=1)
    best = int(np.argmax(hits))
    return float(hits[best]) / len(e_true), perms[best]


def transition_mse(A_true: np.ndarray, A_est: np.ndarray, perm: np.ndarray) -> float:
    """
    Mean squared entry error after relabeling the estimate.

    perm is the env_accuracy matching (estimated label → true label).
    """
    A_true = np.asarray(A_true, dtype=np.float64)
    A_est = np.asarray(A_est, dtype=np.float64)
    perm = np.asarray(perm, dtype=np.int64)
    E = A_true.shape[0]
    if A_true.shape != (E, E) or A_est.shape != (E, E) or perm.shape != (E,):
        raise ContractViolation(
            f"Transition matrices and permutation sizes disagree: {A_true.shape}, {A_est.shape}, {perm.shape}"
        )
    if sorted(perm.tolist()) != list(range(E)):
        raise ContractViolation(f"{perm.tolist()} is not a permutation")
    to_est = np.argsort(perm)
    return float(((A_true - A_est[np.ix_(to_est, to_est)]) ** 2).mean())


# ============================================================================
# Forecasts
# ============================================================================


def forecast_errors(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float, float]:
    """(MSE, MAE) over all elements"""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ContractViolation(f"Forecast shape {y_pred.shape} does not match truth {y_true.shape}")
    diff = y_true - y_pred
    return float((diff**2).mean()), float(np.abs(diff).mean())


# ============================================================================
# Report
# ============================================================================


def _latent_metrics(report: MetricsReport, data: RunStore, run: RunStore, cca: bool) -> None:
    z_s = data.read_matrix("latents_s.csv", required=False)
    z_e = data.read_matrix("latents_e.csv", required=False)
    z_hat = run.read_csv("latents_hat.csv", required=False)
    if z_s is None or z_e is None or z_hat is None:
        report.missing.append("latents")
        logger.warning("Latent ground truth or estimates missing; MCC fields left null")
        return

    n_s = sum(c.startswith("zs") for c in z_hat.columns)
    hat = z_hat.drop(columns=["t"], errors="ignore").to_numpy(dtype=np.float64)
    method = report.correlation_method
    report.mcc_s = mcc(z_s, hat[:, :n_s], method)[0]
    report.mcc_e = mcc(z_e, hat[:, n_s:], method)[0]

    z_all = np.hstack([z_s, z_e])
    report.mcc_all, assignment = mcc(z_all, hat, method)
    report.assignment = assignment.tolist()
    report.correlation = correlation_matrix(z_all, hat, method).tolist()
    if cca:
        report.diagnostic_cca_mcc_all = cca_mcc(z_all, hat, method)


def _env_metrics(report: MetricsReport, data_root: RunStore, data: RunStore, run: RunStore) -> None:
    e_true = data.read_labels("envs.csv", required=False)
    e_hat = run.read_labels("envs_hat.csv", required=False)
    if e_true is None or e_hat is None:
        report.missing.append("environments")
        logger.warning("envs.csv or envs_hat.csv missing; environment fields left null")
        return

    A_true = data_root.read_matrix("transition.csv", required=False, header=False)
    n_true = A_true.shape[0] if A_true is not None else int(e_true.max()) + 1
    n_envs = max(n_true, int(e_hat.max()) + 1)
    report.env_accuracy, perm = env_accuracy(e_true, e_hat, n_envs)
    report.best_perm = perm.tolist()

    hmm_json = run.read_json("arhmm.json", required=False)
    if A_true is None or hmm_json is None:
        report.missing.append("transition")
        logger.warning("transition.csv or arhmm.json missing; a_mse left null")
        return
    A_est = np.asarray(hmm_json["A"], dtype=np.float64)
    if A_est.shape != A_true.shape:
        logger.warning(f"Estimated {A_est.shape[0]} states vs {A_true.shape[0]} true; a_mse left null")
        return
    report.a_mse = transition_mse(A_true, A_est, perm)


def _forecast_metrics(report: MetricsReport, data: RunStore, run: RunStore) -> None:
    frame = run.read_csv("forecast.csv", required=False)
    x = data.read_matrix("observations.csv", required=False)
    if frame is None or x is None:
        report.missing.append("forecast")
        logger.warning("forecast.csv or test observations missing; forecast fields left null")
        return
    t = frame["t"].to_numpy(dtype=np.int64)
    pred = frame[[c for c in frame.columns if c.startswith("xhat")]].to_numpy(dtype=np.float64)
    report.forecast_mse, report.forecast_mae = forecast_errors(x[t], pred)


@with_error_handling(severity=ErrorSeverity.MEDIUM)
def report(run_dir: str | Path, data_dir: Optional[str | Path] = None) -> MetricsReport:
    """
    Assemble every computable metric of a run directory into metrics.json.

    The data directory defaults to paths.data_dir of the run's config echo.

    Raises:
        DataFileError: the config echo is missing or no metric can be computed
    """
    run = RunStore(run_dir)
    config = None
    config_name = settings.default_config_name
    if run.exists(config_name):
        config = run.load_run_config()
    elif data_dir is None:
        raise DataFileError(f"Required file not found: {run.path(config_name)}", path=str(run.path(config_name)))

    data_root = RunStore(data_dir if data_dir is not None else config.paths.data_dir)
    test = data_root.sub("test")
    eval_cfg = config.eval if config is not None else None

    metrics = MetricsReport(correlation_method=eval_cfg.correlation if eval_cfg else "pearson")
    _latent_metrics(metrics, test, run, cca=eval_cfg.cca_diagnostic if eval_cfg else True)
    _env_metrics(metrics, data_root, test, run)
    _forecast_metrics(metrics, test, run)

    trace = run.read_csv("trace.csv", required=False)
    if trace is not None and len(trace):
        metrics.final_elbo = float(trace["total"].iloc[-1])

    if not metrics.has_any_metric():
        raise DataFileError(f"No metric could be computed from {run.directory}", path=str(run.directory))

    run.write_json("metrics.json", metrics.model_dump())
    if metrics.mcc_all is not None:
        logger.info(f"MCC all {metrics.mcc_all:.4f} ({100 * metrics.mcc_all:.1f} / 100)")
    if metrics.env_accuracy is not None:
        logger.info(f"Environment accuracy {metrics.env_accuracy:.4f}, A-MSE {metrics.a_mse}")
    if metrics.forecast_mse is not None:
        logger.info(f"Forecast MSE {metrics.forecast_mse:.5f}, MAE {metrics.forecast_mae:.5f}")
    return metrics
