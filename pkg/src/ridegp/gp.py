"""Exact Gaussian process inference with cached factorisation constants."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .kernels import (
    KernelExpr,
    check_theta,
    gram_diag,
    gram_matrix,
    grad_theta,
    input_gradient_matrix,
    parse_kernel_spec,
)

__all__ = [
    "CholeskyError",
    "PredictiveDistribution",
    "TrainedModel",
    "fit_cache",
    "lml_and_gradient",
    "lml_gradient",
    "load_model",
    "log_marginal_likelihood",
    "model_from_dict",
    "model_to_dict",
    "predict",
    "predictive_mean_gradient",
    "predictive_mean_gradients",
    "save_model",
]

JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)
NEGATIVE_VARIANCE_TOL = 1e-8
LOG_2PI = np.log(2.0 * np.pi)


class CholeskyError(np.linalg.LinAlgError):
    """Covariance matrix could not be factorised even with the largest jitter."""


def _data(X, Y):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError(f"need at least one training input, got shape {X.shape}")
    if Y.shape != (X.shape[0],):
        raise ValueError(f"targets shape {Y.shape} does not match {X.shape[0]} inputs")
    return X, Y


def factorize(K):
    """Cholesky of ``K`` with the bounded jitter ladder.

    Returns ``(L, jitter)``; jitter steps are scaled by ``trace(K) / n``.
    """
    n = K.shape[0]
    tau = np.trace(K) / n
    for step in JITTER_LADDER:
        jitter = step * tau
        A = K if jitter == 0.0 else K + jitter * np.eye(n)
        try:
            L = linalg.cholesky(A, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, jitter
    raise CholeskyError(
        f"covariance matrix ({n}x{n}) not positive definite after jitter {JITTER_LADDER[-1]}*tau"
    )


def _noisy_gram(expr, theta, X):
    theta = check_theta(expr, theta)
    K = gram_matrix(expr, theta, X)
    K[np.diag_indices_from(K)] += theta[-1]
    return K


def log_marginal_likelihood(expr, theta, X, Y):
    X, Y = _data(X, Y)
    L, _ = factorize(_noisy_gram(expr, theta, X))
    alpha = linalg.cho_solve((L, True), Y, check_finite=False)
    return float(-0.5 * Y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(Y) * LOG_2PI)


def lml_and_gradient(expr, theta, X, Y):
    """Log marginal likelihood and its gradient w.r.t. raw theta, one factorisation."""
    X, Y = _data(X, Y)
    L, _ = factorize(_noisy_gram(expr, theta, X))
    alpha = linalg.cho_solve((L, True), Y, check_finite=False)
    lml = float(-0.5 * Y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(Y) * LOG_2PI)
    Kinv = linalg.cho_solve((L, True), np.eye(len(Y)), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    grad = np.array([0.5 * np.sum(W * dK) for dK in grad_theta(expr, theta, X)])
    return lml, grad


def lml_gradient(expr, theta, X, Y):
    return lml_and_gradient(expr, theta, X, Y)[1]


@dataclass(frozen=True, eq=False)
class TrainedModel:
    """Training data, fitted theta and the cached Cholesky factor and weights.

    ``alpha`` solves ``(K + noise*I + jitter_used*I) alpha = Y``; predictive
    means are then ``K(x*, X) @ alpha``.
    """

    X: np.ndarray
    Y: np.ndarray
    expr: KernelExpr
    theta: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter_used: float

    @property
    def n(self):
        return self.X.shape[0]


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def fit_cache(expr, theta, X, Y):
    X, Y = _data(X, Y)
    theta = check_theta(expr, theta)
    L, jitter = factorize(_noisy_gram(expr, theta, X))
    alpha = linalg.cho_solve((L, True), Y, check_finite=False)
    return TrainedModel(
        X=_frozen(X), Y=_frozen(Y), expr=expr, theta=_frozen(theta),
        chol=_frozen(L), alpha=_frozen(alpha), jitter_used=float(jitter),
    )


@dataclass(frozen=True, eq=False)
class PredictiveDistribution:
    mean: np.ndarray
    variance: np.ndarray
    cov: np.ndarray | None = None


def _clamp_variance(var):
    if np.any(var < -NEGATIVE_VARIANCE_TOL):
        raise FloatingPointError(f"negative predictive variance {var.min():.3e}")
    return np.maximum(var, 0.0)


def predict(model, Xstar, want_full_cov=False, include_noise=False):
    """Posterior of the latent function at ``Xstar``.

    Variances describe f, not y; ``include_noise=True`` adds the fitted
    noise variance for observation-level intervals.
    """
    Xstar = np.asarray(Xstar, dtype=float)
    if Xstar.ndim == 1:
        Xstar = Xstar[None, :]
    if Xstar.shape[1] != model.X.shape[1]:
        raise ValueError(f"query inputs have {Xstar.shape[1]} columns, model uses {model.X.shape[1]}")
    Ks = gram_matrix(model.expr, model.theta, Xstar, model.X)
    mean = Ks @ model.alpha
    V = linalg.solve_triangular(model.chol, Ks.T, lower=True, check_finite=False)
    noise = model.theta[-1] if include_noise else 0.0
    if want_full_cov:
        cov = gram_matrix(model.expr, model.theta, Xstar) - V.T @ V
        cov[np.diag_indices_from(cov)] = _clamp_variance(np.diag(cov).copy()) + noise
        return PredictiveDistribution(mean, np.diag(cov).copy(), cov)
    var = gram_diag(model.expr, model.theta, Xstar) - np.sum(V**2, axis=0)
    return PredictiveDistribution(mean, _clamp_variance(var) + noise)


def predictive_mean_gradients(model, Xstar, dim):
    """d mean / d x*[dim] for every row of ``Xstar``; O(n) per row."""
    W = input_gradient_matrix(model.expr, model.theta, Xstar, model.X, dim)
    return W @ model.alpha


def predictive_mean_gradient(model, xstar, dim):
    return float(predictive_mean_gradients(model, xstar, dim)[0])


# -- serialisation ------------------------------------------------------------

def model_to_dict(model):
    return {
        "model_kind": "agpm",
        "kernel_spec": str(model.expr),
        "theta": [float(v) for v in model.theta],
        "X": model.X.tolist(),
        "Y": [float(v) for v in model.Y],
        "jitter_used": model.jitter_used,
    }


def model_from_dict(doc, rtol=1e-8):
    """Rebuild a model; the factorisation is recomputed and checked."""
    expr = parse_kernel_spec(doc["kernel_spec"])
    model = fit_cache(expr, doc["theta"], doc["X"], doc["Y"])
    K = _noisy_gram(expr, model.theta, model.X)
    K[np.diag_indices_from(K)] += model.jitter_used
    recon = model.chol @ model.chol.T
    if np.linalg.norm(recon - K) > rtol * np.linalg.norm(K):
        raise ValueError("reloaded Cholesky factor does not reconstruct the covariance")
    resid = np.linalg.norm(K @ model.alpha - model.Y)
    if resid > 1e-6 * max(np.linalg.norm(model.Y), 1.0):
        raise ValueError("reloaded weights do not solve the training system")
    if "jitter_used" in doc and float(doc["jitter_used"]) != model.jitter_used:
        raise ValueError(
            f"jitter mismatch on reload: stored {doc['jitter_used']}, recomputed {model.jitter_used}"
        )
    return model


def save_model(model, path, **extra):
    doc = model_to_dict(model)
    doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
