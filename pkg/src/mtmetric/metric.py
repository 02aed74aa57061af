"""Low-rank Mahalanobis metric, triplet losses and regression heads.

The metric is parameterised by ``L`` (d x l, orthonormal columns):
``dist2(x, y) = ||L.T (x - y)||^2``. A second d x l matrix ``R`` scores
bilinear similarity in the probabilistic loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ANGULAR_HINGE = "angular_hinge"
OPML_NLL = "opml_nll"
LOSS_MODES = (ANGULAR_HINGE, OPML_NLL)


@dataclass
class MetricParams:
    """Learned matrices plus the preprocessing needed to apply them.

    ``scaler_mean``/``scaler_scale`` standardize raw features and
    ``head_offsets`` maps a task index to the constant added to its head
    coordinate when predicting a label.
    """

    L: np.ndarray
    R: np.ndarray
    scaler_mean: np.ndarray | None = None
    scaler_scale: np.ndarray | None = None
    head_offsets: dict = field(default_factory=dict)

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.L.ndim != 2 or self.L.shape != self.R.shape:
            raise ValueError(f"L and R must be matching d x l matrices, got {self.L.shape}, {self.R.shape}")

    @property
    def d(self) -> int:
        return self.L.shape[0]

    @property
    def l(self) -> int:
        return self.L.shape[1]

    def standardize(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.scaler_mean is None:
            return X
        return (X - self.scaler_mean) / self.scaler_scale

    def transform(self, X) -> np.ndarray:
        """Embed raw (unstandardized) feature rows."""
        return self.standardize(X) @ self.L

    def copy(self) -> "MetricParams":
        return MetricParams(
            self.L.copy(), self.R.copy(),
            None if self.scaler_mean is None else self.scaler_mean.copy(),
            None if self.scaler_scale is None else self.scaler_scale.copy(),
            dict(self.head_offsets))


def orthonormality_residual(M) -> float:
    M = np.asarray(M)
    return float(np.linalg.norm(M.T @ M - np.eye(M.shape[1])))


def _cosd(deg: float) -> float:
    # exact zeros at odd multiples of 90 degrees
    deg = math.fmod(deg, 360.0)
    if deg < 0:
        deg += 360.0
    if deg == 90.0 or deg == 270.0:
        return 0.0
    if deg == 180.0:
        return -1.0
    return math.cos(math.radians(deg))


def angular_factor(alpha_deg: float) -> float:
    """``4 tan^2(alpha)`` via ``tan^2 a = (1 - cos 2a) / (1 + cos 2a)``.

    The half-angle form evaluates exactly to 4 at 45 degrees.
    """
    if not 0 < alpha_deg < 90:
        raise ValueError(f"alpha must lie in (0, 90) degrees, got {alpha_deg}")
    c = _cosd(2.0 * alpha_deg)
    return 4.0 * (1.0 - c) / (1.0 + c)


def _check_dims(L, *xs):
    d = L.shape[0]
    for x in xs:
        if np.shape(x)[-1] != d:
            raise ValueError(f"dimension mismatch: expected {d}, got {np.shape(x)[-1]}")


def embed(L, x) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    x = np.asarray(x, dtype=float)
    _check_dims(L, x)
    return x @ L


def mahalanobis_sq(L, x_i, x_j):
    """Squared distance ``(x_i - x_j).T L L.T (x_i - x_j)``; broadcasts over rows."""
    L = np.asarray(L, dtype=float)
    diff = np.asarray(x_i, dtype=float) - np.asarray(x_j, dtype=float)
    _check_dims(L, diff)
    z = diff @ L
    return np.sum(z * z, axis=-1)


def bilinear_sim(M, x_i, x_j):
    M = np.asarray(M, dtype=float)
    x_i = np.asarray(x_i, dtype=float)
    x_j = np.asarray(x_j, dtype=float)
    _check_dims(M, x_i, x_j)
    return np.sum((x_i @ M) * (x_j @ M), axis=-1)


def angular_hinge(L, a, p, n, alpha: float):
    """``max(0, dist2(a, p) - 4 tan^2(alpha) dist2(n, (a + p) / 2))``."""
    a = np.asarray(a, dtype=float)
    p = np.asarray(p, dtype=float)
    centre = 0.5 * (a + p)
    k4 = angular_factor(alpha)
    z = mahalanobis_sq(L, a, p) - k4 * mahalanobis_sq(L, n, centre)
    return np.maximum(z, 0.0)


def log_sigmoid(z):
    """Stable ``log(1 / (1 + exp(-z)))``."""
    return -np.logaddexp(0.0, -np.asarray(z, dtype=float))


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    return np.exp(log_sigmoid(z))


def nll_from_margins(m, s, tau: float = 1.0):
    """``-log(sigmoid(m / tau) * sigmoid(s / tau))``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return -(log_sigmoid(np.asarray(m) / tau) + log_sigmoid(np.asarray(s) / tau))


def triplet_margins(params: MetricParams, a, p, n, alpha: float):
    """Angular margin ``m`` (positive when the angular constraint holds) and
    R-similarity margin ``s``."""
    a = np.asarray(a, dtype=float)
    p = np.asarray(p, dtype=float)
    k4 = angular_factor(alpha)
    m = k4 * mahalanobis_sq(params.L, n, 0.5 * (a + p)) - mahalanobis_sq(params.L, a, p)
    s = bilinear_sim(params.R, a, p) - bilinear_sim(params.R, a, n)
    return m, s


def triplet_nll(params: MetricParams, a, p, n, alpha: float, tau: float = 1.0):
    m, s = triplet_margins(params, a, p, n, alpha)
    return nll_from_margins(m, s, tau)


def mse_head(L, x, k: int, y: float) -> float:
    L = np.asarray(L, dtype=float)
    if not 0 <= k < L.shape[1]:
        raise IndexError(f"head dimension {k} out of range for l={L.shape[1]}")
    return float((embed(L, x)[k] - y) ** 2)


def default_head_assignment(schema, l: int) -> dict[int, int]:
    """Expert tasks, then forward gradients, then backward gradients, placed on
    the last embedding dimensions. At least one dimension is left free for the
    metric alone, so fewer heads are assigned when ``l`` is small."""
    from .data_model import EXPERT, GRADIENT_BACKWARD, GRADIENT_FORWARD

    order = [t for kind in (EXPERT, GRADIENT_FORWARD, GRADIENT_BACKWARD)
             for t, s in enumerate(schema) if s.kind == kind]
    order = order[:max(l - 1, 0)]
    return {t: l - 1 - i for i, t in enumerate(order)}


@dataclass
class LossConfig:
    mode: str = OPML_NLL
    alpha: float = 45.0
    tau: float = 1.0
    lambda_mse: float = 0.1
    head_assignment: dict | None = None

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.mode!r}")
        angular_factor(self.alpha)
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda_mse < 0:
            raise ValueError("lambda_mse must be non-negative")
        if self.head_assignment is not None:
            self.head_assignment = {int(t): int(k) for t, k in self.head_assignment.items()}
            dims = list(self.head_assignment.values())
            if len(set(dims)) != len(dims):
                raise ValueError("head dimensions must be distinct")

    def heads(self, l: int) -> dict[int, int]:
        heads = self.head_assignment or {}
        for t, k in heads.items():
            if not 0 <= k < l:
                raise ValueError(f"head dimension {k} for task {t} out of range for l={l}")
        return heads

    def to_dict(self) -> dict:
        return {"mode": self.mode, "alpha": self.alpha, "tau": self.tau,
                "lambda_mse": self.lambda_mse,
                "head_assignment": None if self.head_assignment is None
                else {str(t): k for t, k in self.head_assignment.items()}}


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    metric: float
    mse: float


def _unpack(triplets):
    A, P, N = (np.atleast_2d(np.asarray(t, dtype=float)) for t in triplets)
    if len(A) == 0:
        raise ValueError("empty triplet batch")
    if not (A.shape == P.shape == N.shape):
        raise ValueError("anchor, positive and negative arrays must share a shape")
    return A, P, N


def _head_terms(L, samples, heads):
    """Residuals per present (sample, head) pair as (X rows, dims, residuals)."""
    if samples is None or not heads:
        return None
    X, Y = samples
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    tasks = np.array(sorted(heads), dtype=int)
    dims = np.array([heads[t] for t in tasks], dtype=int)
    targets = Y[:, tasks]
    rows, cols = np.nonzero(~np.isnan(targets))
    if len(rows) == 0:
        return None
    emb = X @ L[:, dims]
    resid = emb[rows, cols] - targets[rows, cols]
    return rows, dims[cols], resid


def total_loss(params: MetricParams, triplets, samples, config: LossConfig) -> LossBreakdown:
    """Mean triplet loss plus ``lambda_mse`` times the mean head MSE.

    Parameters
    ----------
    triplets : (A, P, N) arrays of shape (B, d)
    samples : (X, Y) with X of shape (S, d) and Y the (S, T) label matrix
        (NaN = absent), or None. Only tasks in the head assignment are used.
    """
    A, P, N = _unpack(triplets)
    _check_dims(params.L, A)
    if config.mode == ANGULAR_HINGE:
        metric = float(np.mean(angular_hinge(params.L, A, P, N, config.alpha)))
    else:
        metric = float(np.mean(triplet_nll(params, A, P, N, config.alpha, config.tau)))
    mse = 0.0
    terms = _head_terms(params.L, samples, config.heads(params.l))
    if terms is not None and config.lambda_mse > 0:
        mse = config.lambda_mse * float(np.mean(terms[2] ** 2))
    return LossBreakdown(metric + mse, metric, mse)


def grad_total_loss(params: MetricParams, triplets, samples, config: LossConfig):
    """Euclidean gradients ``(dL, dR)`` of :func:`total_loss`."""
    A, P, N = _unpack(triplets)
    L, R = params.L, params.R
    B = len(A)
    k4 = angular_factor(config.alpha)
    U = A - P
    V = N - 0.5 * (A + P)
    UL = U @ L
    VL = V @ L
    dL = np.zeros_like(L)
    dR = np.zeros_like(R)
    if config.mode == ANGULAR_HINGE:
        z = np.sum(UL * UL, axis=1) - k4 * np.sum(VL * VL, axis=1)
        act = z > 0
        dL += (2.0 / B) * (U[act].T @ UL[act] - k4 * V[act].T @ VL[act])
    else:
        tau = config.tau
        m = k4 * np.sum(VL * VL, axis=1) - np.sum(UL * UL, axis=1)
        W = P - N
        AR = A @ R
        WR = W @ R
        s = np.sum(AR * WR, axis=1)
        # d(-log sigmoid(z/tau))/dz = -sigmoid(-z/tau)/tau
        cm = -sigmoid(-m / tau) / (tau * B)
        cs = -sigmoid(-s / tau) / (tau * B)
        dL += 2.0 * k4 * (V.T * cm) @ VL - 2.0 * (U.T * cm) @ UL
        dR += (A.T * cs) @ WR + (W.T * cs) @ AR
    terms = _head_terms(L, samples, config.heads(params.l))
    if terms is not None and config.lambda_mse > 0:
        X = np.atleast_2d(np.asarray(samples[0], dtype=float))
        rows, dims, resid = terms
        coef = 2.0 * config.lambda_mse / len(resid)
        for k in np.unique(dims):
            sel = dims == k
            dL[:, k] += coef * (resid[sel] @ X[rows[sel]])
    return dL, dR
