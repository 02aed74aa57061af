"""Riemannian optimisation on the Stiefel manifold {X : X.T X = I}.

Tangent vectors are obtained by projection, points are pulled back onto the
manifold with a thin QR retraction, and conjugate directions are carried
between tangent spaces by re-projection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RSGD = "rsgd"
RCG = "rcg"


class StiefelError(ArithmeticError):
    """Invalid manifold point or a retraction that cannot be computed."""


def sym(A):
    return 0.5 * (A + A.T)


def _check_point(L, tol=1e-6):
    res = np.linalg.norm(L.T @ L - np.eye(L.shape[1]))
    if not res <= tol:
        raise StiefelError(f"point is not orthonormal: ||L^T L - I||_F = {res:.3g}")


def tangent_project(L, G):
    """Project ``G`` onto the tangent space at ``L``: ``G - L sym(L.T G)``."""
    L = np.asarray(L, dtype=float)
    G = np.asarray(G, dtype=float)
    _check_point(L)
    return G - L @ sym(L.T @ G)


def qr_positive(A):
    """Thin QR with the sign convention diag(R) > 0."""
    Q, Rf = np.linalg.qr(A)
    signs = np.sign(np.diag(Rf))
    signs[signs == 0] = 1.0
    return Q * signs, Rf * signs[:, None]


def retract_qr(L, step):
    """Q factor of ``L + step``; ``step == 0`` returns ``L`` unchanged."""
    L = np.asarray(L, dtype=float)
    step = np.asarray(step, dtype=float)
    if not np.any(step):
        return L.copy()
    Y = L + step
    norm = float(np.linalg.norm(step))
    if not np.all(np.isfinite(Y)):
        raise StiefelError(f"non-finite retraction input (step norm {norm:.3g})")
    Q, Rf = qr_positive(Y)
    diag = np.abs(np.diag(Rf))
    if diag.min() <= 1e-12 * max(diag.max(), 1.0):
        raise StiefelError(f"rank-deficient retraction (step norm {norm:.3g})")
    return Q


def random_point(d: int, l: int, rng) -> np.ndarray:
    """Seeded Gaussian matrix orthonormalised by positive-diagonal QR."""
    if not 0 < l <= d:
        raise ValueError(f"need 0 < l <= d, got d={d}, l={l}")
    return qr_positive(rng.standard_normal((d, l)))[0]


@dataclass
class OptimizerState:
    method: str = RSGD
    learning_rate: float = 0.05
    direction: np.ndarray | None = None
    prev_grad: np.ndarray | None = None
    prev_grad_sq: float = 0.0
    step_count: int = 0

    def __post_init__(self):
        if self.method not in (RSGD, RCG):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        def enc(a):
            return None if a is None else {"shape": list(a.shape), "data": a.ravel().tolist()}
        return {"method": self.method, "learning_rate": self.learning_rate,
                "direction": enc(self.direction), "prev_grad": enc(self.prev_grad),
                "prev_grad_sq": self.prev_grad_sq, "step_count": self.step_count}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        def dec(v):
            return None if v is None else np.array(v["data"], dtype=float).reshape(v["shape"])
        return cls(d["method"], float(d["learning_rate"]), dec(d.get("direction")),
                   dec(d.get("prev_grad")), float(d.get("prev_grad_sq", 0.0)),
                   int(d.get("step_count", 0)))


def step(state: OptimizerState, L, euclid_grad):
    """One Riemannian update; returns ``(new_state, new_L)``.

    ``rsgd`` moves along the negative projected gradient. ``rcg`` uses a
    Polak-Ribiere direction with beta clipped at zero and restarts whenever
    the direction stops being a descent direction.
    """
    L = np.asarray(L, dtype=float)
    G = np.asarray(euclid_grad, dtype=float)
    if G.shape != L.shape:
        raise ValueError(f"gradient shape {G.shape} does not match point shape {L.shape}")
    xi = tangent_project(L, G)
    lr = state.learning_rate
    if state.method == RSGD:
        new_L = retract_qr(L, -lr * xi)
        return OptimizerState(RSGD, lr, step_count=state.step_count + 1), new_L

    gg = float(np.sum(xi * xi))
    D = -xi
    if state.direction is not None and state.prev_grad_sq > 0:
        beta = float(np.sum(xi * (xi - state.prev_grad))) / state.prev_grad_sq
        beta = max(beta, 0.0)
        D = -xi + beta * state.direction
        if np.sum(D * xi) >= 0:
            D = -xi
    new_L = retract_qr(L, lr * D)
    new_state = OptimizerState(
        RCG, lr,
        direction=tangent_project(new_L, D),
        prev_grad=tangent_project(new_L, xi),
        prev_grad_sq=gg,
        step_count=state.step_count + 1)
    return new_state, new_L
