"""
Optimising over orthonormal matrices
====================================

Minimise -trace(L^T M) over 8x3 matrices with orthonormal columns. The
optimum is minus the sum of the singular values of M, which gives an exact
target to compare plain Riemannian gradient descent and conjugate gradients.
"""
import numpy as np

from mtmetric.metric import orthonormality_residual
from mtmetric.stiefel import RCG, RSGD, OptimizerState, random_point, step

rng = np.random.default_rng(1)
M = rng.standard_normal((8, 3))
target = -np.linalg.svd(M, compute_uv=False).sum()
start = random_point(8, 3, rng)

for method in (RSGD, RCG):
    L, state = start.copy(), OptimizerState(method, 0.1)
    for k in range(1, 501):
        state, L = step(state, L, -M)     # Euclidean gradient of -trace(L^T M)
        gap = -np.trace(L.T @ M) - target
        if gap <= 1e-10:
            break
    print(f"{method}: {k:3d} steps, gap {gap:.1e}, ||L^T L - I|| {orthonormality_residual(L):.1e}")
