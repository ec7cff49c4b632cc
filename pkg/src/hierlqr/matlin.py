"""Dense small-matrix primitives: symmetric vectorization, Lyapunov/Bellman
solvers, a discrete Riccati solver, spectral radius, and the symmetric
Kronecker product.

All functions are pure; inputs are never mutated.
"""

import numpy as np

from .errors import DimensionError, InstabilityError, NonStabilizableError, SymmetryError

SYM_RTOL = 1e-12

# Direct (vectorized) Lyapunov solve up to this dimension, iteration above.
_LYAP_DIRECT_MAX_DIM = 32


def as_matrix(M):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise DimensionError(f"expected a 2-d array, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DimensionError("matrix has non-finite entries")
    return M


def check_symmetric(Z, name="matrix"):
    """Validate symmetry to relative tolerance and return the symmetrized copy.

    Symmetrizing (Z + Z^T)/2 on construction absorbs drift from repeated
    solves without masking genuinely asymmetric inputs.
    """
    Z = as_matrix(Z)
    if Z.shape[0] != Z.shape[1]:
        raise DimensionError(f"{name} is not square: {Z.shape}")
    scale = max(1.0, float(np.abs(Z).max()))
    dev = float(np.abs(Z - Z.T).max())
    if dev > SYM_RTOL * scale * 10:
        raise SymmetryError(f"{name} is not symmetric: max asymmetry {dev:.3e}")
    return (Z + Z.T) / 2.0


def svec_dim(d):
    return d * (d + 1) // 2


def svec(Z):
    """Vectorize the upper triangle row-by-row, off-diagonals weighted by
    sqrt(2), so that <svec(A), svec(B)> = Tr(A B) for symmetric A, B."""
    Z = check_symmetric(Z, "svec input")
    d = Z.shape[0]
    iu = np.triu_indices(d)
    w = np.where(iu[0] == iu[1], 1.0, np.sqrt(2.0))
    return Z[iu] * w


def smat(v):
    """Inverse of svec: rebuild the symmetric matrix from its vectorization."""
    v = np.asarray(v, dtype=float).ravel()
    m = v.size
    d = int(round((np.sqrt(8 * m + 1) - 1) / 2))
    if svec_dim(d) != m:
        raise DimensionError(f"length {m} is not a triangular number")
    Z = np.zeros((d, d))
    iu = np.triu_indices(d)
    w = np.where(iu[0] == iu[1], 1.0, 1.0 / np.sqrt(2.0))
    Z[iu] = v * w
    Z = Z + np.triu(Z, 1).T
    return Z


def spectral_radius(F):
    """Largest eigenvalue magnitude of a square matrix."""
    F = as_matrix(F)
    if F.shape[0] != F.shape[1]:
        raise DimensionError(f"spectral_radius needs a square matrix, got {F.shape}")
    if F.shape[0] == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(F))))


def _require_stable(F, context):
    rho = spectral_radius(F)
    if rho >= 1.0:
        raise InstabilityError(f"{context}: spectral radius {rho:.6g} >= 1", spectral_radius=rho)
    return rho


def solve_lyapunov(F, W):
    """Solve Sigma = W + F Sigma F^T for stable F (rho(F) < 1).

    Direct solve of (I - F (x) F) vec(Sigma) = vec(W) at desk scale,
    fixed-point iteration above.
    """
    F = as_matrix(F)
    W = check_symmetric(W, "Lyapunov W")
    d = F.shape[0]
    if F.shape != (d, d) or W.shape != (d, d):
        raise DimensionError(f"shape mismatch: F {F.shape}, W {W.shape}")
    rho = _require_stable(F, "solve_lyapunov")
    if d <= _LYAP_DIRECT_MAX_DIM:
        M = np.eye(d * d) - np.kron(F, F)
        sigma = np.linalg.solve(M, W.ravel()).reshape(d, d)
    else:
        sigma = W.copy()
        # ||F^k|| decays like rho^k; iterate until the geometric tail is gone
        tol = 1e-14
        for _ in range(200000):
            nxt = W + F @ sigma @ F.T
            if np.abs(nxt - sigma).max() <= tol * max(1.0, np.abs(nxt).max()):
                sigma = nxt
                break
            sigma = nxt
    sigma = (sigma + sigma.T) / 2.0
    res = np.linalg.norm(sigma - W - F @ sigma @ F.T)
    if res > 1e-10 * max(1.0, np.linalg.norm(sigma)):
        raise InstabilityError(
            f"Lyapunov residual {res:.3e} too large (rho={rho:.6g})", spectral_radius=rho
        )
    return sigma


def solve_bellman(F, M):
    """Solve P = M + F^T P F: the adjoint of solve_lyapunov."""
    return solve_lyapunov(as_matrix(F).T, M)


def solve_dare(A, B, Q, R, rel_tol=1e-12, max_iter=100000):
    """Riccati value iteration for the infinite-horizon discrete problem.

    Returns (P_star, K_star) with K_star = (R + B^T P B)^{-1} B^T P A.
    Divergence or non-convergence raises NonStabilizableError.
    """
    A = as_matrix(A)
    B = as_matrix(B)
    Q = check_symmetric(Q, "DARE Q")
    R = check_symmetric(R, "DARE R")
    d, k = B.shape
    if A.shape != (d, d) or Q.shape != (d, d) or R.shape != (k, k):
        raise DimensionError("DARE input shapes inconsistent")
    P = Q.copy()
    for _ in range(max_iter):
        G = R + B.T @ P @ B
        K = np.linalg.solve(G, B.T @ P @ A)
        nxt = Q + A.T @ P @ A - A.T @ P @ B @ K
        nxt = (nxt + nxt.T) / 2.0
        if not np.all(np.isfinite(nxt)) or np.abs(nxt).max() > 1e100:
            raise NonStabilizableError("Riccati iteration diverged")
        if np.linalg.norm(nxt - P) <= rel_tol * max(1.0, np.linalg.norm(P)):
            P = nxt
            break
        P = nxt
    else:
        raise NonStabilizableError(f"Riccati iteration did not converge in {max_iter} steps")
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    rho = spectral_radius(A - B @ K)
    if rho >= 1.0:
        raise NonStabilizableError(f"DARE gain not stabilizing: rho(A-BK*) = {rho:.6g}")
    return P, K


def sym_kron(A, B):
    """Symmetric Kronecker product as an operator on svec-space:
    sym_kron(A, B) @ svec(X) == svec((A X B^T + B X A^T) / 2) for symmetric X.
    """
    A = as_matrix(A)
    B = as_matrix(B)
    d = A.shape[0]
    if A.shape != (d, d) or B.shape != (d, d):
        raise DimensionError(f"sym_kron needs equal square shapes, got {A.shape}, {B.shape}")
    m = svec_dim(d)
    out = np.empty((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        X = smat(e)
        out[:, j] = svec((A @ X @ B.T + B @ X @ A.T) / 2.0)
    return out
