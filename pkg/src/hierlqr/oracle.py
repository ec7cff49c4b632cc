"""Model-based analytic quantities for a single LQR instance: stationary
covariance, ergodic cost, gradient and natural gradient, optimal policy,
value vector, and diagnostic bounds. This is the ground-truth engine used to
verify everything model-free.
"""

from dataclasses import dataclass

import numpy as np

from . import matlin
from .errors import DimensionError, InstabilityError

# Spectral radii in [1 - STABILITY_MARGIN, 1) are treated as unstable:
# Lyapunov conditioning blows up at the boundary.
STABILITY_MARGIN = 1e-6


@dataclass(frozen=True)
class LQRInstance:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", matlin.as_matrix(self.A))
        object.__setattr__(self, "B", matlin.as_matrix(self.B))
        object.__setattr__(self, "Q", matlin.check_symmetric(self.Q, "Q"))
        object.__setattr__(self, "R", matlin.check_symmetric(self.R, "R"))
        object.__setattr__(self, "Phi", matlin.check_symmetric(self.Phi, "Phi"))
        d, k = self.B.shape
        if self.A.shape != (d, d) or self.Q.shape != (d, d) or self.R.shape != (k, k):
            raise DimensionError("LQRInstance shapes inconsistent")
        if self.Phi.shape != (d, d):
            raise DimensionError("Phi shape inconsistent")

    @property
    def state_dim(self):
        return self.B.shape[0]

    @property
    def action_dim(self):
        return self.B.shape[1]


@dataclass(frozen=True)
class LinearGaussianPolicy:
    K: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "K", matlin.as_matrix(self.K))
        object.__setattr__(self, "sigma", float(self.sigma))
        if self.sigma < 0:
            raise DimensionError("sigma must be nonnegative")


@dataclass(frozen=True)
class PolicyAnalysis:
    Sigma_K: np.ndarray
    P_K: np.ndarray
    cost: float
    grad: np.ndarray
    E_K: np.ndarray
    Phi_sigma: np.ndarray


@dataclass(frozen=True)
class ValueVector:
    delta_star: np.ndarray
    Delta: np.ndarray
    cost: float
    noise_offset: float  # sigma^2 Tr(R + P_K B B^T)
    trace_offset: float  # Tr(P_K Sigma_K)

    def q_value(self, x, u):
        v = np.concatenate([np.ravel(x), np.ravel(u)])
        return float(v @ self.Delta @ v) - self.noise_offset - self.trace_offset

    def state_value(self, P_K, x):
        x = np.ravel(x)
        return float(x @ P_K @ x) - self.trace_offset


def closed_loop(inst, pol):
    return inst.A - inst.B @ pol.K


def require_stable(inst, pol):
    rho = matlin.spectral_radius(closed_loop(inst, pol))
    if rho >= 1.0 - STABILITY_MARGIN:
        raise InstabilityError(f"policy is unstable: rho(A-BK) = {rho:.8g}", spectral_radius=rho)
    return rho


def analyze_policy(inst, pol, cost_check_tol=1e-8):
    """All analytic quantities of a stable linear-Gaussian policy.

    The two ergodic cost formulas (trace of cost matrix against Sigma_K, and
    trace of P_K against the effective noise) are both evaluated and must
    agree; their mismatch flags a broken Lyapunov solve.
    """
    require_stable(inst, pol)
    F = closed_loop(inst, pol)
    K = pol.K
    Phi_sigma = inst.Phi + pol.sigma**2 * inst.B @ inst.B.T
    Sigma_K = matlin.solve_lyapunov(F, Phi_sigma)
    P_K = matlin.solve_bellman(F, inst.Q + K.T @ inst.R @ K)
    sig_tr_R = pol.sigma**2 * np.trace(inst.R)
    cost1 = float(np.trace((inst.Q + K.T @ inst.R @ K) @ Sigma_K) + sig_tr_R)
    cost2 = float(np.trace(P_K @ Phi_sigma) + sig_tr_R)
    if abs(cost1 - cost2) > cost_check_tol * max(1.0, abs(cost1)):
        raise InstabilityError(f"cost formulas disagree: {cost1:.12g} vs {cost2:.12g}")
    E_K = (inst.R + inst.B.T @ P_K @ inst.B) @ K - inst.B.T @ P_K @ inst.A
    grad = 2.0 * E_K @ Sigma_K
    return PolicyAnalysis(
        Sigma_K=Sigma_K, P_K=P_K, cost=cost1, grad=grad, E_K=E_K, Phi_sigma=Phi_sigma
    )


def optimal_policy(inst):
    """DARE solution (P_star, K_star) of the instance."""
    return matlin.solve_dare(inst.A, inst.B, inst.Q, inst.R)


def gradient_fd_check(inst, pol, h=1e-5):
    """Max relative deviation between the analytic gradient and central
    finite differences over the entries of K. Retries once at h/2 if a
    perturbed policy goes unstable."""
    analysis = analyze_policy(inst, pol)
    grad = analysis.grad
    scale = max(1.0, float(np.abs(grad).max()))

    def fd(step):
        out = np.zeros_like(pol.K)
        for i in range(pol.K.shape[0]):
            for j in range(pol.K.shape[1]):
                Kp, Km = pol.K.copy(), pol.K.copy()
                Kp[i, j] += step
                Km[i, j] -= step
                cp = analyze_policy(inst, LinearGaussianPolicy(Kp, pol.sigma)).cost
                cm = analyze_policy(inst, LinearGaussianPolicy(Km, pol.sigma)).cost
                out[i, j] = (cp - cm) / (2 * step)
        return out

    try:
        num = fd(h)
    except InstabilityError:
        num = fd(h / 2)
    return float(np.abs(num - grad).max() / scale)


def value_vector(inst, pol):
    """Quadratic action-value parameters: Delta_K blocks assembled from P_K
    and its svec, plus the constant offsets of Q_K."""
    analysis = analyze_policy(inst, pol)
    A, B = inst.A, inst.B
    P = analysis.P_K
    Delta = np.block(
        [
            [inst.Q + A.T @ P @ A, A.T @ P @ B],
            [B.T @ P @ A, inst.R + B.T @ P @ B],
        ]
    )
    Delta = (Delta + Delta.T) / 2.0
    noise_offset = float(pol.sigma**2 * (np.trace(inst.R) + np.trace(P @ B @ B.T)))
    trace_offset = float(np.trace(P @ analysis.Sigma_K))
    return ValueVector(
        delta_star=matlin.svec(Delta),
        Delta=Delta,
        cost=analysis.cost,
        noise_offset=noise_offset,
        trace_offset=trace_offset,
    )


def natural_gradient_from_delta(delta, K):
    """Recover E = Delta^22 K - Delta^21 from an svec'd quadratic form."""
    Delta = matlin.smat(delta)
    d = K.shape[1]
    return Delta[d:, d:] @ K - Delta[d:, :d]


def state_action_cov(inst, pol, Sigma_K=None):
    """Stationary covariance of the stacked pair v = (x, u)."""
    if Sigma_K is None:
        Sigma_K = analyze_policy(inst, pol).Sigma_K
    K, s2 = pol.K, pol.sigma**2
    k = inst.action_dim
    return np.block(
        [
            [Sigma_K, -Sigma_K @ K.T],
            [-K @ Sigma_K, K @ Sigma_K @ K.T + s2 * np.eye(k)],
        ]
    )


def pair_transition(inst, pol):
    """One-step transition matrix of v = (x, u): v' = K_breve v + noise."""
    A, B, K = inst.A, inst.B, pol.K
    return np.block([[A, B], [-K @ A, -K @ B]])


def theta_matrix(inst, pol):
    """Second-moment operator of the temporal-difference feature process:
    Theta = (Sig (x)_s Sig) (I - Kb^T (x)_s Kb^T) on svec-space, where Sig is
    the stationary pair covariance and Kb the pair transition matrix.
    Requires exploration noise, else the pair covariance is singular."""
    if pol.sigma <= 0:
        raise InstabilityError("theta_matrix requires sigma > 0")
    Sig = state_action_cov(inst, pol)
    Kb = pair_transition(inst, pol)
    m = Sig.shape[0]
    return matlin.sym_kron(Sig, Sig) @ (np.eye(matlin.svec_dim(m)) - matlin.sym_kron(Kb.T, Kb.T))


def feature_mean(inst, pol):
    """Stationary mean of the quadratic feature svec(v v^T)."""
    return matlin.svec(state_action_cov(inst, pol))


def cost_feature_mean(inst, pol):
    """d_K = E[c(v) svec(v v^T)] under the stationary pair distribution.

    For v ~ N(0, S) and symmetric M, N: E[(v'Mv)(v'Nv)] = 2 Tr(MSNS) +
    Tr(MS) Tr(NS), so d_K = 2 svec(S D S) + Tr(D S) svec(S) with
    D = diag(Q, R).
    """
    S = state_action_cov(inst, pol)
    d = inst.state_dim
    m = S.shape[0]
    Dmat = np.zeros((m, m))
    Dmat[:d, :d] = inst.Q
    Dmat[d:, d:] = inst.R
    return 2.0 * matlin.svec(S @ Dmat @ S) + float(np.trace(Dmat @ S)) * matlin.svec(S)


def saddle_residual(inst, pol):
    """Norm of the dual maximizer at the true primal point: plugging
    gamma = (C(K), delta*) into the population dual solution must give 0."""
    analysis = analyze_policy(inst, pol)
    vv = value_vector(inst, pol)
    # E[phi (phi - phi')^T] = 2 Theta_K by stationarity of the pair chain
    xi2 = analysis.cost * feature_mean(inst, pol) + 2.0 * theta_matrix(inst, pol) @ vv.delta_star
    xi2 = xi2 - cost_feature_mean(inst, pol)
    return float(np.linalg.norm(xi2))


def dom_bounds(inst, pol, K_star_analysis=None, slack=1e-8):
    """Gradient-domination sandwich: (lower, upper, gap) with
    lower <= gap <= upper enforced up to absolute slack."""
    analysis = analyze_policy(inst, pol)
    if K_star_analysis is None:
        _, K_star = optimal_policy(inst)
        K_star_analysis = analyze_policy(inst, LinearGaussianPolicy(K_star, pol.sigma))
    E = analysis.E_K
    tr_EE = float(np.trace(E.T @ E))
    G = inst.R + inst.B.T @ analysis.P_K @ inst.B
    sig_min_phi = float(np.linalg.eigvalsh(inst.Phi).min())
    lower = sig_min_phi / float(np.linalg.norm(G, 2)) * tr_EE
    upper = (
        float(np.linalg.norm(K_star_analysis.Sigma_K, 2))
        / float(np.linalg.eigvalsh(inst.R).min())
        * tr_EE
    )
    gap = analysis.cost - K_star_analysis.cost
    if not (lower <= gap + slack and gap <= upper + slack):
        raise InstabilityError(
            f"gradient domination violated: lower={lower:.6g} gap={gap:.6g} upper={upper:.6g}"
        )
    return lower, upper, gap


def advantage_identity_check(inst, K, K_prime, x0, T_horizon=None):
    """Residual of the advantage telescoping identity along the deterministic
    trajectory of K_prime:
    x0' P_{K'} x0 - x0' P_K x0 = sum_t A_{K,K'}(x_t')."""
    pol = LinearGaussianPolicy(K)
    pol_p = LinearGaussianPolicy(K_prime)
    a = analyze_policy(inst, pol)
    a_p = analyze_policy(inst, pol_p)
    rho_p = matlin.spectral_radius(closed_loop(inst, pol_p))
    if T_horizon is None:
        # geometric truncation error below 1e-10
        T_horizon = int(np.ceil(np.log(1e-10) / np.log(max(rho_p, 1e-6)))) + 1
    dK = K_prime - K
    G = inst.R + inst.B.T @ a.P_K @ inst.B
    F_p = closed_loop(inst, pol_p)
    x = np.asarray(x0, dtype=float).ravel()
    total = 0.0
    for _ in range(T_horizon):
        total += float(2 * x @ dK.T @ a.E_K @ x + x @ dK.T @ G @ dK @ x)
        x = F_p @ x
    x0 = np.asarray(x0, dtype=float).ravel()
    lhs = float(x0 @ a_p.P_K @ x0 - x0 @ a.P_K @ x0)
    return abs(lhs - total)


def advantage_lower_bound_check(inst, K, K_prime, x):
    """Pointwise lower bound on the advantage:
    A_{K,K'}(x) >= -Tr[x x^T E^T (R + B^T P_K B)^{-1} E]."""
    a = analyze_policy(inst, LinearGaussianPolicy(K))
    x = np.asarray(x, dtype=float).ravel()
    dK = K_prime - K
    G = inst.R + inst.B.T @ a.P_K @ inst.B
    adv = float(2 * x @ dK.T @ a.E_K @ x + x @ dK.T @ G @ dK @ x)
    bound = -float(x @ a.E_K.T @ np.linalg.solve(G, a.E_K @ x))
    return adv, bound


def diagnostics_bound_mats(inst, pol):
    """Check ||Sigma_K|| <= C(K)/sig_min(Q) and ||P_K|| <= C(K)/sig_min(Phi);
    returns ((ok, slack), (ok, slack))."""
    a = analyze_policy(inst, pol)
    sig_q = float(np.linalg.eigvalsh(inst.Q).min())
    sig_phi = float(np.linalg.eigvalsh(inst.Phi).min())
    b1 = a.cost / sig_q - float(np.linalg.norm(a.Sigma_K, 2))
    b2 = a.cost / sig_phi - float(np.linalg.norm(a.P_K, 2))
    return (b1 >= -1e-9, b1), (b2 >= -1e-9, b2)
