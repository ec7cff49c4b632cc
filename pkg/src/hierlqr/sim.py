"""Seeded stochastic rollouts: single-instance chains, the hierarchical
rollout of the original coupled system driven through auxiliary-coordinate
policies, and the pathwise comparison between the global chain and the
decoupled auxiliary recursions under shared noise.
"""

import io
from dataclasses import dataclass

import numpy as np

from . import decomp, oracle, sysmodel
from .errors import DecompositionIntegrityError, DimensionError

# Discarded prefix when averaging from a non-stationary start.
_MIN_BURN_IN = 100


@dataclass(frozen=True)
class RngStream:
    """Deterministic, independently seedable noise source.

    Identical (seed, stream_id) reproduce identical draws; distinct
    stream_ids give statistically independent counter-based streams.
    """

    seed: int
    stream_id: int = 0

    def generator(self):
        return np.random.default_rng(np.random.Philox(key=[int(self.seed), int(self.stream_id)]))

    def child(self, stream_id):
        return RngStream(seed=self.seed, stream_id=stream_id)


@dataclass
class Trajectory:
    states: np.ndarray  # (T, d)
    actions: np.ndarray  # (T, k)
    costs: np.ndarray  # (T,)

    def __len__(self):
        return self.states.shape[0]

    def average_cost(self, burn_in=0):
        return float(np.mean(self.costs[burn_in:]))


def burn_in_steps(rho):
    """Geometric burn-in: max(100, 10/(1-rho)) steps."""
    if rho >= 1.0:
        raise DimensionError("burn-in undefined for an unstable chain")
    return max(_MIN_BURN_IN, int(np.ceil(10.0 / (1.0 - rho))))


def _chol_psd(M):
    """Cholesky factor tolerant of semidefinite input (zero covariances)."""
    M = np.asarray(M, dtype=float)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        lam, V = np.linalg.eigh(M)
        return V * np.sqrt(np.clip(lam, 0.0, None))


def rollout(inst, pol, T, rng, x0=None):
    """Simulate x_{t+1} = A x_t + B u_t + w_t, u_t = -K x_t + sigma z_t.

    x0=None requests a stationary start x0 ~ N(0, Sigma_K), which needs a
    stable policy. Deterministic in the RngStream.
    """
    if T < 1:
        raise DimensionError("T must be at least 1")
    g = rng.generator()
    d, k = inst.state_dim, inst.action_dim
    Lw = _chol_psd(inst.Phi)
    if x0 is None:
        analysis = oracle.analyze_policy(inst, pol)
        x = _chol_psd(analysis.Sigma_K) @ g.standard_normal(d)
    else:
        x = np.asarray(x0, dtype=float).ravel()
        if x.size != d:
            raise DimensionError(f"x0 has length {x.size}, expected {d}")
    states = np.empty((T, d))
    actions = np.empty((T, k))
    costs = np.empty(T)
    K, sigma = pol.K, pol.sigma
    for t in range(T):
        u = -K @ x
        if sigma > 0:
            u = u + sigma * g.standard_normal(k)
        states[t] = x
        actions[t] = u
        costs[t] = x @ inst.Q @ x + u @ inst.R @ u
        x = inst.A @ x + inst.B @ u + Lw @ g.standard_normal(d)
    return Trajectory(states=states, actions=actions, costs=costs)


@dataclass(frozen=True)
class HierarchicalPolicy:
    """One deviation gain per subpopulation plus the mean-field gain, with
    per-system exploration scales."""

    gains: tuple  # K_l, shape (k_l, d_l)
    K_bar: np.ndarray
    sigmas: tuple = None  # per-subpopulation tilde exploration std
    sigma_bar: float = 0.0

    def sigma_of(self, l):
        return 0.0 if self.sigmas is None else float(self.sigmas[l])


def _draw_noise(g, sys):
    """Per-agent process noise stacked into the global state vector."""
    p = sys.partition
    chunks = []
    for l in range(p.L):
        Lw = _chol_psd(sys.W_noise[l])
        for _ in range(p.sizes[l]):
            chunks.append(Lw @ g.standard_normal(p.state_dims[l]))
    return np.concatenate(chunks)


def hierarchical_rollout(sys, ensemble, pol, T, rng, x0=None, record_draws=False, check_tol=1e-8):
    """Simulate the ORIGINAL global recursion with actions produced in
    auxiliary coordinates.

    Each step: transform the state, apply per-agent deviation feedback with
    re-centered tilde exploration noise (so deviations stay exactly
    zero-mean), apply mean-field feedback, recover the global action and step
    the coupled dynamics. The instantaneous cost decomposition
    c_gt = c_bar + sum_l c_tilde_l is asserted every step.

    Returns (global Trajectory, [L deviation trajectories of the first agent,
    mean-field trajectory]); with record_draws also the per-step noise record
    used by the pathwise replay.
    """
    p = sys.partition
    D, U = p.total_state_dim, p.total_action_dim
    g = rng.generator()
    x = np.zeros(D) if x0 is None else np.asarray(x0, dtype=float).ravel()
    if x.size != D:
        raise DimensionError(f"x0 has length {x.size}, expected {D}")
    d_bar, k_bar = sum(p.state_dims), sum(p.action_dims)

    gstates, gactions, gcosts = np.empty((T, D)), np.empty((T, U)), np.empty(T)
    aux_states = [np.empty((T, p.state_dims[l])) for l in range(p.L)]
    aux_actions = [np.empty((T, p.action_dims[l])) for l in range(p.L)]
    aux_costs = [np.empty(T) for l in range(p.L)]
    mf_states, mf_actions, mf_costs = np.empty((T, d_bar)), np.empty((T, k_bar)), np.empty(T)
    draws = []

    s_offs, a_offs = p.state_offsets(), p.action_offsets()
    k_cuts = np.cumsum([0] + list(p.action_dims))
    for t in range(T):
        bundle = decomp.to_coordinates(p, x, np.zeros(U))
        # exploration draws, canonical order: per-agent tilde, then mean field
        z_centered = []
        for l in range(p.L):
            n, k = p.sizes[l], p.action_dims[l]
            z = g.standard_normal((n, k))
            z_centered.append(z - z.mean(axis=0))
        z_bar = g.standard_normal(k_bar)
        bar_u = -pol.K_bar @ bundle.bar_state + pol.sigma_bar * z_bar
        u = np.empty(U)
        tilde_u = []
        for l in range(p.L):
            tus = []
            for i in range(p.sizes[l]):
                tu = -pol.gains[l] @ bundle.tilde_states[l][i] + pol.sigma_of(l) * z_centered[l][i]
                tus.append(tu)
                o = a_offs[l][i]
                u[o : o + p.action_dims[l]] = tu + bar_u[k_cuts[l] : k_cuts[l + 1]]
            tilde_u.append(tus)
        bundle.tilde_actions = tilde_u
        bundle.bar_action = bar_u

        c_gt = sysmodel.global_cost(sys, x, u)
        c_bar, c_tilde = decomp.auxiliary_costs(ensemble, bundle)
        if abs(c_gt - c_bar - sum(c_tilde)) > check_tol * (1.0 + abs(c_gt)):
            raise DecompositionIntegrityError(
                f"cost decomposition failed at t={t}: "
                f"{c_gt:.12g} vs {c_bar + sum(c_tilde):.12g}"
            )

        gstates[t], gactions[t], gcosts[t] = x, u, c_gt
        mf_states[t], mf_actions[t], mf_costs[t] = bundle.bar_state, bar_u, c_bar
        for l, sub in enumerate(ensemble.subsystems):
            tx0, tu0 = bundle.tilde_states[l][0], tilde_u[l][0]
            aux_states[l][t] = tx0
            aux_actions[l][t] = tu0
            aux_costs[l][t] = tx0 @ sub.Q_l @ tx0 + tu0 @ sub.R_l @ tu0

        w = _draw_noise(g, sys)
        if record_draws:
            draws.append({"z_centered": z_centered, "z_bar": z_bar, "w": w})
        x = sys.A @ x + sys.B @ u + w

    gtraj = Trajectory(states=gstates, actions=gactions, costs=gcosts)
    aux = [
        Trajectory(states=aux_states[l], actions=aux_actions[l], costs=aux_costs[l])
        for l in range(p.L)
    ]
    aux.append(Trajectory(states=mf_states, actions=mf_actions, costs=mf_costs))
    if record_draws:
        return gtraj, aux, draws
    return gtraj, aux


def pathwise_coupling_residual(sys, ensemble, pol, T, rng, x0=None):
    """Replay the decoupled auxiliary recursions with the exact noise drawn by
    the global rollout and return the max deviation from the transformed
    global chain.

    The deviation chains follow tx' = A_l tx + B_l tu + (w^i - w_mean^l), the
    mean-field chain xbar' = A_bar xbar + B_bar ubar + stack(w_mean^l).
    """
    p = sys.partition
    gtraj, _, draws = hierarchical_rollout(sys, ensemble, pol, T, rng, x0=x0, record_draws=True)
    s_offs = p.state_offsets()

    def noise_parts(w):
        tilde, means = [], []
        for l in range(p.L):
            d = p.state_dims[l]
            ws = np.stack([w[o : o + d] for o in s_offs[l]])
            m = ws.mean(axis=0)
            means.append(m)
            tilde.append(ws - m)
        return tilde, np.concatenate(means)

    k_cuts = np.cumsum([0] + list(p.action_dims))
    mf = ensemble.mean_field
    # initial auxiliary coordinates from the global start
    bundle0 = decomp.to_coordinates(p, gtraj.states[0], np.zeros(p.total_action_dim))
    tx = [[np.array(v) for v in bundle0.tilde_states[l]] for l in range(p.L)]
    xbar = np.array(bundle0.bar_state)
    worst = 0.0
    for t in range(T):
        ref = decomp.to_coordinates(p, gtraj.states[t], gtraj.actions[t])
        for l in range(p.L):
            for i in range(p.sizes[l]):
                worst = max(worst, float(np.abs(tx[l][i] - ref.tilde_states[l][i]).max()))
        worst = max(worst, float(np.abs(xbar - ref.bar_state).max()))
        if t == T - 1:
            break
        w_tilde, w_mean = noise_parts(draws[t]["w"])
        ubar = -pol.K_bar @ xbar + pol.sigma_bar * draws[t]["z_bar"]
        xbar = mf.A_bar @ xbar + mf.B_bar @ ubar + w_mean
        for l, sub in enumerate(ensemble.subsystems):
            zc = draws[t]["z_centered"][l]
            for i in range(p.sizes[l]):
                tu = -pol.gains[l] @ tx[l][i] + pol.sigma_of(l) * zc[i]
                tx[l][i] = sub.A_l @ tx[l][i] + sub.B_l @ tu + w_tilde[l][i]
    return worst


# --- CSV export ---------------------------------------------------------------


def trajectory_to_csv(traj):
    """Columns: t, x[0..], u[0..], cost. Floats via repr (lossless)."""
    d = traj.states.shape[1]
    k = traj.actions.shape[1]
    buf = io.StringIO()
    header = ["t"] + [f"x{i}" for i in range(d)] + [f"u{i}" for i in range(k)] + ["cost"]
    buf.write(",".join(header) + "\n")
    for t in range(len(traj)):
        row = [str(t)]
        row += [repr(float(v)) for v in traj.states[t]]
        row += [repr(float(v)) for v in traj.actions[t]]
        row.append(repr(float(traj.costs[t])))
        buf.write(",".join(row) + "\n")
    return buf.getvalue()
