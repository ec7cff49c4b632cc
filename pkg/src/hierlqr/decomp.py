"""Decomposition of a partially exchangeable LQR system into L representative
deviation systems plus one mean-field system, the coordinate transform between
global and auxiliary coordinates, and composition of auxiliary gains back into
a single global gain.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import matlin, sysmodel
from .errors import (
    AssumptionError,
    ConsistencyError,
    DecompositionIntegrityError,
    DimensionError,
    ExchangeabilityError,
)


@dataclass(frozen=True)
class RepresentativeBlocks:
    """Representative blocks of A, B, Q, R, keyed by subpopulation.

    For a singleton subpopulation the within-subpopulation off-diagonal block
    does not exist; it is taken as zero, which leaves the mean-field system
    equal to the original dynamics of that agent.
    """

    partition: sysmodel.SubpopulationPartition
    a: dict  # l -> own-agent dynamics block
    a_bar: dict  # (l, k) -> cross-agent dynamics block
    b: dict
    b_bar: dict
    q: dict
    q_bar: dict
    r: dict
    r_bar: dict

    def A_l(self, l):
        return self.a[l] - self.a_bar[(l, l)]

    def B_l(self, l):
        return self.b[l] - self.b_bar[(l, l)]

    def Q_l(self, l):
        return self.q[l] - self.q_bar[(l, l)]

    def R_l(self, l):
        return self.r[l] - self.r_bar[(l, l)]

    def _bar_dynamics(self, diag_fn, bar, col_dims):
        p = self.partition
        rows = []
        for l in range(p.L):
            row = [p.sizes[k] * bar[(l, k)] for k in range(p.L)]
            rows.append(np.hstack(row))
        M = np.vstack(rows)
        # add the decoupled part on the diagonal
        r = 0
        c_offs = np.cumsum([0] + [col_dims[k] for k in range(p.L)])
        for l in range(p.L):
            d = diag_fn(l).shape[0]
            M[r : r + d, c_offs[l] : c_offs[l] + col_dims[l]] += diag_fn(l)
            r += d
        return M

    def A_bar(self):
        return self._bar_dynamics(self.A_l, self.a_bar, self.partition.state_dims)

    def B_bar(self):
        return self._bar_dynamics(self.B_l, self.b_bar, self.partition.action_dims)

    def _bar_cost(self, bar):
        p = self.partition
        rows = []
        for l in range(p.L):
            rows.append(np.hstack([p.sizes[l] * p.sizes[k] * bar[(l, k)] for k in range(p.L)]))
        M = np.vstack(rows)
        return (M + M.T) / 2.0

    def _breve(self, diag_fn, dims):
        p = self.partition
        total = sum(dims)
        M = np.zeros((total, total))
        pos = 0
        for l in range(p.L):
            d = dims[l]
            M[pos : pos + d, pos : pos + d] = p.sizes[l] * diag_fn(l)
            pos += d
        return M

    def Q_eff(self):
        return self._bar_cost(self.q_bar) + self._breve(self.Q_l, self.partition.state_dims)

    def R_eff(self):
        return self._bar_cost(self.r_bar) + self._breve(self.R_l, self.partition.action_dims)


@dataclass(frozen=True)
class AuxiliarySubsystem:
    A_l: np.ndarray
    B_l: np.ndarray
    Q_l: np.ndarray
    R_l: np.ndarray
    Phi_l: np.ndarray
    n_agents: int

    @property
    def degenerate(self):
        """A singleton subpopulation has identically zero deviation state."""
        return self.n_agents == 1


@dataclass(frozen=True)
class MeanFieldSystem:
    A_bar: np.ndarray
    B_bar: np.ndarray
    Q_eff: np.ndarray
    R_eff: np.ndarray
    Phi_bar: np.ndarray


@dataclass(frozen=True)
class AuxiliaryEnsemble:
    subsystems: tuple
    mean_field: MeanFieldSystem
    partition: sysmodel.SubpopulationPartition


@dataclass
class CoordinateBundle:
    """Per-agent deviation coordinates plus stacked subpopulation means.

    tilde_states[l][i] is agent i of subpopulation l; within each
    subpopulation the deviations sum to zero.
    """

    tilde_states: list
    tilde_actions: list
    bar_state: np.ndarray
    bar_action: np.ndarray
    partition: sysmodel.SubpopulationPartition = field(repr=False, default=None)


def _zero_bar_blocks(blocks, p):
    """Zero the nonexistent within-subpopulation off blocks of singletons."""
    for l in range(p.L):
        if p.sizes[l] == 1:
            blocks.a_bar[(l, l)] = np.zeros_like(blocks.a_bar[(l, l)])
            blocks.b_bar[(l, l)] = np.zeros_like(blocks.b_bar[(l, l)])
            blocks.q_bar[(l, l)] = np.zeros_like(blocks.q_bar[(l, l)])
            blocks.r_bar[(l, l)] = np.zeros_like(blocks.r_bar[(l, l)])
    return blocks


def extract_blocks_from_parts(a_diag, a_off, b_diag, b_off, q_diag, q_off, r_diag, r_off, p):
    """Build RepresentativeBlocks directly from block families (used by the
    generator before tiling)."""
    blocks = RepresentativeBlocks(
        partition=p,
        a=dict(a_diag),
        a_bar=dict(a_off),
        b=dict(b_diag),
        b_bar=dict(b_off),
        q=dict(q_diag),
        q_bar=dict(q_off),
        r=dict(r_diag),
        r_bar=dict(r_off),
    )
    return _zero_bar_blocks(blocks, p)


def extract_blocks(sys, tol=1e-9):
    """Read representative blocks off the first agent(s) of each subpopulation.

    Refuses with the verification report if partial exchangeability fails.
    """
    report = sysmodel.verify_partial_exchangeability(sys, tol=tol)
    if not report.holds:
        raise ExchangeabilityError(
            f"system is not partially exchangeable: {report.violations}", report=report
        )
    p = sys.partition
    s_offs = p.state_offsets()
    a_offs = p.action_offsets()

    def rep(M, row_offs, col_offs, row_dims, col_dims):
        diag, off = {}, {}
        for l in range(p.L):
            r0 = row_offs[l][0]
            diag[l] = M[r0 : r0 + row_dims[l], col_offs[l][0] : col_offs[l][0] + col_dims[l]].copy()
            for k in range(p.L):
                if l == k:
                    if p.sizes[l] > 1:
                        c1 = col_offs[l][1]
                        off[(l, l)] = M[r0 : r0 + row_dims[l], c1 : c1 + col_dims[l]].copy()
                    else:
                        off[(l, l)] = np.zeros((row_dims[l], col_dims[l]))
                else:
                    c0 = col_offs[k][0]
                    off[(l, k)] = M[r0 : r0 + row_dims[l], c0 : c0 + col_dims[k]].copy()
        return diag, off

    a_diag, a_off = rep(sys.A, s_offs, s_offs, p.state_dims, p.state_dims)
    b_diag, b_off = rep(sys.B, s_offs, a_offs, p.state_dims, p.action_dims)
    q_diag, q_off = rep(sys.Q, s_offs, s_offs, p.state_dims, p.state_dims)
    r_diag, r_off = rep(sys.R, a_offs, a_offs, p.action_dims, p.action_dims)
    return extract_blocks_from_parts(a_diag, a_off, b_diag, b_off, q_diag, q_off, r_diag, r_off, p)


def build_auxiliary(sys, tol=1e-9):
    """Assemble the L deviation systems and the mean-field system.

    Noise covariances are the exact marginals of the transformed noise:
    Phi_l = (1 - 1/n_l) W_l for the representative agent and
    Phi_bar = diag(W_l / n_l) for the mean field.
    """
    blocks = extract_blocks(sys, tol=tol)
    p = sys.partition
    subsystems = []
    for l in range(p.L):
        n = p.sizes[l]
        Q_l = matlin.check_symmetric(blocks.Q_l(l), f"Q_{l}")
        R_l = matlin.check_symmetric(blocks.R_l(l), f"R_{l}")
        _require_psd(Q_l, f"Q_{l}")
        _require_psd(R_l, f"R_{l}")
        subsystems.append(
            AuxiliarySubsystem(
                A_l=blocks.A_l(l),
                B_l=blocks.B_l(l),
                Q_l=Q_l,
                R_l=R_l,
                Phi_l=(1.0 - 1.0 / n) * sys.W_noise[l],
                n_agents=n,
            )
        )
    Q_eff = matlin.check_symmetric(blocks.Q_eff(), "Q_eff")
    R_eff = matlin.check_symmetric(blocks.R_eff(), "R_eff")
    _require_psd(Q_eff, "Q_bar+Q_breve")
    _require_psd(R_eff, "R_bar+R_breve")
    d_bar = sum(p.state_dims)
    Phi_bar = np.zeros((d_bar, d_bar))
    pos = 0
    for l in range(p.L):
        d = p.state_dims[l]
        Phi_bar[pos : pos + d, pos : pos + d] = sys.W_noise[l] / p.sizes[l]
        pos += d
    mean_field = MeanFieldSystem(
        A_bar=blocks.A_bar(), B_bar=blocks.B_bar(), Q_eff=Q_eff, R_eff=R_eff, Phi_bar=Phi_bar
    )
    return AuxiliaryEnsemble(subsystems=tuple(subsystems), mean_field=mean_field, partition=p)


def _require_psd(M, name, tol=1e-10):
    lam = float(np.linalg.eigvalsh(M).min())
    if lam < -tol * max(1.0, float(np.abs(M).max())):
        raise AssumptionError(f"{name} is not positive semi-definite (lambda_min = {lam:.3e})")


def _split_agents(v, offs, dims):
    out = []
    for l, agent_offs in enumerate(offs):
        out.append([np.asarray(v[o : o + dims[l]], dtype=float) for o in agent_offs])
    return out


def to_coordinates(p, x, u):
    """Split global (x, u) into deviation and mean-field coordinates."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if x.size != p.total_state_dim or u.size != p.total_action_dim:
        raise DimensionError("to_coordinates: dimension mismatch")
    xs = _split_agents(x, p.state_offsets(), p.state_dims)
    us = _split_agents(u, p.action_offsets(), p.action_dims)
    bar_x, bar_u, tx, tu = [], [], [], []
    for l in range(p.L):
        mx = np.mean(xs[l], axis=0)
        mu = np.mean(us[l], axis=0)
        bar_x.append(mx)
        bar_u.append(mu)
        tx.append([xi - mx for xi in xs[l]])
        tu.append([ui - mu for ui in us[l]])
    return CoordinateBundle(
        tilde_states=tx,
        tilde_actions=tu,
        bar_state=np.concatenate(bar_x),
        bar_action=np.concatenate(bar_u),
        partition=p,
    )


def recover_coordinates(bundle, tol=1e-8):
    """Invert to_coordinates: x^i = tilde_x^i + bar_x^l."""
    p = bundle.partition
    bar_x = _split_bar(bundle.bar_state, p.state_dims)
    bar_u = _split_bar(bundle.bar_action, p.action_dims)
    xs, us = [], []
    for l in range(p.L):
        for group, name in ((bundle.tilde_states[l], "state"), (bundle.tilde_actions[l], "action")):
            mean = np.mean(group, axis=0)
            if np.abs(mean).max() > tol:
                raise ConsistencyError(
                    f"tilde {name}s of subpopulation {l} are not zero-mean "
                    f"(max {np.abs(mean).max():.3e})"
                )
        xs.extend(tx + bar_x[l] for tx in bundle.tilde_states[l])
        us.extend(tu + bar_u[l] for tu in bundle.tilde_actions[l])
    return np.concatenate(xs), np.concatenate(us)


def _split_bar(v, dims):
    out, pos = [], 0
    for d in dims:
        out.append(np.asarray(v[pos : pos + d], dtype=float))
        pos += d
    return out


def auxiliary_costs(ensemble, bundle, sys=None, check_tol=1e-8):
    """Decomposed instantaneous costs (c_bar, [c_tilde per subpopulation]).

    When the global system is supplied, the replacement-form definition of
    c_tilde (global cost minus the cost with subpopulation l averaged out)
    is also evaluated and must agree.
    """
    p = ensemble.partition
    mf = ensemble.mean_field
    c_bar = float(
        bundle.bar_state @ mf.Q_eff @ bundle.bar_state
        + bundle.bar_action @ mf.R_eff @ bundle.bar_action
    )
    c_tilde = []
    for l, sub in enumerate(ensemble.subsystems):
        c = 0.0
        for tx, tu in zip(bundle.tilde_states[l], bundle.tilde_actions[l]):
            c += float(tx @ sub.Q_l @ tx + tu @ sub.R_l @ tu)
        c_tilde.append(c)

    if sys is not None:
        x, u = recover_coordinates(bundle)
        c_gt = sysmodel.global_cost(sys, x, u)
        bar_x = _split_bar(bundle.bar_state, p.state_dims)
        bar_u = _split_bar(bundle.bar_action, p.action_dims)
        s_offs, a_offs = p.state_offsets(), p.action_offsets()
        for l in range(p.L):
            x_breve, u_breve = x.copy(), u.copy()
            for o in s_offs[l]:
                x_breve[o : o + p.state_dims[l]] = bar_x[l]
            for o in a_offs[l]:
                u_breve[o : o + p.action_dims[l]] = bar_u[l]
            alt = c_gt - sysmodel.global_cost(sys, x_breve, u_breve)
            if abs(alt - c_tilde[l]) > check_tol * (1.0 + abs(c_gt)):
                raise DecompositionIntegrityError(
                    f"c_tilde[{l}] forms disagree: {c_tilde[l]:.12g} vs {alt:.12g}"
                )
    return c_bar, c_tilde


def averaging_operator(p, dims, offs):
    """Matrix M with bar = M @ global; rows stack subpopulation means."""
    total = sum(n * d for n, d in zip(p.sizes, dims))
    M = np.zeros((sum(dims), total))
    r = 0
    for l in range(p.L):
        d = dims[l]
        for o in offs[l]:
            M[r : r + d, o : o + d] = np.eye(d) / p.sizes[l]
        r += d
    return M


def compose_global_policy(ensemble, gains, K_bar):
    """Deterministic global gain G with u = -G x implementing
    u^i = -K_l (x^i - bar_x^l) + (-K_bar bar_x)^l for every agent."""
    p = ensemble.partition
    if len(gains) != p.L:
        raise DimensionError("need one gain per subpopulation")
    K_bar = matlin.as_matrix(K_bar)
    d_bar, k_bar = sum(p.state_dims), sum(p.action_dims)
    if K_bar.shape != (k_bar, d_bar):
        raise DimensionError(f"K_bar shape {K_bar.shape} != ({k_bar}, {d_bar})")
    M_x = averaging_operator(p, p.state_dims, p.state_offsets())
    D = p.total_state_dim
    U = p.total_action_dim
    G = np.zeros((U, D))
    KbarM = K_bar @ M_x
    k_offs = np.cumsum([0] + list(p.action_dims))
    a_offs = p.action_offsets()
    s_offs = p.state_offsets()
    for l in range(p.L):
        K_l = matlin.as_matrix(gains[l])
        if K_l.shape != (p.action_dims[l], p.state_dims[l]):
            raise DimensionError(f"gain {l} shape {K_l.shape}")
        for i in range(p.sizes[l]):
            r = a_offs[l][i]
            rows = slice(r, r + p.action_dims[l])
            # deviation feedback: K_l (x^i - bar_x^l)
            o = s_offs[l][i]
            G[rows, o : o + p.state_dims[l]] += K_l
            for o2 in s_offs[l]:
                G[rows, o2 : o2 + p.state_dims[l]] -= K_l / p.sizes[l]
            # mean-field feedback, block l of K_bar @ bar_x
            G[rows, :] += KbarM[k_offs[l] : k_offs[l + 1], :]
    return G


# --- JSON serialization -----------------------------------------------------


def ensemble_to_dict(ensemble):
    def mat(M):
        return sysmodel._mat_to_json(M)

    return {
        "partition": {
            "sizes": list(ensemble.partition.sizes),
            "state_dims": list(ensemble.partition.state_dims),
            "action_dims": list(ensemble.partition.action_dims),
        },
        "subsystems": [
            {
                "A_l": mat(s.A_l),
                "B_l": mat(s.B_l),
                "Q_l": mat(s.Q_l),
                "R_l": mat(s.R_l),
                "Phi_l": mat(s.Phi_l),
                "n_agents": s.n_agents,
            }
            for s in ensemble.subsystems
        ],
        "mean_field": {
            "A_bar": mat(ensemble.mean_field.A_bar),
            "B_bar": mat(ensemble.mean_field.B_bar),
            "Q_eff": mat(ensemble.mean_field.Q_eff),
            "R_eff": mat(ensemble.mean_field.R_eff),
            "Phi_bar": mat(ensemble.mean_field.Phi_bar),
        },
    }


def ensemble_to_json(ensemble):
    return json.dumps(ensemble_to_dict(ensemble), indent=2)
