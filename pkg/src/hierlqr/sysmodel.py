"""The original coupled multi-agent LQR system: block-structured construction
of partially exchangeable instances, exchangeability verification, and JSON
round-tripping.

Block layout: agents are grouped by subpopulation in partition order, so the
state vector is vec(x^1, ..., x^N) with the first |N^1| agents from
subpopulation 1, and similarly for actions.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import matlin
from .errors import DimensionError

# Spectral-radius target after normalization; strictly inside the unit disk
# so K=0 remains a stable initial policy with margin.
_RHO_TARGET = 0.9
_PD_MARGIN = 0.1


@dataclass(frozen=True)
class SubpopulationPartition:
    sizes: tuple
    state_dims: tuple
    action_dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(n) for n in self.sizes))
        object.__setattr__(self, "state_dims", tuple(int(d) for d in self.state_dims))
        object.__setattr__(self, "action_dims", tuple(int(k) for k in self.action_dims))
        if not (len(self.sizes) == len(self.state_dims) == len(self.action_dims)):
            raise DimensionError("partition lists must have equal length")
        if len(self.sizes) == 0:
            raise DimensionError("partition must have at least one subpopulation")
        if min(self.sizes) < 1 or min(self.state_dims) < 1 or min(self.action_dims) < 1:
            raise DimensionError("partition entries must be positive")

    @property
    def L(self):
        return len(self.sizes)

    @property
    def total_state_dim(self):
        return sum(n * d for n, d in zip(self.sizes, self.state_dims))

    @property
    def total_action_dim(self):
        return sum(n * k for n, k in zip(self.sizes, self.action_dims))

    def state_offsets(self):
        """Start index of each agent's state block, grouped by subpopulation."""
        offs, pos = [], 0
        for n, d in zip(self.sizes, self.state_dims):
            offs.append([pos + i * d for i in range(n)])
            pos += n * d
        return offs

    def action_offsets(self):
        offs, pos = [], 0
        for n, k in zip(self.sizes, self.action_dims):
            offs.append([pos + i * k for i in range(n)])
            pos += n * k
        return offs


@dataclass(frozen=True)
class GlobalLQRSystem:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    W_noise: tuple  # one state-noise covariance per subpopulation
    partition: SubpopulationPartition

    def __post_init__(self):
        p = self.partition
        D, U = p.total_state_dim, p.total_action_dim
        object.__setattr__(self, "A", matlin.as_matrix(self.A))
        object.__setattr__(self, "B", matlin.as_matrix(self.B))
        object.__setattr__(self, "Q", matlin.check_symmetric(self.Q, "Q"))
        object.__setattr__(self, "R", matlin.check_symmetric(self.R, "R"))
        object.__setattr__(
            self,
            "W_noise",
            tuple(matlin.check_symmetric(W, f"W_noise[{l}]") for l, W in enumerate(self.W_noise)),
        )
        if self.A.shape != (D, D) or self.B.shape != (D, U):
            raise DimensionError("A/B shapes inconsistent with partition")
        if self.Q.shape != (D, D) or self.R.shape != (U, U):
            raise DimensionError("Q/R shapes inconsistent with partition")
        if len(self.W_noise) != p.L:
            raise DimensionError("need one noise covariance per subpopulation")
        for l, W in enumerate(self.W_noise):
            if W.shape != (p.state_dims[l], p.state_dims[l]):
                raise DimensionError(f"W_noise[{l}] shape {W.shape} != d_{l}")

    def global_noise_cov(self):
        """Block-diagonal covariance of the stacked per-agent noise."""
        p = self.partition
        blocks = []
        for l in range(p.L):
            blocks.extend([self.W_noise[l]] * p.sizes[l])
        D = p.total_state_dim
        out = np.zeros((D, D))
        pos = 0
        for blk in blocks:
            d = blk.shape[0]
            out[pos : pos + d, pos : pos + d] = blk
            pos += d
        return out


@dataclass
class ExchangeabilityReport:
    holds: bool
    violations: list = field(default_factory=list)  # (family, max abs deviation)

    def to_dict(self):
        return {
            "holds": self.holds,
            "violations": [{"family": f, "deviation": dev} for f, dev in self.violations],
        }


def _state_block(M, p, i_off, j_off, di, dj):
    return M[i_off : i_off + di, j_off : j_off + dj]


def _iter_blocks(M, row_offs, col_offs, row_dims, col_dims):
    """Yield (l, i, k, j, block) over agent-indexed blocks of M."""
    for l, rows in enumerate(row_offs):
        for i, r in enumerate(rows):
            for k, cols in enumerate(col_offs):
                for j, c in enumerate(cols):
                    yield l, i, k, j, M[r : r + row_dims[l], c : c + col_dims[k]]


def _tile(blocks_diag, blocks_off, p, row_dims, col_dims):
    """Assemble the global matrix from representative blocks.

    blocks_diag[l]: own-agent block; blocks_off[(l, k)]: block coupling an
    agent of subpopulation l to a *different* agent of subpopulation k.
    """
    row_total = sum(n * d for n, d in zip(p.sizes, row_dims))
    col_total = sum(n * d for n, d in zip(p.sizes, col_dims))
    M = np.zeros((row_total, col_total))
    r = 0
    for l in range(p.L):
        for i in range(p.sizes[l]):
            c = 0
            for k in range(p.L):
                for j in range(p.sizes[k]):
                    if l == k and i == j:
                        blk = blocks_diag[l]
                    else:
                        blk = blocks_off[(l, k)]
                    M[r : r + row_dims[l], c : c + col_dims[k]] = blk
                    c += col_dims[k]
            r += row_dims[l]
    return M


def _sym_pair_blocks(rng, p, dims, scale):
    """Draw block families for a symmetric global matrix (Q or R pattern)."""
    diag = {}
    off = {}
    for l in range(p.L):
        m = rng.normal(scale=scale, size=(dims[l], dims[l]))
        diag[l] = (m + m.T) / 2.0
        m = rng.normal(scale=scale, size=(dims[l], dims[l]))
        off[(l, l)] = (m + m.T) / 2.0
        for k in range(l + 1, p.L):
            m = rng.normal(scale=scale, size=(dims[l], dims[k]))
            off[(l, k)] = m
            off[(k, l)] = m.T
    return diag, off


def generate_system(partition, seed, scale=1.0):
    """Draw a random partially exchangeable system, then normalize it:
    spectral radii of A and every auxiliary dynamics matrix at most 0.9, and
    every auxiliary cost matrix strictly positive definite.

    Deterministic in (partition, seed, scale).
    """
    from . import decomp  # deferred: decomp imports nothing from here at module load

    p = partition
    rng = np.random.default_rng(np.random.Philox(key=[int(seed), 0]))

    a_diag = {l: rng.normal(scale=scale, size=(p.state_dims[l], p.state_dims[l])) for l in range(p.L)}
    a_off = {
        (l, k): rng.normal(scale=scale, size=(p.state_dims[l], p.state_dims[k]))
        for l in range(p.L)
        for k in range(p.L)
    }
    b_diag = {l: rng.normal(scale=scale, size=(p.state_dims[l], p.action_dims[l])) for l in range(p.L)}
    b_off = {
        (l, k): rng.normal(scale=scale, size=(p.state_dims[l], p.action_dims[k]))
        for l in range(p.L)
        for k in range(p.L)
    }
    q_diag, q_off = _sym_pair_blocks(rng, p, p.state_dims, scale)
    r_diag, r_off = _sym_pair_blocks(rng, p, p.action_dims, scale)

    A = _tile(a_diag, a_off, p, p.state_dims, p.state_dims)
    B = _tile(b_diag, b_off, p, p.state_dims, p.action_dims)
    Q = _tile(q_diag, q_off, p, p.state_dims, p.state_dims)
    R = _tile(r_diag, r_off, p, p.action_dims, p.action_dims)
    Q = (Q + Q.T) / 2.0
    R = (R + R.T) / 2.0

    W_noise = []
    for l in range(p.L):
        m = rng.normal(scale=scale, size=(p.state_dims[l], p.state_dims[l]))
        W_noise.append(m @ m.T + _PD_MARGIN * np.eye(p.state_dims[l]))

    # Auxiliary dynamics are linear in A's blocks, so one global rescale
    # controls rho(A), rho(A_l) and rho(A_bar) simultaneously.
    blocks = decomp.extract_blocks_from_parts(a_diag, a_off, b_diag, b_off, q_diag, q_off, r_diag, r_off, p)
    radii = [matlin.spectral_radius(A)]
    for l in range(p.L):
        radii.append(matlin.spectral_radius(blocks.A_l(l)))
    radii.append(matlin.spectral_radius(blocks.A_bar()))
    worst = max(radii)
    if worst > _RHO_TARGET:
        s = _RHO_TARGET / worst
        A = A * s
        a_diag = {l: m * s for l, m in a_diag.items()}
        a_off = {lk: m * s for lk, m in a_off.items()}

    # Shift Q and R by multiples of identity so every auxiliary cost matrix
    # is strictly positive definite (shift needed = |lambda_min| + margin).
    blocks = decomp.extract_blocks_from_parts(a_diag, a_off, b_diag, b_off, q_diag, q_off, r_diag, r_off, p)
    min_size = min(p.sizes)

    def shift_needed(mats_unit, mats_scaled):
        # mats_unit gain c*I per unit shift; mats_scaled gain at least
        # c*min_size*I (the mean-field effective matrices).
        need = 0.0
        for M in mats_unit:
            lam = float(np.linalg.eigvalsh(M).min())
            need = max(need, _PD_MARGIN - lam)
        for M in mats_scaled:
            lam = float(np.linalg.eigvalsh(M).min())
            need = max(need, (_PD_MARGIN - lam) / min_size)
        return max(0.0, need)

    q_ls = [blocks.Q_l(l) for l in range(p.L)]
    r_ls = [blocks.R_l(l) for l in range(p.L)]
    cq = shift_needed(q_ls, [blocks.Q_eff()])
    cr = shift_needed(r_ls, [blocks.R_eff()])
    if cq > 0:
        Q = Q + cq * np.eye(Q.shape[0])
    if cr > 0:
        R = R + cr * np.eye(R.shape[0])

    return GlobalLQRSystem(A=A, B=B, Q=Q, R=R, W_noise=tuple(W_noise), partition=p)


def verify_partial_exchangeability(sys, tol=1e-9):
    """Check that within-subpopulation agent swaps leave A, B, Q, R unchanged.

    Per subpopulation l: all own-agent blocks equal and all within-l
    off-diagonal blocks equal; per ordered pair (l, k), l != k: all cross
    blocks agent-independent.
    """
    p = sys.partition
    s_offs = p.state_offsets()
    a_offs = p.action_offsets()
    report = ExchangeabilityReport(holds=True)

    def check(M, row_offs, col_offs, row_dims, col_dims, name):
        fams = {}
        for l, i, k, j, blk in _iter_blocks(M, row_offs, col_offs, row_dims, col_dims):
            if l == k and i == j:
                key = (name, l, "diag")
            elif l == k:
                key = (name, l, "offdiag")
            else:
                key = (name, l, k)
            if key not in fams:
                fams[key] = blk
            else:
                dev = float(np.abs(blk - fams[key]).max())
                if dev > tol:
                    fam = f"{name}[{key[1]},{key[2]}]" if isinstance(key[2], int) else f"{name}[{key[1]}] {key[2]}"
                    report.violations.append((fam, dev))

    check(sys.A, s_offs, s_offs, p.state_dims, p.state_dims, "A")
    check(sys.B, s_offs, a_offs, p.state_dims, p.action_dims, "B")
    check(sys.Q, s_offs, s_offs, p.state_dims, p.state_dims, "Q")
    check(sys.R, a_offs, a_offs, p.action_dims, p.action_dims, "R")
    # collapse duplicate family names, keep worst deviation
    worst = {}
    for fam, dev in report.violations:
        worst[fam] = max(worst.get(fam, 0.0), dev)
    report.violations = sorted(worst.items())
    report.holds = not report.violations
    return report


def global_cost(sys, x, u):
    """Instantaneous quadratic cost x^T Q x + u^T R u."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if x.size != sys.Q.shape[0] or u.size != sys.R.shape[0]:
        raise DimensionError("global_cost: dimension mismatch")
    return float(x @ sys.Q @ x + u @ sys.R @ u)


def within_subpop_transposition(p, l, i, j):
    """Permutation matrices (P_state, P_action) swapping agents i and j of
    subpopulation l. Exchangeability means P A P^T == A exactly."""
    def perm(offs, dims):
        total = sum(n * d for n, d in zip(p.sizes, dims))
        P = np.eye(total)
        oi, oj = offs[l][i], offs[l][j]
        d = dims[l]
        P[oi : oi + d, :], P[oj : oj + d, :] = np.eye(total)[oj : oj + d, :], np.eye(total)[oi : oi + d, :]
        return P

    return perm(p.state_offsets(), p.state_dims), perm(p.action_offsets(), p.action_dims)


# --- JSON serialization -----------------------------------------------------


def _mat_to_json(M):
    M = np.asarray(M, dtype=float)
    return {"rows": M.shape[0], "cols": M.shape[1], "data": [float(x) for x in M.ravel()]}


def _mat_from_json(obj):
    return np.array(obj["data"], dtype=float).reshape(obj["rows"], obj["cols"])


def system_to_dict(sys):
    return {
        "partition": {
            "sizes": list(sys.partition.sizes),
            "state_dims": list(sys.partition.state_dims),
            "action_dims": list(sys.partition.action_dims),
        },
        "A": _mat_to_json(sys.A),
        "B": _mat_to_json(sys.B),
        "Q": _mat_to_json(sys.Q),
        "R": _mat_to_json(sys.R),
        "W_noise": [_mat_to_json(W) for W in sys.W_noise],
    }


def system_from_dict(obj):
    p = SubpopulationPartition(
        sizes=obj["partition"]["sizes"],
        state_dims=obj["partition"]["state_dims"],
        action_dims=obj["partition"]["action_dims"],
    )
    return GlobalLQRSystem(
        A=_mat_from_json(obj["A"]),
        B=_mat_from_json(obj["B"]),
        Q=_mat_from_json(obj["Q"]),
        R=_mat_from_json(obj["R"]),
        W_noise=tuple(_mat_from_json(W) for W in obj["W_noise"]),
        partition=p,
    )


def system_to_json(sys):
    # repr-based float serialization round-trips doubles exactly
    return json.dumps(system_to_dict(sys), indent=2)


def system_from_json(text):
    return system_from_dict(json.loads(text))
