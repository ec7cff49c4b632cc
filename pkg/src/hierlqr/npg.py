"""Natural-gradient policy optimization: step-size selection, the single-system
critic-actor loop (model-free or with the analytic gradient), and the
hierarchical trainer that runs the L+1 decoupled problems and accounts for the
total optimality gap of the original coupled system.
"""

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import decomp, gtd, matlin, oracle, sim
from .errors import DimensionError, InstabilityError

_MODES = ("oracle_gradient", "model_free")


@dataclass(frozen=True)
class TrainConfig:
    N_outer: int
    T_inner: int = 100000
    mode: str = "oracle_gradient"
    seed: int = 0
    eta_override: object = None  # scalar, or sequence per system
    sigma_explore: object = 0.5  # scalar, or sequence per system
    alpha: object = 0.3  # critic step scale; scalar, or sequence per system
    xi2_constant: float = 10.0
    cost0_estimator: str = "oracle"  # or "rollout"

    def __post_init__(self):
        if self.N_outer < 1:
            raise DimensionError("N_outer must be at least 1")
        if self.mode not in _MODES:
            raise DimensionError(f"mode must be one of {_MODES}")
        if self.cost0_estimator not in ("oracle", "rollout"):
            raise DimensionError("cost0_estimator must be 'oracle' or 'rollout'")

    def per_system(self, value, idx):
        if value is None or np.isscalar(value):
            return value
        return value[idx]


@dataclass
class SingleHistory:
    system_id: int
    gains: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    gaps: list = field(default_factory=list)
    critic_errs: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    eta: float = 0.0
    cost_star: float = 0.0
    K_star: np.ndarray = None
    contraction: float = 1.0
    cost0_source: str = "oracle"
    aborted: bool = False
    abort_reason: str = ""


@dataclass
class TrainHistory:
    singles: list  # SingleHistory per trained system
    weights: list  # agent multiplicity of each trained system
    total_gaps: list
    skipped: list = field(default_factory=list)  # degenerate subsystem ids
    composed_check: dict = field(default_factory=dict)
    rate_constant: float = 0.0  # worst-system inverse contraction exponent
    aborted: bool = False


def default_stepsize(inst, C_K0):
    """Largest step size under the sufficient-decrease condition:
    eta = 1 / (||R|| + ||B||^2 C(K0) / sig_min(Phi))."""
    if C_K0 <= 0:
        raise DimensionError("C_K0 must be positive")
    sig_phi = float(np.linalg.eigvalsh(inst.Phi).min())
    return 1.0 / (
        float(np.linalg.norm(inst.R, 2)) + float(np.linalg.norm(inst.B, 2)) ** 2 * C_K0 / sig_phi
    )


def natural_step(K, E_hat, eta):
    K = matlin.as_matrix(K)
    E_hat = matlin.as_matrix(E_hat)
    if K.shape != E_hat.shape:
        raise DimensionError(f"gain {K.shape} vs gradient {E_hat.shape}")
    return K - eta * E_hat


def _estimate_cost0(inst, K0, cfg, stream_base):
    """C(K0) for step-size and radii selection: analytic, or a long rollout
    average when the run must stay strictly model-free."""
    pol = oracle.LinearGaussianPolicy(K0, 0.0)
    if cfg.cost0_estimator == "oracle":
        return oracle.analyze_policy(inst, pol).cost, "oracle"
    rho = matlin.spectral_radius(inst.A - inst.B @ K0)
    traj = sim.rollout(inst, pol, 100000, sim.RngStream(cfg.seed, stream_base + 999983), x0=None)
    return traj.average_cost(sim.burn_in_steps(rho)), "rollout"


def train_single(inst, K0, cfg, stream_base=0, system_id=0, eta=None, sigma=None):
    """Critic-actor loop on one LQR instance.

    With the analytic gradient, monotone decrease and the per-step linear
    contraction are asserted at every iteration; in model-free mode the GTD
    estimate replaces E_K and the achieved gradient error is logged against
    the analytic value. An actor step that destabilizes the policy aborts the
    loop and returns the history gathered so far.
    """
    K0 = matlin.as_matrix(K0)
    oracle.require_stable(inst, oracle.LinearGaussianPolicy(K0))
    if sigma is None:
        sigma = float(cfg.per_system(cfg.sigma_explore, system_id))
    if cfg.mode == "model_free" and sigma <= 0:
        raise DimensionError("model_free mode requires sigma_explore > 0")

    P_star, K_star = oracle.optimal_policy(inst)
    cost_star = oracle.analyze_policy(inst, oracle.LinearGaussianPolicy(K_star)).cost
    Sigma_star = oracle.analyze_policy(inst, oracle.LinearGaussianPolicy(K_star)).Sigma_K

    C0, cost0_source = _estimate_cost0(inst, K0, cfg, stream_base)
    if eta is None:
        eta = cfg.per_system(cfg.eta_override, system_id)
    if eta is None:
        eta = default_stepsize(inst, C0)
    eta = float(eta)
    sig_phi = float(np.linalg.eigvalsh(inst.Phi).min())
    sig_r = float(np.linalg.eigvalsh(inst.R).min())
    contraction = 1.0 - eta * sig_phi * sig_r / float(np.linalg.norm(Sigma_star, 2))

    hist = SingleHistory(
        system_id=system_id,
        eta=eta,
        cost_star=cost_star,
        K_star=K_star,
        contraction=contraction,
        cost0_source=cost0_source,
    )
    K = K0
    for n in range(cfg.N_outer + 1):
        t0 = time.perf_counter()
        analysis = oracle.analyze_policy(inst, oracle.LinearGaussianPolicy(K))
        hist.gains.append(K)
        hist.costs.append(analysis.cost)
        hist.gaps.append(analysis.cost - cost_star)
        if n == cfg.N_outer:
            hist.critic_errs.append(0.0)
            hist.wall_ms.append((time.perf_counter() - t0) * 1000.0)
            break

        if cfg.mode == "oracle_gradient":
            E_hat = analysis.E_K
            hist.critic_errs.append(0.0)
        else:
            pol = oracle.LinearGaussianPolicy(K, sigma)
            cfg_gtd = gtd.GTDConfig(
                T_inner=cfg.T_inner,
                alpha=float(cfg.per_system(cfg.alpha, system_id)),
                xi2_constant=cfg.xi2_constant,
                tight_radii=True,
            )
            out = gtd.gtd_evaluate(inst, pol, cfg_gtd, sim.RngStream(cfg.seed, stream_base + n))
            E_hat = out.E_hat
            hist.critic_errs.append(float(np.linalg.norm(E_hat - analysis.E_K, "fro")))

        K_next = natural_step(K, E_hat, eta)
        rho = matlin.spectral_radius(inst.A - inst.B @ K_next)
        if rho >= 1.0 - oracle.STABILITY_MARGIN:
            hist.aborted = True
            hist.abort_reason = (
                f"actor step left the stable region at n={n} (rho={rho:.6g}); "
                "gradient estimate error exceeded what the step size tolerates"
            )
            hist.wall_ms.append((time.perf_counter() - t0) * 1000.0)
            break
        if cfg.mode == "oracle_gradient":
            nxt = oracle.analyze_policy(inst, oracle.LinearGaussianPolicy(K_next))
            if nxt.cost > analysis.cost + 1e-9:
                raise InstabilityError(
                    f"analytic-gradient step increased the cost at n={n}: "
                    f"{analysis.cost:.12g} -> {nxt.cost:.12g}"
                )
            lhs = nxt.cost - cost_star
            rhs = contraction * (analysis.cost - cost_star)
            if lhs > rhs + 1e-9:
                raise InstabilityError(
                    f"linear contraction violated at n={n}: {lhs:.12g} > {rhs:.12g}"
                )
        hist.wall_ms.append((time.perf_counter() - t0) * 1000.0)
        K = K_next
    return hist


def _thread_count(n_systems):
    env = os.environ.get("HIERLQR_THREADS")
    if env:
        return max(1, int(env))
    return max(1, n_systems)


def subsystem_instances(ensemble):
    """(instances, weights, system ids, skipped ids): one LQR instance per
    non-degenerate deviation system plus the mean-field system last.

    The weight is the agent multiplicity: subsystem l appears n_l times in the
    global ergodic cost, the mean-field system once.
    """
    instances, weights, ids, skipped = [], [], [], []
    for l, sub in enumerate(ensemble.subsystems):
        if sub.degenerate:
            skipped.append(l)
            continue
        instances.append(
            oracle.LQRInstance(A=sub.A_l, B=sub.B_l, Q=sub.Q_l, R=sub.R_l, Phi=sub.Phi_l)
        )
        weights.append(sub.n_agents)
        ids.append(l)
    mf = ensemble.mean_field
    instances.append(oracle.LQRInstance(A=mf.A_bar, B=mf.B_bar, Q=mf.Q_eff, R=mf.R_eff, Phi=mf.Phi_bar))
    weights.append(1)
    ids.append(len(ensemble.subsystems))  # mean-field id = L
    return instances, weights, ids, skipped


def composed_cost(sys, ensemble, gains, K_bar):
    """Analytic ergodic cost of the composed global policy on the original
    coupled system (deterministic policy, true per-agent noise)."""
    G = decomp.compose_global_policy(ensemble, gains, K_bar)
    inst = oracle.LQRInstance(
        A=sys.A, B=sys.B, Q=sys.Q, R=sys.R, Phi=sys.global_noise_cov()
    )
    return oracle.analyze_policy(inst, oracle.LinearGaussianPolicy(G)).cost


def _full_gain_lists(ensemble, K0_list, hist_by_id, n):
    """Per-subpopulation gains at iteration n, filling skipped singletons with
    their initial gains, plus the mean-field gain."""
    p = ensemble.partition
    gains = []
    for l in range(p.L):
        if l in hist_by_id:
            h = hist_by_id[l]
            gains.append(h.gains[min(n, len(h.gains) - 1)])
        else:
            gains.append(matlin.as_matrix(K0_list[l]))
    h = hist_by_id[p.L]
    return gains, h.gains[min(n, len(h.gains) - 1)]


def train_hierarchical(sys, ensemble, K0_list, cfg, check_tol=1e-6):
    """Run the decoupled training problems and aggregate.

    K0_list holds one initial gain per subpopulation followed by the
    mean-field gain. Degenerate singleton subsystems are skipped (their
    deviation state is identically zero). The total gap is the multiplicity-
    weighted sum of per-system gaps, which equals the gap of the original
    coupled problem; the composed policy's analytic cost is cross-checked
    against the weighted cost sum at the first and last iterations.
    """
    p = ensemble.partition
    if len(K0_list) != p.L + 1:
        raise DimensionError("need one initial gain per subpopulation plus the mean-field gain")
    instances, weights, ids, skipped = subsystem_instances(ensemble)

    def run(i):
        sid = ids[i]
        return train_single(
            instances[i],
            K0_list[sid],
            cfg,
            stream_base=(sid + 1) * 1000000,
            system_id=sid,
            eta=cfg.per_system(cfg.eta_override, sid),
            sigma=float(cfg.per_system(cfg.sigma_explore, sid))
            if cfg.mode == "model_free"
            else 0.0,
        )

    with ThreadPoolExecutor(max_workers=_thread_count(len(instances))) as ex:
        singles = list(ex.map(run, range(len(instances))))

    aborted = any(h.aborted for h in singles)
    n_logged = min(len(h.gaps) for h in singles)
    total_gaps = [
        float(sum(w * h.gaps[n] for w, h in zip(weights, singles))) for n in range(n_logged)
    ]
    rate_constant = max(
        float(np.linalg.norm(oracle.analyze_policy(inst, oracle.LinearGaussianPolicy(h.K_star)).Sigma_K, 2))
        / (h.eta * float(np.linalg.eigvalsh(inst.Phi).min()) * float(np.linalg.eigvalsh(inst.R).min()))
        for inst, h in zip(instances, singles)
    )

    hist = TrainHistory(
        singles=singles,
        weights=weights,
        total_gaps=total_gaps,
        skipped=skipped,
        rate_constant=rate_constant,
        aborted=aborted,
    )

    hist_by_id = {h.system_id: h for h in singles}
    if not aborted:
        cost_star_total = float(sum(w * h.cost_star for w, h in zip(weights, singles)))
        for tag, n in (("initial", 0), ("final", n_logged - 1)):
            gains, K_bar = _full_gain_lists(ensemble, K0_list, hist_by_id, n)
            c_global = composed_cost(sys, ensemble, gains, K_bar)
            c_sum = total_gaps[n] + cost_star_total
            if abs(c_global - c_sum) > check_tol * max(1.0, abs(c_global)):
                raise InstabilityError(
                    f"composed global cost disagrees with the decomposed sum at the "
                    f"{tag} iterate: {c_global:.12g} vs {c_sum:.12g}"
                )
            hist.composed_check[tag] = {"global": c_global, "sum": c_sum}
    return hist


# --- export -------------------------------------------------------------------


def history_to_csv(hist, deterministic=False):
    """Columns: n, system_id, cost, gap, critic_err, eta, wall_ms.

    With deterministic=True the wall_ms cells are left blank so that repeated
    runs with the same config and seed produce byte-identical files.
    """
    lines = ["n,system_id,cost,gap,critic_err,eta,wall_ms"]
    for h in hist.singles:
        for n in range(len(h.costs)):
            wall = "" if deterministic else f"{h.wall_ms[n]:.3f}"
            lines.append(
                f"{n},{h.system_id},{h.costs[n]!r},{h.gaps[n]!r},"
                f"{h.critic_errs[n]!r},{h.eta!r},{wall}"
            )
    return "\n".join(lines) + "\n"


def history_summary(hist):
    return {
        "total_gap_initial": hist.total_gaps[0],
        "total_gap_final": hist.total_gaps[-1],
        "iterations_logged": len(hist.total_gaps),
        "rate_constant": hist.rate_constant,
        "aborted": hist.aborted,
        "skipped_subsystems": list(hist.skipped),
        "composed_check": hist.composed_check,
        "per_system": [
            {
                "system_id": h.system_id,
                "eta": h.eta,
                "contraction": h.contraction,
                "cost_star": h.cost_star,
                "gap_initial": h.gaps[0],
                "gap_final": h.gaps[-1],
                "cost0_source": h.cost0_source,
                "aborted": h.aborted,
                "abort_reason": h.abort_reason,
            }
            for h in hist.singles
        ],
    }


def history_summary_json(hist):
    return json.dumps(history_summary(hist), indent=2)
