"""End-to-end acceptance checks. Each test covers one numbered criterion and
emits a single PASS line with the measured quantity; run with -v (or -s) to
see one line per criterion.
"""

import time

import numpy as np

from hierlqr import cli, decomp, gtd, matlin, npg, oracle, sim, sysmodel


def _random_partition(rng):
    L = int(rng.integers(1, 4))
    return sysmodel.SubpopulationPartition(
        sizes=[int(rng.integers(1, 7)) for _ in range(L)],
        state_dims=[int(rng.integers(1, 4)) for _ in range(L)],
        action_dims=[int(rng.integers(1, 3)) for _ in range(L)],
    )


def _random_instance(rng, d, k):
    A = rng.normal(size=(d, d))
    A = A * (0.8 / matlin.spectral_radius(A))
    B = rng.normal(size=(d, k))
    M = rng.normal(size=(d, d))
    Q = M @ M.T + 0.2 * np.eye(d)
    M = rng.normal(size=(k, k))
    R = M @ M.T + 0.2 * np.eye(k)
    M = rng.normal(size=(d, d))
    Phi = M @ M.T + 0.2 * np.eye(d)
    return oracle.LQRInstance(A=A, B=B, Q=Q, R=R, Phi=Phi)


def _random_stable_gain(rng, inst, scale=0.2, rho_max=0.98):
    while True:
        K = rng.normal(size=(inst.action_dim, inst.state_dim)) * scale
        if matlin.spectral_radius(inst.A - inst.B @ K) < rho_max:
            return K


def _stable_hierarchical_gains(rng, ensemble, scale=0.1):
    """Gains stable on every non-degenerate auxiliary system."""
    p = ensemble.partition
    mf = ensemble.mean_field
    while True:
        gains = [rng.normal(size=(p.action_dims[l], p.state_dims[l])) * scale
                 for l in range(p.L)]
        K_bar = rng.normal(size=(sum(p.action_dims), sum(p.state_dims))) * scale
        ok = all(
            sub.degenerate or matlin.spectral_radius(sub.A_l - sub.B_l @ K) < 0.95
            for sub, K in zip(ensemble.subsystems, gains)
        ) and matlin.spectral_radius(mf.A_bar - mf.B_bar @ K_bar) < 0.95
        if ok:
            return gains, K_bar


def test_criterion_01_cost_decomposition_identity():
    t0 = time.monotonic()
    rng = np.random.default_rng(101)
    worst = 0.0
    for s in range(10):
        p = _random_partition(rng)
        sys = sysmodel.generate_system(p, seed=1000 + s)
        ens = decomp.build_auxiliary(sys)
        xs = rng.normal(size=(1000, p.total_state_dim))
        us = rng.normal(size=(1000, p.total_action_dim))
        for x, u in zip(xs, us):
            c_gt = sysmodel.global_cost(sys, x, u)
            bundle = decomp.to_coordinates(p, x, u)
            c_bar, c_tilde = decomp.auxiliary_costs(ens, bundle)
            err = abs(c_gt - c_bar - sum(c_tilde)) / (1.0 + abs(c_gt))
            worst = max(worst, err)
            assert err <= 1e-10
    elapsed = time.monotonic() - t0
    assert elapsed < 5.0
    print(f"criterion 1 PASS: cost decomposition max rel residual {worst:.3e} "
          f"(tol 1e-10) over 10 systems x 1000 points in {elapsed:.1f}s")


def test_criterion_02_pathwise_coupling():
    t0 = time.monotonic()
    rng = np.random.default_rng(102)
    worst = 0.0
    for s in range(10):
        p = _random_partition(rng)
        sys = sysmodel.generate_system(p, seed=2000 + s)
        ens = decomp.build_auxiliary(sys)
        gains, K_bar = _stable_hierarchical_gains(rng, ens)
        pol = sim.HierarchicalPolicy(
            gains=tuple(gains), K_bar=K_bar,
            sigmas=tuple(0.2 for _ in gains), sigma_bar=0.2,
        )
        res = sim.pathwise_coupling_residual(sys, ens, pol, 100, sim.RngStream(s, 0))
        worst = max(worst, res)
        assert res <= 1e-10
    elapsed = time.monotonic() - t0
    assert elapsed < 5.0
    print(f"criterion 2 PASS: pathwise coupling max deviation {worst:.3e} "
          f"(tol 1e-10) over 10 systems x 100 steps in {elapsed:.1f}s")


def test_criterion_03_ergodic_decomposition():
    t0 = time.monotonic()
    rng = np.random.default_rng(103)
    worst = 0.0
    for s in range(20):
        p = _random_partition(rng)
        sys = sysmodel.generate_system(p, seed=3000 + s)
        ens = decomp.build_auxiliary(sys)
        gains, K_bar = _stable_hierarchical_gains(rng, ens)
        G = decomp.compose_global_policy(ens, gains, K_bar)
        g_inst = oracle.LQRInstance(
            A=sys.A, B=sys.B, Q=sys.Q, R=sys.R, Phi=sys.global_noise_cov()
        )
        c_global = oracle.analyze_policy(g_inst, oracle.LinearGaussianPolicy(G)).cost
        total = 0.0
        for l, sub in enumerate(ens.subsystems):
            if sub.degenerate:
                continue
            inst = oracle.LQRInstance(A=sub.A_l, B=sub.B_l, Q=sub.Q_l,
                                      R=sub.R_l, Phi=sub.Phi_l)
            c = oracle.analyze_policy(inst, oracle.LinearGaussianPolicy(gains[l])).cost
            total += sub.n_agents * c
        mf = ens.mean_field
        inst = oracle.LQRInstance(A=mf.A_bar, B=mf.B_bar, Q=mf.Q_eff,
                                  R=mf.R_eff, Phi=mf.Phi_bar)
        total += oracle.analyze_policy(inst, oracle.LinearGaussianPolicy(K_bar)).cost
        err = abs(c_global - total) / max(1.0, abs(c_global))
        worst = max(worst, err)
        assert err <= 1e-6
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    print(f"criterion 3 PASS: ergodic decomposition max rel error {worst:.3e} "
          f"(tol 1e-6) over 20 stable hierarchical policies in {elapsed:.1f}s")


def test_criterion_04_gradient_correctness():
    t0 = time.monotonic()
    rng = np.random.default_rng(104)
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        inst = _random_instance(rng, d, k)
        K = _random_stable_gain(rng, inst)
        err = oracle.gradient_fd_check(inst, oracle.LinearGaussianPolicy(K), h=1e-5)
        worst = max(worst, err)
        assert err <= 1e-4
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    print(f"criterion 4 PASS: finite-difference gradient max rel error {worst:.3e} "
          f"(tol 1e-4) over 20 pairs in {elapsed:.1f}s")


def test_criterion_05_gradient_domination():
    t0 = time.monotonic()
    rng = np.random.default_rng(105)
    for i in range(5):
        d = int(rng.integers(1, 4))
        k = int(rng.integers(1, 3))
        inst = _random_instance(rng, d, k)
        _, K_star = oracle.optimal_policy(inst)
        ks_analysis = oracle.analyze_policy(inst, oracle.LinearGaussianPolicy(K_star))
        for _ in range(50):
            K = _random_stable_gain(rng, inst)
            # raises on violation beyond the 1e-8 slack
            lower, upper, gap = oracle.dom_bounds(
                inst, oracle.LinearGaussianPolicy(K),
                K_star_analysis=ks_analysis, slack=1e-8,
            )
            assert lower <= gap + 1e-8 and gap <= upper + 1e-8
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    print(f"criterion 5 PASS: gradient-domination sandwich held on 5 instances x 50 "
          f"policies (slack 1e-8) in {elapsed:.1f}s")


def test_criterion_06_oracle_linear_convergence():
    t0 = time.monotonic()
    rng = np.random.default_rng(106)
    cfg = npg.TrainConfig(N_outer=50, mode="oracle_gradient")
    worst_ratio = 0.0
    for _ in range(5):
        d = int(rng.integers(1, 4))
        k = int(rng.integers(1, 3))
        inst = _random_instance(rng, d, k)
        K0 = np.zeros((k, d))
        # train_single raises if monotone decrease or the per-step contraction
        # inequality fails at any iterate
        hist = npg.train_single(inst, K0, cfg)
        assert not hist.aborted
        bound = hist.contraction**50 * hist.gaps[0] + 1e-9
        assert hist.gaps[-1] <= bound
        worst_ratio = max(worst_ratio, hist.gaps[-1] / max(bound, 1e-300))

    p = sysmodel.SubpopulationPartition(sizes=[2, 3], state_dims=[1, 1],
                                        action_dims=[1, 1])
    sys = sysmodel.generate_system(p, seed=606)
    ens = decomp.build_auxiliary(sys)
    K0 = [np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((2, 2))]
    hist = npg.train_hierarchical(sys, ens, K0, cfg)
    assert not hist.aborted
    gaps = np.array(hist.total_gaps)
    assert np.all(np.diff(gaps) <= 1e-12)
    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    print(f"criterion 6 PASS: linear convergence on 5 instances and one L=2 problem; "
          f"worst final-gap/bound ratio {worst_ratio:.3g} in {elapsed:.1f}s")


def _gtd_instances():
    scalar = (
        oracle.LQRInstance(A=[[0.5]], B=[[1.0]], Q=[[1.0]], R=[[1.0]], Phi=[[1.0]]),
        oracle.LinearGaussianPolicy([[0.2]], 0.5),
    )
    d2k1 = (
        oracle.LQRInstance(
            A=[[0.5, 0.1], [0.1, 0.4]], B=[[0.5], [1.0]],
            Q=np.eye(2), R=[[1.0]], Phi=np.eye(2),
        ),
        oracle.LinearGaussianPolicy([[0.1, 0.3]], 0.5),
    )
    return {"scalar": scalar, "d2k1": d2k1}


def test_criterion_07_gtd_critic_accuracy():
    t0 = time.monotonic()
    for name, (inst, pol) in _gtd_instances().items():
        vv = oracle.value_vector(inst, pol)
        mean_err = {}
        for T in (1000, 10000, 100000):
            errs = []
            for seed in range(5):
                out = gtd.gtd_evaluate(
                    inst, pol, gtd.GTDConfig(T_inner=T),
                    sim.RngStream(seed, 0), delta_star=vv.delta_star,
                )
                errs.append(out.diagnostics["delta_err"])
            mean_err[T] = float(np.mean(errs))
            if T == 100000:
                n_pass = sum(e <= 0.1 for e in errs)
                assert n_pass >= 3, f"{name}: errors at T=1e5: {errs}"
        assert mean_err[1000] > mean_err[10000] > mean_err[100000], (
            f"{name}: no monotone decay: {mean_err}"
        )
        print(f"criterion 7 PASS ({name}): T=1e5 errors pass majority "
              f"({n_pass}/5 <= 0.1), seed-mean decay "
              f"{mean_err[1000]:.3f} > {mean_err[10000]:.3f} > {mean_err[100000]:.3f}")
    elapsed = time.monotonic() - t0
    assert elapsed < 180.0
    print(f"criterion 7 PASS: both instances in {elapsed:.1f}s")


def test_criterion_08_end_to_end_model_free():
    t0 = time.monotonic()
    p = sysmodel.SubpopulationPartition(sizes=[2, 3], state_dims=[1, 1],
                                        action_dims=[1, 1])
    sys = sysmodel.generate_system(p, seed=11)
    ens = decomp.build_auxiliary(sys)
    instances, weights, ids, skipped = npg.subsystem_instances(ens)
    assert skipped == []

    # Per-system step sizes from the exact Hessian scale at K0 = 0 (the
    # worst-case smoothness bound is far too conservative for the mean-field
    # system, whose gap would not move within N=50 at that step size)
    etas = []
    for inst in instances:
        P0 = oracle.analyze_policy(
            inst, oracle.LinearGaussianPolicy(np.zeros((inst.action_dim, inst.state_dim)))
        ).P_K
        etas.append(1.0 / float(np.linalg.norm(inst.R + inst.B.T @ P0 @ inst.B, 2)))
    etas[2] *= 0.5

    K0 = [np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((2, 2))]
    ratios, finals_stable = [], []
    for seed in range(5):
        cfg = npg.TrainConfig(
            N_outer=50, T_inner=100000, mode="model_free", seed=seed,
            eta_override=etas, sigma_explore=0.5, alpha=[0.3, 0.3, 0.05],
        )
        hist = npg.train_hierarchical(sys, ens, K0, cfg)
        ratio = hist.total_gaps[-1] / hist.total_gaps[0]
        ratios.append(ratio)
        by_id = {h.system_id: h for h in hist.singles}
        G = decomp.compose_global_policy(
            ens, [by_id[0].gains[-1], by_id[1].gains[-1]], by_id[2].gains[-1]
        )
        finals_stable.append(
            not hist.aborted and matlin.spectral_radius(sys.A - sys.B @ G) < 1.0
        )
    n_pass = sum(r <= 0.05 and ok for r, ok in zip(ratios, finals_stable))
    elapsed = time.monotonic() - t0
    assert n_pass >= 3, f"ratios={ratios}, stable={finals_stable}"
    assert elapsed < 600.0
    print(f"criterion 8 PASS: gap ratios {[f'{r:.4f}' for r in ratios]} "
          f"(target <= 0.05, majority), all final composed policies stable: "
          f"{all(finals_stable)}, in {elapsed:.0f}s")


def test_criterion_09_structural_exactness():
    t0 = time.monotonic()
    rng = np.random.default_rng(109)

    # svec/smat round-trip: diagonal bit-exact, off-diagonals within one ulp
    # of the sqrt(2) weighting round-trip
    for d in (1, 2, 3, 5, 8):
        M = rng.normal(size=(d, d))
        Z = (M + M.T) / 2.0
        back = matlin.smat(matlin.svec(Z))
        assert np.array_equal(np.diag(back), np.diag(Z))
        assert np.abs(back - Z).max() <= 4e-16 * max(1.0, np.abs(Z).max())

    # natural-gradient recovery from the true value vector
    worst = 0.0
    for _ in range(5):
        inst = _random_instance(rng, 3, 2)
        K = _random_stable_gain(rng, inst)
        pol = oracle.LinearGaussianPolicy(K)
        vv = oracle.value_vector(inst, pol)
        E_ref = oracle.analyze_policy(inst, pol).E_K
        E = oracle.natural_gradient_from_delta(vv.delta_star, K)
        worst = max(worst, float(np.abs(E - E_ref).max()))
        assert np.abs(E - E_ref).max() <= 1e-10

    # permutation invariance of generated systems, exact equality
    p = sysmodel.SubpopulationPartition(sizes=[3, 4], state_dims=[2, 1],
                                        action_dims=[1, 2])
    sys = sysmodel.generate_system(p, seed=909)
    for l in range(p.L):
        for i in range(p.sizes[l]):
            for j in range(i + 1, p.sizes[l]):
                Px, Pu = sysmodel.within_subpop_transposition(p, l, i, j)
                assert np.array_equal(Px @ sys.A @ Px.T, sys.A)
                assert np.array_equal(Px @ sys.B @ Pu.T, sys.B)
                assert np.array_equal(Px @ sys.Q @ Px.T, sys.Q)
                assert np.array_equal(Pu @ sys.R @ Pu.T, sys.R)
    elapsed = time.monotonic() - t0
    assert elapsed < 2.0
    print(f"criterion 9 PASS: svec/smat round-trip, natural-gradient recovery "
          f"(max dev {worst:.3e}, tol 1e-10), permutation invariance exact, "
          f"in {elapsed:.1f}s")


def test_criterion_10_csv_determinism(tmp_path):
    import json
    import os

    cfg = {
        "system": {"generate": {"sizes": [2, 3], "state_dims": [1, 1],
                                "action_dims": [1, 1], "seed": 10}},
        "train": {"N_outer": 5, "mode": "oracle_gradient", "seed": 1},
    }
    outputs = []
    for name in ("run_a", "run_b"):
        out_dir = str(tmp_path / name)
        cfg_path = str(tmp_path / f"{name}.json")
        cfg["out_dir"] = out_dir
        with open(cfg_path, "w") as f:
            json.dump(cfg, f)
        assert cli.main(["train", "--config", cfg_path]) == cli.EXIT_OK
        outputs.append({
            fn: open(os.path.join(out_dir, fn), "rb").read()
            for fn in ("train.csv", "system.json", "summary.json")
        })
    assert outputs[0] == outputs[1]
    print("criterion 10 PASS: identical config+seed reruns produce byte-identical "
          "train.csv, system.json and summary.json")
