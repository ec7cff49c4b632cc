import numpy as np
import pytest

from hierlqr import decomp, matlin, npg, oracle, sysmodel
from hierlqr.errors import DimensionError


def scalar_instance():
    return oracle.LQRInstance(A=[[0.5]], B=[[1.0]], Q=[[1.0]], R=[[1.0]], Phi=[[1.0]])


def make_system(seed, sizes=(2, 3)):
    p = sysmodel.SubpopulationPartition(sizes=sizes, state_dims=[1] * len(sizes),
                                        action_dims=[1] * len(sizes))
    return sysmodel.generate_system(p, seed=seed)


def zero_gains(ensemble):
    p = ensemble.partition
    gains = [np.zeros((p.action_dims[l], p.state_dims[l])) for l in range(p.L)]
    gains.append(np.zeros((sum(p.action_dims), sum(p.state_dims))))
    return gains


class TestStepSize:
    def test_plug_in(self):
        inst = scalar_instance()
        assert np.isclose(npg.default_stepsize(inst, 2.0), 1.0 / 3.0)

    def test_zero_b(self):
        inst = oracle.LQRInstance(A=[[0.5]], B=[[0.0]], Q=[[1.0]], R=[[2.0]], Phi=[[1.0]])
        assert np.isclose(npg.default_stepsize(inst, 5.0), 0.5)

    def test_positive_cost_required(self):
        with pytest.raises(DimensionError):
            npg.default_stepsize(scalar_instance(), 0.0)


class TestNaturalStep:
    def test_zero_gradient(self):
        K = np.array([[0.3]])
        assert np.array_equal(npg.natural_step(K, np.zeros((1, 1)), 0.1), K)

    def test_zero_stepsize(self):
        K = np.array([[0.3]])
        assert np.array_equal(npg.natural_step(K, np.ones((1, 1)), 0.0), K)

    def test_matches_hand_computation(self):
        inst = scalar_instance()
        K = np.array([[0.2]])
        E = oracle.analyze_policy(inst, oracle.LinearGaussianPolicy(K)).E_K
        stepped = npg.natural_step(K, E, 0.1)
        assert np.allclose(stepped, K - 0.1 * E)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            npg.natural_step(np.zeros((1, 2)), np.zeros((2, 1)), 0.1)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(DimensionError):
            npg.TrainConfig(N_outer=0)
        with pytest.raises(DimensionError):
            npg.TrainConfig(N_outer=1, mode="nope")
        with pytest.raises(DimensionError):
            npg.TrainConfig(N_outer=1, cost0_estimator="guess")

    def test_per_system(self):
        cfg = npg.TrainConfig(N_outer=1, sigma_explore=[0.1, 0.2])
        assert cfg.per_system(cfg.sigma_explore, 1) == 0.2
        assert cfg.per_system(0.5, 3) == 0.5
        assert cfg.per_system(None, 0) is None


class TestTrainSingle:
    def test_fixed_point_at_optimum(self):
        inst = scalar_instance()
        _, K_star = oracle.optimal_policy(inst)
        cfg = npg.TrainConfig(N_outer=5, mode="oracle_gradient")
        hist = npg.train_single(inst, K_star, cfg)
        assert max(hist.gaps) <= 1e-10

    def test_oracle_linear_convergence(self):
        inst = scalar_instance()
        cfg = npg.TrainConfig(N_outer=50, mode="oracle_gradient")
        hist = npg.train_single(inst, np.zeros((1, 1)), cfg)
        gaps = np.array(hist.gaps)
        assert np.all(np.diff(gaps) <= 1e-12)
        assert gaps[-1] <= hist.contraction**50 * gaps[0] + 1e-9

    def test_cost0_rollout_close_to_oracle(self):
        inst = scalar_instance()
        K0 = np.zeros((1, 1))
        c_oracle, _ = npg._estimate_cost0(inst, K0, npg.TrainConfig(N_outer=1), 0)
        cfg = npg.TrainConfig(N_outer=1, cost0_estimator="rollout", seed=0)
        c_roll, src = npg._estimate_cost0(inst, K0, cfg, 0)
        assert src == "rollout"
        assert abs(c_roll - c_oracle) / c_oracle <= 0.05

    def test_model_free_improves_and_is_deterministic(self):
        inst = scalar_instance()
        cfg = npg.TrainConfig(N_outer=3, T_inner=20000, mode="model_free", seed=5)
        h1 = npg.train_single(inst, np.zeros((1, 1)), cfg)
        h2 = npg.train_single(inst, np.zeros((1, 1)), cfg)
        assert h1.gaps == h2.gaps
        assert h1.gaps[-1] < h1.gaps[0]
        assert not h1.aborted
        assert len(h1.critic_errs) == len(h1.gaps)

    def test_huge_step_aborts_with_history(self):
        inst = scalar_instance()
        cfg = npg.TrainConfig(
            N_outer=10, T_inner=2000, mode="model_free", seed=0, eta_override=50.0
        )
        hist = npg.train_single(inst, np.zeros((1, 1)), cfg)
        assert hist.aborted
        assert "stable region" in hist.abort_reason
        assert len(hist.gaps) >= 1


class TestTrainHierarchical:
    def test_oracle_mode_end_to_end(self):
        sys = make_system(seed=21)
        ens = decomp.build_auxiliary(sys)
        cfg = npg.TrainConfig(N_outer=20, mode="oracle_gradient")
        hist = npg.train_hierarchical(sys, ens, zero_gains(ens), cfg)
        assert not hist.aborted
        gaps = np.array(hist.total_gaps)
        assert np.all(np.diff(gaps) <= 1e-12)
        for tag in ("initial", "final"):
            chk = hist.composed_check[tag]
            assert abs(chk["global"] - chk["sum"]) <= 1e-6 * max(1.0, chk["global"])

    def test_singleton_subsystem_skipped(self):
        sys = make_system(seed=22, sizes=(1, 2))
        ens = decomp.build_auxiliary(sys)
        cfg = npg.TrainConfig(N_outer=3, mode="oracle_gradient")
        hist = npg.train_hierarchical(sys, ens, zero_gains(ens), cfg)
        assert hist.skipped == [0]
        assert sorted(h.system_id for h in hist.singles) == [1, 2]

    def test_k0_list_length_checked(self):
        sys = make_system(seed=23)
        ens = decomp.build_auxiliary(sys)
        cfg = npg.TrainConfig(N_outer=1)
        with pytest.raises(DimensionError):
            npg.train_hierarchical(sys, ens, zero_gains(ens)[:-1], cfg)

    def test_thread_cap_env(self, monkeypatch):
        monkeypatch.setenv("HIERLQR_THREADS", "1")
        assert npg._thread_count(4) == 1
        monkeypatch.delenv("HIERLQR_THREADS")
        assert npg._thread_count(4) == 4

    def test_parallel_matches_sequential(self, monkeypatch):
        sys = make_system(seed=24)
        ens = decomp.build_auxiliary(sys)
        cfg = npg.TrainConfig(N_outer=5, mode="oracle_gradient")
        hist_par = npg.train_hierarchical(sys, ens, zero_gains(ens), cfg)
        monkeypatch.setenv("HIERLQR_THREADS", "1")
        hist_seq = npg.train_hierarchical(sys, ens, zero_gains(ens), cfg)
        assert hist_par.total_gaps == hist_seq.total_gaps


class TestExport:
    def _small_history(self):
        sys = make_system(seed=25)
        ens = decomp.build_auxiliary(sys)
        cfg = npg.TrainConfig(N_outer=3, mode="oracle_gradient")
        return npg.train_hierarchical(sys, ens, zero_gains(ens), cfg)

    def test_csv_layout(self):
        hist = self._small_history()
        text = npg.history_to_csv(hist)
        lines = text.strip().split("\n")
        assert lines[0] == "n,system_id,cost,gap,critic_err,eta,wall_ms"
        assert len(lines) == 1 + 3 * 4  # three systems, N_outer+1 rows each

    def test_deterministic_csv_blanks_wall_time(self):
        hist = self._small_history()
        text = npg.history_to_csv(hist, deterministic=True)
        for line in text.strip().split("\n")[1:]:
            assert line.endswith(",")

    def test_deterministic_csv_is_reproducible(self):
        a = npg.history_to_csv(self._small_history(), deterministic=True)
        b = npg.history_to_csv(self._small_history(), deterministic=True)
        assert a == b

    def test_summary_json(self):
        import json

        hist = self._small_history()
        obj = json.loads(npg.history_summary_json(hist))
        assert obj["iterations_logged"] == 4
        assert not obj["aborted"]
        assert len(obj["per_system"]) == 3
        assert obj["rate_constant"] > 0
