import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from compactmem.glm import curvature, predict
from compactmem.kprior import Memory
from compactmem.ppca import (
    EMError,
    PpcaConfig,
    build_targets_linear,
    build_targets_logistic,
    em_update,
    load_memory,
    log_likelihood,
    run_em,
    save_memory,
    update_memory_linear,
    update_memory_logistic,
    update_memory_svd,
)


def random_memory(rng, P, K):
    U = rng.standard_normal((P, K))
    U /= np.linalg.norm(U, axis=0)
    return Memory(U, rng.uniform(0.5, 2.0, K))


def random_spd(rng, P, low=1.0, high=3.0):
    Q, _ = np.linalg.qr(rng.standard_normal((P, P)))
    return Q @ np.diag(rng.uniform(low, high, P)) @ Q.T


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestConfig:
    def test_defaults(self):
        cfg = PpcaConfig()
        assert cfg.epsilon > 0 and cfg.weight_floor > 0
        assert cfg.init_scale == "fit"

    @pytest.mark.parametrize("kw", [{"epsilon": 0.0}, {"weight_floor": -1.0}, {"init_strategy": "eig"},
                                    {"init_scale": "norm"}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            PpcaConfig(**kw)


class TestBuildTargets:
    def test_empty_phi_gives_memory_term(self, rng):
        mem = random_memory(rng, 4, 2)
        st_ = build_targets_linear(np.zeros((4, 0)), mem)
        assert_allclose(st_.T, mem.scaled)
        assert_allclose(st_.S, mem.U @ np.diag(mem.w) @ mem.U.T, atol=1e-12)

    def test_identity_features(self):
        assert_allclose(build_targets_linear(np.eye(3), Memory.empty(3)).S, np.eye(3))

    def test_linear_random(self, rng):
        phi, mem = rng.standard_normal((4, 7)), random_memory(rng, 4, 3)
        S = build_targets_linear(phi, mem).S
        assert_allclose(S, phi @ phi.T + mem.U @ np.diag(mem.w) @ mem.U.T, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError, match="P=5"):
            build_targets_linear(np.ones((5, 2)), random_memory(rng, 4, 2))
        with pytest.raises(ValueError):
            build_targets_logistic("binary", np.ones((5, 2)), random_memory(rng, 4, 2), np.zeros(5))

    def test_logistic_at_zero(self, rng):
        phi, mem = rng.standard_normal((5, 9)), random_memory(rng, 5, 2)
        S = build_targets_logistic("binary", phi, mem, np.zeros(5)).S
        assert_allclose(S, 0.25 * (phi @ phi.T + mem.U @ np.diag(mem.w) @ mem.U.T), atol=1e-12)

    def test_single_column(self, rng):
        phi, theta = rng.standard_normal((4, 1)), rng.standard_normal(4)
        p = 1.0 / (1.0 + np.exp(-(phi[:, 0] @ theta)))
        S = build_targets_logistic("binary", phi, Memory.empty(4), theta).S
        assert_allclose(S, p * (1 - p) * phi @ phi.T, atol=1e-14)

    def test_binary_explicit_matrices(self, rng):
        P, N, K = 6, 20, 3
        phi, mem, theta = rng.standard_normal((P, N)), random_memory(rng, P, K), rng.standard_normal(P)
        p_data = 1.0 / (1.0 + np.exp(-(theta @ phi)))
        p_mem = 1.0 / (1.0 + np.exp(-(theta @ mem.U)))
        B = np.diag(p_data * (1 - p_data))
        W_tilde = np.diag(mem.w * p_mem * (1 - p_mem))
        S = build_targets_logistic("binary", phi, mem, theta).S
        assert_allclose(S, phi @ B @ phi.T + mem.U @ W_tilde @ mem.U.T, rtol=0, atol=1e-12)

    def test_multiclass_summed_blocks(self, rng):
        P, N, K, C = 6, 20, 3, 4
        phi, mem, theta = rng.standard_normal((P, N)), random_memory(rng, P, K), rng.standard_normal((C, P))
        clip = 1e-4
        prob_d = np.clip(predict("multiclass", theta, phi), clip, 1 - clip)
        prob_m = np.clip(predict("multiclass", theta, mem.U), clip, 1 - clip)
        rhs = np.zeros((P, P))
        for c in range(C):
            rhs += phi @ np.diag(prob_d[c] * (1 - prob_d[c])) @ phi.T
            rhs += mem.U @ np.diag(mem.w * prob_m[c] * (1 - prob_m[c])) @ mem.U.T
        assert_allclose(build_targets_logistic("multiclass", phi, mem, theta, clip).S, rhs, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("family", ["binary", "multiclass"])
    def test_gram_is_psd(self, rng, family):
        theta = rng.standard_normal(8) if family == "binary" else rng.standard_normal((3, 8))
        S = build_targets_logistic(family, rng.standard_normal((8, 30)), random_memory(rng, 8, 4), theta).S
        assert_allclose(S, S.T)
        assert np.linalg.eigvalsh(S).min() >= -1e-8 * np.linalg.norm(S)


class TestEMUpdate:
    @pytest.mark.parametrize("s,eps", [(1.0, 1e-4), (2.0, 0.3), (5.0, 1.0)])
    def test_rank_one_fixed_point_and_rate(self, s, eps):
        # scalar map c -> g(c) on S = s u u^T; fixed point c^2 = s - eps, slope 1 - 2 eps (s - eps) / s^2
        u = np.array([[0.6], [0.0], [0.8]])
        S = s * u @ u.T
        c = np.sqrt(s - eps)
        assert_allclose(em_update(S, u * c, eps), u * c, atol=1e-14)
        h = 1e-6
        slope = (em_update(S, u * (c + h), eps)[0, 0] - em_update(S, u * (c - h), eps)[0, 0]) / (2 * h * u[0, 0])
        assert_allclose(slope, 1 - 2 * eps * (s - eps) / s**2, rtol=1e-7)

    @pytest.mark.parametrize("c0", [0.05, -1.0, 4.0])
    def test_rank_one_converges(self, rng, c0):
        u = rng.standard_normal((6, 1))
        u /= np.linalg.norm(u)
        s, eps = 3.0, 0.5
        U = run_em(s * u @ u.T, u * c0, eps, 300)
        assert_allclose(U @ U.T, (s - eps) * u @ u.T, atol=1e-10)

    def test_full_rank_fixed_point(self, rng):
        S, eps = random_spd(rng, 5), 1e-4
        d, V = np.linalg.eigh(S)
        U = V * np.sqrt(d - eps)
        out = em_update(S, U, eps)
        assert_allclose(out @ out.T, U @ U.T, atol=1e-10)

    def test_full_rank_converges_when_eps_comparable(self, rng):
        S, eps = random_spd(rng, 8), 0.5
        U = run_em(S, rng.standard_normal((8, 8)), eps, 500)
        assert rel_fro(U @ U.T + eps * np.eye(8), S) < 1e-10

    def test_small_eps_preserves_shape_within_subspace(self, rng):
        # with eps much smaller than the spectrum, EM moves U U^T only at rate ~eps / eigenvalue
        S, eps = random_spd(rng, 6), 1e-4
        U0 = rng.standard_normal((6, 6))
        U = run_em(S, U0, eps, 50)
        assert rel_fro(U @ U.T, U0 @ U0.T) < 0.05

    def test_likelihood_non_decreasing(self, rng):
        for _ in range(100):
            P = int(rng.integers(2, 9))
            K = int(rng.integers(1, P + 1))
            T = rng.standard_normal((P, int(rng.integers(1, 2 * P))))
            S, eps = T @ T.T / P, 10 ** rng.uniform(-3, 0)
            U = rng.standard_normal((P, K))
            ll = log_likelihood(S, U, eps)
            for _ in range(20):
                U = em_update(S, U, eps)
                ll_next = log_likelihood(S, U, eps)
                assert ll_next >= ll - 1e-8
                ll = ll_next

    def test_zero_columns(self):
        assert em_update(np.eye(3), np.zeros((3, 0)), 0.1).shape == (3, 0)

    def test_k_greater_than_p(self):
        with pytest.raises(ValueError, match="exceeds"):
            em_update(np.eye(2), np.ones((2, 3)), 0.1)

    def test_indefinite_system_aborts(self):
        with pytest.raises(EMError, match="jitter"):
            em_update(-np.eye(3), np.eye(3), 1e-3)

    def test_tolerance_stops_early(self, rng):
        S, eps = random_spd(rng, 4), 0.5
        U = run_em(S, rng.standard_normal((4, 4)), eps, 10_000, tol=1e-8)
        assert rel_fro(U @ U.T + eps * np.eye(4), S) < 1e-6

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 6), st.floats(1e-3, 0.5), st.integers(0, 10_000))
    def test_fixed_point_property(self, P, eps, seed):
        S = random_spd(np.random.default_rng(seed), P, low=1.0, high=4.0)
        d, V = np.linalg.eigh(S)
        U = V * np.sqrt(d - eps)
        out = em_update(S, U, eps)
        assert_allclose(out @ out.T + eps * np.eye(P), S, atol=1e-10)


def low_rank(rng, P, R, N):
    return rng.standard_normal((P, R)) @ rng.standard_normal((R, N))


class TestUpdateLinear:
    def test_pass_through(self, rng):
        mem = random_memory(rng, 5, 3)
        out = update_memory_linear(rng.standard_normal((5, 10)), mem, PpcaConfig(em_iters=0))
        assert_allclose(out.U, mem.U, atol=1e-12)
        assert_allclose(out.w, mem.w, atol=1e-12)

    def test_grows_by_delta_k_and_caps_at_p(self, rng):
        phi = rng.standard_normal((6, 20))
        mem = update_memory_linear(phi, Memory.empty(6), PpcaConfig(em_iters=5, new_vectors_per_task=4))
        assert mem.K == 4
        mem = update_memory_linear(phi, mem, PpcaConfig(em_iters=5, new_vectors_per_task=4))
        assert mem.K == 6
        mem.check()

    def test_zero_columns_are_never_sampled(self):
        phi = np.zeros((3, 5))
        phi[:, 2] = [1.0, 2.0, 0.0]
        mem = update_memory_linear(phi, Memory.empty(3), PpcaConfig(em_iters=0, new_vectors_per_task=3))
        assert mem.K == 1
        assert_allclose(np.abs(mem.U[:, 0]), np.abs(phi[:, 2]) / np.sqrt(5.0))

    @pytest.mark.parametrize("K", [2, 3])
    def test_subspace_is_top_eigenspace(self, rng, K):
        phi = low_rank(rng, 8, 3, 30)
        mem = update_memory_linear(phi, Memory.empty(8), PpcaConfig(epsilon=1e-6, em_iters=2000, new_vectors_per_task=K))
        V = np.linalg.eigh(phi @ phi.T)[1][:, -K:]
        assert sla.subspace_angles(mem.U, V).max() < 1e-4

    def test_exact_when_eps_comparable(self, rng):
        phi = rng.standard_normal((4, 12))
        eps = 0.5 * np.linalg.eigvalsh(phi @ phi.T).min()
        mem = update_memory_linear(phi, Memory.empty(4), PpcaConfig(epsilon=eps, em_iters=3000, new_vectors_per_task=4))
        assert rel_fro(mem.U @ np.diag(mem.w) @ mem.U.T + eps * np.eye(4), phi @ phi.T) < 1e-6

    def test_fit_scale_no_worse_than_raw_at_start(self, rng):
        for seed in range(10):
            phi, mem0 = rng.standard_normal((7, 25)), random_memory(rng, 7, 2)
            S = build_targets_linear(phi, mem0).S
            res = {}
            for scale in ("raw", "fit"):
                cfg = PpcaConfig(epsilon=1e-4, em_iters=0, new_vectors_per_task=3, init_scale=scale, seed=seed)
                m = update_memory_linear(phi, mem0, cfg)
                res[scale] = np.linalg.norm(m.U @ np.diag(m.w) @ m.U.T + 1e-4 * np.eye(7) - S)
            assert res["fit"] <= res["raw"] + 1e-9

    def test_trace_scale_matches_target_trace(self, rng):
        phi = rng.standard_normal((6, 30))
        m = update_memory_linear(phi, Memory.empty(6), PpcaConfig(em_iters=0, new_vectors_per_task=3, init_scale="trace"))
        assert_allclose(m.w.sum(), np.sum(phi * phi))

    def test_same_seed_same_memory(self, rng):
        phi = rng.standard_normal((6, 30))
        cfg = PpcaConfig(em_iters=20, new_vectors_per_task=3, seed=7)
        a = update_memory_linear(phi, Memory.empty(6), cfg)
        b = update_memory_linear(phi, Memory.empty(6), cfg)
        assert np.array_equal(a.U, b.U) and np.array_equal(a.w, b.w)


class TestUpdateLogistic:
    @pytest.mark.parametrize("scale", ["raw", "trace", "fit"])
    def test_zero_params_reduce_to_half_scaled_linear(self, rng, scale):
        phi = rng.standard_normal((6, 25))
        cfg = PpcaConfig(epsilon=1e-3, em_iters=50, new_vectors_per_task=3, init_scale=scale, seed=3)
        log_mem = update_memory_logistic("binary", phi, Memory.empty(6), np.zeros(6), cfg)
        lin_mem = update_memory_linear(0.5 * phi, Memory.empty(6), cfg)
        signs = np.sign(np.sum(log_mem.U * lin_mem.U, axis=0))
        assert_allclose(log_mem.U * signs, lin_mem.U, atol=1e-8)
        assert_allclose(0.25 * log_mem.w, lin_mem.w, rtol=1e-8)

    def test_single_example(self, rng):
        phi, theta, eps = rng.standard_normal((5, 1)), 0.3 * rng.standard_normal(5), 1e-4
        cfg = PpcaConfig(epsilon=eps, em_iters=100, new_vectors_per_task=1)
        mem = update_memory_logistic("binary", phi, Memory.empty(5), theta, cfg)
        u = phi[:, 0] / np.linalg.norm(phi)
        assert_allclose(np.abs(mem.U[:, 0] @ u), 1.0, atol=1e-12)
        lam_phi = curvature("binary", theta, phi)[0]
        lam_u = curvature("binary", theta, mem.U)[0]
        assert_allclose(mem.w[0] * lam_u, lam_phi * np.sum(phi**2) - eps, rtol=1e-10)

    @pytest.mark.parametrize("family", ["binary", "multiclass"])
    def test_memory_invariants(self, rng, family):
        theta = rng.standard_normal(8) if family == "binary" else rng.standard_normal((3, 8))
        mem = random_memory(rng, 8, 2)
        out = update_memory_logistic(family, rng.standard_normal((8, 30)), mem, theta,
                                     PpcaConfig(em_iters=30, new_vectors_per_task=3))
        assert out.K == 5
        out.check()

    def test_tiny_curvature_aborts(self):
        phi = np.array([[1.0], [0.0]])
        with pytest.raises(EMError, match="curvature"):
            update_memory_logistic("binary", phi, Memory.empty(2), np.array([100.0, 0.0]),
                                   PpcaConfig(em_iters=1, new_vectors_per_task=1), clip=0.0)


class TestSVD:
    def test_basis_vector(self):
        e1 = np.zeros((4, 1))
        e1[0] = 1.0
        mem = update_memory_svd(e1, Memory.empty(4), 1)
        assert_allclose(np.abs(mem.U[:, 0]), e1[:, 0])
        assert_allclose(mem.w, [1.0])

    def test_full_rank_reconstructs(self, rng):
        phi, old = rng.standard_normal((5, 8)), random_memory(rng, 5, 2)
        mem = update_memory_svd(phi, old, 5)
        target = phi @ phi.T + old.U @ np.diag(old.w) @ old.U.T
        assert_allclose(mem.U @ np.diag(mem.w) @ mem.U.T, target, atol=1e-10)

    def test_truncation_keeps_top_eigenpairs(self, rng):
        phi = rng.standard_normal((6, 10))
        mem = update_memory_svd(phi, Memory.empty(6), 2)
        assert_allclose(mem.w, np.sort(np.linalg.eigvalsh(phi @ phi.T))[-2:][::-1], rtol=1e-10)

    def test_drops_null_directions(self, rng):
        mem = update_memory_svd(low_rank(rng, 6, 2, 10), Memory.empty(6), 5)
        assert mem.K == 2


class TestExtraction:
    def test_round_trip(self, rng):
        Ut = rng.standard_normal((7, 4))
        mem = Memory.from_scaled(Ut)
        assert_allclose(np.abs(mem.U * np.sqrt(mem.w)), np.abs(Ut), atol=1e-12)


class TestSerialization:
    def test_round_trip(self, rng, tmp_path):
        mem = random_memory(rng, 5, 3).with_responses("binary", rng.standard_normal(5))
        path = save_memory(tmp_path / "m.kmem", mem, {"family": "binary", "epsilon": 1e-4, "task": 2})
        out, meta = load_memory(path)
        assert np.array_equal(out.U, mem.U) and np.array_equal(out.w, mem.w)
        assert np.array_equal(out.responses, mem.responses)
        assert meta["family"] == "binary" and meta["K"] == 3 and meta["task"] == 2

    def test_without_responses(self, rng, tmp_path):
        out, _ = load_memory(save_memory(tmp_path / "m.kmem", random_memory(rng, 3, 1)))
        assert out.responses is None

    def test_layout(self, tmp_path):
        mem = Memory(np.array([[1.0], [0.0]]), np.array([2.5]))
        raw = save_memory(tmp_path / "m.kmem", mem).read_bytes()
        assert raw[:4] == b"KMEM"
        assert np.array_equal(np.frombuffer(raw[20:], "<f8"), [1.0, 0.0, 2.5])

    def test_truncated(self, rng, tmp_path):
        path = save_memory(tmp_path / "m.kmem", random_memory(rng, 3, 2))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="expected"):
            load_memory(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.kmem"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ValueError, match="not a memory file"):
            load_memory(path)
