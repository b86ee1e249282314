"""Direction-matrix arithmetic: calibration, rescaling, latent edits."""

import numpy as np
import pytest
import torch

from latentpose.directions import (
    DirectionMatrix,
    PoseStats,
    delta_w,
    estimate_p_stats,
    oracle_direction_matrix,
    reenact_code,
    rescale,
    single_attribute_delta,
    unscale,
)
from latentpose.errors import ContractViolation
from latentpose.toygen import (
    CONTROL_DIM,
    LATENT_DIM,
    N_LAYERS,
    ToyGenerator,
    W_DIM,
    broadcast_latent,
    sample_z,
)


def true_pose_stats(gen: ToyGenerator, n: int = 4096, seed: int = 11) -> PoseStats:
    """Quantile stats from exact generator parameters, bypassing any estimator."""
    w = broadcast_latent(gen.map_latent(sample_z(n, seed)))
    p = gen.pose_from_w(w).control_vector()
    qs = torch.quantile(p, torch.tensor([0.01, 0.99], dtype=torch.float64), dim=0)
    return PoseStats(low=qs[0], high=qs[1], n_samples=n)


@pytest.fixture(scope="module")
def gen():
    return ToyGenerator(seed=0)


@pytest.fixture(scope="module")
def stats(gen):
    return true_pose_stats(gen)


def test_stats_require_increasing_bounds():
    low = torch.zeros(CONTROL_DIM)
    high = torch.ones(CONTROL_DIM)
    PoseStats(low=low, high=high)
    with pytest.raises(ContractViolation):
        PoseStats(low=high, high=low)
    with pytest.raises(ContractViolation):
        PoseStats(low=low, high=high, bound=0.0)
    with pytest.raises(ContractViolation):
        PoseStats(low=torch.zeros(3), high=torch.ones(3))


def test_rescale_endpoints_and_midpoint(stats):
    assert torch.allclose(rescale(stats.low, stats), torch.full((CONTROL_DIM,), -1.0, dtype=torch.float64))
    assert torch.allclose(rescale(stats.high, stats), torch.full((CONTROL_DIM,), 1.0, dtype=torch.float64))
    mid = (stats.low + stats.high) / 2
    assert torch.allclose(rescale(mid, stats), torch.zeros(CONTROL_DIM, dtype=torch.float64), atol=1e-12)


def test_rescale_unscale_roundtrip(stats):
    gen = torch.Generator().manual_seed(3)
    p = torch.randn(50, CONTROL_DIM, generator=gen, dtype=torch.float64) * 30.0
    assert torch.allclose(unscale(rescale(p, stats), stats), p, atol=1e-12)
    assert torch.allclose(rescale(unscale(p, stats), stats), p, atol=1e-12)


def test_rescale_covers_in_distribution_samples(gen, stats):
    w = broadcast_latent(gen.map_latent(sample_z(2000, 99)))
    scaled = rescale(gen.pose_from_w(w).control_vector(), stats)
    inside = (scaled.abs() <= stats.bound).to(torch.float64).mean()
    assert inside >= 0.96


def test_rescale_rejects_wrong_width(stats):
    with pytest.raises(ContractViolation):
        rescale(torch.zeros(CONTROL_DIM + 1, dtype=torch.float64), stats)
    with pytest.raises(ContractViolation):
        unscale(torch.zeros(4, dtype=torch.float64), stats)


def test_delta_w_matches_naive_matvec():
    g = torch.Generator().manual_seed(5)
    A = torch.randn(LATENT_DIM, CONTROL_DIM, generator=g, dtype=torch.float64)
    dp = torch.randn(CONTROL_DIM, generator=g, dtype=torch.float64)
    shift = delta_w(A, dp)
    assert shift.shape == (N_LAYERS, W_DIM)
    naive = torch.zeros(LATENT_DIM, dtype=torch.float64)
    for r in range(LATENT_DIM):
        for c in range(CONTROL_DIM):
            naive[r] += A[r, c] * dp[c]
    assert torch.allclose(shift.reshape(LATENT_DIM), naive, atol=1e-9)


def test_delta_w_zero_and_unit_vectors():
    g = torch.Generator().manual_seed(6)
    A = torch.randn(LATENT_DIM, CONTROL_DIM, generator=g, dtype=torch.float64)
    assert torch.equal(delta_w(A, torch.zeros(CONTROL_DIM, dtype=torch.float64)), torch.zeros(N_LAYERS, W_DIM, dtype=torch.float64))
    for j in (0, 7, CONTROL_DIM - 1):
        e = torch.zeros(CONTROL_DIM, dtype=torch.float64)
        e[j] = 1.0
        assert torch.allclose(delta_w(A, e).reshape(LATENT_DIM), A[:, j])


def test_delta_w_linearity():
    g = torch.Generator().manual_seed(7)
    A = torch.randn(LATENT_DIM, CONTROL_DIM, generator=g, dtype=torch.float64)
    dp = torch.randn(CONTROL_DIM, generator=g, dtype=torch.float64)
    dq = torch.randn(CONTROL_DIM, generator=g, dtype=torch.float64)
    lhs = delta_w(A, 0.3 * dp - 1.7 * dq)
    rhs = 0.3 * delta_w(A, dp) - 1.7 * delta_w(A, dq)
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_delta_w_dimension_mismatch():
    A = torch.zeros(LATENT_DIM, CONTROL_DIM, dtype=torch.float64)
    with pytest.raises(ContractViolation):
        delta_w(A, torch.zeros(CONTROL_DIM - 1, dtype=torch.float64))
    with pytest.raises(ContractViolation):
        delta_w(torch.zeros(10, CONTROL_DIM), torch.zeros(CONTROL_DIM, dtype=torch.float64))


def test_single_attribute_delta():
    d = single_attribute_delta(0, 0.5)
    assert d[0] == 0.5 and d[1:].abs().sum() == 0
    assert torch.equal(single_attribute_delta(3, 0.0), torch.zeros(CONTROL_DIM, dtype=torch.float64))
    last = single_attribute_delta(CONTROL_DIM - 1, -0.25)
    assert last[-1] == -0.25 and last[:-1].abs().sum() == 0
    with pytest.raises(ContractViolation):
        single_attribute_delta(CONTROL_DIM, 1.0)
    with pytest.raises(ContractViolation):
        single_attribute_delta(-1, 1.0)


def test_reenact_self_is_identity(gen, stats):
    A = DirectionMatrix(seed=1, stats=stats)
    w_s = broadcast_latent(gen.map_latent(sample_z(4, 21)))
    p_s = gen.pose_from_w(w_s).control_vector()
    w_r = reenact_code(A, stats, w_s, p_s, p_s)
    assert torch.equal(w_r, w_s)
    assert torch.equal(gen.render(w_r), gen.render(w_s))


def test_oracle_reenact_hits_target_block(gen, stats):
    A_star = oracle_direction_matrix(gen, stats)
    w = broadcast_latent(gen.map_latent(sample_z(8, 22)))
    w_s, w_t = w[:4], w[4:]
    p_s = gen.pose_from_w(w_s).control_vector()
    p_t = gen.pose_from_w(w_t).control_vector()
    w_r = reenact_code(A_star, stats, w_s, p_s, p_t)
    p_r = gen.pose_from_w(w_r).control_vector()
    assert torch.allclose(rescale(p_r, stats), rescale(p_t, stats), atol=1e-6)
    # Identity and nuisance read-outs stay with the source.
    q_s = gen.semantic_vector(w_s)
    q_r = gen.semantic_vector(w_r)
    assert torch.allclose(q_r[:, CONTROL_DIM:], q_s[:, CONTROL_DIM:], atol=1e-6)


def test_oracle_reenact_is_involutive(gen, stats):
    A_star = oracle_direction_matrix(gen, stats)
    w = broadcast_latent(gen.map_latent(sample_z(4, 23)))
    w_s, w_t = w[:2], w[2:]
    p_s = gen.pose_from_w(w_s).control_vector()
    p_t = gen.pose_from_w(w_t).control_vector()
    w_r = reenact_code(A_star, stats, w_s, p_s, p_t)
    back = reenact_code(A_star, stats, w_r, gen.pose_from_w(w_r).control_vector(), p_s)
    assert torch.allclose(back, w_s, atol=1e-6)


def test_reenact_composes_linearly(gen, stats):
    A = DirectionMatrix(seed=2, stats=stats)
    w = broadcast_latent(gen.map_latent(sample_z(3, 24)))
    g = torch.Generator().manual_seed(25)
    p_s, p_t, p_u = (
        unscale(torch.randn(CONTROL_DIM, generator=g, dtype=torch.float64) * 0.5, stats) for _ in range(3)
    )
    step1 = reenact_code(A, stats, w, p_s, p_t)
    step2 = reenact_code(A, stats, step1, p_t, p_u)
    direct = reenact_code(A, stats, w, p_s, p_u)
    assert torch.allclose(step2, direct, atol=1e-10)


def test_oracle_single_attribute_edit_moves_one_coordinate(gen, stats):
    A_star = oracle_direction_matrix(gen, stats)
    w_s = broadcast_latent(gen.map_latent(sample_z(1, 26)))
    p_s = gen.pose_from_w(w_s).control_vector()
    for j in (0, 4, CONTROL_DIM - 1):
        target = unscale(rescale(p_s, stats) + single_attribute_delta(j, 0.6), stats)
        w_r = reenact_code(A_star, stats, w_s, p_s, target)
        moved = rescale(gen.pose_from_w(w_r).control_vector(), stats) - rescale(p_s, stats)
        assert abs(moved[0, j].item() - 0.6) < 1e-6
        off = torch.cat([moved[0, :j], moved[0, j + 1 :]])
        assert off.abs().max() < 1e-6


def test_direction_matrix_init_and_from_matrix():
    a = DirectionMatrix(seed=0)
    b = DirectionMatrix(seed=0)
    assert torch.equal(a.A, b.A)
    assert a.A.shape == (LATENT_DIM, CONTROL_DIM)
    assert a.A.std().item() < 0.02  # near the 0.01 init scale
    c = DirectionMatrix.from_matrix(a.A.detach())
    assert torch.equal(c.A, a.A)
    with pytest.raises(ContractViolation):
        DirectionMatrix.from_matrix(torch.zeros(3, 3))


def test_snapshot_is_decoupled(stats):
    model = DirectionMatrix(seed=4, stats=stats)
    snap = model.snapshot()
    with torch.no_grad():
        model.A.add_(1.0)
    assert not torch.allclose(snap.A, model.A)
    assert snap.stats is model.stats


def test_checkpoint_roundtrip_and_determinism(tmp_path, stats):
    model = DirectionMatrix(seed=9, stats=stats)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    model.save(p1)
    model.save(p2)
    assert p1.read_bytes() == p2.read_bytes()
    loaded = DirectionMatrix.load(p1)
    assert torch.equal(loaded.A, model.A.detach())
    assert torch.equal(loaded.stats.low, stats.low)
    assert torch.equal(loaded.stats.high, stats.high)
    assert loaded.stats.bound == stats.bound


def test_save_without_stats_refuses(tmp_path):
    with pytest.raises(ContractViolation):
        DirectionMatrix(seed=0).save(tmp_path / "x.ckpt")


def test_estimate_p_stats_rejects_tiny_pools(gen):
    with pytest.raises(ContractViolation):
        estimate_p_stats(gen, regressor=None, n=99)


def test_oracle_columns_span_readout_rows(gen, stats):
    A_star = oracle_direction_matrix(gen, stats).numpy()
    basis = gen.semantic_basis.detach().numpy()[:CONTROL_DIM]  # (15, 512)
    # Each column must lie in the row space of the controllable read-outs.
    proj = basis.T @ (basis @ A_star)
    assert np.allclose(proj, A_star, atol=1e-9)
