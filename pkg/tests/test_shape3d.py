"""Shape model, pose, projection, and shape-loss tests.

The reconstruction, loss, and pair-distance oracles are written as explicit
loops, independent of the vectorized implementations they check.
"""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latentpose.errors import ContractViolation
from latentpose.shape3d import (
    EYE_PAIRS,
    MOUTH_PAIRS,
    N_LANDMARKS,
    LandmarkPairTable,
    ShapeModel,
    apply_pose,
    canonical_template,
    pair_distance_loss,
    project_landmarks,
    reconstruct_shape,
    reenactment_loss,
    rotation_matrix,
    shape_loss,
)

# Landmark pairs (1-indexed) that mirror across the face midline.
MIRROR_PAIRS = [
    (1, 17), (2, 16), (3, 15), (4, 14), (5, 13), (6, 12), (7, 11), (8, 10),
    (18, 27), (19, 26), (20, 25), (21, 24), (22, 23), (32, 36), (33, 35),
    (37, 46), (38, 45), (39, 44), (40, 43), (41, 48), (42, 47),
    (49, 55), (50, 54), (51, 53), (56, 60), (57, 59),
    (61, 65), (62, 64), (66, 68),
]


@pytest.fixture(scope="module")
def model():
    return ShapeModel.from_seed(7)


def _loop_reconstruct(model, identity, expression):
    mean = model.mean_shape.numpy()
    basis_i = model.identity_basis.numpy()
    basis_e = model.expression_basis.numpy()
    flat = mean.copy()
    for k in range(len(identity)):
        flat += basis_i[:, k] * identity[k]
    for k in range(len(expression)):
        flat += basis_e[:, k] * expression[k]
    return flat.reshape(68, 3)


def test_reconstruct_matches_loop_oracle(model):
    rng = np.random.default_rng(0)
    for _ in range(5):
        p_i = rng.standard_normal(10)
        p_e = rng.standard_normal(12)
        got = reconstruct_shape(model, torch.from_numpy(p_i), torch.from_numpy(p_e))
        want = _loop_reconstruct(model, p_i, p_e)
        assert np.abs(got.numpy() - want).max() < 1e-12


def test_reconstruct_zero_coefficients_gives_mean(model):
    got = reconstruct_shape(model, torch.zeros(10, dtype=torch.float64), torch.zeros(12, dtype=torch.float64))
    assert np.abs(got.numpy().reshape(-1) - model.mean_shape.numpy()).max() == 0.0


def test_reconstruct_batched(model):
    rng = np.random.default_rng(1)
    p_i = torch.from_numpy(rng.standard_normal((4, 10)))
    p_e = torch.from_numpy(rng.standard_normal((4, 12)))
    batch = reconstruct_shape(model, p_i, p_e)
    assert batch.shape == (4, 68, 3)
    for b in range(4):
        single = reconstruct_shape(model, p_i[b], p_e[b])
        assert (batch[b] - single).abs().max().item() < 1e-12


def test_reconstruct_rejects_wrong_lengths(model):
    with pytest.raises(ContractViolation):
        reconstruct_shape(model, torch.zeros(9, dtype=torch.float64), torch.zeros(12, dtype=torch.float64))
    with pytest.raises(ContractViolation):
        reconstruct_shape(model, torch.zeros(10, dtype=torch.float64), torch.zeros(11, dtype=torch.float64))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(-3, 3), st.floats(-3, 3))
def test_reconstruct_is_linear_in_coefficients(seed, a, b):
    model = ShapeModel.from_seed(7)
    rng = np.random.default_rng(seed)
    p1 = torch.from_numpy(rng.standard_normal(22))
    p2 = torch.from_numpy(rng.standard_normal(22))
    mean = reconstruct_shape(model, torch.zeros(10, dtype=torch.float64), torch.zeros(12, dtype=torch.float64))

    def delta(p):
        return reconstruct_shape(model, p[:10], p[10:]) - mean

    lhs = delta(a * p1 + b * p2)
    rhs = a * delta(p1) + b * delta(p2)
    assert (lhs - rhs).abs().max().item() < 1e-9


def test_bases_are_jointly_orthonormal(model):
    joint = torch.cat([model.identity_basis, model.expression_basis], dim=1)
    gram = joint.T @ joint
    assert (gram - torch.eye(22, dtype=torch.float64)).abs().max().item() < 1e-10


def test_bases_deterministic_per_seed():
    a = ShapeModel.from_seed(3)
    b = ShapeModel.from_seed(3)
    c = ShapeModel.from_seed(4)
    assert torch.equal(a.expression_basis, b.expression_basis)
    assert not torch.equal(a.expression_basis, c.expression_basis)


def test_first_two_expression_columns_are_mouth_dominant(model):
    mouth_rows = np.zeros(204, dtype=bool)
    for v in range(48, 68):
        mouth_rows[3 * v : 3 * v + 3] = True
    for col in (0, 1):
        column = model.expression_basis[:, col].numpy()
        mass = (column[mouth_rows] ** 2).sum() / (column**2).sum()
        assert mass > 0.8


def test_template_is_centered_and_symmetric():
    pts = canonical_template()
    assert np.abs(pts.mean(axis=0)).max() < 1e-15
    for i, j in MIRROR_PAIRS:
        a, b = pts[i - 1], pts[j - 1]
        assert a[0] == -b[0] and a[1] == b[1] and a[2] == b[2]


def test_frontal_projection_symmetric_about_image_center():
    pts = torch.from_numpy(canonical_template())
    uv = project_landmarks(apply_pose(pts, torch.zeros(3, dtype=torch.float64)))
    for i, j in MIRROR_PAIRS:
        a, b = uv[i - 1], uv[j - 1]
        assert abs((a[0] - 32.0) + (b[0] - 32.0)).item() < 1e-9
        assert abs(a[1] - b[1]).item() < 1e-9


def test_rotation_180_roll_negates_x_y_keeps_z():
    theta = torch.tensor([0.0, 0.0, 180.0], dtype=torch.float64)
    pts = torch.from_numpy(canonical_template())
    rotated = apply_pose(pts, theta)
    assert (rotated[:, 0] + pts[:, 0]).abs().max().item() < 1e-12
    assert (rotated[:, 1] + pts[:, 1]).abs().max().item() < 1e-12
    assert (rotated[:, 2] - pts[:, 2]).abs().max().item() < 1e-12


def test_rotation_hand_computed_cases():
    # Yaw +90: x axis swings to -z. Pitch +90: y axis swings to +z.
    r = rotation_matrix(torch.tensor([90.0, 0.0, 0.0], dtype=torch.float64))
    got = r @ torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    assert torch.allclose(got, torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64), atol=1e-12)
    r = rotation_matrix(torch.tensor([0.0, 90.0, 0.0], dtype=torch.float64))
    got = r @ torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    assert torch.allclose(got, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64), atol=1e-12)
    # Roll +90 about the view axis: x axis goes to +y.
    r = rotation_matrix(torch.tensor([0.0, 0.0, 90.0], dtype=torch.float64))
    got = r @ torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    assert torch.allclose(got, torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64), atol=1e-12)


def test_rotation_composition_order_is_yaw_pitch_roll():
    theta = torch.tensor([31.0, -17.0, 49.0], dtype=torch.float64)
    r = rotation_matrix(theta)
    r_yaw = rotation_matrix(torch.tensor([31.0, 0.0, 0.0], dtype=torch.float64))
    r_pitch = rotation_matrix(torch.tensor([0.0, -17.0, 0.0], dtype=torch.float64))
    r_roll = rotation_matrix(torch.tensor([0.0, 0.0, 49.0], dtype=torch.float64))
    assert torch.allclose(r, r_roll @ r_pitch @ r_yaw, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    st.floats(-180, 180), st.floats(-90, 90), st.floats(-180, 180)
)
def test_rotation_matrix_is_special_orthogonal(yaw, pitch, roll):
    r = rotation_matrix(torch.tensor([yaw, pitch, roll], dtype=torch.float64))
    assert torch.allclose(r @ r.T, torch.eye(3, dtype=torch.float64), atol=1e-12)
    assert abs(torch.linalg.det(r).item() - 1.0) < 1e-12


def test_apply_pose_inverse_recovers_shape(model):
    rng = np.random.default_rng(2)
    shape = reconstruct_shape(
        model, torch.from_numpy(rng.standard_normal(10)), torch.from_numpy(rng.standard_normal(12))
    )
    theta = torch.tensor([25.0, -10.0, 40.0], dtype=torch.float64)
    rotated = apply_pose(shape, theta)
    back = rotated @ rotation_matrix(theta)  # right-multiply by R undoes R^T
    assert (back - shape).abs().max().item() < 1e-12


def test_projection_hand_computed():
    pts = torch.tensor([[0.0, 0.0, 0.3], [1.0, 0.5, -0.2]], dtype=torch.float64)
    uv = project_landmarks(pts)
    assert torch.allclose(uv[0], torch.tensor([32.0, 32.0], dtype=torch.float64))
    assert torch.allclose(uv[1], torch.tensor([52.0, 22.0], dtype=torch.float64))


def _loop_shape_loss(a, b):
    total = 0.0
    for v in range(68):
        for axis in range(3):
            total += abs(a[v, axis] - b[v, axis])
    return total


def _loop_pair_loss(a, b, pairs):
    total = 0.0
    for i, j in pairs:
        d_a = sum(abs(a[i - 1, axis] - a[j - 1, axis]) for axis in range(3))
        d_b = sum(abs(b[i - 1, axis] - b[j - 1, axis]) for axis in range(3))
        total += abs(d_a - d_b)
    return total


def test_losses_match_loop_oracles(model):
    rng = np.random.default_rng(3)
    a = reconstruct_shape(model, torch.from_numpy(rng.standard_normal(10)), torch.from_numpy(rng.standard_normal(12)))
    b = reconstruct_shape(model, torch.from_numpy(rng.standard_normal(10)), torch.from_numpy(rng.standard_normal(12)))
    an, bn = a.numpy(), b.numpy()
    assert abs(shape_loss(a, b).item() - _loop_shape_loss(an, bn)) < 1e-10
    assert abs(pair_distance_loss(a, b, EYE_PAIRS).item() - _loop_pair_loss(an, bn, EYE_PAIRS)) < 1e-10
    assert abs(pair_distance_loss(a, b, MOUTH_PAIRS).item() - _loop_pair_loss(an, bn, MOUTH_PAIRS)) < 1e-10
    want_total = (
        _loop_shape_loss(an, bn) + _loop_pair_loss(an, bn, EYE_PAIRS) + _loop_pair_loss(an, bn, MOUTH_PAIRS)
    )
    assert abs(reenactment_loss(a, b).item() - want_total) < 1e-10


def test_losses_zero_on_identical_shapes(model):
    shape = reconstruct_shape(model, torch.zeros(10, dtype=torch.float64), torch.zeros(12, dtype=torch.float64))
    assert shape_loss(shape, shape).item() == 0.0
    assert reenactment_loss(shape, shape).item() == 0.0


def test_pair_loss_invariant_to_translation(model):
    # Pair distances compare within-shape geometry only.
    rng = np.random.default_rng(4)
    a = reconstruct_shape(model, torch.from_numpy(rng.standard_normal(10)), torch.from_numpy(rng.standard_normal(12)))
    shifted = a + torch.tensor([0.7, -0.3, 0.2], dtype=torch.float64)
    assert pair_distance_loss(a, shifted, EYE_PAIRS).item() < 1e-12
    assert pair_distance_loss(a, shifted, MOUTH_PAIRS).item() < 1e-12
    assert shape_loss(a, shifted).item() > 1.0


def test_pair_table_validation():
    LandmarkPairTable()  # defaults are valid
    with pytest.raises(ContractViolation):
        LandmarkPairTable(eye_pairs=((1, 2),) * 5)
    with pytest.raises(ContractViolation):
        LandmarkPairTable(eye_pairs=EYE_PAIRS[:5] + ((0, 5),))
    with pytest.raises(ContractViolation):
        pair_distance_loss(torch.zeros(68, 3), torch.zeros(68, 3), [(1, 69)])


def test_published_pair_tables():
    assert EYE_PAIRS == ((37, 40), (38, 42), (39, 41), (43, 46), (44, 48), (45, 47))
    assert MOUTH_PAIRS == (
        (49, 55), (50, 60), (51, 59), (52, 58), (53, 57), (54, 56),
        (61, 65), (62, 68), (63, 67), (64, 66),
    )


def _finite_difference_grad(fn, x, step):
    grad = np.zeros_like(x)
    for k in range(x.size):
        plus = x.copy()
        plus[k] += step
        minus = x.copy()
        minus[k] -= step
        grad[k] = (fn(plus) - fn(minus)) / (2 * step)
    return grad


def test_reenactment_loss_gradient_matches_finite_differences(model):
    rng = np.random.default_rng(5)
    p_i = torch.from_numpy(rng.standard_normal(10))
    gt = apply_pose(
        reconstruct_shape(model, p_i, torch.from_numpy(rng.standard_normal(12))),
        torch.tensor([12.0, -7.0, 3.0], dtype=torch.float64),
    )
    x0 = np.concatenate([rng.standard_normal(12), [5.0, 8.0, -11.0]])

    def fn(x):
        p_e = torch.from_numpy(x[:12])
        theta = torch.from_numpy(x[12:])
        posed = apply_pose(reconstruct_shape(model, p_i, p_e), theta)
        return reenactment_loss(posed, gt).item()

    x = torch.from_numpy(x0.copy()).requires_grad_(True)
    posed = apply_pose(reconstruct_shape(model, p_i, x[:12]), x[12:])
    reenactment_loss(posed, gt).backward()
    analytic = x.grad.numpy()
    numeric = _finite_difference_grad(fn, x0, 1e-5)
    rel = np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-12)
    assert rel < 1e-4


def test_shape_model_checkpoint_roundtrip(tmp_path, model):
    path = tmp_path / "shape.ckpt"
    model.save(path)
    loaded = ShapeModel.load(path)
    assert torch.equal(loaded.mean_shape, model.mean_shape)
    assert torch.equal(loaded.identity_basis, model.identity_basis)
    assert torch.equal(loaded.expression_basis, model.expression_basis)
    assert loaded.seed == model.seed
