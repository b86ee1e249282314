"""Linear 3D landmark shape model, pose application, projection, shape losses.

The shape is the 68-point iBUG-style landmark set itself (no dense mesh):
``vertices = mean + identity_basis @ p_i + expression_basis @ p_e`` with the
two bases jointly orthonormal, so identity and expression variations are
disentangled by construction. All functions are pure, accept batched
``(..., 68, 3)`` tensors, and are differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .errors import ContractViolation

N_LANDMARKS = 68
M_IDENTITY = 10
M_EXPRESSION = 12

IMAGE_SIZE = 64
# Orthographic projection: u = center + scale * x, v = center - scale * y.
PROJECT_SCALE = 20.0
PROJECT_CENTER = 32.0

# Eyelid/mouth landmark pairs (1-indexed). Each pair spans either the
# horizontal corners or an upper/lower lid (lip) point of the same region,
# so the inner pair distance tracks openness and width.
EYE_PAIRS = ((37, 40), (38, 42), (39, 41), (43, 46), (44, 48), (45, 47))
MOUTH_PAIRS = (
    (49, 55), (50, 60), (51, 59), (52, 58), (53, 57), (54, 56),
    (61, 65), (62, 68), (63, 67), (64, 66),
)

# 0-based vertex indices of the mouth region (outer + inner lips).
_MOUTH_VERTICES = tuple(range(48, 68))


@dataclass
class PoseParams:
    """Full face parameterization: Euler angles (degrees) plus coefficients."""

    theta: torch.Tensor  # (..., 3) yaw, pitch, roll in degrees
    expression: torch.Tensor  # (..., m_e)
    identity: torch.Tensor  # (..., m_i)

    def control_vector(self) -> torch.Tensor:
        """The (..., 15) pose-and-expression block that edits act on."""
        return torch.cat([self.theta, self.expression], dim=-1)

    def detach(self) -> "PoseParams":
        return PoseParams(self.theta.detach(), self.expression.detach(), self.identity.detach())

    def to_lists(self) -> dict:
        return {
            "theta": [float(v) for v in self.theta.reshape(-1)],
            "expression": [float(v) for v in self.expression.reshape(-1)],
            "identity": [float(v) for v in self.identity.reshape(-1)],
        }

    @classmethod
    def from_lists(cls, data: dict) -> "PoseParams":
        return cls(
            theta=torch.tensor(data["theta"], dtype=torch.float64),
            expression=torch.tensor(data["expression"], dtype=torch.float64),
            identity=torch.tensor(data["identity"], dtype=torch.float64),
        )


@dataclass(frozen=True)
class LandmarkPairTable:
    """The eye and mouth pair lists used by the pair-distance losses."""

    eye_pairs: tuple = EYE_PAIRS
    mouth_pairs: tuple = MOUTH_PAIRS

    def __post_init__(self):
        if len(self.eye_pairs) != 6 or len(self.mouth_pairs) != 10:
            raise ContractViolation("pair table must hold 6 eye pairs and 10 mouth pairs")
        for i, j in list(self.eye_pairs) + list(self.mouth_pairs):
            if not (1 <= i <= N_LANDMARKS and 1 <= j <= N_LANDMARKS):
                raise ContractViolation(f"landmark pair ({i},{j}) out of range 1..{N_LANDMARKS}")


def canonical_template() -> np.ndarray:
    """Frontal 68-landmark template, (68, 3), centered at the origin.

    x points right, y up, z toward the viewer. Left-side landmarks are exact
    x-mirrors of their right-side counterparts, so frontal projections are
    symmetric about the image center to machine precision.
    """
    pts = np.zeros((68, 3))

    # Jaw 1-17: ellipse arc from right ear over the chin to the left ear.
    for i in range(17):
        t = (i - 8) / 8.0
        phi = np.deg2rad(t * 80.0)
        pts[i, 0] = 0.92 * np.sin(phi)
        pts[i, 1] = -0.80 * np.cos(phi) + 0.18

    # Right eyebrow 18-22, left is mirrored below.
    brow_x = [-0.62, -0.51, -0.40, -0.29, -0.20]
    brow_y = [0.32, 0.37, 0.39, 0.37, 0.33]
    for i in range(5):
        pts[17 + i] = (brow_x[i], brow_y[i], 0.0)
        pts[26 - i] = (-brow_x[i], brow_y[i], 0.0)

    # Nose bridge 28-31 and base 32-36.
    bridge_y = [0.24, 0.155, 0.07, -0.015]
    for i in range(4):
        pts[27 + i] = (0.0, bridge_y[i], 0.0)
    base_x = [-0.14, -0.075, 0.0, 0.075, 0.14]
    base_y = [-0.11, -0.125, -0.135, -0.125, -0.11]
    for i in range(5):
        pts[31 + i] = (base_x[i], base_y[i], 0.0)

    # Right eye 37-42 (outer corner, upper lid x2, inner corner, lower lid x2).
    right_eye = [
        (-0.52, 0.18), (-0.445, 0.222), (-0.335, 0.222),
        (-0.26, 0.18), (-0.335, 0.138), (-0.445, 0.138),
    ]
    # Left eye 43-48 (inner corner, upper lid x2, outer corner, lower lid x2).
    mirror = {36: 45, 37: 44, 38: 43, 39: 42, 40: 47, 41: 46}
    for i, (x, y) in enumerate(right_eye):
        pts[36 + i] = (x, y, 0.0)
        pts[mirror[36 + i]] = (-x, y, 0.0)

    # Outer lip 49-60, counterclockwise from the right corner.
    outer = [
        (-0.30, -0.420), (-0.19, -0.363), (-0.077, -0.337), (0.0, -0.330),
        (0.077, -0.337), (0.19, -0.363), (0.30, -0.420), (0.19, -0.477),
        (0.077, -0.503), (0.0, -0.510), (-0.077, -0.503), (-0.19, -0.477),
    ]
    for i, (x, y) in enumerate(outer):
        pts[48 + i] = (x, y, 0.0)
    # Inner lip 61-68.
    inner = [
        (-0.22, -0.420), (-0.095, -0.388), (0.0, -0.383), (0.095, -0.388),
        (0.22, -0.420), (0.095, -0.455), (0.0, -0.460), (-0.095, -0.455),
    ]
    for i, (x, y) in enumerate(inner):
        pts[60 + i] = (x, y, 0.0)

    # Depth: gentle ellipsoid bulge plus a nose ridge.
    r2 = (pts[:, 0] / 0.95) ** 2 + (pts[:, 1] / 0.90) ** 2
    pts[:, 2] = 0.40 * np.sqrt(np.clip(1.0 - r2, 0.0, None))
    nose_bump = [0.06, 0.09, 0.12, 0.15, 0.08, 0.11, 0.14, 0.11, 0.08]
    for i in range(9):
        pts[27 + i, 2] += nose_bump[i]

    # Center at the origin; y/z shifts preserve the x mirror symmetry.
    pts[:, 1] -= pts[:, 1].mean()
    pts[:, 2] -= pts[:, 2].mean()
    return pts


def _orthonormal_bases(seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Jointly orthonormal identity/expression bases, (3N, m_i) and (3N, m_e).

    The first two expression columns start out concentrated on the mouth
    vertices so they act as smile / open-mouth proxies; QR against the other
    columns keeps most of that mass in place.
    """
    rng = np.random.default_rng(seed)
    raw_id = rng.standard_normal((3 * N_LANDMARKS, M_IDENTITY))
    raw_ex = rng.standard_normal((3 * N_LANDMARKS, M_EXPRESSION))
    mouth_rows = np.zeros(3 * N_LANDMARKS, dtype=bool)
    for v in _MOUTH_VERTICES:
        mouth_rows[3 * v : 3 * v + 3] = True
    for col in (0, 1):
        raw_ex[~mouth_rows, col] *= 0.05
    q, r = np.linalg.qr(np.concatenate([raw_id, raw_ex], axis=1))
    q = q * np.sign(np.diag(r))  # deterministic sign convention
    return q[:, :M_IDENTITY], q[:, M_IDENTITY:]


@dataclass
class ShapeModel:
    """Mean template plus orthonormal identity/expression bases."""

    mean_shape: torch.Tensor  # (3N,)
    identity_basis: torch.Tensor  # (3N, m_i)
    expression_basis: torch.Tensor  # (3N, m_e)
    seed: int = 0
    pairs: LandmarkPairTable = field(default_factory=LandmarkPairTable)

    @classmethod
    def from_seed(cls, seed: int) -> "ShapeModel":
        mean = torch.from_numpy(canonical_template().reshape(-1)).double()
        basis_i, basis_e = _orthonormal_bases(seed)
        return cls(
            mean_shape=mean,
            identity_basis=torch.from_numpy(basis_i).double(),
            expression_basis=torch.from_numpy(basis_e).double(),
            seed=seed,
        )

    @property
    def m_i(self) -> int:
        return self.identity_basis.shape[1]

    @property
    def m_e(self) -> int:
        return self.expression_basis.shape[1]

    def to(self, dtype: torch.dtype) -> "ShapeModel":
        return ShapeModel(
            self.mean_shape.to(dtype),
            self.identity_basis.to(dtype),
            self.expression_basis.to(dtype),
            self.seed,
            self.pairs,
        )

    def save(self, path: str | Path) -> None:
        Checkpoint(
            "shape_model",
            meta={"seed": self.seed, "n_landmarks": N_LANDMARKS, "m_i": self.m_i, "m_e": self.m_e},
            tensors={
                "mean_shape": self.mean_shape.numpy(),
                "identity_basis": self.identity_basis.numpy(),
                "expression_basis": self.expression_basis.numpy(),
            },
        ).save(path)

    @classmethod
    def load(cls, path: str | Path) -> "ShapeModel":
        ckpt = Checkpoint.load(path, expect_kind="shape_model")
        return cls(
            mean_shape=torch.from_numpy(ckpt.tensors["mean_shape"]).double(),
            identity_basis=torch.from_numpy(ckpt.tensors["identity_basis"]).double(),
            expression_basis=torch.from_numpy(ckpt.tensors["expression_basis"]).double(),
            seed=int(ckpt.meta["seed"]),
        )


def reconstruct_shape(model: ShapeModel, identity: torch.Tensor, expression: torch.Tensor) -> torch.Tensor:
    """Eq.-of-the-model reconstruction: mean + bases applied to coefficients.

    ``identity``: (..., m_i), ``expression``: (..., m_e). Returns (..., 68, 3).
    Linear in both coefficient vectors.
    """
    identity = torch.as_tensor(identity)
    expression = torch.as_tensor(expression, dtype=identity.dtype)
    if identity.shape[-1] != model.m_i:
        raise ContractViolation(f"identity coefficients must have length {model.m_i}, got {identity.shape[-1]}")
    if expression.shape[-1] != model.m_e:
        raise ContractViolation(f"expression coefficients must have length {model.m_e}, got {expression.shape[-1]}")
    basis_i = model.identity_basis.to(identity.dtype)
    basis_e = model.expression_basis.to(identity.dtype)
    mean = model.mean_shape.to(identity.dtype)
    flat = mean + identity @ basis_i.T + expression @ basis_e.T
    return flat.reshape(*flat.shape[:-1], N_LANDMARKS, 3)


def rotation_matrix(theta_deg: torch.Tensor) -> torch.Tensor:
    """R = R_roll @ R_pitch @ R_yaw for intrinsic yaw->pitch->roll, degrees.

    Yaw rotates about y (vertical), pitch about x, roll about z (viewing
    axis). Differentiable in ``theta_deg``; input (..., 3), output (..., 3, 3).
    """
    theta = torch.deg2rad(torch.as_tensor(theta_deg))
    yaw, pitch, roll = theta[..., 0], theta[..., 1], theta[..., 2]
    cy, sy = torch.cos(yaw), torch.sin(yaw)
    cp, sp = torch.cos(pitch), torch.sin(pitch)
    cr, sr = torch.cos(roll), torch.sin(roll)
    one = torch.ones_like(cy)
    zero = torch.zeros_like(cy)
    r_yaw = torch.stack(
        [cy, zero, sy, zero, one, zero, -sy, zero, cy], dim=-1
    ).reshape(*cy.shape, 3, 3)
    r_pitch = torch.stack(
        [one, zero, zero, zero, cp, -sp, zero, sp, cp], dim=-1
    ).reshape(*cy.shape, 3, 3)
    r_roll = torch.stack(
        [cr, -sr, zero, sr, cr, zero, zero, zero, one], dim=-1
    ).reshape(*cy.shape, 3, 3)
    return r_roll @ r_pitch @ r_yaw


def apply_pose(shape: torch.Tensor, theta_deg: torch.Tensor) -> torch.Tensor:
    """Rotate (..., 68, 3) vertices about the origin by Euler angles in degrees."""
    rot = rotation_matrix(torch.as_tensor(theta_deg, dtype=shape.dtype))
    return shape @ rot.transpose(-1, -2)


def project_landmarks(shape: torch.Tensor) -> torch.Tensor:
    """Orthographic projection to image coordinates: drop z, scale, offset.

    u = 32 + 20*x, v = 32 - 20*y (y up in 3D, v down in the image).
    Input (..., 68, 3), output (..., 68, 2).
    """
    u = PROJECT_CENTER + PROJECT_SCALE * shape[..., 0]
    v = PROJECT_CENTER - PROJECT_SCALE * shape[..., 1]
    return torch.stack([u, v], dim=-1)


def shape_loss(reenacted: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """L1 norm of the coordinate difference over all 3N values."""
    if reenacted.shape[-2:] != gt.shape[-2:]:
        raise ContractViolation(f"shape mismatch {tuple(reenacted.shape)} vs {tuple(gt.shape)}")
    return (reenacted - gt).abs().sum(dim=(-1, -2))


def pair_distance_loss(reenacted: torch.Tensor, gt: torch.Tensor, pairs) -> torch.Tensor:
    """Sum over pairs of | d(r_i, r_j) - d(gt_i, gt_j) |, d = L1 point distance.

    ``pairs`` holds 1-indexed landmark pairs, matching the published tables.
    """
    idx_i, idx_j = [], []
    for i, j in pairs:
        if not (1 <= i <= N_LANDMARKS and 1 <= j <= N_LANDMARKS):
            raise ContractViolation(f"landmark pair ({i},{j}) out of range 1..{N_LANDMARKS}")
        idx_i.append(i - 1)
        idx_j.append(j - 1)
    d_r = (reenacted[..., idx_i, :] - reenacted[..., idx_j, :]).abs().sum(dim=-1)
    d_gt = (gt[..., idx_i, :] - gt[..., idx_j, :]).abs().sum(dim=-1)
    return (d_r - d_gt).abs().sum(dim=-1)


def reenactment_loss(reenacted: torch.Tensor, gt: torch.Tensor, pairs: LandmarkPairTable | None = None) -> torch.Tensor:
    """Shape loss plus eye and mouth pair losses, unit weights."""
    pairs = pairs or LandmarkPairTable()
    return (
        shape_loss(reenacted, gt)
        + pair_distance_loss(reenacted, gt, pairs.eye_pairs)
        + pair_distance_loss(reenacted, gt, pairs.mouth_pairs)
    )
