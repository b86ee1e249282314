"""Toy face generator with closed-form semantic structure.

The generator maps a 64-d latent through a layered latent space (8 copies of
the 64-d vector, editable per layer) to a 64x64 RGB image of a rendered
landmark face. Its semantic structure is linear by construction: an
orthonormal read-out ``q = B @ vec(w_plus) + c`` yields 33 semantic
coordinates laid out as [3 pose | 12 expression | 10 identity | 8 nuisance],
and affine calibration turns those into Euler angles and shape coefficients.
Because every step from ``w_plus`` to the rendered landmark positions is
smooth, the generator is differentiable end to end, and because the semantic
map is affine, the ground-truth latent directions for every controllable
attribute are known exactly and serve as the oracle for direction discovery.

Nuisance coordinates drive only the background field, never the landmarks,
which is what makes pose/expression edits along the ground-truth directions
identity- and background-preserving.
"""

from __future__ import annotations

import copy
import hashlib
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .errors import ContractViolation
from .shape3d import (
    IMAGE_SIZE,
    N_LANDMARKS,
    PoseParams,
    ShapeModel,
    apply_pose,
    project_landmarks,
    reconstruct_shape,
    rotation_matrix,
)

Z_DIM = 64
W_DIM = 64
N_LAYERS = 8
LATENT_DIM = N_LAYERS * W_DIM  # 512, the editable space

POSE_DIM = 3
EXPR_DIM = 12
ID_DIM = 10
NUISANCE_DIM = 8
SEMANTIC_DIM = POSE_DIM + EXPR_DIM + ID_DIM + NUISANCE_DIM  # 33
CONTROL_DIM = POSE_DIM + EXPR_DIM  # 15, the block edits act on

THETA_SCALE = 40.0  # degrees per unit semantic coordinate
EXPR_SCALE = 0.4
ID_SCALE = 0.4

MASK_RADIUS = 24.0  # px, soft face-disc radius around the landmark centroid
MASK_SOFTNESS = 150.0  # px^2, edge width of the disc sigmoid

# Per-coordinate std of w after normalization; puts the 99th percentile of
# each semantic coordinate near 1.0 (z_{0.99} = 2.326).
_W_STD = 1.0 / 2.3263478740408408

ATTRIBUTE_NAMES = ("yaw", "pitch", "roll") + tuple(f"expr{i + 1}" for i in range(EXPR_DIM))


def derive_seed(root_seed: int, purpose: str) -> int:
    """Stable child seed for a named purpose, independent of call order."""
    digest = hashlib.sha256(f"{root_seed}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def sample_z(count: int, seed: int) -> torch.Tensor:
    """Draw ``count`` standard-normal latents, shape (count, 64).

    count = 0 returns an empty batch; negative counts are rejected.
    """
    if count < 0:
        raise ContractViolation(f"sample count must be >= 0, got {count}")
    gen = torch.Generator().manual_seed(seed % (2**63))
    return torch.randn(count, Z_DIM, generator=gen, dtype=torch.float64)


def broadcast_latent(w: torch.Tensor) -> torch.Tensor:
    """Copy a flat (..., 64) latent into every layer: (..., 8, 64)."""
    w = torch.as_tensor(w)
    if w.shape[-1] != W_DIM:
        raise ContractViolation(f"latent must have last dimension {W_DIM}, got {w.shape[-1]}")
    return w.unsqueeze(-2).expand(*w.shape[:-1], N_LAYERS, W_DIM)


def to_w_plus(w: torch.Tensor) -> torch.Tensor:
    """Accept a single flat (64,) latent or layered (..., 8, 64) input.

    Batches of flat latents are ambiguous with layered input (a batch of 8
    flat vectors has the layered shape), so they must go through
    ``broadcast_latent`` explicitly; anything else raises.
    """
    w = torch.as_tensor(w)
    if w.dim() == 1:
        return broadcast_latent(w)
    if w.shape[-1] != W_DIM or w.shape[-2] != N_LAYERS:
        raise ContractViolation(
            f"expected layered (..., {N_LAYERS}, {W_DIM}) input, got {tuple(w.shape)}; "
            "broadcast flat batches with broadcast_latent first"
        )
    return w


def _orthonormal_rows(rows: int, cols: int, gen: torch.Generator) -> torch.Tensor:
    raw = torch.randn(cols, rows, generator=gen, dtype=torch.float64)
    q, r = torch.linalg.qr(raw)
    q = q * torch.sign(torch.diagonal(r)).unsqueeze(0)
    return q.T.contiguous()  # (rows, cols), orthonormal rows


class ToyGenerator(torch.nn.Module):
    """Differentiable landmark-face generator with a known semantic read-out."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed
        gen = torch.Generator().manual_seed(derive_seed(seed, "toygen"))

        def randn(*shape, scale=1.0):
            return torch.randn(*shape, generator=gen, dtype=torch.float64) * scale

        # Latent mapping: 2-layer MLP with tanh hidden, then normalization.
        self.map_w1 = torch.nn.Parameter(randn(128, Z_DIM, scale=Z_DIM**-0.5))
        self.map_b1 = torch.nn.Parameter(randn(128, scale=0.1))
        self.map_w2 = torch.nn.Parameter(randn(W_DIM, 128, scale=128**-0.5))
        self.map_b2 = torch.nn.Parameter(randn(W_DIM, scale=0.1))

        # Semantic read-out: orthonormal rows over the flattened layered latent.
        self.semantic_basis = torch.nn.Parameter(_orthonormal_rows(SEMANTIC_DIM, LATENT_DIM, gen))
        self.semantic_offset = torch.nn.Parameter(torch.zeros(SEMANTIC_DIM, dtype=torch.float64))

        self.shape_model = ShapeModel.from_seed(derive_seed(seed, "shape"))

        # Renderer appearance parameters (the pivotal-tunable subset).
        self.palette = torch.nn.Parameter(0.25 + 0.75 * torch.rand(68, 3, generator=gen, dtype=torch.float64))
        self.skin_base = torch.nn.Parameter(torch.tensor([0.55, 0.42, 0.34], dtype=torch.float64))
        self.tint_matrix = torch.nn.Parameter(randn(3, ID_DIM, scale=0.25))
        self.bg_base = torch.nn.Parameter(torch.tensor([0.12, 0.15, 0.22], dtype=torch.float64))
        # Background field is affine in the nuisance block: three (3, 8) maps
        # for the horizontal ramp, vertical ramp, and constant term.
        self.bg_ramp_u = torch.nn.Parameter(randn(3, NUISANCE_DIM, scale=0.3))
        self.bg_ramp_v = torch.nn.Parameter(randn(3, NUISANCE_DIM, scale=0.3))
        self.bg_flat = torch.nn.Parameter(randn(3, NUISANCE_DIM, scale=0.15))
        self.log_blob_sigma = torch.nn.Parameter(torch.log(torch.tensor(1.5, dtype=torch.float64)))
        self.squash_gain = torch.nn.Parameter(torch.tensor(3.0, dtype=torch.float64))
        self.squash_bias = torch.nn.Parameter(torch.tensor(0.5, dtype=torch.float64))

        # w normalization stats from a fixed reference sample.
        with torch.no_grad():
            ref = self._map_raw(sample_z(4096, derive_seed(seed, "wstats")))
            self.register_buffer("w_mean", ref.mean(dim=0))
            self.register_buffer("w_scale", _W_STD / ref.std(dim=0))

        for p in self.parameters():
            p.requires_grad_(False)

        grid = torch.arange(IMAGE_SIZE, dtype=torch.float64)
        self.register_buffer("grid_u", grid.reshape(1, 1, 1, IMAGE_SIZE))
        self.register_buffer("grid_v", grid.reshape(1, 1, IMAGE_SIZE, 1))

    # The renderer-appearance parameters a pivotal tune may adjust; the
    # mapping, semantic read-out, and normalization stay frozen.
    TUNABLE = (
        "palette", "skin_base", "tint_matrix", "bg_base",
        "bg_ramp_u", "bg_ramp_v", "bg_flat",
        "log_blob_sigma", "squash_gain", "squash_bias",
    )

    def _map_raw(self, z: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(z @ self.map_w1.T + self.map_b1)
        return h @ self.map_w2.T + self.map_b2

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        """z (..., 64) -> normalized w (..., 64)."""
        z = torch.as_tensor(z, dtype=self.map_w1.dtype)
        if z.shape[-1] != Z_DIM:
            raise ContractViolation(f"z must have last dimension {Z_DIM}, got {z.shape[-1]}")
        return (self._map_raw(z) - self.w_mean) * self.w_scale

    def semantic_vector(self, w_plus: torch.Tensor) -> torch.Tensor:
        """q = B @ vec(w_plus) + c, shape (..., 33)."""
        wp = to_w_plus(w_plus)
        flat = wp.reshape(*wp.shape[:-2], LATENT_DIM)
        return flat @ self.semantic_basis.T + self.semantic_offset

    def calibrate(self, q: torch.Tensor) -> PoseParams:
        """Affine semantic-to-parameter maps; differentiable in q."""
        if q.shape[-1] != SEMANTIC_DIM:
            raise ContractViolation(f"semantic vector must have length {SEMANTIC_DIM}, got {q.shape[-1]}")
        return PoseParams(
            theta=THETA_SCALE * q[..., :POSE_DIM],
            expression=EXPR_SCALE * q[..., POSE_DIM : POSE_DIM + EXPR_DIM],
            identity=ID_SCALE * q[..., POSE_DIM + EXPR_DIM : POSE_DIM + EXPR_DIM + ID_DIM],
        )

    def pose_from_w(self, w_plus: torch.Tensor) -> PoseParams:
        return self.calibrate(self.semantic_vector(w_plus))

    def landmarks_from_w(self, w_plus: torch.Tensor) -> torch.Tensor:
        """Projected (..., 68, 2) image-space landmark centers."""
        q = self.semantic_vector(w_plus)
        params = self.calibrate(q)
        shape = reconstruct_shape(self.shape_model, params.identity, params.expression)
        return project_landmarks(apply_pose(shape, params.theta))

    def render(self, w_plus: torch.Tensor) -> torch.Tensor:
        """Render (..., 3, 64, 64) RGB in (0, 1); smooth in w_plus everywhere."""
        wp = to_w_plus(w_plus)
        lead = wp.shape[:-2]
        wp = wp.reshape(-1, N_LAYERS, W_DIM)
        q = self.semantic_vector(wp)
        params = self.calibrate(q)
        uv = self.landmarks_from_w(wp)  # (B, 68, 2)
        nuisance = q[..., POSE_DIM + EXPR_DIM + ID_DIM :]

        batch = wp.shape[0]
        un = self.grid_u / (IMAGE_SIZE - 1) - 0.5  # (1,1,1,64)
        vn = self.grid_v / (IMAGE_SIZE - 1) - 0.5  # (1,1,64,1)
        ramp_u = (nuisance @ self.bg_ramp_u.T).reshape(batch, 3, 1, 1) * un
        ramp_v = (nuisance @ self.bg_ramp_v.T).reshape(batch, 3, 1, 1) * vn
        flat = (nuisance @ self.bg_flat.T).reshape(batch, 3, 1, 1)
        background = self.bg_base.reshape(1, 3, 1, 1) + ramp_u + ramp_v + flat

        # Face disc follows the landmark centroid; soft edge, no kinks.
        center = uv.mean(dim=-2)  # (B, 2)
        d2 = (self.grid_u - center[:, 0].reshape(-1, 1, 1, 1)) ** 2 + (
            self.grid_v - center[:, 1].reshape(-1, 1, 1, 1)
        ) ** 2
        mask = torch.sigmoid((MASK_RADIUS**2 - d2) / MASK_SOFTNESS)  # (B,1,64,64)
        skin = (self.skin_base + params.identity @ self.tint_matrix.T).reshape(batch, 3, 1, 1)
        img = background * (1.0 - mask) + skin * mask

        # Separable gaussians: two 64-length profiles per landmark and one
        # batched GEMM instead of a full 68x64x64 exponential grid per image.
        sigma2 = torch.exp(self.log_blob_sigma) ** 2
        du = self.grid_u.reshape(1, 1, IMAGE_SIZE) - uv[..., 0].unsqueeze(-1)  # (B,68,64)
        dv = self.grid_v.reshape(1, 1, IMAGE_SIZE) - uv[..., 1].unsqueeze(-1)
        # Exponent floor: far-field tails underflow to subnormals, which cost
        # ~100x on x86 GEMMs; exp(-40) stays normal in float32
        # even after profile products, yet sits below pixel resolution.
        prof_u = torch.exp((-(du**2) / (2.0 * sigma2)).clamp_min(-40.0))
        prof_v = torch.exp((-(dv**2) / (2.0 * sigma2)).clamp_min(-40.0))
        colored_v = prof_v.unsqueeze(2) * self.palette.reshape(1, 68, 3, 1)  # (B,68,3,64)
        stacked = colored_v.permute(0, 2, 3, 1).reshape(batch, 3 * IMAGE_SIZE, N_LANDMARKS)
        blob_sum = torch.bmm(stacked, prof_u).reshape(batch, 3, IMAGE_SIZE, IMAGE_SIZE)
        img = img + blob_sum

        out = torch.sigmoid(self.squash_gain * (img - self.squash_bias))
        return out.reshape(*lead, 3, IMAGE_SIZE, IMAGE_SIZE)

    forward = render

    def ground_truth_directions(self, half_ranges: torch.Tensor | None = None) -> torch.Tensor:
        """Exact (512, 15) direction matrix for the controllable block.

        Column j moves semantic coordinate j by ``half_ranges[j]`` per unit of
        rescaled control input (default: unit semantic steps). Columns lie in
        the span of the pose+expression read-out rows by construction.
        """
        basis_pe = self.semantic_basis[:CONTROL_DIM].detach()  # (15, 512)
        if half_ranges is None:
            half_ranges = torch.ones(CONTROL_DIM, dtype=torch.float64)
        half_ranges = torch.as_tensor(half_ranges, dtype=torch.float64)
        if half_ranges.shape != (CONTROL_DIM,):
            raise ContractViolation(f"half_ranges must have shape ({CONTROL_DIM},)")
        return basis_pe.T * half_ranges

    def clone(self) -> "ToyGenerator":
        return copy.deepcopy(self)

    def render_batched(self, w_plus: torch.Tensor, chunk: int = 16) -> torch.Tensor:
        """No-grad chunked rendering; large batches blow past cache otherwise."""
        wp = to_w_plus(w_plus).reshape(-1, N_LAYERS, W_DIM)
        with torch.no_grad():
            parts = [self.render(wp[i : i + chunk]) for i in range(0, wp.shape[0], chunk)]
        return torch.cat(parts) if parts else torch.empty(0, 3, IMAGE_SIZE, IMAGE_SIZE)

    def save(self, path: str | Path) -> None:
        tensors = {name: param.detach().numpy() for name, param in self.state_dict().items()}
        Checkpoint("toy_generator", meta={"seed": self.seed}, tensors=tensors).save(path)

    @classmethod
    def load(cls, path: str | Path) -> "ToyGenerator":
        ckpt = Checkpoint.load(path, expect_kind="toy_generator")
        model = cls(seed=int(ckpt.meta["seed"]))
        state = {name: torch.from_numpy(arr) for name, arr in ckpt.tensors.items()}
        model.load_state_dict(state)
        return model
