"""Image-side estimators: pose regressor and frozen feature embedders.

The regressor recovers the 25 generator parameters (3 Euler angles, 12
expression, 10 identity coefficients) from a rendered image. Two small
trained networks only provide starting points: one maps global PCA features
of the image to coarse landmark positions, the other maps landmarks to
parameters. Everything after that is model-based refinement. The rendered
image is, before its output squash, an exactly known function of the blob
positions and a handful of linear unknowns, so undoing the squash turns
landmark localization into a zero-residual nonlinear least-squares problem:
damped Gauss-Newton drives all 68 positions to the pixel data at machine
precision. A robust fit then recovers the parameters from the positions
through the shape model, reprojects, and repeats the polish once, which
re-seats the rare landmark whose first descent picked a neighbouring blob.

Accuracy is therefore set by the optimizer, not by network capacity, and
every stage is smooth (fixed iteration counts, soft step caps, smooth
robust weights), so composite losses built on the regressor pass
finite-difference gradient checks.

The embedders are frozen random convolution stacks: random features are a
serviceable perceptual metric at this scale, and a global-pooled embedding
picks up skin tint and gross geometry, which is all the identity terms need.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .errors import ContractViolation, TrainingDiverged, TrainingFailure
from .shape3d import (
    IMAGE_SIZE,
    N_LANDMARKS,
    PROJECT_CENTER,
    PROJECT_SCALE,
    PoseParams,
    ShapeModel,
    apply_pose,
    project_landmarks,
    reconstruct_shape,
)
from .toygen import (
    EXPR_DIM,
    ID_DIM,
    MASK_RADIUS,
    MASK_SOFTNESS,
    NUISANCE_DIM,
    POSE_DIM,
    ToyGenerator,
    broadcast_latent,
    derive_seed,
    sample_z,
)

PARAM_DIM = POSE_DIM + EXPR_DIM + ID_DIM  # 25
EMBED_DIM = 32
PERCEPTUAL_SCALES = (64, 32, 16)

_PCA_DIM = 224
_LM_DIM = N_LANDMARKS * 2
_N_PIXELS = IMAGE_SIZE * IMAGE_SIZE

_GN_STEPS = (5, 3)  # polish steps after the network init, after reprojection
_GN_DAMPING = 1e-4  # absolute; relative damping would break quadratic convergence
_GN_STEP_CAP = 0.5  # px per landmark per step, applied through a tanh
_LINEAR_RIDGE = 1e-9
_FIT_DELTAS = (0.5, 0.1, 0.02, 0.02, 0.02)  # px, robust-weight scale per round
_FIT_RIDGE = 1e-9


def params_to_vector(params: PoseParams) -> torch.Tensor:
    return torch.cat([params.theta, params.expression, params.identity], dim=-1)


def vector_to_params(vec: torch.Tensor) -> PoseParams:
    if vec.shape[-1] != PARAM_DIM:
        raise ContractViolation(f"parameter vector must have length {PARAM_DIM}, got {vec.shape[-1]}")
    return PoseParams(
        theta=vec[..., :POSE_DIM],
        expression=vec[..., POSE_DIM : POSE_DIM + EXPR_DIM],
        identity=vec[..., POSE_DIM + EXPR_DIM :],
    )


def _mlp(sizes: tuple[int, ...], gen: torch.Generator) -> torch.nn.Sequential:
    layers: list[torch.nn.Module] = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        layer = torch.nn.Linear(n_in, n_out, dtype=torch.float64)
        with torch.no_grad():
            w = torch.randn(layer.weight.shape, generator=gen, dtype=torch.float64)
            layer.weight.copy_(w * (1.0 / n_in) ** 0.5)
            layer.bias.zero_()
        layers.append(layer)
        if i < len(sizes) - 2:
            layers.append(torch.nn.GELU())
    return torch.nn.Sequential(*layers)


def _rotation_tables(theta_deg: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Rotation matrices (..., 3, 3) and their angle derivatives (..., 3, 3, 3).

    Same convention as the shape module: R = R_roll @ R_pitch @ R_yaw,
    angles in degrees, so the derivatives carry the pi/180 factor.
    """
    th = torch.deg2rad(theta_deg)
    yaw, pitch, roll = th[..., 0], th[..., 1], th[..., 2]
    cy, sy = torch.cos(yaw), torch.sin(yaw)
    cp, sp = torch.cos(pitch), torch.sin(pitch)
    cr, sr = torch.cos(roll), torch.sin(roll)
    one, zero = torch.ones_like(cy), torch.zeros_like(cy)
    r_y = torch.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], dim=-1).reshape(*cy.shape, 3, 3)
    r_p = torch.stack([one, zero, zero, zero, cp, -sp, zero, sp, cp], dim=-1).reshape(*cy.shape, 3, 3)
    r_r = torch.stack([cr, -sr, zero, sr, cr, zero, zero, zero, one], dim=-1).reshape(*cy.shape, 3, 3)
    d_y = torch.stack([-sy, zero, cy, zero, zero, zero, -cy, zero, -sy], dim=-1).reshape(*cy.shape, 3, 3)
    d_p = torch.stack([zero, zero, zero, zero, -sp, -cp, zero, cp, -sp], dim=-1).reshape(*cy.shape, 3, 3)
    d_r = torch.stack([-sr, -cr, zero, cr, -sr, zero, zero, zero, zero], dim=-1).reshape(*cy.shape, 3, 3)
    rot = r_r @ r_p @ r_y
    drot = torch.stack([r_r @ r_p @ d_y, r_r @ d_p @ r_y, d_r @ r_p @ r_y], dim=-3)
    return rot, drot * (torch.pi / 180.0)


class PoseRegressor(torch.nn.Module):
    """Landmark-then-parameter estimator for 64x64 RGB renders."""

    def __init__(self, shape_model: ShapeModel | None = None, seed: int = 0):
        super().__init__()
        self.seed = seed
        shape_model = shape_model or ShapeModel.from_seed(0)
        gen = torch.Generator().manual_seed(derive_seed(seed, "regressor-init"))

        self.stage0 = _mlp((_PCA_DIM, 512, 512, _LM_DIM), gen)
        self.head = _mlp((_LM_DIM, 512, 512, PARAM_DIM), gen)

        def buf(name, shape):
            self.register_buffer(name, torch.zeros(shape, dtype=torch.float64))

        def buf1(name, shape):
            self.register_buffer(name, torch.ones(shape, dtype=torch.float64))

        buf("pca_mean", (3 * _N_PIXELS,))
        buf("pca_basis", (_PCA_DIM, 3 * _N_PIXELS))
        buf("pca_feat_mean", (_PCA_DIM,))
        buf1("pca_feat_std", (_PCA_DIM,))
        buf("label_mean", (PARAM_DIM,))
        buf1("label_std", (PARAM_DIM,))
        buf("lm_mean", (_LM_DIM,))
        buf1("lm_std", (_LM_DIM,))

        # Shape model and renderer constants travel inside the checkpoint so
        # a loaded regressor is self-contained. Neutral defaults keep an
        # untrained instance finite (unit sigma and gain, dark palette).
        self.register_buffer("shape_mean", shape_model.mean_shape.clone())
        self.register_buffer("shape_identity", shape_model.identity_basis.clone())
        self.register_buffer("shape_expression", shape_model.expression_basis.clone())
        buf("palette", (N_LANDMARKS, 3))
        buf1("blob_sigma2", ())
        buf("bg_base", (3,))
        buf("bg_ramp_u", (3, NUISANCE_DIM))
        buf("bg_ramp_v", (3, NUISANCE_DIM))
        buf("bg_flat", (3, NUISANCE_DIM))
        buf1("squash_gain", ())
        buf("squash_bias", ())

        self.register_buffer("grid", torch.arange(IMAGE_SIZE, dtype=torch.float64))

    def _shape_model(self) -> ShapeModel:
        return ShapeModel(self.shape_mean, self.shape_identity, self.shape_expression)

    def landmarks_of(self, vec: torch.Tensor) -> torch.Tensor:
        """Project the shape implied by a parameter vector: (..., 68, 2)."""
        params = vector_to_params(vec)
        shape = reconstruct_shape(self._shape_model(), params.identity, params.expression)
        return project_landmarks(apply_pose(shape, params.theta))

    def _render_tables(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Derived constants for the refinement solves; cheap to rebuild per call."""
        un = self.grid / (IMAGE_SIZE - 1) - 0.5
        ramps = (
            self.bg_ramp_u.T.reshape(NUISANCE_DIM, 3, 1, 1) * un.reshape(1, 1, 1, IMAGE_SIZE)
            + self.bg_ramp_v.T.reshape(NUISANCE_DIM, 3, 1, 1) * un.reshape(1, 1, IMAGE_SIZE, 1)
            + self.bg_flat.T.reshape(NUISANCE_DIM, 3, 1, 1)
        )  # (8, 3, 64, 64): background field per unit nuisance coefficient
        flat = ramps.reshape(NUISANCE_DIM, 3, _N_PIXELS)
        gram = torch.einsum("kca,lca->kla", flat, flat)  # (8, 8, 4096) pixelwise
        pal_gram = self.palette @ self.palette.T
        basis = torch.cat([self.shape_expression, self.shape_identity], dim=1)  # (204, 22)
        return ramps, gram, pal_gram, basis

    def _unsquash(self, image: torch.Tensor) -> torch.Tensor:
        """Invert the output sigmoid back to the pre-squash field."""
        p = image.clamp(1e-7, 1.0 - 1e-7)
        return self.squash_bias + torch.logit(p) / self.squash_gain

    def _profiles(self, pos: torch.Tensor) -> tuple[torch.Tensor, ...]:
        """Per-landmark gaussian row/column profiles and their derivatives."""
        du = self.grid.reshape(1, 1, -1) - pos[..., 0].unsqueeze(-1)  # (B,68,64)
        dv = self.grid.reshape(1, 1, -1) - pos[..., 1].unsqueeze(-1)
        s2 = self.blob_sigma2
        # Exponent floor as in the renderer: subnormal tails stall x86 GEMMs.
        pu = torch.exp((-(du**2) / (2.0 * s2)).clamp_min(-40.0))
        pv = torch.exp((-(dv**2) / (2.0 * s2)).clamp_min(-40.0))
        return pu, pv, pu * du / s2, pv * dv / s2

    def _blob_image(self, pu: torch.Tensor, pv: torch.Tensor) -> torch.Tensor:
        colored_v = pv.unsqueeze(2) * self.palette.reshape(1, N_LANDMARKS, 3, 1)
        stacked = colored_v.permute(0, 2, 3, 1).reshape(-1, 3 * IMAGE_SIZE, N_LANDMARKS)
        return torch.bmm(stacked, pu).reshape(-1, 3, IMAGE_SIZE, IMAGE_SIZE)

    def _face_mask(self, pos: torch.Tensor) -> torch.Tensor:
        center = pos.mean(dim=1)
        d2 = (self.grid.reshape(1, 1, -1) - center[:, 0].reshape(-1, 1, 1)) ** 2 + (
            self.grid.reshape(1, -1, 1) - center[:, 1].reshape(-1, 1, 1)
        ) ** 2
        return torch.sigmoid((MASK_RADIUS**2 - d2) / MASK_SOFTNESS)  # (B,64,64)

    def _linear_fit(self, y, pos, pu, pv, tables):
        """Best background + flat skin color for fixed blob positions.

        With positions held, the remaining field is linear in 11 unknowns
        (8 nuisance coefficients, 3 skin channels); one small normal-equation
        solve per element. Returns the fitted blob-free image.
        """
        ramps, gram, _, _ = tables
        batch = y.shape[0]
        mask = self._face_mask(pos)
        w0 = (1.0 - mask).reshape(batch, _N_PIXELS)
        w1 = mask.reshape(batch, _N_PIXELS)
        resid = y - self._blob_image(pu, pv) - self.bg_base.reshape(1, 3, 1, 1) * (1.0 - mask).unsqueeze(1)
        rf = resid.reshape(batch, 3, _N_PIXELS)
        ramp_flat = ramps.reshape(NUISANCE_DIM, 3, _N_PIXELS)
        a_nn = torch.einsum("kla,ba->bkl", gram, w0 * w0)
        a_ns = torch.einsum("kca,ba->bkc", ramp_flat, w0 * w1)  # (B,8,3)
        a_ss = (w1 * w1).sum(dim=-1)
        b_n = torch.einsum("kca,bca->bk", ramp_flat, rf * w0.reshape(batch, 1, _N_PIXELS))
        b_s = (rf * w1.reshape(batch, 1, _N_PIXELS)).sum(dim=-1)
        eye3 = torch.eye(3, dtype=y.dtype)
        top = torch.cat([a_nn, a_ns], dim=2)
        bot = torch.cat([a_ns.transpose(1, 2), a_ss.reshape(-1, 1, 1) * eye3], dim=2)
        normal = torch.cat([top, bot], dim=1) + _LINEAR_RIDGE * torch.eye(11, dtype=y.dtype)
        sol = torch.linalg.solve(normal, torch.cat([b_n, b_s], dim=1))
        nuisance, skin = sol[:, :NUISANCE_DIM], sol[:, NUISANCE_DIM:]
        background = self.bg_base.reshape(1, 3, 1, 1) + torch.einsum("bk,kcij->bcij", nuisance, ramps)
        return background * (1.0 - mask).unsqueeze(1) + skin.reshape(batch, 3, 1, 1) * mask.unsqueeze(1)

    def _gn_refine(self, y, pos, steps, tables):
        """Damped Gauss-Newton on all blob positions against the unsquashed image.

        The linear part is fit once at the entry positions and held; the
        refinement moves landmarks far too little to shift the face disc.
        Absolute damping preserves quadratic convergence of the exact model;
        the tanh step cap tames early steps from a poor initialization
        without biasing the fixed point. Separable blobs make the normal
        matrix a 2x2 interleave of gram-matrix products, so no Jacobian over
        pixels is ever materialized.
        """
        _, _, pal_gram, _ = tables
        batch = y.shape[0]
        pu, pv, _, _ = self._profiles(pos)
        lin = self._linear_fit(y, pos, pu, pv, tables)
        damping = _GN_DAMPING * torch.eye(_LM_DIM, dtype=y.dtype)
        for _ in range(steps):
            pu, pv, dpu, dpv = self._profiles(pos)
            rho = (y - lin - self._blob_image(pu, pv)).reshape(batch, 3 * IMAGE_SIZE, IMAGE_SIZE)
            t_du = torch.bmm(rho, dpu.transpose(1, 2)).reshape(batch, 3, IMAGE_SIZE, N_LANDMARKS)
            t_u = torch.bmm(rho, pu.transpose(1, 2)).reshape(batch, 3, IMAGE_SIZE, N_LANDMARKS)
            pv_t = pv.permute(0, 2, 1).unsqueeze(1)
            dpv_t = dpv.permute(0, 2, 1).unsqueeze(1)
            g_u = torch.einsum("bck,kc->bk", (t_du * pv_t).sum(dim=2), self.palette)
            g_v = torch.einsum("bck,kc->bk", (t_u * dpv_t).sum(dim=2), self.palette)
            jtr = torch.stack([g_u, g_v], dim=-1).reshape(batch, _LM_DIM)
            guu = torch.bmm(pu, pu.transpose(1, 2))
            gdd_u = torch.bmm(dpu, dpu.transpose(1, 2))
            gdu_u = torch.bmm(dpu, pu.transpose(1, 2))
            gvv = torch.bmm(pv, pv.transpose(1, 2))
            gdd_v = torch.bmm(dpv, dpv.transpose(1, 2))
            gdv_v = torch.bmm(dpv, pv.transpose(1, 2))
            hess = torch.empty(batch, _LM_DIM, _LM_DIM, dtype=y.dtype)
            hess[:, 0::2, 0::2] = pal_gram * gdd_u * gvv
            hess[:, 1::2, 1::2] = pal_gram * guu * gdd_v
            hess[:, 0::2, 1::2] = pal_gram * gdu_u * gdv_v.transpose(1, 2)
            hess[:, 1::2, 0::2] = pal_gram * gdu_u.transpose(1, 2) * gdv_v
            delta = torch.linalg.solve(hess + damping, jtr).reshape(batch, N_LANDMARKS, 2)
            norm = (delta.pow(2).sum(dim=-1, keepdim=True) + 1e-60).sqrt()
            delta = delta * (_GN_STEP_CAP * torch.tanh(norm / _GN_STEP_CAP) / norm)
            pos = pos + delta
        return pos

    def _fit_params(self, pos_target, vec0, tables):
        """Robust nonlinear least squares: parameters from landmark positions.

        Gauss-Newton with smooth weights 1/sqrt(1 + |r|^2/delta^2) applied
        once on each side of the normal equations; the shrinking delta
        schedule lets early rounds see every landmark and late rounds ignore
        any blob the image polish left on a wrong basin.
        """
        _, _, _, basis = tables
        batch = pos_target.shape[0]
        basis_pts = basis.T.reshape(PARAM_DIM - POSE_DIM, N_LANDMARKS, 3)
        ridge = _FIT_RIDGE * torch.eye(PARAM_DIM, dtype=pos_target.dtype)
        vec = vec0
        for delta in _FIT_DELTAS:
            theta, coeff = vec[..., :POSE_DIM], vec[..., POSE_DIM:]
            pts = (self.shape_mean + coeff @ basis.T).reshape(batch, N_LANDMARKS, 3)
            rot, drot = _rotation_tables(theta)
            posed = torch.einsum("bxy,bny->bnx", rot, pts)
            u = PROJECT_CENTER + PROJECT_SCALE * posed[..., 0]
            v = PROJECT_CENTER - PROJECT_SCALE * posed[..., 1]
            r = torch.stack([u, v], dim=-1) - pos_target  # (B,68,2)
            d_theta = torch.einsum("baxy,bny->banx", drot, pts)  # (B,3,68,3)
            d_coeff = torch.einsum("bxy,qny->bqnx", rot, basis_pts)  # (B,22,68,3)
            d_all = torch.cat([d_theta, d_coeff], dim=1)
            jac = torch.stack(
                [PROJECT_SCALE * d_all[..., 0], -PROJECT_SCALE * d_all[..., 1]], dim=-1
            )  # (B,25,68,2)
            wgt = (1.0 + r.pow(2).sum(dim=-1) / delta**2).rsqrt()
            jw = (jac * wgt.reshape(batch, 1, N_LANDMARKS, 1)).reshape(batch, PARAM_DIM, _LM_DIM)
            jtj = torch.bmm(jw, jac.reshape(batch, PARAM_DIM, _LM_DIM).transpose(1, 2))
            jtr = torch.einsum("bqn,bn->bq", jw, r.reshape(batch, _LM_DIM))
            vec = vec - torch.linalg.solve(jtj + ridge, jtr)
        return vec

    def _initial_landmarks(self, image4: torch.Tensor) -> torch.Tensor:
        coeff = (image4.reshape(image4.shape[0], -1) - self.pca_mean) @ self.pca_basis.T
        coeff = (coeff - self.pca_feat_mean) / self.pca_feat_std
        lm = self.stage0(coeff) * self.lm_std + self.lm_mean
        return lm.reshape(-1, N_LANDMARKS, 2)

    def params_from_landmarks(self, lm: torch.Tensor) -> torch.Tensor:
        """(..., 68, 2) -> (..., 25); the analytically trained head."""
        lead = lm.shape[:-2]
        normed = (lm.reshape(-1, _LM_DIM) - self.lm_mean) / self.lm_std
        vec = self.head(normed) * self.label_std + self.label_mean
        return vec.reshape(*lead, PARAM_DIM)

    def _estimate_full(self, image4: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, 3, 64, 64) -> parameter vectors (B, 25) and landmarks (B, 68, 2)."""
        tables = self._render_tables()
        y = self._unsquash(image4)
        pos = self._initial_landmarks(image4)
        pos = self._gn_refine(y, pos, _GN_STEPS[0], tables)
        vec = self._fit_params(pos, self.params_from_landmarks(pos), tables)
        pos = self._gn_refine(y, self.landmarks_of(vec), _GN_STEPS[1], tables)
        vec = self._fit_params(pos, vec, tables)
        return vec, pos

    def landmarks_from_image(self, image: torch.Tensor) -> torch.Tensor:
        """(..., 3, 64, 64) -> refined landmark positions (..., 68, 2)."""
        lead = image.shape[:-3]
        x = image.reshape(-1, 3, IMAGE_SIZE, IMAGE_SIZE).to(self.grid.dtype)
        _, pos = self._estimate_full(x)
        return pos.reshape(*lead, N_LANDMARKS, 2)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """(..., 3, 64, 64) -> (..., 25) in calibrated units; differentiable."""
        lead = image.shape[:-3]
        x = image.reshape(-1, 3, IMAGE_SIZE, IMAGE_SIZE).to(self.grid.dtype)
        vec, _ = self._estimate_full(x)
        return vec.reshape(*lead, PARAM_DIM)

    def estimate(self, image: torch.Tensor) -> PoseParams:
        """Detached parameter estimate for (..., 3, 64, 64) images."""
        with torch.no_grad():
            vec = self.forward(image)
        return vector_to_params(vec.detach())

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        merged = {"seed": self.seed}
        merged.update(meta or {})
        tensors = {name: t.detach().double().numpy() for name, t in self.state_dict().items()}
        Checkpoint("pose_regressor", meta=merged, tensors=tensors).save(path)

    @classmethod
    def load(cls, path: str | Path) -> "PoseRegressor":
        ckpt = Checkpoint.load(path, expect_kind="pose_regressor")
        model = cls(seed=int(ckpt.meta.get("seed", 0)))
        model.load_state_dict({name: torch.from_numpy(arr) for name, arr in ckpt.tensors.items()})
        for p in model.parameters():
            p.requires_grad_(False)
        return model


def _pca_basis(images: torch.Tensor, dim: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Randomized-range PCA of flattened images; deterministic via seed."""
    mean = images.mean(dim=0)
    centered = images - mean
    gen = torch.Generator().manual_seed(seed)
    probe = torch.randn(images.shape[1], dim + 32, generator=gen, dtype=images.dtype)
    q, _ = torch.linalg.qr(centered @ probe)
    q, _ = torch.linalg.qr(centered @ (centered.T @ q))
    _, _, vt = torch.linalg.svd(q.T @ centered, full_matrices=False)
    return mean, vt[:dim].contiguous()


def _train_net(net, inputs, targets, steps, batch_size, lr, seed, what):
    optim = torch.optim.Adam(net.parameters(), lr=lr)
    schedule = torch.optim.lr_scheduler.CosineAnnealingLR(optim, T_max=steps, eta_min=lr * 0.02)
    draw = torch.Generator().manual_seed(seed)
    n = inputs.shape[0]
    for step in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=draw)
        loss = F.mse_loss(net(inputs[idx]), targets[idx])
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"{what} loss became non-finite", iteration=step)
        optim.zero_grad()
        loss.backward()
        optim.step()
        schedule.step()


def _copy_render_constants(reg: PoseRegressor, generator: ToyGenerator) -> None:
    with torch.no_grad():
        reg.shape_mean.copy_(generator.shape_model.mean_shape)
        reg.shape_identity.copy_(generator.shape_model.identity_basis)
        reg.shape_expression.copy_(generator.shape_model.expression_basis)
        reg.palette.copy_(generator.palette.detach())
        reg.blob_sigma2.copy_(torch.exp(generator.log_blob_sigma.detach()) ** 2)
        reg.bg_base.copy_(generator.bg_base.detach())
        reg.bg_ramp_u.copy_(generator.bg_ramp_u.detach())
        reg.bg_ramp_v.copy_(generator.bg_ramp_v.detach())
        reg.bg_flat.copy_(generator.bg_flat.detach())
        reg.squash_gain.copy_(generator.squash_gain.detach())
        reg.squash_bias.copy_(generator.squash_bias.detach())


def train_regressor(
    generator: ToyGenerator,
    seed: int = 0,
    pool_size: int = 32768,
    val_size: int = 1024,
    head_size: int = 131072,
    stage0_steps: int = 12000,
    head_steps: int = 8000,
    batch_size: int = 128,
    lr: float = 3e-3,
    basis_size: int = 4096,
    max_rmse_fraction: float = 0.02,
    enforce_target: bool = True,
) -> tuple[PoseRegressor, dict]:
    """Train the two initializer networks; gate on held-out full-pipeline RMSE.

    Ground-truth landmarks and parameters come for free from the generator,
    so training is plain supervised regression: stage0 learns PCA features
    -> coarse landmarks on streamed renders, the head learns landmarks ->
    parameters on analytic pairs that need no rendering at all (with
    mixed-scale positional jitter so initialization error does not throw
    it). Both train in float32; the refinement stages have no trainable
    weights, and the renderer constants they consume are copied from the
    generator exactly, in float64, after the nets come back to the double
    master. The gate runs the full estimate on held-out renders and compares
    each attribute's RMSE against ``max_rmse_fraction`` of that attribute's
    observed 1st-to-99th percentile range; raises TrainingFailure when
    ``enforce_target`` and any attribute misses.
    """
    if pool_size < basis_size or val_size < 1:
        raise ContractViolation("pool must be at least basis_size and val_size positive")
    master = PoseRegressor(generator.shape_model, seed=seed)
    _copy_render_constants(master, generator)

    with torch.no_grad():
        z = sample_z(pool_size + val_size, derive_seed(seed, "regressor-data"))
        w = broadcast_latent(generator.map_latent(z))
        labels64 = params_to_vector(generator.pose_from_w(w))
        lm64 = master.landmarks_of(labels64).reshape(-1, _LM_DIM)
    labels = labels64[:pool_size].float()
    lm_labels = lm64[:pool_size].float()
    val_labels = labels64[pool_size:]
    ranges64 = torch.quantile(labels64, 0.99, dim=0) - torch.quantile(labels64, 0.01, dim=0)

    work = master.float()
    gen32 = generator.clone().float()

    with torch.no_grad():
        work.label_mean.copy_(labels.mean(dim=0))
        work.label_std.copy_(labels.std(dim=0))
        work.lm_mean.copy_(lm_labels.mean(dim=0))
        work.lm_std.copy_(lm_labels.std(dim=0).clamp_min(1e-6))

        basis_imgs = gen32.render_batched(w[:basis_size].float(), chunk=64).reshape(basis_size, -1)
        mean, basis = _pca_basis(basis_imgs, _PCA_DIM, derive_seed(seed, "regressor-pca"))
        work.pca_mean.copy_(mean)
        work.pca_basis.copy_(basis)
        del basis_imgs

        coeff_parts = []
        for i in range(0, pool_size, 512):
            imgs = gen32.render_batched(w[i : i + 512].float(), chunk=64)
            flat = imgs.reshape(imgs.shape[0], -1) - work.pca_mean
            coeff_parts.append(flat @ work.pca_basis.T)
        coeffs = torch.cat(coeff_parts)
        del coeff_parts
        work.pca_feat_mean.copy_(coeffs.mean(dim=0))
        work.pca_feat_std.copy_(coeffs.std(dim=0).clamp_min(1e-6))
        coeffs = (coeffs - work.pca_feat_mean) / work.pca_feat_std
        normed_lm = (lm_labels - work.lm_mean) / work.lm_std

    for p in work.stage0.parameters():
        p.requires_grad_(True)
    _train_net(
        work.stage0, coeffs, normed_lm, stage0_steps, batch_size, lr,
        derive_seed(seed, "stage0-batches"), "regressor stage0",
    )
    for p in work.stage0.parameters():
        p.requires_grad_(False)
    del coeffs

    # Analytic landmarks -> parameters pairs; no rendering involved. The
    # jitter scale varies across the set so the head stays calibrated for
    # whatever residual error the first polish leaves.
    with torch.no_grad():
        hz = sample_z(head_size, derive_seed(seed, "head-data")).float()
        h_lm_parts, h_lab_parts = [], []
        for i in range(0, head_size, 16384):
            hw = broadcast_latent(gen32.map_latent(hz[i : i + 16384]))
            hv = params_to_vector(gen32.pose_from_w(hw))
            h_lab_parts.append((hv - work.label_mean) / work.label_std)
            h_lm_parts.append(work.landmarks_of(hv).reshape(-1, _LM_DIM))
        hgen = torch.Generator().manual_seed(derive_seed(seed, "head-noise"))
        h_lm = torch.cat(h_lm_parts)
        scales = torch.tensor([0.05, 0.1, 0.2]).repeat_interleave(h_lm.shape[0] // 3 + 1)
        scales = scales[: h_lm.shape[0]].unsqueeze(-1)
        h_lm = h_lm + scales * torch.randn(h_lm.shape, generator=hgen)
        h_lm = (h_lm - work.lm_mean) / work.lm_std
        h_lab = torch.cat(h_lab_parts)
    for p in work.head.parameters():
        p.requires_grad_(True)
    _train_net(
        work.head, h_lm, h_lab, head_steps, batch_size, lr,
        derive_seed(seed, "head-batches"), "regressor head",
    )
    for p in work.head.parameters():
        p.requires_grad_(False)
    del h_lm, h_lab

    master = work.double()
    _copy_render_constants(master, generator)
    with torch.no_grad():
        master.grid.copy_(torch.arange(IMAGE_SIZE, dtype=torch.float64))
    for p in master.parameters():
        p.requires_grad_(False)

    # Held-out validation in float64 through the full pipeline.
    with torch.no_grad():
        val_parts, val_lm_parts = [], []
        for i in range(pool_size, pool_size + val_size, 128):
            imgs = generator.render_batched(w[i : i + 128], chunk=64)
            vec, lm = master._estimate_full(imgs)
            val_parts.append(vec)
            val_lm_parts.append(lm.reshape(-1, _LM_DIM))
        val_pred = torch.cat(val_parts)
        val_lm = torch.cat(val_lm_parts)
    rmse = ((val_pred - val_labels) ** 2).mean(dim=0).sqrt()
    fractions = rmse / ranges64
    lm_rmse = float(((val_lm - lm64[pool_size:]) ** 2).mean().sqrt())
    report = {
        "rmse": [float(v) for v in rmse],
        "range": [float(v) for v in ranges64],
        "rmse_fraction": [float(v) for v in fractions],
        "worst_fraction": float(fractions.max()),
        "landmark_rmse_px": lm_rmse,
        "target_fraction": max_rmse_fraction,
        "pool_size": pool_size,
        "val_size": val_size,
        "stage0_steps": stage0_steps,
        "head_steps": head_steps,
    }
    if enforce_target and report["worst_fraction"] > max_rmse_fraction:
        raise TrainingFailure(
            f"regressor RMSE fraction {report['worst_fraction']:.4f} exceeds "
            f"target {max_rmse_fraction:.4f}",
            achieved=report["worst_fraction"],
        )
    return master, report


class FrozenEmbedder(torch.nn.Module):
    """Frozen random conv stack providing perceptual and identity features."""

    def __init__(self, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(derive_seed(seed, "embedder"))

        def conv(c_in, c_out, stride):
            layer = torch.nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, dtype=torch.float64)
            with torch.no_grad():
                w = torch.randn(layer.weight.shape, generator=gen, dtype=torch.float64)
                layer.weight.copy_(w * (2.0 / (c_in * 9)) ** 0.5)
                layer.bias.copy_(0.05 * torch.randn(c_out, generator=gen, dtype=torch.float64))
            return layer

        self.conv64 = conv(3, 12, 1)
        self.conv32 = conv(12, 24, 2)
        self.conv16 = conv(24, 32, 2)
        self.conv8 = conv(32, 48, 2)
        self.head = torch.nn.Linear(48, EMBED_DIM, dtype=torch.float64)
        with torch.no_grad():
            w = torch.randn(self.head.weight.shape, generator=gen, dtype=torch.float64)
            self.head.weight.copy_(w * 48**-0.5)
            self.head.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def perceptual_features(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Feature maps at spatial scales 64, 32, 16."""
        x = image.reshape(-1, 3, 64, 64)
        f64 = F.gelu(self.conv64(x))
        f32 = F.gelu(self.conv32(f64))
        f16 = F.gelu(self.conv16(f32))
        return [f64, f32, f16]

    def identity_embedding(self, image: torch.Tensor) -> torch.Tensor:
        """Unit-norm (..., 32) embedding; global pooling keeps tint visible."""
        lead = image.shape[:-3]
        f16 = self.perceptual_features(image)[-1]
        f8 = F.gelu(self.conv8(f16))
        pooled = f8.mean(dim=(-1, -2))
        emb = self.head(pooled)
        emb = emb / emb.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return emb.reshape(*lead, EMBED_DIM)


def identity_loss(embedder: FrozenEmbedder, image_a: torch.Tensor, image_b: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity of identity embeddings, averaged over the batch."""
    e_a = embedder.identity_embedding(image_a)
    e_b = embedder.identity_embedding(image_b)
    return (1.0 - (e_a * e_b).sum(dim=-1)).mean()


def perceptual_loss(embedder: FrozenEmbedder, image_a: torch.Tensor, image_b: torch.Tensor) -> torch.Tensor:
    """Sum over scales of feature-map MSE."""
    feats_a = embedder.perceptual_features(image_a)
    feats_b = embedder.perceptual_features(image_b)
    return sum(F.mse_loss(fa, fb) for fa, fb in zip(feats_a, feats_b))
