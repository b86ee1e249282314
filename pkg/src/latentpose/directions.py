"""Linear latent directions: calibration statistics and reenactment arithmetic.

A single matrix ``A`` of shape (n_layers * w_dim, k) holds one latent
direction per controllable attribute (3 rotation angles + 12 expression
coefficients). Edits are pure linear algebra: attribute deltas measured in
a common rescaled range move the layered latent by ``A @ delta``. The
calibration statistics that define that common range are part of the
model and travel inside its checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .checkpoint import Checkpoint
from .errors import ContractViolation
from .toygen import (
    CONTROL_DIM,
    EXPR_DIM,
    EXPR_SCALE,
    LATENT_DIM,
    N_LAYERS,
    POSE_DIM,
    THETA_SCALE,
    W_DIM,
    ToyGenerator,
    derive_seed,
    sample_z,
    to_w_plus,
)

MIN_STAT_SAMPLES = 100


@dataclass(frozen=True)
class PoseStats:
    """Per-attribute 1st/99th percentile bounds and the common range bound.

    ``rescale`` maps each attribute affinely from [low, high] onto
    [-bound, bound]; values outside the quantiles extrapolate linearly.
    """

    low: torch.Tensor  # (15,) raw units
    high: torch.Tensor  # (15,) raw units
    bound: float = 1.0
    n_samples: int = 0

    def __post_init__(self):
        low = torch.as_tensor(self.low, dtype=torch.float64)
        high = torch.as_tensor(self.high, dtype=torch.float64)
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        if low.shape != (CONTROL_DIM,) or high.shape != (CONTROL_DIM,):
            raise ContractViolation(f"stats must cover {CONTROL_DIM} attributes, got {tuple(low.shape)}")
        if not (torch.isfinite(low).all() and torch.isfinite(high).all()):
            raise ContractViolation("stats contain non-finite bounds")
        if not (high > low).all():
            raise ContractViolation("every attribute needs high > low")
        if not self.bound > 0:
            raise ContractViolation(f"range bound must be positive, got {self.bound}")

    @property
    def center(self) -> torch.Tensor:
        return (self.low + self.high) / 2.0

    @property
    def half_range(self) -> torch.Tensor:
        return (self.high - self.low) / 2.0


def estimate_p_stats(
    generator: ToyGenerator,
    regressor,
    n: int = 10000,
    seed: int = 0,
    bound: float = 1.0,
    chunk: int = 256,
) -> PoseStats:
    """Empirical quantile calibration from ``n`` random generations.

    Renders random latents and takes the regressor's pose estimate on each,
    so the statistics describe the same estimator that later drives edits.
    """
    if n < MIN_STAT_SAMPLES:
        raise ContractViolation(f"need at least {MIN_STAT_SAMPLES} samples for stable quantiles, got {n}")
    w = generator.map_latent(sample_z(n, derive_seed(seed, "stats-pool")))
    wp = to_w_plus(w.unsqueeze(-2).expand(n, N_LAYERS, W_DIM))
    rows = []
    with torch.no_grad():
        for lo in range(0, n, chunk):
            images = generator.render(wp[lo : lo + chunk])
            rows.append(regressor.estimate(images).control_vector())
    pooled = torch.cat(rows, dim=0)
    qurs = torch.quantile(pooled, torch.tensor([0.01, 0.99], dtype=pooled.dtype), dim=0)
    return PoseStats(low=qurs[0], high=qurs[1], bound=bound, n_samples=n)


def rescale(p: torch.Tensor, stats: PoseStats) -> torch.Tensor:
    """Raw attribute values -> common range [-bound, bound]; affine per attribute."""
    if p.shape[-1] != CONTROL_DIM:
        raise ContractViolation(f"pose vector must have last dimension {CONTROL_DIM}, got {p.shape[-1]}")
    return stats.bound * (p - stats.center) / stats.half_range


def unscale(p_tilde: torch.Tensor, stats: PoseStats) -> torch.Tensor:
    """Exact inverse of ``rescale``."""
    if p_tilde.shape[-1] != CONTROL_DIM:
        raise ContractViolation(f"pose vector must have last dimension {CONTROL_DIM}, got {p_tilde.shape[-1]}")
    return stats.center + p_tilde * stats.half_range / stats.bound


class DirectionMatrix(torch.nn.Module):
    """Trainable (512, 15) matrix of latent directions plus its calibration."""

    def __init__(self, seed: int = 0, init_std: float = 0.01, stats: PoseStats | None = None):
        super().__init__()
        gen = torch.Generator().manual_seed(derive_seed(seed, "direction-init"))
        # Small init keeps early edits near-identity so the first gradients
        # measure the loss landscape, not a scrambled face.
        self.A = torch.nn.Parameter(
            init_std * torch.randn(LATENT_DIM, CONTROL_DIM, generator=gen, dtype=torch.float64)
        )
        self.stats = stats

    @classmethod
    def from_matrix(cls, A: torch.Tensor, stats: PoseStats | None = None) -> "DirectionMatrix":
        A = torch.as_tensor(A, dtype=torch.float64)
        if A.shape != (LATENT_DIM, CONTROL_DIM):
            raise ContractViolation(f"direction matrix must be {(LATENT_DIM, CONTROL_DIM)}, got {tuple(A.shape)}")
        model = cls(stats=stats)
        with torch.no_grad():
            model.A.copy_(A)
        return model

    def snapshot(self) -> "DirectionMatrix":
        """Immutable copy for inference while a training run mutates ``self``."""
        return DirectionMatrix.from_matrix(self.A.detach().clone(), self.stats)

    def save(self, path: str | Path) -> None:
        if self.stats is None:
            raise ContractViolation("direction matrix has no calibration stats; refusing to save without them")
        ckpt = Checkpoint(
            "direction_matrix",
            meta={
                "k": CONTROL_DIM,
                "n_layers": N_LAYERS,
                "latent_dim": LATENT_DIM,
                "bound": self.stats.bound,
                "stat_samples": self.stats.n_samples,
            },
            tensors={
                "A": self.A.detach().numpy(),
                "stats_low": self.stats.low.numpy(),
                "stats_high": self.stats.high.numpy(),
            },
        )
        ckpt.save(path)

    @classmethod
    def load(cls, path: str | Path) -> "DirectionMatrix":
        ckpt = Checkpoint.load(path, expect_kind="direction_matrix")
        stats = PoseStats(
            low=torch.from_numpy(ckpt.tensors["stats_low"]),
            high=torch.from_numpy(ckpt.tensors["stats_high"]),
            bound=float(ckpt.meta["bound"]),
            n_samples=int(ckpt.meta["stat_samples"]),
        )
        return cls.from_matrix(torch.from_numpy(ckpt.tensors["A"]), stats)


def save_pose_stats(stats: PoseStats, path: str | Path) -> None:
    """Persist calibration stats standalone (direction checkpoints embed their own)."""
    Checkpoint(
        "pose_stats",
        meta={"bound": stats.bound, "n_samples": stats.n_samples},
        tensors={"low": stats.low.numpy(), "high": stats.high.numpy()},
    ).save(path)


def load_pose_stats(path: str | Path) -> PoseStats:
    ckpt = Checkpoint.load(path, expect_kind="pose_stats")
    return PoseStats(
        low=torch.from_numpy(ckpt.tensors["low"]),
        high=torch.from_numpy(ckpt.tensors["high"]),
        bound=float(ckpt.meta["bound"]),
        n_samples=int(ckpt.meta["n_samples"]),
    )


def _matrix_of(A) -> torch.Tensor:
    mat = A.A if isinstance(A, DirectionMatrix) else torch.as_tensor(A)
    if mat.shape != (LATENT_DIM, CONTROL_DIM):
        raise ContractViolation(f"direction matrix must be {(LATENT_DIM, CONTROL_DIM)}, got {tuple(mat.shape)}")
    return mat


def delta_w(A, delta_p: torch.Tensor) -> torch.Tensor:
    """Latent shift A @ delta_p, reshaped to per-layer (..., 8, 64) form."""
    mat = _matrix_of(A)
    if delta_p.shape[-1] != CONTROL_DIM:
        raise ContractViolation(f"attribute delta must have last dimension {CONTROL_DIM}, got {delta_p.shape[-1]}")
    flat = delta_p @ mat.T
    return flat.reshape(*delta_p.shape[:-1], N_LAYERS, W_DIM)


def single_attribute_delta(index: int, epsilon: float) -> torch.Tensor:
    """One-hot attribute delta in the rescaled range."""
    if not 0 <= index < CONTROL_DIM:
        raise ContractViolation(f"attribute index must be in [0, {CONTROL_DIM}), got {index}")
    out = torch.zeros(CONTROL_DIM, dtype=torch.float64)
    out[index] = float(epsilon)
    return out


def reenact_code(A, stats: PoseStats, w_s: torch.Tensor, p_s: torch.Tensor, p_t: torch.Tensor) -> torch.Tensor:
    """w_r = w_s + A @ (rescale(p_t) - rescale(p_s)) on the layered latent.

    ``p_s`` and ``p_t`` are raw-unit pose vectors (angles in degrees followed
    by expression coefficients). Differencing after rescaling keeps the shift
    expressed in the common range the directions were trained in.
    """
    wp = to_w_plus(w_s)
    return wp + delta_w(A, rescale(p_t, stats) - rescale(p_s, stats))


def oracle_direction_matrix(generator: ToyGenerator, stats: PoseStats) -> torch.Tensor:
    """Closed-form (512, 15) direction matrix that makes edits exact.

    The generator's attribute read-out and calibration are both affine, so a
    unit step of rescaled attribute j corresponds to a semantic step of
    half_range_j / (bound * calibration_slope_j) along read-out row j.
    """
    slope = torch.cat(
        [
            torch.full((POSE_DIM,), THETA_SCALE, dtype=torch.float64),
            torch.full((EXPR_DIM,), EXPR_SCALE, dtype=torch.float64),
        ]
    )
    return generator.ground_truth_directions(stats.half_range / (stats.bound * slope))
