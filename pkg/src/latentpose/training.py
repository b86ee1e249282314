"""Direction-matrix training: the loss stack and the three schemes.

The direction matrix is the only trainable tensor in the whole loop. Each
iteration samples source/target pairs, reenacts the source toward the
target, and scores the result with a weighted sum of shape, identity and
perceptual terms (plus a pixel term for paired data). Sources are random
codes (SYNTHETIC), a mix of random and inverted codes (MIXED), or
same-identity frame pairs (PAIRED).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import torch

from .directions import DirectionMatrix, PoseStats, reenact_code, rescale, single_attribute_delta, unscale
from .errors import ContractViolation, EmptyPool, TrainingDiverged
from .estimator import FrozenEmbedder, PoseRegressor, identity_loss, perceptual_loss, vector_to_params
from .shape3d import LandmarkPairTable, PoseParams, apply_pose, reconstruct_shape, reenactment_loss
from .toygen import CONTROL_DIM, POSE_DIM, Z_DIM, ToyGenerator, broadcast_latent, derive_seed

SCHEMES = ("SYNTHETIC", "MIXED", "PAIRED")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the training objective; the pixel term is paired-only."""

    reenactment: float = 1.0
    identity: float = 10.0
    perceptual: float = 10.0
    pixel: float = 10.0

    def __post_init__(self):
        for name in ("reenactment", "identity", "perceptual", "pixel"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"loss weight '{name}' must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "SYNTHETIC"
    iterations: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-4
    single_attribute_fraction: float = 0.5
    mixed_real_fraction: float = 0.5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ContractViolation(f"scheme must be one of {SCHEMES}, got '{self.scheme}'")
        if self.iterations < 0 or self.batch_size < 1:
            raise ContractViolation("iterations must be >= 0 and batch_size >= 1")
        for name in ("single_attribute_fraction", "mixed_real_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractViolation(f"{name} must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")


@dataclass
class SamplePools:
    """Optional code pools beyond pure random sampling.

    ``inverted`` holds layered codes recovered from real-analog images;
    ``paired_source``/``paired_target`` hold same-identity, different-pose
    frame pairs row-aligned.
    """

    inverted: torch.Tensor | None = None
    paired_source: torch.Tensor | None = None
    paired_target: torch.Tensor | None = None

    def __post_init__(self):
        if (self.paired_source is None) != (self.paired_target is None):
            raise ContractViolation("paired pool needs both source and target codes")
        if self.paired_source is not None and self.paired_source.shape != self.paired_target.shape:
            raise ContractViolation("paired source/target pools must be row-aligned")


@dataclass
class TargetSpec:
    """What a sampled training element asks the edit to reach.

    ``code`` targets carry a latent whose estimated pose becomes the goal;
    ``single`` targets perturb one rescaled attribute of the source pose.
    """

    kind: str  # "code" | "single"
    code: torch.Tensor | None = None
    attribute: int = 0
    epsilon: float = 0.0


def _random_code(generator: ToyGenerator, rng: torch.Generator) -> torch.Tensor:
    z = torch.randn(1, Z_DIM, generator=rng, dtype=torch.float64)
    return broadcast_latent(generator.map_latent(z)[0])


def sample_training_pair(
    scheme: str,
    rng: torch.Generator,
    generator: ToyGenerator,
    pools: SamplePools,
    single_attribute_fraction: float = 0.5,
    mixed_real_fraction: float = 0.5,
    bound: float = 1.0,
) -> tuple[torch.Tensor, TargetSpec]:
    """Draw one (source code, target spec) element for the given scheme."""
    if scheme not in SCHEMES:
        raise ContractViolation(f"scheme must be one of {SCHEMES}, got '{scheme}'")
    if scheme == "PAIRED":
        if pools.paired_source is None or pools.paired_source.shape[0] == 0:
            raise EmptyPool("paired pool is empty")
        j = int(torch.randint(pools.paired_source.shape[0], (1,), generator=rng))
        return pools.paired_source[j], TargetSpec(kind="code", code=pools.paired_target[j])

    if scheme == "MIXED" and torch.rand((), generator=rng, dtype=torch.float64) < mixed_real_fraction:
        if pools.inverted is None or pools.inverted.shape[0] == 0:
            raise EmptyPool("inverted-code pool is empty")
        j = int(torch.randint(pools.inverted.shape[0], (1,), generator=rng))
        source = pools.inverted[j]
    else:
        source = _random_code(generator, rng)

    if torch.rand((), generator=rng, dtype=torch.float64) < single_attribute_fraction:
        attribute = int(torch.randint(CONTROL_DIM, (1,), generator=rng))
        epsilon = float((2.0 * torch.rand((), generator=rng, dtype=torch.float64) - 1.0) * bound)
        return source, TargetSpec(kind="single", attribute=attribute, epsilon=epsilon)
    return source, TargetSpec(kind="code", code=_random_code(generator, rng))


def posed_shape(shape_model, params: PoseParams) -> torch.Tensor:
    """World-space (..., 68, 3) landmarks for a parameter set."""
    return apply_pose(reconstruct_shape(shape_model, params.identity, params.expression), params.theta)


def hybrid_shape(shape_model, source: PoseParams, target_pose: torch.Tensor) -> torch.Tensor:
    """Goal shape: source identity with the target's expression, posed by the target angles."""
    goal = PoseParams(
        theta=target_pose[..., :POSE_DIM],
        expression=target_pose[..., POSE_DIM:],
        identity=source.identity,
    )
    return posed_shape(shape_model, goal)


def total_loss_unpaired(
    embedder: FrozenEmbedder,
    image_s: torch.Tensor,
    image_r: torch.Tensor,
    shape_r: torch.Tensor,
    shape_gt: torch.Tensor,
    weights: LossWeights,
    pairs: LandmarkPairTable | None = None,
) -> tuple[torch.Tensor, dict]:
    """Weighted sum of shape, identity and perceptual terms with a breakdown."""
    l_r = reenactment_loss(shape_r, shape_gt, pairs).mean()
    l_id = identity_loss(embedder, image_s, image_r)
    l_per = perceptual_loss(embedder, image_s, image_r)
    total = weights.reenactment * l_r + weights.identity * l_id + weights.perceptual * l_per
    breakdown = {
        "reenactment": float(l_r.detach()),
        "identity": float(l_id.detach()),
        "perceptual": float(l_per.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown


def total_loss_paired(
    embedder: FrozenEmbedder,
    image_r: torch.Tensor,
    image_t: torch.Tensor,
    shape_r: torch.Tensor,
    shape_gt: torch.Tensor,
    weights: LossWeights,
    pairs: LandmarkPairTable | None = None,
) -> tuple[torch.Tensor, dict]:
    """Paired objective: compares the reenaction against the real target frame."""
    if image_r.shape != image_t.shape:
        raise ContractViolation(f"image shapes differ: {tuple(image_r.shape)} vs {tuple(image_t.shape)}")
    l_r = reenactment_loss(shape_r, shape_gt, pairs).mean()
    l_id = identity_loss(embedder, image_r, image_t)
    l_per = perceptual_loss(embedder, image_r, image_t)
    l_pix = pixel_loss(image_r, image_t)
    total = (
        weights.reenactment * l_r
        + weights.identity * l_id
        + weights.perceptual * l_per
        + weights.pixel * l_pix
    )
    breakdown = {
        "reenactment": float(l_r.detach()),
        "identity": float(l_id.detach()),
        "perceptual": float(l_per.detach()),
        "pixel": float(l_pix.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown


def pixel_loss(image_a: torch.Tensor, image_b: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference."""
    if image_a.shape != image_b.shape:
        raise ContractViolation(f"image shapes differ: {tuple(image_a.shape)} vs {tuple(image_b.shape)}")
    return (image_a - image_b).abs().mean()


def _target_pose(
    regressor: PoseRegressor,
    generator: ToyGenerator,
    stats: PoseStats,
    specs: list[TargetSpec],
    source_pose: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Raw-unit target pose per element, plus rendered target images when all are codes."""
    goal = rescale(source_pose, stats).clone()
    code_rows = [i for i, s in enumerate(specs) if s.kind == "code"]
    images_t = None
    if code_rows:
        codes = torch.stack([specs[i].code for i in code_rows])
        with torch.no_grad():
            images_t = generator.render(codes)
        p_t = rescale(regressor.estimate(images_t).control_vector(), stats)
        for row, i in enumerate(code_rows):
            goal[i] = p_t[row]
    for i, s in enumerate(specs):
        if s.kind == "single":
            goal[i] = goal[i] + single_attribute_delta(s.attribute, s.epsilon)
    full_images_t = images_t if len(code_rows) == len(specs) else None
    return unscale(goal, stats), full_images_t


def batch_loss(
    generator: ToyGenerator,
    regressor: PoseRegressor,
    embedder: FrozenEmbedder,
    model: DirectionMatrix,
    stats: PoseStats,
    sources: torch.Tensor,
    specs: list[TargetSpec],
    weights: LossWeights,
    paired: bool = False,
) -> tuple[torch.Tensor, dict]:
    """Full objective on one batch; differentiable in the direction matrix only.

    Source poses and target poses are measurements (estimated under no_grad),
    so the gradient path runs through the reenacted latent alone: edit ->
    render -> estimated shape plus the image-space terms.
    """
    with torch.no_grad():
        images_s = generator.render(sources)
    est_s = regressor.estimate(images_s)
    target_pose, images_t = _target_pose(regressor, generator, stats, specs, est_s.control_vector())

    w_r = reenact_code(model, stats, sources, est_s.control_vector(), target_pose)
    images_r = generator.render(w_r)
    shape_r = posed_shape(generator.shape_model, vector_to_params(regressor(images_r)))
    shape_gt = hybrid_shape(generator.shape_model, est_s, target_pose)

    if paired:
        if images_t is None:
            raise ContractViolation("paired loss needs a rendered target frame per element")
        return total_loss_paired(embedder, images_r, images_t, shape_r, shape_gt, weights)
    return total_loss_unpaired(embedder, images_s, images_r, shape_r, shape_gt, weights)


def gradient_audit(
    generator: ToyGenerator,
    regressor: PoseRegressor,
    embedder: FrozenEmbedder,
    model: DirectionMatrix,
    stats: PoseStats,
    sources: torch.Tensor,
    specs: list[TargetSpec],
    weights: LossWeights | None = None,
    entries: int = 32,
    step: float = 1e-4,
    seed: int = 0,
    paired: bool = False,
) -> dict:
    """Check analytic dLoss/dA against central finite differences.

    Evaluates ``entries`` randomly chosen matrix entries on the fixed batch
    in double precision and reports the worst and median relative error
    (denominator floored well below any real gradient magnitude, so a
    zero-vs-zero comparison cannot divide by zero).
    """
    weights = weights or LossWeights()
    total, _ = batch_loss(generator, regressor, embedder, model, stats, sources, specs, weights, paired)
    (analytic,) = torch.autograd.grad(total, model.A)

    rng = torch.Generator().manual_seed(derive_seed(seed, "gradient-audit"))
    chosen = torch.randperm(model.A.numel(), generator=rng)[:entries]
    floor = 1e-8 * max(1.0, float(analytic.abs().max()))
    errors = []
    with torch.no_grad():
        for flat in chosen.tolist():
            i, j = divmod(flat, model.A.shape[1])
            original = float(model.A[i, j])
            values = []
            for sign in (1.0, -1.0):
                model.A[i, j] = original + sign * step
                value, _ = batch_loss(
                    generator, regressor, embedder, model, stats, sources, specs, weights, paired
                )
                values.append(float(value))
            model.A[i, j] = original
            numeric = (values[0] - values[1]) / (2.0 * step)
            reference = float(analytic[i, j])
            denom = max(abs(numeric), abs(reference), floor)
            errors.append(abs(numeric - reference) / denom)
    ranked = sorted(errors)
    return {
        "entries": entries,
        "step": step,
        "worst_rel_err": ranked[-1],
        "median_rel_err": ranked[len(ranked) // 2],
    }


def _run_training(
    generator: ToyGenerator,
    regressor: PoseRegressor,
    embedder: FrozenEmbedder,
    model: DirectionMatrix,
    stats: PoseStats,
    config: TrainConfig,
    pools: SamplePools,
) -> list[dict]:
    """Shared optimizer loop; mutates ``model.A`` in place, returns the log."""
    rng = torch.Generator().manual_seed(derive_seed(config.seed, f"directions-{config.scheme}"))
    optimizer = torch.optim.Adam([model.A], lr=config.learning_rate)
    log: list[dict] = []

    frozen = [p for m in (generator, regressor, embedder) for p in m.parameters()]
    saved_flags = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad_(False)
    try:
        for iteration in range(config.iterations):
            drawn = [
                sample_training_pair(
                    config.scheme,
                    rng,
                    generator,
                    pools,
                    config.single_attribute_fraction,
                    config.mixed_real_fraction,
                    stats.bound,
                )
                for _ in range(config.batch_size)
            ]
            sources = torch.stack([s for s, _ in drawn])
            specs = [spec for _, spec in drawn]
            total, breakdown = batch_loss(
                generator,
                regressor,
                embedder,
                model,
                stats,
                sources,
                specs,
                config.weights,
                paired=config.scheme == "PAIRED",
            )
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"direction training hit a non-finite loss at iteration {iteration}", iteration=iteration
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            log.append({"iteration": iteration, **breakdown, "wall_time": time.time()})
    finally:
        for p, flag in zip(frozen, saved_flags):
            p.requires_grad_(flag)
    return log


def train_directions(
    generator: ToyGenerator,
    regressor: PoseRegressor,
    embedder: FrozenEmbedder,
    stats: PoseStats,
    config: TrainConfig,
    pools: SamplePools | None = None,
) -> tuple[DirectionMatrix, list[dict]]:
    """Optimize a fresh direction matrix under the configured scheme.

    Only the direction matrix receives updates; generator, regressor and
    embedder weights are bit-identical before and after. Deterministic for
    a fixed config and seed.
    """
    if config.scheme == "PAIRED":
        raise ContractViolation("PAIRED runs fine-tune an existing matrix; use finetune_paired")
    pools = pools or SamplePools()
    model = DirectionMatrix(seed=config.seed, stats=stats)
    log = _run_training(generator, regressor, embedder, model, stats, config, pools)
    return model, log


def finetune_paired(
    generator: ToyGenerator,
    regressor: PoseRegressor,
    embedder: FrozenEmbedder,
    model: DirectionMatrix,
    pools: SamplePools,
    config: TrainConfig,
) -> tuple[DirectionMatrix, list[dict]]:
    """Continue training a copy of ``model`` on same-identity frame pairs."""
    if pools.paired_source is None or pools.paired_source.shape[0] == 0:
        raise EmptyPool("paired pool is empty")
    if model.stats is None:
        raise ContractViolation("direction matrix carries no calibration stats")
    config = replace(config, scheme="PAIRED")
    tuned = model.snapshot()
    log = _run_training(generator, regressor, embedder, tuned, model.stats, config, pools)
    return tuned, log
