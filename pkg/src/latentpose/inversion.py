"""Embedding real-analog images into the layered latent space.

Photographs carry no latent code, so editing one takes three pieces: a
surrogate corpus of "real" frames whose generating code is known but kept
aside for tests, an encoder that regresses an image to a layered latent,
and a short per-image polish of the generator's appearance parameters
that closes the remaining reconstruction gap without moving the inverted
code. Corpus frames are renders of held-out codes plus seeded pixel
noise and a smooth background ramp, the minimal perturbation pair that
opens a measurable domain gap between inverted and sampled codes.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .errors import ContractViolation, TrainingDiverged, TrainingFailure
from .estimator import (
    FrozenEmbedder,
    identity_loss,
    perceptual_loss,
)
from .toygen import (
    CONTROL_DIM,
    IMAGE_SIZE,
    LATENT_DIM,
    N_LAYERS,
    W_DIM,
    ToyGenerator,
    broadcast_latent,
    derive_seed,
    sample_z,
    to_w_plus,
)

NOISE_STD = 0.01
RAMP_AMPLITUDE = 0.05  # per-channel, per-axis slope bound of the background ramp


def _seeded(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed % (2**63))


def _ramp_field(gen: torch.Generator) -> torch.Tensor:
    slopes = (torch.rand(2, 3, generator=gen, dtype=torch.float64) * 2.0 - 1.0) * RAMP_AMPLITUDE
    axis = torch.arange(IMAGE_SIZE, dtype=torch.float64) / (IMAGE_SIZE - 1) - 0.5
    return slopes[0].reshape(3, 1, 1) * axis.reshape(1, 1, IMAGE_SIZE) + slopes[1].reshape(
        3, 1, 1
    ) * axis.reshape(1, IMAGE_SIZE, 1)


def _noise_field(gen: torch.Generator) -> torch.Tensor:
    return NOISE_STD * torch.randn(3, IMAGE_SIZE, IMAGE_SIZE, generator=gen, dtype=torch.float64)


def perturbation_field(item_seed: int) -> torch.Tensor:
    """Seeded (3, 64, 64) corruption: linear ramp plus white noise.

    The ramp coefficients and the noise come from one per-item stream, so
    a corpus item is reproducible from its recorded seed alone.
    """
    gen = _seeded(item_seed)
    return _ramp_field(gen) + _noise_field(gen)


@dataclass(frozen=True)
class RealAnalogCorpus:
    """Perturbed renders standing in for real frames.

    ``hidden_codes`` is a test oracle: the pipeline must treat corpus
    images as opaque observations and never read it outside tests.
    Images are not clipped to [0, 1]; the perturbation may spill a little
    past the render range, and quantization happens only on PNG export.
    """

    images: torch.Tensor  # (n, 3, 64, 64) float64
    item_seeds: tuple[int, ...]
    hidden_codes: torch.Tensor  # (n, 8, 64) float64
    seed: int

    def __post_init__(self):
        n = self.images.shape[0]
        if self.images.shape != (n, 3, IMAGE_SIZE, IMAGE_SIZE):
            raise ContractViolation(f"corpus images have shape {tuple(self.images.shape)}")
        if self.hidden_codes.shape != (n, N_LAYERS, W_DIM) or len(self.item_seeds) != n:
            raise ContractViolation("corpus rows must align across images, seeds, and codes")

    def __len__(self) -> int:
        return self.images.shape[0]


def save_corpus(corpus: RealAnalogCorpus, path: str | Path) -> None:
    Checkpoint(
        "real_corpus",
        meta={"seed": corpus.seed, "item_seeds": list(corpus.item_seeds)},
        tensors={
            "images": corpus.images.numpy(),
            "hidden_codes": corpus.hidden_codes.numpy(),
        },
    ).save(path)


def load_corpus(path: str | Path) -> RealAnalogCorpus:
    ckpt = Checkpoint.load(path, expect_kind="real_corpus")
    return RealAnalogCorpus(
        images=torch.from_numpy(ckpt.tensors["images"]),
        item_seeds=tuple(int(s) for s in ckpt.meta["item_seeds"]),
        hidden_codes=torch.from_numpy(ckpt.tensors["hidden_codes"]),
        seed=int(ckpt.meta["seed"]),
    )


def build_real_corpus(generator: ToyGenerator, n: int, seed: int) -> RealAnalogCorpus:
    """Render ``n`` held-out codes and corrupt each with its own seeded field.

    The code stream uses a corpus-specific purpose tag, so it never
    collides with any training or calibration draw at the same root seed.
    """
    if n < 1:
        raise ContractViolation(f"corpus size must be >= 1, got {n}")
    z = sample_z(n, derive_seed(seed, "real-corpus-codes"))
    codes = broadcast_latent(generator.map_latent(z)).contiguous()
    images = generator.render_batched(codes, chunk=32)
    item_seeds = tuple(derive_seed(seed, f"real-corpus-item-{i}") for i in range(n))
    for i in range(n):
        images[i] += perturbation_field(item_seeds[i])
    return RealAnalogCorpus(images=images, item_seeds=item_seeds, hidden_codes=codes, seed=seed)


# (channels, stride) per conv layer; the head flattens what is left.
_ENC_LAYERS = ((16, 2), (32, 2), (64, 2), (96, 2))


class Encoder(torch.nn.Module):
    """Convolutional regressor from an image to a layered latent code."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed
        gen = torch.Generator().manual_seed(derive_seed(seed, "encoder-init"))

        def conv(c_in, c_out, stride):
            layer = torch.nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, dtype=torch.float64)
            with torch.no_grad():
                w = torch.randn(layer.weight.shape, generator=gen, dtype=torch.float64)
                layer.weight.copy_(w * (2.0 / (c_in * 9)) ** 0.5)
                layer.bias.zero_()
            return layer

        c_in, size = 3, IMAGE_SIZE
        stack = []
        for c_out, stride in _ENC_LAYERS:
            stack.append(conv(c_in, c_out, stride))
            c_in, size = c_out, size // stride
        self.stack = torch.nn.ModuleList(stack)
        self.head = torch.nn.Linear(c_in * size * size, LATENT_DIM, dtype=torch.float64)
        with torch.no_grad():
            w = torch.randn(self.head.weight.shape, generator=gen, dtype=torch.float64)
            self.head.weight.copy_(w * 0.01 * (c_in * size * size) ** -0.5)
            self.head.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Image (..., 3, 64, 64) -> layered code (..., 8, 64)."""
        lead = image.shape[:-3]
        x = image.reshape(-1, 3, IMAGE_SIZE, IMAGE_SIZE).to(self.head.weight.dtype)
        for layer in self.stack:
            x = F.gelu(layer(x))
        code = self.head(x.reshape(x.shape[0], -1))
        return code.reshape(*lead, N_LAYERS, W_DIM)

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        tensors = {name: t.detach().numpy() for name, t in self.state_dict().items()}
        Checkpoint("encoder", meta={"seed": self.seed, **(meta or {})}, tensors=tensors).save(path)

    @classmethod
    def load(cls, path: str | Path) -> "Encoder":
        ckpt = Checkpoint.load(path, expect_kind="encoder")
        model = cls(seed=int(ckpt.meta["seed"]))
        model.load_state_dict({name: torch.from_numpy(a) for name, a in ckpt.tensors.items()})
        return model


def invert(encoder: Encoder, image: torch.Tensor) -> torch.Tensor:
    """Single detached forward pass; (..., 3, 64, 64) -> (..., 8, 64)."""
    with torch.no_grad():
        return encoder(image).detach()


def invert_corpus(encoder: Encoder, corpus: RealAnalogCorpus, chunk: int = 64) -> torch.Tensor:
    """Invert every corpus frame, (n, 8, 64); feeds the mixed-scheme pool."""
    parts = [invert(encoder, corpus.images[i : i + chunk]) for i in range(0, len(corpus), chunk)]
    return torch.cat(parts)


def _augmented_renders(
    gen32: ToyGenerator, codes: torch.Tensor, seed: int, chunk: int = 64
) -> torch.Tensor:
    """Float32 renders for encoder training, every other one corrupted.

    The clean half keeps the exact-render inversion sharp; the corrupted
    half teaches invariance to the corpus perturbations.
    """
    images = gen32.render_batched(codes, chunk=chunk)
    for i in range(1, images.shape[0], 2):
        images[i] += perturbation_field(derive_seed(seed, f"augment-{i}")).float()
    return images


def train_encoder(
    generator: ToyGenerator,
    corpus: RealAnalogCorpus,
    seed: int = 0,
    warmup_size: int = 4096,
    warmup_steps: int = 4000,
    recon_steps: int = 800,
    batch_size: int = 32,
    lr: float = 1e-3,
    holdout_fraction: float = 0.25,
    max_pixel_l1: float = 0.03,
    embedder: FrozenEmbedder | None = None,
    enforce_target: bool = True,
) -> tuple[Encoder, dict]:
    """Fit the encoder and gate it on held-out reconstruction error.

    Training runs in two phases. A warm-up regresses corrupted renders of
    freshly sampled codes onto their layered latents, which solves the
    alignment problem cheaply because supervision is free from the
    generator. The main phase then minimizes the reconstruction
    objective, pixel L1 plus perceptual and identity terms between
    re-rendered inversions and the corpus frames themselves. The held-out
    split of the corpus never reaches the optimizer; its final pixel L1
    must come in under ``max_pixel_l1`` or training fails with the
    achieved value.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise ContractViolation("holdout_fraction must lie strictly between 0 and 1")
    if warmup_size < batch_size or recon_steps < 0 or warmup_steps < 0:
        raise ContractViolation("training sizes must cover at least one batch")
    n = len(corpus)
    n_hold = max(1, round(n * holdout_fraction)) if n > 1 else 1
    n_train = max(n - n_hold, 1)  # a 1-frame corpus trains and validates on that frame
    train_images = corpus.images[:n_train].float()
    hold_images = corpus.images[n - n_hold :]

    master = Encoder(seed=seed)
    work = master.float()
    gen32 = generator.clone().float()
    emb32 = copy.deepcopy(embedder if embedder is not None else FrozenEmbedder(seed=0)).float()

    with torch.no_grad():
        wz = sample_z(warmup_size, derive_seed(seed, "encoder-warmup"))
        wcodes = broadcast_latent(generator.map_latent(wz)).float().contiguous()
        winputs = _augmented_renders(gen32, wcodes, derive_seed(seed, "encoder-warmup-noise"))
        wtargets = wcodes.reshape(warmup_size, LATENT_DIM)

    for p in work.parameters():
        p.requires_grad_(True)

    optim = torch.optim.Adam(work.parameters(), lr=lr)
    schedule = torch.optim.lr_scheduler.CosineAnnealingLR(
        optim, T_max=max(warmup_steps, 1), eta_min=lr * 0.05
    )
    draw = torch.Generator().manual_seed(derive_seed(seed, "encoder-warmup-batches"))
    for step in range(warmup_steps):
        idx = torch.randint(0, warmup_size, (batch_size,), generator=draw)
        loss = F.mse_loss(work(winputs[idx]).reshape(batch_size, LATENT_DIM), wtargets[idx])
        if not torch.isfinite(loss):
            raise TrainingDiverged("encoder warm-up loss became non-finite", iteration=step)
        optim.zero_grad()
        loss.backward()
        optim.step()
        schedule.step()
    del winputs, wtargets, wcodes

    optim = torch.optim.Adam(work.parameters(), lr=lr * 0.1)
    schedule = torch.optim.lr_scheduler.CosineAnnealingLR(
        optim, T_max=max(recon_steps, 1), eta_min=lr * 0.005
    )
    draw = torch.Generator().manual_seed(derive_seed(seed, "encoder-recon-batches"))
    for step in range(recon_steps):
        idx = torch.randint(0, n_train, (batch_size,), generator=draw)
        frames = train_images[idx]
        recon = gen32.render(work(frames))
        loss = (
            10.0 * (recon - frames).abs().mean()
            + perceptual_loss(emb32, recon, frames)
            + identity_loss(emb32, recon, frames)
        )
        if not torch.isfinite(loss):
            raise TrainingDiverged("encoder reconstruction loss became non-finite", iteration=step)
        optim.zero_grad()
        loss.backward()
        optim.step()
        schedule.step()

    master = work.double()
    for p in master.parameters():
        p.requires_grad_(False)

    with torch.no_grad():
        recon = generator.render_batched(invert(master, hold_images))
        pixel_l1 = float((recon - hold_images).abs().mean())
    report = {
        "pixel_l1": pixel_l1,
        "target_l1": max_pixel_l1,
        "train_size": n_train,
        "holdout_size": n_hold,
        "warmup_steps": warmup_steps,
        "recon_steps": recon_steps,
    }
    if enforce_target and pixel_l1 >= max_pixel_l1:
        raise TrainingFailure(
            f"held-out reconstruction L1 {pixel_l1:.5f} misses target {max_pixel_l1:.5f}",
            achieved=pixel_l1,
        )
    return master, report


def build_paired_pool(
    generator: ToyGenerator,
    encoder: Encoder,
    n_pairs: int,
    seed: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Same-identity frame pairs, inverted; row-aligned (n, 8, 64) tensors.

    Each pair is two frames of one synthetic subject: the partner keeps
    the base frame's identity and nuisance read-out but takes its pose
    and expression from an independent draw, the way two frames of one
    video share a face and a background while the head moves. Both frames
    get corpus-style corruption with a shared ramp (one scene, one
    lighting) and per-frame noise, then go through the encoder.
    """
    if n_pairs < 1:
        raise ContractViolation(f"pair count must be >= 1, got {n_pairs}")
    z = sample_z(2 * n_pairs, derive_seed(seed, "paired-codes"))
    w = broadcast_latent(generator.map_latent(z))
    base, donor = w[:n_pairs].contiguous(), w[n_pairs:]
    delta_q = generator.semantic_vector(donor) - generator.semantic_vector(base)
    delta_q[:, CONTROL_DIM:] = 0.0  # identity and nuisance stay with the base frame
    basis = generator.semantic_basis.detach()
    partner = (base.reshape(n_pairs, LATENT_DIM) + delta_q @ basis).reshape(
        n_pairs, N_LAYERS, W_DIM
    )

    frames_a = generator.render_batched(base, chunk=32)
    frames_b = generator.render_batched(partner, chunk=32)
    for i in range(n_pairs):
        ramp = _ramp_field(_seeded(derive_seed(seed, f"paired-scene-{i}")))
        noise = _seeded(derive_seed(seed, f"paired-noise-{i}"))
        frames_a[i] += ramp + _noise_field(noise)
        frames_b[i] += ramp + _noise_field(noise)
    return invert(encoder, frames_a), invert(encoder, frames_b)


def pivotal_tune(
    generator: ToyGenerator,
    image: torch.Tensor,
    w_inv: torch.Tensor,
    steps: int = 200,
    lr: float = 1e-3,
    embedder: FrozenEmbedder | None = None,
) -> ToyGenerator:
    """Polish a private generator copy around one frame; the code is fixed.

    Only the renderer-appearance subset moves; mapping and read-out stay
    frozen so edit directions keep their meaning. The returned copy is
    the best state seen under pixel L1 plus perceptual loss at ``w_inv``,
    which is strictly below the untuned loss whenever any step improved.
    The input generator and ``w_inv`` are never modified.
    """
    if steps < 0:
        raise ContractViolation(f"step count must be >= 0, got {steps}")
    tuned = generator.clone()
    if steps == 0:
        return tuned

    emb = embedder if embedder is not None else FrozenEmbedder(seed=0)
    target = image.detach().reshape(-1, 3, IMAGE_SIZE, IMAGE_SIZE).to(torch.float64)
    code = to_w_plus(w_inv).detach().clone()
    params = [getattr(tuned, name) for name in ToyGenerator.TUNABLE]
    for p in params:
        p.requires_grad_(True)
    optim = torch.optim.Adam(params, lr=lr)

    def objective() -> torch.Tensor:
        recon = tuned.render(code)
        return (recon - target).abs().mean() + perceptual_loss(emb, recon, target)

    best_loss = float("inf")
    best_state: list[torch.Tensor] = []
    for step in range(steps + 1):  # one extra evaluation so the final step counts
        loss = objective()
        if not torch.isfinite(loss):
            raise TrainingDiverged("pivotal tuning loss became non-finite", iteration=step)
        if float(loss.detach()) < best_loss:
            best_loss = float(loss.detach())
            best_state = [p.detach().clone() for p in params]
        if step == steps:
            break
        optim.zero_grad()
        loss.backward()
        optim.step()

    with torch.no_grad():
        for p, best in zip(params, best_state):
            p.copy_(best)
    for p in params:
        p.requires_grad_(False)
    return tuned
