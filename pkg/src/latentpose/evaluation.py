"""Metric battery and analysis reports for reenactment quality.

Landmark error, pose and expression errors, identity cosine similarity,
a subspace-angle oracle for direction matrices, and the two analysis
loops: linearity of edit magnitude and single-attribute disentanglement.
Landmarks and poses come from this artifact's own estimator chain, so
absolute numbers are comparable only within the artifact; distribution-
level image metrics (FID, FVD, LPIPS) are deliberately absent rather
than approximated, and reports say so.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import torch

from .directions import PoseStats, delta_w, reenact_code, single_attribute_delta
from .errors import ContractViolation
from .estimator import FrozenEmbedder, PoseRegressor, params_to_vector
from .shape3d import PoseParams
from .toygen import (
    ATTRIBUTE_NAMES,
    CONTROL_DIM,
    ToyGenerator,
    broadcast_latent,
    derive_seed,
    sample_z,
)

_METRIC_KEYS = ("csim", "pose_l1_deg", "exp_l1", "nme")
_AGGREGATE_TOL = 1e-10


def nme(pred: torch.Tensor, gt: torch.Tensor, gt_bbox: tuple[float, float]) -> float:
    """Mean landmark distance, normalized by the bbox geometric mean, x1e3."""
    pred = torch.as_tensor(pred, dtype=torch.float64)
    gt = torch.as_tensor(gt, dtype=torch.float64)
    if pred.shape != gt.shape or pred.dim() != 2 or pred.shape[-1] != 2:
        raise ContractViolation(f"landmark sets must share a (n, 2) shape, got {tuple(pred.shape)} vs {tuple(gt.shape)}")
    w, h = float(gt_bbox[0]), float(gt_bbox[1])
    if w * h <= 0.0:
        raise ContractViolation(f"bounding box must have positive area, got {w} x {h}")
    dist = (pred - gt).pow(2).sum(dim=-1).sqrt().mean()
    return float(dist / (w * h) ** 0.5 * 1e3)


def pose_error(p_a, p_b) -> float:
    """Mean absolute head-angle difference in degrees."""
    return float((p_a.theta - p_b.theta).abs().mean())


def expression_error(p_a, p_b) -> float:
    """Mean absolute expression-coefficient difference."""
    return float((p_a.expression - p_b.expression).abs().mean())


def csim(embedder: FrozenEmbedder, image_a: torch.Tensor, image_b: torch.Tensor) -> float:
    """Identity-embedding cosine similarity in [-1, 1], batch-averaged."""
    e_a = embedder.identity_embedding(image_a)
    e_b = embedder.identity_embedding(image_b)
    return float((e_a * e_b).sum(dim=-1).mean())


def landmark_bbox(landmarks: torch.Tensor) -> tuple[float, float]:
    """Tight (width, height) box around one (n, 2) landmark set."""
    spans = landmarks.max(dim=-2).values - landmarks.min(dim=-2).values
    return float(spans[0]), float(spans[1])


def principal_angles(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Angles in degrees between the column spaces of two matrices.

    Computed from the singular values of Q_a^T Q_b after orthonormalizing
    each matrix's columns; sorted ascending, one angle per column.
    """
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.dim() != 2 or b.dim() != 2 or a.shape[0] != b.shape[0] or a.shape[1] != b.shape[1]:
        raise ContractViolation(f"column spaces must match in shape, got {tuple(a.shape)} vs {tuple(b.shape)}")
    qa, _ = torch.linalg.qr(a)
    qb, _ = torch.linalg.qr(b)
    sigma = torch.linalg.svdvals(qa.T @ qb).clamp(-1.0, 1.0)
    return torch.rad2deg(torch.acos(sigma))


@dataclass(frozen=True)
class EvalReport:
    """Per-pair metric records plus their means and any analysis blobs."""

    mode: str
    records: tuple[dict, ...]
    aggregates: dict
    analyses: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.records:
            raise ContractViolation("a report needs at least one record")
        for key in _METRIC_KEYS:
            mean = sum(r[key] for r in self.records) / len(self.records)
            if abs(mean - self.aggregates[f"mean_{key}"]) > _AGGREGATE_TOL:
                raise ContractViolation(f"aggregate mean_{key} does not match its records")

    @classmethod
    def from_records(cls, mode: str, records: list[dict], analyses: dict | None = None) -> "EvalReport":
        if not records:
            raise ContractViolation("a report needs at least one record")
        aggregates = {
            f"mean_{key}": sum(r[key] for r in records) / len(records) for key in _METRIC_KEYS
        }
        return cls(mode=mode, records=tuple(records), aggregates=aggregates, analyses=analyses or {})

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "records": list(self.records),
            "aggregates": dict(self.aggregates),
            "analyses": dict(self.analyses),
            "omitted_metrics": "FID/FVD/LPIPS need large pretrained nets and are not reported",
        }

    def records_csv(self) -> str:
        out = io.StringIO()
        out.write("pair," + ",".join(_METRIC_KEYS) + "\n")
        for i, record in enumerate(self.records):
            out.write(f"{i}," + ",".join(f"{record[k]:.9g}" for k in _METRIC_KEYS) + "\n")
        return out.getvalue()

    def to_text(self) -> str:
        lines = [
            f"reenactment evaluation, mode={self.mode}, pairs={len(self.records)}",
            "landmarks/poses come from the internal estimator; numbers are",
            "comparable only within this artifact. FID/FVD/LPIPS omitted.",
            "",
            f"{'pair':>6} {'csim':>10} {'pose_l1_deg':>12} {'exp_l1':>10} {'nme':>10}",
        ]
        for i, r in enumerate(self.records):
            lines.append(
                f"{i:>6} {r['csim']:>10.4f} {r['pose_l1_deg']:>12.4f} {r['exp_l1']:>10.4f} {r['nme']:>10.4f}"
            )
        lines.append("")
        lines.append(
            "means: "
            + "  ".join(f"{k}={self.aggregates[f'mean_{k}']:.4f}" for k in _METRIC_KEYS)
        )
        for name in sorted(self.analyses):
            lines.append(f"analysis[{name}]: {json.dumps(self.analyses[name], sort_keys=True)}")
        return "\n".join(lines) + "\n"


def run_eval(
    generator: ToyGenerator,
    regressor: PoseRegressor,
    embedder: FrozenEmbedder,
    model,
    stats: PoseStats,
    sources: torch.Tensor,
    targets: torch.Tensor | None,
    mode: str,
    chunk: int = 32,
    source_frames: torch.Tensor | None = None,
    target_frames: torch.Tensor | None = None,
) -> EvalReport:
    """Reenact each source with its target's pose and score the result.

    ``sources``/``targets`` are layered codes; ``source_frames`` and
    ``target_frames`` optionally supply the reference images instead of
    rendering the codes, which is how real-analog frames enter (their
    inverted codes drive the edit while estimates come from the frames
    themselves; ``targets`` may then be omitted). Pose and expression
    errors compare the reenactment against the target estimate. Identity
    similarity follows the mode convention: self-reenactment scores
    against the target frame (same subject), cross-subject against the
    source, whose face must survive the edit. Records keep pair order.
    """
    if mode not in ("self", "cross"):
        raise ContractViolation(f"mode must be 'self' or 'cross', got {mode!r}")
    if sources.dim() != 3 or sources.shape[0] < 1:
        raise ContractViolation("pair list must hold at least one layered source code")
    n = sources.shape[0]
    if targets is None and target_frames is None:
        raise ContractViolation("need target codes or target frames")
    if targets is not None and targets.shape != sources.shape:
        raise ContractViolation("sources and targets must be row-aligned")
    for frames in (source_frames, target_frames):
        if frames is not None and (frames.dim() != 4 or frames.shape[0] != n):
            raise ContractViolation("reference frames must be one image per pair")

    records: list[dict] = []
    with torch.no_grad():
        for lo in range(0, n, chunk):
            w_s = sources[lo : lo + chunk]
            i_s = (
                source_frames[lo : lo + chunk] if source_frames is not None else generator.render(w_s)
            )
            i_t = (
                target_frames[lo : lo + chunk]
                if target_frames is not None
                else generator.render(targets[lo : lo + chunk])
            )
            est_s = regressor.estimate(i_s)
            est_t = regressor.estimate(i_t)
            w_r = reenact_code(model, stats, w_s, est_s.control_vector(), est_t.control_vector())
            i_r = generator.render(w_r)
            est_r = regressor.estimate(i_r)
            lm_r = regressor.landmarks_of(params_to_vector(est_r))
            lm_t = regressor.landmarks_of(params_to_vector(est_t))
            ref = i_t if mode == "self" else i_s
            for j in range(w_s.shape[0]):
                one_r = PoseParams(est_r.theta[j], est_r.expression[j], est_r.identity[j])
                one_t = PoseParams(est_t.theta[j], est_t.expression[j], est_t.identity[j])
                records.append(
                    {
                        "csim": csim(embedder, i_r[j], ref[j]),
                        "pose_l1_deg": pose_error(one_r, one_t),
                        "exp_l1": expression_error(one_r, one_t),
                        "nme": nme(lm_r[j], lm_t[j], landmark_bbox(lm_t[j])),
                    }
                )
    return EvalReport.from_records(mode, records)


_ANALYSIS_ATTRIBUTES = ("yaw", "pitch", ATTRIBUTE_NAMES[3], ATTRIBUTE_NAMES[4])


def linearity_analysis(
    generator: ToyGenerator,
    regressor: PoseRegressor,
    model,
    stats: PoseStats,
    n_edits: int,
    seed: int,
    chunk: int = 64,
) -> dict[str, float]:
    """Pearson correlation of latent-shift size against achieved change.

    For each analyzed attribute (both pose axes and the two mouth-heavy
    expression coordinates) random sources get single-attribute edits of
    random magnitude; the correlation pairs the latent norm ||A e_i eps||
    with the estimated attribute change. Fewer than 30 edits would make
    the correlation estimate meaningless, so that is refused.
    """
    if n_edits < 30:
        raise ContractViolation(f"need at least 30 edits for a stable correlation, got {n_edits}")
    out: dict[str, float] = {}
    with torch.no_grad():
        for name in _ANALYSIS_ATTRIBUTES:
            index = ATTRIBUTE_NAMES.index(name)
            z = sample_z(n_edits, derive_seed(seed, f"linearity-{name}"))
            w = broadcast_latent(generator.map_latent(z))
            draw = torch.Generator().manual_seed(derive_seed(seed, f"linearity-{name}-eps"))
            eps = (torch.rand(n_edits, generator=draw, dtype=torch.float64) * 2.0 - 1.0) * stats.bound
            unit = delta_w(model, single_attribute_delta(index, 1.0))
            w_edit = w + eps.reshape(-1, 1, 1) * unit
            changes = []
            for lo in range(0, n_edits, chunk):
                p_src = regressor.estimate(generator.render(w[lo : lo + chunk])).control_vector()
                p_edit = regressor.estimate(generator.render(w_edit[lo : lo + chunk])).control_vector()
                changes.append((p_edit[:, index] - p_src[:, index]).abs())
            sizes = eps.abs() * unit.norm()
            stacked = torch.stack([sizes, torch.cat(changes)])
            out[name] = float(torch.corrcoef(stacked)[0, 1])
    return out


def disentanglement_report(
    generator: ToyGenerator,
    regressor: PoseRegressor,
    model,
    stats: PoseStats,
    attribute_index: int,
    n: int,
    seed: int,
    magnitude_scale: float = 1.0,
    chunk: int = 64,
) -> dict:
    """Transfer one attribute across random pairs; tabulate the side effects.

    Each pair reenacts a source toward a target pose that differs only in
    the chosen attribute. The report lists, per other attribute, the
    median absolute change and that change as a fraction of the
    calibrated range, plus how much of the requested change the edit
    achieved. ``magnitude_scale`` scales the requested delta (0 gives the
    zero-edit control).
    """
    if not 0 <= attribute_index < CONTROL_DIM:
        raise ContractViolation(f"attribute index must be in [0, {CONTROL_DIM}), got {attribute_index}")
    if n < 1:
        raise ContractViolation(f"pair count must be >= 1, got {n}")
    z = sample_z(2 * n, derive_seed(seed, "disentanglement"))
    w = broadcast_latent(generator.map_latent(z))
    w_s, w_t = w[:n], w[n:]
    ranges = (stats.high - stats.low).double()

    p_s_parts, deltas_parts, requested_parts = [], [], []
    with torch.no_grad():
        for lo in range(0, n, chunk):
            ws, wt = w_s[lo : lo + chunk], w_t[lo : lo + chunk]
            p_s = regressor.estimate(generator.render(ws)).control_vector()
            p_t = regressor.estimate(generator.render(wt)).control_vector()
            p_goal = p_s.clone()
            p_goal[:, attribute_index] += magnitude_scale * (
                p_t[:, attribute_index] - p_s[:, attribute_index]
            )
            w_r = reenact_code(model, stats, ws, p_s, p_goal)
            p_r = regressor.estimate(generator.render(w_r)).control_vector()
            p_s_parts.append(p_s)
            deltas_parts.append(p_r - p_s)
            requested_parts.append(p_goal[:, attribute_index] - p_s[:, attribute_index])
    deltas = torch.cat(deltas_parts)
    requested = torch.cat(requested_parts)

    off_target = {}
    for j, name in enumerate(ATTRIBUTE_NAMES):
        if j == attribute_index:
            continue
        median = float(deltas[:, j].abs().median())
        off_target[name] = {
            "median_abs_delta": median,
            "range": float(ranges[j]),
            "fraction_of_range": median / float(ranges[j]),
        }
    median_requested = float(requested.abs().median())
    if median_requested > 1e-12:
        achieved = float((deltas[:, attribute_index] / requested).median())
    else:
        achieved = float("nan")
    return {
        "attribute": ATTRIBUTE_NAMES[attribute_index],
        "attribute_index": attribute_index,
        "n_pairs": n,
        "off_target": off_target,
        "achieved_median_fraction": achieved,
        "median_requested": median_requested,
    }
