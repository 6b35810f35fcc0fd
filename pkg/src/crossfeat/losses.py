"""Joint supervised + self-supervised training objective.

The total objective is

    total = sl + lam * (ssl_vis + ssl_ir)

where ``sl`` evaluates the base detect-and-describe loss on a real
cross-modality pair under its ground-truth correspondence, and each
``ssl`` term evaluates the same base loss on one modality image paired
with a randomly transformed copy of itself (an independent transform per
term), using the transform's homography as ground truth.

The base loss is a score-weighted triplet margin ranking loss over
sampled correspondences with in-batch hardest-negative mining; any
callable with the same ``(out_a, out_b, batch)`` signature can be
substituted for it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datasets import ImagePair
from .model import FeatureNet, FeatureOutput, describe_at, score_at
from .transforms import (
    CorrespondenceMap,
    TransformConfig,
    apply_geometric,
    apply_photometric,
    map_points,
    sample_transform,
)

DEFAULT_MARGIN = 1.0
DEFAULT_SAFE_RADIUS = 8.0
DEFAULT_N_CORRESPONDENCES = 128
_SAMPLE_ROUNDS = 50


class LossError(ValueError):
    """Raised for unusable correspondence geometry or bad arguments."""


@dataclass(frozen=True)
class CorrespondenceBatch:
    """Paired sample points (p, U(p)) with a per-point validity mask."""

    points_a: np.ndarray  # (N, 2)
    points_b: np.ndarray  # (N, 2)
    mask: np.ndarray  # (N,) bool
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.points_a)


@dataclass(frozen=True)
class LossBreakdown:
    """One evaluation of the joint objective, as plain floats for logging.

    ``total`` is always computed as sl + lam * (ssl_vis + ssl_ir) from the
    other fields, so the identity holds exactly at this precision.
    """

    total: float
    sl: float
    ssl_vis: float
    ssl_ir: float
    lam: float
    n_correspondences_used: tuple[int, int, int]

    def __post_init__(self):
        for name in ("total", "sl", "ssl_vis", "ssl_ir"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise LossError(f"loss term {name} is not finite and nonnegative: {v}")


def sample_correspondences(
    corr: CorrespondenceMap,
    n: int,
    rng: np.random.Generator,
) -> CorrespondenceBatch:
    """Draw n point pairs (p, U(p)) with U(p) inside the target bounds.

    Rejection-samples p uniformly over the source rectangle; after a fixed
    number of rounds the batch is returned short with ``truncated`` set.
    An empty valid region raises.
    """
    if n < 1:
        raise LossError(f"need n >= 1 correspondences, got {n}")
    h, w = corr.source_size
    pts_a = np.zeros((0, 2))
    pts_b = np.zeros((0, 2))
    for _ in range(_SAMPLE_ROUNDS):
        cand = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
        mapped, valid = map_points(cand, corr)
        pts_a = np.vstack([pts_a, cand[valid]])
        pts_b = np.vstack([pts_b, mapped[valid]])
        if len(pts_a) >= n:
            return CorrespondenceBatch(
                points_a=pts_a[:n], points_b=pts_b[:n],
                mask=np.ones(n, dtype=bool))
    if len(pts_a) == 0:
        raise LossError("correspondence map has an empty valid region")
    return CorrespondenceBatch(
        points_a=pts_a, points_b=pts_b,
        mask=np.ones(len(pts_a), dtype=bool), truncated=True)


def reference_df_loss(
    out_a: FeatureOutput,
    out_b: FeatureOutput,
    batch: CorrespondenceBatch,
    margin: float = DEFAULT_MARGIN,
    safe_radius: float = DEFAULT_SAFE_RADIUS,
) -> torch.Tensor:
    """Score-weighted triplet margin ranking loss with hardest negatives.

    Per correspondence c the positive distance is between its sampled unit
    descriptors; the hardest negative is the closest descriptor among the
    other batch points, in either image, at pixel distance > safe_radius
    from the true match. The margin terms max(0, margin + p^2 - n^2) are
    averaged with weights S_a(p) * S_b(U(p)); correspondences without an
    admissible negative are dropped from both sums.
    """
    n = len(batch)
    if n < 2:
        raise LossError(f"hardest-negative mining needs >= 2 correspondences, got {n}")
    d_a = describe_at(out_a, batch.points_a)  # (n, C)
    d_b = describe_at(out_b, batch.points_b)
    # squared distances throughout: the margin uses them directly and, unlike
    # norms, they stay differentiable at coincident descriptors
    pos_sq = ((d_a - d_b) ** 2).sum(dim=1)
    dist_sq = ((d_a[:, None, :] - d_b[None, :, :]) ** 2).sum(dim=-1)  # [i, j]

    def pixel_far(points):
        diff = points[:, None, :] - points[None, :, :]
        return np.sqrt((diff ** 2).sum(-1)) > safe_radius

    off_diag = ~np.eye(n, dtype=bool)
    allow_b = torch.as_tensor(pixel_far(batch.points_b) & off_diag)  # negatives in image b
    allow_a = torch.as_tensor(pixel_far(batch.points_a) & off_diag)  # negatives in image a
    inf = torch.tensor(float("inf"), dtype=dist_sq.dtype)
    neg_sq_b = torch.where(allow_b, dist_sq, inf).min(dim=1).values
    neg_sq_a = torch.where(allow_a, dist_sq.T, inf).min(dim=1).values  # ||d_a(q) - d_b(c)||^2
    if not bool(torch.isfinite(dist_sq.detach()).all()):
        raise LossError("non-finite descriptor distances (diverged model?)")
    neg_sq = torch.minimum(neg_sq_a, neg_sq_b)
    included = torch.isfinite(neg_sq)
    if not bool(included.any()):
        return torch.zeros((), dtype=dist_sq.dtype)
    neg_sq = torch.where(included, neg_sq, torch.zeros_like(neg_sq))
    margins = torch.relu(margin + pos_sq - neg_sq)
    weights = score_at(out_a, batch.points_a) * score_at(out_b, batch.points_b)
    weights = weights * included.to(weights.dtype)
    # the score products sit around (1/HW)^2 and underflow float32 once the
    # maps sharpen; the weighted mean is scale-invariant, so renormalize by
    # the largest weight before dividing
    wmax = weights.detach().max()
    if float(wmax) <= 0.0:
        return torch.zeros((), dtype=dist_sq.dtype)
    weights = weights / wmax
    return (weights * margins).sum() / weights.sum()


def sl_loss(
    model: FeatureNet,
    pair: ImagePair,
    rng: np.random.Generator,
    n_correspondences: int = DEFAULT_N_CORRESPONDENCES,
    margin: float = DEFAULT_MARGIN,
    safe_radius: float = DEFAULT_SAFE_RADIUS,
    loss_fn=reference_df_loss,
) -> tuple[torch.Tensor, int]:
    """Base loss on a real cross-modality pair under its ground truth U."""
    batch = sample_correspondences(pair.correspondence, n_correspondences, rng)
    out_vis = model(pair.visible)
    out_ir = model(pair.other)
    return loss_fn(out_vis, out_ir, batch, margin=margin, safe_radius=safe_radius), len(batch)


def ssl_loss(
    model: FeatureNet,
    image: np.ndarray,
    transform_config: TransformConfig,
    rng: np.random.Generator,
    n_correspondences: int = DEFAULT_N_CORRESPONDENCES,
    margin: float = DEFAULT_MARGIN,
    safe_radius: float = DEFAULT_SAFE_RADIUS,
    loss_fn=reference_df_loss,
) -> tuple[torch.Tensor, int]:
    """Base loss on an image vs a freshly transformed copy of itself.

    A transform is sampled per call; the photometric stage runs first so
    the geometric homography is the exact ground-truth correspondence.
    """
    image = np.asarray(image, dtype=float)
    spec = sample_transform(rng, transform_config, image.shape)
    photo = apply_photometric(image, spec.photometric, spec.noise_rng())
    warped = apply_geometric(photo, spec.homography)
    corr = CorrespondenceMap.from_homography(spec.homography, image.shape, warped.shape)
    batch = sample_correspondences(corr, n_correspondences, rng)
    out = model(image)
    out_t = model(warped)
    return loss_fn(out, out_t, batch, margin=margin, safe_radius=safe_radius), len(batch)


def total_loss(
    model: FeatureNet,
    pair: ImagePair,
    lam: float,
    transform_config: TransformConfig,
    rng: np.random.Generator,
    n_correspondences: int = DEFAULT_N_CORRESPONDENCES,
    margin: float = DEFAULT_MARGIN,
    safe_radius: float = DEFAULT_SAFE_RADIUS,
    loss_fn=reference_df_loss,
) -> tuple[LossBreakdown, torch.Tensor]:
    """Joint objective: sl + lam * (ssl_vis + ssl_ir), one autograd graph.

    The SSL branches always run (their values are reported even at lam=0)
    and draw independent transforms from ``rng``. Returns the float
    breakdown for logging plus the differentiable scalar.
    """
    if lam < 0:
        raise LossError(f"lambda weight must be >= 0, got {lam}")
    kwargs = dict(n_correspondences=n_correspondences, margin=margin,
                  safe_radius=safe_radius, loss_fn=loss_fn)
    sl_t, n_sl = sl_loss(model, pair, rng, **kwargs)
    ssl_vis_t, n_vis = ssl_loss(model, pair.visible, transform_config, rng, **kwargs)
    ssl_ir_t, n_ir = ssl_loss(model, pair.other, transform_config, rng, **kwargs)
    total_t = sl_t + lam * (ssl_vis_t + ssl_ir_t)
    sl_f, vis_f, ir_f = float(sl_t.detach()), float(ssl_vis_t.detach()), float(ssl_ir_t.detach())
    breakdown = LossBreakdown(
        total=sl_f + lam * (vis_f + ir_f),
        sl=sl_f,
        ssl_vis=vis_f,
        ssl_ir=ir_f,
        lam=lam,
        n_correspondences_used=(n_sl, n_vis, n_ir),
    )
    return breakdown, total_t
