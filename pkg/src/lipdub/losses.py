"""Training objectives: lower-half L1 reconstruction, frozen-feature
perceptual distance, and the weighted total. The lip-sync term is computed
by sync.sync_loss and only combined here."""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidArgumentError, ShapeError, StateError


@dataclass(frozen=True)
class LossWeights:
    w_rec: float = 1.0
    w_p: float = 0.05
    w_sync: float = 0.3

    def validate(self):
        for name, w in (("w_rec", self.w_rec), ("w_p", self.w_p), ("w_sync", self.w_sync)):
            if w < 0:
                raise InvalidArgumentError(f"{name} must be nonnegative, got {w}")


@dataclass
class LossBreakdown:
    l_rec: float
    l_p: float
    l_sync: float
    total: float
    weights: LossWeights


def crop_lower_half(image):
    """Rows H/2..H-1 of an (H, W, 3) array or (..., C, H, W) tensor."""
    if torch.is_tensor(image):
        h = image.shape[-2]
        if h % 2:
            raise InvalidArgumentError(f"height must be even, got {h}")
        return image[..., h // 2:, :]
    image = np.asarray(image)
    h = image.shape[-3]
    if h % 2:
        raise InvalidArgumentError(f"height must be even, got {h}")
    return image[..., h // 2:, :, :]


def rec_loss(dubbed: torch.Tensor, ground_truth: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over the cropped lower halves."""
    if dubbed.shape != ground_truth.shape:
        raise ShapeError(f"shape mismatch {tuple(dubbed.shape)} vs {tuple(ground_truth.shape)}")
    return (crop_lower_half(dubbed) - crop_lower_half(ground_truth)).abs().mean()


def perceptual_loss(dubbed: torch.Tensor, ground_truth: torch.Tensor,
                    extractor) -> torch.Tensor:
    """Mean squared distance between the frozen extractor's stage-2/3
    feature maps of the cropped lower halves."""
    if dubbed.shape != ground_truth.shape:
        raise ShapeError(f"shape mismatch {tuple(dubbed.shape)} vs {tuple(ground_truth.shape)}")
    if any(p.requires_grad for p in extractor.parameters()):
        raise StateError("perceptual extractor must be frozen")
    feats_d = extractor.features(crop_lower_half(dubbed))
    feats_g = extractor.features(crop_lower_half(ground_truth))
    per_stage = [((fd - fg) ** 2).mean() for fd, fg in zip(feats_d, feats_g)]
    return sum(per_stage) / len(per_stage)


def total_loss(l_rec, l_p, l_sync, weights: LossWeights = LossWeights()):
    """Weighted sum; works on floats or torch scalars, exact coefficients."""
    weights.validate()
    return weights.w_rec * l_rec + weights.w_p * l_p + weights.w_sync * l_sync


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def breakdown(l_rec, l_p, l_sync, weights: LossWeights = LossWeights()) -> LossBreakdown:
    total = total_loss(l_rec, l_p, l_sync, weights)
    return LossBreakdown(l_rec=_scalar(l_rec), l_p=_scalar(l_p), l_sync=_scalar(l_sync),
                         total=_scalar(total), weights=weights)
