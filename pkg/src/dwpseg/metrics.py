"""Segmentation losses (cross-entropy, soft Dice, their 0.99/0.01 mix) and DSC/IoU."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

CE_EPS = 1e-7
DICE_SMOOTH = 1.0
DICE_WEIGHT = 0.99
CE_WEIGHT = 0.01


def _check_pair(probs: Tensor, target: Tensor) -> None:
    if probs.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(probs.shape)} != target shape {tuple(target.shape)}")


def _batched(x: Tensor) -> Tensor:
    # [D,H,W] -> [1, D*H*W]; [B, ...] -> [B, prod(...)]
    if x.dim() <= 3:
        return x.reshape(1, -1)
    return x.reshape(x.shape[0], -1)


def ce_per_sample(probs: Tensor, target: Tensor, eps: float = CE_EPS) -> Tensor:
    _check_pair(probs, target)
    p = _batched(probs).clamp(eps, 1.0 - eps)
    y = _batched(target).to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean(dim=1)


def ce_loss(probs: Tensor, target: Tensor, eps: float = CE_EPS) -> Tensor:
    """Binary cross-entropy, averaged over voxels (and over the batch, if batched)."""
    return ce_per_sample(probs, target, eps).mean()


def soft_dsc(probs: Tensor, target: Tensor, smooth: float = DICE_SMOOTH) -> Tensor:
    _check_pair(probs, target)
    p = _batched(probs)
    y = _batched(target).to(p.dtype)
    tp = (p * y).sum(dim=1)
    return (2.0 * tp + smooth) / (p.sum(dim=1) + y.sum(dim=1) + smooth)


def dice_per_sample(probs: Tensor, target: Tensor, smooth: float = DICE_SMOOTH) -> Tensor:
    return 1.0 - soft_dsc(probs, target, smooth)


def dice_loss(probs: Tensor, target: Tensor, smooth: float = DICE_SMOOTH) -> Tensor:
    """Mean over the batch of ``1 - softDSC``. ``probs`` is ``[D,H,W]`` or ``[B,D,H,W]``."""
    if probs.numel() == 0:
        raise ValueError("empty batch")
    return dice_per_sample(probs, target, smooth).mean()


def combined_per_sample(probs: Tensor, target: Tensor) -> Tensor:
    return DICE_WEIGHT * dice_per_sample(probs, target) + CE_WEIGHT * ce_per_sample(probs, target)


def combined_loss(probs: Tensor, target: Tensor) -> Tensor:
    """0.99 * Dice + 0.01 * cross-entropy."""
    return DICE_WEIGHT * dice_loss(probs, target) + CE_WEIGHT * ce_loss(probs, target)


def foreground_probs(logits: Tensor) -> Tensor:
    """Two-channel logits ``[B, 2, ...]`` -> foreground probability ``[B, ...]``."""
    return torch.softmax(logits, dim=1)[:, 1]


# --------------------------------------------------------------------------
# hard metrics


def _counts(pred, target):
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    tp = np.count_nonzero(pred & target)
    fp = np.count_nonzero(pred & ~target)
    fn = np.count_nonzero(~pred & target)
    return tp, fp, fn


def dsc(pred, target) -> float:
    """2TP / (2TP + FN + FP); two empty masks score 1."""
    tp, fp, fn = _counts(pred, target)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def iou(pred, target) -> float:
    """TP / (TP + FN + FP); two empty masks score 1."""
    tp, fp, fn = _counts(pred, target)
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


@dataclass
class MetricReport:
    dsc_mean: float
    dsc_std: float
    iou_mean: float
    iou_std: float
    per_image: list = field(default_factory=list)

    @classmethod
    def from_pairs(cls, per_image: Sequence[tuple]) -> "MetricReport":
        if not per_image:
            raise ValueError("no images to summarise")
        arr = np.asarray(per_image, dtype=np.float64)
        return cls(
            dsc_mean=float(arr[:, 0].mean()),
            dsc_std=float(arr[:, 0].std()),
            iou_mean=float(arr[:, 1].mean()),
            iou_std=float(arr[:, 1].std()),
            per_image=[(float(a), float(b)) for a, b in arr],
        )

    def to_csv_line(self) -> str:
        return f"{self.dsc_mean:.6f},{self.dsc_std:.6f},{self.iou_mean:.6f},{self.iou_std:.6f},{len(self.per_image)}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_image"] = [list(p) for p in self.per_image]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["dsc_mean"], d["dsc_std"], d["iou_mean"], d["iou_std"], [tuple(p) for p in d["per_image"]])


def _image_mask(item):
    if hasattr(item, "intensities"):
        return item.intensities, item.mask
    return item


@torch.no_grad()
def predict_probs(net, image, weights=None, mc_samples: int = 0, generator: Optional[torch.Generator] = None) -> np.ndarray:
    """Foreground probabilities for one ``[D,H,W]`` (or ``[C,D,H,W]``) image.

    Variational nets use the posterior mean unless ``mc_samples > 0``, in
    which case the probabilities of that many weight draws are averaged.
    """
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.asarray(image), dtype=dtype)
    while x.dim() < 5:
        x = x.unsqueeze(0)
    if mc_samples and net.mode == "variational":
        acc = 0.0
        for _ in range(mc_samples):
            acc = acc + foreground_probs(net(x, net.sample_weights(generator)))
        probs = acc / mc_samples
    else:
        probs = foreground_probs(net(x, weights))
    return probs[0].cpu().numpy()


def evaluate(net, test_set: Iterable, threshold: float = 0.5, weights=None, mc_samples: int = 0,
             generator: Optional[torch.Generator] = None) -> MetricReport:
    """Per-image DSC/IoU at ``threshold``, averaged over the test set."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    pairs = []
    for item in test_set:
        image, mask = _image_mask(item)
        pred = predict_probs(net, image, weights, mc_samples, generator) > threshold
        pairs.append((dsc(pred, mask), iou(pred, mask)))
    if not pairs:
        raise ValueError("empty test set")
    return MetricReport.from_pairs(pairs)
