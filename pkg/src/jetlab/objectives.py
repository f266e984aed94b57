"""Training objectives: BCE, boost-consistency penalty, their sum, and distillation MSE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffengine import as_tensor
from .kinematics import boost_array, features_array, sample_boosts
from .model import Batch, ModelConfig, forward

PT_FLOOR = 1e-6


@dataclass(frozen=True)
class LossConfig:
    lambda_seal: float = 0.1
    boost_y_max: float = 0.5
    views_per_sample: int = 1

    def __post_init__(self):
        if self.lambda_seal < 0:
            raise ValueError("lambda_seal must be >= 0")
        if self.boost_y_max < 0:
            raise ValueError("boost_y_max must be >= 0")
        if self.views_per_sample != 1:
            raise ValueError("only one augmented view per sample is supported")


def bce_loss(logits, labels) -> torch.Tensor:
    """Mean of max(z, 0) - z y + log(1 + exp(-|z|))."""
    z = as_tensor(logits)
    y = as_tensor(labels).to(z.dtype)
    return torch.mean(torch.clamp(z, min=0) - z * y + torch.log1p(torch.exp(-torch.abs(z))))


def distill_loss(student_logits, teacher_logits) -> torch.Tensor:
    s = as_tensor(student_logits)
    t = as_tensor(teacher_logits)
    if s.shape != t.shape:
        raise ValueError(f"student/teacher logits differ in shape: {tuple(s.shape)} vs {tuple(t.shape)}")
    return torch.mean((s - t) ** 2)


@dataclass
class BoostedView:
    batch: Batch
    n: np.ndarray
    y: np.ndarray
    n_clamped: int


def boosted_view(batch: Batch, n: np.ndarray, y: np.ndarray) -> BoostedView:
    """Apply one boost per jet to all of its constituents and recompute features.

    The boosted jet axis is the boosted original jet four-vector, i.e. the sum
    of boosted constituents.  Constituents pushed below ``PT_FLOOR`` are
    clamped before the log features.
    """
    if batch.p4 is None:
        raise ValueError("batch carries no four-momenta to boost")
    p4 = boost_array(batch.p4, n[:, None, :], y[:, None])
    p4 = np.where(batch.mask[..., None], p4, 0.0)
    feats, n_clamped = features_array(p4, batch.mask, pt_floor=PT_FLOOR)
    return BoostedView(Batch(feats, batch.mask, batch.labels, p4), n, y, n_clamped)


def sample_view(batch: Batch, rng: np.random.Generator, y_max: float) -> BoostedView:
    if y_max == 0:
        B = len(batch)
        n = np.tile([0.0, 0.0, 1.0], (B, 1))
        return boosted_view(batch, n, np.zeros(B))
    n, y = sample_boosts(rng, y_max, len(batch))
    return boosted_view(batch, n, y)


def consistency_penalty(theta, config: ModelConfig, batch: Batch, view: Batch, logits=None) -> torch.Tensor:
    """Mean squared logit difference between a batch and its boosted view."""
    if logits is None:
        logits = forward(theta, config, batch)
    return torch.mean((logits - forward(theta, config, view)) ** 2)


def seal_penalty(params, config: ModelConfig, batch: Batch, rng: np.random.Generator, lc: LossConfig) -> torch.Tensor:
    view = sample_view(batch, rng, lc.boost_y_max)
    return consistency_penalty(params, config, batch, view.batch)


def total_loss_with_view(theta, config: ModelConfig, batch: Batch, view: Batch | None, lambda_seal: float) -> torch.Tensor:
    """BCE plus ``lambda_seal`` times the penalty against a fixed boosted view."""
    logits = forward(theta, config, batch)
    bce = bce_loss(logits, batch.labels)
    if lambda_seal == 0 or view is None:
        return bce
    return bce + lambda_seal * consistency_penalty(theta, config, batch, view, logits=logits)


def total_loss(params, config: ModelConfig, batch: Batch, rng: np.random.Generator, lc: LossConfig) -> torch.Tensor:
    if lc.lambda_seal == 0:
        return bce_loss(forward(params, config, batch), batch.labels)
    view = sample_view(batch, rng, lc.boost_y_max)
    return total_loss_with_view(params, config, batch, view.batch, lc.lambda_seal)
