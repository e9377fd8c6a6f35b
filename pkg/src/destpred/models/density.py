"""Torch Gaussian-mixture log densities.

Every NLL-trained model in this package funnels through these two kernels,
so the training loss and the numpy mixture evaluation (mixture module) are
the same math on two backends; tests pin them against each other.
"""

from __future__ import annotations

import math

import torch

LOG_TWO_PI = math.log(2.0 * math.pi)


def diag_log_pdf(
    means: torch.Tensor,
    sigmas: torch.Tensor,
    log_weights: torch.Tensor,
    targets: torch.Tensor,
) -> torch.Tensor:
    """log p(targets) under a diagonal Gaussian mixture.

    means, sigmas: (B, K, 2); log_weights: (B, K) unnormalized;
    targets: (B, T, 2). Returns (B, T).
    """
    log_pi = torch.log_softmax(log_weights, dim=-1)  # (B, K)
    d = targets[:, :, None, :] - means[:, None, :, :]  # (B, T, K, 2)
    z = d / sigmas[:, None, :, :]
    log_det = torch.log(sigmas).sum(dim=-1)  # (B, K)
    comp = -0.5 * (z**2).sum(dim=-1) - log_det[:, None, :] - LOG_TWO_PI
    return torch.logsumexp(log_pi[:, None, :] + comp, dim=-1)


def chol_log_pdf(
    means: torch.Tensor,
    chol: torch.Tensor,
    log_weights: torch.Tensor,
    targets: torch.Tensor,
) -> torch.Tensor:
    """log p(targets) under a full-covariance mixture, Sigma = L L^T.

    means: (B, K, 2); chol: (B, K, 2, 2) lower triangular with positive
    diagonal; log_weights: (B, K); targets: (B, T, 2). Returns (B, T).
    """
    log_pi = torch.log_softmax(log_weights, dim=-1)
    d = targets[:, :, None, :] - means[:, None, :, :]  # (B, T, K, 2)
    l00 = chol[:, None, :, 0, 0]
    l10 = chol[:, None, :, 1, 0]
    l11 = chol[:, None, :, 1, 1]
    z0 = d[..., 0] / l00
    z1 = (d[..., 1] - l10 * z0) / l11
    log_det = torch.log(l00) + torch.log(l11)
    comp = -0.5 * (z0**2 + z1**2) - log_det - LOG_TWO_PI
    return torch.logsumexp(log_pi[:, None, :] + comp, dim=-1)


def masked_nll(log_pdf: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over batch of the per-record mean NLL over valid targets.

    log_pdf: (B, T); mask: (B, T) with at least one valid target per row.
    """
    counts = mask.sum(dim=-1)
    if (counts == 0).any():
        raise ValueError("record with zero ground-truth destinations")
    per_record = -(log_pdf * mask).sum(dim=-1) / counts
    return per_record.mean()


def positive_sigma(raw: torch.Tensor) -> torch.Tensor:
    """The positivity map used everywhere a std dev is predicted."""
    return 1.0 + torch.nn.functional.elu(raw) + 1e-5
