"""Reconstruction, vector-quantization, and contrastive loss terms.

The composite objective is

    total = recon + lambda_vq * vq + lambda_contra * contrastive

with mean-squared-error reconstruction, a commitment-style VQ term, and a
symmetric InfoNCE term over class embeddings. All functions take and return
autodiff tensors so they can sit inside a training tape; `total_loss` also
produces a plain-float `LossReport`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, TrainingDiverged


@dataclass
class LossWeights:
    """Weights of the composite objective; beta scales the commitment term."""

    lambda_vq: float = 1.0
    lambda_contra: float = 1.0
    beta: float = 0.25
    recon: bool = True

    def validate(self):
        for name in ("lambda_vq", "lambda_contra", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ShapeError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    """Unweighted loss parts plus the weighted total, as plain floats."""

    recon: float = 0.0
    vq: float = 0.0
    contrastive: float = 0.0
    total: float = 0.0
    per_sub_vq: list = field(default_factory=list)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.recon, self.vq, self.contrastive, self.total))


def recon_loss(x: ad.Tensor, x_hat: ad.Tensor) -> ad.Tensor:
    """Mean squared error over all pixels/channels."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"recon shapes differ: {x.shape} vs {x_hat.shape}")
    diff = ad.sub(x, x_hat)
    return ad.mean_all(ad.mul(diff, diff))


def vq_loss(f: ad.Tensor, f_hat, beta: float, codebook_term: bool = False) -> ad.Tensor:
    """Mean over tokens of the VQ objective.

    The commitment term beta*||f - sg[f_hat]||^2 always participates. When the
    codebook is learned by gradient (`codebook_term=True`) the codebook term
    ||sg[f] - f_hat||^2 is added and `f_hat` must be a tracked tensor; under
    EMA updates that term is dropped and `f_hat` is treated as a constant.
    """
    values = f_hat if isinstance(f_hat, ad.Tensor) else ad.Tensor(np.asarray(f_hat))
    if values.shape != f.shape:
        raise ShapeError(f"vq shapes differ: {f.shape} vs {values.shape}")
    d = f.shape[-1]
    commit_diff = ad.sub(f, values.detach())
    commit = ad.scale(ad.mean_all(ad.mul(commit_diff, commit_diff)), float(d))
    total = ad.scale(commit, beta)
    if codebook_term:
        cb_diff = ad.sub(values, f.detach())
        cb = ad.scale(ad.mean_all(ad.mul(cb_diff, cb_diff)), float(d))
        total = ad.add(cb, total)
    return total


def contrastive_loss(logits: ad.Tensor, targets) -> ad.Tensor:
    """Symmetric InfoNCE over class logits.

    Row direction: cross-entropy of each image's logits against its class.
    Column direction: over the distinct classes present in the batch, with
    multi-positive targets averaged (several images may share a class).
    """
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and targets {t.shape} are incompatible")
    row = ad.cross_entropy_rows(logits, t)

    present = np.unique(t)
    cols = ad.take_rows(ad.swap_last2(logits), present)  # (P, B)
    q = np.zeros(cols.shape, dtype=logits.dtype)
    for p, cls in enumerate(present):
        members = t == cls
        q[p, members] = 1.0 / members.sum()
    col = ad.soft_cross_entropy_rows(cols, q)
    return ad.scale(ad.add(row, col), 0.5)


def total_loss(parts: dict, weights: LossWeights):
    """Combine loss parts into (total tensor, LossReport).

    `parts` maps any of {"recon", "vq", "contrastive"} to scalar tensors;
    missing parts count as zero. Raises TrainingDiverged if any part is
    non-finite.
    """
    weights.validate()
    report = LossReport(
        recon=float(parts["recon"].data) if "recon" in parts else 0.0,
        vq=float(parts["vq"].data) if "vq" in parts else 0.0,
        contrastive=float(parts["contrastive"].data) if "contrastive" in parts else 0.0,
    )
    total = None
    if "recon" in parts:
        total = parts["recon"]
    if "vq" in parts:
        term = ad.scale(parts["vq"], weights.lambda_vq)
        total = term if total is None else ad.add(total, term)
    if "contrastive" in parts:
        term = ad.scale(parts["contrastive"], weights.lambda_contra)
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = ad.Tensor(np.float32(0.0))
    report.total = float(total.data)
    if not report.is_finite():
        raise TrainingDiverged("non-finite loss", report=report)
    return total, report
