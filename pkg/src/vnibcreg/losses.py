"""VIbCReg and modified-TNC loss terms, and their additive combination.

All functions take batch-major tensors (rows are batch elements) and are
differentiable with respect to every tensor argument.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict, Optional

import torch
from torch import Tensor

P_MIN = 1e-7
TNC_VARIANTS = ("original", "modified", "off")
INVARIANCE_REDUCTIONS = ("mean", "sum")


@dataclass
class LossWeights:
    lam: float = 10.0  # invariance
    mu: float = 10.0  # variance
    nu: float = 10.0  # covariance
    rho: float = 13.0  # whole TNC bracket
    gamma: float = 1.0
    epsilon: float = 1e-4
    unbiased_variance: bool = True
    plus_log_negative: bool = False
    # "mean": squared distance averaged over feature dims; "sum": summed over them
    invariance_reduction: str = "mean"

    def __post_init__(self) -> None:
        if self.invariance_reduction not in INVARIANCE_REDUCTIONS:
            raise ValueError(f"unknown invariance reduction {self.invariance_reduction!r}")
        for name in ("lam", "mu", "nu", "rho", "gamma", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LossBreakdown:
    """Per-term values and the weighted total (all 0-d tensors).

    ``tnc_corr_pos`` and ``tnc_corr_neg`` are the penalties (1 - c_p)^2 and c_n^2;
    the raw correlations are kept in ``c_pos`` / ``c_neg``.
    """

    invariance: Tensor
    variance_t: Tensor
    variance_l: Tensor
    covariance_t: Tensor
    covariance_l: Tensor
    tnc_bce: Tensor
    tnc_corr_pos: Tensor
    tnc_corr_neg: Tensor
    total: Tensor
    c_pos: Tensor = field(default_factory=lambda: torch.tensor(0.0))
    c_neg: Tensor = field(default_factory=lambda: torch.tensor(0.0))
    clamped: bool = False

    def as_dict(self) -> Dict[str, float]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = bool(value) if f.name == "clamped" else float(value.detach())
        return out

    def is_finite(self) -> bool:
        return all(
            bool(torch.isfinite(getattr(self, f.name)).all()) for f in fields(self) if f.name != "clamped"
        )


LOG_COLUMNS = [f.name for f in fields(LossBreakdown) if f.name != "clamped"]


def _zero_like(x: Tensor) -> Tensor:
    return x.new_zeros(())


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_batch(x: Tensor, what: str) -> None:
    if x.ndim != 2:
        raise ValueError(f"{what} must be a (batch, features) matrix, got shape {tuple(x.shape)}")
    if x.shape[0] < 2:
        raise ValueError(f"{what} needs a batch of at least 2, got {x.shape[0]}")


def column_normalize(x: Tensor) -> Tensor:
    """Centre each column and scale it to unit L2 norm; zero-norm columns stay zero."""
    centred = x - x.mean(dim=0, keepdim=True)
    sq = (centred**2).sum(dim=0, keepdim=True)
    nonzero = sq > 0
    # the inner where keeps sqrt's gradient finite on collapsed columns
    norm = torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq)))
    return torch.where(nonzero, centred / norm, torch.zeros_like(centred))


def invariance_term(z_t: Tensor, z_l: Tensor) -> Tensor:
    _check_same_shape(z_t, z_l)
    return ((z_t - z_l) ** 2).sum(dim=1).mean()


def variance_term(z: Tensor, gamma: float = 1.0, epsilon: float = 1e-4, unbiased: bool = True) -> Tensor:
    _check_batch(z, "variance input")
    std = torch.sqrt(z.var(dim=0, unbiased=unbiased) + epsilon)
    return torch.relu(gamma - std).mean()


def covariance_term(z: Tensor) -> Tensor:
    _check_batch(z, "covariance input")
    normed = column_normalize(z)
    corr = normed.T @ normed
    off_diag = corr - torch.diag_embed(torch.diagonal(corr))
    return (off_diag**2).sum() / z.shape[1] ** 2


def diagonal_correlation(y_a: Tensor, y_b: Tensor) -> Tensor:
    """Mean over features of the correlation between matching columns of two batches."""
    _check_same_shape(y_a, y_b)
    _check_batch(y_a, "correlation input")
    return (column_normalize(y_a) * column_normalize(y_b)).sum(dim=0).mean()


def vibcreg_loss(z_t: Tensor, z_l: Tensor, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """lam * s + mu * (v_t + v_l) + nu * (c_t + c_l).

    ``breakdown.invariance`` is the term as it enters the total, i.e. divided by the
    feature count under the default ``mean`` reduction.
    """
    _check_same_shape(z_t, z_l)
    s = invariance_term(z_t, z_l)
    if weights.invariance_reduction == "mean":
        s = s / z_t.shape[1]
    v_t = variance_term(z_t, weights.gamma, weights.epsilon, weights.unbiased_variance)
    v_l = variance_term(z_l, weights.gamma, weights.epsilon, weights.unbiased_variance)
    c_t = covariance_term(z_t)
    c_l = covariance_term(z_l)
    total = weights.lam * s + weights.mu * (v_t + v_l) + weights.nu * (c_t + c_l)
    zero = _zero_like(total)
    return LossBreakdown(s, v_t, v_l, c_t, c_l, zero, zero, zero, total)


def _clamp_prob(p: Tensor) -> tuple[Tensor, bool]:
    clamped = bool(((p < P_MIN) | (p > 1 - P_MIN)).any())
    return p.clamp(P_MIN, 1 - P_MIN), clamped


def tnc_loss(
    d_pos: Tensor,
    d_neg: Tensor,
    y_t: Tensor,
    y_l: Tensor,
    y_k: Tensor,
    weights: LossWeights = LossWeights(),
    variant: str = "modified",
) -> LossBreakdown:
    """Discriminator cross-entropy, plus the correlation penalties for ``modified``.

    ``original``: rho * bce. ``modified``: rho * (bce + (1 - c_p)^2 + c_n^2) with
    c_p = diagonal_correlation(y_t, y_l) and c_n = diagonal_correlation(y_t, y_k).
    With ``weights.plus_log_negative`` the negative-pair term enters as
    ``+log(1 - d_neg)`` instead of ``-log(1 - d_neg)``.
    """
    if variant not in TNC_VARIANTS:
        raise ValueError(f"unknown TNC variant {variant!r}")
    d_pos, clamped_pos = _clamp_prob(d_pos)
    d_neg, clamped_neg = _clamp_prob(d_neg)
    neg_sign = 1.0 if weights.plus_log_negative else -1.0
    bce = (-torch.log(d_pos)).mean() + neg_sign * torch.log1p(-d_neg).mean()

    c_p = diagonal_correlation(y_t, y_l)
    c_n = diagonal_correlation(y_t, y_k)
    corr_pos = (1.0 - c_p) ** 2
    corr_neg = c_n**2
    zero = _zero_like(bce)
    if variant == "modified":
        total = weights.rho * (bce + corr_pos + corr_neg)
    elif variant == "original":
        total = weights.rho * bce
        corr_pos, corr_neg = corr_pos.detach(), corr_neg.detach()
    else:
        total = zero
        bce = zero
        corr_pos = corr_neg = zero
    return LossBreakdown(
        zero, zero, zero, zero, zero, bce, corr_pos, corr_neg, total,
        c_pos=c_p.detach(), c_neg=c_n.detach(), clamped=clamped_pos or clamped_neg,
    )


def vnibcreg_loss(
    z_t: Optional[Tensor],
    z_l: Optional[Tensor],
    y_t: Tensor,
    y_l: Tensor,
    y_k: Optional[Tensor],
    d_pos: Optional[Tensor],
    d_neg: Optional[Tensor],
    weights: LossWeights = LossWeights(),
    variant: str = "modified",
    use_vibcreg: bool = True,
) -> LossBreakdown:
    """VIbCReg part plus TNC part; either may be switched off for ablations."""
    parts = []
    if use_vibcreg:
        parts.append(vibcreg_loss(z_t, z_l, weights))
    if variant != "off":
        parts.append(tnc_loss(d_pos, d_neg, y_t, y_l, y_k, weights, variant))
    if not parts:
        raise ValueError("both loss parts are disabled")
    if len(parts) == 1:
        return parts[0]
    vib, tnc = parts
    return LossBreakdown(
        invariance=vib.invariance,
        variance_t=vib.variance_t,
        variance_l=vib.variance_l,
        covariance_t=vib.covariance_t,
        covariance_l=vib.covariance_l,
        tnc_bce=tnc.tnc_bce,
        tnc_corr_pos=tnc.tnc_corr_pos,
        tnc_corr_neg=tnc.tnc_corr_neg,
        total=vib.total + tnc.total,
        c_pos=tnc.c_pos,
        c_neg=tnc.c_neg,
        clamped=tnc.clamped,
    )
