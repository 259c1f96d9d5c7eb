"""Adversarial + L1 objectives for the generator and discriminator.

Expectations are joint means over batch, channel and spatial axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import NumericError, ShapeError

EPS = 1e-12
DEFAULT_LAMBDA = 10.0


@dataclass
class LossBreakdown:
    total: torch.Tensor
    gan_term: torch.Tensor | None = None
    l1_term: torch.Tensor | None = None

    def values(self) -> dict[str, float]:
        out = {"total": float(self.total)}
        if self.gan_term is not None:
            out["gan"] = float(self.gan_term)
            out["l1"] = float(self.l1_term)
        return out


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _finite(name: str, *ts: torch.Tensor):
    for t in ts:
        if not torch.isfinite(t).all():
            raise NumericError(f"{name}: non-finite input")


def _l1(Y: torch.Tensor, Yhat: torch.Tensor) -> torch.Tensor:
    # abs() has subgradient 0 at Y == Yhat, as required
    return (Y - Yhat).abs().mean()


def generator_loss(DF, Y, Yhat, lam: float = DEFAULT_LAMBDA, eps: float = EPS) -> LossBreakdown:
    """``mean(-log(DF + eps)) + lam * mean(|Y - Yhat|)``."""
    DF, Y, Yhat = _as_tensor(DF), _as_tensor(Y), _as_tensor(Yhat)
    if Y.shape != Yhat.shape:
        raise ShapeError(f"target {tuple(Y.shape)} vs output {tuple(Yhat.shape)}")
    if lam < 0 or eps <= 0:
        raise ValueError("need lam >= 0 and eps > 0")
    _finite("generator_loss", DF, Y, Yhat)
    gan = -torch.log(DF + eps).mean()
    l1 = _l1(Y, Yhat)
    return LossBreakdown(gan + lam * l1, gan, l1)


def discriminator_loss(DR, DF, eps: float = EPS) -> LossBreakdown:
    """``mean(-(log(DR + eps) + log(1 - DF + eps)))``."""
    DR, DF = _as_tensor(DR), _as_tensor(DF)
    if DR.shape != DF.shape:
        raise ShapeError(f"real map {tuple(DR.shape)} vs fake map {tuple(DF.shape)}")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    _finite("discriminator_loss", DR, DF)
    return LossBreakdown(-(torch.log(DR + eps) + torch.log(1.0 - DF + eps)).mean())
