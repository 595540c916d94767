"""Variational posterior and prior types: Gaussian factors and Gamma precisions.

Gamma posteriors are stored in the *doubled* form produced by the closed-form
leaf updates, ``(alpha, beta) = (2 * shape, 2 * rate)``.  The mean is
``alpha / beta`` either way; every distributional quantity (KL, CDF,
log-expectation) goes through :attr:`GammaPosterior.shape` and
:attr:`GammaPosterior.rate`.  Prior constants ``(alpha0, beta0)`` are ordinary
shape/rate values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
from torch import Tensor

from .errors import DegenerateVarianceError, InvalidPosteriorError

BETA_FLOOR = 1e-30


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else torch.get_default_dtype()
    return torch.as_tensor(x, dtype=dtype)


@dataclass(frozen=True)
class Hyperparams:
    alpha0_gamma: float = 2.0
    alpha0_omega: float = 2.0
    alpha0_lambda: float = 2.0
    beta0_gamma: float = 1e-6
    beta0_omega: float = 1e-6
    beta0_lambda: float = 1e-8
    r0: int = 8
    tau: float = 1.0
    sigma0: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "tau":
                if not value >= 0:
                    raise ValueError(f"tau must be nonnegative, got {value}")
            elif f.name == "r0":
                if int(value) != value or value < 1:
                    raise ValueError(f"r0 must be a positive integer, got {value}")
            elif not value > 0:
                raise ValueError(f"{f.name} must be positive, got {value}")


@dataclass(frozen=True)
class GaussianFactorPosterior:
    """Elementwise Gaussian ``N(mean, std**2)`` over a factor matrix.

    Leading dimensions (batch, channel) are allowed; the last two are the
    matrix dimensions (h x r0 for A, w x r0 for B, h x w for S).
    """

    mean: Tensor
    std: Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise InvalidPosteriorError(
                f"mean shape {tuple(self.mean.shape)} != std shape {tuple(self.std.shape)}"
            )
        with torch.no_grad():
            if not (torch.isfinite(self.mean).all() and torch.isfinite(self.std).all()):
                raise InvalidPosteriorError("non-finite posterior parameters")
            # std == 0 is tolerated as a degenerate (point-mass) posterior; the
            # log-variance terms of the losses reject it.
            if (self.std < 0).any():
                raise InvalidPosteriorError("negative standard deviation")

    @classmethod
    def from_log_std(cls, mean: Tensor, log_std: Tensor) -> "GaussianFactorPosterior":
        return cls(mean, torch.exp(log_std))

    @property
    def shape(self):
        return self.mean.shape

    def detach(self) -> "GaussianFactorPosterior":
        return GaussianFactorPosterior(self.mean.detach(), self.std.detach())


@dataclass(frozen=True)
class GammaPosterior:
    """Gamma posterior over precisions in doubled parameterization.

    ``alpha`` and ``beta`` are the values given by the closed-form updates;
    the represented density is ``Gamma(shape=alpha/2, rate=beta/2)``.
    """

    alpha: Tensor
    beta: Tensor

    def __post_init__(self):
        alpha, beta = torch.broadcast_tensors(_as_tensor(self.alpha), _as_tensor(self.beta))
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        if not (torch.all(alpha > 0) and torch.all(beta > 0)):
            raise InvalidPosteriorError("Gamma parameters must be strictly positive")

    @classmethod
    def from_shape_rate(cls, shape, rate) -> "GammaPosterior":
        return cls(2 * _as_tensor(shape), 2 * _as_tensor(rate))

    @property
    def shape(self) -> Tensor:
        return self.alpha / 2

    @property
    def rate(self) -> Tensor:
        return self.beta / 2

    def mean(self) -> Tensor:
        return gamma_mean(self)

    def expected_log(self) -> Tensor:
        """E[ln x] = digamma(shape) - ln(rate)."""
        return torch.digamma(self.shape) - torch.log(self.rate)

    def detach(self) -> "GammaPosterior":
        return GammaPosterior(self.alpha.detach(), self.beta.detach())


def gamma_mean(post: GammaPosterior) -> Tensor:
    mean = post.alpha / post.beta.clamp_min(BETA_FLOOR)
    if not torch.isfinite(mean).all():
        raise InvalidPosteriorError("Gamma mean is not finite")
    return mean


def sample_factor(post: GaussianFactorPosterior, seed: int | torch.Generator) -> Tensor:
    """Reparameterized draw ``mean + std * eta``; gradients flow to both parameters."""
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    eta = torch.randn(post.mean.shape, generator=gen, dtype=post.mean.dtype)
    return post.mean + post.std * eta


def low_rank_moments(phiA: GaussianFactorPosterior, phiB: GaussianFactorPosterior):
    """Per-pixel mean and variance of L built from the factor posteriors.

    ``mu_L = (mu_A (s_B^T)^2 + s_A^2 mu_B^T) / (s_A^2 1^T + 1 (s_B^T)^2)`` and
    ``var_L = s_A^2 (s_B^T)^2 / (same denominator)``, all products being
    matrix products over the rank axis.
    """
    if phiA.shape[-1] != phiB.shape[-1]:
        raise InvalidPosteriorError("factor rank mismatch")
    varA, varB = phiA.std**2, phiB.std**2
    onesA, onesB = torch.ones_like(varA), torch.ones_like(varB)
    t = lambda x: x.transpose(-1, -2)  # noqa: E731
    denom = varA @ t(onesB) + onesA @ t(varB)
    if (denom <= 0).any():
        raise DegenerateVarianceError("both factor variances vanish for some pixel")
    mu = (phiA.mean @ t(varB) + varA @ t(phiB.mean)) / denom
    var = (varA @ t(varB)) / denom
    return mu, var


def kl_gamma(shape, rate, shape0, rate0) -> Tensor:
    """Elementwise KL(Gamma(shape, rate) || Gamma(shape0, rate0))."""
    shape, rate = _as_tensor(shape), _as_tensor(rate)
    shape0 = _as_tensor(shape0, shape)
    rate0 = _as_tensor(rate0, shape)
    return (
        (shape - shape0) * torch.digamma(shape)
        - torch.lgamma(shape)
        + torch.lgamma(shape0)
        + shape0 * (torch.log(rate) - torch.log(rate0))
        + shape * (rate0 - rate) / rate
    )


def kl_gamma_to_prior(post: GammaPosterior, alpha0: float, beta0: float) -> Tensor:
    """Summed KL between the posterior and the ``Gamma(alpha0, beta0)`` prior."""
    kl = kl_gamma(post.shape, post.rate, alpha0, beta0)
    # closed form can dip below zero by rounding at equality
    return kl.clamp_min(0).sum()
