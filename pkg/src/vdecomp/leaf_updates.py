"""Closed-form coordinate updates of the precision posteriors q(gamma), q(Omega), q(Lambda).

Each update is the exact minimizer of its leaf objective given the factor
posteriors; :func:`leaf_objectives` evaluates those objectives so the claim can
be checked numerically.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .distributions import (
    BETA_FLOOR,
    GammaPosterior,
    GaussianFactorPosterior,
    Hyperparams,
    gamma_mean,
    kl_gamma,
)
from .errors import InvalidPosteriorError


@dataclass(frozen=True)
class LeafState:
    gamma: GammaPosterior
    omega: GammaPosterior
    lam: GammaPosterior

    def means(self):
        """(mu_gamma, mu_Omega, mu_Lambda)."""
        return gamma_mean(self.gamma), gamma_mean(self.omega), gamma_mean(self.lam)

    def detach(self) -> "LeafState":
        return LeafState(self.gamma.detach(), self.omega.detach(), self.lam.detach())


def update_gamma(phiA: GaussianFactorPosterior, phiB: GaussianFactorPosterior, hyper: Hyperparams) -> GammaPosterior:
    h, r0 = phiA.shape[-2:]
    w, rb = phiB.shape[-2:]
    if rb != r0 or r0 != hyper.r0:
        raise InvalidPosteriorError(f"factor ranks ({r0}, {rb}) do not match r0={hyper.r0}")
    sq = (phiA.mean**2 + phiA.std**2).sum(-2) + (phiB.mean**2 + phiB.std**2).sum(-2)
    beta = (2 * hyper.beta0_gamma + sq).clamp_min(BETA_FLOOR)
    alpha = torch.full_like(beta, 2 * hyper.alpha0_gamma + h + w)
    return GammaPosterior(alpha, beta)


def update_omega(phiS: GaussianFactorPosterior, hyper: Hyperparams) -> GammaPosterior:
    beta = (2 * hyper.beta0_omega + phiS.mean**2 + phiS.std**2).clamp_min(BETA_FLOOR)
    alpha = torch.full_like(beta, 2 * hyper.alpha0_omega + 1)
    return GammaPosterior(alpha, beta)


def squared_residual(Y: Tensor, A_hat: Tensor, B_hat: Tensor, S_hat: Tensor, stacked: bool = False) -> Tensor:
    """(Y - (A B^T + S))^2; with ``stacked`` the leading axis holds MC samples and is averaged."""
    r2 = (Y - (A_hat @ B_hat.transpose(-1, -2) + S_hat)) ** 2
    return r2.mean(0) if stacked else r2


def expected_squared_residual(Y: Tensor, phiA: GaussianFactorPosterior, phiB: GaussianFactorPosterior, phiS: GaussianFactorPosterior) -> Tensor:
    """Exact E_q[(Y - (A B^T + S))^2] under the factorized Gaussian posteriors."""
    t = lambda x: x.transpose(-1, -2)  # noqa: E731
    mA2, mB2 = phiA.mean**2, phiB.mean**2
    vA, vB = phiA.std**2, phiB.std**2
    var_L = mA2 @ t(vB) + vA @ t(mB2) + vA @ t(vB)
    mean_r = Y - phiA.mean @ t(phiB.mean) - phiS.mean
    return mean_r**2 + var_L + phiS.std**2


def lambda_from_r2(r2: Tensor, hyper: Hyperparams) -> GammaPosterior:
    beta = (2 * hyper.beta0_lambda + r2).clamp_min(BETA_FLOOR)
    alpha = torch.full_like(beta, 2 * hyper.alpha0_lambda + 1)
    return GammaPosterior(alpha, beta)


def update_lambda(
    Y: Tensor, A_hat: Tensor, B_hat: Tensor, S_hat: Tensor, hyper: Hyperparams, stacked: bool = False
) -> GammaPosterior:
    return lambda_from_r2(squared_residual(Y, A_hat, B_hat, S_hat, stacked), hyper)


@torch.no_grad()
def leaf_update_all(Y, phiA, phiB, phiS, samples, hyper: Hyperparams, stacked: bool = False) -> LeafState:
    """Apply the three updates; the result carries no autograd history."""
    A_hat, B_hat, S_hat = samples
    return LeafState(
        update_gamma(phiA.detach(), phiB.detach(), hyper),
        update_omega(phiS.detach(), hyper),
        update_lambda(Y, A_hat.detach(), B_hat.detach(), S_hat.detach(), hyper, stacked),
    )


def leaf_objectives(Y, phiA, phiB, phiS, samples, leaf: LeafState, hyper: Hyperparams, stacked: bool = False, r2: Tensor | None = None):
    """Leaf-dependent part of the negative ELBO, split per precision variable.

    Returns a dict with keys ``gamma``, ``omega``, ``lambda``; each value is
    summed over the matrix axes, leading axes are kept::

        gamma : sum_i 0.5*E[g_i]*c_i - (h+w)/2 * E[ln g_i] + KL(q(g_i) || p(g_i))
        omega : sum_ij 0.5*E[w_ij]*(mu_s^2 + s_s^2) - 0.5*E[ln w_ij] + KL
        lambda: sum_ij 0.5*E[l_ij]*resid_ij^2 - 0.5*E[ln l_ij] + KL

    with ``c_i = |mu_a|^2 + |s_a|^2 + |mu_b|^2 + |s_b|^2``.  ``resid^2`` is
    estimated from ``samples`` unless ``r2`` supplies it directly.
    """
    h, w = phiA.shape[-2], phiB.shape[-2]
    g, o, lam = leaf.gamma, leaf.omega, leaf.lam
    c = (phiA.mean**2 + phiA.std**2).sum(-2) + (phiB.mean**2 + phiB.std**2).sum(-2)
    l_gamma = (
        0.5 * gamma_mean(g) * c
        - 0.5 * (h + w) * g.expected_log()
        + kl_gamma(g.shape, g.rate, hyper.alpha0_gamma, hyper.beta0_gamma)
    ).sum(-1)
    l_omega = (
        0.5 * gamma_mean(o) * (phiS.mean**2 + phiS.std**2)
        - 0.5 * o.expected_log()
        + kl_gamma(o.shape, o.rate, hyper.alpha0_omega, hyper.beta0_omega)
    ).sum((-2, -1))
    if r2 is None:
        r2 = squared_residual(Y, *samples, stacked=stacked)
    l_lambda = (
        0.5 * gamma_mean(lam) * r2
        - 0.5 * lam.expected_log()
        + kl_gamma(lam.shape, lam.rate, hyper.alpha0_lambda, hyper.beta0_lambda)
    ).sum((-2, -1))
    return {"gamma": l_gamma, "omega": l_omega, "lambda": l_lambda}
