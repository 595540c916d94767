"""Differentiable loss terms of the decomposition objective.

Every term sums over the matrix axes and keeps leading (batch, channel) axes.
:func:`loss_total` reduces per image (sum over channels) and averages over
the batch.  Additive constants of the negative ELBO are dropped.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields

import torch
from torch import Tensor

from .distributions import GaussianFactorPosterior, Hyperparams, kl_gamma
from .errors import InvalidPosteriorError
from .leaf_updates import LeafState, leaf_objectives


class Task(str, enum.Enum):
    DEN = "den"
    UAD = "uad"


def _log_var(std: Tensor) -> Tensor:
    if (std <= 0).any():
        raise InvalidPosteriorError("log-variance requires strictly positive std")
    return 2 * torch.log(std)


def loss_fid(Y: Tensor, A_hat: Tensor, B_hat: Tensor, S_hat: Tensor, lambda_mean: Tensor) -> Tensor:
    """0.5 * || sqrt(mu_Lambda) * (Y - (A B^T + S)) ||_F^2 for one sample."""
    if (lambda_mean < 0).any():
        raise InvalidPosteriorError("negative noise precision")
    resid = Y - (A_hat @ B_hat.transpose(-1, -2) + S_hat)
    return 0.5 * (lambda_mean * resid**2).sum((-2, -1))


def loss_rank(phiA: GaussianFactorPosterior, phiB: GaussianFactorPosterior, gamma_mean_vec: Tensor) -> Tensor:
    g = gamma_mean_vec.unsqueeze(-2)

    def side(phi):
        return (phi.mean**2 * g).sum((-2, -1)) + (g * phi.std**2).sum((-2, -1)) - _log_var(phi.std).sum((-2, -1))

    return 0.5 * (side(phiA) + side(phiB))


def loss_sparse(phiS: GaussianFactorPosterior, omega_mean: Tensor) -> Tensor:
    terms = phiS.mean**2 * omega_mean + omega_mean * phiS.std**2 - _log_var(phiS.std)
    return 0.5 * terms.sum((-2, -1))


def loss_orth(A_hat: Tensor, B_hat: Tensor) -> Tensor:
    r0 = A_hat.shape[-1]
    eye = torch.eye(r0, dtype=A_hat.dtype)
    ga = A_hat.transpose(-1, -2) @ A_hat - eye
    gb = B_hat.transpose(-1, -2) @ B_hat - eye
    return (ga**2).sum((-2, -1)) + (gb**2).sum((-2, -1))


def loss_sup_den(L_hat: Tensor, S_hat: Tensor, U: Tensor, sigma0: float) -> Tensor:
    return 0.5 * sigma0 * (((L_hat + S_hat - U) ** 2).sum((-2, -1)) + ((L_hat - U) ** 2).sum((-2, -1)))


def loss_sup_uad(L_hat: Tensor, S_hat: Tensor, U_N: Tensor, U_A: Tensor, sigma0: float) -> Tensor:
    return 0.5 * sigma0 * (((L_hat - U_N) ** 2).sum((-2, -1)) + ((S_hat - U_A) ** 2).sum((-2, -1)))


@dataclass
class LossBreakdown:
    """Per-term values; ``total = fid + sup + rank + sparse + tau*orth``.

    ``l_gamma``, ``l_omega``, ``l_lambda`` are the prior KL diagnostics and do
    not enter ``total``.  Fields are 0-dim tensors (``total`` keeps its graph).
    """

    fid: Tensor
    rank: Tensor
    sparse: Tensor
    orth: Tensor
    sup: Tensor
    total: Tensor
    l_gamma: Tensor
    l_omega: Tensor
    l_lambda: Tensor

    def to_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}

    def detach(self) -> "LossBreakdown":
        return LossBreakdown(**{f.name: getattr(self, f.name).detach() for f in fields(self)})


def reduce_items(x: Tensor, image_ndim: int) -> Tensor:
    """Collapse leading axes: channels are summed, the batch axis averaged.

    ``image_ndim`` is the dimensionality of the observation (2: h x w,
    3: c x h x w, 4: batch x c x h x w).
    """
    if image_ndim <= 2:
        return x
    if image_ndim == 3:
        return x.sum()
    return x.sum(tuple(range(1, x.ndim))).mean()


def prior_kls(leaf: LeafState, hyper: Hyperparams):
    g, o, lam = leaf.gamma, leaf.omega, leaf.lam
    return (
        kl_gamma(g.shape, g.rate, hyper.alpha0_gamma, hyper.beta0_gamma).sum(-1),
        kl_gamma(o.shape, o.rate, hyper.alpha0_omega, hyper.beta0_omega).sum((-2, -1)),
        kl_gamma(lam.shape, lam.rate, hyper.alpha0_lambda, hyper.beta0_lambda).sum((-2, -1)),
    )


def loss_total(
    Y: Tensor,
    target,
    phiA: GaussianFactorPosterior,
    phiB: GaussianFactorPosterior,
    phiS: GaussianFactorPosterior,
    samples,
    leaf: LeafState,
    hyper: Hyperparams,
    task: Task | None = None,
    tau: float | None = None,
) -> LossBreakdown:
    """Assemble all terms.

    ``target`` is the clean image for ``Task.DEN``, a ``(U_N, U_A)`` pair for
    ``Task.UAD`` and ignored when ``task`` is None (unsupervised objective).
    ``tau`` overrides ``hyper.tau``.
    """
    A_hat, B_hat, S_hat = samples
    nd = Y.ndim
    mu_g, mu_o, mu_l = (m.detach() for m in leaf.means())
    red = lambda x: reduce_items(x, nd)  # noqa: E731

    fid = red(loss_fid(Y, A_hat, B_hat, S_hat, mu_l))
    rank = red(loss_rank(phiA, phiB, mu_g))
    sparse = red(loss_sparse(phiS, mu_o))
    orth = red(loss_orth(A_hat, B_hat))
    L_hat = A_hat @ B_hat.transpose(-1, -2)
    if task is None:
        sup = torch.zeros((), dtype=Y.dtype)
    elif Task(task) is Task.DEN:
        sup = red(loss_sup_den(L_hat, S_hat, target, hyper.sigma0))
    else:
        U_N, U_A = target
        sup = red(loss_sup_uad(L_hat, S_hat, U_N, U_A, hyper.sigma0))
    tau = hyper.tau if tau is None else tau
    total = fid + sup + rank + sparse + tau * orth
    kg, ko, kl = (red(k).detach() for k in prior_kls(leaf.detach(), hyper))
    return LossBreakdown(fid, rank, sparse, orth, sup, total, kg, ko, kl)


def negative_elbo(Y, phiA, phiB, phiS, samples, leaf: LeafState, hyper: Hyperparams, stacked: bool = False, r2: Tensor | None = None) -> Tensor:
    """Unsupervised negative ELBO (up to constants), reduced like :func:`loss_total`.

    Adds the ``-E[ln precision]`` terms the middle-level objective drops, so
    this is the quantity both coordinate steps decrease.
    """
    lo = leaf_objectives(Y, phiA, phiB, phiS, samples, leaf, hyper, stacked=stacked, r2=r2)
    middle_only = -0.5 * (_log_var(phiA.std).sum((-2, -1)) + _log_var(phiB.std).sum((-2, -1)))
    middle_only = middle_only - 0.5 * _log_var(phiS.std).sum((-2, -1))
    full = lo["gamma"] + lo["omega"] + lo["lambda"] + middle_only
    return reduce_items(full, Y.ndim)


def value_and_grad(fn, *tensors: Tensor):
    """Evaluate scalar ``fn(*tensors)`` and its gradients w.r.t. each tensor."""
    leaves = [t.detach().clone().requires_grad_(True) for t in tensors]
    value = fn(*leaves)
    grads = torch.autograd.grad(value, leaves, allow_unused=True)
    grads = tuple(torch.zeros_like(t) if g is None else g for t, g in zip(leaves, grads))
    return value.detach(), grads
