"""Modular amortized inference network f_theta = (f_A, f_B, f_S).

f_A and f_B share no weights: each is a residual conv trunk followed by
pooling along one image axis and a linear head emitting ``r0`` means and
``r0`` log-stds per row (f_A) or column (f_B).  f_S maps the residual
``Y - A_hat B_hat^T`` to a per-pixel mean and log-std.  Channels of a
multi-channel image are decomposed independently with the same weights.

Parameter count (k = kernel, C = channels, d = depth; GroupNorm has 2C
parameters, BatchNorm the same)::

    trunk(k, C, d) = (k^2 C + C) + 2C + d (2 k^2 C^2 + 6C)
    total          = 3 trunk(k, C, d) + 2 * 2 r0 (C + 1) + 2 (C + 1)
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
from torch import Tensor

from .distributions import GaussianFactorPosterior, Hyperparams, sample_factor
from .leaf_updates import LeafState, leaf_update_all
from .losses import LossBreakdown, Task, loss_total

LOG_STD_INIT = -2.3  # about ln(0.1)


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 8
    kernel: int = 3
    channels: int = 32
    groups: int = 8
    r0: int = 8
    in_channels: int = 1
    norm: str = "group"

    def __post_init__(self):
        for name in ("depth", "kernel", "channels", "groups", "r0", "in_channels"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.channels % self.groups:
            raise ValueError(f"groups ({self.groups}) must divide channels ({self.channels})")
        if self.norm not in ("group", "batch"):
            raise ValueError(f"norm must be 'group' or 'batch', got {self.norm!r}")


PRESETS = {
    "desk": ModelConfig(),
    # deepest depth/kernel pair with r0 = 64 from the full-scale ablation
    "full": ModelConfig(depth=35, kernel=3, channels=64, groups=8, r0=64),
}


def parameter_count(cfg: ModelConfig) -> int:
    k, C, d, r0 = cfg.kernel, cfg.channels, cfg.depth, cfg.r0
    trunk = (k * k * C + C) + 2 * C + d * (2 * k * k * C * C + 6 * C)
    return 3 * trunk + 2 * 2 * r0 * (C + 1) + 2 * (C + 1)


def _norm(cfg: ModelConfig) -> nn.Module:
    if cfg.norm == "batch":
        return nn.BatchNorm2d(cfg.channels)
    return nn.GroupNorm(cfg.groups, cfg.channels)


class ResidualBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        pad = cfg.kernel // 2
        self.conv1 = nn.Conv2d(cfg.channels, cfg.channels, cfg.kernel, padding=pad)
        self.norm1 = _norm(cfg)
        self.conv2 = nn.Conv2d(cfg.channels, cfg.channels, cfg.kernel, padding=pad)
        self.norm2 = _norm(cfg)

    def forward(self, x):
        y = torch.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return torch.relu(x + y)


class Trunk(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv_in = nn.Conv2d(1, cfg.channels, cfg.kernel, padding=cfg.kernel // 2)
        self.norm_in = _norm(cfg)
        self.blocks = nn.Sequential(*[ResidualBlock(cfg) for _ in range(cfg.depth)])

    def forward(self, x):
        return self.blocks(torch.relu(self.norm_in(self.conv_in(x))))


class FactorNet(nn.Module):
    """Image -> (mean, log_std) of one factor, shape (n, r0) with n = h or w."""

    def __init__(self, cfg: ModelConfig, axis: str):
        super().__init__()
        self.axis = axis
        self.trunk = Trunk(cfg)
        self.head = nn.Linear(cfg.channels, 2 * cfg.r0)
        self.r0 = cfg.r0
        nn.init.zeros_(self.head.bias)
        with torch.no_grad():
            self.head.bias[cfg.r0 :] = LOG_STD_INIT

    def forward(self, x):
        feats = self.trunk(x)  # (n, C, h, w)
        pooled = feats.mean(dim=3) if self.axis == "rows" else feats.mean(dim=2)  # (n, C, h|w)
        out = self.head(pooled.transpose(1, 2))  # (n, h|w, 2 r0)
        return out[..., : self.r0], out[..., self.r0 :]


class SparseNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.trunk = Trunk(cfg)
        self.head = nn.Conv2d(cfg.channels, 2, 1)
        nn.init.zeros_(self.head.bias)
        with torch.no_grad():
            self.head.bias[1] = LOG_STD_INIT

    def forward(self, x):
        out = self.head(self.trunk(x))
        return out[:, 0], out[:, 1]


class Model(nn.Module):
    FORMAT_VERSION = 1

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.version = self.FORMAT_VERSION
        self.net_A = FactorNet(config, "rows")
        self.net_B = FactorNet(config, "cols")
        self.net_S = SparseNet(config)

    @property
    def params_A(self):
        return dict(self.net_A.named_parameters())

    @property
    def params_B(self):
        return dict(self.net_B.named_parameters())

    @property
    def params_S(self):
        return dict(self.net_S.named_parameters())

    def clone(self) -> "Model":
        return copy.deepcopy(self)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = Model(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def _flatten_channels(Y: Tensor, cfg: ModelConfig):
    """(h,w) | (c,h,w) | (b,c,h,w) -> ((b*c, 1, h, w), leading shape)."""
    if Y.ndim == 2:
        Y = Y[None]
    if Y.ndim not in (3, 4):
        raise ValueError(f"expected an image of 2-4 dims, got shape {tuple(Y.shape)}")
    lead = Y.shape[:-2]
    c = lead[-1]
    if Y.ndim >= 3 and c != cfg.in_channels:
        raise ValueError(f"model expects {cfg.in_channels} channel(s), image has {c}")
    h, w = Y.shape[-2:]
    if min(h, w) < cfg.r0:
        raise ValueError(f"image {h}x{w} is smaller than r0={cfg.r0}")
    return Y.reshape(-1, 1, h, w), lead


def _param_dtype(model: Model):
    return next(model.parameters()).dtype


def forward_low_rank(model: Model, Y: Tensor):
    x, lead = _flatten_channels(Y.to(_param_dtype(model)), model.config)
    muA, lsA = model.net_A(x)
    muB, lsB = model.net_B(x)
    r0 = model.config.r0
    h, w = x.shape[-2:]
    out_lead = lead if Y.ndim > 2 else ()
    phiA = GaussianFactorPosterior.from_log_std(muA.reshape(*out_lead, h, r0), lsA.reshape(*out_lead, h, r0))
    phiB = GaussianFactorPosterior.from_log_std(muB.reshape(*out_lead, w, r0), lsB.reshape(*out_lead, w, r0))
    return phiA, phiB


def forward_sparse(model: Model, residual: Tensor) -> GaussianFactorPosterior:
    x, lead = _flatten_channels(residual.to(_param_dtype(model)), model.config)
    mu, ls = model.net_S(x)
    out_lead = lead if residual.ndim > 2 else ()
    shape = (*out_lead, *x.shape[-2:])
    return GaussianFactorPosterior.from_log_std(mu.reshape(shape), ls.reshape(shape))


@dataclass
class DecompositionResult:
    phiA: GaussianFactorPosterior
    phiB: GaussianFactorPosterior
    phiS: GaussianFactorPosterior
    A_hat: Tensor
    B_hat: Tensor
    S_hat: Tensor
    L_hat: Tensor
    N_hat: Tensor
    leaf: LeafState
    losses: LossBreakdown
    seed: int
    history: list = field(default_factory=list)

    def detach(self) -> "DecompositionResult":
        return DecompositionResult(
            self.phiA.detach(),
            self.phiB.detach(),
            self.phiS.detach(),
            self.A_hat.detach(),
            self.B_hat.detach(),
            self.S_hat.detach(),
            self.L_hat.detach(),
            self.N_hat.detach(),
            self.leaf.detach(),
            self.losses.detach(),
            self.seed,
            list(self.history),
        )


def run_model(
    model: Model,
    Y: Tensor,
    hyper: Hyperparams,
    seed: int | torch.Generator = 0,
    task: Task | None = None,
    target=None,
    num_samples: int = 1,
    tau: float | None = None,
) -> DecompositionResult:
    """Forward pass with autograd enabled; used by training and adaptation.

    With ``num_samples > 1`` the precision update averages squared residuals
    over extra draws; the loss uses the first draw.
    """
    if hyper.r0 != model.config.r0:
        raise ValueError(f"hyper.r0={hyper.r0} differs from model r0={model.config.r0}")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    Y = Y.to(_param_dtype(model))
    phiA, phiB = forward_low_rank(model, Y)
    A_hat, B_hat = sample_factor(phiA, gen), sample_factor(phiB, gen)
    L_hat = A_hat @ B_hat.transpose(-1, -2)
    phiS = forward_sparse(model, Y - L_hat)
    S_hat = sample_factor(phiS, gen)
    N_hat = Y - (L_hat + S_hat)  # same association as the identity check
    if num_samples > 1:
        with torch.no_grad():
            extra = [(sample_factor(phiA, gen), sample_factor(phiB, gen), sample_factor(phiS, gen)) for _ in range(num_samples - 1)]
            stack = [torch.stack([s.detach()] + [e[i] for e in extra]) for i, s in enumerate((A_hat, B_hat, S_hat))]
        leaf = leaf_update_all(Y, phiA, phiB, phiS, stack, hyper, stacked=True)
    else:
        leaf = leaf_update_all(Y, phiA, phiB, phiS, (A_hat, B_hat, S_hat), hyper)
    losses = loss_total(Y, target, phiA, phiB, phiS, (A_hat, B_hat, S_hat), leaf, hyper, task=task, tau=tau)
    seed_value = int(seed) if not isinstance(seed, torch.Generator) else int(gen.initial_seed())
    return DecompositionResult(phiA, phiB, phiS, A_hat, B_hat, S_hat, L_hat, N_hat, leaf, losses, seed_value)


@torch.no_grad()
def decompose(model: Model, Y: Tensor, seed: int = 0, hyper: Hyperparams | None = None, num_samples: int = 1) -> DecompositionResult:
    """Inference-only decomposition ``Y = L_hat + S_hat + N_hat`` (no supervision term)."""
    hyper = hyper or Hyperparams(r0=model.config.r0)
    was_training = model.training
    model.eval()
    try:
        return run_model(model, Y, hyper, seed=seed, num_samples=num_samples).detach()
    finally:
        model.train(was_training)


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
