import pytest
import torch

from vdecomp.distributions import Hyperparams
from vdecomp.network import (
    PRESETS,
    ModelConfig,
    build_model,
    decompose,
    forward_low_rank,
    forward_sparse,
    parameter_count,
)

SMALL = ModelConfig(depth=2, channels=8, groups=4, r0=4)


@pytest.fixture(scope="module")
def model():
    return build_model(SMALL, 0)


def audit_count(cfg: ModelConfig) -> int:
    """Count parameters from layer shapes, independent of the formula."""
    k, C = cfg.kernel, cfg.channels

    def conv(cin, cout, kk):
        return cin * cout * kk * kk + cout

    norm = 2 * C
    trunk = conv(1, C, k) + norm + cfg.depth * 2 * (conv(C, C, k) + norm)
    factor = trunk + (C * 2 * cfg.r0 + 2 * cfg.r0)
    sparse = trunk + conv(C, 2, 1)
    return 2 * factor + sparse


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(depth=0), dict(kernel=4), dict(channels=30, groups=8), dict(r0=0), dict(norm="layer")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_presets(self):
        assert PRESETS["desk"] == ModelConfig(depth=8, kernel=3, channels=32, groups=8, r0=8)
        assert (PRESETS["full"].depth, PRESETS["full"].kernel, PRESETS["full"].r0) == (35, 3, 64)

    @pytest.mark.parametrize("cfg", [ModelConfig(), SMALL, ModelConfig(depth=3, kernel=5, channels=16, groups=4, r0=2)])
    def test_parameter_count(self, cfg):
        m = build_model(cfg, 0)
        actual = sum(p.numel() for p in m.parameters())
        assert actual == parameter_count(cfg) == audit_count(cfg)

    def test_group_norm_default_and_batch_norm_configurable(self):
        m = build_model(SMALL, 0)
        assert any(isinstance(x, torch.nn.GroupNorm) for x in m.modules())
        assert not any(isinstance(x, torch.nn.BatchNorm2d) for x in m.modules())
        mb = build_model(ModelConfig(depth=1, channels=8, groups=4, r0=4, norm="batch"), 0)
        assert any(isinstance(x, torch.nn.BatchNorm2d) for x in mb.modules())


class TestBuild:
    def test_deterministic(self):
        a, b = build_model(SMALL, 3), build_model(SMALL, 3)
        for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb and torch.equal(pa, pb)

    def test_seed_changes_weights(self):
        a, b = build_model(SMALL, 3), build_model(SMALL, 4)
        assert not torch.equal(a.net_A.trunk.conv_in.weight, b.net_A.trunk.conv_in.weight)

    def test_subnetworks_independent(self, model):
        assert not torch.equal(model.net_A.trunk.conv_in.weight, model.net_B.trunk.conv_in.weight)
        ids_A = {id(p) for p in model.params_A.values()}
        assert ids_A.isdisjoint(id(p) for p in model.params_S.values())

    def test_global_rng_untouched(self):
        torch.manual_seed(99)
        ref = torch.rand(3)
        torch.manual_seed(99)
        build_model(SMALL, 5)
        assert torch.equal(torch.rand(3), ref)


class TestForward:
    @pytest.mark.parametrize("h,w", [(8, 8), (12, 9), (16, 32)])
    def test_shapes(self, model, h, w):
        phiA, phiB = forward_low_rank(model, torch.rand(1, h, w))
        assert phiA.mean.shape == (1, h, 4) and phiB.mean.shape == (1, w, 4)
        assert (phiA.std > 0).all() and (phiB.std > 0).all()
        phiS = forward_sparse(model, torch.rand(1, h, w))
        assert phiS.mean.shape == (1, h, w) and (phiS.std > 0).all()

    def test_batched_shapes(self, model):
        phiA, phiB = forward_low_rank(model, torch.rand(3, 1, 10, 12))
        assert phiA.mean.shape == (3, 1, 10, 4) and phiB.mean.shape == (3, 1, 12, 4)

    def test_multichannel(self):
        m = build_model(ModelConfig(depth=1, channels=8, groups=4, r0=2, in_channels=3), 0)
        phiA, _ = forward_low_rank(m, torch.rand(3, 8, 8))
        assert phiA.mean.shape == (3, 8, 2)
        # channels share weights: identical channels give identical factors
        x = torch.rand(1, 8, 8).expand(3, 8, 8)
        pa, _ = forward_low_rank(m, x)
        assert torch.equal(pa.mean[0], pa.mean[2])

    def test_input_errors(self, model):
        with pytest.raises(ValueError):
            forward_low_rank(model, torch.rand(3, 8, 8))
        with pytest.raises(ValueError):
            forward_low_rank(model, torch.rand(1, 3, 8))
        with pytest.raises(ValueError):
            forward_low_rank(model, torch.rand(8))

    def test_single_pixel_probe(self, model):
        Y = torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(0))
        Y2 = Y.clone()
        Y2[0, 5, 7] += 0.5
        with torch.no_grad():
            a, _ = forward_low_rank(model, Y)
            b, _ = forward_low_rank(model, Y2)
        assert not torch.equal(a.mean, b.mean)

    def test_zero_residual_finite(self, model):
        phiS = forward_sparse(model, torch.zeros(1, 8, 8))
        assert torch.isfinite(phiS.mean).all() and torch.isfinite(phiS.std).all()


class TestDecompose:
    def test_additive_identity_32(self, model):
        Y = torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(1))
        res = decompose(model, Y, seed=0)
        assert (Y - (res.L_hat + res.S_hat + res.N_hat)).abs().max().item() <= 1e-6
        assert torch.equal(res.L_hat, res.A_hat @ res.B_hat.transpose(-1, -2))

    def test_additive_identity_64(self):
        m = build_model(SMALL, 0).double()
        Y = torch.rand(1, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        res = decompose(m, Y, seed=0)
        assert (Y - (res.L_hat + res.S_hat + res.N_hat)).abs().max().item() <= 1e-12

    def test_rank_bound(self, model):
        res = decompose(model, torch.rand(1, 16, 16), seed=0)
        # product formed in 64-bit so float32 rounding does not pose as rank
        L = res.A_hat[0].double() @ res.B_hat[0].double().T
        assert torch.allclose(L.float(), res.L_hat[0], atol=1e-5)
        s = torch.linalg.svdvals(L)
        assert int((s > 1e-8 * s[0]).sum()) <= SMALL.r0

    def test_deterministic(self, model):
        Y = torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(2))
        a, b = decompose(model, Y, seed=7), decompose(model, Y, seed=7)
        for k in ("A_hat", "B_hat", "S_hat", "L_hat", "N_hat"):
            assert torch.equal(getattr(a, k), getattr(b, k))
        assert a.losses.to_dict() == b.losses.to_dict()
        c = decompose(model, Y, seed=8)
        assert not torch.equal(a.A_hat, c.A_hat)

    def test_unsupervised_losses(self, model):
        res = decompose(model, torch.rand(1, 16, 16), seed=0)
        assert res.losses.sup.item() == 0.0
        assert not res.L_hat.requires_grad

    def test_hyper_rank_mismatch(self, model):
        with pytest.raises(ValueError, match="r0"):
            decompose(model, torch.rand(1, 16, 16), hyper=Hyperparams(r0=3))
