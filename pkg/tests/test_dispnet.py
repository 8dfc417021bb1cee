import pytest
import torch

from sted.dispnet import DispNet, DispNetConfig

SMALL = {1: 8, 2: 8, 4: 12, 8: 16}


@pytest.fixture
def net():
    torch.manual_seed(0)
    return DispNet(DispNetConfig(image_channels=1, bins=3, widths=SMALL, max_disparity=12.0))


def inputs(b=2, h=64, w=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 1, h, w, generator=g), torch.randn(b, 3, h, w, generator=g)


def test_shape_and_range(net):
    blurry, voxel = inputs()
    disp, diag = net(blurry, voxel)
    assert disp.shape == (2, 1, 64, 64)
    assert torch.isfinite(disp).all()
    assert disp.min() >= 0 and disp.max() <= 12.0
    assert [d.shape[-1] for d in diag["per_scale"].values()] == [8, 16, 32, 64]


def test_deterministic(net):
    blurry, voxel = inputs()
    a, _ = net(blurry, voxel)
    b, _ = net(blurry, voxel)
    assert torch.equal(a, b)


def test_residual_telescoping(net):
    blurry, voxel = inputs()
    disp, diag = net(blurry, voxel)
    terms = diag["terms"]
    assert len(terms) == 4 and all(t.shape == (2, 1, 64, 64) for t in terms)
    torch.testing.assert_close(sum(terms), diag["unclamped"], atol=1e-6, rtol=0)
    torch.testing.assert_close(diag["unclamped"].clamp(0, 12.0), disp)


def test_gradient_reaches_every_parameter(net):
    blurry, voxel = inputs()
    # keep the clamp inactive so every path carries gradient
    net.heads["8"].bias.data.fill_(0.5)
    disp, _ = net(blurry, voxel)
    disp.sum().backward()
    params = list(net.parameters())
    with_grad = [p.grad is not None and p.grad.abs().sum() > 0 for p in params]
    assert sum(with_grad) / len(params) >= 0.99


def test_batch_permutation_equivariance(net):
    blurry, voxel = inputs(b=3)
    perm = torch.tensor([2, 0, 1])
    a, _ = net(blurry, voxel)
    b, _ = net(blurry[perm], voxel[perm])
    torch.testing.assert_close(a[perm], b, atol=1e-6, rtol=0)


def test_init_disparity():
    net = DispNet(DispNetConfig(image_channels=1, bins=2, widths=SMALL, init_disparity=5.0))
    for p in net.heads.parameters():
        if p.dim() == 4:
            p.data.zero_()
    for k in ("4", "2", "1"):
        net.heads[k].bias.data.zero_()
    disp, _ = net(*[t[:, :c] for t, c in zip(inputs(), (1, 2))])
    torch.testing.assert_close(disp, torch.full_like(disp, 5.0))


def test_rejects_bad_dims(net):
    with pytest.raises(ValueError):
        net(torch.rand(1, 1, 60, 64), torch.rand(1, 3, 60, 64))
    with pytest.raises(ValueError):
        net(torch.rand(1, 1, 64, 64), torch.rand(1, 3, 32, 64))


def test_config_validation():
    with pytest.raises(ValueError):
        DispNetConfig(widths={1: 8, 2: 8})
    with pytest.raises(ValueError):
        DispNetConfig(pa_kernel_sizes=(1, 3))
