import pytest
import torch

from crossmatch.errors import ConfigError
from crossmatch.featperturb import PerturbConfig
from crossmatch.model import STREAM_NAMES, NetConfig, UNet, forward_fixmatch, forward_streams


def _net(seed=0, **kw):
    torch.manual_seed(seed)
    return UNet(NetConfig(**{"base_width": 8, "depth": 2, **kw})).double()


def _views(b=2, hw=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(b, 1, hw, hw, generator=g, dtype=torch.float64) for _ in range(4)]


def test_bottleneck_shape():
    net = UNet(NetConfig(base_width=16, depth=4))
    pyr = net.encode(torch.zeros(2, 1, 64, 64))
    assert pyr.bottleneck.shape == (2, 256, 4, 4)
    assert net(torch.zeros(2, 1, 64, 64)).shape == (2, 2, 64, 64)


def test_indivisible_input():
    with pytest.raises(ConfigError):
        UNet(NetConfig(depth=4)).encode(torch.zeros(1, 1, 60, 64))


def test_batch_purity():
    # group norm is per sample, so concatenation does not mix samples
    net = _net().eval()
    a, b = _views(3)[:2]
    torch.testing.assert_close(net(torch.cat([a, b]))[:3], net(a))


def test_call_counts():
    net = _net()
    x_l, x_w, x_s1, x_s2 = _views()
    net.counter.reset()
    forward_streams(net, x_w, x_s1, x_s2, PerturbConfig(), 3, x_l=x_l)
    assert (net.counter.encoder, net.counter.decoder) == (2, 3)
    net.counter.reset()
    forward_streams(net, x_w, x_s1, x_s2, PerturbConfig(), 3, x_l=x_l, naive=True)
    assert (net.counter.encoder, net.counter.decoder) == (3, 7)
    net.counter.reset()
    forward_fixmatch(net, x_w, x_s1, x_l)
    assert (net.counter.encoder, net.counter.decoder) == (1, 1)


@pytest.mark.parametrize("kind", ["channel_dropout", "alpha_dropout", "feature_alpha_dropout"])
def test_stacked_matches_naive(kind):
    net = _net()
    x_l, x_w, x_s1, x_s2 = _views()
    cfg = PerturbConfig(kind=kind)
    sup_a, a = forward_streams(net, x_w, x_s1, x_s2, cfg, 17, x_l=x_l)
    sup_b, b = forward_streams(net, x_w, x_s1, x_s2, cfg, 17, x_l=x_l, naive=True)
    torch.testing.assert_close(sup_a, sup_b, rtol=1e-6, atol=1e-9)
    for name in STREAM_NAMES:
        torch.testing.assert_close(a[name], b[name], rtol=1e-6, atol=1e-9)


def test_zero_rates_collapse_weak_streams():
    net = _net()
    _, x_w, x_s1, x_s2 = _views()
    _, s = forward_streams(net, x_w, x_s1, x_s2, PerturbConfig(weak_rate=0.0, strong_rate=0.0), 0)
    torch.testing.assert_close(s.p_w_w, s.p_w_n)
    torch.testing.assert_close(s.p_w_s, s.p_w_n)
    torch.testing.assert_close(s.p_s_s, s.p_s2)


def test_identical_views_identical_streams():
    net = _net()
    x = _views()[0]
    _, s = forward_streams(net, x, x, x, PerturbConfig(weak_rate=0.0, strong_rate=0.0), 0)
    for name in STREAM_NAMES:
        torch.testing.assert_close(s[name], s.p_w_n)


def test_perturbation_changes_streams():
    net = _net()
    _, x_w, x_s1, x_s2 = _views()
    _, s = forward_streams(net, x_w, x_s1, x_s2, PerturbConfig(), 5)
    assert not torch.allclose(s.p_w_s, s.p_w_n)


def test_gradients_reach_every_parameter():
    net = _net()
    x_l, x_w, x_s1, x_s2 = _views()
    sup, s = forward_streams(net, x_w, x_s1, x_s2, PerturbConfig(), 1, x_l=x_l)
    loss = sup.square().mean() + sum(m.square().mean() for m in s.maps().values())
    loss.backward()
    for name, p in net.named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name
        assert p.grad.abs().sum() > 0, name
