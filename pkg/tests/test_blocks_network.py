import numpy as np
import pytest

from frdiff import nn
from frdiff.blocks import KINDS
from frdiff.network import build_toy_network
from frdiff.tensor import Tensor


def block_input(net, block, rng, batch=2):
    if net.arch == "toy_unet":
        return Tensor(rng.standard_normal((batch, block.width) + block.spatial))
    n = block.spatial[0] * block.spatial[1]
    return Tensor(rng.standard_normal((batch, n, block.width)))


def random_cond(net, rng, batch=2):
    return net.conditioning(rng.integers(1, 1001, batch), rng.integers(0, net.n_classes + 1, batch))


def blocks_by_kind(small_unet, small_dit):
    out = {}
    for net in (small_unet, small_dit):
        for b in net.blocks:
            out.setdefault(b.kind, (net, b))
    return out


def test_every_kind_is_covered(small_unet, small_dit):
    assert set(blocks_by_kind(small_unet, small_dit)) == set(KINDS)


@pytest.mark.parametrize("kind", KINDS)
def test_split_identity_is_exact(kind, small_unet, small_dit):
    net, block = blocks_by_kind(small_unet, small_dit)[kind]
    rng = np.random.default_rng(11)
    for _ in range(100):
        x = block_input(net, block, rng)
        cond = random_cond(net, rng)
        split = block.finish(net.params, block.split(net.params, x, cond), x, cond)
        np.testing.assert_array_equal(split.data, block.forward(net.params, x, cond).data)


@pytest.mark.parametrize("idx", [1, 2])
def test_dit_block_with_zero_alpha_is_passthrough(small_dit, idx):
    blk = small_dit.block(idx)
    params = dict(small_dit.params)
    for n in ("ada_alpha.w", "ada_alpha.b"):
        params[blk.prefix + n] = Tensor(np.zeros_like(params[blk.prefix + n].data))
    rng = np.random.default_rng(0)
    x = block_input(small_dit, blk, rng)
    for t in (1, 500, 1000):
        cond = small_dit.conditioning(np.array([t, t]), np.array([0, 1]))
        np.testing.assert_array_equal(blk.forward(params, x, cond).data, x.data)


def test_dit_residual_only_recomputes_alpha(small_dit):
    blk = small_dit.block(1)
    rng = np.random.default_rng(1)
    x, x_later = block_input(small_dit, blk, rng), block_input(small_dit, blk, rng)
    c_key = small_dit.conditioning(np.array([800, 800]), np.array([0, 0]))
    c_now = small_dit.conditioning(np.array([300, 300]), np.array([0, 0]))
    m = blk.split(small_dit.params, x, c_key)
    alpha = nn.linear(nn.silu(c_now.emb), small_dit.params[blk.prefix + "ada_alpha.w"],
                      small_dit.params[blk.prefix + "ada_alpha.b"]).data
    expected = alpha[:, None, :] * m.data + x_later.data
    np.testing.assert_allclose(blk.finish(small_dit.params, m, x_later, c_now).data, expected, atol=1e-14)


def test_resnet_and_transformer_split_take_no_time(small_unet):
    rng = np.random.default_rng(2)
    for blk in small_unet.blocks:
        x = block_input(small_unet, blk, rng)
        a = blk.split(small_unet.params, x, small_unet.conditioning(np.array([10, 10]), np.array([0, 1])))
        b = blk.split(small_unet.params, x, small_unet.conditioning(np.array([900, 900]), np.array([0, 1])))
        np.testing.assert_array_equal(a.data, b.data)


@pytest.mark.parametrize("arch", ["toy_unet", "toy_dit"])
def test_output_shape_matches_input(arch):
    net = build_toy_network(arch, width=32, depth=4, seed=0)
    x = np.random.default_rng(0).standard_normal((3, 1, 8, 8))
    out = net(x, np.array([1, 500, 1000]), np.array([0, 1, 2]))
    assert out.shape == x.shape
    assert net.n_layers == 4 and [net.block(i).index for i in range(1, 5)] == [1, 2, 3, 4]


def test_point_corpus_network_shapes():
    net = build_toy_network("toy_dit", width=16, depth=2, seed=0, image_shape=(2, 1, 1))
    out = net(np.zeros((4, 2, 1, 1)), np.full(4, 10), np.zeros(4, dtype=int))
    assert out.shape == (4, 2, 1, 1)


def test_block_index_bounds(small_unet):
    with pytest.raises(IndexError):
        small_unet.block(0)
    with pytest.raises(IndexError):
        small_unet.block(small_unet.n_layers + 1)


def test_unknown_architecture():
    with pytest.raises(ValueError):
        build_toy_network("toy_vit")


def test_build_is_deterministic():
    a = build_toy_network("toy_dit", 16, 2, seed=5)
    b = build_toy_network("toy_dit", 16, 2, seed=5)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_costs_are_positive_and_mostly_skippable(small_unet, small_dit):
    for net in (small_unet, small_dit):
        for s, f in net.block_costs():
            assert s > 0 and f > 0
        assert net.full_cost() == pytest.approx(net.overhead_cost() + sum(s + f for s, f in net.block_costs()))
