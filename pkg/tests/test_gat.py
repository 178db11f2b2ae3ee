import numpy as np
import pytest

from stainpool.errors import ConfigError, ShapeError
from stainpool.gat import GatLayerParams, MhsaParams, gat_forward, mhsa_forward
from stainpool.tensor import Tensor, finite_diff_check, mean, sum_, tanh

from .conftest import path_graph, random_graph


def gat_params(rng, f_in, f_out, heads=2, grad=False):
    mk = lambda *s: Tensor(rng.uniform(-0.7, 0.7, size=s), requires_grad=grad)  # noqa: E731
    return GatLayerParams(
        weights=[mk(f_in, f_out) for _ in range(heads)],
        att_dst=[mk(f_out, 1) for _ in range(heads)],
        att_src=[mk(f_out, 1) for _ in range(heads)],
    )


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def gat_oracle(h, adj, params):
    """Loop-per-node reference of the masked attention layer."""
    outs = []
    for w, ad, asrc in zip(params.weights, params.att_dst, params.att_src):
        wh = h @ w.data
        n = len(h)
        out = np.zeros_like(wh)
        for u in range(n):
            nbrs = [v for v in range(n) if adj[u, v] or u == v]
            e = np.array([float(wh[u] @ ad.data[:, 0] + wh[v] @ asrc.data[:, 0]) for v in nbrs])
            e = np.where(e > 0, e, 0.2 * e)
            b = np.exp(e - e.max())
            b /= b.sum()
            out[u] = sum(bi * wh[v] for bi, v in zip(b, nbrs))
        outs.append(out)
    return elu(np.concatenate(outs, axis=1))


def test_matches_loop_oracle(rng):
    g = random_graph(rng, n=9)
    h = rng.normal(size=(9, 3))
    p = gat_params(rng, 3, 4)
    out, att = gat_forward(h, g, p)
    np.testing.assert_allclose(out.data, gat_oracle(h, g.adjacency(), p), atol=1e-12)
    np.testing.assert_allclose(att.beta.sum(axis=2), 1.0, atol=1e-12)


def test_isolated_node():
    g = path_graph(1)
    p = gat_params(np.random.default_rng(0), 1, 2, heads=1)
    out, att = gat_forward(np.array([[0.7]]), g, p)
    assert att.beta[0, 0, 0] == 1.0
    np.testing.assert_allclose(out.data, elu(np.array([[0.7]]) @ p.weights[0].data))


def test_identical_features_half_attention():
    g = path_graph(2)
    p = gat_params(np.random.default_rng(0), 3, 2, heads=2)
    _, att = gat_forward(np.ones((2, 3)), g, p)
    np.testing.assert_allclose(att.beta, 0.5, atol=1e-15)


def test_beta_zero_off_graph(rng):
    g = random_graph(rng, n=12, k=1)
    _, att = gat_forward(rng.normal(size=(12, 3)), g, gat_params(rng, 3, 2))
    allowed = g.adjacency(self_loops=True) > 0
    assert not att.beta[:, ~allowed].any()
    u, v, b = att.directed(include_self=False)
    assert all(allowed[a, c] and a != c for a, c in zip(u, v))
    assert len(list(att.entries())) == 2 * allowed.sum()


def test_gradient(rng):
    g = random_graph(rng, n=8)
    h = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
    p = gat_params(rng, 3, 2, grad=True)
    params = [h, *p.weights, *p.att_dst, *p.att_src]
    assert finite_diff_check(lambda: mean(gat_forward(h, g, p)[0]), params) < 1e-4


def test_permutation_equivariance(rng):
    g = random_graph(rng, n=10)
    h = rng.normal(size=(10, 3))
    p = gat_params(rng, 3, 2)
    perm = rng.permutation(10)
    out, att = gat_forward(h, g, p)
    out_p, att_p = gat_forward(h[perm], g.permuted(perm), p)
    np.testing.assert_allclose(out_p.data, out.data[perm], atol=1e-13)
    np.testing.assert_allclose(att_p.beta, att.beta[:, perm][:, :, perm], atol=1e-13)


def test_shape_error(rng):
    with pytest.raises(ShapeError):
        gat_forward(np.ones((3, 2)), path_graph(4), gat_params(rng, 2, 2))


def test_param_validation():
    with pytest.raises(ConfigError):
        GatLayerParams(weights=[], att_dst=[], att_src=[])
    with pytest.raises(ConfigError):
        GatLayerParams(weights=[1], att_dst=[1, 2], att_src=[1])


def mhsa(rng, d, grad=False):
    return MhsaParams(*(Tensor(rng.normal(size=(d, d)) * 0.5, requires_grad=grad) for _ in range(4)))


class TestMhsa:
    def test_single_token(self, rng):
        p = mhsa(rng, 4)
        tok = rng.normal(size=(1, 4))
        ctx, w = mhsa_forward(tok, 2, p)
        assert w.shape == (2, 1, 1) and np.all(w == 1.0)
        np.testing.assert_allclose(ctx.data, tok @ p.wv.data @ p.wo.data, atol=1e-14)

    def test_identical_tokens_uniform(self, rng):
        tok = np.tile(rng.normal(size=(1, 6)), (3, 1))
        _, w = mhsa_forward(tok, 3, mhsa(rng, 6))
        np.testing.assert_allclose(w, 1.0 / 3.0, atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        _, w = mhsa_forward(rng.normal(size=(4, 6)), 2, mhsa(rng, 6))
        np.testing.assert_allclose(w.sum(axis=2), 1.0, atol=1e-12)

    def test_divisibility(self, rng):
        with pytest.raises(ConfigError):
            mhsa_forward(np.ones((2, 5)), 2, mhsa(rng, 5))

    def test_gradient(self, rng):
        tok = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        p = mhsa(rng, 4, grad=True)
        f = lambda: sum_(tanh(mhsa_forward(tok, 2, p)[0]))  # noqa: E731
        assert finite_diff_check(f, [tok, p.wq, p.wk, p.wv, p.wo]) < 1e-4
