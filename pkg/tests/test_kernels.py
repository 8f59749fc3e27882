import numpy as np
import pytest

from wotlab import kernels
from wotlab.kernels import backends

BACKENDS = backends()
compiled_only = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled extension not built")

GEOMETRIES = [  # n, c, h, w, kh, kw, stride, pad
    (2, 3, 6, 6, 3, 3, 1, 1),
    (1, 2, 8, 8, 4, 4, 2, 1),
    (3, 1, 5, 7, 2, 3, 1, 0),
    (2, 4, 9, 9, 3, 3, 3, 0),
]


def reference_im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    out = np.empty((n * ho * wo, c * kh * kw), np.float32)
    for b in range(n):
        for y in range(ho):
            for x in range(wo):
                patch = xp[b, :, y * stride:y * stride + kh, x * stride:x * stride + kw]
                out[(b * ho + y) * wo + x] = patch.reshape(-1)
    return out


def geometry(n, c, h, w, kh, kw, stride, pad, seed=0):
    xp = np.pad(np.random.default_rng(seed).standard_normal((n, c, h, w)).astype(np.float32),
                ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    return xp, ho, wo


@pytest.mark.parametrize("name", sorted(BACKENDS))
@pytest.mark.parametrize("geo", GEOMETRIES)
def test_im2col_matches_loop_reference(name, geo):
    xp, ho, wo = geometry(*geo)
    kh, kw, stride = geo[4:7]
    got = BACKENDS[name].im2col(xp, kh, kw, stride, ho, wo)
    assert np.array_equal(got, reference_im2col(xp, kh, kw, stride, ho, wo))


@pytest.mark.parametrize("name", sorted(BACKENDS))
@pytest.mark.parametrize("geo", GEOMETRIES)
def test_col2im_is_the_adjoint_of_im2col(name, geo):
    # <im2col(x), c> == <x, col2im(c)> for every x, c
    xp, ho, wo = geometry(*geo)
    n, c = xp.shape[:2]
    kh, kw, stride = geo[4:7]
    mod = BACKENDS[name]
    cols = np.random.default_rng(1).standard_normal((n * ho * wo, c * kh * kw)).astype(np.float32)
    lhs = np.vdot(mod.im2col(xp, kh, kw, stride, ho, wo).astype(np.float64), cols.astype(np.float64))
    img = mod.col2im(cols, n, c, xp.shape[2], xp.shape[3], kh, kw, stride, ho, wo)
    rhs = np.vdot(xp.astype(np.float64), img.astype(np.float64))
    assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), 1.0)


def block_fixture(seed=0):
    rng = np.random.default_rng(seed)
    deltas = rng.standard_normal((3, 50)).astype(np.float32)
    grad = rng.standard_normal(50).astype(np.float32)
    starts, stops, ids = [0, 10, 12, 30], [10, 12, 30, 50], [0, 0, 1, 2]
    alpha = rng.uniform(0, 1, (3, 3))
    return grad, deltas, starts, stops, ids, alpha


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_block_kernels_against_dense_formula(name):
    grad, deltas, starts, stops, ids, alpha = block_fixture()
    mod = BACKENDS[name]
    assign = np.repeat(ids, np.subtract(stops, starts))
    want_inner = np.stack([np.bincount(assign, deltas[i].astype(np.float64) * grad, 3) for i in range(3)])
    np.testing.assert_allclose(mod.block_inner(grad, deltas, starts, stops, ids, 3), want_inner, rtol=1e-12)
    want_comb = (alpha[:, assign] * deltas.astype(np.float64)).sum(axis=0)
    np.testing.assert_allclose(mod.block_combine(deltas, alpha, starts, stops, ids), want_comb, rtol=1e-12)


@compiled_only
@pytest.mark.parametrize("geo", GEOMETRIES)
def test_backends_agree_on_convolution_kernels(geo):
    xp, ho, wo = geometry(*geo, seed=3)
    n, c = xp.shape[:2]
    kh, kw, stride = geo[4:7]
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    cols = py.im2col(xp, kh, kw, stride, ho, wo)
    assert np.array_equal(cy.im2col(xp, kh, kw, stride, ho, wo), cols)
    np.testing.assert_allclose(cy.col2im(cols, n, c, xp.shape[2], xp.shape[3], kh, kw, stride, ho, wo),
                               py.col2im(cols, n, c, xp.shape[2], xp.shape[3], kh, kw, stride, ho, wo),
                               rtol=1e-6, atol=1e-6)


def test_selected_backend_is_reported():
    assert kernels.BACKEND in BACKENDS
    assert kernels.im2col is BACKENDS[kernels.BACKEND].im2col
