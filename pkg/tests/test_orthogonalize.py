import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import classical_gs
from omoe.errors import DegenerateStackError, DimensionError
from omoe.orthogonalize import (
    DegenerateStackWarning, OrthoMode, gram_schmidt, gram_schmidt_columns, orthogonality_defect,
    stiefel_residual,
)
from omoe.tensor import Tensor, backward, finite_diff_check


@st.composite
def stacks(draw, max_d=12, max_k=7):
    k = draw(st.integers(1, max_k))
    d = draw(st.integers(k, max(k, max_d)))
    seed = draw(st.integers(0, 2**32 - 1))
    E = np.random.default_rng(seed).normal(size=(d, k))
    # keep the stack comfortably full rank
    if k > 1:
        s = np.linalg.svd(E, compute_uv=False)
        if s[-1] / s[0] < 1e-3:
            E = E + np.eye(d, k)
    return E


def gs(E, mode="orthogonal"):
    return gram_schmidt(Tensor(E), mode).data


def test_hand_examples():
    E = np.array([[1.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(gs(E), [[1.0, 0.5], [1.0, -0.5]], rtol=1e-15)
    r = 1 / math.sqrt(2)
    np.testing.assert_allclose(gs(E, "orthonormal"), [[r, r], [r, -r]], rtol=1e-15)
    I = np.eye(3, 2)
    np.testing.assert_array_equal(gs(I), I)


def test_collinear_flags_degenerate():
    E = np.array([[1.0, 2.0], [0.0, 0.0]])
    with pytest.warns(DegenerateStackWarning):
        out, mask = gram_schmidt(Tensor(E), return_mask=True)
    assert mask.item()
    np.testing.assert_allclose(out.data[:, 1], [0.0, 0.0], atol=1e-15)
    with pytest.raises(DegenerateStackError):
        gram_schmidt(Tensor(E), "orthonormal")


def test_shape_contract():
    with pytest.raises(DimensionError):
        gram_schmidt(Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        gram_schmidt(Tensor(np.ones(3)))


def test_stiefel_residual_examples():
    assert stiefel_residual(np.eye(4, 3)) == 0.0
    u = np.array([1.0, 0.0, 0.0])
    assert abs(stiefel_residual(np.stack([u, u], axis=1)) - math.sqrt(2)) < 1e-15


@given(stacks())
def test_orthogonality(E):
    out = gs(E)
    n = np.linalg.norm(out, axis=0)
    G = out.T @ out
    k = E.shape[1]
    for i in range(k):
        for j in range(i + 1, k):
            assert abs(G[i, j]) <= 1e-6 * n[i] * n[j]


@given(stacks())
def test_orthonormal_on_stiefel(E):
    assert stiefel_residual(gs(E, "orthonormal")) < 1e-6


@given(stacks(max_d=8, max_k=4))
def test_matches_classical_oracle(E):
    out = gs(E)
    ref = classical_gs(E)
    assert np.linalg.norm(out - ref) <= 1e-10 * np.linalg.norm(ref)


@given(stacks())
def test_span_preserved(E):
    Q = gs(E, "orthonormal")
    recon = Q @ (Q.T @ E)
    assert np.linalg.norm(recon - E) <= 1e-8 * np.linalg.norm(E)


@given(stacks())
def test_idempotent(E):
    once = gs(E)
    np.testing.assert_allclose(gs(once), once, rtol=0, atol=1e-10 * np.abs(once).max())


@given(stacks())
def test_first_column_bitwise(E):
    assert gs(E)[:, 0].tobytes() == E[:, 0].tobytes()


@given(stacks(), st.randoms(use_true_random=False))
def test_any_column_order_is_orthogonal(E, rnd):
    perm = list(range(E.shape[1]))
    rnd.shuffle(perm)
    assert orthogonality_defect(gs(E[:, perm])) < 1e-6


def test_order_sensitivity_is_real():
    E = np.array([[1.0, 1.0], [0.0, 1.0], [0.0, 0.0]])
    a = gs(E)
    b = gs(E[:, ::-1])
    assert not np.allclose(a, b[:, ::-1])


def test_off_mode_is_identity(rng):
    E = rng.normal(size=(5, 3))
    out = gram_schmidt(Tensor(E), "off")
    np.testing.assert_array_equal(out.data, E)


def test_batched_matches_per_token(rng):
    E = rng.normal(size=(4, 3, 6, 3))
    batched = gs(E)
    for idx in np.ndindex(4, 3):
        np.testing.assert_array_equal(batched[idx], gs(E[idx]))


def test_gradient_k1_identity(rng):
    E = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
    w = rng.normal(size=(4, 1))
    backward((gram_schmidt(E) * Tensor(w)).sum())
    np.testing.assert_array_equal(E.grad, w)


def test_gradient_first_column_ignores_second(rng):
    E = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    backward((gram_schmidt(E)[:, 0] ** 2).sum())
    assert np.all(E.grad[:, 1] == 0.0)


@pytest.mark.parametrize("mode", ["orthogonal", "orthonormal"])
@pytest.mark.parametrize("seed", range(5))
def test_gradient_finite_differences(mode, seed):
    r = np.random.default_rng(seed)
    E = Tensor(r.normal(size=(3, 2)), requires_grad=True)
    w = Tensor(r.normal(size=(3, 2)))
    assert finite_diff_check(lambda t: (gram_schmidt(t, mode) * w).sum(), E) < 1e-5


def test_columns_api_skips_projection_on_degenerate(rng):
    zero = Tensor(np.zeros((2, 4)))
    x = Tensor(rng.normal(size=(2, 4)))
    outs, mask = gram_schmidt_columns([zero, x])
    assert mask.all()
    np.testing.assert_array_equal(outs[1].data, x.data)


def test_single_precision_still_orthogonal():
    from omoe import tensor
    with tensor.precision("single"):
        E = Tensor(np.random.default_rng(0).normal(size=(16, 4)))
        out = gram_schmidt(E, "orthonormal")
        assert out.dtype == np.float32
        assert stiefel_residual(out) < 1e-5
