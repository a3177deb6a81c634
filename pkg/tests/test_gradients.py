"""Finite-difference and adjoint verification of every differentiable op."""

import numpy as np
import pytest

import smaat_qmix.tensor as T

from helpers import adjoint_mismatch, gradient_suite

SUITE = gradient_suite(seed=0)


@pytest.mark.parametrize("name,err,tol", SUITE, ids=[s[0] for s in SUITE])
def test_finite_difference(name, err, tol):
    assert err < tol, f"{name}: max relative error {err:.3e} >= {tol}"


def test_conv2d_adjoint():
    rng = np.random.default_rng(20)
    w = T.Tensor(rng.standard_normal((5, 4, 3, 3)), dtype=np.float64)
    gap = adjoint_mismatch(lambda x: T.conv2d(x, w, padding=1),
                           (2, 4, 8, 8), (2, 5, 8, 8), rng)
    assert gap < 1e-10


def test_conv2d_strided_adjoint():
    rng = np.random.default_rng(21)
    w = T.Tensor(rng.standard_normal((4, 2, 3, 3)), dtype=np.float64)
    gap = adjoint_mismatch(lambda x: T.conv2d(x, w, stride=2, padding=1),
                           (1, 2, 7, 7), (1, 4, 4, 4), rng)
    assert gap < 1e-10


def test_bilinear_upsample2_adjoint():
    rng = np.random.default_rng(22)
    gap = adjoint_mismatch(T.bilinear_upsample2, (2, 4, 6, 6),
                           (2, 4, 12, 12), rng)
    assert gap < 1e-10
