"""Shared test utilities: finite differences, naive oracles."""

import numpy as np

import smaat_qmix.tensor as T


def fd_grad(loss_fn, array: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``loss_fn()`` w.r.t. ``array``.

    ``loss_fn`` must recompute the scalar loss from the same array object,
    which is perturbed in place one element at a time.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        flat[i] = orig - h
        fm = loss_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise difference scaled by the gradient magnitude."""
    # the floor keeps central-difference noise on exactly-zero gradients
    # (e.g. a bias immediately cancelled by batchnorm) from dominating
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-3)
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(graph_fn, leaves: dict[str, "T.Tensor"], h: float = 1e-6) -> float:
    """Worst relative error across all leaves, 64-bit analytic vs central FD.

    ``graph_fn`` builds a fresh scalar-loss graph from the leaf tensors on
    every call.
    """
    for p in leaves.values():
        p.zero_grad()
    loss = graph_fn()
    T.backward(loss)
    worst = 0.0
    for name, p in leaves.items():
        assert p.grad is not None, f"no gradient reached leaf {name!r}"
        numeric = fd_grad(lambda: graph_fn().item(), p.data, h=h)
        worst = max(worst, max_rel_error(p.grad, numeric))
    return worst


def conv2d_oracle(x, w, b=None, stride=1, padding=1, groups=1):
    """Naive nested-loop cross-correlation, independent of the engine."""
    B, C, H, W = x.shape
    Co, Cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, Co, Ho, Wo), dtype=np.float64)
    opg = Co // groups
    for bi in range(B):
        for o in range(Co):
            g = o // opg
            for oh in range(Ho):
                for ow in range(Wo):
                    acc = 0.0
                    for c in range(Cg):
                        for i in range(k):
                            for j in range(k):
                                acc += (
                                    xp[bi, g * Cg + c, oh * stride + i, ow * stride + j]
                                    * w[o, c, i, j]
                                )
                    out[bi, o, oh, ow] = acc + (b[o] if b is not None else 0.0)
    return out


def adjoint_mismatch(forward_leaf_fn, x_shape, out_shape, rng) -> float:
    """|<Ax, y> - <x, A^T y>| for a linear operator given as a graph builder.

    ``forward_leaf_fn`` maps a leaf tensor to the operator output tensor.
    The transpose action is obtained from one backward pass seeded with y.
    """
    x = T.Tensor(rng.standard_normal(x_shape), requires_grad=True,
                 dtype=np.float64)
    y = rng.standard_normal(out_shape)
    out = forward_leaf_fn(x)
    lhs = float(np.sum(out.data * y))
    loss = T.tsum(out * T.Tensor(y, dtype=np.float64))
    T.backward(loss)
    rhs = float(np.sum(x.data * x.grad))
    return abs(lhs - rhs)


def gradient_suite(seed: int = 0):
    """(name, worst_rel_error, tolerance) for every differentiable op and
    composite block, at 64-bit on small random shapes."""
    from smaat_qmix import blocks

    rng = np.random.default_rng(seed)
    results = []

    def leaf(shape, scale=1.0):
        return T.Tensor(rng.standard_normal(shape) * scale,
                        requires_grad=True, dtype=np.float64)

    with T.default_dtype(np.float64):
        x = leaf((2, 4, 8, 8))
        w = leaf((6, 2, 3, 3), 0.5)
        b = leaf((6,), 0.1)
        results.append(("conv2d_grouped", gradcheck(
            lambda: T.tmean(T.conv2d(x, w, b, padding=1, groups=2)
                            * T.conv2d(x, w, b, padding=1, groups=2)),
            {"x": x, "w": w, "b": b}), 1e-4))

        xs = leaf((2, 3, 5, 5))
        wp = leaf((4, 3, 1, 1), 0.5)
        bp = leaf((4,), 0.1)
        results.append(("conv2d_pointwise", gradcheck(
            lambda: T.mse(T.conv2d(xs, wp, bp), T.Tensor(np.zeros((2, 4, 5, 5)))),
            {"x": xs, "w": wp, "b": bp}), 1e-4))

        xd = leaf((2, 3, 6, 6))
        wd = leaf((6, 1, 3, 3), 0.5)
        bd = leaf((6,), 0.1)
        results.append(("conv2d_depthwise", gradcheck(
            lambda: T.tmean(T.relu(T.conv2d(xd, wd, bd, padding=1, groups=3))),
            {"x": xd, "w": wd, "b": bd}), 1e-4))

        xr = leaf((2, 4, 8, 8))
        results.append(("relu", gradcheck(
            lambda: T.tmean(T.relu(xr) * T.relu(xr)), {"x": xr}), 1e-4))

        xg = leaf((2, 4, 8, 8))
        results.append(("sigmoid", gradcheck(
            lambda: T.tmean(T.sigmoid(xg)), {"x": xg}), 1e-5))

        xm = leaf((2, 4, 8, 8))
        results.append(("maxpool2", gradcheck(
            lambda: T.tmean(T.maxpool2(xm) * T.maxpool2(xm)), {"x": xm}), 1e-4))

        xu = leaf((2, 3, 4, 4))
        results.append(("bilinear_upsample2", gradcheck(
            lambda: T.tmean(T.bilinear_upsample2(xu) * T.bilinear_upsample2(xu)),
            {"x": xu}), 1e-5))

        xa, xb = leaf((2, 2, 4, 4)), leaf((2, 3, 4, 4))
        results.append(("concat_reductions", gradcheck(
            lambda: T.tsum(T.concat_channels(xa, xb)
                           * T.concat_channels(xa, xb)) * (1 / 96.0),
            {"a": xa, "b": xb}), 1e-4))

        xp_, yp = leaf((2, 2, 4, 4)), leaf((2, 2, 4, 4))
        results.append(("mse", gradcheck(
            lambda: T.mse(xp_, yp), {"pred": xp_, "target": yp}), 1e-5))

        xq = leaf((2, 4, 4, 4))
        results.append(("amax_channel", gradcheck(
            lambda: T.tmean(T.amax(xq, axis=1, keepdims=True) * xq),
            {"x": xq}), 1e-4))

        # composite blocks, including batchnorm in train mode
        def block_check(factory, channels, shape):
            blk = factory()
            xc = leaf(shape)
            params = dict(blk.named_parameters())
            params["x"] = xc
            target = T.Tensor(rng.standard_normal((shape[0], channels) + shape[2:]))
            return gradcheck(lambda: T.mse(blk(xc), target), params)

        brng = np.random.default_rng(seed + 1)
        results.append(("double_dsc_block", block_check(
            lambda: blocks.DoubleDSC(brng, 4, 6, multiplier=2), 6,
            (2, 4, 6, 6)), 1e-4))
        results.append(("double_mixconv_block", block_check(
            lambda: blocks.DoubleMixConv(brng, 4, 6), 6, (2, 4, 6, 6)), 1e-4))
        results.append(("cbam_block", block_check(
            lambda: blocks.CBAM(brng, 4, ratio=2, spatial_kernel=3), 4,
            (2, 4, 6, 6)), 1e-4))

    return results
