"""Independent oracles and the finite-difference gradient-check suite.

The oracles are deliberately naive (explicit loops, no shared code with the
fast paths) so they can gate the optimized implementations. The gradient
checks compare every analytic backward against central finite differences
of a scalar probe (sum of output times a fixed random cotangent) at double
precision, with inputs rejection-sampled away from non-differentiable sets
(pool ties, ReLU zeros, TV kinks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers, loss as loss_mod
from .metrics import gaussian_kernel
from .model import SynNetModel, Topology
from .tensor import RngStream, ParameterError


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def conv_oracle(x, w, b):
    """Five-nested-loop direct cross-correlation with explicit zero padding."""
    n, in_c, h, wd = x.shape
    out_c, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((n, out_c, h, wd), dtype=np.float64)
    for bi in range(n):
        for o in range(out_c):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for ci in range(in_c):
                        for u in range(k):
                            for v in range(k):
                                ii, jj = i + u - p, j + v - p
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += float(x[bi, ci, ii, jj]) * float(w[o, ci, u, v])
                    out[bi, o, i, j] = acc + float(b[o])
    return out


def maxpool_oracle(x):
    """Exhaustive 2x2 window scan; returns (pooled, offsets)."""
    n, c, h, w = x.shape
    pooled = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    offs = np.zeros((n, c, h // 2, w // 2), dtype=np.uint8)
    for bi in range(n):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    best, boff = None, 0
                    for o, (du, dv) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                        v = x[bi, ci, 2 * i + du, 2 * j + dv]
                        if best is None or v > best:
                            best, boff = v, o
                    pooled[bi, ci, i, j] = best
                    offs[bi, ci, i, j] = boff
    return pooled, offs


def ssim_standard_oracle(pred, target, window=11, sigma=1.5, dynamic_range=1.0):
    """Per-window double-loop three-factor SSIM (valid windows)."""
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    kern = gaussian_kernel(window, sigma)
    n, c, h, w = pred.shape
    vals = []
    for bi in range(n):
        for ci in range(c):
            for i in range(h - window + 1):
                for j in range(w - window + 1):
                    xw = target[bi, ci, i:i + window, j:j + window].astype(np.float64)
                    yw = pred[bi, ci, i:i + window, j:j + window].astype(np.float64)
                    mx = float((kern * xw).sum())
                    my = float((kern * yw).sum())
                    vx = float((kern * xw * xw).sum()) - mx * mx
                    vy = float((kern * yw * yw).sum()) - my * my
                    cov = float((kern * xw * yw).sum()) - mx * my
                    vals.append(((2 * mx * my + c1) * (2 * cov + c2))
                                / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff(f, x, h=1e-5):
    """Central differences of a scalar function, elementwise over x."""
    if h <= 0:
        raise ParameterError("step h must be > 0")
    grad = np.zeros_like(x, dtype=np.float64)
    flat = grad.ravel()
    xf = x.ravel()
    for i in range(x.size):
        orig = xf[i]
        xf[i] = orig + h
        fp = f(x)
        xf[i] = orig - h
        fm = f(x)
        xf[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ParameterError("non-finite probe value during finite differencing")
        flat[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_err(a, b, atol=0.0):
    """max over elements of |a - b| / max(1e-12, |a| + |b|).

    `atol` treats absolute differences at rounding-noise level as exact:
    parameters whose true gradient is identically zero (a conv bias feeding
    batchnorm) leave ~1e-13 residue in the analytic path that the 1e-12
    denominator floor would otherwise blow up into an error of order 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    err = diff / np.maximum(1e-12, np.abs(a) + np.abs(b))
    if atol > 0:
        err = np.where(diff <= atol, 0.0, err)
    return float(np.max(err))


# ---------------------------------------------------------------------------
# the gradient-check suite
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tol


def _u(rng, shape, lo=-1.0, hi=1.0):
    return rng.uniform(shape, lo, hi, dtype="double")


def _staircase(rng, n, c, h, w):
    """Image whose TV forward differences all have magnitude > 0.05."""
    out = np.zeros((n, c, h, w), dtype=np.float64)
    for bi in range(n):
        for ci in range(c):
            si = np.cumsum(np.where(_u(rng, (h,)) > 0, 1.0, -1.0)
                           * (0.1 + 0.2 * np.abs(_u(rng, (h,)))))
            sj = np.cumsum(np.where(_u(rng, (w,)) > 0, 1.0, -1.0)
                           * (0.1 + 0.2 * np.abs(_u(rng, (w,)))))
            out[bi, ci] = si[:, None] + sj[None, :]
    return out


def gradcheck_suite(seed: int = 0, h_step: float = 1e-5):
    """Run every layer and loss gradient check plus the tiny whole-model
    check; returns a list of CheckResult in a fixed order."""
    rng = RngStream(seed)
    results = []

    def check(name, analytic, numeric, tol, atol=0.0):
        results.append(CheckResult(name, max_rel_err(analytic, numeric, atol), tol))

    # conv 3x3
    x = _u(rng, (2, 3, 6, 6))
    w = _u(rng, (4, 3, 3, 3), -0.5, 0.5)
    b = _u(rng, (4,), -0.5, 0.5)
    cot = _u(rng, (2, 4, 6, 6))
    y, tape = layers.conv2d_forward(x, w, b)
    gx, gw, gb = layers.conv2d_backward(tape, cot)
    check("conv3x3/input", gx,
          finite_diff(lambda v: float((layers.conv2d_forward(v, w, b)[0] * cot).sum()), x.copy(), h_step), 1e-6)
    check("conv3x3/weight", gw,
          finite_diff(lambda v: float((layers.conv2d_forward(x, v, b)[0] * cot).sum()), w.copy(), h_step), 1e-6)
    check("conv3x3/bias", gb,
          finite_diff(lambda v: float((layers.conv2d_forward(x, w, v)[0] * cot).sum()), b.copy(), h_step), 1e-6)

    # conv 1x1
    w1 = _u(rng, (2, 3, 1, 1), -0.5, 0.5)
    b1 = _u(rng, (2,), -0.5, 0.5)
    cot1 = _u(rng, (2, 2, 6, 6))
    _, tape1 = layers.conv2d_forward(x, w1, b1)
    gx1, _, _ = layers.conv2d_backward(tape1, cot1)
    check("conv1x1/input", gx1,
          finite_diff(lambda v: float((layers.conv2d_forward(v, w1, b1)[0] * cot1).sum()), x.copy(), h_step), 1e-6)

    # batchnorm (train mode)
    xb = _u(rng, (3, 2, 5, 5))
    gamma = _u(rng, (2,), 0.5, 1.5)
    beta = _u(rng, (2,), -0.5, 0.5)
    rm, rv = np.zeros(2), np.ones(2)
    cotb = _u(rng, (3, 2, 5, 5))

    def bn_probe(xv, gv, bv):
        yv, _, _, _ = layers.batchnorm_forward(xv, gv, bv, rm, rv, mode="train")
        return float((yv * cotb).sum())

    yb, tb, _, _ = layers.batchnorm_forward(xb, gamma, beta, rm, rv, mode="train")
    gxb, gg, gbeta = layers.batchnorm_backward(tb, cotb)
    check("batchnorm/input", gxb,
          finite_diff(lambda v: bn_probe(v, gamma, beta), xb.copy(), h_step), 1e-6)
    check("batchnorm/gamma", gg,
          finite_diff(lambda v: bn_probe(xb, v, beta), gamma.copy(), h_step), 1e-6)
    check("batchnorm/beta", gbeta,
          finite_diff(lambda v: bn_probe(xb, gamma, v), beta.copy(), h_step), 1e-6)

    # relu, away from 0
    xr = _u(rng, (2, 2, 5, 5))
    xr = np.sign(xr) * (0.1 + np.abs(xr))
    cotr = _u(rng, (2, 2, 5, 5))
    _, tr = layers.relu_forward(xr)
    check("relu/input", layers.relu_backward(tr, cotr),
          finite_diff(lambda v: float((layers.relu_forward(v)[0] * cotr).sum()), xr.copy(), h_step), 1e-7)

    # maxpool on tie-free input
    xp = _u(rng, (2, 2, 6, 6))
    cotp = _u(rng, (2, 2, 3, 3))
    _, _, tp = layers.maxpool2x2_forward(xp)
    check("maxpool/input", layers.maxpool2x2_backward(tp, cotp),
          finite_diff(lambda v: float((layers.maxpool2x2_forward(v)[0] * cotp).sum()), xp.copy(), h_step), 1e-6)

    # unpool
    vals = _u(rng, (2, 2, 3, 3), 0.1, 1.0)
    _, idx, _ = layers.maxpool2x2_forward(_u(rng, (2, 2, 6, 6)))
    cotu = _u(rng, (2, 2, 6, 6))
    _, tu = layers.unpool2x2_forward(vals, idx)
    check("unpool/input", layers.unpool2x2_backward(tu, cotu),
          finite_diff(lambda v: float((layers.unpool2x2_forward(v, idx)[0] * cotu).sum()), vals.copy(), h_step), 1e-7)

    # L2 loss, plain and weighted
    pred = _u(rng, (2, 1, 8, 8), 0.0, 1.0)
    targ = _u(rng, (2, 1, 8, 8), 0.0, 1.0)
    wmap = 1.0 + np.abs(_u(rng, (2, 1, 8, 8)))
    check("loss/l2", loss_mod.l2_loss(pred, targ)[1],
          finite_diff(lambda v: loss_mod.l2_loss(v, targ)[0], pred.copy(), h_step), 1e-7)
    check("loss/weighted_l2", loss_mod.l2_loss(pred, targ, wmap)[1],
          finite_diff(lambda v: loss_mod.l2_loss(v, targ, wmap)[0], pred.copy(), h_step), 1e-7)

    # SSIM loss, local and global
    cfg_local = loss_mod.SsimConfig(mode="local", window=5)
    cfg_global = loss_mod.SsimConfig(mode="global")
    check("loss/ssim_local", loss_mod.ssim_loss(pred, targ, cfg_local, wmap)[1],
          finite_diff(lambda v: loss_mod.ssim_loss(v, targ, cfg_local, wmap)[0], pred.copy(), h_step), 1e-5)
    check("loss/ssim_global", loss_mod.ssim_loss(pred, targ, cfg_global)[1],
          finite_diff(lambda v: loss_mod.ssim_loss(v, targ, cfg_global)[0], pred.copy(), h_step), 1e-5)

    # TV away from the sqrt kink
    xt = _staircase(rng, 2, 1, 6, 6)
    check("loss/tv", loss_mod.tv_loss(xt, 1e-8)[1],
          finite_diff(lambda v: loss_mod.tv_loss(v, 1e-8)[0], xt.copy(), h_step), 1e-4)

    # tiny whole model
    topo = Topology(kind="siso", depth=1, channels=(4,), final_width=4)
    model = SynNetModel(topo)
    params, state = model.init_params(rng.child("tinymodel"), dtype="double")
    xin = _u(rng, (2, 1, 8, 8), 0.0, 1.0)
    cotm = _u(rng, (2, 1, 8, 8))

    def model_probe(p):
        preds, _ = model.forward(p, dict(state), [xin], mode="train")
        return float((preds[0] * cotm).sum())

    preds, trace = model.forward(params, dict(state), [xin], mode="train")
    grads = model.backward(params, trace, [cotm])
    for name in params:
        orig = params[name]

        def probe(v, _name=name):
            trial = dict(params)
            trial[_name] = v
            return model_probe(trial)

        check(f"model/{name}", grads[name],
              finite_diff(probe, orig.copy(), h_step), 1e-5, atol=1e-10)
    return results


def format_report(results) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:32s} max_rel_err={r.max_err:.3e}  tol={r.tol:.0e}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
