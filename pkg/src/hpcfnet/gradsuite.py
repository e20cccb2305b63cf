"""Finite-difference gradient checks over every differentiable operation and
the assembled model, in double precision."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .gradcheck import GradReport, gradcheck
from .model import MPFL, PAGC, RSA, HPCFNet, ModelConfig, cfs
from .tensor import Tensor, concat, reciprocal_safe, take
from .training import class_weights, weighted_ce_loss

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class SuiteReport:
    reports: list[GradReport] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def failures(self) -> list[GradReport]:
        return [r for r in self.reports if not r.passed]

    def lines(self) -> list[str]:
        out = [r.summary() for r in self.reports]
        out.append(f"{len(self.reports) - len(self.failures)}/{len(self.reports)} passed "
                   f"in {self.seconds:.1f}s")
        return out


def _projector(shape, seed: int, scale: float = 1.0) -> Tensor:
    return Tensor(np.random.default_rng(seed).normal(size=shape) * scale)


def _away_from_zero(rng, shape, margin=0.05):
    """Normal samples with |x| >= margin so kinks stay outside the FD stencil."""
    x = rng.normal(size=shape)
    return x + np.where(x >= 0, margin, -margin)


def _op_cases(rng) -> list[tuple[str, Callable[[], Tensor], dict]]:
    """(name, scalar loss, inputs) for each primitive."""
    cases = []

    def add_case(name, out_fn, inputs):
        r = _projector(out_fn().shape, len(cases) + 100)
        cases.append((name, lambda: (out_fn() * r).sum(), inputs))

    a = Tensor(rng.normal(size=(2, 3, 4, 4)))
    b = Tensor(rng.normal(size=(2, 3, 4, 4)))
    m = Tensor(rng.normal(size=(2, 1, 4, 4)))
    add_case("add", lambda: a + b, {"a": a, "b": b})
    add_case("sub", lambda: a - b, {"a": a, "b": b})
    add_case("mul", lambda: a * b, {"a": a, "b": b})
    add_case("mul_channel_broadcast", lambda: a * m, {"a": a, "mask": m})
    add_case("scalar_mul", lambda: 2.5 * a, {"a": a})
    add_case("rsub_scalar", lambda: 1.0 - a, {"a": a})
    pos = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 4, 4)))
    add_case("reciprocal", lambda: reciprocal_safe(pos), {"x": pos})
    cases.append(("sum", lambda: (a * a).sum(), {"a": a}))
    add_case("take", lambda: take(a, (slice(None), slice(1, 3), slice(0, 2))), {"a": a})
    c = Tensor(rng.normal(size=(2, 2, 4, 4)))
    add_case("concat", lambda: concat([a, c], 1), {"a": a, "c": c})

    for d, g, stride, bias in [(1, 1, 1, True), (2, 1, 1, False), (3, 3, 1, True), (4, 3, 1, True),
                               (1, 1, 2, True)]:
        spec = ops.ConvSpec(6, 3, 3, stride=stride, padding=d, dilation=d, groups=g)
        x = Tensor(rng.normal(size=(2, 6, 7, 7)))
        w = Tensor(rng.normal(size=spec.weight_shape) * 0.3)
        bb = Tensor(rng.normal(size=3)) if bias else None
        inputs = {"x": x, "w": w, **({"b": bb} if bias else {})}
        add_case(f"conv2d_d{d}_g{g}_s{stride}", lambda x=x, w=w, bb=bb, spec=spec: ops.conv2d(x, w, bb, spec),
                 inputs)
    spec = ops.ConvSpec(4, 2, (3, 1), padding=(1, 0))
    x = Tensor(rng.normal(size=(1, 4, 5, 4)))
    w = Tensor(rng.normal(size=spec.weight_shape))
    add_case("conv2d_3x1", lambda x=x, w=w, spec=spec: ops.conv2d(x, w, None, spec), {"x": x, "w": w})

    for mode in ("train", "eval"):
        st = ops.BNState.create(3, np.float64)
        st.scale.data = rng.uniform(0.5, 1.5, 3)
        st.shift.data = rng.normal(size=3)
        st.running_mean[:] = rng.normal(size=3)
        st.running_var[:] = rng.uniform(0.5, 2, 3)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        add_case(f"batch_norm_{mode}", lambda x=x, st=st, mode=mode: ops.batch_norm(x, st, mode),
                 {"x": x, "scale": st.scale, "shift": st.shift})

    xk = Tensor(_away_from_zero(rng, (2, 3, 4, 4)))
    add_case("leaky_relu", lambda: ops.leaky_relu(xk, 0.01), {"x": xk})
    for h, w_ in ((4, 6), (5, 7)):
        # distinct values spaced well beyond eps, so no window has a near-tie
        xp = Tensor(rng.permutation(2 * 3 * h * w_).reshape(2, 3, h, w_) * 0.01)
        add_case(f"max_pool2d_{h}x{w_}", lambda xp=xp: ops.max_pool2d(xp), {"x": xp})
    for f in (2, 4):
        xu = Tensor(rng.normal(size=(2, 2, 3, 5)))
        add_case(f"upsample_bilinear_x{f}", lambda xu=xu, f=f: ops.upsample_bilinear(xu, f), {"x": xu})
    add_case("sigmoid", lambda: ops.sigmoid(a), {"a": a})
    add_case("concat_channels", lambda: ops.concat_channels([a, c, m]), {"a": a, "c": c, "m": m})
    add_case("channel_pool_avg", lambda: ops.channel_pool(a, "avg"), {"a": a})
    xm = Tensor(rng.permutation(2 * 3 * 16).reshape(2, 3, 4, 4) * 0.01)
    add_case("channel_pool_max", lambda: ops.channel_pool(xm, "max"), {"x": xm})

    z = Tensor(rng.normal(size=(2, 2, 4, 4)))
    labels = rng.integers(0, 2, (2, 4, 4))
    wts = class_weights(labels)
    cases.append(("weighted_ce_loss", lambda: weighted_ce_loss(z, labels, wts), {"logits": z}))
    return cases


def _module_cases(rng, scale: float) -> list[tuple[str, Callable[[], Tensor], dict, float, int | None]]:
    """(name, loss, inputs, eps, max_samples) for the fusion modules and the whole model."""
    dt = np.float64
    out = []

    f0, f1 = Tensor(rng.normal(size=(2, 4, 4, 4))), Tensor(rng.normal(size=(2, 4, 4, 4)))
    r = _projector((2, 8, 4, 4), 1)
    out.append(("cfs", lambda: (cfs(f0, f1) * r).sum(), {"f0": f0, "f1": f1}, 1e-6, None))

    pagc = PAGC(3, 5, (1, 2, 3, 4), 0, "pagc", 0.01, dt)
    fs = Tensor(rng.normal(size=(2, 6, 6, 6)))
    r2 = _projector((2, 5, 6, 6), 2)
    out.append(("pagc", lambda: (pagc(fs, "train") * r2).sum(),
                {"x": fs, **dict(pagc.named_parameters())}, 1e-7, None))

    rsa = RSA(0, "rsa", dt)
    feat = Tensor(rng.normal(size=(2, 6, 4, 4)))
    r3 = _projector((2, 6, 4, 4), 3)
    out.append(("rsa", lambda: (rsa(f0, f1, feat) * r3).sum(),
                {"f0": f0, "f1": f1, "feat": feat, **dict(rsa.named_parameters())}, 1e-6, None))

    mpfl = MPFL(6, 8, 0, "mpfl", 0.01, dt)
    xm = Tensor(rng.normal(size=(2, 6, 4, 4)))
    r4 = _projector((2, 8, 4, 4), 4)
    out.append(("mpfl", lambda: (mpfl(xm) * r4).sum(), {"x": xm, **dict(mpfl.named_parameters())},
                1e-7, None))

    model = HPCFNet(ModelConfig(width_scale=scale, input_size=(32, 32), dtype="float64", seed=3))
    x0, x1 = Tensor(rng.random((2, 3, 32, 32))), Tensor(rng.random((2, 3, 32, 32)))
    # scaled so finite-difference roundoff sits below the relative-error floor
    r5 = _projector((2, 2, 32, 32), 5, 1 / 4096)
    out.append((f"hpcfnet_scale_{scale:g}", lambda: (model(x0, x1, "train") * r5).sum(),
                dict(model.named_parameters()), 1e-7, 2))
    return out


def run_suite(scale: float = 1 / 16, tol: float = MODEL_TOL, op_tol: float | None = None,
              seed: int = 0, include_model: bool = True, echo=None) -> SuiteReport:
    """Run every check. Primitive ops use ``op_tol`` (default: min(tol, 1e-4)); modules use ``tol``."""
    op_tol = min(tol, OP_TOL) if op_tol is None else op_tol
    rng = np.random.default_rng(seed)
    report = SuiteReport()
    start = time.perf_counter()

    def record(rep):
        report.reports.append(rep)
        if echo:
            echo(rep.summary())

    for name, fn, inputs in _op_cases(rng):
        record(gradcheck(fn, inputs, tol=op_tol, op=name))
    for name, fn, inputs, eps, samples in _module_cases(rng, scale):
        if name.startswith("hpcfnet") and not include_model:
            continue
        record(gradcheck(fn, inputs, tol=tol, eps=eps, max_samples=samples, seed=seed, op=name))
    report.seconds = time.perf_counter() - start
    return report
