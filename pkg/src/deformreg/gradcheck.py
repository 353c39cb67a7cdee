"""Central finite-difference checks of every analytic gradient in the package.

Relative error at a probe is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
with ``floor = 1e-6 * max|analytic|`` over the whole gradient, so probes whose
true derivative is negligible compared with the rest are compared absolutely.
"""

from dataclasses import dataclass

import numpy as np

from . import _ops
from .field import smoothness_loss, warp, warp_gradient
from .similarity import (
    LossConfig,
    l1_loss,
    lcc_similarity,
    lg_similarity,
    registration_loss,
    translator_loss,
)
from .translator import identity_lut, init_mlp, translate_vjp, translator_objective


@dataclass
class GradCheck:
    name: str
    max_rel_error: float
    n_probes: int
    tolerance: float

    @property
    def passed(self):
        return bool(self.max_rel_error < self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}  {self.name:<38s} max rel err {self.max_rel_error:.2e}"
            f"  (tol {self.tolerance:.0e}, {self.n_probes} probes)"
        )


def relative_errors(analytic, numeric, full_grad):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    floor = 1e-6 * float(np.max(np.abs(full_grad))) + 1e-300
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def fd_check(name, fn, x, grad, probes, step=1e-4, tolerance=1e-3):
    """Compare ``grad`` (same shape as ``x``) against central differences of ``fn``."""
    x = np.array(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    numeric = []
    for i in probes:
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        numeric.append((fn(xp) - fn(xm)) / (2.0 * step))
    analytic = grad.ravel()[list(probes)]
    err = relative_errors(analytic, numeric, grad)
    return GradCheck(name, float(err.max()), len(probes), tolerance)


def smooth_random_volume(rng, dims=(8, 8, 8), sigma=1.0):
    """Blurred white noise rescaled to [0, 1]."""
    a = _ops.gaussian_like_blur(rng.standard_normal(dims), sigma)
    return (a - a.min()) / (a.max() - a.min())


def smooth_random_field(rng, dims=(8, 8, 8), amplitude=1.5, sigma=1.5):
    u = np.stack([_ops.gaussian_like_blur(rng.standard_normal(dims), sigma) for _ in range(3)])
    return amplitude * u / np.abs(u).max()


def _probes(rng, size, n):
    return rng.choice(size, size=n, replace=False)


def run_all(seed=0, n_probes=30, dims=(8, 8, 8), tolerance=1e-3):
    """Run the full suite; returns a list of :class:`GradCheck`."""
    rng = np.random.default_rng(seed)
    cfg = LossConfig()
    R = smooth_random_volume(rng, dims)
    F = smooth_random_volume(rng, dims)
    A = smooth_random_volume(rng, dims)
    size = R.size
    results = []

    lv = lg_similarity(R, F, cfg)
    results.append(
        fd_check("lg_similarity d/dF", lambda x: lg_similarity(R, x, cfg, with_grad=False).value,
                 F, lv.grad, _probes(rng, size, n_probes), tolerance=tolerance)
    )
    lv = lcc_similarity(R, F, cfg.cc_window, cfg.cc_epsilon, floor=cfg.cc_floor)
    results.append(
        fd_check("lcc_similarity d/dF",
                 lambda x: lcc_similarity(R, x, cfg.cc_window, cfg.cc_epsilon, floor=cfg.cc_floor, with_grad=False).value,
                 F, lv.grad, _probes(rng, size, n_probes), tolerance=tolerance)
    )
    lv = l1_loss(A, F)
    # keep probes off ties, where |.| has a kink
    ok = np.flatnonzero(np.abs(A - F).ravel() > 1e-3)
    results.append(
        fd_check("l1_loss d/dA", lambda x: l1_loss(x, F).value, A, lv.grad,
                 rng.choice(ok, size=n_probes, replace=False), tolerance=tolerance)
    )

    u = smooth_random_field(rng, dims)
    _, sg = smoothness_loss(u)
    results.append(
        fd_check("smoothness_loss d/du", lambda x: smoothness_loss(x)[0], u, sg,
                 _probes(rng, u.size, n_probes), tolerance=tolerance)
    )

    up = rng.standard_normal(dims)
    wg = warp_gradient(F, u, up)
    results.append(
        fd_check("warp_gradient d/du", lambda x: float(np.sum(up * warp(F, x))), u, wg,
                 _probes(rng, u.size, n_probes), step=1e-4, tolerance=tolerance)
    )

    mlp = init_mlp(F, seed=seed)
    mlp = mlp.with_params({k: v + rng.normal(0, 0.2, v.shape) for k, v in mlp.params.items()})
    rl = registration_loss(R, F, u, cfg)
    results.append(
        fd_check("registration_loss (LG only) d/du",
                 lambda x: registration_loss(R, F, x, cfg).total, u, rl.grad,
                 _probes(rng, u.size, n_probes), tolerance=tolerance)
    )
    rl = registration_loss(R, F, u, cfg, translator=mlp)
    results.append(
        fd_check("registration_loss (LG+LCC, mlp) d/du",
                 lambda x: registration_loss(R, F, x, cfg, translator=mlp).total, u, rl.grad,
                 _probes(rng, u.size, n_probes), tolerance=tolerance)
    )

    T = smooth_random_volume(rng, dims)
    tl = translator_loss(T, F, R, cfg)
    ok = np.flatnonzero(np.abs(T - R).ravel() > 1e-3)
    results.append(
        fd_check("translator_loss d/dF'", lambda x: translator_loss(x, F, R, cfg).value, T, tl.grad,
                 rng.choice(ok, size=n_probes, replace=False), tolerance=tolerance)
    )

    lut = identity_lut()
    lut = lut.with_params({"values": lut.params["values"] + rng.normal(0, 0.1, lut.knots.size)})
    for model, label in ((lut, "lut"), (mlp, "mlp")):
        _, grads = translator_objective(model, F, R, cfg)
        for key in sorted(model.params):
            p0 = model.params[key]
            n = min(n_probes, p0.size)

            def fn(x, key=key, model=model):
                params = dict(model.params)
                params[key] = x
                return translator_objective(model.with_params(params), F, R, cfg)[0]

            results.append(
                fd_check(f"translator_loss via {label} d/d{key}", fn, p0, grads[key],
                         _probes(rng, p0.size, n), step=1e-5, tolerance=tolerance)
            )

    out, pullback = translate_vjp(mlp, F)
    g = rng.standard_normal(dims)
    results.append(
        fd_check("translate (mlp) d/d input",
                 lambda x: float(np.sum(g * translate_vjp(mlp, x)[0])), F, pullback(g)[1],
                 _probes(rng, size, n_probes), step=1e-5, tolerance=tolerance)
    )
    return results
