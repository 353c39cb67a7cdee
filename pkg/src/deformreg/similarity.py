"""Similarity measures and losses with analytic gradients.

All windowed sums use truncated cubic windows (no padding values). Volume
arguments may be :class:`~deformreg.volume.Volume3D` or plain ``(nx, ny, nz)``
arrays; gradients are returned as plain arrays.
"""

from dataclasses import dataclass

import numpy as np

from . import _ops
from .errors import ConfigError, ShapeError
from .field import smoothness_loss, warp, warp_gradient


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and window sizes.

    ``alpha`` weights smoothness in the registration loss, ``beta`` the
    local-gradient term next to LCC, ``mu`` and ``lam`` the structure and L1
    terms of the translator loss.
    """

    alpha: float = 1.0
    beta: float = 2.0
    mu: float = 5.0
    lam: float = 100.0
    lg_window: int = 7
    cc_window: int = 7
    epsilon: float = 1e-6
    cc_epsilon: float = 1e-12
    cc_floor: float = 1e-3

    def __post_init__(self):
        for name in ("lg_window", "cc_window"):
            w = getattr(self, name)
            if int(w) != w or w < 3 or w % 2 != 1:
                raise ConfigError(f"{name} must be an odd integer >= 3, got {w}")
        if self.epsilon <= 0 or self.cc_epsilon <= 0:
            raise ConfigError("epsilon guards must be positive")
        if not 0 <= self.cc_floor < 1:
            raise ConfigError("cc_floor must lie in [0, 1)")
        for name in ("alpha", "beta", "mu", "lam"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class LossValue:
    """A scalar loss and its gradient.

    ``grad`` is taken w.r.t. the moving argument documented by the producing
    function; ``grad_ref`` w.r.t. the other argument when requested.
    """

    value: float
    grad: np.ndarray = None
    grad_ref: np.ndarray = None
    n_voxels: int = 1

    @property
    def normalized(self):
        """The value divided by the number of voxels."""
        return self.value / self.n_voxels


def _arrays(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dims {a.shape} and {b.shape} differ")
    return a, b


# ---------------------------------------------------------------------------
# local gradient and its normalization


def local_gradient(vol, n=7):
    """Box-summed central-difference gradient, shape (3, nx, ny, nz)."""
    a = np.asarray(vol, dtype=np.float64)
    if int(n) != n or n < 1 or n % 2 != 1:
        raise ConfigError(f"window must be a positive odd integer, got {n}")
    if n > min(a.shape):
        raise ConfigError(f"window {n} larger than volume dims {a.shape}")
    if n == 1:
        return np.stack([_ops.central_diff(a, ax) for ax in range(3)])
    return np.stack([_ops.box_sum(_ops.central_diff(a, ax), n) for ax in range(3)])


def local_gradient_adjoint(gbar, n=7):
    """Transpose of :func:`local_gradient`: maps (3, ...) cotangents to voxels."""
    out = np.zeros(gbar.shape[1:])
    for ax in range(3):
        g = gbar[ax] if n == 1 else _ops.box_sum(gbar[ax], n)
        out += _ops.central_diff_adjoint(g, ax)
    return out


def _normalize(g, eps):
    mag = np.sqrt(np.sum(g * g, axis=0))
    return g / (mag + eps), mag


def _normalize_vjp(g, mag, nbar, eps):
    # d/dg [nbar . g / (|g| + eps)]; the radial term vanishes where g = 0
    denom = mag + eps
    radial = np.sum(nbar * g, axis=0)
    safe = np.where(mag > 0, mag, 1.0)
    coef = np.where(mag > 0, radial / (safe * denom * denom), 0.0)
    return nbar / denom - coef * g


def normalized_gradient(vol, n=7, epsilon=1e-6):
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    return _normalize(local_gradient(vol, n), epsilon)[0]


def _normalized_parts(a, n, eps):
    g = local_gradient(a, n)
    nv, mag = _normalize(g, eps)
    return g, nv, mag


def _normalized_vjp(parts, nbar, n, eps):
    g, _, mag = parts
    return local_gradient_adjoint(_normalize_vjp(g, mag, nbar, eps), n)


# ---------------------------------------------------------------------------
# similarity terms


def lg_similarity(ref, mov, cfg=None, *, with_grad=True, ref_grad=False):
    """Sum over voxels of ``|n(ref, p) . n(mov, p)|``.

    ``grad`` is w.r.t. ``mov``; ``grad_ref`` w.r.t. ``ref`` if ``ref_grad``.
    """
    cfg = cfg or LossConfig()
    r, m = _arrays(ref, mov)
    n, eps = cfg.lg_window, cfg.epsilon
    pr = _normalized_parts(r, n, eps)
    pm = _normalized_parts(m, n, eps)
    dot = np.sum(pr[1] * pm[1], axis=0)
    out = LossValue(float(np.sum(np.abs(dot))), n_voxels=r.size)
    if with_grad or ref_grad:
        s = np.sign(dot)
        if with_grad:
            out.grad = _normalized_vjp(pm, s * pr[1], n, eps)
        if ref_grad:
            out.grad_ref = _normalized_vjp(pr, s * pm[1], n, eps)
    return out


def lcc_similarity(ref, mov, window=7, epsilon=1e-12, *, floor=0.0, with_grad=True):
    """Sum over voxels of the squared windowed correlation; ``grad`` is w.r.t. ``mov``.

    Per window: ``cov^2 / (var_ref * var_mov + epsilon)`` with sums over the
    truncated window (no 1/N factors on the variances).

    With ``floor > 0`` a window only counts if, in both volumes, its mean
    squared deviation is at least ``floor`` times that volume's global
    variance; other windows contribute 0 with zero gradient. Windows that
    barely touch an exactly flat region otherwise have a tiny variance,
    where the guard rewards steepening the image and the correlation of
    near-invisible structure dominates the gradient.
    """
    r, m = _arrays(ref, mov)
    if int(window) != window or window < 1 or window % 2 != 1:
        raise ConfigError(f"cc window must be a positive odd integer, got {window}")
    count = _ops.box_count(r.shape, window)
    sr = _ops.box_sum(r, window)
    sm = _ops.box_sum(m, window)
    r_mean = sr / count
    m_mean = sm / count
    cross = _ops.box_sum(r * m, window) - sr * m_mean
    var_r = _ops.box_sum(r * r, window) - sr * r_mean
    var_m = _ops.box_sum(m * m, window) - sm * m_mean
    denom = var_r * var_m + epsilon
    cc = cross * cross / denom
    active = None
    if floor > 0:
        active = (var_r >= floor * count * np.var(r)) & (var_m >= floor * count * np.var(m))
        cc = np.where(active, cc, 0.0)
    out = LossValue(float(np.sum(cc)), n_voxels=r.size)
    if with_grad:
        # d cc_p / d m_q = A_p (r_q - rbar_p) - B_p (m_q - mbar_p), summed over windows p that hold q
        a = 2.0 * cross / denom
        b = 2.0 * cross * cross * var_r / (denom * denom)
        if active is not None:
            a, b = np.where(active, a, 0.0), np.where(active, b, 0.0)
        out.grad = (
            r * _ops.box_sum(a, window)
            - _ops.box_sum(a * r_mean, window)
            - m * _ops.box_sum(b, window)
            + _ops.box_sum(b * m_mean, window)
        )
    return out


def l1_loss(a, b):
    """Mean absolute difference; ``grad`` is the subgradient w.r.t. ``a``."""
    x, y = _arrays(a, b)
    d = x - y
    # residuals at rounding level count as exact zeros (subgradient 0), otherwise
    # an exact fit would be pushed around by the sign of floating-point noise
    tol = 1e-12 * np.maximum(np.abs(x), np.abs(y)) + 1e-300
    return LossValue(float(np.mean(np.abs(d))), grad=np.where(np.abs(d) > tol, np.sign(d), 0.0) / d.size)


def mi_metric(ref, mov, bins=32):
    """Histogram mutual information in nats (evaluation only).

    Each volume is quantized into ``bins`` equal-width bins over its own range.
    """
    if bins < 8:
        raise ConfigError("mi_metric needs at least 8 bins")
    r, m = _arrays(ref, mov)
    ir, im = _quantize(r, bins), _quantize(m, bins)
    joint = np.bincount((ir * bins + im).ravel(), minlength=bins * bins).reshape(bins, bins)
    p = joint / joint.sum()
    pr = p.sum(axis=1, keepdims=True)
    pm = p.sum(axis=0, keepdims=True)
    nz = p > 0
    mi = np.sum(p[nz] * np.log(p[nz] / (pr @ pm)[nz]))
    return max(float(mi), 0.0)


def _quantize(a, bins):
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros(a.shape, dtype=np.intp)
    return np.minimum(((a - lo) * (bins / (hi - lo))).astype(np.intp), bins - 1)


def ngf_metric(ref, mov, epsilon=1e-6):
    """Sum of squared dots of per-voxel (un-summed) normalized gradients."""
    r, m = _arrays(ref, mov)
    nr = normalized_gradient(r, 1, epsilon)
    nm = normalized_gradient(m, 1, epsilon)
    return float(np.sum(np.sum(nr * nm, axis=0) ** 2))


# ---------------------------------------------------------------------------
# composite objectives


@dataclass
class RegistrationLoss:
    """Registration objective at one field, with every term per voxel.

    ``total = -lcc_weight * lcc - beta * lg + alpha * smooth``.
    """

    total: float
    lg: float
    lcc: float
    smooth: float
    grad: np.ndarray
    warped: np.ndarray
    translated: np.ndarray = None


def registration_loss(ref, flo, phi, cfg=None, translator=None, lcc_weight=1.0):
    """Loss of the transformation and its gradient w.r.t. the field.

    ``flo`` is the unwarped floating image. If ``translator`` is given (a
    model accepted by :func:`deformreg.translator.translate`), the LCC term
    compares ``ref`` with the translated warped image and its gradient is
    back-propagated through the translator; otherwise only LG and smoothness
    are used. ``lcc_weight`` scales the LCC term (0 during warm-up).
    """
    from .translator import translate_vjp

    cfg = cfg or LossConfig()
    r = np.asarray(ref, dtype=np.float64)
    f = np.asarray(flo, dtype=np.float64)
    u = np.asarray(phi, dtype=np.float64)
    if r.shape != f.shape or u.shape[1:] != r.shape:
        raise ShapeError(f"ref {r.shape}, floating {f.shape} and field {u.shape[1:]} differ")
    nvox = r.size
    warped = warp(f, u)
    lg = lg_similarity(r, warped, cfg) if cfg.beta > 0 else LossValue(0.0, np.zeros_like(r))
    d_warped = -cfg.beta * lg.grad / nvox
    lcc_val, translated = 0.0, None
    if translator is not None:
        translated, pullback = translate_vjp(translator, warped)
        if lcc_weight > 0:
            lcc = lcc_similarity(r, translated, cfg.cc_window, cfg.cc_epsilon, floor=cfg.cc_floor)
            lcc_val = lcc.value / nvox
            d_warped = d_warped + pullback(-lcc_weight * lcc.grad / nvox)[1]
    smooth, smooth_grad = smoothness_loss(u)
    grad = warp_gradient(f, u, d_warped) + cfg.alpha * smooth_grad / nvox
    lg_val = lg.value / nvox
    total = -lcc_weight * lcc_val - cfg.beta * lg_val + cfg.alpha * smooth / nvox
    return RegistrationLoss(total, lg_val, lcc_val, smooth / nvox, grad, warped, translated)


def translator_loss(translated, warped, ref, cfg=None):
    """``-mu * LG(translated, warped) / N + lam * L1(translated, ref)``; grad w.r.t. ``translated``."""
    cfg = cfg or LossConfig()
    t, w = _arrays(translated, warped)
    t, r = _arrays(t, ref)
    nvox = t.size
    # LG is symmetric, so its gradient w.r.t. the first slot is grad of (w, t) w.r.t. t
    lg = lg_similarity(w, t, cfg) if cfg.mu > 0 else LossValue(0.0, np.zeros_like(t))
    l1 = l1_loss(t, r)
    value = -cfg.mu * lg.value / nvox + cfg.lam * l1.value
    grad = -cfg.mu * lg.grad / nvox + cfg.lam * l1.grad
    return LossValue(value, grad)
