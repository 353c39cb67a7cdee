"""Per-pair registration by direct optimization of a dense displacement field.

The field is optimized coarse to fine over a box-filter pyramid. In
``lg_only`` mode the objective is local-gradient similarity plus smoothness.
In ``full_alternating`` mode an intensity translator is trained alongside:
each cycle runs ``t_steps_per_g_step`` field updates (with the LCC term on
the translated image) followed by one translator update.
"""

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _ops
from .errors import ConfigError, DivergenceError, ShapeError
from .field import DisplacementField, smoothness_loss, upsample_field, warp
from .optim import AdamState
from .similarity import LossConfig, l1_loss, registration_loss
from .translator import identity_lut, init_mlp, new_train_state, translate, translator_step

MODES = ("lg_only", "full_alternating")


@dataclass(frozen=True)
class RegistrationConfig:
    """Optimization schedule.

    ``lr`` is the Adam step in voxels of the current pyramid level, cosine
    decayed to ``lr * lr_final_fraction`` within each level and ramped up
    linearly over the first ``lr_ramp_fraction`` of the level's iterations;
    individual steps are clamped to ``lr``. The ramp matters when part of
    the image is exactly flat (zero background): there the epsilon guard of
    the normalized gradient leaves a small but consistent pull, and Adam's
    first steps, which are roughly ``lr`` per voxel regardless of gradient
    size, would otherwise kick the whole field out of the basin it starts in. ``translator_lr`` drives the translator's
    Adam. ``field_eps`` is the field Adam's guard in units of ``1 / N`` (the
    scale of per-voxel-mean gradients), so gradients far below that scale,
    such as the residue of the epsilon guards at an exact fit, do not
    produce full-size steps. ``translator_eps`` plays the same role for the
    translator, whose meaningful gradients are of order one. ``grad_sigma`` preconditions field gradients
    with :func:`smooth_gradient`.

    In ``full_alternating`` mode the LCC term is off for the first
    ``warmup_fraction`` of a level's iterations: on the first level only, or
    on every level with ``warmup_every_level`` (the translator is retrained
    on each new resolution, and its fit does not carry across levels
    exactly because intensity remaps do not commute with pyramid averaging).
    """

    levels: tuple = (4, 2, 1)
    iterations: int = 200
    lr: float = 0.25
    lr_final_fraction: float = 0.1
    lr_ramp_fraction: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)
    mode: str = "lg_only"
    t_steps_per_g_step: int = 1
    warmup_fraction: float = 0.1
    warmup_every_level: bool = True
    lcc_from_level: int = 0
    translator_kind: str = "lut"
    translator_hidden: int = 16
    translator_feature_window: int = 3
    translator_lr: float = 5e-2
    translator_eps: float = 1e-2
    grad_sigma: float = 3.0
    field_eps: float = 3e-2
    shared_scale: bool = False
    seed: int = 0
    early_stop: bool = False
    early_stop_patience: int = 20
    early_stop_tol: float = 1e-5

    def __post_init__(self):
        levels = tuple(int(f) for f in self.levels)
        if not levels or levels[-1] != 1 or any(a <= b for a, b in zip(levels, levels[1:])):
            raise ConfigError(f"pyramid factors must decrease strictly to 1, got {self.levels}")
        object.__setattr__(self, "levels", levels)
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig.from_dict(self.loss))
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.t_steps_per_g_step < 1:
            raise ConfigError("t_steps_per_g_step must be >= 1")
        if self.field_eps <= 0 or self.translator_eps <= 0:
            raise ConfigError("field_eps and translator_eps must be positive")
        if self.lr < 0 or self.translator_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if not 0 <= self.lr_ramp_fraction < 1:
            raise ConfigError("lr_ramp_fraction must lie in [0, 1)")
        if self.translator_kind not in ("mlp", "lut"):
            raise ConfigError(f"unknown translator kind {self.translator_kind!r}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        if "levels" in d:
            d["levels"] = tuple(d["levels"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d


@dataclass
class RegistrationReport:
    """Per-iteration traces (one entry per field update) and timings.

    ``translator`` holds one record per translator update:
    ``{"iteration", "level", "loss", "l1"}`` where ``l1`` is
    ``L1(translated, ref)`` before that update.
    """

    level: list = field(default_factory=list)
    total: list = field(default_factory=list)
    lg: list = field(default_factory=list)
    lcc: list = field(default_factory=list)
    smooth: list = field(default_factory=list)
    translator: list = field(default_factory=list)
    warmup_iterations: int = 0
    level_start_loss: list = field(default_factory=list)
    level_end_loss: list = field(default_factory=list)
    runtime_seconds: dict = field(default_factory=dict)

    def record(self, level, loss):
        self.level.append(level)
        self.total.append(loss.total)
        self.lg.append(loss.lg)
        self.lcc.append(loss.lcc)
        self.smooth.append(loss.smooth)

    @property
    def n_iterations(self):
        return len(self.total)

    def to_dict(self):
        return asdict(self)

    def trace_rows(self):
        """Rows for a CSV trace: iteration, level, total, lg, lcc, smooth, translator_loss."""
        g = {rec["iteration"]: rec["loss"] for rec in self.translator}
        rows = []
        last = 0.0
        for i in range(self.n_iterations):
            last = g.get(i, last)
            rows.append((i, self.level[i], self.total[i], self.lg[i], self.lcc[i], self.smooth[i], last))
        return rows


@dataclass
class RegistrationResult:
    field: DisplacementField
    translator: object
    report: RegistrationReport

    def __iter__(self):
        return iter((self.field, self.translator, self.report))


def pyramid_downsample(vol, factor):
    """Average non-overlapping ``factor``-cubes (dims floor-divided)."""
    a = np.asarray(vol, dtype=np.float64)
    factor = int(factor)
    if factor < 1:
        raise ConfigError("downsample factor must be >= 1")
    if factor == 1:
        return a.copy()
    dims = tuple(n // factor for n in a.shape)
    if min(dims) < 4:
        raise ConfigError(f"downsampling {a.shape} by {factor} leaves fewer than 4 voxels")
    a = a[: dims[0] * factor, : dims[1] * factor, : dims[2] * factor]
    return a.reshape(dims[0], factor, dims[1], factor, dims[2], factor).mean(axis=(1, 3, 5))


def _odd_window(n, factor, top):
    w = int(round(n / factor))
    w = w if w % 2 else w + 1
    return max(3, min(w, top))


def _level_loss_config(cfg, dims, factor=1):
    """Windows keep their full-resolution physical extent on coarse levels."""
    top = min(dims) if min(dims) % 2 else min(dims) - 1
    return replace(
        cfg,
        lg_window=_odd_window(cfg.lg_window, factor, top),
        cc_window=_odd_window(cfg.cc_window, factor, top),
    )


def smooth_gradient(grad, sigma):
    """Symmetric positive semi-definite smoothing ``B B`` of a field gradient.

    ``B`` is the self-adjoint truncated box sum, so ``g . (B B g) >= 0`` and the
    smoothed vector is still a descent direction. The width is chosen so the
    two passes have roughly standard deviation ``sigma``.
    """
    width = max(3, int(round(np.sqrt(6.0 * sigma * sigma + 1.0))) | 1)
    scale = float(width) ** 6
    return np.stack([_ops.box_sum(_ops.box_sum(g, width), width) / scale for g in grad])


def t_step(ref, flo, phi, translator, loss_cfg, state, lr=None, lcc_weight=1.0, grad_sigma=0.0):
    """One Adam update of the field; returns ``(phi', state, loss)``.

    ``loss`` is the objective at the incoming field. With ``grad_sigma > 0``
    the gradient is smoothed before the update (the objective is unchanged;
    only the descent direction is preconditioned).
    """
    u = np.asarray(phi, dtype=np.float64)
    loss = registration_loss(ref, flo, u, loss_cfg, translator, lcc_weight)
    if not np.isfinite(loss.total) or not np.all(np.isfinite(loss.grad)):
        raise DivergenceError("registration loss is not finite", state={"field": u, "translator": translator})
    grad = loss.grad
    if grad_sigma > 0:
        grad = smooth_gradient(grad, grad_sigma)
    new = state.update({"u": u}, {"u": grad}, lr=lr)["u"]
    return new, state, loss


def _schedule(lr, final_fraction, ramp_fraction, i, n):
    """Linear ramp over the first ``ramp_fraction`` of ``n`` steps, cosine decay throughout."""
    ramp = min(1.0, (i + 1) / (ramp_fraction * n)) if ramp_fraction > 0 else 1.0
    if n <= 1:
        return lr * ramp
    w = 0.5 * (1.0 + np.cos(np.pi * i / (n - 1)))
    return lr * ramp * (final_fraction + (1.0 - final_fraction) * w)


def _make_translator(cfg, warped):
    if cfg.translator_kind == "lut":
        return identity_lut()
    return init_mlp(
        warped, hidden=cfg.translator_hidden, seed=cfg.seed, feature_window=cfg.translator_feature_window
    )


def alternating_schedule(ref, flo, cfg, phi=None, translator=None, report=None, level=0, warmup=True):
    """Run one pyramid level of alternating field / translator updates.

    Returns ``(phi, translator, report)``. With ``warmup`` the LCC term is off for the first ``warmup_fraction`` of the
    iterations; translator updates still run during warm-up.
    """
    if cfg.mode != "full_alternating":
        raise ConfigError("alternating_schedule requires mode 'full_alternating'")
    return _run_level(ref, flo, cfg, phi, translator, report, level, warmup)


def _run_level(ref, flo, cfg, phi, translator, report, level, warmup, factor=1, callback=None):
    r = np.asarray(ref, dtype=np.float64)
    f = np.asarray(flo, dtype=np.float64)
    report = report if report is not None else RegistrationReport()
    u = np.zeros((3, *r.shape)) if phi is None else np.asarray(phi, dtype=np.float64).copy()
    loss_cfg = _level_loss_config(cfg.loss, r.shape, factor)
    full = cfg.mode == "full_alternating"
    n_iter = cfg.iterations
    n_warm = int(round(cfg.warmup_fraction * n_iter)) if (full and warmup) else 0
    if full and translator is None:
        translator = _make_translator(cfg, warp(f, u))
    field_state = AdamState(lr=cfg.lr, eps=cfg.field_eps / r.size, max_step=cfg.lr, shared_scale=cfg.shared_scale)
    g_state = new_train_state(cfg.translator_lr, cfg.translator_eps) if full else None
    best, stale = np.inf, 0
    first = report.n_iterations
    for i in range(n_iter):
        lr = _schedule(cfg.lr, cfg.lr_final_fraction, cfg.lr_ramp_fraction, i, n_iter)
        lcc_weight = 0.0 if (i < n_warm or level < cfg.lcc_from_level) else 1.0
        u, field_state, loss = t_step(
            r, f, u, translator if full else None, loss_cfg, field_state, lr, lcc_weight,
            cfg.grad_sigma,
        )
        report.record(level, loss)
        if i == 0:
            report.level_start_loss.append(loss.total)
        if full and (i + 1) % cfg.t_steps_per_g_step == 0:
            warped = warp(f, u)
            l1_before = l1_loss(translate(translator, warped), r).value
            translator, g_state, g_loss = translator_step(translator, warped, r, loss_cfg, g_state)
            report.translator.append(
                {"iteration": first + i, "level": level, "loss": g_loss, "l1": l1_before}
            )
            if callback is not None:
                callback(level, first + i, u, translator)
        if cfg.early_stop:
            if loss.total < best - cfg.early_stop_tol:
                best, stale = loss.total, 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    if full and warmup:
        report.warmup_iterations += n_warm
    final = registration_loss(r, f, u, loss_cfg, translator if full else None)
    report.level_end_loss.append(final.total)
    return u, translator, report


def register(ref, flo, cfg=None, callback=None):
    """Register ``flo`` onto ``ref``; returns ``(field, translator | None, report)``.

    ``callback(level, iteration, field, translator)`` is called after every translator update with the level's field
    (at that level's resolution); it must not modify its arguments.
    """
    cfg = cfg or RegistrationConfig()
    r = np.asarray(ref, dtype=np.float64)
    f = np.asarray(flo, dtype=np.float64)
    if r.shape != f.shape:
        raise ShapeError(f"reference {r.shape} and floating {f.shape} differ")
    report = RegistrationReport()
    u = None
    translator = None
    t0 = time.perf_counter()
    for k, factor in enumerate(cfg.levels):
        r_l = pyramid_downsample(r, factor)
        f_l = pyramid_downsample(f, factor)
        if u is not None:
            u = np.asarray(upsample_field(u, r_l.shape))
        warm = k == 0 or cfg.warmup_every_level
        u, translator, report = _run_level(
            r_l, f_l, cfg, u, translator, report, k, warmup=warm, factor=factor, callback=callback
        )
    report.runtime_seconds["register"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    warp(f, u)
    report.runtime_seconds["warp"] = time.perf_counter() - t1
    return RegistrationResult(DisplacementField(u), translator, report)


def final_smoothness(result):
    """Raw smoothness (sum of squared forward differences) of a result's field."""
    return smoothness_loss(result.field)[0]
