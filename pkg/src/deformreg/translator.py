"""Per-voxel intensity translation from the floating to the reference modality.

Two model kinds:

* ``lut``: piecewise-linear map over [0, 1] with fixed knot positions and
  free knot values.
* ``mlp``: per-voxel network on six standardized features (intensity, the
  three components of the window-summed normalized gradient, local mean and
  local standard deviation), ``out = wlin.z + b2 + w2.tanh(W1 z + b1)``.

Both are trained by Adam against :func:`~deformreg.similarity.translator_loss`.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import _ops
from .errors import ConfigError, DivergenceError, ShapeError
from .optim import AdamState
from .similarity import (
    LossConfig,
    _normalize,
    _normalize_vjp,
    local_gradient,
    local_gradient_adjoint,
    translator_loss,
)
from .volume import like

N_FEATURES = 6
_STD_FLOOR = 1e-6


@dataclass
class TranslatorModel:
    kind: str
    params: dict
    knots: np.ndarray = None
    feature_mean: np.ndarray = None
    feature_std: np.ndarray = None
    feature_window: int = 3
    feature_epsilon: float = 1e-2

    def __post_init__(self):
        self.params = {k: np.array(v, dtype=np.float64) for k, v in self.params.items()}
        self.validate()

    def validate(self):
        if self.kind == "lut":
            k = np.asarray(self.knots, dtype=np.float64)
            if k.ndim != 1 or k.size < 2 or np.any(np.diff(k) <= 0) or k[0] < 0 or k[-1] > 1:
                raise ConfigError("lut knots must be strictly increasing within [0, 1]")
            if self.params.get("values", np.empty(0)).shape != k.shape:
                raise ConfigError("lut needs one value per knot")
            self.knots = k
        elif self.kind == "mlp":
            for key in ("W1", "b1", "w2", "b2", "wlin"):
                if key not in self.params:
                    raise ConfigError(f"mlp model is missing {key}")
            h = self.params["b1"].size
            if self.params["W1"].shape != (h, N_FEATURES) or self.params["w2"].shape != (h,):
                raise ConfigError("inconsistent mlp weight shapes")
            self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64)
            self.feature_std = np.asarray(self.feature_std, dtype=np.float64)
            if self.feature_mean.shape != (N_FEATURES,) or np.any(self.feature_std <= 0):
                raise ConfigError("mlp feature normalization constants are invalid")
        else:
            raise ConfigError(f"unknown translator kind {self.kind!r}")
        if not all(np.all(np.isfinite(p)) for p in self.params.values()):
            raise ConfigError("translator parameters must be finite")

    def with_params(self, params):
        return TranslatorModel(
            self.kind,
            params,
            self.knots,
            self.feature_mean,
            self.feature_std,
            self.feature_window,
            self.feature_epsilon,
        )

    @property
    def n_params(self):
        return sum(p.size for p in self.params.values())

    def to_dict(self):
        d = {"kind": self.kind, "params": {k: v.tolist() for k, v in self.params.items()}}
        if self.kind == "lut":
            d["knots"] = self.knots.tolist()
        else:
            d["feature_mean"] = self.feature_mean.tolist()
            d["feature_std"] = self.feature_std.tolist()
            d["feature_window"] = self.feature_window
            d["feature_epsilon"] = self.feature_epsilon
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["kind"],
            d["params"],
            d.get("knots"),
            d.get("feature_mean"),
            d.get("feature_std"),
            d.get("feature_window", 3),
            d.get("feature_epsilon", 1e-2),
        )


def save_translator(model, path):
    with open(path, "w") as f:
        json.dump(model.to_dict(), f)


def load_translator(path):
    with open(path) as f:
        return TranslatorModel.from_dict(json.load(f))


def identity_lut(n_knots=32):
    knots = np.linspace(0.0, 1.0, n_knots)
    return TranslatorModel("lut", {"values": knots.copy()}, knots)


def lut_from_function(fn, n_knots=32):
    knots = np.linspace(0.0, 1.0, n_knots)
    return TranslatorModel("lut", {"values": np.asarray(fn(knots), dtype=np.float64)}, knots)


def init_mlp(vol, hidden=16, seed=0, feature_window=3, feature_epsilon=1e-2):
    """An MLP that starts as the identity map on ``vol``'s intensities.

    Feature standardization constants are taken from ``vol`` and then frozen.
    """
    feats, _ = _features(np.asarray(vol, dtype=np.float64), feature_window, feature_epsilon)
    flat = feats.reshape(N_FEATURES, -1)
    mean = flat.mean(axis=1)
    std = np.maximum(flat.std(axis=1), 1e-3)
    rng = np.random.default_rng(seed)
    wlin = np.zeros(N_FEATURES)
    wlin[0] = std[0]
    params = {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(N_FEATURES), (hidden, N_FEATURES)),
        "b1": rng.normal(0.0, 0.1, hidden),
        "w2": rng.normal(0.0, 1e-2, hidden),
        "b2": np.array([mean[0]]),
        "wlin": wlin,
    }
    return TranslatorModel("mlp", params, None, mean, std, feature_window, feature_epsilon)


# ---------------------------------------------------------------------------
# forward maps


def _lut_cells(model, x):
    k = model.knots
    xc = np.clip(x, k[0], k[-1])
    i = np.clip(np.searchsorted(k, xc, side="right") - 1, 0, k.size - 2)
    t = (xc - k[i]) / (k[i + 1] - k[i])
    return i, t


def _features(a, window, eps):
    """Feature stack (6, ...) and the intermediates needed for its adjoint."""
    g = local_gradient(a, window)
    nvec, mag = _normalize(g, eps)
    mean = _ops.box_mean(a, window)
    var_raw = _ops.box_mean(a * a, window) - mean * mean
    var = np.maximum(var_raw, 0.0)
    std = np.sqrt(var + _STD_FLOOR)
    feats = np.concatenate([a[None], nvec, mean[None], std[None]])
    return feats, (g, mag, mean, std, var_raw > 0)


def _features_adjoint(fbar, a, cache, window, eps):
    g, mag, mean, std, active = cache
    count = _ops.box_count(a.shape, window)
    abar = fbar[0].copy()
    abar += local_gradient_adjoint(_normalize_vjp(g, mag, fbar[1:4], eps), window)
    abar += _ops.box_sum(fbar[4] / count, window)
    vbar = np.where(active, fbar[5] / (2.0 * std), 0.0)
    # var = box_mean(a^2) - mean^2
    abar += 2.0 * a * _ops.box_sum(vbar / count, window)
    abar -= _ops.box_sum(2.0 * mean * vbar / count, window)
    return abar


def translate(model, vol):
    """Apply the model voxel-wise; returns the same container type as ``vol``."""
    return translate_vjp(model, vol, need_grad=False)[0]


def translate_vjp(model, vol, need_grad=True):
    """Forward pass plus a pullback ``g -> (param_grads, input_grad)``."""
    a = np.asarray(vol, dtype=np.float64)
    if a.ndim != 3:
        raise ShapeError(f"expected a 3D volume, got shape {a.shape}")
    p = model.params
    if model.kind == "lut":
        i, t = _lut_cells(model, a)
        v = p["values"]
        out = (1.0 - t) * v[i] + t * v[i + 1]
        slope = (v[i + 1] - v[i]) / (model.knots[i + 1] - model.knots[i])
        slope = np.where((a >= model.knots[0]) & (a <= model.knots[-1]), slope, 0.0)

        def pullback(gbar):
            gbar = np.asarray(gbar, dtype=np.float64)
            k = v.size
            dv = np.bincount(i.ravel(), ((1.0 - t) * gbar).ravel(), minlength=k)
            dv += np.bincount((i + 1).ravel(), (t * gbar).ravel(), minlength=k)
            return {"values": dv}, slope * gbar

        return like(vol, out), pullback

    feats, cache = _features(a, model.feature_window, model.feature_epsilon)
    shape = a.shape
    z = (feats.reshape(N_FEATURES, -1) - model.feature_mean[:, None]) / model.feature_std[:, None]
    h = np.tanh(p["W1"] @ z + p["b1"][:, None])
    out = (p["wlin"] @ z + p["w2"] @ h + p["b2"][0]).reshape(shape)

    def pullback(gbar):
        gb = np.asarray(gbar, dtype=np.float64).ravel()
        dpre = p["w2"][:, None] * (1.0 - h * h) * gb[None, :]
        grads = {
            "W1": dpre @ z.T,
            "b1": dpre.sum(axis=1),
            "w2": h @ gb,
            "b2": np.array([gb.sum()]),
            "wlin": z @ gb,
        }
        dz = p["wlin"][:, None] * gb[None, :] + p["W1"].T @ dpre
        fbar = (dz / model.feature_std[:, None]).reshape((N_FEATURES,) + shape)
        abar = _features_adjoint(fbar, a, cache, model.feature_window, model.feature_epsilon)
        return grads, abar

    return like(vol, out), pullback


def translator_objective(model, warped, ref, cfg=None):
    """Translator loss at ``model`` and its gradient w.r.t. every parameter."""
    out, pullback = translate_vjp(model, warped)
    loss = translator_loss(out, warped, ref, cfg)
    grads, _ = pullback(loss.grad)
    return loss.value, grads


def new_train_state(lr=1e-4, eps=1e-8):
    return AdamState(lr=lr, eps=eps)


def translator_step(model, warped, ref, cfg=None, state=None):
    """One Adam update of the translator; returns ``(model', state', loss)``.

    ``loss`` is the objective evaluated at the incoming parameters (the one
    whose gradient drove the update).
    """
    cfg = cfg or LossConfig()
    state = new_train_state() if state is None else state.copy()
    if np.shape(warped) != np.shape(ref):
        raise ShapeError(f"warped {np.shape(warped)} and reference {np.shape(ref)} differ")
    value, grads = translator_objective(model, warped, ref, cfg)
    if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise DivergenceError("translator loss is not finite", state=(model, state))
    new = model.with_params(state.update(model.params, grads))
    return new, state, value
