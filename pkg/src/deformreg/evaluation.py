"""Registration metrics and the single-pair experiment runner.

An experiment is described by a manifest (a dict or a JSON file) whose paths
are resolved relative to the manifest's directory::

    {"ref": "ref.raw", "flo": "flo.raw",
     "gt": "gt.raw", "mask_ref": "mask_ref.raw", "mask_flo": "mask_flo.raw",
     "field": "external.raw", "seed": 0}

Only ``ref`` and ``flo`` are required. ``field`` is the externally supplied
deformation scored by ``mi_report_only``.

When a ground-truth field is available, RMSE% compares ``F`` warped by the
estimate with ``F`` warped by the ground truth (a same-modality comparison).
Without one it falls back to ``R`` against ``F(phi)``, which is only
meaningful for mono-modal pairs; ``EvalResult.rmse_reference`` records which.
"""

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .field import (
    DisplacementField,
    jacobian_stats,
    load_field,
    save_field,
    warp,
    warp_nearest,
)
from .registration import RegistrationConfig, register
from .similarity import mi_metric
from .translator import save_translator, translate
from .volume import export_slice, load_mask, load_volume, save_volume

METHODS = ("mi_report_only", "lg_only", "full_alternating")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes {a.shape} and {b.shape} differ")
    return a, b


def rmse_percent(a, b):
    """``100 * sqrt(mean((a - b)**2))`` for volumes on a [0, 1] scale."""
    a, b = _pair(a, b)
    return 100.0 * float(np.sqrt(np.mean((a - b) ** 2)))


def dice(mask_a, mask_b, label):
    """Overlap of one label; two empty masks score 1."""
    a, b = _pair(mask_a, mask_b)
    a = a == label
    b = b == label
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def dice_per_label(mask_a, mask_b):
    a, b = _pair(mask_a, mask_b)
    labels = sorted((set(np.unique(a).astype(int)) | set(np.unique(b).astype(int))) - {0})
    return {int(k): dice(a, b, k) for k in labels}


def interior_mask(dims, margin=4):
    """Boolean mask dropping ``margin`` voxels at every face (shrunk on tiny grids)."""
    margin = max(0, min(int(margin), (min(dims) - 1) // 2))
    m = np.zeros(dims, dtype=bool)
    m[tuple(slice(margin, n - margin) for n in dims)] = True
    return m


def endpoint_error(phi, gt, mask=None, margin=4):
    """Mean Euclidean distance between displacement vectors over ``mask``."""
    u = np.asarray(phi, dtype=np.float64)
    v = np.asarray(gt, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 4 or u.shape[0] != 3:
        raise ShapeError(f"fields of shape {u.shape} and {v.shape} cannot be compared")
    if mask is None:
        mask = interior_mask(u.shape[1:], margin)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != u.shape[1:]:
        raise ShapeError(f"mask {mask.shape} does not match field dims {u.shape[1:]}")
    return float(np.linalg.norm(u - v, axis=0)[mask].mean())


@dataclass
class EvalResult:
    method: str
    rmse_percent: float
    rmse_percent_before: float
    rmse_reference: str
    dice_per_label: dict = field(default_factory=dict)
    dice_before: dict = field(default_factory=dict)
    mean_endpoint_error: float = None
    endpoint_error_before: float = None
    mi_before: float = None
    mi_after: float = None
    jacobian: dict = field(default_factory=dict)
    runtime_seconds: dict = field(default_factory=dict)
    n_iterations: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.rmse_percent < 0 or self.rmse_percent_before < 0:
            raise ValueError("rmse_percent must be non-negative")
        for d in (self.dice_per_label, self.dice_before):
            if any(not 0.0 <= v <= 1.0 for v in d.values()):
                raise ValueError("dice values must lie in [0, 1]")

    def to_dict(self, runtime=True):
        d = asdict(self)
        d["dice_per_label"] = {str(k): v for k, v in self.dice_per_label.items()}
        d["dice_before"] = {str(k): v for k, v in self.dice_before.items()}
        if not runtime:
            d.pop("runtime_seconds")
        return d


def load_manifest(manifest):
    """Return ``(dict, base_dir)``; a path is read as JSON."""
    if isinstance(manifest, (str, os.PathLike)):
        path = os.fspath(manifest)
        with open(path) as f:
            data = json.load(f)
        return data, os.path.dirname(os.path.abspath(path))
    return dict(manifest), os.getcwd()


def _resolve(base, p):
    return p if os.path.isabs(p) else os.path.join(base, p)


class _Stage:
    """Tag exceptions escaping a block with the experiment stage name."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not hasattr(exc, "stage"):
            exc.stage = self.name
        return False


def write_trace_csv(report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "level", "total", "lg", "lcc", "smooth", "translator_loss"])
        for row in report.trace_rows():
            w.writerow([row[0], row[1], *(repr(float(x)) for x in row[2:])])


def run_experiment(manifest, config=None, method="lg_only", out_dir=None, field_override=None):
    """Register one pair (or score a given field) and write the artifacts.

    Returns an :class:`EvalResult`. With ``out_dir`` set the directory receives
    ``result.json``, ``trace.csv``, ``field.raw``/``.json``, ``warped.raw``,
    ``translated.raw`` (full_alternating only), ``translator.json`` and
    mid-slice PNGs of ``R``, ``F``, ``F(phi)`` and ``F'(phi)``.
    """
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    with _Stage("load"):
        data, base = load_manifest(manifest)
        if "ref" not in data or "flo" not in data:
            raise ConfigError("manifest needs 'ref' and 'flo' entries")
        ref = np.asarray(load_volume(_resolve(base, data["ref"])))
        flo = np.asarray(load_volume(_resolve(base, data["flo"])))
        if ref.shape != flo.shape:
            raise ShapeError(f"reference {ref.shape} and floating {flo.shape} differ")
        gt = np.asarray(load_field(_resolve(base, data["gt"]))) if data.get("gt") else None
        mask_ref = np.asarray(load_mask(_resolve(base, data["mask_ref"]))) if data.get("mask_ref") else None
        mask_flo = np.asarray(load_mask(_resolve(base, data["mask_flo"]))) if data.get("mask_flo") else None
        supplied = field_override
        if supplied is None and data.get("field"):
            supplied = load_field(_resolve(base, data["field"]))

    with _Stage("config"):
        if isinstance(config, RegistrationConfig):
            cfg = config
        else:
            cfg = RegistrationConfig.from_dict(config or {})
        if method != "mi_report_only":
            overrides = {"mode": method}
            if "seed" in data and not (isinstance(config, dict) and "seed" in config):
                overrides["seed"] = int(data["seed"])
            cfg = RegistrationConfig.from_dict({**cfg.to_dict(), **overrides})

    translator = None
    report = None
    runtime = {}
    with _Stage("register"):
        if method == "mi_report_only":
            if supplied is None:
                raise ConfigError("mi_report_only needs an externally supplied field")
            u = np.asarray(supplied, dtype=np.float64)
            if u.shape != (3, *ref.shape):
                raise ShapeError(f"supplied field {u.shape} does not match volume {ref.shape}")
        else:
            t0 = time.perf_counter()
            phi, translator, report = register(ref, flo, cfg)
            runtime["total"] = time.perf_counter() - t0
            runtime.update(report.runtime_seconds)
            u = np.asarray(phi)

    with _Stage("metrics"):
        warped = warp(flo, u)
        zero = np.zeros_like(u)
        if gt is not None:
            target = warp(flo, gt)
            rmse_after, rmse_before, reference = rmse_percent(warped, target), rmse_percent(flo, target), "warped_by_gt"
            epe_after, epe_before = endpoint_error(u, gt), endpoint_error(zero, gt)
        else:
            rmse_after, rmse_before, reference = rmse_percent(warped, ref), rmse_percent(flo, ref), "ref"
            epe_after = epe_before = None
        dice_after = dice_prior = {}
        if mask_ref is not None and mask_flo is not None:
            dice_after = dice_per_label(warp_nearest(mask_flo, u), mask_ref)
            dice_prior = dice_per_label(mask_flo, mask_ref)
        result = EvalResult(
            method=method,
            rmse_percent=rmse_after,
            rmse_percent_before=rmse_before,
            rmse_reference=reference,
            dice_per_label=dice_after,
            dice_before=dice_prior,
            mean_endpoint_error=epe_after,
            endpoint_error_before=epe_before,
            mi_before=mi_metric(ref, flo),
            mi_after=mi_metric(ref, warped),
            jacobian=asdict(jacobian_stats(u)),
            runtime_seconds=runtime,
            n_iterations=report.n_iterations if report is not None else 0,
            seed=cfg.seed,
        )

    if out_dir is not None:
        with _Stage("write"):
            write_artifacts(out_dir, result, ref, flo, u, warped, translator, report, cfg)
    return result


def write_artifacts(out_dir, result, ref, flo, u, warped, translator, report, cfg):
    os.makedirs(out_dir, exist_ok=True)
    j = os.path.join
    with open(j(out_dir, "result.json"), "w") as f:
        json.dump(result.to_dict(), f, indent=2)
    with open(j(out_dir, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
    if report is not None:
        write_trace_csv(report, j(out_dir, "trace.csv"))
    save_field(DisplacementField(u), j(out_dir, "field.raw"))
    save_volume(warped, j(out_dir, "warped.raw"))
    mid = ref.shape[2] // 2
    export_slice(ref, 2, mid, j(out_dir, "slice_ref.png"))
    export_slice(flo, 2, mid, j(out_dir, "slice_flo.png"))
    export_slice(warped, 2, mid, j(out_dir, "slice_warped.png"))
    if translator is not None:
        translated = np.asarray(translate(translator, warped))
        save_volume(translated, j(out_dir, "translated.raw"))
        save_translator(translator, j(out_dir, "translator.json"))
        export_slice(translated, 2, mid, j(out_dir, "slice_translated.png"))
