"""Command-line entry point: ``deformreg <subcommand> ...``.

Exit codes: 0 success, 1 gradient check failure, 2 configuration or input
error, 3 numeric divergence, 4 I/O or file-format error.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, FormatError, ShapeError
from .evaluation import METHODS, run_experiment
from .field import load_field, save_field, warp
from .gradcheck import run_all
from .synth import ModalityRemapSpec, SyntheticDeformSpec, make_pair
from .translator import load_translator, translate
from .volume import export_slice, load_volume, save_mask, save_volume

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def _registration_config(args):
    cfg = _read_config(args.config)
    cfg = dict(cfg.get("registration", cfg))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def cmd_synth(args):
    cfg = _read_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    deform = SyntheticDeformSpec(**{"seed": seed, **_tuples(cfg.get("deform", {}))})
    remap = dict(cfg.get("remap", {}))
    if args.noise is not None:
        remap["noise_sigma"] = args.noise
    remap = ModalityRemapSpec(**{"seed": seed, **_tuples(remap)})
    dims = tuple(args.dims)
    pair = make_pair(dims, deform, remap, seed, args.n_blobs)
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    save_volume(pair.ref, os.path.join(out, "ref.raw"))
    save_volume(pair.flo, os.path.join(out, "flo.raw"))
    save_field(pair.gt, os.path.join(out, "gt.raw"))
    save_mask(pair.mask_ref, os.path.join(out, "mask_ref.raw"))
    save_mask(pair.mask_flo, os.path.join(out, "mask_flo.raw"))
    manifest = {
        "ref": "ref.raw",
        "flo": "flo.raw",
        "gt": "gt.raw",
        "mask_ref": "mask_ref.raw",
        "mask_flo": "mask_flo.raw",
        **pair.meta,
    }
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    print(os.path.join(out, "manifest.json"))
    return EXIT_OK


def _tuples(d):
    return {k: tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v
            for k, v in d.items()}


def cmd_register(args):
    manifest = {"ref": os.path.abspath(args.ref), "flo": os.path.abspath(getattr(args, "float"))}
    result = run_experiment(manifest, _registration_config(args), args.mode, args.out_dir)
    print(json.dumps(result.to_dict(), indent=2))
    return EXIT_OK


def _eval_one(job):
    manifest, config, mode, out_dir = job
    return run_experiment(manifest, config, mode, out_dir).to_dict()


def cmd_eval(args):
    config = _registration_config(args)
    manifests = args.manifest
    jobs = []
    for m in manifests:
        out = args.out_dir
        if len(manifests) > 1:
            out = os.path.join(args.out_dir, os.path.basename(os.path.dirname(os.path.abspath(m))) or "pair")
        jobs.append((m, config, args.mode, out))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_eval_one, jobs))
    else:
        results = [_eval_one(j) for j in jobs]
    print(json.dumps(results if len(results) > 1 else results[0], indent=2))
    return EXIT_OK


def cmd_translate(args):
    model = load_translator(args.translator)
    vol = load_volume(getattr(args, "float"))
    if args.field:
        vol = warp(vol, load_field(args.field))
    save_volume(np.asarray(translate(model, vol)), args.out)
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_all(seed=args.seed or 0, n_probes=args.probes)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_slice(args):
    vol = load_volume(args.input)
    index = args.index if args.index is not None else vol.dims[args.axis] // 2
    export_slice(vol, args.axis, index, args.out)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="deformreg", description="Multi-modal deformable registration.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic pair and its manifest")
    s.add_argument("--dims", type=int, nargs=3, default=[32, 32, 32])
    s.add_argument("--seed", type=int)
    s.add_argument("--noise", type=float, help="additive noise sigma of the floating image")
    s.add_argument("--n-blobs", type=int, default=2)
    s.add_argument("--config", help="JSON with optional 'deform' and 'remap' objects")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("register", help="register --float onto --ref")
    s.add_argument("--ref", required=True)
    s.add_argument("--float", required=True)
    s.add_argument("--config")
    s.add_argument("--mode", choices=METHODS[1:], default="full_alternating")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("eval", help="run experiments from manifests")
    s.add_argument("manifest", nargs="+")
    s.add_argument("--config")
    s.add_argument("--mode", choices=METHODS, default="full_alternating")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("translate", help="apply a saved translator to a volume")
    s.add_argument("--translator", required=True)
    s.add_argument("--float", required=True)
    s.add_argument("--field", help="warp the volume by this field first")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--probes", type=int, default=30)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("slice", help="export one slice of a volume as PNG or PGM")
    s.add_argument("--input", required=True)
    s.add_argument("--axis", type=int, choices=(0, 1, 2), default=2)
    s.add_argument("--index", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_slice)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error [{getattr(exc, 'stage', args.command)}]: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError, DataError) as exc:
        print(f"error [{getattr(exc, 'stage', args.command)}]: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, ValueError, TypeError) as exc:
        print(f"error [{getattr(exc, 'stage', args.command)}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
