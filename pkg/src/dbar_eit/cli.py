"""Command line interface.

Subcommands:
  simulate     write simulated voltage frames and DN matrices
  reconstruct  run one prior method for one (R2, alpha) pair
  sweep        full (noise x R2 x alpha) grid for the configured method
  metrics      metrics of a stored image CSV against the configured phantom
  render       PNG heatmap of a stored image CSV

Flags override the JSON config; every run writes a manifest with the config
hash and seeds so artifacts are reproducible bit for bit.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .pipeline import ExperimentConfig, PipelineError, compute_metrics, run_pipeline, write_outputs


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    for name in ("noise", "seed", "r1", "out", "prior", "z_n"):
        val = getattr(args, name, None)
        if val is None:
            continue
        key = {"noise": "noise_levels", "out": "out_dir", "prior": "prior_method"}.get(name, name)
        overrides[key] = [val] if key == "noise_levels" else val
    if getattr(args, "r2", None) is not None:
        overrides["r2_list"] = [args.r2]
    if getattr(args, "alpha", None) is not None:
        overrides["alpha_list"] = [args.alpha]
    for key, val in overrides.items():
        setattr(cfg, key, val)
    cfg.validate()
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--noise", type=float, help="noise level override (fraction of max |V|)")
    p.add_argument("--seed", type=int, help="noise seed override")
    p.add_argument("--r1", type=float, help="data truncation radius")
    p.add_argument("--r2", type=float, help="prior truncation radius (single value)")
    p.add_argument("--alpha", type=float, help="prior weight (single value)")
    p.add_argument("--prior", choices=("none", "blind", "extract", "iterate"), help="prior method")
    p.add_argument("--z-n", dest="z_n", type=int, help="reconstruction grid side")
    p.add_argument("--out", help="output directory")


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    from .forward import save_voltage_frame, simulate_dataset
    from .mesh import MeshConfig
    from .priors import evaluate_piecewise

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    domain = cfg.domain()
    regions = cfg.phantom_regions()
    sigma_fn = lambda z: evaluate_piecewise(regions, cfg.phantom_values, z)  # noqa: E731
    for i, level in enumerate(cfg.noise_levels):
        data = simulate_dataset(domain, sigma_fn, noise_level=level, seed=cfg.noise_seed(i),
                                data_mesh=MeshConfig(cfg.data_mesh_nodes),
                                reference_mesh=MeshConfig(cfg.reference_mesh_nodes),
                                contact_impedance=cfg.contact_impedance)
        tag = f"noise-{level:g}".replace(".", "p")
        save_voltage_frame(data["frame"], domain, out / f"voltages_{tag}.csv",
                           out / f"voltages_{tag}.json")
        np.savetxt(out / f"nd_{tag}.csv", data["R_sigma"], delimiter=",", fmt="%.17g")
        np.savetxt(out / f"dn_{tag}.csv", data["L_sigma"], delimiter=",", fmt="%.17g")
        print(f"wrote voltages and ND/DN matrices for noise {level:g} (c = {data['c']:.6g})")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _load_config(args)
    result = run_pipeline(cfg, progress=lambda m: print(m, flush=True))
    manifest = write_outputs(result)
    _print_summary(manifest)
    return _exit_code(manifest)


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    result = run_pipeline(cfg, progress=lambda m: print(m, flush=True))
    manifest = write_outputs(result)
    _print_summary(manifest)
    return _exit_code(manifest)


def cmd_metrics(args) -> int:
    cfg = _load_config(args)
    from .dbar import ConductivityImage
    from .priors import assemble_piecewise_sigma

    grid = cfg.zgrid()
    values = np.loadtxt(args.image, delimiter=",")
    if values.shape != grid.points.shape:
        print(f"error: image shape {values.shape} does not match z_n = {cfg.z_n}", file=sys.stderr)
        return 2
    img = ConductivityImage(grid=grid, values=values)
    phantom = assemble_piecewise_sigma(cfg.phantom_regions(), cfg.phantom_values, grid)
    m = compute_metrics(img, phantom, cfg.phantom_regions())
    doc = m.to_json()
    print(json.dumps(doc, indent=1))
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=1))
    return 0


def cmd_render(args) -> int:
    cfg = _load_config(args)
    from .plotting import render_conductivity_png

    grid = cfg.zgrid()
    values = np.loadtxt(args.image, delimiter=",")
    if values.shape != grid.points.shape:
        print(f"error: image shape {values.shape} does not match z_n = {cfg.z_n}", file=sys.stderr)
        return 2
    out = args.out or (str(Path(args.image).with_suffix(".png")))
    render_conductivity_png(values, grid, out, vmin=args.vmin, vmax=args.vmax,
                            regions=cfg.phantom_regions(),
                            scale_tag="cli-render")
    print(f"wrote {out}")
    return 0


def _print_summary(manifest: dict) -> None:
    for case in manifest["noise_cases"]:
        print(f"noise {case['noise_level']:g}: {len(case['images'])} images, "
              f"c = {case['c_scale']:.4g}, failures: {len(case['failures'])}")
        for img in case["images"]:
            m = img["metrics"]
            contrast = m["effusion_contrast"]
            print(f"  {img['method']:>8s} R2={img['r2']:<5g} alpha={img['alpha']:<5g} "
                  f"L2err={m['rel_l2_error']:.4f}"
                  + (f" contrast={contrast:.3f}" if contrast else ""))


def _exit_code(manifest: dict) -> int:
    failures = sum(len(c["failures"]) for c in manifest["noise_cases"])
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dbar-eit",
                                     description="D-bar EIT reconstruction with a priori information")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate voltage data and DN matrices")
    _add_common(p)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("reconstruct", help="run the pipeline for one configuration")
    _add_common(p)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("sweep", help="run the full (noise x R2 x alpha) sweep")
    _add_common(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("metrics", help="metrics of a stored image CSV")
    _add_common(p)
    p.add_argument("--image", required=True, help="image CSV path")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("render", help="render an image CSV to PNG")
    _add_common(p)
    p.add_argument("--image", required=True, help="image CSV path")
    p.add_argument("--vmin", type=float)
    p.add_argument("--vmax", type=float)
    p.set_defaults(fn=cmd_render)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (PipelineError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
