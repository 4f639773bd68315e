"""Experiment orchestration: simulated data, prior construction, the full
reconstruction sweep over (R2, alpha), metrics, and artifact output.

``run_pipeline`` executes one prior method end to end for one or more noise
levels; ``write_outputs`` serializes CSV grids, PNG heatmaps (shared color
scale per noise case), and a JSON manifest with config hash, seeds, solver
diagnostics, and metrics.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import thorax
from .cgo_boundary import scattering_from_dn
from .cgo_interior import (ScatteringField, assemble_piecewise_t, build_periodic_grid,
                           periodic_potential, restrict_to_zgrid, solve_ls_batch, t_pr_batch)
from .dbar import (ConductivityImage, MuIntAccumulator, MuIntField, ReconstructionParams,
                   reconstruct, reconstruct_sweep)
from .forward import make_pattern_basis, simulate_dataset
from .geometry import DomainDisc, ZGrid, build_zgrid, kgrid_for_radius, load_regions_json
from .mesh import MeshConfig
from .plotting import render_conductivity_png, render_scattering_png
from .priors import (ConductivityField, ExtractionParams, PriorField, assemble_piecewise_sigma,
                     blind_estimate_prior, build_extraction_prior, extract_values)


class PipelineError(RuntimeError):
    pass


PRIOR_METHODS = ("none", "blind", "extract", "iterate")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment, JSON serializable."""

    # geometry / measurement
    radius_mm: float = 143.2
    electrodes: int = 32
    coverage: float = 0.5
    contact_impedance: float = 1e-3
    data_mesh_nodes: int = 10
    reference_mesh_nodes: int = 8
    # grids
    z_n: int = 101
    k_spacing: float = 1.0 / 3.0
    periodic_m: int = 8
    periodic_s: float = 2.1
    # phantom
    phantom_values: dict = field(default_factory=lambda: dict(thorax.PHANTOM_VALUES))
    phantom_divider_fraction: float = thorax.PHANTOM_DIVIDER_FRACTION
    regions_file: str | None = None
    # prior construction
    prior_method: str = "none"
    blind_values: dict = field(default_factory=lambda: dict(thorax.BLIND_ESTIMATE_VALUES))
    extraction_c: float = 0.85
    extraction_c1: float = 0.25
    extraction_c2: float = 0.95
    extraction_divider_fraction: float = thorax.EXTRACTION_DIVIDER_FRACTION
    mollification_mm: float = 6.0
    iterate_source_r2: float = 5.0
    iterate_source_alpha: float = 0.75
    # noise
    noise_levels: list = field(default_factory=lambda: [0.0])
    seed: int = 7
    # reconstruction
    r1: float = 3.8
    r2_list: list = field(default_factory=lambda: [3.8, 5.0, 7.5, 10.0])
    alpha_list: list = field(default_factory=lambda: [0.0, 0.5, 0.75, 0.9])
    solver_tol: float = 1e-6
    solver_maxiter: int = 500
    gamma_subsamples: int = 8
    exterior_value: float = 1.0
    use_conjugate_symmetry: bool = False
    # output
    out_dir: str = "out"

    def validate(self) -> None:
        if self.prior_method not in PRIOR_METHODS:
            raise PipelineError(f"prior_method must be one of {PRIOR_METHODS}, got {self.prior_method!r}")
        if self.r1 <= 0:
            raise PipelineError("r1 must be positive")
        if min(self.r2_list) < self.r1:
            raise PipelineError(f"every R2 must be >= R1 = {self.r1}")
        if any(not (0.0 <= a <= 1.0) for a in self.alpha_list):
            raise PipelineError("alpha values must lie in [0, 1]")
        if any(n < 0 for n in self.noise_levels):
            raise PipelineError("noise levels must be >= 0")
        if self.z_n % 2 == 0 or self.z_n < 3:
            raise PipelineError("z_n must be odd and >= 3")

    @classmethod
    def from_json(cls, path_or_dict) -> "ExperimentConfig":
        if isinstance(path_or_dict, dict):
            doc = dict(path_or_dict)
        else:
            with open(path_or_dict) as fh:
                doc = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise PipelineError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def to_json(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # derived objects -----------------------------------------------------
    def domain(self) -> DomainDisc:
        return DomainDisc(radius=self.radius_mm, electrode_count=self.electrodes, coverage=self.coverage)

    def zgrid(self) -> ZGrid:
        return build_zgrid(self.radius_mm, self.z_n)

    def phantom_regions(self):
        if self.regions_file:
            _, regions = load_regions_json(self.regions_file)
            return regions
        return thorax.thorax_regions(self.radius_mm, self.phantom_divider_fraction)

    def prior_regions(self):
        if self.regions_file:
            _, regions = load_regions_json(self.regions_file)
            return regions
        return thorax.thorax_regions(self.radius_mm, self.extraction_divider_fraction)

    def extraction_params(self) -> ExtractionParams:
        return ExtractionParams(c=self.extraction_c, c1=self.extraction_c1, c2=self.extraction_c2,
                                lung_divider=self.extraction_divider_fraction * self.radius_mm)

    def noise_seed(self, noise_index: int) -> int:
        return self.seed + 1000 * noise_index


@dataclass
class Metrics:
    """Image quality numbers computed on domain-masked pixels only."""

    rel_l2_error: float
    region_means: dict
    effusion_contrast: float | None
    imag_rel_median: float
    runtime_s: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"rel_l2_error": self.rel_l2_error, "region_means": self.region_means,
                "effusion_contrast": self.effusion_contrast,
                "imag_rel_median": self.imag_rel_median, "runtime_s": self.runtime_s}


def compute_metrics(image: ConductivityImage, phantom: ConductivityField, regions) -> Metrics:
    """Relative L2 error, per-region means, and the effusion contrast."""
    if image.values.shape != phantom.values.shape:
        raise PipelineError("image and phantom grids differ")
    mask = image.grid.domain_mask
    diff = image.values[mask] - phantom.values[mask]
    rel = float(np.linalg.norm(diff) / np.linalg.norm(phantom.values[mask]))
    from .geometry import region_mask

    means = {}
    for r in regions:
        m = region_mask(r, image.grid) & mask
        if m.any():
            means[r.label] = float(image.values[m].mean())
    contrast = None
    if "l_lung_bottom" in means and "l_lung_top" in means and means["l_lung_top"] != 0:
        contrast = means["l_lung_bottom"] / means["l_lung_top"]
    return Metrics(rel_l2_error=rel, region_means=means, effusion_contrast=contrast,
                   imag_rel_median=float(image.metadata.get("imag_rel_median", 0.0)))


@dataclass
class NoiseCaseResult:
    noise_level: float
    seed: int
    c_scale: float
    baseline: ConductivityImage
    images: dict = field(default_factory=dict)  # (method, r2, alpha) -> image
    prior: PriorField | None = None
    prior_values: dict = field(default_factory=dict)
    t_field: ScatteringField | None = None
    mu_int: dict = field(default_factory=dict)  # r2 -> MuIntField (on domain points)
    metrics: dict = field(default_factory=dict)  # key -> Metrics
    failures: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


@dataclass
class PipelineResult:
    config: ExperimentConfig
    phantom: ConductivityField
    cases: list = field(default_factory=list)
    runtime_s: dict = field(default_factory=dict)


_STAGE_CACHE: dict[str, object] = {}


def _cache_key(stage: str, **parts) -> str:
    """Content hash for stage reuse: sweeps over (R2, alpha) and repeated
    runs share DN maps, boundary scattering samples, and prior sweeps."""

    def enc(v):
        if isinstance(v, np.ndarray):
            return hashlib.sha256(np.ascontiguousarray(v).tobytes()).hexdigest()
        if isinstance(v, dict):
            return {k: enc(v[k]) for k in sorted(v)}
        if isinstance(v, (list, tuple)):
            return [enc(x) for x in v]
        return v

    blob = json.dumps({"stage": stage, **{k: enc(v) for k, v in sorted(parts.items())}},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def clear_stage_cache() -> None:
    _STAGE_CACHE.clear()


def prior_scattering_sweep(
    prior: PriorField,
    kgrid,
    r1: float,
    r2_values: list[float],
    zgrid: ZGrid,
    periodic_m: int = 8,
    periodic_s: float = 2.1,
    tol: float = 1e-6,
    maxiter: int = 500,
    chunk: int = 48,
    use_conjugate_symmetry: bool = False,
    progress=None,
):
    """Lippmann-Schwinger sweep over the frequency disc |k| <= max(R2).

    Returns (t_pr grid array, mu_int fields per R2 on the domain-masked z
    points, diagnostics).  mu_pr is solved once per frequency; the disc
    averages for every requested R2 reuse the same solves via shell sums.

    With ``use_conjugate_symmetry`` only frequencies in the upper half plane
    are solved and mirrored to -conj(k); that symmetry requires the prior to
    be mirror symmetric about the x axis and is verified before use.
    """
    r2max = max(r2_values)
    pgrid = build_periodic_grid(periodic_m, periodic_s)
    q_p = periodic_potential(prior, pgrid)

    if use_conjugate_symmetry:
        vals = prior.sigma_pr.values
        if not np.allclose(vals, vals[:, ::-1], rtol=0, atol=1e-12 * np.abs(vals).max()):
            raise PipelineError("conjugate-symmetry shortcut requires a prior that is "
                                "mirror symmetric about the x axis")

    mask = kgrid.disc_mask(r2max)
    kpts = kgrid.points[mask]
    idx = np.argwhere(mask)
    acc = MuIntAccumulator(r2_values, zgrid.points.shape)
    t_grid = np.full(kgrid.points.shape, np.nan, dtype=complex)

    if use_conjugate_symmetry:
        # mu(z, -conj k) = conj(mu(conj z, k)) and t(-conj k) = conj(t(k)):
        # solve the half plane Re k >= 0 and mirror across the imaginary
        # axis; points on the axis are their own mirror and are all solved
        solve_sel = kpts.real > -1e-15
    else:
        solve_sel = np.ones(kpts.size, dtype=bool)

    solve_list = np.where(solve_sel)[0]
    diagnostics = {"ls_max_residual": 0.0, "ls_total_iterations": 0, "ls_solves": 0}
    done = 0
    for start in range(0, len(solve_list), chunk):
        sel = solve_list[start : start + chunk]
        kc = kpts[sel]
        mu, rel, iters = solve_ls_batch(q_p, kc, pgrid, tol=tol, maxiter=maxiter, chunk=chunk)
        diagnostics["ls_max_residual"] = max(diagnostics["ls_max_residual"], float(rel.max()))
        diagnostics["ls_total_iterations"] += int(iters.sum())
        diagnostics["ls_solves"] += len(kc)
        tvals = t_pr_batch(kc, q_p, mu, pgrid)
        mu_z = restrict_to_zgrid(mu, pgrid, zgrid)
        for j, (i_loc, t_val) in enumerate(zip(sel, tvals)):
            gi, gj = idx[i_loc]
            t_grid[gi, gj] = t_val
            acc.add(complex(kc[j]), mu_z[j])
            if use_conjugate_symmetry:
                km = -np.conj(kc[j])
                if abs(km - kc[j]) > 1e-14:
                    mloc = np.argmin(np.abs(kpts - km))
                    gmi, gmj = idx[mloc]
                    t_grid[gmi, gmj] = np.conj(t_val)
                    # reflect in z as well: grid axis 1 is the imaginary part
                    acc.add(complex(km), np.conj(mu_z[j][:, ::-1]))
        done += len(kc)
        if progress is not None:
            progress(done, len(solve_list))

    mu_int = {r2: acc.field(r2) for r2 in r2_values}
    return t_grid, mu_int, diagnostics


def run_pipeline(config: ExperimentConfig, progress=None, reuse_cache: bool = True) -> PipelineResult:
    """Execute the configured experiment for every noise level.

    Stages per noise case: simulate measurements, DN matrices, boundary
    scattering on |k| <= R1, the no-prior baseline image, prior construction
    per the configured method, the prior-side frequency sweep, and one
    reconstruction per (R2, alpha).  A sweep-cell failure is recorded and
    does not abort sibling cells.  Expensive stages are cached in process,
    keyed by a content hash of everything they depend on; pass
    ``reuse_cache=False`` to force recomputation.
    """
    config.validate()
    t_start = time.time()
    say = progress or (lambda msg: None)

    def cached(stage, builder, **parts):
        if not reuse_cache:
            return builder()
        key = _cache_key(stage, **parts)
        if key not in _STAGE_CACHE:
            _STAGE_CACHE[key] = builder()
        return _STAGE_CACHE[key]

    domain = config.domain()
    zgrid = config.zgrid()
    regions_true = config.phantom_regions()
    phantom = assemble_piecewise_sigma(regions_true, config.phantom_values, zgrid)

    def sigma_fn(z_mm):
        from .priors import evaluate_piecewise

        return evaluate_piecewise(regions_true, config.phantom_values, z_mm)

    need_prior = config.prior_method != "none"
    r2_sweep = sorted(set(config.r2_list)) if need_prior else [config.r1]
    kgrid = kgrid_for_radius(max(r2_sweep) if need_prior else config.r1, config.k_spacing)

    result = PipelineResult(config=config, phantom=phantom)
    basis = make_pattern_basis(config.electrodes)

    for i_noise, level in enumerate(config.noise_levels):
        seed = config.noise_seed(i_noise)
        say(f"[noise {level:g}] simulating measurements")
        t0 = time.time()
        geometry_parts = dict(radius=config.radius_mm, electrodes=config.electrodes,
                              coverage=config.coverage, contact=config.contact_impedance,
                              meshes=(config.data_mesh_nodes, config.reference_mesh_nodes),
                              phantom=config.phantom_values,
                              divider=config.phantom_divider_fraction,
                              regions_file=config.regions_file)
        data = cached("dataset", lambda: simulate_dataset(
            domain, sigma_fn, basis=basis, noise_level=level, seed=seed,
            data_mesh=MeshConfig(config.data_mesh_nodes),
            reference_mesh=MeshConfig(config.reference_mesh_nodes),
            contact_impedance=config.contact_impedance,
        ), level=level, seed=seed, **geometry_parts)
        c = data["c"]
        L_sigma_n = data["L_sigma"] / c
        case = NoiseCaseResult(noise_level=level, seed=seed, c_scale=c,
                               baseline=None)
        case.diagnostics["fem_s"] = time.time() - t0

        say(f"[noise {level:g}] boundary scattering on |k| <= {config.r1:g}")
        t0 = time.time()
        t_bie_grid = cached("tbie", lambda: scattering_from_dn(
            kgrid, config.r1, L_sigma_n, data["L_one"], basis, domain,
            S=config.gamma_subsamples,
        ), L=L_sigma_n, L1=data["L_one"], r1=config.r1, S=config.gamma_subsamples,
            kmax=kgrid.kmax, m=kgrid.m)
        case.diagnostics["tbie_s"] = time.time() - t0

        say(f"[noise {level:g}] no-prior baseline reconstruction")
        t0 = time.time()
        T_base = assemble_piecewise_t(t_bie_grid, None, config.r1, config.r1, kgrid)
        base_params = ReconstructionParams(r1=config.r1, r2=config.r1, alpha=1.0,
                                           tol=config.solver_tol, maxiter=config.solver_maxiter,
                                           exterior_value=config.exterior_value)
        baseline = reconstruct(T_base, base_params, None, zgrid, scale=c)
        case.baseline = baseline
        case.images[("none", config.r1, 1.0)] = baseline
        case.diagnostics["baseline_s"] = time.time() - t0

        if need_prior:
            say(f"[noise {level:g}] constructing {config.prior_method} prior")
            prior_regions = config.prior_regions()
            xparams = config.extraction_params()
            if config.prior_method == "blind":
                prior = blind_estimate_prior(prior_regions, config.blind_values, zgrid,
                                             config.mollification_mm)
            elif config.prior_method == "extract":
                prior = build_extraction_prior(baseline.as_field(), prior_regions, xparams,
                                               zgrid, config.mollification_mm)
            elif config.prior_method == "iterate":
                prior = blind_estimate_prior(prior_regions, config.blind_values, zgrid,
                                             config.mollification_mm)
            case.prior = prior
            case.prior_values = dict(prior.values)

            def run_prior_sweep(prior_field, r2_values):
                return cached("prior_sweep", lambda: prior_scattering_sweep(
                    prior_field, kgrid, config.r1, r2_values, zgrid,
                    periodic_m=config.periodic_m, periodic_s=config.periodic_s,
                    tol=config.solver_tol, maxiter=config.solver_maxiter,
                    use_conjugate_symmetry=config.use_conjugate_symmetry,
                ), tilde=prior_field.sigma_tilde.values,
                    verts=np.concatenate([r.vertices for r in prior_field.regions]),
                    moll=prior_field.mollification_radius,
                    pm=config.periodic_m, ps=config.periodic_s,
                    kmax=kgrid.kmax, m=kgrid.m, r2s=tuple(sorted(r2_values)),
                    zn=zgrid.n, zr=zgrid.radius, tol=config.solver_tol,
                    sym=config.use_conjugate_symmetry)

            if config.prior_method == "iterate":
                say(f"[noise {level:g}] iteration source reconstruction "
                    f"(R2={config.iterate_source_r2:g}, alpha={config.iterate_source_alpha:g})")
                t0 = time.time()
                src_r2 = [config.iterate_source_r2]
                t_pr_grid, mu_int_src, diag0 = run_prior_sweep(prior, src_r2)
                T_src = assemble_piecewise_t(t_bie_grid, t_pr_grid, config.r1,
                                             config.iterate_source_r2, kgrid)
                src_params = replace(base_params, r2=config.iterate_source_r2,
                                     alpha=config.iterate_source_alpha)
                source_img = reconstruct(T_src, src_params,
                                         _muint_full(mu_int_src[config.iterate_source_r2], zgrid),
                                         zgrid, scale=c)
                case.diagnostics["iterate_source_s"] = time.time() - t0
                from .priors import iterate_prior

                prior = iterate_prior(source_img.as_field(), prior_regions, xparams, zgrid,
                                      config.mollification_mm)
                case.prior = prior
                case.prior_values = dict(prior.values)
                case.images[("blind_source", config.iterate_source_r2,
                             config.iterate_source_alpha)] = source_img

            say(f"[noise {level:g}] prior frequency sweep to R2 = {max(r2_sweep):g}")
            t0 = time.time()
            t_pr_grid, mu_int_by_r2, ls_diag = run_prior_sweep(prior, r2_sweep)
            case.diagnostics.update(ls_diag)
            case.diagnostics["prior_sweep_s"] = time.time() - t0
            case.mu_int = mu_int_by_r2

            for r2 in r2_sweep:
                try:
                    T = assemble_piecewise_t(t_bie_grid, t_pr_grid, config.r1, r2, kgrid)
                    if case.t_field is None or r2 == max(r2_sweep):
                        case.t_field = T
                    params_list = [
                        replace(base_params, r2=r2, alpha=a) for a in config.alpha_list
                    ]
                    say(f"[noise {level:g}] D-bar sweep R2 = {r2:g} ({len(params_list)} weights)")
                    t0 = time.time()
                    images = reconstruct_sweep(T, params_list, _muint_full(mu_int_by_r2[r2], zgrid),
                                               zgrid, scale=c)
                    dt = time.time() - t0
                    for p, img in zip(params_list, images):
                        img.metadata["runtime_s"] = dt / len(params_list)
                        case.images[(config.prior_method, r2, p.alpha)] = img
                except Exception as exc:  # noqa: BLE001 - cell failures must not kill siblings
                    case.failures[f"r2={r2:g}"] = str(exc)
        else:
            case.t_field = T_base

        metric_regions = regions_true
        for key, img in case.images.items():
            case.metrics[key] = compute_metrics(img, phantom, metric_regions)
            case.metrics[key].runtime_s["image"] = img.metadata.get("runtime_s", 0.0)
        result.cases.append(case)

    result.runtime_s["total"] = time.time() - t_start
    return result


def _muint_full(mu_int_masked: MuIntField, zgrid: ZGrid) -> MuIntField:
    """Lift domain-masked mu_int samples onto the full grid for reconstruct()."""
    if mu_int_masked.values.shape == zgrid.points.shape:
        return mu_int_masked
    full = np.ones(zgrid.points.shape, dtype=complex)
    full[zgrid.domain_mask] = mu_int_masked.values
    return MuIntField(values=full, R2=mu_int_masked.R2)


def _image_name(key) -> str:
    method, r2, alpha = key
    return f"{method}_r2-{r2:g}_alpha-{alpha:g}".replace(".", "p")


def write_outputs(result: PipelineResult, out_dir=None) -> dict:
    """Write CSV grids, PNG heatmaps, and the JSON manifest; returns the manifest.

    Reconstructions of one noise case share a color scale taken from that
    case's no-prior baseline, mirroring how sweep figures are compared.
    """
    cfg = result.config
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)

    import matplotlib
    import scipy

    manifest = {
        "config": cfg.to_json(),
        "config_hash": cfg.config_hash(),
        "versions": {"numpy": np.__version__, "scipy": scipy.__version__,
                     "matplotlib": matplotlib.__version__},
        "noise_cases": [],
        "justifications": [],
    }
    regions = result.config.phantom_regions()
    phantom_csv = out / "phantom.csv"
    np.savetxt(phantom_csv, result.phantom.values, delimiter=",", fmt="%.17g")

    for case in result.cases:
        masked = case.baseline.masked_values()
        scale = (float(masked.min()), float(masked.max()))
        case_doc = {
            "noise_level": case.noise_level,
            "seed": case.seed,
            "c_scale": case.c_scale,
            "color_scale": {"vmin": scale[0], "vmax": scale[1], "source": "no-prior baseline"},
            "prior_values": case.prior_values,
            "diagnostics": case.diagnostics,
            "failures": case.failures,
            "images": [],
        }
        tag = f"noise-{case.noise_level:g}".replace(".", "p")
        if case.t_field is not None:
            from .cgo_boundary import save_scattering_csv

            save_scattering_csv(out / f"scattering_{tag}.csv", case.t_field.kgrid,
                                case.t_field.values, case.t_field.flags)
            render_scattering_png(case.t_field.values, case.t_field.kgrid,
                                  out / f"scattering_{tag}.png", title=f"|T|, noise {case.noise_level:g}")
        if case.prior is not None:
            np.savetxt(out / f"prior_{tag}.csv", case.prior.sigma_pr.values,
                       delimiter=",", fmt="%.17g")
            render_conductivity_png(case.prior.sigma_pr.values, case.prior.sigma_pr.grid,
                                    out / f"prior_{tag}.png", regions=regions,
                                    title=f"prior, noise {case.noise_level:g}")
            case_doc["prior_files"] = [f"prior_{tag}.csv", f"prior_{tag}.png"]
        for key, img in sorted(case.images.items()):
            name = f"{tag}_{_image_name(key)}"
            csv_path = out / "images" / f"{name}.csv"
            png_path = out / "images" / f"{name}.png"
            np.savetxt(csv_path, img.values, delimiter=",", fmt="%.17g")
            render_conductivity_png(
                img.values, img.grid, png_path, vmin=scale[0], vmax=scale[1],
                title=f"{key[0]}, R2={key[1]:g}, alpha={key[2]:g}, noise {case.noise_level:g}",
                regions=regions, scale_tag=f"shared:noise-{case.noise_level:g}",
            )
            case_doc["images"].append({
                "file": str(csv_path.relative_to(out)),
                "png": str(png_path.relative_to(out)),
                "method": key[0], "r2": key[1], "alpha": key[2],
                "metrics": case.metrics[key].to_json(),
                "solver": img.metadata.get("solver", {}),
            })
        manifest["noise_cases"].append(case_doc)

    manifest["runtime_s"] = result.runtime_s
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest
