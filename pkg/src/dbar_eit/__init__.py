"""2-D D-bar reconstruction for EIT with spatial a priori information.

The package simulates electrode measurements on conductivity phantoms
(complete electrode model FEM), builds discrete DN maps, computes the
scattering transform from boundary data and from a prior conductivity
distribution, and solves the weighted D-bar equation to form conductivity
images.  See the README for the pipeline and CLI entry points.
"""

from .geometry import (DomainDisc, KGrid, PolygonRegion, ZGrid, build_kgrid, build_zgrid,
                       load_regions_json, point_in_polygon, region_mask)
from .forward import (CurrentPatternBasis, VoltageFrame, add_noise, adjacent_patterns,
                      dn_from_nd, homogeneous_dn, make_pattern_basis, nd_from_data,
                      orthonormalize_patterns, simulate_dataset, simulate_voltages)
from .mesh import DiscMesh, FEMProblem, MeshConfig, disc_mesh, fem_solve_cem
from .priors import (ConductivityField, ExtractionParams, PriorField, assemble_piecewise_sigma,
                     blind_estimate_prior, build_extraction_prior, extract_background,
                     extract_heart_aorta, extract_lungs, extract_spine, iterate_prior, mollify)
from .cgo_boundary import (BoundaryCGOTrace, FaddeevKernelMatrix, ScatteringSampleBIE,
                           faddeev_greens, gamma_matrix, solve_bie, t_bie)
from .cgo_interior import (InteriorCGOField, PeriodicGrid, PotentialField, Provenance,
                           ScatteringField, assemble_piecewise_t, build_periodic_grid,
                           periodized_gk, q_from_sigma, solve_ls, t_pr)
from .dbar import (ConductivityImage, MuIntField, ReconstructionParams, compute_mu_int,
                   reconstruct, reconstruct_sweep, sigma_from_mu, solve_dbar_at_z)
from .pipeline import ExperimentConfig, Metrics, compute_metrics, run_pipeline, write_outputs
from . import thorax

__version__ = "0.1.0"
