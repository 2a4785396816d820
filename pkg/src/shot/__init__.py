"""Spatial heavy-tailed scale mixtures over sparse GMRF fields."""

from .errors import (CoverageError, DataError, EmptyCandidateError, GeometryError, MeshLoadError,
                     NumericError, OutOfDomainError, ParameterError, PreprocessingError, ShotError,
                     SizeError, UndefinedEstimateError)
from .mesh import (FemMatrices, SpdeOperator, TriMesh, build_rect_mesh, fem_matrices, load_mesh,
                   precision_matrix, projection_matrix, save_mesh)
from .basis import (BasisSystem, KnotSet, basis_system, candidate_knots, default_phi_grid,
                    maxmin_order, phi_bounds, wendland2)
from .model import MixParams, ModelParams, matern_rho, scale_field, simulate_core, simulate_full
from .tail import chi_R, chi_X, chi_u_empirical, chibar_u_empirical, hot_chi, hot_chibar
from .inference import ChainConfig, Dataset, make_dataset, preprocess, run_chain

__version__ = "0.1.0"
