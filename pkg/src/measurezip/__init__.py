"""Nyström compression of current and varifold shape measures, with compressed diffeomorphic matching."""

__version__ = "0.1.0"

from .compress import (CompressionResult, choose_m_trace, compress, compression_error2, error_curve,
                       nystrom_krr_weights, project_measure)
from .kernels import (FactorizationError, Gaussian, LinearSpherical, Product, SphericalGaussian, SumOfGaussians,
                      dual_distance2, dual_inner, dual_norm2, eval_kernel, kernel_matrix, parse_kernel_spec)
from .measures import BaseSpace, DiracMeasure, EmptyMeasureError, current_of_mesh, varifold_of_mesh
from .mesh import MeshError, TriangleMesh, center_and_scale, load_mesh, save_obj, triangle_geometry
from .nystrom import (ControlSet, SamplerConfig, eigen_tail_sum, exact_rls, mcmc_kdpp_sample,
                      nystrom_trace_error, recursive_rls_sample, uniform_sample)
from .registration import (DeformationConfig, DivergenceError, MatchResult, ShootingState, compressed_match,
                           flow_points, hausdorff_distance, objective, shoot)

__all__ = [
    "BaseSpace",
    "CompressionResult",
    "ControlSet",
    "DeformationConfig",
    "DiracMeasure",
    "DivergenceError",
    "EmptyMeasureError",
    "FactorizationError",
    "Gaussian",
    "LinearSpherical",
    "MatchResult",
    "MeshError",
    "Product",
    "SamplerConfig",
    "ShootingState",
    "SphericalGaussian",
    "SumOfGaussians",
    "TriangleMesh",
    "center_and_scale",
    "choose_m_trace",
    "compress",
    "compressed_match",
    "compression_error2",
    "current_of_mesh",
    "dual_distance2",
    "dual_inner",
    "dual_norm2",
    "eigen_tail_sum",
    "error_curve",
    "eval_kernel",
    "exact_rls",
    "flow_points",
    "hausdorff_distance",
    "kernel_matrix",
    "load_mesh",
    "mcmc_kdpp_sample",
    "nystrom_krr_weights",
    "nystrom_trace_error",
    "objective",
    "parse_kernel_spec",
    "project_measure",
    "recursive_rls_sample",
    "save_obj",
    "shoot",
    "triangle_geometry",
    "uniform_sample",
    "varifold_of_mesh",
]
