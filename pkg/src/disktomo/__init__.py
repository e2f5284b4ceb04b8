"""Travel-time tomography on the unit disk.

Reconstructs a refractive index n(x) from boundary time-of-flight data by
tracing geodesics of the conformal metric n^2 |dx|^2, applying the ray
transform and an approximate backprojection, and minimizing a Tikhonov
functional with adaptive re-linearization.
"""

__version__ = "0.1.0"

from .adjoint import (BackprojectionConfig, NoValidTraceError, backproject,
                      backproject_field, backproject_many,
                      nearest_tangent_index, trace_line_offset)
from .field import (FieldFormatError, GridSpec, PhantomParams, ScalarField,
                    count_disk_nodes, disk_node_mask, eval_field,
                    eval_gradient, phantom_constant_curvature, phantom_peaks,
                    phantom_ring_peaks, read_field, write_field)
from .geodesic import (GeodesicTrace, MaxStepsError, OutOfDiskError, RayState,
                       StepControl, euclidean_phase, euclidean_projection,
                       integrate, integrate_batch, ode_rhs, perp)
from .recon import (IterationLog, LogFormatError, ReconConfig,
                    TooManyInvalidRays, ZeroResidual, landweber_step,
                    outer_loop, read_iteration_log, select_stopping_index,
                    soft_threshold_step, tikhonov_value, write_iteration_log)
from .transform import (DegenerateScaleError, GeodesicSet, RaySet, Sinogram,
                        SinogramFormatError, SplitMix64, TraceFormatError,
                        add_noise, build_ray_set, forward_linearized,
                        forward_nonlinear, read_sinogram, read_traces,
                        trace_ray_set, write_sinogram, write_traces)

__all__ = [
    "__version__",
    "BackprojectionConfig", "NoValidTraceError", "backproject",
    "backproject_field", "backproject_many", "nearest_tangent_index",
    "trace_line_offset",
    "FieldFormatError", "GridSpec", "PhantomParams", "ScalarField",
    "count_disk_nodes", "disk_node_mask", "eval_field", "eval_gradient",
    "phantom_constant_curvature", "phantom_peaks", "phantom_ring_peaks",
    "read_field", "write_field",
    "GeodesicTrace", "MaxStepsError", "OutOfDiskError", "RayState",
    "StepControl", "euclidean_phase", "euclidean_projection", "integrate",
    "integrate_batch", "ode_rhs", "perp",
    "IterationLog", "LogFormatError", "ReconConfig", "TooManyInvalidRays",
    "ZeroResidual", "landweber_step", "outer_loop", "read_iteration_log",
    "select_stopping_index", "soft_threshold_step", "tikhonov_value",
    "write_iteration_log",
    "DegenerateScaleError", "GeodesicSet", "RaySet", "Sinogram",
    "SinogramFormatError", "SplitMix64", "TraceFormatError", "add_noise",
    "build_ray_set", "forward_linearized", "forward_nonlinear",
    "read_sinogram", "read_traces", "trace_ray_set", "write_sinogram",
    "write_traces",
]
