"""Global robustness certification, refinement and training for ReLU networks."""
from .graph import Graph, GraphBuilder, GraphError, Node, build_mlp, forward, select_output, validate
from .lowering import lower, lower_conv, lower_maxpool
from .propagate import (
    ROBUST,
    UNKNOWN,
    BoundsPair,
    BranchTerm,
    CertificateReport,
    ConcreteBounds,
    LinearForm,
    backward_substitute,
    certify,
    compute_relu_input_intervals,
    concretize,
    output_variation_bounds,
)

__version__ = "0.1.0"
