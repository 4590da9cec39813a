"""Rate RNNs trained with exact and truncated gradient rules, with loss-curvature
and gradient-geometry instrumentation."""
from .core import (LossSpec, NetworkParams, NeuronConfig, Trajectory, forward, init_params, loss,
                   loss_and_error, loss_at)
from .rules import (GradientEstimate, compute_gradient, grad_bptt, grad_rtrl, grad_tbptt, grad_truncated)
from .curvature import (curvature_report, dense_hessian, hessian_operator, hvp, leading_eigenvalue,
                        top_k_eigenvalues)
from .geometry import decompose

__version__ = "0.1.0"
