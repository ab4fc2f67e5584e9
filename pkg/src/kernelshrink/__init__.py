"""Channel-wise sub-kernel search for 3D convolutions.

The package replaces each output channel of a 3D convolution with an
independently chosen cheaper sub-kernel (1D/2D/3D cuboids), discovers the
per-channel assignment with differentiable search over a multi-path
network, and accounts for the parameter/FLOP cost of the result.  A
self-contained float64 autodiff engine keeps every step verifiable
against finite differences and algebraic identities at desk scale.
"""

from .backbone import BackboneSpec, LayerSpec, SchemaError, build_network
from .kernels import (CostModel, KernelShape, SubKernelSet, cost_beta,
                      default_subkernel_set, embed_subkernel,
                      enumerate_subkernels, flop_count, param_count)
from .optim import SGD, DivergenceError, polynomial_lr
from .search import (CostReport, ReplacementConfig, SearchConfig,
                     build_final_network, cost_report, finalize, manual_config,
                     penalty_loss, run_cost_priority, run_performance_priority,
                     supernet_penalty)
from .supernet import COST, PERF, PathSample, SuperNet, build_supernet, inflate_init
from .tasks import (Dataset, EvalResult, SyntheticTaskSpec, TrainConfig, dsc,
                    evaluate, generate, sliding_window_infer, train)
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec", "LayerSpec", "SchemaError", "build_network",
    "CostModel", "KernelShape", "SubKernelSet", "cost_beta", "default_subkernel_set",
    "embed_subkernel", "enumerate_subkernels", "flop_count", "param_count",
    "SGD", "DivergenceError", "polynomial_lr",
    "CostReport", "ReplacementConfig", "SearchConfig", "build_final_network",
    "cost_report", "finalize", "manual_config", "penalty_loss",
    "run_cost_priority", "run_performance_priority", "supernet_penalty",
    "COST", "PERF", "PathSample", "SuperNet", "build_supernet", "inflate_init",
    "Dataset", "EvalResult", "SyntheticTaskSpec", "TrainConfig", "dsc",
    "evaluate", "generate", "sliding_window_infer", "train",
    "Tensor", "__version__",
]
