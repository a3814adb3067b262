"""Federated learning across heterogeneous client architectures.

Clients hold structurally different members of one VGG-style network
family.  Function-preserving transformations (widen, deepen, narrow,
shallow) morph models between family members, which lets a single
global model in the union architecture absorb every client's update
and be trimmed back down for redistribution.  Baseline strategies
(standalone, clustered FedAvg, common-prefix sharing) run on the same
round loop for comparison.
"""

from .arch import (
    ArchitectureSpec,
    LayerSpec,
    conv,
    dense,
    flatten,
    format_arch,
    make_arch,
    parse_arch,
    pool,
    shape_trace,
    validate_arch,
)
from .data import (
    Dataset,
    PartitionSpec,
    gen_synthetic,
    load_idx,
    partition,
    read_idx,
    round_subsample,
    split_per_class,
    write_idx,
)
from .errors import (
    ArchitectureError,
    ConfigError,
    Error,
    IdxFormatError,
    IncompatibilityError,
    ShapeError,
    UnsupportedTransformError,
)
from .federation import (
    ClientMetric,
    ClientState,
    Hyperparams,
    RoundMetrics,
    client_weight,
    common_prefix_length,
    fedavg,
    local_train,
    run_clustered_fl,
    run_fedadp,
    run_flexifed,
    run_standalone,
    sample_clients,
)
from .netchange import (
    DeepenStep,
    NarrowStep,
    ShallowStep,
    TransformPlan,
    WidenStep,
    apply_plan,
    diff_arch,
    net_change,
    to_deeper,
    to_narrower,
    to_shallower,
    to_wider,
    union_arch,
)
from .nn import (
    ModelParams,
    evaluate,
    forward,
    init_model,
    loss_and_backward,
    sgd_step,
)
from .seeding import derive_seed

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "LayerSpec",
    "conv",
    "dense",
    "flatten",
    "pool",
    "make_arch",
    "parse_arch",
    "format_arch",
    "shape_trace",
    "validate_arch",
    "Dataset",
    "PartitionSpec",
    "gen_synthetic",
    "load_idx",
    "read_idx",
    "write_idx",
    "partition",
    "round_subsample",
    "split_per_class",
    "Error",
    "ArchitectureError",
    "ShapeError",
    "IncompatibilityError",
    "UnsupportedTransformError",
    "IdxFormatError",
    "ConfigError",
    "ClientMetric",
    "ClientState",
    "Hyperparams",
    "RoundMetrics",
    "client_weight",
    "common_prefix_length",
    "fedavg",
    "local_train",
    "sample_clients",
    "run_fedadp",
    "run_standalone",
    "run_clustered_fl",
    "run_flexifed",
    "ModelParams",
    "init_model",
    "forward",
    "loss_and_backward",
    "sgd_step",
    "evaluate",
    "TransformPlan",
    "WidenStep",
    "DeepenStep",
    "NarrowStep",
    "ShallowStep",
    "to_wider",
    "to_deeper",
    "to_narrower",
    "to_shallower",
    "union_arch",
    "diff_arch",
    "apply_plan",
    "net_change",
    "derive_seed",
]
