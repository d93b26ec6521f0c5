"""Modular models of flexible subsystems with translating interfaces."""

from ._accel import BACKEND
from .core import (
    DISPLACEMENT,
    VELOCITY,
    DescriptorStateSpace,
    FrfSweep,
    SecondOrderSystem,
    build_modal_damping,
    frf_eval,
    to_descriptor,
)
from .errors import (
    CacheMissError,
    GridRangeError,
    ModlinkError,
    NumericalError,
    PortMismatchError,
    SingularFrequencyError,
    ValidationError,
)
from .interconnect import (
    BlockSystem,
    InterconnectionMatrix,
    InterfaceSide,
    InterfaceSpec,
    OperatingPoint,
    SpringSpec,
    VirtualPoint,
    block_collect,
    block_frf,
    external_io,
    interp_weights,
    lft_assemble,
    posdep_k11,
    spring_k11,
    static_k11,
    sweep_operating_points,
)
from .models import (
    StageModelConfig,
    TwoStageBench,
    make_chain,
    make_operating_grid,
    make_two_stage_bench,
)
from .cache import FrfCache, system_digest
from .manifest import (
    ManifestError,
    ModelManifest,
    bench_to_manifest_files,
    build_model,
    load_manifest,
    save_manifest,
)
from .mor import (
    ErrorReport,
    OrderSearchResult,
    ReductionBasis,
    assemble_reduced,
    minimal_order_search,
    reduce_bt,
    reduce_cb,
    reduce_hh,
    relative_error,
    verification_grid,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DISPLACEMENT",
    "VELOCITY",
    "DescriptorStateSpace",
    "FrfSweep",
    "SecondOrderSystem",
    "build_modal_damping",
    "frf_eval",
    "to_descriptor",
    "BlockSystem",
    "InterconnectionMatrix",
    "InterfaceSide",
    "InterfaceSpec",
    "OperatingPoint",
    "SpringSpec",
    "VirtualPoint",
    "block_collect",
    "block_frf",
    "external_io",
    "interp_weights",
    "lft_assemble",
    "posdep_k11",
    "spring_k11",
    "static_k11",
    "sweep_operating_points",
    "StageModelConfig",
    "TwoStageBench",
    "make_chain",
    "make_operating_grid",
    "make_two_stage_bench",
    "FrfCache",
    "system_digest",
    "ManifestError",
    "ModelManifest",
    "bench_to_manifest_files",
    "build_model",
    "load_manifest",
    "save_manifest",
    "ErrorReport",
    "OrderSearchResult",
    "ReductionBasis",
    "assemble_reduced",
    "minimal_order_search",
    "reduce_bt",
    "reduce_cb",
    "reduce_hh",
    "relative_error",
    "verification_grid",
    "ModlinkError",
    "ValidationError",
    "NumericalError",
    "SingularFrequencyError",
    "GridRangeError",
    "PortMismatchError",
    "CacheMissError",
]
